"""Multi-label evaluation suite: ranking measures, set measures, reports.

Rank convention used by every ranking metric: rank(j) = |{k : score_k >=
score_j}|, so tied labels all share the worst rank of their tie group. Tied
(true, false) score pairs count as ranking violations. Thresholded set metrics
treat score == threshold as positive. Argmax ties resolve to the lowest label
index. Samples whose true-label set is empty or full are degenerate: they are
excluded from ranking-metric means (and counted), but still enter the set
metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    """The batch cannot support the requested metric."""


@dataclass
class PredictionBatch:
    """Scores plus ground truth for a batch of samples.

    scores: (n_samples, n_labels) finite reals. true_sets: one sorted index
    array per sample. principal: per-sample single true label index, or None
    when the data carries no principal diagnosis. threshold in (0, 1).
    """

    scores: np.ndarray
    true_sets: list
    principal: np.ndarray | None = None
    threshold: float = 0.5

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise MetricError("scores must be a 2-D (samples x labels) array")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores contain NaN or Inf")
        if len(self.true_sets) != self.scores.shape[0]:
            raise MetricError(
                f"{len(self.true_sets)} true sets for {self.scores.shape[0]} samples"
            )
        if not (0.0 < self.threshold < 1.0):
            raise MetricError(f"threshold must be in (0, 1), got {self.threshold}")
        n_labels = self.scores.shape[1]
        cleaned = []
        for i, s in enumerate(self.true_sets):
            arr = np.unique(np.asarray(list(s), dtype=np.int64))
            if arr.size and (arr[0] < 0 or arr[-1] >= n_labels):
                raise MetricError(f"sample {i}: true label index out of range")
            cleaned.append(arr)
        self.true_sets = cleaned
        if self.principal is not None:
            self.principal = np.asarray(self.principal, dtype=np.int64)
            if self.principal.shape != (self.scores.shape[0],):
                raise MetricError("principal must hold one label per sample")
            for i, p in enumerate(self.principal):
                if p not in self.true_sets[i]:
                    raise MetricError(
                        f"sample {i}: principal label {p} not in its true set"
                    )

    @property
    def n_samples(self) -> int:
        return self.scores.shape[0]

    @property
    def n_labels(self) -> int:
        return self.scores.shape[1]

    def is_degenerate(self, i: int) -> bool:
        t = len(self.true_sets[i])
        return t == 0 or t == self.n_labels

    def take(self, rows) -> "PredictionBatch":
        rows = np.asarray(rows, dtype=np.int64)
        return PredictionBatch(
            scores=self.scores[rows],
            true_sets=[self.true_sets[i] for i in rows],
            principal=None if self.principal is None else self.principal[rows],
            threshold=self.threshold,
        )


def _ranks(scores_row: np.ndarray) -> np.ndarray:
    """rank(j) = number of labels scoring >= score_j (worst rank on ties)."""
    srt = np.sort(scores_row)
    below = np.searchsorted(srt, scores_row, side="left")
    return scores_row.size - below


def _evaluable(batch: PredictionBatch) -> list:
    rows = [i for i in range(batch.n_samples) if not batch.is_degenerate(i)]
    if not rows:
        raise MetricError("no evaluable samples: every sample has an empty or "
                          "full true-label set")
    return rows


def lrap(batch: PredictionBatch) -> float:
    """Label-ranking average precision: precision-at-rank of each true label."""
    rows = _evaluable(batch)
    total = 0.0
    for i in rows:
        ranks = _ranks(batch.scores[i])
        true_ranks = np.sort(ranks[batch.true_sets[i]])
        # |{k in true : rank(k) <= rank(j)}| via position in the sorted ranks
        covered = np.searchsorted(true_ranks, true_ranks, side="right")
        total += float(np.mean(covered / true_ranks))
    return total / len(rows)


def coverage_error(batch: PredictionBatch) -> float:
    """Mean over samples of the worst rank among true labels."""
    rows = _evaluable(batch)
    total = 0.0
    for i in rows:
        ranks = _ranks(batch.scores[i])
        total += float(ranks[batch.true_sets[i]].max())
    return total / len(rows)


def ranking_loss(batch: PredictionBatch) -> float:
    """Fraction of (true, false) label pairs ordered wrongly; ties violate."""
    rows = _evaluable(batch)
    total = 0.0
    for i in rows:
        ranks = _ranks(batch.scores[i])
        true = batch.true_sets[i]
        true_scores = batch.scores[i][true]
        # rank counts all labels scoring >= s; subtract the true ones to get
        # the false labels scoring >= s (each one is a violated pair)
        true_sorted = np.sort(true_scores)
        n_true_geq = len(true) - np.searchsorted(true_sorted, true_scores,
                                                 side="left")
        violations = float(np.sum(ranks[true] - n_true_geq))
        n_false = batch.n_labels - len(true)
        total += violations / (len(true) * n_false)
    return total / len(rows)


def predicted_sets(batch: PredictionBatch) -> list:
    """Thresholded positives per sample; score == threshold counts positive."""
    return [np.flatnonzero(batch.scores[i] >= batch.threshold)
            for i in range(batch.n_samples)]


@dataclass
class SetMetrics:
    sample_f1: float
    jaccard: float
    overcoding: int  # total predicted-but-false labels
    undercoding: int  # total true-but-missed labels
    subset_accuracy: float


def set_metrics(batch: PredictionBatch) -> SetMetrics:
    """Sample-averaged F1 and Jaccard plus over/under-coding tallies."""
    preds = predicted_sets(batch)
    f1_total = jac_total = exact = 0.0
    over = under = 0
    for p, y in zip(preds, batch.true_sets):
        inter = np.intersect1d(p, y, assume_unique=True).size
        union = p.size + y.size - inter
        jac_total += 1.0 if union == 0 else inter / union
        f1_total += 1.0 if (p.size + y.size) == 0 else 2.0 * inter / (p.size + y.size)
        over += p.size - inter
        under += y.size - inter
        exact += 1.0 if (p.size == y.size == inter) else 0.0
    n = batch.n_samples
    return SetMetrics(sample_f1=f1_total / n, jaccard=jac_total / n,
                      overcoding=over, undercoding=under,
                      subset_accuracy=exact / n)


def f1_score(batch: PredictionBatch, average: str = "samples") -> float:
    """F1 with selectable averaging: 'samples' (default), 'micro' or 'macro'."""
    if average == "samples":
        return set_metrics(batch).sample_f1
    preds = predicted_sets(batch)
    n, L = batch.n_samples, batch.n_labels
    pred_mat = np.zeros((n, L), dtype=bool)
    true_mat = np.zeros((n, L), dtype=bool)
    for i in range(n):
        pred_mat[i, preds[i]] = True
        true_mat[i, batch.true_sets[i]] = True
    tp = (pred_mat & true_mat).sum(axis=0).astype(np.float64)
    fp = (pred_mat & ~true_mat).sum(axis=0).astype(np.float64)
    fn = (~pred_mat & true_mat).sum(axis=0).astype(np.float64)
    if average == "micro":
        denom = 2 * tp.sum() + fp.sum() + fn.sum()
        return 1.0 if denom == 0 else float(2 * tp.sum() / denom)
    if average == "macro":
        denom = 2 * tp + fp + fn
        per_label = np.where(denom == 0, 1.0, 2 * tp / np.where(denom == 0, 1, denom))
        return float(per_label.mean())
    raise MetricError(f"unknown F1 averaging mode {average!r}")


def primary_accuracy(batch: PredictionBatch) -> float:
    """Fraction of samples whose top-scored label is the principal diagnosis.

    Argmax ties break to the lowest label index.
    """
    if batch.principal is None:
        raise MetricError("batch carries no principal labels")
    top = np.argmax(batch.scores, axis=1)  # first occurrence = lowest index
    return float(np.mean(top == batch.principal))


def subset_accuracy(batch: PredictionBatch) -> float:
    return set_metrics(batch).subset_accuracy


@dataclass
class MetricsReport:
    """The full measure suite for one batch, plus optional per-group reports."""

    n_samples: int
    n_degenerate: int
    lrap: float | None
    coverage_error: float | None
    ranking_loss: float | None
    sample_f1: float
    jaccard: float
    subset_accuracy: float
    overcoding: int
    undercoding: int
    primary_accuracy: float | None
    micro_f1: float | None = None
    macro_f1: float | None = None
    subreports: dict = field(default_factory=dict)


def compute_report(batch: PredictionBatch, include_f1_variants: bool = False
                   ) -> MetricsReport:
    """All measures on one batch; ranking metrics are None if every sample is
    degenerate (set metrics still apply)."""
    n_degenerate = sum(batch.is_degenerate(i) for i in range(batch.n_samples))
    sets = set_metrics(batch)
    if n_degenerate < batch.n_samples:
        rank_metrics = (lrap(batch), coverage_error(batch), ranking_loss(batch))
    else:
        rank_metrics = (None, None, None)
    primary = None
    if batch.principal is not None:
        primary = primary_accuracy(batch)
    return MetricsReport(
        n_samples=batch.n_samples,
        n_degenerate=n_degenerate,
        lrap=rank_metrics[0],
        coverage_error=rank_metrics[1],
        ranking_loss=rank_metrics[2],
        sample_f1=sets.sample_f1,
        jaccard=sets.jaccard,
        subset_accuracy=sets.subset_accuracy,
        overcoding=sets.overcoding,
        undercoding=sets.undercoding,
        primary_accuracy=primary,
        micro_f1=f1_score(batch, "micro") if include_f1_variants else None,
        macro_f1=f1_score(batch, "macro") if include_f1_variants else None,
    )


def grouped_report(batch: PredictionBatch, group_values,
                   include_f1_variants: bool = False) -> MetricsReport:
    """Global report plus one sub-report per distinct group value.

    Sub-reports are ordered by descending primary accuracy (sample count,
    then group name break ties), matching the layout of ranked per-category
    accuracy tables.
    """
    if len(group_values) != batch.n_samples:
        raise MetricError(f"{len(group_values)} group values for "
                          f"{batch.n_samples} samples")
    report = compute_report(batch, include_f1_variants)
    groups: dict[str, list] = {}
    for i, g in enumerate(group_values):
        groups.setdefault(str(g), []).append(i)
    subs = {}
    for g, rows in groups.items():
        subs[g] = compute_report(batch.take(rows), include_f1_variants)

    def sort_key(item):
        g, rep = item
        acc = rep.primary_accuracy if rep.primary_accuracy is not None else -1.0
        return (-acc, -rep.n_samples, g)

    report.subreports = dict(sorted(subs.items(), key=sort_key))
    return report


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("model", "average_precision", "ranking_loss",
                   "coverage_error", "jaccard", "f1", "primary_accuracy")

GROUP_COLUMNS = ("group", "n_samples", "primary_accuracy", "f1", "jaccard")


def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return "n/a"
    return f"{value:.{digits}f}"


def render_summary_row(report: MetricsReport, model_name: str,
                       header: bool = True, sep: str = "\t") -> str:
    """One Tables-2/3-shaped metric row for a model."""
    lines = []
    if header:
        lines.append(sep.join(SUMMARY_COLUMNS))
    lines.append(sep.join([
        model_name,
        _fmt(report.lrap),
        _fmt(report.ranking_loss),
        _fmt(report.coverage_error),
        _fmt(report.jaccard),
        _fmt(report.sample_f1),
        _fmt(report.primary_accuracy),
    ]))
    return "\n".join(lines) + "\n"


def render_group_table(report: MetricsReport, top_k: int | None = None,
                       sep: str = "\t") -> str:
    """Per-group accuracy table sorted by descending primary accuracy."""
    lines = [sep.join(GROUP_COLUMNS)]
    items = list(report.subreports.items())
    if top_k is not None:
        items = items[:top_k]
    for g, rep in items:
        lines.append(sep.join([
            g, str(rep.n_samples), _fmt(rep.primary_accuracy),
            _fmt(rep.sample_f1), _fmt(rep.jaccard),
        ]))
    return "\n".join(lines) + "\n"


def render_full_report(report: MetricsReport, model_name: str = "model") -> str:
    """Structured text document: summary row, coding-error tallies, groups."""
    parts = [render_summary_row(report, model_name)]
    parts.append(
        f"samples\t{report.n_samples}\n"
        f"degenerate_samples\t{report.n_degenerate}\n"
        f"overcoding_total\t{report.overcoding}\n"
        f"undercoding_total\t{report.undercoding}\n"
        f"subset_accuracy\t{_fmt(report.subset_accuracy)}\n"
    )
    if report.micro_f1 is not None:
        parts.append(f"micro_f1\t{_fmt(report.micro_f1)}\n"
                     f"macro_f1\t{_fmt(report.macro_f1)}\n")
    if report.subreports:
        parts.append("\n" + render_group_table(report))
    return "".join(parts)
