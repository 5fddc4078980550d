"""Episode ingestion, cleaning, binarization, splitting, synthetic data.

Input format (UTF-8 CSV, header required, quoted fields allowed): every row
starts with `record_type,episode_id`, then type-specific columns:

    MED,<episode_id>,<med_code>,<dose>,<status>
    DX,<episode_id>,<seq>,<icd10_code>      (seq 1-based, 1 = principal)
    DEMO,<episode_id>,<gender>,<age_years>

Rows belonging to one episode may appear anywhere in the file; diagnoses are
ordered by seq. A prepared dataset persists as a directory of plain text
files plus a versioned meta.json (see save_dataset).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import SeededRng, SparseBinaryMatrix


class DataError(ValueError):
    """Malformed input data or dataset artifacts."""


# ---------------------------------------------------------------------------
# records and ingestion
# ---------------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode_id: str
    medications: list = field(default_factory=list)  # (med_code, dose, status)
    icd10_codes: list = field(default_factory=list)  # first = principal
    gender: str = ""
    age_years: int | None = None


def ingest(path) -> list:
    """Parse the CSV long format into one EpisodeRecord per episode_id."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return ingest_lines(f, origin=str(path))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc


def ingest_lines(lines, origin: str = "<memory>") -> list:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        return []
    if len(header) < 2 or header[0].strip() != "record_type" \
            or header[1].strip() != "episode_id":
        raise DataError(f"{origin}:1: header must start with "
                        f"'record_type,episode_id', got {header[:2]}")

    records: dict = {}
    order: list = []
    diagnoses: dict = {}   # episode_id -> {seq: code}
    seen_demo: set = set()

    def fail(msg: str):
        raise DataError(f"{origin}:{reader.line_num}: {msg}")

    for row in reader:
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        row = [c.strip() for c in row]
        if len(row) < 2:
            fail(f"row has {len(row)} columns, need at least 2")
        rtype, eid = row[0], row[1]
        if not eid:
            fail("empty episode_id")
        if eid not in records:
            records[eid] = EpisodeRecord(episode_id=eid)
            diagnoses[eid] = {}
            order.append(eid)
        rec = records[eid]

        if rtype == "MED":
            if len(row) < 5:
                fail("MED row needs columns med_code,dose,status")
            code, dose, status = row[2], row[3], row[4]
            if not code:
                fail("MED row with empty med_code")
            rec.medications.append((code, dose, status))
        elif rtype == "DX":
            if len(row) < 4:
                fail("DX row needs columns seq,icd10_code")
            try:
                seq = int(row[2])
            except ValueError:
                fail(f"DX seq must be an integer, got {row[2]!r}")
            if seq < 1:
                fail(f"DX seq must be >= 1, got {seq}")
            code = row[3]
            if not code:
                fail("DX row with empty icd10_code")
            if seq in diagnoses[eid]:
                fail(f"duplicate diagnosis seq {seq} for episode {eid}")
            diagnoses[eid][seq] = code
        elif rtype == "DEMO":
            if len(row) < 4:
                fail("DEMO row needs columns gender,age_years")
            if eid in seen_demo:
                fail(f"duplicate DEMO row for episode {eid}")
            seen_demo.add(eid)
            rec.gender = row[2]
            if row[3]:
                try:
                    age = int(row[3])
                except ValueError:
                    fail(f"age_years must be an integer, got {row[3]!r}")
                if age < 0:
                    fail(f"age_years must be >= 0, got {age}")
                rec.age_years = age
        else:
            fail(f"unknown record_type {rtype!r} (expected MED, DX or DEMO)")

    for eid in order:
        dx = diagnoses[eid]
        records[eid].icd10_codes = [dx[s] for s in sorted(dx)]
    return [records[eid] for eid in order]


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------

@dataclass
class CleaningReport:
    episodes_in: int = 0
    episodes_out: int = 0
    cancelled_meds_removed: int = 0
    codes_truncated: int = 0
    duplicate_codes_removed: int = 0
    rare_labels_removed: int = 0
    episodes_dropped: int = 0
    fixpoint_rounds: int = 0

    def summary_lines(self) -> list:
        return [
            f"episodes_in\t{self.episodes_in}",
            f"episodes_out\t{self.episodes_out}",
            f"cancelled_meds_removed\t{self.cancelled_meds_removed}",
            f"codes_truncated\t{self.codes_truncated}",
            f"duplicate_codes_removed\t{self.duplicate_codes_removed}",
            f"rare_labels_removed\t{self.rare_labels_removed}",
            f"episodes_dropped\t{self.episodes_dropped}",
            f"fixpoint_rounds\t{self.fixpoint_rounds}",
        ]


def clean(records, min_instances: int = 3,
          cancelled_statuses=("cancelled",)):
    """Apply the cleaning rules. Returns (records, CleaningReport).

    The input is not mutated. Medications whose status matches a cancelled
    status (case-insensitive) are dropped, diagnosis codes are truncated to
    their 3-character category and de-duplicated keeping first occurrence,
    then categories present in fewer than min_instances episodes and
    episodes left without labels or without medications are pruned
    alternately until nothing changes.
    """
    if min_instances < 1:
        raise ValueError("min_instances must be >= 1")
    cancelled = {s.lower() for s in cancelled_statuses}
    report = CleaningReport(episodes_in=len(records))

    staged = []
    for rec in records:
        meds = [m for m in rec.medications if m[2].lower() not in cancelled]
        report.cancelled_meds_removed += len(rec.medications) - len(meds)
        codes = []
        seen = set()
        for code in rec.icd10_codes:
            if len(code) > 3:
                report.codes_truncated += 1
            cat = code[:3]
            if cat in seen:
                report.duplicate_codes_removed += 1
                continue
            seen.add(cat)
            codes.append(cat)
        staged.append(replace(rec, medications=meds, icd10_codes=codes))

    removed_labels: set = set()
    while True:
        report.fixpoint_rounds += 1
        counts: dict = {}
        for rec in staged:
            for cat in rec.icd10_codes:
                counts[cat] = counts.get(cat, 0) + 1
        rare = {cat for cat, c in counts.items() if c < min_instances}
        if rare:
            removed_labels |= rare
            staged = [replace(r, icd10_codes=[c for c in r.icd10_codes
                                              if c not in rare])
                      for r in staged]
        kept = [r for r in staged if r.icd10_codes and r.medications]
        dropped = len(staged) - len(kept)
        report.episodes_dropped += dropped
        staged = kept
        if not rare and not dropped:
            break

    report.rare_labels_removed = len(removed_labels)
    report.episodes_out = len(staged)
    return staged, report


# ---------------------------------------------------------------------------
# vocabularies and binarization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    kind: str  # "medication-dose" or "icd10-category"

    def __post_init__(self):
        if list(self.tokens) != sorted(set(self.tokens)):
            raise ValueError(f"{self.kind} vocabulary must be sorted and "
                             f"duplicate-free")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_tokens(cls, tokens, kind: str) -> "Vocabulary":
        return cls(tokens=tuple(sorted(set(tokens))), kind=kind)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self._index[token]

    def __contains__(self, token: str) -> bool:
        return token in self._index


@dataclass
class Demographics:
    gender: tuple    # per-episode string, "" when absent
    age_years: tuple  # per-episode int or None


def med_token(code: str, dose: str) -> str:
    return f"{code}@{dose}"


@dataclass
class Dataset:
    episode_ids: tuple
    X: SparseBinaryMatrix
    Y: SparseBinaryMatrix
    feature_vocab: Vocabulary
    label_vocab: Vocabulary
    principal: np.ndarray | None = None   # per-row label index
    demographics: Demographics | None = None

    def __post_init__(self):
        n = len(self.episode_ids)
        if self.X.rows != n or self.Y.rows != n:
            raise ValueError(f"row counts differ: {n} episodes, X {self.X.rows}, "
                             f"Y {self.Y.rows}")
        if self.X.cols != len(self.feature_vocab):
            raise ValueError("X column count does not match feature vocabulary")
        if self.Y.cols != len(self.label_vocab):
            raise ValueError("Y column count does not match label vocabulary")
        if self.principal is not None:
            self.principal = np.asarray(self.principal, dtype=np.int64)
            if self.principal.shape != (n,):
                raise ValueError("principal must hold one label index per row")
            for i, p in enumerate(self.principal):
                row = self.Y.row_indices[i]
                k = np.searchsorted(row, p)
                if k >= len(row) or row[k] != p:
                    raise ValueError(f"row {i}: principal label {p} not active "
                                     f"in Y")
        if self.demographics is not None:
            if len(self.demographics.gender) != n \
                    or len(self.demographics.age_years) != n:
                raise ValueError("demographic columns must match row count")

    @property
    def n_samples(self) -> int:
        return len(self.episode_ids)

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        demo = None
        if self.demographics is not None:
            demo = Demographics(
                gender=tuple(self.demographics.gender[i] for i in rows),
                age_years=tuple(self.demographics.age_years[i] for i in rows),
            )
        return Dataset(
            episode_ids=tuple(self.episode_ids[i] for i in rows),
            X=self.X.take_rows(rows),
            Y=self.Y.take_rows(rows),
            feature_vocab=self.feature_vocab,
            label_vocab=self.label_vocab,
            principal=None if self.principal is None else self.principal[rows],
            demographics=demo,
        )


def build_vocab_and_binarize(records) -> Dataset:
    """Binarize cleaned records against freshly built sorted vocabularies."""
    if not records:
        raise DataError("no episodes to binarize")
    feat_tokens = set()
    label_tokens = set()
    for rec in records:
        if not rec.icd10_codes:
            raise DataError(f"episode {rec.episode_id}: no diagnosis codes "
                            f"(run clean() first)")
        for code, dose, _status in rec.medications:
            feat_tokens.add(med_token(code, dose))
        label_tokens.update(rec.icd10_codes)
    feature_vocab = Vocabulary.from_tokens(feat_tokens, "medication-dose")
    label_vocab = Vocabulary.from_tokens(label_tokens, "icd10-category")

    x_sets = []
    y_sets = []
    principal = np.zeros(len(records), dtype=np.int64)
    has_demo = any(r.gender or r.age_years is not None for r in records)
    for i, rec in enumerate(records):
        x_sets.append({feature_vocab[med_token(c, d)]
                       for c, d, _s in rec.medications})
        y_sets.append({label_vocab[c] for c in rec.icd10_codes})
        principal[i] = label_vocab[rec.icd10_codes[0]]
    demo = None
    if has_demo:
        demo = Demographics(
            gender=tuple(r.gender for r in records),
            age_years=tuple(r.age_years for r in records),
        )
    return Dataset(
        episode_ids=tuple(r.episode_id for r in records),
        X=SparseBinaryMatrix.from_sets(x_sets, len(feature_vocab)),
        Y=SparseBinaryMatrix.from_sets(y_sets, len(label_vocab)),
        feature_vocab=feature_vocab,
        label_vocab=label_vocab,
        principal=principal,
        demographics=demo,
    )


def reconstruct_records(ds: Dataset) -> list:
    """Inverse of build_vocab_and_binarize up to medication status/order."""
    records = []
    for i in range(ds.n_samples):
        meds = []
        for j in ds.X.row_indices[i]:
            code, dose = ds.feature_vocab.tokens[j].split("@", 1)
            meds.append((code, dose, "active"))
        labels = [ds.label_vocab.tokens[j] for j in ds.Y.row_indices[i]]
        if ds.principal is not None:
            first = ds.label_vocab.tokens[ds.principal[i]]
            labels = [first] + [c for c in labels if c != first]
        gender = ""
        age = None
        if ds.demographics is not None:
            gender = ds.demographics.gender[i]
            age = ds.demographics.age_years[i]
        records.append(EpisodeRecord(episode_id=ds.episode_ids[i],
                                     medications=meds, icd10_codes=labels,
                                     gender=gender, age_years=age))
    return records


def binarize_for_inference(records, feature_vocab: Vocabulary,
                           drop_cancelled: bool = True):
    """Binarize episodes against an existing vocabulary (prediction input).

    Unknown medication tokens have no column and are skipped. Returns
    (X, episode_ids, n_unknown_tokens).
    """
    x_sets = []
    unknown = 0
    for rec in records:
        active = set()
        for code, dose, status in rec.medications:
            if drop_cancelled and status.lower() == "cancelled":
                continue
            token = med_token(code, dose)
            if token in feature_vocab:
                active.add(feature_vocab[token])
            else:
                unknown += 1
        x_sets.append(active)
    x = SparseBinaryMatrix.from_sets(x_sets, len(feature_vocab))
    return x, tuple(r.episode_id for r in records), unknown


# ---------------------------------------------------------------------------
# stratified splitting
# ---------------------------------------------------------------------------

def _apportion(n: int, ratios) -> list:
    """Largest-remainder integer targets summing to n."""
    raw = [n * r for r in ratios]
    base = [int(x) for x in raw]
    short = n - sum(base)
    frac_order = sorted(range(len(ratios)), key=lambda j: (-(raw[j] - base[j]), j))
    for j in frac_order[:short]:
        base[j] += 1
    return base


def stratified_split(ds: Dataset, ratios=(0.70, 0.10, 0.20), seed: int = 0):
    """Iterative label stratification into len(ratios) disjoint datasets.

    Samples of the currently rarest unallocated label are placed into the
    split with the greatest remaining desire for that label, ties broken by
    remaining capacity and then by a seeded draw. Every label occurring in
    at least 3 episodes is guaranteed a training-split presence via a final
    swap pass.
    """
    k = len(ratios)
    if k < 2:
        raise ValueError("need at least two split ratios")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got sum {sum(ratios)!r}")
    n = ds.n_samples
    if n == 0:
        raise ValueError("dataset is empty")
    rng = SeededRng(seed).child(17)
    n_labels = ds.Y.cols

    targets = _apportion(n, ratios)
    capacity = list(targets)
    row_sets = [set(int(l) for l in row) for row in ds.Y.row_indices]
    counts = np.zeros(n_labels, dtype=np.int64)
    for row in ds.Y.row_indices:
        counts[row] += 1
    # remaining desire of split j for label l
    desire = np.array([[counts[l] * ratios[j] for l in range(n_labels)]
                       for j in range(k)], dtype=np.float64)

    assignment = np.full(n, -1, dtype=np.int64)
    remaining_per_label = counts.astype(np.float64).copy()
    unallocated = set(range(n))

    def place(i: int, j: int):
        assignment[i] = j
        capacity[j] -= 1
        unallocated.discard(i)
        for l in ds.Y.row_indices[i]:
            desire[j, l] -= 1.0
            remaining_per_label[l] -= 1.0

    while unallocated:
        active = np.flatnonzero(remaining_per_label > 0)
        if active.size == 0:
            break  # only label-free samples remain
        l = int(active[np.argmin(remaining_per_label[active])])
        members = sorted(i for i in unallocated if l in row_sets[i])
        for i in members:
            open_splits = [j for j in range(k) if capacity[j] > 0]
            if not open_splits:
                open_splits = list(range(k))  # degenerate rounding corner
            best_desire = max(desire[j, l] for j in open_splits)
            tied = [j for j in open_splits if desire[j, l] == best_desire]
            if len(tied) > 1:
                best_cap = max(capacity[j] for j in tied)
                tied = [j for j in tied if capacity[j] == best_cap]
            j = tied[0] if len(tied) == 1 else tied[int(rng.integers(0, len(tied)))]
            place(i, j)

    for i in sorted(unallocated):  # samples with no labels
        j = max(range(k), key=lambda q: (capacity[q], -q))
        place(i, j)

    _ensure_train_presence(ds, assignment, counts)

    out = []
    for j in range(k):
        rows = np.flatnonzero(assignment == j)
        out.append(ds.take(rows))
    return tuple(out)


def _ensure_train_presence(ds: Dataset, assignment: np.ndarray,
                           counts: np.ndarray) -> None:
    """Swap samples so every label with >= 3 episodes appears in split 0."""
    train_count = np.zeros(ds.Y.cols, dtype=np.int64)
    train_rows = np.flatnonzero(assignment == 0)
    if train_rows.size == 0:
        return
    for i in train_rows:
        train_count[ds.Y.row_indices[i]] += 1
    for _ in range(ds.Y.cols):
        missing = np.flatnonzero((counts >= 3) & (train_count == 0))
        if missing.size == 0:
            return
        l = missing[0]
        donors = [i for i in range(ds.n_samples)
                  if assignment[i] != 0 and l in ds.Y.row_indices[i]]
        incoming = donors[0]
        swap_out = None
        for i in np.flatnonzero(assignment == 0):
            if np.all(train_count[ds.Y.row_indices[i]] >= 2):
                swap_out = i
                break
        donor_split = assignment[incoming]
        assignment[incoming] = 0
        train_count[ds.Y.row_indices[incoming]] += 1
        if swap_out is not None:
            assignment[swap_out] = donor_split
            train_count[ds.Y.row_indices[swap_out]] -= 1


# ---------------------------------------------------------------------------
# label-frequency report
# ---------------------------------------------------------------------------

@dataclass
class LabelFrequencyReport:
    rows: list            # (token, count) in descending count order
    total_incidences: int
    n_labels: int
    tail_counts: dict     # threshold -> number of labels with count < threshold

    def render(self) -> str:
        lines = ["label\tcount"]
        lines += [f"{t}\t{c}" for t, c in self.rows]
        lines.append(f"# labels\t{self.n_labels}")
        lines.append(f"# incidences\t{self.total_incidences}")
        for thr in sorted(self.tail_counts):
            lines.append(f"# labels with count < {thr}\t{self.tail_counts[thr]}")
        return "\n".join(lines) + "\n"


def label_frequency_report(ds: Dataset, top_k: int = 30,
                           min_instances: int = 3) -> LabelFrequencyReport:
    counts = np.zeros(ds.Y.cols, dtype=np.int64)
    for row in ds.Y.row_indices:
        counts[row] += 1
    order = sorted(range(ds.Y.cols),
                   key=lambda l: (-counts[l], ds.label_vocab.tokens[l]))
    rows = [(ds.label_vocab.tokens[l], int(counts[l]))
            for l in order[:max(top_k, 0)]]
    tails = {min_instances * m: int(np.sum(counts < min_instances * m))
             for m in (1, 2, 4, 8)}
    return LabelFrequencyReport(rows=rows, total_incidences=int(counts.sum()),
                                n_labels=ds.Y.cols, tail_counts=tails)


# ---------------------------------------------------------------------------
# synthetic data with a known oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 10_000
    n_med_tokens: int = 300
    n_labels: int = 50
    noise: float = 0.05
    seed: int = 0
    meds_per_sample: tuple = (10, 20)    # inclusive range
    support_size: tuple = (8, 14)        # inclusive range

    def __post_init__(self):
        if self.n_samples < 1 or self.n_med_tokens < 1 or self.n_labels < 1:
            raise ValueError("sample, token and label counts must be >= 1")
        if not (0.0 <= self.noise < 0.5):
            raise ValueError(f"noise must be in [0, 0.5), got {self.noise}")
        for name, rng_ in (("meds_per_sample", self.meds_per_sample),
                           ("support_size", self.support_size)):
            lo, hi = rng_
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be an inclusive range with "
                                 f"1 <= lo <= hi, got {rng_}")
        if self.support_size[1] > self.n_med_tokens:
            raise ValueError("support_size exceeds the medication vocabulary")
        if self.meds_per_sample[1] > self.n_med_tokens:
            raise ValueError("meds_per_sample exceeds the medication vocabulary")


@dataclass
class SyntheticOracle:
    spec: SyntheticSpec
    supports: tuple   # per label: sorted tuple of medication token indices

    def noiseless_labels(self, med_indices) -> set:
        meds = set(int(i) for i in med_indices)
        return {l for l, sup in enumerate(self.supports)
                if meds.intersection(sup)}


def generate_synthetic(spec: SyntheticSpec):
    """Draw a dataset from a fixed medication->label OR model plus noise.

    Label j fires when the sample's medications intersect support set j;
    every label bit is then flipped independently with probability noise.
    Samples ending with no active labels are redrawn. Returns
    (Dataset, SyntheticOracle).
    """
    rng = SeededRng(spec.seed)
    support_rng = rng.child(0)
    sample_rng = rng.child(1)

    supports = []
    for _ in range(spec.n_labels):
        size = int(support_rng.integers(spec.support_size[0],
                                        spec.support_size[1] + 1))
        sup = np.sort(support_rng.choice(spec.n_med_tokens, size, replace=False))
        supports.append(tuple(int(i) for i in sup))
    if any(len(s) == 0 for s in supports):
        raise ValueError("synthetic supports must be non-empty")
    oracle = SyntheticOracle(spec=spec, supports=tuple(supports))

    support_mask = np.zeros((spec.n_labels, spec.n_med_tokens), dtype=bool)
    for l, sup in enumerate(supports):
        support_mask[l, list(sup)] = True

    x_sets = []
    y_sets = []
    principal = np.zeros(spec.n_samples, dtype=np.int64)
    genders = []
    ages = []
    for i in range(spec.n_samples):
        for _attempt in range(1000):
            n_meds = int(sample_rng.integers(spec.meds_per_sample[0],
                                             spec.meds_per_sample[1] + 1))
            meds = np.sort(sample_rng.choice(spec.n_med_tokens, n_meds,
                                             replace=False))
            active = support_mask[:, meds].any(axis=1)
            if spec.noise > 0.0:
                flips = sample_rng.uniform(spec.n_labels) < spec.noise
                active = np.logical_xor(active, flips)
            if active.any():
                break
        else:
            raise RuntimeError("synthetic generator produced 1000 empty "
                               "label sets in a row; spec is degenerate")
        labels = np.flatnonzero(active)
        x_sets.append(set(int(m) for m in meds))
        y_sets.append(set(int(l) for l in labels))
        principal[i] = int(labels[0])
        genders.append("F" if int(sample_rng.integers(0, 2)) else "M")
        ages.append(int(sample_rng.integers(0, 100)))

    med_width = len(str(spec.n_med_tokens - 1))
    lab_width = len(str(spec.n_labels - 1))
    feature_vocab = Vocabulary(
        tokens=tuple(f"MED{i:0{med_width}d}@STD" for i in range(spec.n_med_tokens)),
        kind="medication-dose",
    )
    label_vocab = Vocabulary(
        tokens=tuple(f"L{j:0{lab_width}d}" for j in range(spec.n_labels)),
        kind="icd10-category",
    )
    id_width = len(str(spec.n_samples - 1))
    ds = Dataset(
        episode_ids=tuple(f"S{i:0{id_width}d}" for i in range(spec.n_samples)),
        X=SparseBinaryMatrix.from_sets(x_sets, spec.n_med_tokens),
        Y=SparseBinaryMatrix.from_sets(y_sets, spec.n_labels),
        feature_vocab=feature_vocab,
        label_vocab=label_vocab,
        principal=principal,
        demographics=Demographics(gender=tuple(genders), age_years=tuple(ages)),
    )
    return ds, oracle


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------

DATASET_FORMAT_VERSION = 1


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _sparse_lines(m: SparseBinaryMatrix) -> str:
    return "".join(" ".join(str(int(j)) for j in row) + "\n"
                   for row in m.row_indices)


def save_dataset(ds: Dataset, out_dir) -> None:
    """Persist a dataset as plain text files under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "n_samples": ds.n_samples,
        "n_features": len(ds.feature_vocab),
        "n_labels": len(ds.label_vocab),
        "has_principal": ds.principal is not None,
        "has_demographics": ds.demographics is not None,
    }
    _write_text(os.path.join(out_dir, "meta.json"),
                json.dumps(meta, sort_keys=True, indent=2) + "\n")
    _write_text(os.path.join(out_dir, "features.vocab"),
                "".join(t + "\n" for t in ds.feature_vocab.tokens))
    _write_text(os.path.join(out_dir, "labels.vocab"),
                "".join(t + "\n" for t in ds.label_vocab.tokens))
    _write_text(os.path.join(out_dir, "episodes.txt"),
                "".join(e + "\n" for e in ds.episode_ids))
    _write_text(os.path.join(out_dir, "X.rows"), _sparse_lines(ds.X))
    _write_text(os.path.join(out_dir, "Y.rows"), _sparse_lines(ds.Y))
    if ds.principal is not None:
        _write_text(os.path.join(out_dir, "principal.txt"),
                    "".join(f"{int(p)}\n" for p in ds.principal))
    if ds.demographics is not None:
        rows = ["gender,age_years"]
        for g, a in zip(ds.demographics.gender, ds.demographics.age_years):
            rows.append(f"{g},{'' if a is None else int(a)}")
        _write_text(os.path.join(out_dir, "demographics.csv"),
                    "\n".join(rows) + "\n")


def _read_lines(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return f.read().splitlines()


def _parse_sparse(path, rows: int, cols: int) -> SparseBinaryMatrix:
    lines = _read_lines(path)
    if len(lines) != rows:
        raise DataError(f"{path}: expected {rows} rows, found {len(lines)}")
    sets = []
    for lineno, line in enumerate(lines, start=1):
        try:
            idx = [int(tok) for tok in line.split()]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-integer index") from exc
        sets.append(idx)
    try:
        return SparseBinaryMatrix.from_sets(sets, cols)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_dataset(data_dir) -> Dataset:
    meta_path = os.path.join(data_dir, "meta.json")
    try:
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except OSError as exc:
        raise DataError(f"cannot read {meta_path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: invalid JSON ({exc})") from exc
    version = meta.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DataError(f"{meta_path}: format_version {version!r}, this build "
                        f"reads version {DATASET_FORMAT_VERSION}")
    n = meta["n_samples"]
    feature_vocab = Vocabulary(
        tokens=tuple(_read_lines(os.path.join(data_dir, "features.vocab"))),
        kind="medication-dose")
    label_vocab = Vocabulary(
        tokens=tuple(_read_lines(os.path.join(data_dir, "labels.vocab"))),
        kind="icd10-category")
    if len(feature_vocab) != meta["n_features"]:
        raise DataError(f"{data_dir}: feature vocabulary size mismatch")
    if len(label_vocab) != meta["n_labels"]:
        raise DataError(f"{data_dir}: label vocabulary size mismatch")
    episode_ids = tuple(_read_lines(os.path.join(data_dir, "episodes.txt")))
    if len(episode_ids) != n:
        raise DataError(f"{data_dir}: episodes.txt row count mismatch")
    x = _parse_sparse(os.path.join(data_dir, "X.rows"), n, len(feature_vocab))
    y = _parse_sparse(os.path.join(data_dir, "Y.rows"), n, len(label_vocab))
    principal = None
    if meta.get("has_principal"):
        lines = _read_lines(os.path.join(data_dir, "principal.txt"))
        if len(lines) != n:
            raise DataError(f"{data_dir}: principal.txt row count mismatch")
        try:
            principal = np.array([int(t) for t in lines], dtype=np.int64)
        except ValueError as exc:
            raise DataError(f"{data_dir}: principal.txt holds a non-integer") \
                from exc
    demo = None
    if meta.get("has_demographics"):
        lines = _read_lines(os.path.join(data_dir, "demographics.csv"))
        if not lines or lines[0] != "gender,age_years":
            raise DataError(f"{data_dir}: demographics.csv header mismatch")
        if len(lines) != n + 1:
            raise DataError(f"{data_dir}: demographics.csv row count mismatch")
        genders = []
        ages = []
        for lineno, line in enumerate(lines[1:], start=2):
            g, _, a = line.partition(",")
            genders.append(g)
            try:
                ages.append(int(a) if a else None)
            except ValueError as exc:
                raise DataError(f"demographics.csv:{lineno}: bad age {a!r}") \
                    from exc
        demo = Demographics(gender=tuple(genders), age_years=tuple(ages))
    try:
        return Dataset(episode_ids=episode_ids, X=x, Y=y,
                       feature_vocab=feature_vocab, label_vocab=label_vocab,
                       principal=principal, demographics=demo)
    except ValueError as exc:
        raise DataError(f"{data_dir}: inconsistent dataset ({exc})") from exc


# ---------------------------------------------------------------------------
# ICD10 chapters and age decades (report grouping)
# ---------------------------------------------------------------------------

_CHAPTERS = (
    ("A00", "B99"), ("C00", "D48"), ("D50", "D89"), ("E00", "E90"),
    ("F00", "F99"), ("G00", "G99"), ("H00", "H59"), ("H60", "H95"),
    ("I00", "I99"), ("J00", "J99"), ("K00", "K93"), ("L00", "L99"),
    ("M00", "M99"), ("N00", "N99"), ("O00", "O99"), ("P00", "P96"),
    ("Q00", "Q99"), ("R00", "R99"), ("S00", "T98"), ("U00", "U99"),
    ("V01", "Y98"), ("Z00", "Z99"),
)


def icd10_chapter(category: str) -> str:
    """Chapter range ("E00-E90") containing a 3-character category.

    Tokens that do not look like ICD10 categories are returned verbatim so
    synthetic label spaces still group (each label becomes its own group).
    """
    cat = category.strip().upper()
    if len(cat) == 3 and cat[0].isalpha() and cat[1:].isdigit():
        for lo, hi in _CHAPTERS:
            if lo <= cat <= hi:
                return f"{lo}-{hi}"
    return category


def age_decade(age_years: int) -> str:
    if age_years >= 90:
        return "90+"
    lo = (max(age_years, 0) // 10) * 10
    return f"{lo}-{lo + 9}"
