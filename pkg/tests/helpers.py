"""Shared test utilities: finite-difference gradient checking, toy data and a
brute-force ranking-metric oracle."""

import numpy as np

from collabres.linalg import SeededRng, SparseBinaryMatrix
from collabres.metrics import PredictionBatch
from collabres.nn import TRAIN, init_params, model_backward, model_forward, sigmoid_bce

GRAD_STEP = 1e-5
GRAD_TOL = 1e-4
NEAR_ZERO_SCALE = 1e-6
NEAR_ZERO_ABS = 1e-8


def random_batch(n_rows: int, n_cols: int, seed: int) -> SparseBinaryMatrix:
    rng = np.random.default_rng(seed)
    sets = [set(rng.choice(n_cols, size=rng.integers(1, max(2, n_cols // 2)),
                           replace=False).tolist()) for _ in range(n_rows)]
    return SparseBinaryMatrix.from_sets(sets, n_cols)


def random_targets(n_rows: int, n_labels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.random((n_rows, n_labels)) < 0.3).astype(np.float64)


def pick_coordinates(params: dict, n_total: int, seed: int) -> list:
    """At least one coordinate per parameter, n_total coordinates overall."""
    rng = np.random.default_rng(seed)
    names = sorted(params)
    coords = []
    for name in names:
        size = params[name].size
        coords.append((name, int(rng.integers(0, size))))
    while len(coords) < n_total:
        name = names[int(rng.integers(0, len(names)))]
        coords.append((name, int(rng.integers(0, params[name].size))))
    return coords


def gradient_errors(spec, params: dict, x: SparseBinaryMatrix, y: np.ndarray,
                    coords: list, step: float = GRAD_STEP,
                    mask_seed: int = 99) -> list:
    """(analytic, numeric, error) per coordinate; dropout masks are frozen by
    re-seeding the forward rng identically for every loss evaluation."""

    def loss() -> float:
        _, trace = model_forward(spec, params, x, TRAIN, SeededRng(mask_seed))
        value, _ = sigmoid_bce(trace.logits, y)
        return float(value)

    _, trace = model_forward(spec, params, x, TRAIN, SeededRng(mask_seed))
    _, dlogits = sigmoid_bce(trace.logits, y)
    grads = model_backward(spec, params, trace, dlogits)

    out = []
    for name, idx in coords:
        base = float(params[name].flat[idx])
        params[name].flat[idx] = base + step
        up = loss()
        params[name].flat[idx] = base - step
        down = loss()
        params[name].flat[idx] = base
        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[name].flat[idx])
        scale = max(abs(analytic), abs(numeric))
        if scale < NEAR_ZERO_SCALE:
            err = 0.0 if abs(analytic - numeric) < NEAR_ZERO_ABS else 1.0
        else:
            err = abs(analytic - numeric) / scale
        out.append((name, idx, analytic, numeric, err))
    return out


def max_gradient_error(spec, input_dim: int, output_dim: int, *,
                       n_rows: int = 4, n_coords: int = 100,
                       seed: int = 0) -> float:
    """Worst relative error over n_coords random coordinates (float64 math).

    Caller must already be inside use_dtype(np.float64).
    """
    params = init_params(spec, SeededRng(seed))
    x = random_batch(n_rows, input_dim, seed + 1)
    y = random_targets(n_rows, output_dim, seed + 2)
    coords = pick_coordinates(params, n_coords, seed + 3)
    rows = gradient_errors(spec, params, x, y, coords)
    return max(r[4] for r in rows)


# ---------------------------------------------------------------------------
# brute-force ranking oracle: O(L^2) pairwise enumeration, ranks by counting,
# ties share the worst rank and tied (true, false) pairs count as violations.
# Every rank, hit count and violation count is derived by explicit loops; only
# the final averaging uses a canonical order (per-label values sorted by rank,
# np.mean per sample, sequential sum over samples) so that agreement with the
# library can be asserted with exact float equality rather than a tolerance.
# ---------------------------------------------------------------------------


def brute_rank(scores, j):
    return sum(1 for s in scores if s >= scores[j])


def brute_lrap(scores_rows, true_sets):
    total, n = 0.0, 0
    for scores, true in zip(scores_rows, true_sets):
        true = list(true)
        if not true or len(true) == len(scores):
            continue
        per_label = []
        for j in true:
            rank_j = brute_rank(scores, j)
            hits = sum(1 for k in true if scores[k] >= scores[j])
            per_label.append((rank_j, hits / rank_j))
        per_label.sort()
        total += float(np.mean(np.array([v for _, v in per_label])))
        n += 1
    return total / n


def brute_coverage(scores_rows, true_sets):
    total, n = 0.0, 0
    for scores, true in zip(scores_rows, true_sets):
        true = list(true)
        if not true or len(true) == len(scores):
            continue
        total += max(brute_rank(scores, j) for j in true)
        n += 1
    return total / n


def brute_ranking_loss(scores_rows, true_sets):
    total, n = 0.0, 0
    for scores, true in zip(scores_rows, true_sets):
        true = set(int(t) for t in true)
        if not true or len(true) == len(scores):
            continue
        false = [k for k in range(len(scores)) if k not in true]
        bad = sum(1 for t in true for f in false if scores[f] >= scores[t])
        total += bad / (len(true) * len(false))
        n += 1
    return total / n


def random_batches(n_batches, max_rows, max_labels, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n_batches):
        n = int(rng.integers(1, max_rows + 1))
        L = int(rng.integers(2, max_labels + 1))
        scores = rng.random((n, L))
        if rng.random() < 0.3:  # force ties to land in the tricky branch
            scores = np.round(scores, 1)
        sets = []
        for _ in range(n):
            k = int(rng.integers(0, L + 1))
            sets.append(np.sort(rng.choice(L, size=k, replace=False)))
        if all(len(s) in (0, L) for s in sets):
            sets[0] = np.array([0], dtype=np.int64)
        yield PredictionBatch(scores=scores, true_sets=sets)
