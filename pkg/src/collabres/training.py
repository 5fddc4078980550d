"""Adam optimization, the training protocol, checkpoints, predict/evaluate.

Training shuffles each epoch with a seeded generator, evaluates a validation
metric after every epoch, stops after a patience window of non-improving
epochs (or at the epoch cap), and returns the parameters of the best
validation epoch. With a fixed seed and thread configuration the whole loop
is bitwise reproducible, checkpoint bytes included.

Checkpoint file layout (all integers little-endian):
  magic "CLRS" | version u8 (0x01)
  u32 byte length | UTF-8 JSON header: model spec, vocabularies,
      train-config snapshot, decision threshold (canonical key order)
  repeated parameter records until EOF, sorted by canonical name:
      u32 name length | name UTF-8 | u32 dim count | u32 dims...
      | row-major float32 payload
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics as M
from .data import Dataset, age_decade, icd10_chapter
from .linalg import SeededRng, ShapeError, SparseBinaryMatrix
from .nn import (
    INFER,
    TRAIN,
    ModelSpec,
    check_params,
    init_params,
    model_backward,
    model_forward,
    sigmoid_bce,
    spec_from_dict,
    spec_to_dict,
)

CHECKPOINT_MAGIC = b"CLRS"
CHECKPOINT_VERSION = 1

EARLY_STOP_METRICS = ("primary_accuracy", "subset_accuracy", "sample_f1")


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""

    code = "checkpoint_error"


class NotACheckpointError(CheckpointError):
    code = "bad_magic"


class CheckpointVersionError(CheckpointError):
    code = "version_mismatch"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


@dataclass
class TrainConfig:
    batch_size: int = 2048
    max_epochs: int = 100
    early_stop_patience: int = 10
    early_stop_metric: str = "primary_accuracy"
    seed: int = 0
    shuffle: bool = True
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    threshold: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop_metric not in EARLY_STOP_METRICS:
            raise ValueError(f"early_stop_metric must be one of "
                             f"{EARLY_STOP_METRICS}, got {self.early_stop_metric!r}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    epsilon: float
    t: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)

    @classmethod
    def for_params(cls, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One Adam update, in place, with bias-corrected moments."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("parameter, gradient and state name sets differ")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name}: shape {g.shape} vs parameter "
                             f"{params[name].shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


class EarlyStopper:
    """Patience counter over a maximized validation metric.

    An epoch improves only if its metric strictly exceeds the best so far,
    so the kept best epoch is the first one attaining the maximum.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_metric = -np.inf
        self.best_epoch = 0
        self.bad_streak = 0

    def update(self, epoch: int, metric: float) -> bool:
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
            self.bad_streak = 0
            return True
        self.bad_streak += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_streak >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_metric: float
    timestamp: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""  # "early_stopped" or "max_epochs"


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict
    feature_vocab: tuple
    label_vocab: tuple
    train_config: dict
    threshold: float
    version: int = CHECKPOINT_VERSION

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim


def _forward_scores(spec: ModelSpec, params: dict, x: SparseBinaryMatrix,
                    chunk: int = 4096) -> np.ndarray:
    """Infer-mode forward in fixed-size chunks (bounded memory, same result)."""
    if x.rows == 0:
        return np.zeros((0, spec.output_dim), dtype=np.float32)
    outs = []
    for lo in range(0, x.rows, chunk):
        rows = np.arange(lo, min(lo + chunk, x.rows))
        scores, _ = model_forward(spec, params, x.take_rows(rows), INFER)
        outs.append(scores)
    return np.concatenate(outs, axis=0) if len(outs) > 1 else outs[0]


def _prediction_batch(spec: ModelSpec, params: dict, ds: Dataset,
                      threshold: float) -> M.PredictionBatch:
    scores = _forward_scores(spec, params, ds.X)
    return M.PredictionBatch(scores=scores, true_sets=ds.Y.row_indices,
                             principal=ds.principal, threshold=threshold)


def _dev_metric(spec: ModelSpec, params: dict, dev: Dataset,
                cfg: TrainConfig) -> float:
    batch = _prediction_batch(spec, params, dev, cfg.threshold)
    if cfg.early_stop_metric == "primary_accuracy":
        return M.primary_accuracy(batch)
    if cfg.early_stop_metric == "subset_accuracy":
        return M.subset_accuracy(batch)
    return M.set_metrics(batch).sample_f1


def train(spec: ModelSpec, train_ds: Dataset, dev_ds: Dataset,
          cfg: TrainConfig | None = None, dev_metric_fn=None):
    """Full training run. Returns (Checkpoint, TrainHistory).

    `dev_metric_fn(params, epoch) -> float`, when given, replaces the
    validation-metric evaluation (used to exercise the stopping protocol
    with scripted sequences).
    """
    cfg = cfg or TrainConfig()
    for name, ds in (("train", train_ds), ("dev", dev_ds)):
        if ds.n_samples == 0:
            raise ValueError(f"{name} split is empty")
        if ds.X.cols != spec.input_dim or ds.Y.cols != spec.output_dim:
            raise ShapeError(
                f"{name} split is {ds.X.cols} features x {ds.Y.cols} labels; "
                f"model expects {spec.input_dim} x {spec.output_dim}"
            )
    if dev_metric_fn is None and cfg.early_stop_metric == "primary_accuracy" \
            and dev_ds.principal is None:
        raise ValueError("dev split has no principal labels; choose another "
                         "early_stop_metric")

    rng = SeededRng(cfg.seed)
    params = init_params(spec, rng.child(0))
    loop_rng = rng.child(1)
    state = AdamState.for_params(params, lr=cfg.learning_rate, beta1=cfg.beta1,
                                 beta2=cfg.beta2, epsilon=cfg.epsilon)
    stopper = EarlyStopper(cfg.early_stop_patience)
    history = TrainHistory()
    best_params = {k: v.copy() for k, v in params.items()}

    n = train_ds.n_samples
    stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        order = loop_rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = train_ds.X.take_rows(idx)
            yb = train_ds.Y.take_rows(idx).densify()
            scores, trace = model_forward(spec, params, xb, TRAIN, loop_rng)
            loss, dlogits = sigmoid_bce(trace.logits, yb)
            grads = model_backward(spec, params, trace, dlogits)
            adam_step(params, grads, state)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / n

        if dev_metric_fn is not None:
            val = float(dev_metric_fn(params, epoch))
        else:
            val = _dev_metric(spec, params, dev_ds, cfg)
        if stopper.update(epoch, val):
            best_params = {k: v.copy() for k, v in params.items()}
        history.epochs.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                         val_metric=val, timestamp=time.time()))
        if stopper.should_stop:
            stop_reason = "early_stopped"
            break

    history.best_epoch = stopper.best_epoch
    history.stop_reason = stop_reason
    ckpt = Checkpoint(
        spec=spec,
        params=best_params,
        feature_vocab=tuple(train_ds.feature_vocab.tokens),
        label_vocab=tuple(train_ds.label_vocab.tokens),
        train_config=asdict(cfg),
        threshold=cfg.threshold,
    )
    return ckpt, history


@dataclass
class PredictionResult:
    scores: np.ndarray
    label_sets: list          # per-sample sorted arrays of label indices
    top1: np.ndarray          # per-sample principal-diagnosis prediction
    threshold: float


def predict(ckpt: Checkpoint, batch: SparseBinaryMatrix,
            threshold: float | None = None) -> PredictionResult:
    """Infer-mode scores, thresholded label sets, and the top-1 label."""
    thr = ckpt.threshold if threshold is None else float(threshold)
    if not (0.0 < thr < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {thr}")
    if batch.cols != ckpt.input_dim:
        raise ShapeError(f"batch has {batch.cols} features, checkpoint expects "
                         f"{ckpt.input_dim}")
    scores = _forward_scores(ckpt.spec, ckpt.params, batch)
    sets = [np.flatnonzero(scores[i] >= thr) for i in range(scores.shape[0])]
    top1 = (np.argmax(scores, axis=1) if scores.shape[0]
            else np.zeros(0, dtype=np.int64))
    return PredictionResult(scores=scores, label_sets=sets, top1=top1,
                            threshold=thr)


def evaluate(ckpt: Checkpoint, ds: Dataset, group_columns=None,
             threshold: float | None = None, include_f1_variants: bool = False):
    """Score a labelled split. Returns (report, demographic_report_or_None).

    The main report carries per-chapter sub-reports keyed by the chapter of
    each sample's true principal diagnosis. A second report grouped by the
    requested demographic columns ("gender", "age") is returned when asked.
    """
    if ds.Y.rows == 0:
        raise ValueError("split has no samples")
    thr = ckpt.threshold if threshold is None else float(threshold)
    batch = _prediction_batch(ckpt.spec, ckpt.params, ds, thr)
    if batch.principal is None:
        warnings.warn("split has no principal labels; primary accuracy and "
                      "chapter grouping are omitted", stacklevel=2)
        report = M.compute_report(batch, include_f1_variants)
    else:
        chapters = [icd10_chapter(ds.label_vocab.tokens[p])
                    for p in ds.principal]
        report = M.grouped_report(batch, chapters, include_f1_variants)

    demo_report = None
    if group_columns:
        values = demographic_groups(ds, group_columns)
        demo_report = M.grouped_report(batch, values, include_f1_variants)
    return report, demo_report


def demographic_groups(ds: Dataset, group_columns) -> list:
    """Per-sample group key such as "F|60-69" for gender and age grouping."""
    valid = {"gender", "age"}
    cols = list(group_columns)
    unknown = [c for c in cols if c not in valid]
    if unknown:
        raise ValueError(f"unknown group columns {unknown}; valid: gender, age")
    if ds.demographics is None:
        raise ValueError("dataset carries no demographic columns")
    keys = []
    for i in range(ds.n_samples):
        parts = []
        if "gender" in cols:
            g = ds.demographics.gender[i]
            parts.append(g if g else "unknown")
        if "age" in cols:
            a = ds.demographics.age_years[i]
            parts.append(age_decade(a) if a is not None else "unknown")
        keys.append("|".join(parts))
    return keys


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _header_json(ckpt: Checkpoint) -> bytes:
    header = {
        "model_spec": spec_to_dict(ckpt.spec),
        "feature_vocab": list(ckpt.feature_vocab),
        "label_vocab": list(ckpt.label_vocab),
        "train_config": ckpt.train_config,
        "threshold": ckpt.threshold,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    check_params(ckpt.spec, ckpt.params)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += bytes([CHECKPOINT_VERSION])
    header = _header_json(ckpt)
    blob += len(header).to_bytes(4, "little")
    blob += header
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        blob += len(name_bytes).to_bytes(4, "little")
        blob += name_bytes
        blob += len(arr.shape).to_bytes(4, "little")
        for d in arr.shape:
            blob += int(d).to_bytes(4, "little")
        blob += arr.tobytes(order="C")
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return int.from_bytes(self.take(4, what), "little")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if len(data) < 5 or r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version = r.take(1, "version")[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    header_len = r.u32("header length")
    try:
        header = json.loads(r.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc

    params = {}
    while not r.exhausted:
        name_len = r.u32("parameter name length")
        name = r.take(name_len, "parameter name").decode("utf-8")
        ndim = r.u32("dim count")
        dims = tuple(r.u32("dims") for _ in range(ndim))
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(count * 4, f"parameter {name} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        params[name] = arr

    try:
        spec = spec_from_dict(header["model_spec"])
        ckpt = Checkpoint(
            spec=spec,
            params=params,
            feature_vocab=tuple(header["feature_vocab"]),
            label_vocab=tuple(header["label_vocab"]),
            train_config=dict(header["train_config"]),
            threshold=float(header["threshold"]),
        )
        check_params(spec, params)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint contents ({exc})") from exc
    return ckpt
