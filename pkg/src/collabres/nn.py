"""Model graph: layers, residual blocks, baseline/CollabRes builders, backprop.

A model is a set of parallel branches fed by the sparse input batch, joined by
concatenation, followed by a trunk that ends in a sigmoid head. Residual blocks
compute ReLU(Dense2(Dropout(ReLU(Dense1(x)))) + b2 + W_skip @ skip_source),
where the skip is always a learned projection; the trunk's fusion block may
take its skip from the raw model input instead of its own block input.

Weights are stored (out_dim, in_dim); a dense layer computes x @ W.T + b.
Backpropagation is exact for this topology family: skip edges contribute
additive gradient paths and dropout masks are replayed from the forward trace.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import (
    SeededRng,
    ShapeError,
    SparseBinaryMatrix,
    default_dtype,
    matmul,
    sparse_dense_product,
    sparse_transpose_dense_product,
)

TRAIN = "train"
INFER = "infer"

DENSE = "dense"
RELU = "relu"
DROPOUT = "dropout"
RESIDUAL_BLOCK = "residual_block"
CONCAT = "concat"
SIGMOID_HEAD = "sigmoid_head"

BASELINE_IDS = ("M1", "M2", "M3", "M4", "M5", "M6", "M7", "M8")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int | None = None
    out_dim: int | None = None
    hidden_dim: int | None = None
    rate: float | None = None
    branch_dims: tuple[int, ...] | None = None
    # residual blocks only: project the raw model input on the skip edge
    skip_from_input: bool = False


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(DENSE, in_dim=in_dim, out_dim=out_dim)


def relu_layer() -> LayerSpec:
    return LayerSpec(RELU)


def dropout_layer(rate: float) -> LayerSpec:
    _check_rate(rate)
    return LayerSpec(DROPOUT, rate=rate)


def residual_block(in_dim: int, hidden_dim: int, out_dim: int, rate: float = 0.0,
                   skip_from_input: bool = False) -> LayerSpec:
    _check_rate(rate)
    return LayerSpec(RESIDUAL_BLOCK, in_dim=in_dim, out_dim=out_dim,
                     hidden_dim=hidden_dim, rate=rate,
                     skip_from_input=skip_from_input)


def concat(branch_dims) -> LayerSpec:
    return LayerSpec(CONCAT, branch_dims=tuple(int(d) for d in branch_dims))


def sigmoid_head(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(SIGMOID_HEAD, in_dim=in_dim, out_dim=out_dim)


def _check_rate(rate: float) -> None:
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")


def _check_dim(value, what: str) -> int:
    if value is None or int(value) < 1:
        raise ValueError(f"{what} must be >= 1, got {value}")
    return int(value)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative topology: parallel branches from the input, then a trunk."""

    name: str
    input_dim: int
    output_dim: int
    branches: tuple[tuple[LayerSpec, ...], ...]
    trunk: tuple[LayerSpec, ...]

    def __post_init__(self):
        validate_spec(self)


def _chain_out_dim(layers, in_dim: int, where: str) -> int:
    cur = in_dim
    for i, layer in enumerate(layers):
        if layer.kind in (DENSE, SIGMOID_HEAD, RESIDUAL_BLOCK):
            if layer.in_dim != cur:
                raise ShapeError(
                    f"{where} layer {i} ({layer.kind}) expects in_dim={layer.in_dim}, "
                    f"previous width is {cur}"
                )
            cur = layer.out_dim
        elif layer.kind in (RELU, DROPOUT):
            pass
        else:
            raise ValueError(f"{where} layer {i}: unexpected kind {layer.kind!r}")
    return cur


def validate_spec(spec: ModelSpec) -> None:
    _check_dim(spec.input_dim, "input_dim")
    _check_dim(spec.output_dim, "output_dim")
    if not spec.branches:
        raise ValueError("model needs at least one branch")
    heads = [l for br in spec.branches for l in br if l.kind == SIGMOID_HEAD]
    heads += [l for l in spec.trunk[:-1] if l.kind == SIGMOID_HEAD]
    if heads:
        raise ValueError("sigmoid head must be the single final trunk layer")
    if not spec.trunk or spec.trunk[-1].kind != SIGMOID_HEAD:
        raise ValueError("trunk must end in a sigmoid head")

    branch_outs = []
    for b, branch in enumerate(spec.branches):
        if not branch:
            raise ValueError(f"branch {b} is empty")
        for layer in branch:
            if layer.kind == CONCAT:
                raise ValueError("concat is only valid as the first trunk layer")
            if layer.skip_from_input:
                raise ValueError("skip_from_input is only valid in the trunk")
        branch_outs.append(_chain_out_dim(branch, spec.input_dim, f"branch {b}"))

    trunk = spec.trunk
    if len(spec.branches) > 1:
        if trunk[0].kind != CONCAT:
            raise ValueError("multi-branch models must join with a concat layer")
        if trunk[0].branch_dims != tuple(branch_outs):
            raise ShapeError(
                f"concat dims {trunk[0].branch_dims} do not match branch outputs "
                f"{tuple(branch_outs)}"
            )
        cur = sum(branch_outs)
        trunk = trunk[1:]
    else:
        if trunk and trunk[0].kind == CONCAT:
            if trunk[0].branch_dims != tuple(branch_outs):
                raise ShapeError("concat dims do not match the single branch output")
            trunk = trunk[1:]
        cur = branch_outs[0]

    out = _chain_out_dim(trunk, cur, "trunk")
    if out != spec.output_dim:
        raise ShapeError(f"trunk produces width {out}, expected output_dim "
                         f"{spec.output_dim}")


def param_shapes(spec: ModelSpec) -> dict:
    """Canonical name -> shape map, a pure function of the spec.

    Ordering is deterministic: branches in order, then trunk; inside a
    residual block main1, main2, then skip. Weights are (out, in); biases
    are 1-D (out,). Skip projections carry no bias.
    """
    shapes: dict[str, tuple] = {}

    def add_layer(prefix: str, layer: LayerSpec) -> None:
        if layer.kind in (DENSE, SIGMOID_HEAD):
            shapes[f"{prefix}.w"] = (layer.out_dim, layer.in_dim)
            shapes[f"{prefix}.bias"] = (layer.out_dim,)
        elif layer.kind == RESIDUAL_BLOCK:
            skip_in = spec.input_dim if layer.skip_from_input else layer.in_dim
            shapes[f"{prefix}.main1.w"] = (layer.hidden_dim, layer.in_dim)
            shapes[f"{prefix}.main1.bias"] = (layer.hidden_dim,)
            shapes[f"{prefix}.main2.w"] = (layer.out_dim, layer.hidden_dim)
            shapes[f"{prefix}.main2.bias"] = (layer.out_dim,)
            shapes[f"{prefix}.skip.w"] = (layer.out_dim, skip_in)

    for b, branch in enumerate(spec.branches):
        for i, layer in enumerate(branch):
            add_layer(f"b{b}.l{i}", layer)
    for i, layer in enumerate(spec.trunk):
        add_layer(f"t{i}", layer)
    return shapes


def count_params(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def init_params(spec: ModelSpec, rng: SeededRng) -> dict:
    """He-style init: weights ~ Normal(0, sqrt(2/fan_in)), biases zero."""
    dtype = default_dtype()
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            out_dim, fan_in = shape
            params[name] = rng.normal(out_dim, fan_in, mean=0.0,
                                      stddev=float(np.sqrt(2.0 / fan_in)))
    return params


def check_params(spec: ModelSpec, params: dict) -> None:
    expected = param_shapes(spec)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter names do not match spec "
                         f"(missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"parameter {name}: shape {params[name].shape}, "
                             f"expected {shape}")


# ---------------------------------------------------------------------------
# elementary forward/backward ops
# ---------------------------------------------------------------------------

def _linear(x, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """x @ W.T (+ b); x may be a SparseBinaryMatrix at the input boundary."""
    if isinstance(x, SparseBinaryMatrix):
        out = sparse_dense_product(x, w.T)
    else:
        out = matmul(x, w.T)
    if b is not None:
        out = out + b
    return out


def _weight_grad(x, dout: np.ndarray) -> np.ndarray:
    """d(loss)/dW for out = x @ W.T, i.e. dout.T @ x."""
    if isinstance(x, SparseBinaryMatrix):
        return sparse_transpose_dense_product(x, dout).T
    return matmul(dout.T, x)


def _bias_grad(dout: np.ndarray) -> np.ndarray:
    return dout.sum(axis=0, dtype=np.float64).astype(dout.dtype)


def dense_forward(x, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine layer: x @ W.T + b, with W stored (out_dim, in_dim)."""
    in_dim = x.cols if isinstance(x, SparseBinaryMatrix) else x.shape[1]
    if w.ndim != 2 or w.shape[1] != in_dim:
        raise ShapeError(f"dense layer weight {w.shape} incompatible with "
                         f"input width {in_dim}")
    return _linear(x, w, b)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def dropout_forward(x: np.ndarray, rate: float, mode: str = INFER,
                    rng: SeededRng | None = None):
    """Inverted dropout. Returns (y, mask); mask is pre-scaled by 1/(1-rate).

    Train mode keeps each unit with probability 1-rate and rescales so the
    expectation matches inference; infer mode returns x unchanged, mask None.
    """
    _check_rate(rate)
    if mode == INFER:
        return x, None
    if mode != TRAIN:
        raise ValueError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")
    if rate == 0.0:
        mask = np.ones_like(x)
        return x * mask, mask
    if rng is None:
        raise ValueError("train-mode dropout with rate > 0 needs an rng")
    keep = rng.uniform(*x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def concat_forward(parts) -> np.ndarray:
    rows = {p.shape[0] for p in parts}
    if len(rows) > 1:
        raise ShapeError(f"concat parts disagree on row count: {sorted(rows)}")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=1)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_bce(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross-entropy over all (sample, label) cells.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log. Returns
    (loss, dlogits) with dlogits = (p - y) / cell_count.
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    p = np.clip(sigmoid(logits), 1e-7, 1.0 - 1e-7)
    y = targets.astype(np.float64, copy=False)
    p64 = p.astype(np.float64, copy=False)
    loss = float(np.mean(-(y * np.log(p64) + (1.0 - y) * np.log1p(-p64))))
    dlogits = ((p - targets.astype(p.dtype, copy=False)) / p.size).astype(logits.dtype)
    return loss, dlogits


def residual_block_forward(x, params: dict, mode: str = INFER,
                           rng: SeededRng | None = None,
                           skip_x=None) -> np.ndarray:
    """Standalone residual block: ReLU(main2(drop(ReLU(main1(x)))) + skip).

    `params` holds main1.w/bias, main2.w/bias, skip.w and optionally 'rate'.
    The skip edge projects skip_x (defaults to x) through its own weight.
    """
    rate = float(params.get("rate", 0.0))
    out, _ = _residual_forward(x, x if skip_x is None else skip_x, params, rate,
                               mode, rng)
    return out


def _residual_forward(x, skip_x, p: dict, rate: float, mode: str,
                      rng: SeededRng | None):
    h1 = _linear(x, p["main1.w"], p["main1.bias"])
    a1 = relu(h1)
    d1, mask = dropout_forward(a1, rate, mode, rng)
    h2 = _linear(d1, p["main2.w"], p["main2.bias"])
    skip = _linear(skip_x, p["skip.w"])
    z = h2 + skip
    out = relu(z)
    cache = {
        "x": x, "skip_x": skip_x, "h1_pos": h1 > 0, "d1": d1,
        "mask": mask if mode == TRAIN else None, "z_pos": z > 0,
    }
    return out, cache


def _residual_backward(dout: np.ndarray, p: dict, cache: dict):
    """Returns (dx, dskip_x_or_None, grads). Skip and main paths both feed dx
    when they share the same source; the caller adds them."""
    dz = dout * cache["z_pos"]
    grads = {
        "skip.w": _weight_grad(cache["skip_x"], dz),
        "main2.w": _weight_grad(cache["d1"], dz),
        "main2.bias": _bias_grad(dz),
    }
    dskip_x = None
    if not isinstance(cache["skip_x"], SparseBinaryMatrix):
        dskip_x = matmul(dz, p["skip.w"])
    dd1 = matmul(dz, p["main2.w"])
    da1 = dd1 if cache["mask"] is None else dd1 * cache["mask"]
    dh1 = da1 * cache["h1_pos"]
    grads["main1.w"] = _weight_grad(cache["x"], dh1)
    grads["main1.bias"] = _bias_grad(dh1)
    dx = None
    if not isinstance(cache["x"], SparseBinaryMatrix):
        dx = matmul(dh1, p["main1.w"])
    return dx, dskip_x, grads


# ---------------------------------------------------------------------------
# whole-model forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Per-layer activations and dropout masks needed by the backward pass."""

    spec: ModelSpec
    mode: str
    batch: SparseBinaryMatrix
    branch_caches: list = field(default_factory=list, repr=False)
    branch_outs: list = field(default_factory=list, repr=False)
    trunk_caches: list = field(default_factory=list, repr=False)
    logits: np.ndarray | None = None
    scores: np.ndarray | None = None


def _sub(params: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _chain_forward(named_layers, x, raw_input, params, mode, rng, caches: list):
    cur = x
    for prefix, layer in named_layers:
        if layer.kind == DENSE:
            out = _linear(cur, params[f"{prefix}.w"], params[f"{prefix}.bias"])
            caches.append({"kind": DENSE, "x": cur, "prefix": prefix})
        elif layer.kind == RELU:
            out = relu(cur)
            caches.append({"kind": RELU, "x_pos": cur > 0})
        elif layer.kind == DROPOUT:
            out, mask = dropout_forward(cur, layer.rate, mode, rng)
            caches.append({"kind": DROPOUT, "mask": mask})
        elif layer.kind == RESIDUAL_BLOCK:
            skip_x = raw_input if layer.skip_from_input else cur
            out, cache = _residual_forward(cur, skip_x, _sub(params, prefix),
                                           layer.rate or 0.0, mode, rng)
            cache.update(kind=RESIDUAL_BLOCK, prefix=prefix,
                         skip_from_input=layer.skip_from_input)
            caches.append(cache)
        elif layer.kind == SIGMOID_HEAD:
            out = _linear(cur, params[f"{prefix}.w"], params[f"{prefix}.bias"])
            caches.append({"kind": SIGMOID_HEAD, "x": cur, "prefix": prefix})
        else:
            raise ValueError(f"unexpected layer kind {layer.kind!r}")
        cur = out
    return cur


def model_forward(spec: ModelSpec, params: dict, batch: SparseBinaryMatrix,
                  mode: str = INFER, rng: SeededRng | None = None):
    """Run the full topology on a sparse batch. Returns (scores, trace)."""
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")
    if batch.cols != spec.input_dim:
        raise ShapeError(f"batch has {batch.cols} features, model expects "
                         f"{spec.input_dim}")
    check_params(spec, params)

    trace = ForwardTrace(spec=spec, mode=mode, batch=batch)
    for b, branch in enumerate(spec.branches):
        caches: list = []
        named = [(f"b{b}.l{i}", layer) for i, layer in enumerate(branch)]
        out = _chain_forward(named, batch, batch, params, mode, rng, caches)
        trace.branch_caches.append(caches)
        trace.branch_outs.append(out)

    start = 0
    if spec.trunk[0].kind == CONCAT:
        cur = concat_forward(trace.branch_outs)
        trace.trunk_caches.append({"kind": CONCAT,
                                   "widths": [o.shape[1] for o in trace.branch_outs]})
        start = 1
    else:
        cur = trace.branch_outs[0]

    named = [(f"t{i}", layer) for i, layer in enumerate(spec.trunk) if i >= start]
    logits = _chain_forward(named, cur, batch, params, mode, rng,
                            trace.trunk_caches)
    trace.logits = logits
    trace.scores = sigmoid(logits)
    return trace.scores, trace


def _chain_backward(caches, params, dout):
    """Walk a cache list in reverse. Returns (dx, grads)."""
    grads: dict[str, np.ndarray] = {}
    cur = dout
    for cache in reversed(caches):
        kind = cache["kind"]
        if kind in (DENSE, SIGMOID_HEAD):
            prefix = cache["prefix"]
            grads[f"{prefix}.w"] = _weight_grad(cache["x"], cur)
            grads[f"{prefix}.bias"] = _bias_grad(cur)
            if isinstance(cache["x"], SparseBinaryMatrix):
                cur = None  # reached the data boundary
            else:
                cur = matmul(cur, params[f"{prefix}.w"])
        elif kind == RELU:
            cur = cur * cache["x_pos"]
        elif kind == DROPOUT:
            cur = cur if cache["mask"] is None else cur * cache["mask"]
        elif kind == RESIDUAL_BLOCK:
            prefix = cache["prefix"]
            dx, dskip_x, block_grads = _residual_backward(cur, _sub(params, prefix),
                                                          cache)
            for k, v in block_grads.items():
                grads[f"{prefix}.{k}"] = v
            if dx is None:
                cur = None  # block input is the data boundary
            elif cache["skip_from_input"] or dskip_x is None:
                cur = dx  # skip grad flows to the raw input (data), not this chain
            else:
                cur = dx + dskip_x
        elif kind == CONCAT:
            cur = np.split(cur, np.cumsum(cache["widths"])[:-1], axis=1)
        else:
            raise ValueError(f"unexpected cache kind {kind!r}")
    return cur, grads


def model_backward(spec: ModelSpec, params: dict, trace: ForwardTrace,
                   dlogits: np.ndarray) -> dict:
    """Exact gradients for every named parameter given d(loss)/d(logits)."""
    if trace.spec != spec:
        raise ValueError("trace was produced by a different model spec")
    if trace.mode != TRAIN:
        raise ValueError("backward needs a train-mode forward trace")
    check_params(spec, params)
    if trace.logits is None or dlogits.shape != trace.logits.shape:
        raise ShapeError("dlogits shape does not match the traced logits")

    dcur, grads = _chain_backward(trace.trunk_caches, params, dlogits)
    if isinstance(dcur, list):  # concat split one gradient slice per branch
        branch_douts = dcur
    else:
        branch_douts = [dcur]
    for caches, dbranch in zip(trace.branch_caches, branch_douts):
        _, branch_grads = _chain_backward(caches, params, dbranch)
        grads.update(branch_grads)
    return grads


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------

# hidden widths and the single dropout rate of each baseline network
_BASELINE_LAYOUT = {
    "M1": ((600,), None),
    "M2": ((600,), 0.35),
    "M3": ((600, 400), None),
    "M4": ((600, 400), 0.35),
    "M5": ((600, 400, 250), None),
    "M6": ((600, 400, 250), 0.35),
    "M7": ((600, 400, 250, 200, 150), 0.35),
}


def build_baseline(model_id: str, input_dim: int, output_dim: int,
                   width_scale: float = 1.0) -> ModelSpec:
    """One of the eight reference networks (M1..M8).

    `width_scale` shrinks every hidden width proportionally (minimum 1 unit),
    which keeps gradient checks and smoke tests cheap.
    """
    _check_dim(input_dim, "input_dim")
    _check_dim(output_dim, "output_dim")

    def scaled(w: int) -> int:
        return max(1, round(w * width_scale))

    if model_id == "M8":
        block = residual_block(input_dim, scaled(600), scaled(400), rate=0.35)
        return ModelSpec(name="M8", input_dim=input_dim, output_dim=output_dim,
                         branches=((block,),),
                         trunk=(sigmoid_head(scaled(400), output_dim),))
    if model_id not in _BASELINE_LAYOUT:
        raise ValueError(f"unknown baseline {model_id!r}; valid ids: "
                         f"{', '.join(BASELINE_IDS)}")
    widths, rate = _BASELINE_LAYOUT[model_id]
    layers: list[LayerSpec] = []
    cur = input_dim
    for w in widths:
        layers += [dense(cur, scaled(w)), relu_layer()]
        cur = scaled(w)
    if rate is not None:
        layers.append(dropout_layer(rate))
    return ModelSpec(name=model_id, input_dim=input_dim, output_dim=output_dim,
                     branches=(tuple(layers),),
                     trunk=(sigmoid_head(cur, output_dim),))


@dataclass(frozen=True)
class CollabResConfig:
    """Shape of the collaborative residual model.

    Four parallel residual branches by default, each a 600->400 block with its
    own dropout rate, joined by concatenation and consolidated by a fusion
    residual block whose skip edge projects the raw input.
    """

    n_branches: int = 4
    branch_hidden: int | tuple[int, ...] = 600
    branch_out: int | tuple[int, ...] = 400
    dropout_rates: tuple[float, ...] | None = None
    fusion_dim: int = 600
    fusion_dropout: float = 0.0

    def resolved_rates(self) -> tuple[float, ...]:
        if self.dropout_rates is not None:
            rates = tuple(float(r) for r in self.dropout_rates)
            if len(rates) != self.n_branches:
                raise ValueError(f"{len(rates)} dropout rates for "
                                 f"{self.n_branches} branches")
            return rates
        if self.n_branches == 1:
            return (0.1,)
        # evenly spaced over [0.1, 0.4], one distinct rate per branch
        return tuple(round(0.1 + 0.3 * i / (self.n_branches - 1), 6)
                     for i in range(self.n_branches))

    def per_branch(self, value) -> tuple[int, ...]:
        if isinstance(value, (tuple, list)):
            if len(value) != self.n_branches:
                raise ValueError(f"{len(value)} widths for {self.n_branches} "
                                 f"branches")
            return tuple(int(v) for v in value)
        return (int(value),) * self.n_branches


def build_collabres(input_dim: int, output_dim: int,
                    cfg: CollabResConfig | None = None) -> ModelSpec:
    """Parallel residual branches -> concat -> input-skip fusion block -> head."""
    cfg = cfg or CollabResConfig()
    _check_dim(input_dim, "input_dim")
    _check_dim(output_dim, "output_dim")
    if cfg.n_branches < 1:
        raise ValueError("need at least one branch")
    hidden = cfg.per_branch(cfg.branch_hidden)
    outs = cfg.per_branch(cfg.branch_out)
    for w in hidden + outs + (cfg.fusion_dim,):
        _check_dim(w, "layer width")
    rates = cfg.resolved_rates()
    for r in rates:
        _check_rate(r)
    if len(set(rates)) != len(rates):
        warnings.warn("branch dropout rates are not all distinct; the branches "
                      "lose their diversity", stacklevel=2)

    branches = tuple(
        (residual_block(input_dim, hidden[b], outs[b], rate=rates[b]),)
        for b in range(cfg.n_branches)
    )
    concat_width = sum(outs)
    trunk = []
    if cfg.n_branches > 1:
        trunk.append(concat(outs))
    trunk.append(residual_block(concat_width, cfg.fusion_dim, cfg.fusion_dim,
                                rate=cfg.fusion_dropout, skip_from_input=True))
    trunk.append(sigmoid_head(cfg.fusion_dim, output_dim))
    return ModelSpec(name="collabres", input_dim=input_dim,
                     output_dim=output_dim, branches=branches,
                     trunk=tuple(trunk))


# ---------------------------------------------------------------------------
# spec (de)serialization for checkpoints
# ---------------------------------------------------------------------------

def spec_to_dict(spec: ModelSpec) -> dict:
    def layer_dict(layer: LayerSpec) -> dict:
        d = {"kind": layer.kind}
        for key in ("in_dim", "out_dim", "hidden_dim", "rate"):
            value = getattr(layer, key)
            if value is not None:
                d[key] = value
        if layer.branch_dims is not None:
            d["branch_dims"] = list(layer.branch_dims)
        if layer.skip_from_input:
            d["skip_from_input"] = True
        return d

    return {
        "name": spec.name,
        "input_dim": spec.input_dim,
        "output_dim": spec.output_dim,
        "branches": [[layer_dict(l) for l in br] for br in spec.branches],
        "trunk": [layer_dict(l) for l in spec.trunk],
    }


def spec_from_dict(d: dict) -> ModelSpec:
    def layer_from(ld: dict) -> LayerSpec:
        branch_dims = ld.get("branch_dims")
        return LayerSpec(
            kind=ld["kind"],
            in_dim=ld.get("in_dim"),
            out_dim=ld.get("out_dim"),
            hidden_dim=ld.get("hidden_dim"),
            rate=ld.get("rate"),
            branch_dims=tuple(branch_dims) if branch_dims is not None else None,
            skip_from_input=bool(ld.get("skip_from_input", False)),
        )

    return ModelSpec(
        name=d["name"],
        input_dim=int(d["input_dim"]),
        output_dim=int(d["output_dim"]),
        branches=tuple(tuple(layer_from(l) for l in br) for br in d["branches"]),
        trunk=tuple(layer_from(l) for l in d["trunk"]),
    )
