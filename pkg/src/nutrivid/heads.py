"""Regression heads over frozen frame embeddings, with exact gradients.

Three variants share one parameter container:

* dish-only:  MLP on the final-dish embedding,        D -> d_h -> d_h/2 -> 4
* concat:     MLP on [dish; pooled process],         2D -> d_h -> d_h/2 -> 4
* gated:      sigmoid-gated mix of projected dish and process embeddings,
              then an MLP,                           d_h -> d_h -> 4

Process bags are aggregated by a two-layer attention network with a
softmax over the bag (or plain mean pooling). Hidden activations are
ReLU with inverted dropout at train time.

Everything is float64 numpy with hand-derived backward passes; there is
no autodiff graph. Embeddings are inputs, never parameters, so no
gradient flows to them.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class HeadError(Exception):
    pass


class EmptyBag(HeadError):
    pass


class DimMismatch(HeadError):
    pass


class MissingProcess(HeadError):
    pass


class StaleCache(HeadError):
    pass


class ShapeMismatch(HeadError):
    pass


class Variant(Enum):
    DISH_ONLY = "dish-only"
    CONCAT = "concat"
    GATED = "gated"


class PoolMode(Enum):
    WEIGHTED = "weighted"
    MEAN = "mean"


N_TARGETS = 4
DEFAULT_HIDDEN = 512
DEFAULT_ATTN_HIDDEN = 128
DEFAULT_DROPOUT = 0.3
GATE_INIT = 0.5


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max()
    e = np.exp(z)
    return e / e.sum()


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch(
                f"linear layer shapes inconsistent: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("linear layer parameters must be finite")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


@dataclass
class AttentionPoolParams:
    layer1: LinearLayer  # D -> a_h
    layer2: LinearLayer  # a_h -> 1

    def __post_init__(self):
        if self.layer2.weight.shape[0] != 1:
            raise ShapeMismatch("attention layer2 must produce a scalar score")
        if self.layer1.weight.shape[0] != self.layer2.weight.shape[1]:
            raise ShapeMismatch("attention layer widths do not chain")


def attention_pool(embeddings: np.ndarray, params: AttentionPoolParams | None,
                   mode: PoolMode) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate a bag of embeddings into one vector.

    Weighted mode scores each row with the two-layer network and softmax-
    normalizes; mean mode weighs every row 1/N. Returns (pooled, alphas).
    """
    bag = np.asarray(embeddings, dtype=np.float64)
    if bag.ndim != 2 or bag.shape[0] == 0:
        raise EmptyBag("attention_pool requires a non-empty N x D bag")
    n = bag.shape[0]
    if mode is PoolMode.MEAN:
        alphas = np.full(n, 1.0 / n)
    else:
        if params is None:
            raise ValueError("weighted pooling requires attention parameters")
        hidden = relu(params.layer1(bag))
        scores = params.layer2(hidden).ravel()
        alphas = softmax(scores)
    return alphas @ bag, alphas


@dataclass
class FusionModel:
    variant: Variant
    dim: int
    d_h: int = DEFAULT_HIDDEN
    a_h: int = DEFAULT_ATTN_HIDDEN
    pool_mode: PoolMode = PoolMode.WEIGHTED
    dropout_p: float = DEFAULT_DROPOUT
    pool: AttentionPoolParams | None = None
    proj_dish: np.ndarray | None = None
    proj_proc: np.ndarray | None = None
    gate_param: np.ndarray | None = None
    head: list[LinearLayer] = field(default_factory=list)

    def parameter_items(self) -> Iterator[tuple[str, np.ndarray]]:
        """(name, array) pairs in fixed declaration order."""
        if self.pool is not None:
            yield "pool.layer1.weight", self.pool.layer1.weight
            yield "pool.layer1.bias", self.pool.layer1.bias
            yield "pool.layer2.weight", self.pool.layer2.weight
            yield "pool.layer2.bias", self.pool.layer2.bias
        if self.variant is Variant.GATED:
            yield "proj_dish", self.proj_dish
            yield "proj_proc", self.proj_proc
            yield "gate_param", self.gate_param
        for i, layer in enumerate(self.head):
            yield f"head.{i}.weight", layer.weight
            yield f"head.{i}.bias", layer.bias

    def parameters(self) -> list[np.ndarray]:
        return [array for _, array in self.parameter_items()]

    def parameter_names(self) -> list[str]:
        return [name for name, _ in self.parameter_items()]

    def gate_mix(self) -> float:
        """Current sigmoid-gate coefficient on the dish branch."""
        if self.gate_param is None:
            raise HeadError("model has no gate")
        return float(sigmoid(self.gate_param)[0])


def head_dims(variant: Variant, dim: int, d_h: int) -> list[int]:
    if variant is Variant.DISH_ONLY:
        return [dim, d_h, d_h // 2, N_TARGETS]
    if variant is Variant.CONCAT:
        return [2 * dim, d_h, d_h // 2, N_TARGETS]
    return [d_h, d_h, N_TARGETS]


def param_shapes(variant: Variant, dim: int, d_h: int, a_h: int) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter shapes; the single source of truth for init and
    checkpoint layout."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if variant is not Variant.DISH_ONLY:
        shapes += [
            ("pool.layer1.weight", (a_h, dim)),
            ("pool.layer1.bias", (a_h,)),
            ("pool.layer2.weight", (1, a_h)),
            ("pool.layer2.bias", (1,)),
        ]
    if variant is Variant.GATED:
        shapes += [
            ("proj_dish", (d_h, dim)),
            ("proj_proc", (d_h, dim)),
            ("gate_param", (1,)),
        ]
    dims = head_dims(variant, dim, d_h)
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        shapes += [(f"head.{i}.weight", (d_out, d_in)), (f"head.{i}.bias", (d_out,))]
    return shapes


def _assemble(variant: Variant, dim: int, d_h: int, a_h: int, pool_mode: PoolMode,
              dropout_p: float, arrays: dict[str, np.ndarray]) -> FusionModel:
    pool = None
    if variant is not Variant.DISH_ONLY:
        pool = AttentionPoolParams(
            layer1=LinearLayer(arrays["pool.layer1.weight"], arrays["pool.layer1.bias"]),
            layer2=LinearLayer(arrays["pool.layer2.weight"], arrays["pool.layer2.bias"]),
        )
    head = []
    i = 0
    while f"head.{i}.weight" in arrays:
        head.append(LinearLayer(arrays[f"head.{i}.weight"], arrays[f"head.{i}.bias"]))
        i += 1
    return FusionModel(
        variant=variant, dim=dim, d_h=d_h, a_h=a_h, pool_mode=pool_mode, dropout_p=dropout_p,
        pool=pool,
        proj_dish=arrays.get("proj_dish"),
        proj_proc=arrays.get("proj_proc"),
        gate_param=arrays.get("gate_param"),
        head=head,
    )


def init_model(variant: Variant, dim: int, seed: int, pool_mode: PoolMode = PoolMode.WEIGHTED,
               d_h: int = DEFAULT_HIDDEN, a_h: int = DEFAULT_ATTN_HIDDEN,
               dropout_p: float = DEFAULT_DROPOUT) -> FusionModel:
    """Fresh model: fan-scaled uniform weights, zero biases, gate at 0.5.

    Weight matrices draw from U(-b, b) with b = sqrt(6 / (fan_in + fan_out)),
    in declaration order, so a (variant, dim, seed) triple pins every bit.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(variant, dim, d_h, a_h):
        if name == "gate_param":
            arrays[name] = np.array([GATE_INIT], dtype=np.float64)
        elif len(shape) == 2:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape, dtype=np.float64)
    return _assemble(variant, dim, d_h, a_h, pool_mode, dropout_p, arrays)


@dataclass
class ForwardCache:
    """Intermediates from one forward pass, consumed by backward()."""

    model: FusionModel
    z_d: np.ndarray
    bag: np.ndarray | None
    alphas: np.ndarray | None
    z_p: np.ndarray | None
    pool_pre: np.ndarray | None
    pool_hidden: np.ndarray | None
    gate: float | None
    proj_d_out: np.ndarray | None
    proj_p_out: np.ndarray | None
    layer_inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    masks: list[np.ndarray | None]
    train_mode: bool


def forward(model: FusionModel, z_d: np.ndarray, process: np.ndarray | None = None,
            train_mode: bool = False, rng: np.random.Generator | None = None
            ) -> tuple[np.ndarray, ForwardCache]:
    """Predict the 4 normalized targets for one instance.

    Eval mode is a pure function of (model, inputs). Train mode applies
    inverted dropout to hidden head activations using ``rng``, and the
    returned cache carries the masks so backward matches exactly.
    """
    z_d = np.asarray(z_d, dtype=np.float64).ravel()
    if z_d.shape != (model.dim,):
        raise DimMismatch(f"dish embedding has shape {z_d.shape}, model dim is {model.dim}")
    if train_mode and model.dropout_p > 0 and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")

    bag = None
    alphas = None
    z_p = None
    pool_pre = None
    pool_hidden = None
    gate = None
    proj_d_out = None
    proj_p_out = None

    if model.variant is not Variant.DISH_ONLY:
        if process is None or len(process) == 0:
            raise MissingProcess(
                f"{model.variant.value} forward requires a non-empty process bag"
            )
        bag = np.asarray(process, dtype=np.float64)
        if bag.ndim != 2 or bag.shape[1] != model.dim:
            raise DimMismatch(f"process bag has shape {bag.shape}, model dim is {model.dim}")
        if model.pool_mode is PoolMode.WEIGHTED:
            pool_pre = model.pool.layer1(bag)
            pool_hidden = relu(pool_pre)
            scores = model.pool.layer2(pool_hidden).ravel()
            alphas = softmax(scores)
        else:
            alphas = np.full(bag.shape[0], 1.0 / bag.shape[0])
        z_p = alphas @ bag

    if model.variant is Variant.DISH_ONLY:
        x = z_d
    elif model.variant is Variant.CONCAT:
        x = np.concatenate([z_d, z_p])
    else:
        gate = float(sigmoid(model.gate_param)[0])
        proj_d_out = model.proj_dish @ z_d
        proj_p_out = model.proj_proc @ z_p
        x = gate * proj_d_out + (1.0 - gate) * proj_p_out

    layer_inputs: list[np.ndarray] = []
    preacts: list[np.ndarray] = []
    masks: list[np.ndarray | None] = []
    last = len(model.head) - 1
    for i, layer in enumerate(model.head):
        layer_inputs.append(x)
        pre = layer(x)
        preacts.append(pre)
        if i == last:
            masks.append(None)
            x = pre
        else:
            act = relu(pre)
            if train_mode and model.dropout_p > 0:
                mask = rng.random(act.shape) >= model.dropout_p
                masks.append(mask)
                x = act * mask / (1.0 - model.dropout_p)
            else:
                masks.append(None)
                x = act

    cache = ForwardCache(
        model=model, z_d=z_d, bag=bag, alphas=alphas, z_p=z_p,
        pool_pre=pool_pre, pool_hidden=pool_hidden, gate=gate,
        proj_d_out=proj_d_out, proj_p_out=proj_p_out,
        layer_inputs=layer_inputs, preacts=preacts, masks=masks, train_mode=train_mode,
    )
    return x, cache


def backward(model: FusionModel, cache: ForwardCache, loss_grad: np.ndarray,
             out: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Gradients of the scalar loss w.r.t. every parameter.

    ``loss_grad`` is d loss / d prediction (shape (4,)). The softmax
    attention backward couples the whole bag through the full Jacobian;
    mean pooling contributes no parameter gradient. The output list
    aligns with model.parameters(); when ``out`` is given, gradients are
    accumulated into it in place (the full-batch training loop relies on
    this to avoid reallocating the largest matrices per instance).
    """
    if cache.model is not model:
        raise StaleCache("cache was produced by a different model instance")
    loss_grad = np.array(loss_grad, dtype=np.float64).ravel()
    if loss_grad.shape != (N_TARGETS,):
        raise ShapeMismatch(f"loss_grad must have shape ({N_TARGETS},), got {loss_grad.shape}")

    grads: dict[str, np.ndarray] = {}

    dx = loss_grad
    last = len(model.head) - 1
    for i in range(last, -1, -1):
        layer = model.head[i]
        x_in = cache.layer_inputs[i]
        if i == last:
            d_pre = dx
        else:
            d_act = dx
            if cache.masks[i] is not None:
                d_act = d_act * cache.masks[i] / (1.0 - model.dropout_p)
            d_pre = d_act * (cache.preacts[i] > 0)
        grads[f"head.{i}.weight"] = d_pre[:, None] * x_in[None, :]
        grads[f"head.{i}.bias"] = d_pre
        dx = layer.weight.T @ d_pre

    if model.variant is Variant.CONCAT:
        d_zp = dx[model.dim:]
    elif model.variant is Variant.GATED:
        du = dx
        g = cache.gate
        diff = cache.proj_d_out - cache.proj_p_out
        grads["gate_param"] = np.array([float(du @ diff) * g * (1.0 - g)])
        grads["proj_dish"] = (g * du)[:, None] * cache.z_d[None, :]
        grads["proj_proc"] = ((1.0 - g) * du)[:, None] * cache.z_p[None, :]
        d_zp = (1.0 - g) * (model.proj_proc.T @ du)

    if model.variant is not Variant.DISH_ONLY and model.pool_mode is PoolMode.WEIGHTED:
        alphas = cache.alphas
        d_alpha = cache.bag @ d_zp
        d_scores = alphas * (d_alpha - float(alphas @ d_alpha))
        w2 = model.pool.layer2.weight.ravel()
        grads["pool.layer2.weight"] = (d_scores @ cache.pool_hidden)[None, :]
        grads["pool.layer2.bias"] = np.array([d_scores.sum()])
        d_hidden = d_scores[:, None] * w2[None, :]
        d_pre = d_hidden * (cache.pool_pre > 0)
        grads["pool.layer1.weight"] = d_pre.T @ cache.bag
        grads["pool.layer1.bias"] = d_pre.sum(axis=0)

    if out is None:
        return [grads[name] if name in grads else np.zeros_like(array)
                for name, array in model.parameter_items()]
    for i, (name, _) in enumerate(model.parameter_items()):
        if name in grads:
            out[i] += grads[name]
    return out


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0
              ) -> tuple[float, np.ndarray]:
    """Smooth-L1 over the 4 targets, mean-reduced; returns (loss, d loss/d pred)."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    err = pred - target
    quad = np.abs(err) < beta
    per = np.where(quad, 0.5 * err * err / beta, np.abs(err) - 0.5 * beta)
    grad = np.where(quad, err / beta, np.sign(err)) / len(err)
    return float(per.mean()), grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_adam(params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to the parameters in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads, and optimizer state are misaligned")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"parameter shape {p.shape} does not match gradient {g.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


# --- checkpoint format --------------------------------------------------------

CKPT_MAGIC = b"VNCK"
CKPT_VERSION = 1

_CKPT_HEADER = struct.Struct("<4sHBBIIId")
_VARIANT_CODES = {Variant.DISH_ONLY: 0, Variant.CONCAT: 1, Variant.GATED: 2}
_POOL_CODES = {PoolMode.WEIGHTED: 0, PoolMode.MEAN: 1}


class CheckpointError(HeadError):
    pass


def save_checkpoint(model: FusionModel, path: str | Path) -> None:
    """Versioned binary dump: header, then f64 tensors in declaration order,
    then a CRC-32 of the tensor bytes. Round-trips bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = b"".join(
        np.ascontiguousarray(array, dtype="<f8").tobytes() for array in model.parameters()
    )
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION,
        _VARIANT_CODES[model.variant], _POOL_CODES[model.pool_mode],
        model.dim, model.d_h, model.a_h, model.dropout_p,
    )
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path: str | Path) -> FusionModel:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size + 4:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    magic, version, vcode, pcode, dim, d_h, a_h, dropout_p = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    variant = {code: v for v, code in _VARIANT_CODES.items()}.get(vcode)
    pool_mode = {code: p for p, code in _POOL_CODES.items()}.get(pcode)
    if variant is None or pool_mode is None:
        raise CheckpointError(f"{path}: unknown variant/pool codes ({vcode}, {pcode})")
    shapes = param_shapes(variant, dim, d_h, a_h)
    payload_len = sum(int(np.prod(shape)) * 8 for _, shape in shapes)
    offset = _CKPT_HEADER.size
    if len(raw) != offset + payload_len + 4:
        raise CheckpointError(f"{path}: size mismatch for declared architecture")
    payload = raw[offset:offset + payload_len]
    (stored_crc,) = struct.unpack_from("<I", raw, offset + payload_len)
    if zlib.crc32(payload) != stored_crc:
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in shapes:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count,
                                     offset=cursor).reshape(shape).copy()
        cursor += count * 8
    return _assemble(variant, dim, d_h, a_h, pool_mode, float(dropout_p), arrays)
