"""Reverse-mode automatic differentiation over dense float64 tensors.

Provides exactly the primitives the trajectory model and its losses need:
elementwise arithmetic, (batched) matmul, concat/slice/transpose/reshape,
softmax, layer norm, exact-erf GELU, embedding lookup, and a mean-squared
loss, plus AdamW, gradient clipping, and a checkpoint container.

Everything is float64. Every forward op validates that its output is
finite; NaN/Inf anywhere is treated as an error state, not a value.
"""

from __future__ import annotations

import json
import math
import struct
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "add", "sub", "mul", "scale", "matmul", "concat", "slice_", "transpose",
    "reshape", "softmax", "layer_norm", "gelu", "embedding_lookup",
    "mse_mean", "mean_all",
    "backward", "zero_grads",
    "AdamW", "clip_grad_norm",
    "save_checkpoint", "load_checkpoint",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array with an optional gradient accumulator.

    ``grad`` stays ``None`` until ``backward`` reaches the tensor; a leaf
    that the loss does not depend on keeps an absent gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite values in output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad or p._parents for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._bwd = bwd
    else:
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _result(a.data * c, (a,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _result(a.data @ b.data, (a, b), bwd, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty input list")
    parts = [t.data for t in tensors]
    try:
        data = np.concatenate(parts, axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _result(data, tuple(tensors), bwd, "concat")


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) slicing; index is a slice or tuple of slices/ints."""
    data = a.data[index]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    return _result(data.copy(), (a,), bwd, "slice")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _result(a.data.transpose(axes).copy(), (a,), bwd, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _result(data.copy(), (a,), bwd, "reshape")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _result(y, (a,), bwd, "softmax")


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"layer_norm: axis {axis} invalid for shape {a.shape}")
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = a.data.shape[axis]

    def bwd(g):
        gy_sum = g.sum(axis=axis, keepdims=True)
        gyy_sum = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, inv * (g - gy_sum / n - y * gyy_sum / n))

    return _result(y, (a,), bwd, "layer_norm")


def gelu(a: Tensor) -> Tensor:
    # Exact erf form so finite-difference checks stay tight.
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    y = a.data * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        _accum(a, g * (cdf + a.data * pdf))

    return _result(y, (a,), bwd, "gelu")


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError("embedding_lookup: index out of range")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _result(table.data[idx].copy(), (table,), bwd, "embedding_lookup")


def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mse_mean")
    diff = a.data - b.data
    n = diff.size
    val = np.asarray((diff * diff).sum() / n)

    def bwd(g):
        gd = g * (2.0 / n) * diff
        _accum(a, _unbroadcast(gd, a.shape))
        _accum(b, _unbroadcast(-gd, b.shape))

    return _result(val, (a, b), bwd, "mse_mean")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    val = np.asarray(a.data.sum() / n)

    def bwd(g):
        _accum(a, np.full_like(a.data, g / n))

    return _result(val, (a,), bwd, "mean_all")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Repeated calls without ``zero_grads`` accumulate. Traversal order is
    fixed by graph construction order, so gradients are deterministic.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    inner_grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_of: dict[int, Tensor] = {}
    for node in reversed(topo):
        g = inner_grads.pop(id(node), None)
        if g is None or node._bwd is None:
            continue
        # _bwd accumulates into parent .grad; route interior grads through
        # a scratch map so only leaves keep .grad afterwards.
        saved = [(p, p.grad) for p in node._parents]
        for p, _ in saved:
            p.grad = inner_grads.get(id(p))
        node._bwd(g)
        for p, old in saved:
            if p._bwd is None:
                # leaf: fold scratch into the persistent accumulator
                new = p.grad
                if p.requires_grad and new is not None:
                    p.grad = (old + new) if old is not None else new
                    leaf_of[id(p)] = p
                else:
                    p.grad = old
            else:
                if p.grad is not None:
                    inner_grads[id(p)] = p.grad
                p.grad = old


def zero_grads(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


class AdamW:
    """AdamW with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 0.0, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.betas = betas
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adamw_step: parameter {name!r} has no gradient")
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * update
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "lr": self.lr,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "eps": self.eps,
            "m": self.m,
            "v": self.v,
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        self.betas = tuple(state["betas"])
        self.weight_decay = float(state["weight_decay"])
        self.eps = float(state["eps"])
        self.m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}


def clip_grad_norm(params: Mapping[str, Tensor] | Iterable[Tensor],
                   max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ContractError(f"clip_grad_norm: max_norm must be > 0, got {max_norm}")
    values = list(params.values()) if isinstance(params, Mapping) else list(params)
    sq = 0.0
    for p in values:
        if p.grad is None:
            raise ContractError("clip_grad_norm: parameter has no gradient")
        sq += float((p.grad * p.grad).sum())
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / norm
        for p in values:
            p.grad *= factor
    return norm


# --- checkpoint container -------------------------------------------------
#
# Layout: magic "PTCK", u32 version, u64 JSON-header length, JSON header,
# then raw little-endian float64 blobs in header order. The header lists
# every array (name, shape) for parameters and, optionally, optimizer
# moments plus scalar optimizer fields and the step counter.

_CKPT_MAGIC = b"PTCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor],
                    optimizer: AdamW | None = None,
                    extra: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    header: dict = {"params": [], "extra": extra or {}}
    for name in sorted(params):
        arr = params[name].data
        header["params"].append({"name": name, "shape": list(arr.shape)})
        arrays.append((name, arr))
    if optimizer is not None:
        st = optimizer.state_dict()
        header["optimizer"] = {
            "step": st["step"], "lr": st["lr"], "betas": st["betas"],
            "weight_decay": st["weight_decay"], "eps": st["eps"],
            "m": [], "v": [],
        }
        for name in sorted(st["m"]):
            header["optimizer"]["m"].append({"name": name, "shape": list(st["m"][name].shape)})
            arrays.append((name, st["m"][name]))
        for name in sorted(st["v"]):
            header["optimizer"]["v"].append({"name": name, "shape": list(st["v"][name].shape)})
            arrays.append((name, st["v"][name]))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint into {'params', 'optimizer', 'extra'}."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _CKPT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))

        def read_array(shape):
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(8 * n), dtype="<f8").astype(np.float64)
            return arr.reshape(shape)

        params = {e["name"]: Tensor(read_array(e["shape"]), requires_grad=True)
                  for e in header["params"]}
        optimizer = None
        if "optimizer" in header:
            o = header["optimizer"]
            optimizer = {
                "step": o["step"], "lr": o["lr"], "betas": o["betas"],
                "weight_decay": o["weight_decay"], "eps": o["eps"],
                "m": {e["name"]: read_array(e["shape"]) for e in o["m"]},
                "v": {e["name"]: read_array(e["shape"]) for e in o["v"]},
            }
    return {"params": params, "optimizer": optimizer, "extra": header.get("extra", {})}
