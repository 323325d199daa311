"""Dense tensors plus a minimal reverse-mode differentiation core.

Tensors wrap contiguous numpy arrays. Operations optionally record
themselves on an explicit Graph (no global tape); backward() walks the
tape in reverse to accumulate gradients into trainable leaves.
Production paths run in float32; building tensors from float64 arrays
keeps float64 end to end, which the gradient-check suite relies on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32

_FLOAT_KINDS = ("f",)


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype.kind in _FLOAT_KINDS and arr.dtype.itemsize >= 4:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)


class Tensor:
    """Dense real array with a gradient slot."""

    __slots__ = ("data", "grad", "trainable", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def assert_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"tensor {self.name or '<unnamed>'} contains NaN or Inf")
        return self

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class Graph:
    """Explicit recording context for reverse-mode differentiation.

    Nodes are appended in execution order, so the tape is already
    topologically sorted; backward() just walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.nodes.append((output, inputs, backward_fn))

    def trainable_leaves(self) -> list[Tensor]:
        produced = {id(out) for out, _, _ in self.nodes}
        seen: dict[int, Tensor] = {}
        for _, inputs, _ in self.nodes:
            for t in inputs:
                if t.trainable and id(t) not in produced:
                    seen[id(t)] = t
        return list(seen.values())


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate dLoss/dParam into .grad of every trainable tensor reached.

    Gradients are overwritten, not accumulated across calls. Tensors the
    loss does not depend on are left untouched.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, backward_fn in reversed(graph.nodes):
        gout = grads.get(id(out))
        if gout is None:
            continue
        for t, g in zip(inputs, backward_fn(gout)):
            if g is None:
                continue
            tid = id(t)
            by_id[tid] = t
            if tid in grads:
                grads[tid] = grads[tid] + g
            else:
                grads[tid] = g
    for tid, t in by_id.items():
        if t.trainable:
            t.grad = grads.get(tid)


# ---------------------------------------------------------------------------
# ops


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0,
           graph: Graph | None = None) -> Tensor:
    """Cross-correlation of x[C,H,W] with w[Cout,Cin,k,k] plus bias."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 3 or wd.ndim != 4 or bd.ndim != 1:
        raise DimensionError(
            f"conv2d expects x[C,H,W], w[Co,Ci,k,k], b[Co]; got {xd.shape}, {wd.shape}, {bd.shape}")
    c_out, c_in, k, k2 = wd.shape
    if k != k2 or k not in (1, 3):
        raise ContractError(f"kernel must be square with k in {{1, 3}}, got {k}x{k2}")
    if c_in != xd.shape[0]:
        raise DimensionError(f"weight expects {c_in} input channels, tensor has {xd.shape[0]}")
    if bd.shape[0] != c_out:
        raise DimensionError(f"bias has {bd.shape[0]} channels, weight produces {c_out}")
    h, w_in = xd.shape[1], xd.shape[2]
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w_in + 2 * pad - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"empty conv output for input {xd.shape} with k={k}, stride={stride}, pad={pad}")

    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, out_h, out_w)
    y = wd.reshape(c_out, -1) @ cols + bd[:, None]
    out = Tensor(y.reshape(c_out, out_h, out_w))

    if graph is not None:
        def backward_fn(gout):
            gflat = gout.reshape(c_out, -1)
            grad_w = (gflat @ cols.T).reshape(wd.shape)
            grad_b = gflat.sum(axis=1)
            gcols = wd.reshape(c_out, -1).T @ gflat
            grad_xp = np.zeros_like(xp)
            gk = gcols.reshape(c_in, k, k, out_h, out_w)
            for ki in range(k):
                for kj in range(k):
                    grad_xp[:, ki:ki + stride * out_h:stride,
                            kj:kj + stride * out_w:stride] += gk[:, ki, kj]
            grad_x = grad_xp[:, pad:pad + h, pad:pad + w_in] if pad else grad_xp
            return grad_x, grad_w, grad_b
        graph.record(out, (x, w, b), backward_fn)
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (c, k, k, out_h, out_w), (s0, s1, s2, s1 * stride, s2 * stride))
    return windows.reshape(c * k * k, out_h * out_w)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5, graph: Graph | None = None) -> Tensor:
    """Normalize each channel group of x[C,H,W] to zero mean/unit variance, then scale and shift."""
    xd = x.data
    if xd.ndim != 3:
        raise DimensionError(f"group_norm expects x[C,H,W], got {xd.shape}")
    c = xd.shape[0]
    if groups <= 0 or c % groups != 0:
        raise DimensionError(f"groups={groups} does not divide {c} channels")
    if eps <= 0:
        raise ContractError("eps must be positive")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("gamma/beta must have one entry per channel")

    grouped = xd.reshape(groups, -1)
    mean = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = ((grouped - mean) * inv_std).reshape(xd.shape)
    y = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    out = Tensor(y)

    if graph is not None:
        def backward_fn(gout):
            gxh = (gout * gamma.data[:, None, None]).reshape(groups, -1)
            xh = xhat.reshape(groups, -1)
            m1 = gxh.mean(axis=1, keepdims=True)
            m2 = (gxh * xh).mean(axis=1, keepdims=True)
            grad_x = (inv_std * (gxh - m1 - xh * m2)).reshape(xd.shape)
            grad_gamma = (gout * xhat).sum(axis=(1, 2))
            grad_beta = gout.sum(axis=(1, 2))
            return grad_x, grad_gamma, grad_beta
        graph.record(out, (x, gamma, beta), backward_fn)
    return out


def relu(x: Tensor, graph: Graph | None = None) -> Tensor:
    """Elementwise max(0, x)."""
    out = Tensor(np.maximum(x.data, 0))
    if graph is not None:
        mask = x.data > 0
        def backward_fn(gout):
            return (gout * mask,)
        graph.record(out, (x,), backward_fn)
    return out


def sigmoid(x: Tensor, graph: Graph | None = None) -> Tensor:
    """Elementwise logistic function, numerically stable for large |x|."""
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    if graph is not None:
        def backward_fn(gout):
            return (gout * y * (1.0 - y),)
        graph.record(out, (x,), backward_fn)
    return out


def add(a: Tensor, b: Tensor, graph: Graph | None = None) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    if graph is not None:
        def backward_fn(gout):
            return gout, gout
        graph.record(out, (a, b), backward_fn)
    return out


def l1_loss(pred: Tensor, target: Tensor, weight: Tensor,
            graph: Graph | None = None) -> Tensor:
    """Weighted sum of absolute errors: sum(w * |pred - target|). Summed, never averaged."""
    p, t, w = pred.data, target.data, weight.data
    if p.shape != t.shape or p.shape != w.shape:
        raise DimensionError(f"l1_loss shape mismatch: {p.shape}, {t.shape}, {w.shape}")
    diff = p - t
    value = np.asarray(np.sum(w * np.abs(diff), dtype=np.float64), dtype=p.dtype)
    out = Tensor(value)
    out.assert_finite()
    if graph is not None:
        def backward_fn(gout):
            sgn = np.sign(diff)
            grad_pred = gout * w * sgn
            return grad_pred, -grad_pred, gout * np.abs(diff)
        graph.record(out, (pred, target, weight), backward_fn)
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """SGD-with-momentum state: one velocity buffer per parameter name."""

    lr: float
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], state: OptimState) -> None:
    """Apply v <- m*v + g, p <- p - lr*v to every parameter with a gradient."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[name] = v
        np.multiply(v, p.data.dtype.type(state.momentum), out=v)
        v += g
        p.data -= p.data.dtype.type(state.lr) * v


# ---------------------------------------------------------------------------
# weight file format (shared with the network module)

WEIGHTS_MAGIC = b"OFTW"
WEIGHTS_VERSION = 1


def save_weights(path, params: dict[str, Tensor]) -> None:
    """Write named tensors as little-endian binary: magic, version, count, then records."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(params)))
        for name, t in params.items():
            data = np.ascontiguousarray(t.data, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    """Read a weight file written by save_weights; returns float32 arrays by name."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ContractError(f"{path}: not a weight file (bad magic {blob[:4]!r})")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != WEIGHTS_VERSION:
        raise ContractError(f"{path}: unsupported weight format version {version}")
    offset = 12
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        params[name] = data.astype(np.float32)
    if offset != len(blob):
        raise ContractError(f"{path}: {len(blob) - offset} trailing bytes after {count} tensors")
    return params
