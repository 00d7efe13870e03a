"""Dense tensors with reverse-mode differentiation on a numpy substrate.

Layout convention is channels-first: image batches are ``[B, C, H, W]``.
Every operation records its adjoint rule on a per-result tape; calling
:meth:`Tensor.backward` on a scalar loss replays the tape and accumulates
gradients into the ``grad`` buffer of each participating leaf.

Values default to float32; float64 is selectable and is what the
finite-difference checker uses for its tight tolerances.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, CorruptionError, ShapeError

__all__ = [
    "Rng", "Tensor", "no_grad",
    "tensor", "zeros", "full", "normal", "uniform",
    "conv2d", "conv2d_transpose", "resample", "up2_nearest", "down2_average",
    "activation", "leaky_relu", "tanh", "sigmoid",
    "concat_channels", "reduce_mean", "log", "absolute", "clamp", "reshape",
    "write_tensor", "read_tensor", "tensor_to_bytes", "tensor_from_bytes",
]


# ---------------------------------------------------------------------------
# Deterministic random stream
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF
_INV_2_53 = np.float64(1.0 / (1 << 53))


class Rng:
    """Counter-based 64-bit PRNG (splitmix-style output function).

    The stream is a pure function of ``(seed, counter)``: the k-th draw is
    ``mix64(seed + (k+1) * gamma)``.  Identical seed and call sequence give a
    bit-identical stream on every platform, which is what makes training
    trajectories and allocation reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64_MASK
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = (np.uint64(self.seed) + idx * _GAMMA)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform01(self, n: int) -> np.ndarray:
        """n float64 samples in [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform01(n) * (hi - lo) + lo
        return u.reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Gaussian samples via a Box-Muller transform of the stream."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = self.uniform01(half)
        u2 = self.uniform01(half)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (z * std + mean).reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers in [0, bound) (modulo reduction; determinism first)."""
        return (self._raw(n) % np.uint64(bound)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n) driven by the stream."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(1, i + 1)[0])
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def fork(self) -> "Rng":
        """Independent child stream seeded from the parent stream."""
        return Rng(int(self._raw(1)[0]))


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional array, optionally participating in the gradient tape.

    ``data`` is a numpy array (float32 by default).  ``grad`` is ``None``
    until a backward pass touches this tensor; afterwards it is a same-shape
    accumulation buffer (repeated backward calls add into it).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 _parents: tuple = (), _grad_fn=None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        """Same values, cut loose from the tape."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse sweep from a scalar; accumulates into leaf ``grad`` buffers."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # Grad functions may hand back views of (or the very array of) the
        # incoming adjoint, so accumulation rebinds rather than mutating.
        adjoint: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            adj = adjoint.pop(id(node), None)
            if adj is None:
                continue
            if node.is_leaf():
                if node.grad is None:
                    node.grad = adj.copy()
                else:
                    node.grad += adj
                continue
            for parent, padj in zip(node._parents, node._grad_fn(adj)):
                if padj is None or not parent.requires_grad:
                    continue
                slot = adjoint.get(id(parent))
                adjoint[id(parent)] = padj if slot is None else slot + padj

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _neg(_coerce(other, self.dtype)))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __neg__(self):
        return _neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}{flag})"


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    """Wrap an op result, recording the tape edge when grad mode is live."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _grad_fn=grad_fn)
    return Tensor(data)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------

def _validated_shape(shape) -> tuple:
    shape = _as_shape(shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"extents must all be >= 1, got {list(shape)}")
    return shape


def tensor(data, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Tensor from array-like data (copies into the requested dtype)."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_validated_shape(shape), dtype=dtype),
                  requires_grad=requires_grad)


def full(shape, value: float, dtype=np.float32,
         requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_validated_shape(shape), value, dtype=dtype),
                  requires_grad=requires_grad)


def normal(shape, rng: Rng, mean: float = 0.0, std: float = 1.0,
           dtype=np.float32, requires_grad: bool = False) -> Tensor:
    shape = _validated_shape(shape)
    return Tensor(rng.normal(shape, mean, std).astype(dtype),
                  requires_grad=requires_grad)


def uniform(shape, rng: Rng, lo: float = -1.0, hi: float = 1.0,
            dtype=np.float32, requires_grad: bool = False) -> Tensor:
    shape = _validated_shape(shape)
    return Tensor(rng.uniform(shape, lo, hi).astype(dtype),
                  requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def _add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    a_scalar, b_scalar = a.data.ndim == 0, b.data.ndim == 0
    if not a_scalar and not b_scalar:
        _check_same_shape(a, b, "add")

    def grad_fn(g):
        ga = np.array(g.sum(), dtype=g.dtype) if a_scalar and not b_scalar else g
        gb = np.array(g.sum(), dtype=g.dtype) if b_scalar and not a_scalar else g
        return ga, gb

    return _node(a.data + b.data, (a, b), grad_fn)


def _mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    a_scalar, b_scalar = a.data.ndim == 0, b.data.ndim == 0
    if not a_scalar and not b_scalar:
        _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g * bd
        gb = g * ad
        if a_scalar and not b_scalar:
            ga = np.array(ga.sum(), dtype=g.dtype)
        if b_scalar and not a_scalar:
            gb = np.array(gb.sum(), dtype=g.dtype)
        return ga, gb

    return _node(ad * bd, (a, b), grad_fn)


def _neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def log(x: Tensor) -> Tensor:
    """Natural logarithm; caller guarantees strictly positive input."""
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def absolute(x: Tensor) -> Tensor:
    """|x| with the sign subgradient (0 maps to 0)."""
    xd = x.data
    return _node(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only inside the open interval."""
    xd = x.data
    gate = ((xd > lo) & (xd < hi)).astype(xd.dtype)
    return _node(np.clip(xd, lo, hi), (x,), lambda g: (g * gate,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0,1), got {slope}")
    xd = x.data
    gate = np.where(xd > 0, xd.dtype.type(1), xd.dtype.type(slope))
    return _node(xd * gate, (x,), lambda g: (g * gate,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


_ACTIVATIONS = ("leaky_relu", "tanh", "sigmoid")


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """Dispatch on activation name; ``slope`` only applies to leaky_relu."""
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}, expected one of {_ACTIVATIONS}")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = _as_shape(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _node(x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(old),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack b's channels after a's; batch and spatial extents must match."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects [B,C,H,W] tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def grad_fn(g):
        return g[:, :ca], g[:, ca:]

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), grad_fn)


def reduce_mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("reduce_mean of empty tensor")
    n = x.size
    shape = x.shape
    dt = x.data.dtype

    def grad_fn(g):
        return (np.full(shape, g.reshape(()) / n, dtype=dt),)

    return _node(np.array(x.data.mean(), dtype=dt), (x,), grad_fn)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def up2_nearest(x: Tensor) -> Tensor:
    """Duplicate every pixel into a 2x2 block (trailing two axes)."""
    if x.data.ndim < 2:
        raise ShapeError("up2_nearest needs at least 2 dimensions")
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def grad_fn(g):
        lead = g.shape[:-2]
        h2, w2 = g.shape[-2] // 2, g.shape[-1] // 2
        return (g.reshape(*lead, h2, 2, w2, 2).sum(axis=(-3, -1)),)

    return _node(out, (x,), grad_fn)


def down2_average(x: Tensor) -> Tensor:
    """Average every disjoint 2x2 block (trailing two axes)."""
    if x.data.ndim < 2:
        raise ShapeError("down2_average needs at least 2 dimensions")
    h, w = x.data.shape[-2], x.data.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"down2_average needs even extents, got {h}x{w}")
    lead = x.data.shape[:-2]
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    dt = x.data.dtype

    def grad_fn(g):
        return ((g.repeat(2, axis=-2).repeat(2, axis=-1) * dt.type(0.25)),)

    return _node(out, (x,), grad_fn)


def resample(x: Tensor, mode: str) -> Tensor:
    if mode == "up2_nearest":
        return up2_nearest(x)
    if mode == "down2_average":
        return down2_average(x)
    raise ContractError(f"unknown resample mode {mode!r}")


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _patch_view(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Sliding [B,C,kh,kw,Ho,Wo] window view over a padded [B,C,Hp,Wp] array."""
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
    ), ho, wo


def _conv_args(x: Tensor, kernel: Tensor, bias: Tensor, stride: int,
               padding: int, op: str):
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"{op} expects 4-d input and kernel")
    if bias.data.ndim != 1:
        raise ShapeError(f"{op} expects 1-d bias")
    if stride < 1:
        raise ContractError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"{op}: padding must be >= 0, got {padding}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with kernel [Cout,Cin,Kh,Kw].

    Output spatial extent is floor((H + 2*padding - Kh)/stride) + 1.
    """
    _conv_args(x, kernel, bias, stride, padding, "conv2d")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if bias.shape[0] != cout:
        raise ShapeError(f"conv2d: bias size {bias.shape[0]} != {cout} out channels")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")

    xp = np.ascontiguousarray(_pad_hw(x.data, padding))
    patches, ho, wo = _patch_view(xp, kh, kw, stride)
    kd = kernel.data
    out = np.tensordot(kd, patches, axes=([1, 2, 3], [1, 2, 3]))
    out = out.transpose(1, 0, 2, 3).copy()
    out += bias.data.reshape(1, -1, 1, 1)

    def grad_fn(g):
        pv, _, _ = _patch_view(xp, kh, kw, stride)
        gk = np.tensordot(g, pv, axes=([0, 2, 3], [0, 4, 5]))
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                contrib = np.tensordot(g, kd[:, :, u, v], axes=([1], [0]))
                gxp[:, :, u:u + ho * stride:stride,
                    v:v + wo * stride:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gk, gb

    return _node(out, (x, kernel, bias), grad_fn)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d: scatter [B,Cout,H,W] through kernel [Cout,Cin,Kh,Kw].

    Output spatial extent is (H-1)*stride - 2*padding + Kh.  With matching
    kernel/stride/padding, <conv2d(x,K), y> == <x, conv2d_transpose(y,K)>.
    """
    _conv_args(x, kernel, bias, stride, padding, "conv2d_transpose")
    b, cout, h, w = x.shape
    kcout, cin, kh, kw = kernel.shape
    if cout != kcout:
        raise ShapeError(
            f"conv2d_transpose: input has {cout} channels, kernel expects {kcout}")
    if bias.shape[0] != cin:
        raise ShapeError(
            f"conv2d_transpose: bias size {bias.shape[0]} != {cin} out channels")
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ShapeError("conv2d_transpose: padding swallows the whole output")

    xd, kd = x.data, kernel.data
    full_out = np.zeros((b, cin, hf, wf), dtype=xd.dtype)
    for u in range(kh):
        for v in range(kw):
            contrib = np.tensordot(xd, kd[:, :, u, v], axes=([1], [0]))
            full_out[:, :, u:u + h * stride:stride,
                     v:v + w * stride:stride] += contrib.transpose(0, 3, 1, 2)
    out = full_out[:, :, padding:hf - padding, padding:wf - padding].copy()
    out += bias.data.reshape(1, -1, 1, 1)

    def grad_fn(g):
        gp = np.ascontiguousarray(_pad_hw(g, padding))
        patches, _, _ = _patch_view(gp, kh, kw, stride)
        gx = np.tensordot(patches, kd, axes=([1, 2, 3], [1, 2, 3]))
        gx = gx.transpose(0, 3, 1, 2)
        gk = np.tensordot(xd, patches, axes=([0, 2, 3], [0, 4, 5]))
        gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return _node(out, (x, kernel, bias), grad_fn)


# ---------------------------------------------------------------------------
# Serialization: magic "TFTN", version u16, rank u16, extents u64 LE, f32 LE
# ---------------------------------------------------------------------------

_TENSOR_MAGIC = b"TFTN"
_TENSOR_VERSION = 1


def write_tensor(fh: BinaryIO, t: Tensor):
    """Serialize to the checkpoint wire format (values stored as float32)."""
    rank = t.data.ndim
    fh.write(_TENSOR_MAGIC)
    fh.write(struct.pack("<HH", _TENSOR_VERSION, rank))
    fh.write(struct.pack(f"<{rank}Q", *t.shape))
    fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(8)
    if len(head) != 8 or head[:4] != _TENSOR_MAGIC:
        raise CorruptionError("bad tensor magic")
    version, rank = struct.unpack("<HH", head[4:])
    if version != _TENSOR_VERSION:
        raise CorruptionError(f"unsupported tensor version {version}")
    raw_shape = fh.read(8 * rank)
    if len(raw_shape) != 8 * rank:
        raise CorruptionError("truncated tensor header")
    shape = struct.unpack(f"<{rank}Q", raw_shape)
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise CorruptionError("truncated tensor payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    return Tensor(data)


def tensor_to_bytes(t: Tensor) -> bytes:
    import io
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> Tensor:
    import io
    return read_tensor(io.BytesIO(raw))
