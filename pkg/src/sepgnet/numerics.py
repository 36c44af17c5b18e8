"""Dense float tensors with taped reverse-mode gradients.

Forward operations run on plain numpy arrays wrapped in :class:`Tensor`.
While a :class:`GradTape` is active (``with GradTape():``) every operation
that touches a gradient-requiring input appends its adjoint rule to the
tape; :func:`backward` replays the records in exact reverse execution order
and accumulates d(loss)/d(value) into each :class:`Parameter`'s ``grad``.

Float32 is the working precision of the package; the engine itself is
dtype-generic so verification code can run the identical graph in float64.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np

from . import kernels

CHECKPOINT_MAGIC = b"SEPGCKPT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is inconsistent with the data it is applied to."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (no tape, double backward, non-scalar)."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or truncated."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense row-major float array, optionally tracked by a tape."""

    __slots__ = ("data", "_tape", "_requires", "_param")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self._tape = None
        self._requires = False
        self._param = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"


class Parameter:
    """A named trainable tensor with an additively accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value._requires = True
        self.value._param = self
        self.grad = Tensor(np.zeros_like(self.value.data))

    def zero_grad(self):
        self.grad.data[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.value.shape)})"


_ACTIVE_TAPE: "GradTape | None" = None


class GradTape:
    """Ordered record of executed operations, consumed by backward()."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable]] = []
        self._params: dict[int, Parameter] = {}
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a GradTape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._records)


def active_tape():
    return _ACTIVE_TAPE


def record(out: Tensor, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    """Attach an adjoint rule to the active tape.

    ``backward_fn(grad_out, adjoints)`` receives the upstream gradient array
    and the adjoint dict and must accumulate into it via :func:`accumulate`.
    No-op when no tape is active or no input requires gradients.
    """
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    needed = False
    for t in inputs:
        if t._requires:
            needed = True
            if t._param is not None:
                tape._params[id(t._param)] = t._param
    if not needed:
        return out
    out._requires = True
    out._tape = tape
    tape._records.append((out, backward_fn))
    return out


def accumulate(adjoints: dict, t: Tensor, grad: np.ndarray):
    """Add ``grad`` to the adjoint of ``t`` (only if t requires gradients)."""
    if not t._requires:
        return
    key = id(t)
    if key in adjoints:
        adjoints[key] += grad
    else:
        adjoints[key] = grad


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(value) into every reachable Parameter.grad."""
    if output.data.size != 1:
        raise TapeError(f"backward() needs a scalar output, got shape {output.shape}")
    tape = output._tape
    if tape is None:
        raise TapeError("output is not reachable from any recorded tape")
    if tape._consumed:
        raise TapeError("backward() called twice on the same tape")
    tape._consumed = True
    adjoints: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for out, fn in reversed(tape._records):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        fn(g, adjoints)
    for param in tape._params.values():
        g = adjoints.pop(id(param.value), None)
        if g is not None:
            param.grad.data += g


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Forward operations


def conv2d(x: Tensor, weight: Parameter, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x [B,C,H,W] with weight [K,C,kh,kw]."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4D [B,C,H,W], got {x.shape}")
    w = weight.value
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4D [K,C,kh,kw], got {w.shape}")
    b, c, h, wid = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > wid + 2 * padding:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wid + 2 * padding}"
        )
    recording = _ACTIVE_TAPE is not None
    y, cols = kernels.conv2d_forward(x.data, w.data, stride, padding, want_cols=recording)
    out = Tensor(y)
    if not recording:
        return out
    need_dx = x._requires
    x_shape = x.data.shape

    def bw(g, adj):
        dx, dw = kernels.conv2d_backward(
            g, cols, w.data, x_shape, stride, padding, need_dx, True
        )
        if dx is not None:
            accumulate(adj, x, dx)
        accumulate(adj, w, dw)

    return record(out, (x, w), bw)


def add_channel_bias(x: Tensor, bias: Parameter) -> Tensor:
    """Add a per-channel bias [K] to x [B,K,H,W]."""
    bvec = bias.value
    if x.data.ndim != 4 or bvec.data.ndim != 1 or bvec.shape[0] != x.shape[1]:
        raise ShapeError(f"bias of shape {bvec.shape} does not fit input {x.shape}")
    out = Tensor(x.data + bvec.data[None, :, None, None])

    def bw(g, adj):
        accumulate(adj, x, g)
        accumulate(adj, bvec, g.sum(axis=(0, 2, 3)))

    return record(out, (x, bvec), bw)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bw(g, adj):
        accumulate(adj, x, g * (x.data > 0))

    return record(out, (x,), bw)


def linear(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Affine map of x [B,D] by weight [D,K] plus bias [K]."""
    w, bvec = weight.value, bias.value
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear inner dims disagree: {x.shape} vs {w.shape}")
    if bvec.shape != (w.shape[1],):
        raise ShapeError(f"linear bias {bvec.shape} does not match weight {w.shape}")
    out = Tensor(x.data @ w.data + bvec.data)

    def bw(g, adj):
        if x._requires:
            accumulate(adj, x, g @ w.data.T)
        accumulate(adj, w, x.data.T @ g)
        accumulate(adj, bvec, g.sum(axis=0))

    return record(out, (x, w, bvec), bw)


def strip_pool(x: Tensor, parts: int) -> Tensor:
    """Average x [B,C,H,W] over `parts` horizontal bands -> [B,parts,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"strip_pool input must be 4D, got {x.shape}")
    b, c, h, w = x.shape
    if parts < 1 or h % parts != 0:
        raise ConfigError(f"feature height {h} is not divisible into {parts} parts")
    rows = h // parts
    pooled = x.data.reshape(b, c, parts, rows * w).mean(axis=3)
    out = Tensor(np.ascontiguousarray(pooled.transpose(0, 2, 1)))

    def bw(g, adj):
        dx = np.empty_like(x.data).reshape(b, c, parts, rows, w)
        dx[...] = (g.transpose(0, 2, 1) / (rows * w))[:, :, :, None, None]
        accumulate(adj, x, dx.reshape(b, c, h, w))

    return record(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average x [B,C,H,W] over all spatial positions -> [B,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4D, got {x.shape}")
    b, c, h, w = x.shape
    out = Tensor(x.data.reshape(b, c, h * w).mean(axis=2))

    def bw(g, adj):
        accumulate(adj, x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    return record(out, (x,), bw)


def concat(tensors: list[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    sizes = [t.shape[0] for t in tensors]

    def bw(g, adj):
        off = 0
        for t, n in zip(tensors, sizes):
            accumulate(adj, t, g[off : off + n])
            off += n

    return record(out, tensors, bw)


def take_rows(x: Tensor, idx) -> Tensor:
    """Select rows (axis 0) of x by integer index array."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])

    def bw(g, adj):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        accumulate(adj, x, dx)

    return record(out, (x,), bw)


def take_part(x: Tensor, i: int) -> Tensor:
    """Select slice i along axis 1 of x [B,N,...] -> [B,...]."""
    if not 0 <= i < x.shape[1]:
        raise ShapeError(f"part index {i} out of range for shape {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data[:, i]))

    def bw(g, adj):
        dx = np.zeros_like(x.data)
        dx[:, i] = g
        accumulate(adj, x, dx)

    return record(out, (x,), bw)


def mean_parts(x: Tensor) -> Tensor:
    """Average x [B,N,C] over the part axis -> [B,C]."""
    if x.data.ndim != 3:
        raise ShapeError(f"mean_parts input must be 3D, got {x.shape}")
    n = x.shape[1]
    out = Tensor(x.data.mean(axis=1))

    def bw(g, adj):
        accumulate(adj, x, np.broadcast_to(g[:, None, :] / n, x.data.shape).copy())

    return record(out, (x,), bw)


def group_mean(x: Tensor, groups: list[np.ndarray]) -> Tensor:
    """Row-group means of x: out[g] = x[groups[g]].mean(axis=0).

    Each sample in a group of size m receives 1/m of that group's upstream
    gradient.
    """
    rows = [x.data[np.asarray(g, dtype=np.intp)].mean(axis=0) for g in groups]
    out = Tensor(np.stack(rows, axis=0))
    idxs = [np.asarray(g, dtype=np.intp) for g in groups]

    def bw(g, adj):
        dx = np.zeros_like(x.data)
        for k, idx in enumerate(idxs):
            dx[idx] += g[k] / len(idx)
        accumulate(adj, x, dx)

    return record(out, (x,), bw)


def l2_normalize_rows(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis of x to unit length (smoothed near zero)."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps * eps)
    y = x.data / norms
    out = Tensor(y)

    def bw(g, adj):
        dot = (g * y).sum(axis=-1, keepdims=True)
        accumulate(adj, x, (g - y * dot) / norms)

    return record(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bw(g, adj):
        accumulate(adj, x, g.reshape(x.data.shape))

    return record(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.array([x.data.sum()], dtype=x.dtype))

    def bw(g, adj):
        accumulate(adj, x, np.full_like(x.data, g[0]))

    return record(out, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.array([x.data.mean()], dtype=x.dtype))
    n = x.data.size

    def bw(g, adj):
        accumulate(adj, x, np.full_like(x.data, g[0] / n))

    return record(out, (x,), bw)


def weighted_sum(terms: list[tuple[float, Tensor]]) -> Tensor:
    """Scalar combination sum_i coeff_i * scalar_tensor_i."""
    for _, t in terms:
        if t.data.size != 1:
            raise ShapeError(f"weighted_sum expects scalars, got shape {t.shape}")
    dtype = terms[0][1].dtype if terms else np.float32
    total = np.zeros(1, dtype=dtype)
    for c, t in terms:
        total = total + np.asarray(c, dtype=dtype) * t.data.reshape(1)
    out = Tensor(total)

    def bw(g, adj):
        for c, t in terms:
            accumulate(adj, t, (g * np.asarray(c, dtype=dtype)).reshape(t.data.shape))

    return record(out, [t for _, t in terms], bw)


# ---------------------------------------------------------------------------
# Finite-difference verification


def finite_diff_check(f, p: Parameter, eps: float = 1e-3) -> float:
    """Max entrywise relative error between analytic and central-difference
    gradients of the scalar function ``f(p)``.

    The relative error denominator is max(|analytic|, |numeric|, 1e-6).
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    p.zero_grad()
    with GradTape():
        out = f(p)
    backward(out)
    analytic = p.grad.data.copy()
    flat = p.value.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(p).item()
        flat[i] = orig - eps
        fm = f(p).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(p.value.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# Checkpoint I/O (little-endian binary, float32 payload)


def save_checkpoint(params: Iterable[Parameter], path):
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("parameter names must be unique")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.value.data, dtype="<f4")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if off + name_len > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        size = 4 * n
        if off + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        out[name] = arr.astype(np.float32).copy()
        off += size
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out
