"""Convolution hot loops: numba-compiled kernels with a pure-numpy fallback.

The backend is picked at import time from the ``SEPG_BACKEND`` environment
variable ("numba", "numpy" or "auto"; default auto = numba when importable)
and can be changed at runtime with :func:`set_backend`.
``benchmarks/bench_kernels.py`` times the two paths against each other.

Both backends are deterministic for a fixed input, and both accumulate each
output element over its own receptive field only, so per-sample results do
not depend on the batch they are embedded in (concatenating two batches and
running them together gives bitwise the same features as running them
separately on the same backend).
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_VALID_BACKENDS = ("numba", "numpy")

# reassoc is required for SIMD reductions in the matmul; nan/inf semantics
# are kept (no 'nnan'/'ninf' flags).
_FASTMATH = {"reassoc", "nsz", "contract"}


def _backend_from_env():
    choice = os.environ.get("SEPG_BACKEND", "auto").lower()
    if choice == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    if choice not in _VALID_BACKENDS:
        raise ValueError(f"SEPG_BACKEND={choice!r}; expected one of auto, numba, numpy")
    if choice == "numba" and not HAS_NUMBA:
        raise RuntimeError("SEPG_BACKEND=numba but numba is not importable")
    return choice


_BACKEND = _backend_from_env()


def get_backend():
    return _BACKEND


def set_backend(name):
    """Switch the conv backend at runtime (used by tests and benchmarks)."""
    global _BACKEND
    if name not in _VALID_BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _BACKEND = name


if HAS_NUMBA:

    @njit(cache=True)
    def _nb_im2col(xp, stride, kh, kw, ho, wo, cols):
        b_total, c_total = xp.shape[0], xp.shape[1]
        for b in range(b_total):
            for oh in range(ho):
                for ow in range(wo):
                    m = (b * ho + oh) * wo + ow
                    d = 0
                    for c in range(c_total):
                        for i in range(kh):
                            ih = oh * stride + i
                            iw0 = ow * stride
                            for j in range(kw):
                                cols[m, d] = xp[b, c, ih, iw0 + j]
                                d += 1

    @njit(cache=True, fastmath=_FASTMATH)
    def _nb_matmul_nt(a, b, out):
        # out[m, k] = sum_d a[m, d] * b[k, d]; out is pre-zeroed
        m_total, d_total = a.shape
        k_total = b.shape[0]
        for m in range(m_total):
            for k in range(k_total):
                acc = out[m, k]
                for d in range(d_total):
                    acc += a[m, d] * b[k, d]
                out[m, k] = acc

    @njit(cache=True)
    def _nb_gemm_tn(a, b, out):
        # out[k, d] += sum_m a[m, k] * b[m, d]; contiguous axpy inner loop
        m_total, k_total = a.shape
        d_total = b.shape[1]
        for m in range(m_total):
            for k in range(k_total):
                s = a[m, k]
                for d in range(d_total):
                    out[k, d] += s * b[m, d]

    @njit(cache=True)
    def _nb_gemm_nn(a, b, out):
        # out[m, d] += sum_k a[m, k] * b[k, d]
        m_total, k_total = a.shape
        d_total = b.shape[1]
        for m in range(m_total):
            for k in range(k_total):
                s = a[m, k]
                for d in range(d_total):
                    out[m, d] += s * b[k, d]

    @njit(cache=True)
    def _nb_col2im(dcols, stride, kh, kw, ho, wo, dxp):
        b_total, c_total = dxp.shape[0], dxp.shape[1]
        for b in range(b_total):
            for oh in range(ho):
                for ow in range(wo):
                    m = (b * ho + oh) * wo + ow
                    d = 0
                    for c in range(c_total):
                        for i in range(kh):
                            ih = oh * stride + i
                            iw0 = ow * stride
                            for j in range(kw):
                                dxp[b, c, ih, iw0 + j] += dcols[m, d]
                                d += 1


def _pad_input(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _out_hw(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _im2col_np(xp, stride, kh, kw, ho, wo):
    # window order along the last axis is (c, i, j), matching the numba path
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    b = xp.shape[0]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, -1)
    return np.ascontiguousarray(cols)


def conv2d_forward(x, w, stride, padding, want_cols=False):
    """2D cross-correlation of x [B,C,H,W] with w [K,C,kh,kw].

    Returns (y, cols) where cols is the im2col matrix when want_cols is
    true (reused by the backward pass) and None otherwise.
    """
    b, c, h, width = x.shape
    k, _, kh, kw = w.shape
    ho, wo = _out_hw(h, width, kh, kw, stride, padding)
    xp = _pad_input(x, padding)
    wf = np.ascontiguousarray(w.reshape(k, c * kh * kw))
    if _BACKEND == "numba":
        cols = np.empty((b * ho * wo, c * kh * kw), dtype=x.dtype)
        _nb_im2col(xp, stride, kh, kw, ho, wo, cols)
        y2d = np.zeros((b * ho * wo, k), dtype=x.dtype)
        _nb_matmul_nt(cols, wf, y2d)
    else:
        cols = _im2col_np(xp, stride, kh, kw, ho, wo)
        y2d = cols @ wf.T
    y = np.ascontiguousarray(y2d.reshape(b, ho, wo, k).transpose(0, 3, 1, 2))
    return y, (cols if want_cols else None)


def conv2d_backward(dy, cols, w, x_shape, stride, padding, need_dx, need_dw):
    """Gradients of conv2d_forward w.r.t. input and weights.

    dy is [B,K,Ho,Wo]; cols is the im2col matrix saved by the forward
    pass.  Returns (dx, dw), either of which may be None when not needed.
    """
    b, c, h, width = x_shape
    k, _, kh, kw = w.shape
    _, _, ho, wo = dy.shape
    wf = np.ascontiguousarray(w.reshape(k, c * kh * kw))
    dy2d = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(b * ho * wo, k)
    dw = None
    if need_dw:
        if _BACKEND == "numba":
            dwf = np.zeros((k, c * kh * kw), dtype=dy.dtype)
            _nb_gemm_tn(dy2d, cols, dwf)
        else:
            dwf = dy2d.T @ cols
        dw = dwf.reshape(k, c, kh, kw)
    dx = None
    if need_dx:
        hp, wp = h + 2 * padding, width + 2 * padding
        dxp = np.zeros((b, c, hp, wp), dtype=dy.dtype)
        if _BACKEND == "numba":
            dcols = np.zeros((b * ho * wo, c * kh * kw), dtype=dy.dtype)
            _nb_gemm_nn(dy2d, wf, dcols)
            _nb_col2im(dcols, stride, kh, kw, ho, wo, dxp)
        else:
            dcols = dy2d @ wf
            dcr = dcols.reshape(b, ho, wo, c, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcr[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
        if padding:
            dx = np.ascontiguousarray(dxp[:, :, padding:-padding, padding:-padding])
        else:
            dx = dxp
    return dx, dw


def warm_up(dtype=np.float32):
    """Trigger JIT compilation of the numba kernels for a dtype."""
    if _BACKEND != "numba":
        return
    x = np.zeros((1, 2, 5, 5), dtype=dtype)
    w = np.zeros((3, 2, 3, 3), dtype=dtype)
    y, cols = conv2d_forward(x, w, 2, 1, want_cols=True)
    conv2d_backward(y, cols, w, x.shape, 2, 1, True, True)
