"""Differentiable operations on :class:`~sdnet.tensor.Tensor`.

Image operations accept either ``[C, H, W]`` or batched ``[N, C, H, W]``
inputs; the channel axis is always ``ndim - 3``.  One-dimensional
convolutions accept ``[C, L]`` or ``[N, C, L]``.

Convolutions are stride-1 cross-correlations.  2-D convolutions run one GEMM
per kernel tap over a zero-padded ``[C, N*Hp*Wp]`` buffer, reading shifted
slices instead of materialising an im2col matrix.
"""
from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_branch_local = threading.local()


class branch_log:
    """Collect the discrete decisions (ReLU masks, pooling argmax) of a forward pass.

    The gradient checker uses this to recognise finite-difference probes
    that straddle a kink, where the central difference is meaningless.
    """

    def __enter__(self) -> list:
        self.log: list[bytes] = []
        _branch_local.log = self.log
        return self.log

    def __exit__(self, *exc) -> None:
        _branch_local.log = None


def _note_branch(decision: np.ndarray) -> None:
    log = getattr(_branch_local, "log", None)
    if log is not None:
        log.append(np.packbits(decision.ravel()).tobytes() if decision.dtype == bool
                   else decision.tobytes())


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data + b.data

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return record(out, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data - b.data

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return record(out, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data * b.data

    def backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return record(out, (a, b), "mul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)
    out = np.maximum(x.data, 0)
    return record(out, (x,), "relu", lambda g, needs: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return record(out, (x,), "sigmoid", lambda g, needs: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record(out, (x,), "tanh", lambda g, needs: (g * (1 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return record(out, (x,), "sum", lambda g, needs: (np.full(x.shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return record(out, (x,), "mean", lambda g, needs: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record(out, (x,), "reshape", lambda g, needs: (g.reshape(x.shape),))


# ---------------------------------------------------------------- projections


def affine_pointwise(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Per-pixel affine map ``y[:, i, j] = x[:, i, j] @ W + b``.

    x is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; W is ``[C_in, C_out]``.
    """
    if x.ndim not in (3, 4) or W.ndim != 2 or b.shape != (W.shape[1],) or x.shape[-3] != W.shape[0]:
        raise ShapeError(f"affine_pointwise: x{x.shape} incompatible with W{W.shape}, b{b.shape}")
    # Move channels last, matmul, move back.
    xl = np.moveaxis(x.data, -3, -1)
    out = np.ascontiguousarray(np.moveaxis(xl @ W.data + b.data, -1, -3))

    def backward(g, needs):
        gl = np.moveaxis(g, -3, -1)
        dx = np.ascontiguousarray(np.moveaxis(gl @ W.data.T, -1, -3)) if needs[0] else None
        if needs[1]:
            c_in, c_out = W.shape
            dW = xl.reshape(-1, c_in).T @ gl.reshape(-1, c_out)
        else:
            dW = None
        db = gl.reshape(-1, W.shape[1]).sum(axis=0) if needs[2] else None
        return dx, dW, db

    return record(out, (x, W, b), "affine_pointwise", backward)


# ---------------------------------------------------------------- convolution


def _as_batched(a: np.ndarray, spatial: int) -> tuple[np.ndarray, bool]:
    if a.ndim == spatial + 1:
        return a[None], True
    return a, False


def _to_flat_padded(x: np.ndarray, pad: int) -> tuple[np.ndarray, int, int]:
    """``x[N,C,H,W]`` -> zero-padded ``[C, N*Hp*Wp]`` buffer."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    buf = np.zeros((c, n, hp, wp), dtype=x.dtype)
    buf[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    return buf.reshape(c, n * hp * wp), hp, wp


def _conv2d_flat(xf: np.ndarray, K: np.ndarray, n: int, hp: int, wp: int) -> np.ndarray:
    """Valid correlation on a flat padded buffer, one GEMM per kernel tap.

    Output position ``q`` of the padded grid reads input ``q + i*wp + j``;
    rows and columns past the valid range hold garbage and are cropped.
    """
    o, _, k, _ = K.shape
    total = n * hp * wp
    m = total - (k - 1) * wp - (k - 1)
    taps = np.ascontiguousarray(K.transpose(2, 3, 0, 1))  # BLAS needs contiguous taps
    acc = np.zeros((o, total), dtype=xf.dtype)
    head = acc[:, :m]
    np.matmul(taps[0, 0], xf[:, :m], out=head)
    for i in range(k):
        for j in range(k):
            if i or j:
                off = i * wp + j
                head += taps[i, j] @ xf[:, off:off + m]
    ho, wo = hp - k + 1, wp - k + 1
    out = acc.reshape(o, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 2-D cross-correlation, zero padded for ``padding='same'``."""
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [C_out,C_in,k,k], got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ContractError(f"conv2d: kernel size must be odd, got {k}")
    if x.ndim not in (3, 4) or x.shape[-3] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if padding not in ("same", "valid"):
        raise ContractError(f"conv2d: unknown padding {padding!r}")
    pad = (k - 1) // 2 if padding == "same" else 0
    xb, squeeze = _as_batched(x.data, 2)
    n, _, h, w = xb.shape
    Kd = kernel.data
    xf, hp, wp = _to_flat_padded(xb, pad)
    out = _conv2d_flat(xf, Kd, n, hp, wp)
    if bias is not None:
        out += bias.data[:, None, None]
    if squeeze:
        out = out[0]

    def backward(g, needs):
        gb = g[None] if squeeze else g
        o = Kd.shape[0]
        ho, wo = gb.shape[2:]
        total = n * hp * wp
        m = total - (k - 1) * wp - (k - 1)
        gp = np.zeros((o, n, hp, wp), dtype=gb.dtype)
        gp[:, :, :ho, :wo] = gb.transpose(1, 0, 2, 3)
        gf = gp.reshape(o, total)[:, :m]
        dx = dK = db = None
        if needs[0]:
            taps = np.ascontiguousarray(Kd.transpose(2, 3, 1, 0))
            dxf = np.zeros_like(xf)
            for i in range(k):
                for j in range(k):
                    off = i * wp + j
                    dxf[:, off:off + m] += taps[i, j] @ gf
            dx = dxf.reshape(-1, n, hp, wp)[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)
            dx = np.ascontiguousarray(dx)
            if squeeze:
                dx = dx[0]
        if needs[1]:
            dK = np.empty((k, k) + Kd.shape[:2], dtype=Kd.dtype)
            for i in range(k):
                for j in range(k):
                    off = i * wp + j
                    dK[i, j] = gf @ xf[:, off:off + m].T
            dK = np.ascontiguousarray(dK.transpose(2, 3, 0, 1))
        if bias is not None and needs[2]:
            db = gb.sum(axis=(0, 2, 3))
        return dx, dK, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, parents, "conv2d", backward)


def _conv1d_raw(x: np.ndarray, K: np.ndarray, pad: int) -> tuple[np.ndarray, np.ndarray]:
    n, c, L = x.shape
    o, _, k = K.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    lo = xp.shape[2] - k + 1
    win = sliding_window_view(xp, k, axis=2)  # N,C,L,k
    cols = np.ascontiguousarray(win.transpose(1, 3, 0, 2)).reshape(c * k, n * lo)
    out = (K.reshape(o, -1) @ cols).reshape(o, n, lo).transpose(1, 0, 2)
    return np.ascontiguousarray(out), cols


def conv1d_axis(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 1-D cross-correlation along the last axis of ``[C, L]``/``[N, C, L]``."""
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d_axis: kernel must be [C_out,C_in,k], got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ContractError(f"conv1d_axis: kernel size must be odd, got {k}")
    if x.ndim not in (2, 3) or x.shape[-2] != kernel.shape[1]:
        raise ShapeError(f"conv1d_axis: input {x.shape} does not match kernel {kernel.shape}")
    if padding not in ("same", "valid"):
        raise ContractError(f"conv1d_axis: unknown padding {padding!r}")
    pad = (k - 1) // 2 if padding == "same" else 0
    xb, squeeze = _as_batched(x.data, 1)
    out, cols = _conv1d_raw(xb, kernel.data, pad)
    if bias is not None:
        out += bias.data[:, None]
    if squeeze:
        out = out[0]

    def backward(g, needs):
        gb = g[None] if squeeze else g
        o = kernel.shape[0]
        g2 = np.ascontiguousarray(gb.transpose(1, 0, 2)).reshape(o, -1)
        dx = dK = db = None
        if needs[0]:
            flipped = np.ascontiguousarray(kernel.data[:, :, ::-1].transpose(1, 0, 2))
            dx, _ = _conv1d_raw(gb, flipped, k - 1 - pad)
            if squeeze:
                dx = dx[0]
        if needs[1]:
            dK = (g2 @ cols.T).reshape(kernel.shape)
        if bias is not None and needs[2]:
            db = g2.sum(axis=1)
        return dx, dK, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, parents, "conv1d_axis", backward)


# ---------------------------------------------------------------- resampling


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.  Ties route the gradient to the first max."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {x.shape}")
    lead = x.shape[:-2]
    win = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    _note_branch(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g, needs):
        onehot = (np.arange(4) == idx[..., None]) * g[..., None]
        dx = onehot.reshape(*lead, h // 2, w // 2, 2, 2)
        dx = np.moveaxis(dx, -3, -2).reshape(x.shape)
        return (np.ascontiguousarray(dx, dtype=x.dtype),)

    return record(np.ascontiguousarray(out), (x,), "maxpool2", backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = x.shape[-2:]
    lead = x.shape[:-2]

    def backward(g, needs):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return record(out, (x,), "upsample_nearest2", backward)


def concat_channels(xs) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ContractError("concat_channels: nothing to concatenate")
    ndim = xs[0].ndim
    if ndim not in (3, 4):
        raise ShapeError(f"concat_channels: expected 3-D or 4-D inputs, got {xs[0].shape}")
    axis = ndim - 3
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != ndim or t.shape[:axis] != ref[:axis] or t.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(f"concat_channels: cannot concatenate {ref} with {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g, needs):
        return tuple(
            np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)) if need else None
            for i, need in enumerate(needs)
        )

    return record(out, tuple(xs), "concat_channels", backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    axis = x.ndim - 3
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])

    def backward(g, needs):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return record(out, (x,), "slice_channels", backward)


# ---------------------------------------------------------------- normalisation


class BatchNormState:
    """Running statistics of one batch-norm layer (updated in train mode)."""

    def __init__(self, running_mean: Tensor, running_var: Tensor):
        self.running_mean = running_mean
        self.running_var = running_var


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None,
              mode: str = "train") -> Tensor:
    """Per-channel batch normalisation of ``[N, C, H, W]`` (or ``[C, H, W]``).

    Train mode normalises with biased batch statistics and, when ``state`` is
    given, folds the batch mean and unbiased variance into the running
    statistics with momentum 0.1.  Eval mode uses the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm: unknown mode {mode!r}")
    xb, squeeze = _as_batched(x.data, 2)
    c = xb.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma{gamma.shape}/beta{beta.shape} vs {c} channels")
    axes = (0, 2, 3)
    m = xb.shape[0] * xb.shape[2] * xb.shape[3]
    shape = (1, c, 1, 1)
    if mode == "train":
        mu = xb.mean(axis=axes)
        var = xb.var(axis=axes)
        if state is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            state.running_mean.data = ((1 - BN_MOMENTUM) * state.running_mean.data
                                       + BN_MOMENTUM * mu).astype(state.running_mean.dtype)
            state.running_var.data = ((1 - BN_MOMENTUM) * state.running_var.data
                                      + BN_MOMENTUM * unbiased).astype(state.running_var.dtype)
    else:
        if state is None:
            raise ContractError("batchnorm: eval mode needs running statistics")
        mu = state.running_mean.data.astype(xb.dtype)
        var = state.running_var.data.astype(xb.dtype)
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(xb.dtype)
    xhat = (xb - mu.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    if squeeze:
        out = out[0]

    def backward(g, needs):
        gb = g[None] if squeeze else g
        dx = None
        if needs[0]:
            dxhat = gb * gamma.data.reshape(shape)
            if mode == "train":
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = inv_std.reshape(shape) / m * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std.reshape(shape)
            if squeeze:
                dx = dx[0]
        dgamma = (gb * xhat).sum(axis=axes) if needs[1] else None
        dbeta = gb.sum(axis=axes) if needs[2] else None
        return dx, dgamma, dbeta

    return record(np.ascontiguousarray(out), (x, gamma, beta), "batchnorm", backward)
