"""Numpy layer primitives with explicit forward/backward passes.

Arrays are plain ``numpy.ndarray`` objects. Spatial ops accept either a single
``C x H x W`` image or a batch ``B x C x H x W``; the single case is handled by
adding and removing a leading batch axis.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.lib.stride_tricks import as_strided

_DTYPES = {"float32": np.float32, "float64": np.float64}
_precision = {"dtype": np.float32}

# Incremented by every backward routine and every optimizer parameter write.
# The tracker's inference path is checked against these.
COUNTERS = {"backward": 0, "param_writes": 0}


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where a finite value is required."""


def reset_counters():
    for k in COUNTERS:
        COUNTERS[k] = 0


def get_dtype():
    return _precision["dtype"]


def set_precision(name):
    """Select the global float width: ``"float32"`` (default) or ``"float64"``."""
    try:
        _precision["dtype"] = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


@contextlib.contextmanager
def precision(name):
    old = _precision["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _precision["dtype"] = old


def check_finite(x, what="array"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected C x H x W or B x C x H x W input, got shape {x.shape}")


def conv_output_side(n, kernel, stride):
    return (n - kernel) // stride + 1


def _im2col(x, kernel, stride):
    """Patch matrix of a channel-major ``C x B x H x W`` array.

    Shape ``(C * k * k, B * H' * W')``; rows vary fastest along output columns,
    which keeps the copy out of the strided view mostly contiguous.
    """
    c, b, h, w = x.shape
    ho = conv_output_side(h, kernel, stride)
    wo = conv_output_side(w, kernel, stride)
    sc, sb, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(c, kernel, kernel, b, ho, wo),
        strides=(sc, sh, sw, sb, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * kernel * kernel, b * ho * wo)


def _check_conv(shape_cbhw, weight, stride):
    k, c, s, s2 = weight.shape
    if s != s2:
        raise ValueError("filters must be square")
    if shape_cbhw[0] != c:
        raise ValueError(f"input has {shape_cbhw[0]} channels, filters expect {c}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if s > shape_cbhw[2] or s > shape_cbhw[3]:
        raise ValueError(f"kernel {s} larger than input {shape_cbhw[2:]}")


def conv2d_cbhw(x, weight, bias=None, stride=1, keep_cols=False):
    """:func:`conv2d` on channel-major ``C x B x H x W`` data, output ``K x B x H' x W'``.

    With ``keep_cols`` the patch matrix is returned too, for reuse in backward.
    """
    _check_conv(x.shape, weight, stride)
    k, _, s, _ = weight.shape
    b = x.shape[1]
    ho = conv_output_side(x.shape[2], s, stride)
    wo = conv_output_side(x.shape[3], s, stride)
    cols = _im2col(x, s, stride)
    out = weight.reshape(k, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(k, b, ho, wo)
    return (out, cols) if keep_cols else out


def conv2d_backward_cbhw(x_shape, cols, weight, grad_out, stride=1, need_input_grad=True):
    COUNTERS["backward"] += 1
    k, c, s, _ = weight.shape
    _, b, h, w = x_shape
    ho = conv_output_side(h, s, stride)
    wo = conv_output_side(w, s, stride)
    if grad_out.shape != (k, b, ho, wo):
        raise ValueError(f"upstream gradient shape {grad_out.shape} != forward output shape {(k, b, ho, wo)}")
    g2 = grad_out.reshape(k, -1)
    grad_w = (g2 @ cols.T).reshape(weight.shape)
    grad_b = g2.sum(axis=1)
    grad_x = None
    if need_input_grad:
        dcols = (weight.reshape(k, -1).T @ g2).reshape(c, s, s, b, ho, wo)
        grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
        hspan = (ho - 1) * stride + 1
        wspan = (wo - 1) * stride + 1
        for i in range(s):
            for j in range(s):
                grad_x[:, :, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, i, j]
    return grad_x, grad_w, grad_b


def conv2d(x, weight, bias=None, stride=1):
    """Valid cross-correlation of ``x`` with ``weight`` (K x C x s x s) plus a per-filter bias."""
    xb, squeeze = _batched(np.asarray(x))
    out = conv2d_cbhw(np.ascontiguousarray(xb.transpose(1, 0, 2, 3)), weight, bias, stride)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out[0] if squeeze else out


def conv2d_backward(x, weight, grad_out, stride=1, need_input_grad=True):
    """Gradients of :func:`conv2d` w.r.t. input, filters and bias.

    ``grad_input`` is ``None`` when ``need_input_grad`` is false (first layer).
    """
    xb, squeeze = _batched(np.asarray(x))
    gb, _ = _batched(np.asarray(grad_out))
    xc = np.ascontiguousarray(xb.transpose(1, 0, 2, 3))
    _check_conv(xc.shape, weight, stride)
    cols = _im2col(xc, weight.shape[2], stride)
    gx, gw, gbias = conv2d_backward_cbhw(xc.shape, cols, weight,
                                         np.ascontiguousarray(gb.transpose(1, 0, 2, 3)),
                                         stride, need_input_grad)
    if gx is not None:
        gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        if squeeze:
            gx = gx[0]
    return gx, gw, gbias


@numba.njit(cache=True)
def _pool_kernel(x, p):
    n, h, w = x.shape
    ho = (h + p - 1) // p
    wo = (w + p - 1) // p
    out = np.empty((n, ho, wo), x.dtype)
    idx = np.empty((n, ho, wo), np.int32)
    for c in range(n):
        for i in range(ho):
            for j in range(wo):
                best = x[c, i * p, j * p]
                k = 0
                for di in range(p):
                    r = i * p + di
                    if r >= h:
                        break
                    for dj in range(p):
                        q = j * p + dj
                        if q >= w:
                            break
                        v = x[c, r, q]
                        if v > best:
                            best = v
                            k = di * p + dj
                out[c, i, j] = best
                idx[c, i, j] = k
    return out, idx


@numba.njit(cache=True)
def _unpool_kernel(g, idx, p, h, w):
    n, ho, wo = g.shape
    full = np.zeros((n, h, w), g.dtype)
    for c in range(n):
        for i in range(ho):
            for j in range(wo):
                k = idx[c, i, j]
                full[c, i * p + k // p, j * p + k % p] = g[c, i, j]
    return full


def max_pool(x, p):
    """Non-overlapping ``p x p`` max pooling over the last two axes.

    Partial blocks at the bottom/right edge are pooled over their valid cells
    only, which is the same as padding with ``-inf``. Returns ``(out, argmax)``
    where ``argmax`` is the row-major in-block index of each winner (the first
    one on ties).
    """
    if p < 1:
        raise ValueError("pool factor must be >= 1")
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError("max_pool needs at least two spatial axes")
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    out, idx = _pool_kernel(np.ascontiguousarray(x).reshape(-1, h, w), p)
    return out.reshape(lead + out.shape[1:]), idx.reshape(lead + idx.shape[1:])


def max_pool_backward(grad_out, argmax, p, input_shape):
    """Route ``grad_out`` back to the winning cell of each pooling block."""
    COUNTERS["backward"] += 1
    g = np.ascontiguousarray(grad_out)
    h, w = input_shape[-2:]
    ho, wo = g.shape[-2:]
    if argmax.shape != g.shape:
        raise ValueError("argmax and upstream gradient shapes differ")
    full = _unpool_kernel(g.reshape(-1, ho, wo), np.ascontiguousarray(argmax).reshape(-1, ho, wo), p, h, w)
    return full.reshape(g.shape[:-2] + (h, w))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    COUNTERS["backward"] += 1
    return grad_out * (x > 0)


def fully_connected(x, weight, bias):
    """``weight @ x + bias`` for a vector ``x`` (n,) or a batch (B, n)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != weight columns {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    return x @ weight.T + bias


def fully_connected_backward(x, weight, grad_out):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    COUNTERS["backward"] += 1
    if grad_out.shape[-1] != weight.shape[0]:
        raise ValueError("upstream gradient width does not match layer output")
    grad_x = grad_out @ weight
    if x.ndim == 1:
        grad_w = np.outer(grad_out, x)
        grad_b = grad_out.copy()
    else:
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params, **hyper):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update.

    Pure: returns ``(new_params, new_state)`` and leaves the inputs untouched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if set(params) != set(grads):
        raise ValueError("params and grads have different keys")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        check_finite(g, f"gradient {name!r}")
    if not state.m:
        state = AdamState.like(params, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        step = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
        new_params[name] = p - step
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    COUNTERS["param_writes"] += 1
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


def finite_difference_check(f, x, analytic_grad, h=1e-5, coords=None):
    """Max relative error between ``analytic_grad`` and central differences of ``f`` at ``x``.

    ``coords`` optionally restricts the check to a list of flat indices.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective is non-finite near coordinate {i}")
        numeric = (fp - fm) / (2 * h)
        err = abs(numeric - analytic[i]) / (abs(analytic[i]) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
