"""Dense float64 tensors with taped reverse-mode differentiation.

Every operation is pure: operand arrays are never mutated, and each op
allocates a fresh output. Passing a live ``Tape`` records the op so that
``backward`` can later produce exact gradients for the watched input and
any watched parameters. A tape belongs to exactly one forward pass and is
consumed by its backward pass; tensors themselves are immutable and safe
to share across workers.
"""

from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PADDING_MODES = ("zero", "reflect", "circular")


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ConfigError(ValueError):
    """A structural parameter (kernel scale, axis, padding) is invalid."""


class DomainError(ValueError):
    """A value lies outside the domain an operation requires."""


class UsageError(RuntimeError):
    """The call sequence violates the tape or oracle protocol."""


def _as_f64(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64, order="C")


class Tensor:
    """Immutable n-d array of float64 values in row-major order."""

    __slots__ = ("data", "tape")

    def __init__(self, values, tape=None):
        self.data = _as_f64(values)
        self.data.flags.writeable = False
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def tolist(self):
        return self.data.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class GradientBundle:
    """Gradients produced by one backward pass.

    ``input_grad`` matches the watched input's shape (or is None when the
    input was not requested); ``param_grads`` maps each requested parameter
    identifier to a gradient tensor of that parameter's shape.
    """

    __slots__ = ("input_grad", "param_grads")

    def __init__(self, input_grad, param_grads):
        self.input_grad = input_grad
        self.param_grads = param_grads


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of one forward pass.

    Ops executed with this tape append nodes in execution order; watched
    leaves identify what ``backward`` must report. One backward pass
    consumes the tape; recording onto or differentiating a consumed tape
    is a usage error.
    """

    def __init__(self):
        self.nodes = []
        self.watched_input = None
        self.watched_params = {}
        self.consumed = False

    def watch_input(self, t: Tensor):
        self.watched_input = t

    def watch_param(self, name: str, t: Tensor):
        self.watched_params[name] = t

    def _record(self, inputs, out_data, backward_fn):
        if self.consumed:
            raise UsageError("tape already consumed by a backward pass")
        if not np.isfinite(np.sum(out_data)):
            raise DomainError("operation produced non-finite values")
        out = Tensor(out_data, tape=self)
        self.nodes.append(_Node(inputs, out, backward_fn))
        return out


def _emit(tape, inputs, out_data, backward_fn):
    if tape is None:
        if not np.isfinite(np.sum(out_data)):
            raise DomainError("operation produced non-finite values")
        return Tensor(out_data)
    return tape._record(inputs, out_data, backward_fn)


def backward(loss: Tensor, wanted=(), include_input=True) -> GradientBundle:
    """Reverse-mode gradients of a recorded scalar loss.

    ``wanted`` names parameters previously registered via
    ``Tape.watch_param``; ``include_input`` additionally requests the
    gradient for the tensor registered via ``Tape.watch_input``. The
    tape is consumed.
    """
    tape = loss.tape
    if tape is None:
        raise UsageError("loss was not recorded on a tape")
    if tape.consumed:
        raise UsageError("tape already consumed by a backward pass")
    if loss.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.shape}")
    for name in wanted:
        if name not in tape.watched_params:
            raise UsageError(f"parameter {name!r} was not watched on this tape")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    stop = None
    for i, node in enumerate(tape.nodes):
        if node.output is loss:
            stop = i
    if stop is None:
        raise UsageError("loss does not belong to this tape")
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for parent, pg in zip(node.inputs, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    def _collect(t):
        g = grads.get(id(t))
        return Tensor(np.zeros(t.shape) if g is None else g)

    input_grad = None
    if include_input:
        if tape.watched_input is None:
            raise UsageError("no input was watched on this tape")
        input_grad = _collect(tape.watched_input)
    param_grads = {name: _collect(tape.watched_params[name]) for name in wanted}
    return GradientBundle(input_grad, param_grads)


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor, tape=None) -> Tensor:
    out = a.data + b.data
    return _emit(tape, (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor, tape=None) -> Tensor:
    out = a.data - b.data
    return _emit(tape, (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor, tape=None) -> Tensor:
    out = a.data * b.data
    return _emit(tape, (a, b), out,
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor, tape=None) -> Tensor:
    out = a.data / b.data
    return _emit(tape, (a, b), out,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor, tape=None) -> Tensor:
    return _emit(tape, (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor, tape=None) -> Tensor:
    out = np.exp(a.data)
    return _emit(tape, (a,), out, lambda g: (g * out,))


def absolute(a: Tensor, tape=None) -> Tensor:
    return _emit(tape, (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor, tape=None) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _emit(tape, (a,), out, lambda g: (g * (a.data > 0.0),))


def reshape(a: Tensor, shape, tape=None) -> Tensor:
    out = a.data.reshape(shape)
    return _emit(tape, (a,), out, lambda g: (g.reshape(a.shape),))


def select(a: Tensor, index: int, axis: int = 0, tape=None) -> Tensor:
    """Slice one index out of ``axis``; the axis is removed."""
    out = np.take(a.data, index, axis=axis)

    def bwd(g):
        full = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _emit(tape, (a,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(over, ndim):
    if over is None:
        axes = tuple(range(ndim))
    elif isinstance(over, int):
        axes = (over,)
    else:
        axes = tuple(over)
    fixed = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ConfigError(f"axis {ax} out of range for {ndim}-d tensor")
        fixed.append(ax % ndim)
    if len(set(fixed)) != len(fixed):
        raise ConfigError(f"duplicate axes in {over!r}")
    return tuple(sorted(fixed))


def _check_nonempty(a, axes):
    if any(a.shape[ax] == 0 for ax in axes):
        raise ConfigError(f"empty reduction over axes {axes} of shape {a.shape}")


def reduce_sum(a: Tensor, over=None, tape=None) -> Tensor:
    axes = _norm_axes(over, a.ndim)
    _check_nonempty(a, axes)
    out = a.data.sum(axis=axes)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _emit(tape, (a,), out, bwd)


def reduce_mean(a: Tensor, over=None, tape=None) -> Tensor:
    axes = _norm_axes(over, a.ndim)
    _check_nonempty(a, axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / n,)

    return _emit(tape, (a,), out, bwd)


def reduce_max(a: Tensor, over=None, tape=None) -> Tensor:
    """Max over ``over``; backward routes each slice's gradient entirely to
    its first maximal element in row-major order, so repeated backward
    passes on identical inputs are bitwise identical."""
    axes = _norm_axes(over, a.ndim)
    _check_nonempty(a, axes)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    moved = np.transpose(a.data, kept + axes)
    kept_shape = moved.shape[: len(kept)]
    flat = moved.reshape(kept_shape + (-1,))
    arg = np.argmax(flat, axis=-1)
    out = np.max(flat, axis=-1)

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], np.asarray(g)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        inv = np.argsort(kept + axes)
        return (np.transpose(gmoved, inv),)

    return _emit(tape, (a,), out, bwd)


# ---------------------------------------------------------------------------
# network primitives


def dense_forward(x: Tensor, w: Tensor, b: Tensor, tape=None) -> Tensor:
    """Affine map: out[r, c] = sum_k x[r, k] * w[k, c] + b[c]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"dense shapes do not conform: x{x.shape} @ w{w.shape} + b{b.shape}")
    out = x.data @ w.data + b.data

    def bwd(g):
        return (g @ w.data.T, x.data.T @ g, g.sum(axis=0))

    return _emit(tape, (x, w, b), out, bwd)


def _pad_maps(size, pad, mode):
    """Per-axis map from padded index to source index (zero pad -> -1)."""
    idx = np.arange(-pad, size + pad)
    if mode == "circular":
        return idx % size
    if mode == "reflect":
        out = idx.copy()
        out[idx < 0] = -idx[idx < 0]
        out[idx >= size] = 2 * size - 2 - idx[idx >= size]
        return out
    out = idx.copy()
    out[(idx < 0) | (idx >= size)] = -1
    return out


def _pad2d(x, pad, mode):
    if mode == "zero":
        return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    np_mode = "wrap" if mode == "circular" else "reflect"
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode=np_mode)


@functools.lru_cache(maxsize=256)
def _fold_index(size, pad, mode):
    m = _pad_maps(size, pad, mode)
    return m, m >= 0


def _fold2d(dxp, H, W, pad, mode):
    """Adjoint of _pad2d: accumulate padded-border gradients back."""
    if mode == "zero":
        return dxp[:, pad : pad + H, pad : pad + W].copy()
    my, _ = _fold_index(H, pad, mode)
    mx, _ = _fold_index(W, pad, mode)
    C = dxp.shape[0]
    flat = (my[:, None] * W + mx[None, :]).ravel()
    dx = np.zeros((C, H * W))
    np.add.at(dx, (np.arange(C)[:, None], flat[None, :]), dxp.reshape(C, -1))
    return dx.reshape(C, H, W)


def _check_conv_args(N, H, W, padding):
    if padding not in PADDING_MODES:
        raise ConfigError(f"unknown padding mode {padding!r}; expected one of {PADDING_MODES}")
    if N % 2 == 0:
        raise ConfigError(f"kernel scale must be odd, got {N}")
    if padding == "reflect" and N > min(H, W):
        raise ConfigError(
            f"reflect padding requires kernel scale <= min(H, W); got {N} > {min(H, W)}")


def _im2col(xp, N, H, W):
    """Contiguous patch matrix [C, N*N, H*W] from a padded [C, ., .] image."""
    win = sliding_window_view(xp, (N, N), axis=(1, 2))  # [C, H, W, N, N]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(
        xp.shape[0], N * N, H * W)


def _col2im(dcols, N, H, W):
    """Adjoint of _im2col: scatter patch gradients back onto the padded image."""
    C = dcols.shape[0]
    pad = N // 2
    d = dcols.reshape(C, N, N, H, W)
    dxp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    for u in range(N):
        for v in range(N):
            dxp[:, u : u + H, v : v + W] += d[:, u, v]
    return dxp


def conv2d_forward(x: Tensor, k: Tensor, padding: str = "reflect", tape=None) -> Tensor:
    """Same-size 2-d cross-correlation (no kernel flip) with border handling.

    x: [C_in, H, W], k: [C_out, C_in, N, N] with N odd.
    """
    if x.ndim != 3 or k.ndim != 4 or k.shape[1] != x.shape[0] or k.shape[2] != k.shape[3]:
        raise ShapeError(f"conv shapes do not conform: x{x.shape}, k{k.shape}")
    Ci, H, W = x.shape
    Co, _, N, _ = k.shape
    _check_conv_args(N, H, W, padding)
    pad = N // 2
    cols = _im2col(_pad2d(x.data, pad, padding), N, H, W).reshape(Ci * N * N, H * W)
    wf = k.data.reshape(Co, Ci * N * N)
    out = (wf @ cols).reshape(Co, H, W)

    def bwd(g):
        g2 = g.reshape(Co, H * W)
        dk = (g2 @ cols.T).reshape(k.shape)
        dcols = (wf.T @ g2).reshape(Ci, N * N, H * W)
        dxp = _col2im(dcols, N, H, W)
        return (_fold2d(dxp, H, W, pad, padding), dk)

    return _emit(tape, (x, k), out, bwd)


def depthwise_conv2d(x: Tensor, k: Tensor, padding: str = "reflect", tape=None) -> Tensor:
    """Per-channel same-size cross-correlation: x[C, H, W] with k[C, N, N]."""
    if x.ndim != 3 or k.ndim != 3 or k.shape[0] != x.shape[0] or k.shape[1] != k.shape[2]:
        raise ShapeError(f"depthwise conv shapes do not conform: x{x.shape}, k{k.shape}")
    C, H, W = x.shape
    N = k.shape[1]
    _check_conv_args(N, H, W, padding)
    pad = N // 2
    cols = _im2col(_pad2d(x.data, pad, padding), N, H, W)  # [C, K, HW]
    wf = k.data.reshape(C, 1, N * N)
    out = (wf @ cols).reshape(C, H, W)

    def bwd(g):
        g2 = g.reshape(C, 1, H * W)
        dk = (g2 @ cols.transpose(0, 2, 1)).reshape(k.shape)
        dcols = wf.transpose(0, 2, 1) @ g2  # [C, K, HW]
        dxp = _col2im(dcols, N, H, W)
        return (_fold2d(dxp, H, W, pad, padding), dk)

    return _emit(tape, (x, k), out, bwd)


def conv1d(x: Tensor, k: Tensor, padding: str = "circular", tape=None) -> Tensor:
    """Same-size 1-d cross-correlation of x[L] with k[N]."""
    if x.ndim != 1 or k.ndim != 1:
        raise ShapeError(f"1-d conv shapes do not conform: x{x.shape}, k{k.shape}")
    L = x.shape[0]
    N = k.shape[0]
    _check_conv_args(N, L, L, padding)
    pad = N // 2
    if padding == "zero":
        xp = np.pad(x.data, pad)
    else:
        xp = np.pad(x.data, pad, mode="wrap" if padding == "circular" else "reflect")
    win = sliding_window_view(xp, N)  # [L, N]
    out = win @ k.data

    def bwd(g):
        dk = g @ win
        gp = np.pad(g, N - 1)
        gwin = sliding_window_view(gp, N)
        dxp = gwin @ k.data[::-1]
        if padding == "zero":
            dx = dxp[pad : pad + L].copy()
        else:
            m, _ = _fold_index(L, pad, padding)
            dx = np.zeros(L)
            np.add.at(dx, m, dxp)
        return (dx, dk)

    return _emit(tape, (x, k), out, bwd)


def softmax_cross_entropy(logits: Tensor, labels, tape=None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], log-sum-exp
    stabilized."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, K], got {logits.shape}")
    B, K = logits.shape
    labels = list(labels)
    if len(labels) != B:
        raise ShapeError(f"{len(labels)} labels for batch of {B}")
    for lab in labels:
        if not 0 <= lab < K:
            raise IndexError(f"label {lab} out of range for {K} classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(B)
    out = np.mean(lse - z[rows, labels])
    probs = np.exp(z - lse[:, None])

    def bwd(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (g * d / B,)

    return _emit(tape, (logits,), out, bwd)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain (untaped) stabilized softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f, x: Tensor, step: float) -> float:
    """Worst relative deviation between the analytic input gradient of the
    scalar function ``f`` and central finite differences at ``x``.

    The relative deviation of a pair (a, b) is |a - b| / max(|a|, |b|, 1e-8).
    """
    if step <= 0:
        raise UsageError(f"step must be positive, got {step}")
    tape = Tape()
    xt = Tensor(x.data)
    tape.watch_input(xt)
    loss = f(xt, tape)
    if loss.size != 1:
        raise UsageError(f"f must return a scalar, got shape {loss.shape}")
    analytic = backward(loss, include_input=True).input_grad.data

    flat = x.data.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sgn in (+1.0, -1.0):
            bumped = flat.copy()
            bumped[i] += sgn * step
            val = f(Tensor(bumped.reshape(x.shape)), None)
            numeric[i] += sgn * float(val.data)
    numeric /= 2.0 * step
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
