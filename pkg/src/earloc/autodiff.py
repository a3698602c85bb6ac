"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for gradient
checks) and record the operation DAG as they are combined; ``backward``
replays it in reverse topological order. Gradients accumulate into leaf
tensors only, so calling backward twice without zeroing yields exactly
twice the gradient.

Convolution runs an im2col/GEMM fast path sample by sample, which keeps
forward results identical whether an image is run alone or inside a batch.
``conv2d_direct`` is an independent loop-based reference for tests.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericsError(RuntimeError):
    """Raised when training numerics break down (non-finite values)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Interior gradients live in a transient map keyed by node identity;
        only leaves (tensors with no recorded parents) that require grad
        receive persistent, accumulating ``.grad`` arrays.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g, grads)
            elif node.requires_grad:
                self_grad = node.grad
                node.grad = g.copy() if self_grad is None else self_grad + g


def _acc(grads: dict, t: Tensor, g: np.ndarray):
    if not (t.requires_grad or t._backward is not None):
        return
    k = id(t)
    if k in grads:
        grads[k] = grads[k] + g
    else:
        grads[k] = g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad or p._backward is not None for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# convolution


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_out_shape(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkk weights plus per-filter bias."""
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"channel mismatch: input {c}, weight {cw}")
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"unsupported kernel {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    ho, wo = _conv_out_shape(h, wd, kh, stride, padding)
    w2 = w.data.reshape(f, c * kh * kw)
    xp = _padded(x.data, padding)
    out = np.empty((n, f, ho, wo), dtype=x.data.dtype)
    for i in range(n):
        win = sliding_window_view(xp[i], (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
        out[i] = (w2 @ cols).reshape(f, ho, wo)
    out += b.data[None, :, None, None]

    def backward(g, grads):
        if b.requires_grad or b._backward is not None:
            _acc(grads, b, g.sum(axis=(0, 2, 3)))
        xpad = _padded(x.data, padding)
        need_x = x.requires_grad or x._backward is not None
        need_w = w.requires_grad or w._backward is not None
        dw = np.zeros_like(w.data) if need_w else None
        dxp = np.zeros_like(xpad) if need_x else None
        for dy in range(kh):
            for dx in range(kw):
                sly = slice(dy, dy + stride * ho, stride)
                slx = slice(dx, dx + stride * wo, stride)
                xs = xpad[:, :, sly, slx]
                if need_w:
                    dw[:, :, dy, dx] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                if need_x:
                    t = np.tensordot(w.data[:, :, dy, dx], g, axes=(0, 1))
                    dxp[:, :, sly, slx] += t.transpose(1, 0, 2, 3)
        if need_w:
            _acc(grads, w, dw)
        if need_x:
            _acc(grads, x, dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp)

    return _make(out, (x, w, b), backward)


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Loop-based reference convolution (no autodiff); small shapes only."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = _conv_out_shape(h, wd, kh, stride, padding)
    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                yy = i * stride + u - padding
                                xx = j * stride + v - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[ni, ci, yy, xx] * w[fi, ci, u, v]
                    out[ni, fi, i, j] = acc + b[fi]
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first argmax."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g, grads):
        gz = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gz, idx[..., None], g[..., None], axis=-1)
        dx = gz.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _acc(grads, x, dx)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g, grads):
        _acc(grads, x, g * (x.data > 0))

    return _make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g, grads):
        _acc(grads, x, g * out * (1.0 - out))

    return _make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g, grads):
        _acc(grads, x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    out = x.data + y.data

    def backward(g, grads):
        _acc(grads, x, g)
        _acc(grads, y, g)

    return _make(out, (x, y), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c

    def backward(g, grads):
        _acc(grads, x, g * c)

    return _make(out, (x,), backward)


def concat_channels(xs: list[Tensor]) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=1)
    sizes = [t.shape[1] for t in xs]

    def backward(g, grads):
        at = 0
        for t, s in zip(xs, sizes):
            _acc(grads, t, g[:, at : at + s])
            at += s

    return _make(out, tuple(xs), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of (N, D) by (M, D) weights and (M,) bias."""
    out = x.data @ w.data.T + b.data

    def backward(g, grads):
        _acc(grads, x, g @ w.data)
        _acc(grads, w, g.T @ x.data)
        _acc(grads, b, g.sum(axis=0))

    return _make(out, (x, w, b), backward)


def _lerp_matrix(size: int, dtype) -> np.ndarray:
    # rows gather clamped half-pixel-centered samples at 2x density
    m = np.zeros((2 * size, size), dtype=dtype)
    src = np.clip((np.arange(2 * size) + 0.5) / 2.0 - 0.5, 0, size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = (src - i0).astype(dtype)
    rows = np.arange(2 * size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Doubles height and width by clamped bilinear interpolation."""
    n, c, h, w = x.shape
    mr = _lerp_matrix(h, x.data.dtype)
    mc = _lerp_matrix(w, x.data.dtype)
    t = np.tensordot(mr, x.data, axes=([1], [2])).transpose(1, 2, 0, 3)
    out = np.tensordot(t, mc, axes=([3], [1]))

    def backward(g, grads):
        t2 = np.tensordot(mr.T, g, axes=([1], [2])).transpose(1, 2, 0, 3)
        _acc(grads, x, np.tensordot(t2, mc.T, axes=([3], [1])))

    return _make(out, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g, grads):
        _acc(grads, x, g.reshape(x.shape))

    return _make(out, (x,), backward)


def moveaxis(x: Tensor, src: tuple[int, ...], dst: tuple[int, ...]) -> Tensor:
    out = np.moveaxis(x.data, src, dst)

    def backward(g, grads):
        _acc(grads, x, np.moveaxis(g, dst, src))

    return _make(out, (x,), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]

    def backward(g, grads):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _acc(grads, x, dx)

    return _make(out, (x,), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sel = tuple([slice(None)] * axis + [slice(start, stop)])
    out = x.data[sel]

    def backward(g, grads):
        dx = np.zeros_like(x.data)
        dx[sel] = g
        _acc(grads, x, dx)

    return _make(out, (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(x, 1, start, stop)


def proj_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar projection sum(x * w) for a constant weight array."""
    w = np.asarray(w, dtype=x.data.dtype)
    if w.shape != x.shape:
        raise ValueError(f"projection shape {w.shape} != tensor shape {x.shape}")
    out = np.asarray((x.data * w).sum(), dtype=x.data.dtype)

    def backward(g, grads):
        _acc(grads, x, g * w)

    return _make(out, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g, grads):
        _acc(grads, x, np.broadcast_to(g, x.shape).astype(x.data.dtype))

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def smooth_l1(x: float) -> float:
    """0.5*x^2 inside |x| < 1, |x| - 0.5 outside."""
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_grad(x: float) -> float:
    return x if abs(x) < 1.0 else math.copysign(1.0, x)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of per-row softmax cross-entropies; labels index columns."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.intp)
    weights = np.asarray(weights, dtype=z.dtype)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    out = np.asarray((weights * (lse - z[rows, labels])).sum(), dtype=z.dtype)

    def backward(g, grads):
        e = np.exp(z - m)
        p = e / e.sum(axis=1, keepdims=True)
        p[rows, labels] -= 1.0
        _acc(grads, logits, (g * weights[:, None]) * p)

    return _make(out, (logits,), backward)


def smooth_l1_sum(pred: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum over rows of the componentwise smooth-L1 of (pred - target)."""
    d = pred.data - np.asarray(target, dtype=pred.data.dtype)
    weights = np.asarray(weights, dtype=pred.data.dtype)
    a = np.abs(d)
    per_row = np.where(a < 1.0, 0.5 * d * d, a - 0.5).sum(axis=1)
    out = np.asarray((weights * per_row).sum(), dtype=pred.data.dtype)

    def backward(g, grads):
        _acc(grads, pred, (g * weights[:, None]) * np.clip(d, -1.0, 1.0))

    return _make(out, (pred,), backward)


# ---------------------------------------------------------------------------
# parameters and optimization


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def sgd_update(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """One momentum-SGD update: v <- m*v - lr*(g + wd*p); p <- p + v."""
    v = momentum * velocity - lr * (grad + weight_decay * param)
    return param + v, v


class SGD:
    """Momentum SGD with weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        # validate every gradient before touching any parameter
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericsError(f"non-finite gradient in parameter '{name}'")
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data, self.velocity[name] = sgd_update(
                p.data, p.grad, self.velocity[name], self.lr, self.momentum, self.weight_decay
            )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(build_loss, tensors: list[Tensor], h: float = 1e-3) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``build_loss`` must return a scalar Tensor computed from ``tensors``,
    which should be float64 leaves with ``requires_grad=True``. The relative
    error per element is |fd - ad| / max(1, |fd|, |ad|).
    """
    for t in tensors:
        t.zero_grad()
    build_loss().backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    for t, ad in zip(tensors, grads):
        flat = t.data.reshape(-1)
        ad_flat = ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().data)
            flat[i] = orig - h
            dn = float(build_loss().data)
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            err = abs(fd - ad_flat[i]) / max(1.0, abs(fd), abs(ad_flat[i]))
            worst = max(worst, err)
    return worst
