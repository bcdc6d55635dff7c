"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is intentionally small: exactly what a conv/BN/linear
classifier with statistic-mixing normalization needs. The graph is a
dynamic tape rebuilt on every forward pass, so normalization paths that
change per mode (batch stats, global stats, mixed, interpolated) need no
special casing.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import InputError, ShapeError

_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference).

    The flag is thread-local so parallel client updates are unaffected by
    another thread's evaluation pass.
    """
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Non-leaf tensors remember their parents and a VJP closure; calling
    ``backward()`` on a scalar accumulates d(scalar)/d(node) into the
    ``grad`` buffer of every node with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- arithmetic sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- autodiff --------------------------------------------------------
    def backward(self):
        """Accumulate gradients of this scalar into all requiring leaves.

        Repeated calls without zeroing add up, matching the usual
        accumulate-into-grad contract.
        """
        if self.data.size != 1:
            raise InputError(f"backward() needs a scalar loss, got shape {self.data.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

        for node in topo:
            g = grads.get(id(node))
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data, requires_grad=_grad_enabled() and any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sqrt(x: Tensor) -> Tensor:
    root = np.sqrt(x.data)
    return _make(root, (x,), lambda g: (g * 0.5 / root,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)  # zero gradient on the boundary
    return _make(data, (x,), lambda g: (g * mask,))


# -- shape ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, idx) -> Tensor:
    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), vjp)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / data.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _make(data, (x,), vjp)


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2D convolution (cross-correlation), NCHW x FCkk -> NFH'W'."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4D input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    if stride < 1:
        raise InputError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel {w.shape} larger than padded input {x.shape} (pad={pad})"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    if pad:
        xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        xp[:, :, pad : pad + h, pad : pad + wd] = x.data
    else:
        xp = x.data
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    ckk = c * kh * kw
    cols_flat = cols.transpose(1, 2, 3, 0, 4, 5).reshape(ckk, n * ho * wo)
    w2 = w.data.reshape(f, ckk)
    out = (w2 @ cols_flat).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)

    def vjp(g):
        g_flat = g.transpose(1, 0, 2, 3).reshape(f, n * ho * wo)
        gw = (g_flat @ cols_flat.T).reshape(w.shape)
        gcols = (w2.T @ g_flat).reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
        gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, i, j
                ]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx, gw)

    return _make(out, (x, w), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C, averaging spatial positions."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: need 4D input, got {x.shape}")
    return tmean(x, axis=(2, 3))


# -- fused normalization -------------------------------------------------

def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Mini-batch normalization with affine transform, fused into one node.

    ``gamma``/``beta`` are (C,). Returns gamma * (x - mu)/sigma + beta where
    the statistics are taken over the (N, H, W) axes with biased variance.
    The batch mean/variance are recomputable from ``x`` by the caller; this
    op only owns the differentiable path.
    """
    n, c, h, w = x.shape
    m = n * h * w
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    s = np.sqrt((xc * xc).mean(axis=(0, 2, 3), keepdims=True) + eps)
    xn = xc / s
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xn * gd + beta.data.reshape(1, c, 1, 1)

    def vjp(g):
        ggamma = (g * xn).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = (gd / s) * (
            g
            - gbeta.reshape(1, c, 1, 1) / m
            - xn * ggamma.reshape(1, c, 1, 1) / m
        )
        return (gx, ggamma, gbeta)

    return _make(out, (x, gamma, beta), vjp)


def normalize_affine(x: Tensor, mean: Tensor, std: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """gamma * (x - mean)/std + beta with externally supplied statistics.

    ``mean``/``std`` broadcast against ``x`` (e.g. (1,C,1,1) or (N,C,1,1))
    and may carry gradients (mixed and interpolated paths). ``gamma`` and
    ``beta`` are (C,).
    """
    c = x.shape[1]
    gd = gamma.data.reshape(1, c, 1, 1)
    xn = (x.data - mean.data) / std.data
    out = xn * gd + beta.data.reshape(1, c, 1, 1)

    def vjp(g):
        gk = g * (gd / std.data)
        gmean = _unbroadcast(-gk, mean.shape)
        gstd = _unbroadcast(-gk * xn, std.shape)
        ggamma = (g * xn).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        return (_unbroadcast(gk, x.shape), gmean, gstd, ggamma, gbeta)

    return _make(out, (x, mean, std, gamma, beta), vjp)


def instance_std(x: Tensor, eps: float) -> Tensor:
    """Per-sample per-channel spatial standard deviation, shape (N,C,1,1)."""
    n, c, h, w = x.shape
    m = h * w
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xm = x.data - mu
    s = np.sqrt((xm * xm).mean(axis=(2, 3), keepdims=True) + eps)

    def vjp(g):
        return (g * xm / (m * s),)

    return _make(s, (x,), vjp)


# -- losses --------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2D, got {logits.shape}")
    labels = np.asarray(labels)
    n, y = logits.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= y:
        raise InputError(f"labels must lie in [0, {y}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprob = shifted - logsumexp
    loss = -logprob[np.arange(n), labels].mean()

    def vjp(g):
        grad = np.exp(logprob)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _make(np.float64(loss), (logits,), vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Batch-averaged squared L2 distance: (1/N) sum_i ||a_i - b_i||^2."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    n = a.shape[0]
    diff = a.data - b.data
    loss = (diff * diff).sum() / n

    def vjp(g):
        ga = (2.0 / n) * diff * g
        return (ga, -ga)

    return _make(np.float64(loss), (a, b), vjp)
