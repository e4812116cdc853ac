"""Dense float64 tensor with reverse-mode autodiff over a fixed op set.

The op vocabulary is intentionally closed: conv2d, matmul, elementwise
arithmetic, sigmoid, softmax over rows, leaky relu, log, pow, clamp,
min/max, sums/means, plus a handful of shape-plumbing ops (reshape,
transpose, axis indexing, spatial broadcast). No general broadcasting:
binary ops require equal shapes or a python scalar.

Graphs are recorded implicitly through parent links whenever an input has
``requires_grad``; ``Tensor.backward()`` runs the tape in reverse
topological order. Gradients on leaves accumulate across calls until
``zero_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Shape mismatch between operands."""


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Populate grads of every requires_grad tensor reachable from self.

        Repeated calls without ``zero_grad`` accumulate on the leaves.
        """
        if self.data.shape != ():
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # interior grads are scratch space for this pass; leaf grads persist
        for node in topo:
            if node._parents:
                node.grad = None
        if self._parents:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = (np.zeros_like(self.data) if self.grad is None else self.grad) + 1.0
        for node in reversed(topo):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64)  # own the buffer
        else:
            t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape != () and b.shape != ():
        _check_same_shape(a, b, "add")
    data = a.data + b.data

    def grad_fn(g):
        _accum(a, g if a.shape == data.shape else g.sum())
        _accum(b, g if b.shape == data.shape else g.sum())

    return _make(data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape != () and b.shape != ():
        _check_same_shape(a, b, "sub")
    data = a.data - b.data

    def grad_fn(g):
        _accum(a, g if a.shape == data.shape else g.sum())
        _accum(b, -g if b.shape == data.shape else -g.sum())

    return _make(data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape != () and b.shape != ():
        _check_same_shape(a, b, "mul")
    data = a.data * b.data

    def grad_fn(g):
        ga = g * b.data
        gb = g * a.data
        _accum(a, ga if a.shape == data.shape else ga.sum())
        _accum(b, gb if b.shape == data.shape else gb.sum())

    return _make(data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape != () and b.shape != ():
        _check_same_shape(a, b, "div")
    data = a.data / b.data

    def grad_fn(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        _accum(a, ga if a.shape == data.shape else ga.sum())
        _accum(b, gb if b.shape == data.shape else gb.sum())

    return _make(data, (a, b), grad_fn)


def pow_const(a, exponent: float) -> Tensor:
    a = _coerce(a)
    e = float(exponent)
    data = a.data ** e

    def grad_fn(g):
        _accum(a, g * e * a.data ** (e - 1.0))

    return _make(data, (a,), grad_fn)


def log(a) -> Tensor:
    a = _coerce(a)
    data = np.log(a.data)

    def grad_fn(g):
        _accum(a, g / a.data)

    return _make(data, (a,), grad_fn)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is passed only where not clipped."""
    a = _coerce(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def grad_fn(g):
        _accum(a, g * inside)

    return _make(data, (a,), grad_fn)


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient goes to the winner, ties to the first operand."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != () and b.shape != ():
        _check_same_shape(a, b, "minimum")
    a_wins = a.data <= b.data
    data = np.where(a_wins, a.data, b.data)

    def grad_fn(g):
        ga = g * a_wins
        gb = g * ~a_wins
        _accum(a, ga if a.shape == data.shape else ga.sum())
        _accum(b, gb if b.shape == data.shape else gb.sum())

    return _make(data, (a, b), grad_fn)


def maximum(a, b) -> Tensor:
    """Elementwise max; gradient goes to the winner, ties to the first operand."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != () and b.shape != ():
        _check_same_shape(a, b, "maximum")
    a_wins = a.data >= b.data
    data = np.where(a_wins, a.data, b.data)

    def grad_fn(g):
        ga = g * a_wins
        gb = g * ~a_wins
        _accum(a, ga if a.shape == data.shape else ga.sum())
        _accum(b, gb if b.shape == data.shape else gb.sum())

    return _make(data, (a, b), grad_fn)


# -- activations ----------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def grad_fn(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), grad_fn)


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = _coerce(a)
    if slope == 1.0:
        return a
    x = a.data
    data = np.maximum(x, slope * x) if 0.0 <= slope <= 1.0 else \
        np.where(x > 0, x, slope * x)

    def grad_fn(g):
        _accum(a, g * np.where(x > 0, 1.0, slope))

    return _make(data, (a,), grad_fn)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilized by max subtraction."""
    a = _coerce(a)
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-D input, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * data).sum(axis=1, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), grad_fn)


# -- reductions -------------------------------------------------------------------


def tsum(a) -> Tensor:
    a = _coerce(a)
    data = np.asarray(a.data.sum())

    def grad_fn(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make(data, (a,), grad_fn)


def tmean(a) -> Tensor:
    a = _coerce(a)
    data = np.asarray(a.data.mean())
    n = a.size

    def grad_fn(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _make(data, (a,), grad_fn)


def sum_axis0(a) -> Tensor:
    a = _coerce(a)
    data = a.data.sum(axis=0)

    def grad_fn(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), grad_fn)


# -- shape plumbing -----------------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = _coerce(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def grad_fn(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), grad_fn)


def transpose2d(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose2d: expected 2-D input, got shape {a.shape}")
    data = a.data.T.copy()

    def grad_fn(g):
        _accum(a, g.T)

    return _make(data, (a,), grad_fn)


def index_axis0(a, i: int) -> Tensor:
    a = _coerce(a)
    data = a.data[i].copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[i] = g
        _accum(a, full)

    return _make(data, (a,), grad_fn)


def slice_axis0(a, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    data = a.data[start:stop].copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    return _make(data, (a,), grad_fn)


def mul_spatial(feat, smap) -> Tensor:
    """Multiply (C, M, N) features by an (M, N) map, broadcast over channels."""
    feat, smap = _coerce(feat), _coerce(smap)
    if feat.ndim != 3 or smap.ndim != 2 or feat.shape[1:] != smap.shape:
        raise DimensionError(
            f"mul_spatial: features {feat.shape} incompatible with map {smap.shape}")
    data = feat.data * smap.data[None]

    def grad_fn(g):
        _accum(feat, g * smap.data[None])
        _accum(smap, (g * feat.data).sum(axis=0))

    return _make(data, (feat, smap), grad_fn)


# -- matmul / convolution -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} x {b.shape} do not agree")
    data = a.data @ b.data

    def grad_fn(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, (a, b), grad_fn)


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of a (C, M, N) input with a (Cout, C, k, k) kernel."""
    x, weight, bias = _coerce(x), _coerce(weight), _coerce(bias)
    if x.ndim != 3:
        raise DimensionError(f"conv2d: expected 3-D input (C, M, N), got shape {x.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"conv2d: kernel not square: {weight.shape}")
    if cin != x.shape[0]:
        raise DimensionError(
            f"conv2d: input has {x.shape[0]} channels, kernel expects {cin} "
            f"(input {x.shape}, kernel {weight.shape})")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {k} too large for input {x.shape}")
    w2d = weight.data.reshape(cout, cin * k * k)

    if k == 1 and padding == 0:
        # 1x1 kernels are a plain channel matmul; skip im2col entirely
        xs = x.data if stride == 1 else x.data[:, ::stride, ::stride]
        flat = xs.reshape(c, ho * wo)
        data = (w2d @ flat + bias.data[:, None]).reshape(cout, ho, wo)

        def grad_fn(g):
            g2 = g.reshape(cout, ho * wo)
            if weight.requires_grad:
                _accum(weight, (g2 @ flat.T).reshape(weight.shape))
            if bias.requires_grad:
                _accum(bias, g2.sum(axis=1))
            if x.requires_grad:
                dxs = (w2d.T @ g2).reshape(c, ho, wo)
                if stride == 1:
                    _accum(x, dxs)
                else:
                    dx = np.zeros_like(x.data)
                    dx[:, ::stride, ::stride] = dxs
                    _accum(x, dx)

        return _make(data, (x, weight, bias), grad_fn)

    cols = kernels.im2col(np.ascontiguousarray(x.data), k, stride, padding)
    data = (w2d @ cols + bias.data[:, None]).reshape(cout, ho, wo)

    def grad_fn(g):
        g2 = g.reshape(cout, ho * wo)
        if weight.requires_grad:
            _accum(weight, (g2 @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=1))
        if x.requires_grad:
            dcols = w2d.T @ g2
            _accum(x, kernels.col2im(np.ascontiguousarray(dcols), c, h, w, k, stride, padding))

    return _make(data, (x, weight, bias), grad_fn)


# -- batch normalization ---------------------------------------------------------------

BN_EPS = 1e-5


def batchnorm_train(y, gamma, beta, eps: float = BN_EPS):
    """Per-channel batch norm of (C, M, N) using this batch's own statistics.

    Returns (normalized tensor, batch mean, batch var); the caller owns the
    running-buffer update.
    """
    y, gamma, beta = _coerce(y), _coerce(gamma), _coerce(beta)
    m = y.data[0].size
    mu = y.data.mean(axis=(1, 2))
    var = y.data.var(axis=(1, 2))
    ivar = 1.0 / np.sqrt(var + eps)
    xc = y.data - mu[:, None, None]
    xhat = xc * ivar[:, None, None]
    data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def grad_fn(g):
        dxhat = g * gamma.data[:, None, None]
        if y.requires_grad:
            dvar = (dxhat * xc).sum(axis=(1, 2)) * (-0.5) * ivar ** 3
            dmu = -(dxhat.sum(axis=(1, 2))) * ivar
            dy = (dxhat * ivar[:, None, None]
                  + dvar[:, None, None] * 2.0 * xc / m
                  + dmu[:, None, None] / m)
            _accum(y, dy)
        _accum(gamma, (g * xhat).sum(axis=(1, 2)))
        _accum(beta, g.sum(axis=(1, 2)))

    out = _make(data, (y, gamma, beta), grad_fn)
    return out, mu, var


def batchnorm_infer(y, gamma, beta, running_mean, running_var, eps: float = BN_EPS) -> Tensor:
    """Affine batch norm of (C, M, N) using frozen running statistics."""
    y, gamma, beta = _coerce(y), _coerce(gamma), _coerce(beta)
    ivar = 1.0 / np.sqrt(running_var + eps)
    xhat = (y.data - running_mean[:, None, None]) * ivar[:, None, None]
    data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def grad_fn(g):
        _accum(y, g * (gamma.data * ivar)[:, None, None])
        _accum(gamma, (g * xhat).sum(axis=(1, 2)))
        _accum(beta, g.sum(axis=(1, 2)))

    return _make(data, (y, gamma, beta), grad_fn)


# -- convolution block ------------------------------------------------------------------


@dataclass
class ConvBlockParams:
    """Parameters of one conv + BN + leaky-relu block.

    Kernel must be 1x1 or 3x3. 3x3 uses same-padding, 1x1 no padding.
    ``bn_enabled=False`` plus ``leaky_slope=1.0`` degrades the block to a
    plain (affine) convolution, which is how 1x1 projection heads are built.
    """

    weight: Tensor
    bias: Tensor
    bn_gamma: Tensor = None
    bn_beta: Tensor = None
    bn_mean: np.ndarray = None
    bn_var: np.ndarray = None
    leaky_slope: float = 0.1
    stride: int = 1
    bn_enabled: bool = True
    bn_momentum: float = 0.9

    def __post_init__(self):
        cout, _, k, k2 = self.weight.shape
        if k != k2 or k not in (1, 3):
            raise ValueError(f"kernel spatial size must be 1 or 3, got {self.weight.shape}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.bn_gamma is None:
            self.bn_gamma = Tensor(np.ones(cout))
        if self.bn_beta is None:
            self.bn_beta = Tensor(np.zeros(cout))
        if self.bn_mean is None:
            self.bn_mean = np.zeros(cout)
        if self.bn_var is None:
            self.bn_var = np.ones(cout)
        if np.any(self.bn_var <= 0):
            raise ValueError("bn_var entries must be > 0")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def parameters(self):
        ps = [self.weight, self.bias]
        if self.bn_enabled:
            ps += [self.bn_gamma, self.bn_beta]
        return ps


def conv_block_forward(x: Tensor, p: ConvBlockParams, training: bool = False) -> Tensor:
    """LeakyReLU(BN(W * x + b)) with same-padding for 3x3 kernels."""
    x = _coerce(x)
    if x.ndim != 3:
        raise DimensionError(f"conv block: expected (C, M, N) input, got shape {x.shape}")
    k = p.kernel_size
    pad = 1 if k == 3 else 0
    if p.stride == 2 and (x.shape[1] % 2 or x.shape[2] % 2):
        raise DimensionError(
            f"conv block: stride-2 needs even spatial extent, got {x.shape}")
    y = conv2d(x, p.weight, p.bias, stride=p.stride, padding=pad)
    if p.bn_enabled:
        if training:
            y, mu, var = batchnorm_train(y, p.bn_gamma, p.bn_beta)
            mom = p.bn_momentum
            p.bn_mean = mom * p.bn_mean + (1.0 - mom) * mu
            p.bn_var = mom * p.bn_var + (1.0 - mom) * np.maximum(var, 1e-12)
        else:
            y = batchnorm_infer(y, p.bn_gamma, p.bn_beta, p.bn_mean, p.bn_var)
    return leaky_relu(y, p.leaky_slope)


# -- gradient checking --------------------------------------------------------------------


def finite_diff_check(f, x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic.
    Error at each coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.requires_grad = True
    x.zero_grad()
    loss = f(x)
    loss.backward()
    analytic = x.grad.copy()
    x.requires_grad = False
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x).data)
        flat[i] = orig - h
        lo = float(f(x).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    x.requires_grad = True
    return worst
