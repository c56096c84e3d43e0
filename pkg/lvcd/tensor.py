# Copyright 2024 The LVCD Authors

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure when at least one
input requires a gradient; :py:meth:`Tensor.backward` walks the record in
reverse topological order. Tensors are float32 unless created inside
:py:func:`float64`, which exists for finite-difference checks.

>>> from lvcd.tensor import Tensor, linear
>>> import numpy as np
>>> x = Tensor(np.ones((2, 3)), requires_grad=True)
>>> w = Tensor(np.ones((4, 3)), requires_grad=True)
>>> linear(x, w).sum().backward()
>>> w.grad.shape
(4, 3)
"""
from contextlib import contextmanager
from dataclasses import dataclass
import struct
import threading
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from lvcd.utils import FormatError, NumericalError


class ShapeError(ValueError):
    """Incompatible tensor dimensions"""


_STATE = threading.local()


def get_dtype():
    """Floating point type of newly created tensors"""
    return getattr(_STATE, 'dtype', np.float32)


@contextmanager
def float64():
    """Create 64-bit tensors inside the block (gradient checks)"""
    previous = get_dtype()
    _STATE.dtype = np.float64
    try:
        yield
    finally:
        _STATE.dtype = previous


def grad_enabled():
    """Whether new operations record the computation"""
    return getattr(_STATE, 'grad', True)


@contextmanager
def no_grad():
    """Operations inside the block are not recorded (inference)"""
    previous = grad_enabled()
    _STATE.grad = False
    try:
        yield
    finally:
        _STATE.grad = previous


class Tensor:
    """Dense tensor; ``data`` is a row-major numpy array"""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool=False, dtype=None):
        dtype = get_dtype() if dtype is None else dtype
        self.data = np.array(data, dtype=dtype, order='C')
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def result(cls, data, parents, backward):
        """Output of an operation; records the graph only when needed"""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        """Dimension sizes"""
        return self.data.shape

    @property
    def ndim(self):
        """Rank"""
        return self.data.ndim

    @property
    def dtype(self):
        """numpy dtype"""
        return self.data.dtype

    def numpy(self):
        """Underlying array"""
        return self.data

    def item(self):
        """Python scalar of a one-element tensor"""
        return self.data.item()

    def zero_grad(self):
        """Forget the accumulated gradient"""
        self.grad = None

    def detach(self):
        """Same data, no record"""
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f'Tensor(shape={self.shape}, dtype={self.dtype})'

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into the ``grad`` of every leaf"""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError('backward without gradient needs a scalar, '
                                 f'got shape {self.shape}')
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        """Sum of all entries"""
        return tsum(self)

    def mean(self):
        """Mean of all entries"""
        return mean(self)


def as_tensor(value):
    """Wrap arrays as constant tensors of the current precision"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f'{op}: shapes {a.shape} and {b.shape} differ '
                         '(only bias-add broadcasts)')


def add(a, b):
    """a + b for same-shape operands or a Python scalar"""
    if np.isscalar(b):
        b = float(b)
        return Tensor.result(a.data + b, (a, ), lambda g: (g, ))
    if not isinstance(b, Tensor):
        b = np.asarray(b, dtype=a.dtype)
        _same_shape(a, b, 'add')
        return Tensor.result(a.data + b, (a, ), lambda g: (g, ))
    _same_shape(a, b, 'add')
    return Tensor.result(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a):
    """-a"""
    return Tensor.result(-a.data, (a, ), lambda g: (-g, ))


def mul(a, b):
    """Elementwise product with a same-shape operand or a Python scalar"""
    if np.isscalar(b):
        b = float(b)
        return Tensor.result(a.data * b, (a, ), lambda g: (g * b, ))
    if not isinstance(b, Tensor):
        b = np.asarray(b, dtype=a.dtype)
        _same_shape(a, b, 'mul')
        return Tensor.result(a.data * b, (a, ), lambda g: (g * b, ))
    _same_shape(a, b, 'mul')
    return Tensor.result(a.data * b.data, (a, b),
                         lambda g: (g * b.data, g * a.data))


def tsum(a):
    """Sum of all entries"""
    return Tensor.result(np.asarray(a.data.sum(), dtype=a.dtype), (a, ),
                         lambda g: (np.full(a.shape, g, dtype=a.dtype), ))


def mean(a):
    """Mean of all entries"""
    n = a.data.size
    return Tensor.result(np.asarray(a.data.mean(), dtype=a.dtype), (a, ),
                         lambda g: (np.full(a.shape, g / n, dtype=a.dtype), ))


def mse(a, target):
    """Mean squared error against a constant target"""
    diff = a - np.asarray(target, dtype=a.dtype)
    return mean(mul(diff, diff))


def silu(x):
    """x * sigmoid(x)"""
    s = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor.result(x.data * s, (x, ),
                         lambda g: (g * s * (1 + x.data * (1 - s)), ))


def reshape(x, shape):
    """Row-major reshape"""
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f'reshape: cannot view {x.shape} as {shape}')
    return Tensor.result(x.data.reshape(shape), (x, ),
                         lambda g: (g.reshape(x.shape), ))


def transpose(x, axes):
    """Axis permutation"""
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.result(np.ascontiguousarray(x.data.transpose(axes)), (x, ),
                         lambda g: (g.transpose(inverse), ))


def concat(tensors, axis=0):
    """Concatenate along ``axis``; the other dimensions must agree"""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref))
                                     if k != axis % len(ref)):
            raise ShapeError(f'concat: {t.shape} incompatible with {ref} on axis {axis}')
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor.result(np.concatenate([t.data for t in tensors], axis=axis),
                         tensors, backward)


def slice_axis(x, axis, start, stop):
    """x[..., start:stop, ...] on ``axis``"""
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f'slice: range [{start}, {stop}) outside axis of size {x.shape[axis]}')
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out, )

    return Tensor.result(x.data[index].copy(), (x, ), backward)


def take(x, indices, axis=0):
    """Gather ``indices`` along ``axis`` (repeats allowed)"""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(np.moveaxis(x.data, axis, 0))
        np.add.at(out, indices, np.moveaxis(g, axis, 0))
        return (np.moveaxis(out, 0, axis), )

    return Tensor.result(np.take(x.data, indices, axis=axis), (x, ), backward)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of [B, C, H, W]"""
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.shape

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)), )

    return Tensor.result(data, (x, ), backward)


def add_bias(x, b):
    """Bias-add: ``b`` of shape [C] or [B, C] broadcast over axes after 1"""
    b = as_tensor(b)
    if b.ndim == 1:
        if x.ndim < 2 or b.shape[0] != x.shape[1]:
            raise ShapeError(f'add_bias: bias {b.shape} for input {x.shape}')
        view = (1, -1) + (1, ) * (x.ndim - 2)
        axes = (0, ) + tuple(range(2, x.ndim))
    elif b.ndim == 2:
        if b.shape != x.shape[:2]:
            raise ShapeError(f'add_bias: bias {b.shape} for input {x.shape}')
        view = b.shape + (1, ) * (x.ndim - 2)
        axes = tuple(range(2, x.ndim))
    else:
        raise ShapeError(f'add_bias: bias must be 1-D or 2-D, got {b.shape}')
    return Tensor.result(x.data + b.data.reshape(view), (x, b),
                         lambda g: (g, g.sum(axis=axes)))


def linear(x, weight, bias=None):
    """x @ weight.T + bias; x is [..., in], weight [out, in]"""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f'linear: input features {x.shape[-1]} != weight {weight.shape}')
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ flat]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor.result(out.reshape(lead + (weight.shape[0], )), parents, backward)


def conv2d(x, weight, bias=None, stride: int=1, padding: int=0):
    """Cross-correlation of [B, C, H, W] with [O, C, kh, kw]"""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f'conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}')
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f'conv2d: input channels {C} != weight channels {Cw}')
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError(f'conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}')
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :Ho, :Wo]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                part = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + stride * Ho:stride,
                    j:j + stride * Wo:stride] += part.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor.result(np.ascontiguousarray(out), parents, backward)


def temporal_conv3d(x, weight, bias=None, padding=None):
    """Convolution along the frame axis of [B, C, N, H, W]

    The kernel is [O, C, k_t, 1, 1]; zero padding of (k_t - 1) // 2 frames
    keeps N for odd k_t.
    """
    if x.ndim != 5:
        raise ShapeError(f'temporal_conv3d: expected [B, C, N, H, W], got {x.shape}')
    B, C, N, H, W = x.shape
    if N < 1:
        raise ShapeError('temporal_conv3d: needs at least one frame')
    O, Cw, kt, kh, kw = weight.shape
    if (kh, kw) != (1, 1):
        raise ShapeError(f'temporal_conv3d: spatial kernel must be 1x1, got {kh}x{kw}')
    if Cw != C:
        raise ShapeError(f'temporal_conv3d: input channels {C} != weight channels {Cw}')
    padding = (kt - 1) // 2 if padding is None else padding
    No = N + 2 * padding - kt + 1
    if No < 1:
        raise ShapeError(f'temporal_conv3d: kernel {kt} too long for {N} frames')
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (0, 0), (0, 0)))
    taps = weight.data[:, :, :, 0, 0]
    out = np.zeros((O, B, No, H, W), dtype=x.dtype)
    for k in range(kt):
        out += np.tensordot(taps[:, :, k], xp[:, :, k:k + No], axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3, 4)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
        parents.append(bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for k in range(kt):
            gw[:, :, k, 0, 0] = np.tensordot(g, xp[:, :, k:k + No],
                                             axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            part = np.tensordot(taps[:, :, k], g, axes=([0], [1]))
            gxp[:, :, k:k + No] += part.transpose(1, 0, 2, 3, 4)
        grads = [gxp[:, :, padding:padding + N], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return Tensor.result(np.ascontiguousarray(out), parents, backward)


def group_norm(x, groups: int, weight=None, bias=None, eps: float=1e-5):
    """Group normalization of [B, C, ...] with optional per-channel affine"""
    B, C = x.shape[:2]
    if C % groups:
        raise ShapeError(f'group_norm: {groups} groups do not divide {C} channels')
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=2, keepdims=True) + eps)
    xhat = centered * inv
    view = (1, C) + (1, ) * (x.ndim - 2)
    out = xhat.reshape(x.shape)
    parents = [x]
    if weight is not None:
        out = out * weight.data.reshape(view) + bias.data.reshape(view)
        parents.extend([weight, bias])
    axes = (0, ) + tuple(range(2, x.ndim))

    def backward(g):
        gxhat = g * weight.data.reshape(view) if weight is not None else g
        gg = gxhat.reshape(B, groups, -1)
        gx = inv * (gg - gg.mean(axis=2, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=2, keepdims=True))
        grads = [gx.reshape(x.shape)]
        if weight is not None:
            grads.append((g * xhat.reshape(x.shape)).sum(axis=axes))
            grads.append(g.sum(axis=axes))
        return tuple(grads)

    return Tensor.result(out.astype(x.dtype, copy=False), parents, backward)


def _softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int=-1):
    """Max-subtracted softmax"""
    y = _softmax(x.data, axis=axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)), )

    return Tensor.result(y, (x, ), backward)


def _logits(q, k, logit_bias):
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f'attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}')
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) * float(q.shape[-1] ** -0.5)
    if logit_bias is not None:
        logit_bias = np.asarray(logit_bias, dtype=logits.dtype)
        if logit_bias.shape[-1] != k.shape[-2]:
            raise ShapeError(f'attention: bias length {logit_bias.shape[-1]} != keys {k.shape[-2]}')
        logits = logits + logit_bias[..., None, :]
    if not np.all(np.isfinite(logits)):
        raise NumericalError('attention: non-finite logits')
    return logits


def attention_weights(Q, K, logit_bias=None):
    """softmax(QK^T / sqrt(d) + bias) as a numpy array"""
    Q, K = as_tensor(Q), as_tensor(K)
    return _softmax(_logits(Q.data, K.data, logit_bias))


def sdp_attention(Q, K, V, logit_bias=None):
    """Scaled dot-product attention over the last two axes

    Q is [..., T_q, d], K and V are [..., T_k, d]; ``logit_bias`` is a constant
    of shape [..., T_k] added to every query row.
    """
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f'attention: {K.shape[-2]} keys but {V.shape[-2]} values')
    scale = float(Q.shape[-1] ** -0.5)
    P = _softmax(_logits(Q.data, K.data, logit_bias))
    out = np.matmul(P, V.data)

    def backward(g):
        gV = np.matmul(np.swapaxes(P, -1, -2), g)
        gP = np.matmul(g, np.swapaxes(V.data, -1, -2))
        gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True))
        gQ = np.matmul(gS, K.data) * scale
        gK = np.matmul(np.swapaxes(gS, -1, -2), Q.data) * scale
        return gQ, gK, gV

    return Tensor.result(out.astype(Q.dtype, copy=False), (Q, K, V), backward)


class ParamStore:
    """Named parameters; iteration is in lexicographic order of the names"""

    def __init__(self, arrays=None):
        self._tensors = {}
        for name, value in (arrays or {}).items():
            self[name] = value

    def __setitem__(self, name, value):
        if isinstance(value, Tensor):
            value.requires_grad = True
            self._tensors[name] = value
            return
        value = np.asarray(value)
        dtype = value.dtype if value.dtype.kind == 'f' else None
        self._tensors[name] = Tensor(value, requires_grad=True, dtype=dtype)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self.names())

    def names(self):
        """Sorted parameter names"""
        return sorted(self._tensors)

    def items(self):
        """(name, Tensor) pairs in name order"""
        return [(name, self._tensors[name]) for name in self.names()]

    def arrays(self):
        """Name -> numpy array copy"""
        return {name: t.data.copy() for name, t in self.items()}

    def copy(self):
        """Deep copy"""
        return ParamStore(self.arrays())

    def astype(self, dtype):
        """Deep copy in another precision"""
        return ParamStore({name: t.data.astype(dtype) for name, t in self.items()})

    def zero_grad(self):
        """Forget accumulated gradients"""
        for _, t in self.items():
            t.grad = None

    def freeze(self, trainable):
        """Only names in ``trainable`` record gradients"""
        trainable = set(trainable)
        for name, t in self.items():
            t.requires_grad = name in trainable

    def size(self):
        """Total number of scalars"""
        return sum(t.data.size for _, t in self.items())


@dataclass
class GradCheckReport:
    """Finite-difference comparison"""
    max_rel_error: float
    max_abs_error: float
    checked: int
    tolerance: float

    @property
    def passed(self):
        """Largest relative error below the tolerance"""
        return self.max_rel_error < self.tolerance


def gradcheck(op, inputs, tolerance: float=1e-4, h: float=1e-5,
              max_checks: int=None, rng=None):
    """Central differences against reverse-mode gradients

    ``op`` maps the list ``inputs`` (float64 tensors) to a tensor; a fixed
    random projection turns it into a scalar. ``max_checks`` limits the number
    of coordinates checked per input. The relative error of an input is the
    largest absolute discrepancy divided by the largest gradient magnitude of
    that input (floored at 1e-6).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError('gradcheck requires 64-bit tensors (see float64())')
    projection = rng.standard_normal(op(inputs).shape)

    def scalar():
        return float((op(inputs).data * projection).sum())

    for t in inputs:
        t.grad = None
    out = op(inputs)
    (out * projection).sum().backward()
    max_rel = max_abs = 0.0
    checked = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            coords = rng.choice(flat.size, size=max_checks, replace=False)
        numeric = np.empty(coords.shape[0])
        for pos, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            plus = scalar()
            flat[c] = orig - h
            minus = scalar()
            flat[c] = orig
            numeric[pos] = (plus - minus) / (2 * h)
        a = analytic.reshape(-1)[coords]
        abs_err = np.abs(a - numeric).max() if coords.shape[0] else 0.0
        scale = max(np.abs(a).max(initial=0), np.abs(numeric).max(initial=0), 1e-6)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, abs_err / scale)
        checked += coords.shape[0]
    return GradCheckReport(max_rel_error=float(max_rel),
                           max_abs_error=float(max_abs),
                           checked=checked, tolerance=tolerance)


_DTYPE_CODES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}


def write_tensor(fpt, array):
    """Append a TEN1 record: magic, u8 dtype, u8 rank, u64 dims, payload"""
    array = np.asarray(array)
    code = 1 if array.dtype == np.float64 else 0
    fpt.write(b'TEN1')
    fpt.write(struct.pack('<BB', code, array.ndim))
    fpt.write(struct.pack(f'<{array.ndim}Q', *array.shape))
    fpt.write(np.ascontiguousarray(array, dtype=_DTYPE_CODES[code]).tobytes())


def read_tensor(fpt):
    """Read one TEN1 record"""
    magic = fpt.read(4)
    if magic != b'TEN1':
        raise FormatError(f'bad tensor magic {magic!r}, expected TEN1')
    header = fpt.read(2)
    if len(header) != 2:
        raise FormatError('truncated tensor header')
    code, rank = struct.unpack('<BB', header)
    if code not in _DTYPE_CODES:
        raise FormatError(f'unknown tensor dtype code {code}')
    dims = struct.unpack(f'<{rank}Q', fpt.read(8 * rank))
    dtype = _DTYPE_CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = fpt.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError('truncated tensor payload')
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder('='))


def save_tensor(fname, array):
    """Write a single-record .ten file"""
    with open(fname, 'wb') as fpt:
        write_tensor(fpt, array)


def load_tensor(fname):
    """Read a single-record .ten file"""
    with open(fname, 'rb') as fpt:
        return read_tensor(fpt)
