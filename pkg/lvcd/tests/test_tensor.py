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
import os
import numpy as np
from numpy.testing import assert_almost_equal
from lvcd.tensor import (GradCheckReport, Tensor, ParamStore, ShapeError, add_bias,
                         attention_weights, concat, conv2d, float64, gradcheck,
                         group_norm, linear, load_tensor, mean, mse, no_grad, reshape,
                         save_tensor, sdp_attention, silu, slice_axis, softmax, take,
                         temporal_conv3d, transpose, upsample2x)
from lvcd.utils import FormatError, NumericalError


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_tensor_arithmetic():
    """Test Tensor arithmetic and backward"""
    a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    b = Tensor([4.0, 5.0, 6.0], requires_grad=True)
    out = (a * b + a - 2.0).sum()
    out.backward()
    assert_almost_equal(out.item(), 32 + 6 - 6)
    assert_almost_equal(a.grad, [5, 6, 7])
    assert_almost_equal(b.grad, [1, 2, 3])
    assert a.dtype == np.float32


def test_tensor_copies_input():
    """Test Tensor does not alias its input"""
    data = np.ones(3, dtype=np.float32)
    t = Tensor(data)
    data[0] = 5
    assert t.data[0] == 1


def test_mixed_operands():
    """Test ndarray on the left of a Tensor"""
    t = Tensor(np.ones(2), requires_grad=True)
    out = np.full(2, 2.0) - t
    assert isinstance(out, Tensor)
    out.sum().backward()
    assert_almost_equal(t.grad, [-1, -1])


def test_shape_error():
    """Test same-shape rule"""
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    try:
        a + b
    except ShapeError:
        return
    assert False


def test_float64():
    """Test float64 context"""
    with float64():
        t = Tensor([1.0])
    assert t.dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_no_grad():
    """Test no_grad does not record"""
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        out = linear(Tensor(np.ones((1, 2))), w)
    assert not out.requires_grad
    assert out._parents == ()


def test_gradcheck_elementwise():
    """Test gradients of silu, softmax, mean and mse"""
    rng = np.random.default_rng(0)
    with float64():
        x = _leaf(rng, 3, 4)
        for op in [lambda xs: silu(xs[0]),
                   lambda xs: softmax(xs[0], axis=-1),
                   lambda xs: mean(xs[0] * xs[0]),
                   lambda xs: mse(xs[0], np.ones((3, 4)))]:
            report = gradcheck(op, [x])
            assert report.passed, report


def test_softmax_large_logits():
    """Test softmax rows sum to one for logits in [-50, 50]"""
    rng = np.random.default_rng(20)
    for _ in range(100):
        rows, cols = rng.integers(1, 6), rng.integers(1, 9)
        logits = Tensor(rng.uniform(-50, 50, (rows, cols)))
        out = softmax(logits, axis=-1).data
        assert np.all(np.isfinite(out)) and np.all(out >= 0)
        assert_almost_equal(out.sum(axis=-1), np.ones(rows), decimal=5)


def test_concat_slice_exact():
    """Test slicing a concatenation gives back each part"""
    rng = np.random.default_rng(21)
    for _ in range(100):
        axis = int(rng.integers(0, 3))
        sizes = rng.integers(1, 4, size=int(rng.integers(1, 4)))
        shape = list(rng.integers(1, 4, size=3))
        parts = []
        for size in sizes:
            shape[axis] = size
            parts.append(Tensor(rng.standard_normal(shape)))
        joined = concat(parts, axis=axis)
        start = 0
        for part in parts:
            stop = start + part.shape[axis]
            assert np.array_equal(slice_axis(joined, axis, start, stop).data, part.data)
            start = stop


def test_gradcheck_random_ops():
    """Test gradients of small ops on random shapes and values"""
    rng = np.random.default_rng(22)
    ops = [lambda xs: silu(xs[0]),
           lambda xs: softmax(xs[0], axis=-1),
           lambda xs: xs[0] * xs[1],
           lambda xs: concat([xs[0], xs[1]], axis=0),
           lambda xs: slice_axis(concat([xs[0], xs[1]], axis=1), 1, 1, 2 * xs[0].shape[1]),
           lambda xs: mean(silu(xs[0]) * xs[1])]
    with float64():
        for k in range(100):
            shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
            x, y = _leaf(rng, *shape), _leaf(rng, *shape)
            report = gradcheck(ops[k % len(ops)], [x, y], rng=rng)
            assert report.passed, (k, report)


def test_gradcheck_shapes():
    """Test gradients of reshape, transpose, concat, slice, take and upsample"""
    rng = np.random.default_rng(1)
    with float64():
        x = _leaf(rng, 2, 3, 2, 2)
        y = _leaf(rng, 2, 1, 2, 2)
        ops = [lambda xs: reshape(xs[0], (6, 4)),
               lambda xs: transpose(xs[0], (3, 1, 0, 2)),
               lambda xs: concat([xs[0], xs[1]], axis=1),
               lambda xs: slice_axis(xs[0], 1, 1, 3),
               lambda xs: take(xs[0], [2, 0, 2], axis=1),
               lambda xs: upsample2x(xs[0])]
        for op in ops:
            report = gradcheck(op, [x, y])
            assert report.passed, report


def test_gradcheck_linear_bias():
    """Test gradients of linear and add_bias"""
    rng = np.random.default_rng(2)
    with float64():
        x, w, b = _leaf(rng, 2, 5, 3), _leaf(rng, 4, 3), _leaf(rng, 4)
        assert gradcheck(lambda xs: linear(*xs), [x, w, b]).passed
        h = _leaf(rng, 2, 4, 3, 3)
        assert gradcheck(lambda xs: add_bias(xs[0], xs[1]), [h, b]).passed
        b2 = _leaf(rng, 2, 4)
        assert gradcheck(lambda xs: add_bias(xs[0], xs[1]), [h, b2]).passed


def test_gradcheck_conv2d():
    """Test gradients of conv2d with stride and padding"""
    rng = np.random.default_rng(3)
    with float64():
        x, w, b = _leaf(rng, 2, 3, 6, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
        for stride, padding in [(1, 1), (2, 1), (1, 0)]:
            report = gradcheck(lambda xs: conv2d(*xs, stride=stride, padding=padding),
                               [x, w, b])
            assert report.passed, report


def test_conv2d_shape():
    """Test conv2d output size"""
    x = Tensor(np.ones((1, 2, 8, 8)))
    w = Tensor(np.ones((5, 2, 3, 3)))
    assert conv2d(x, w, stride=2, padding=1).shape == (1, 5, 4, 4)
    try:
        conv2d(x, Tensor(np.ones((5, 3, 3, 3))))
    except ShapeError:
        return
    assert False


def test_gradcheck_temporal_conv3d():
    """Test gradients of temporal_conv3d"""
    rng = np.random.default_rng(4)
    with float64():
        x, w, b = _leaf(rng, 1, 2, 4, 2, 3), _leaf(rng, 3, 2, 3, 1, 1), _leaf(rng, 3)
        report = gradcheck(lambda xs: temporal_conv3d(*xs), [x, w, b])
        assert report.passed, report
    assert temporal_conv3d(x, w, b).shape == (1, 3, 4, 2, 3)


def test_temporal_conv3d_identity():
    """Test a centered unit tap is the identity"""
    x = Tensor(np.arange(24, dtype=np.float32).reshape(1, 2, 3, 2, 2))
    w = np.zeros((2, 2, 3, 1, 1), dtype=np.float32)
    w[0, 0, 1] = w[1, 1, 1] = 1
    assert_almost_equal(temporal_conv3d(x, Tensor(w)).data, x.data)


def test_gradcheck_group_norm():
    """Test gradients of group_norm"""
    rng = np.random.default_rng(5)
    with float64():
        x, w, b = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 4), _leaf(rng, 4)
        report = gradcheck(lambda xs: group_norm(xs[0], 2, xs[1], xs[2]), [x, w, b])
        assert report.passed, report
    out = group_norm(Tensor(rng.standard_normal((2, 4, 3, 3))), 2).data
    assert_almost_equal(out.reshape(2, 2, -1).mean(axis=2), np.zeros((2, 2)), decimal=5)


def test_gradcheck_attention():
    """Test gradients of sdp_attention with a logit bias"""
    rng = np.random.default_rng(6)
    with float64():
        Q, K, V = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 4)
        bias = np.log(np.array([1, 1, 10, 10, 1.0]))
        report = gradcheck(lambda xs: sdp_attention(*xs, logit_bias=bias), [Q, K, V])
        assert report.passed, report


def test_amplified_attention_weight():
    """Test one amplified key among uniform logits"""
    Tk = 7
    Q = np.zeros((1, 2, 4))
    K = np.random.default_rng(7).standard_normal((1, Tk, 4))
    bias = np.zeros(Tk)
    bias[-1] = np.log(10.0)
    P = attention_weights(Q, K, bias)
    assert_almost_equal(P[0, :, -1], [10 / (Tk - 1 + 10)] * 2, decimal=6)
    assert_almost_equal(P[0, :, 0], [1 / (Tk - 1 + 10)] * 2, decimal=6)


def test_attention_non_finite():
    """Test non-finite logits"""
    Q = Tensor(np.full((1, 2, 2), np.inf))
    K = Tensor(np.ones((1, 2, 2)))
    try:
        sdp_attention(Q, K, K)
    except NumericalError:
        return
    assert False


def test_param_store():
    """Test ParamStore order, freeze and copies"""
    store = ParamStore({'b': np.ones(2), 'a': np.zeros((2, 2))})
    assert store.names() == ['a', 'b']
    assert store.size() == 6
    store.freeze(['a'])
    assert store['a'].requires_grad and not store['b'].requires_grad
    other = store.copy()
    other['a'].data[0, 0] = 3
    assert store['a'].data[0, 0] == 0
    assert store.astype(np.float64)['b'].dtype == np.float64


def test_tensor_file():
    """Test TEN1 files"""
    array = np.arange(12, dtype=np.float64).reshape(3, 4)
    save_tensor('t.ten', array)
    loaded = load_tensor('t.ten')
    assert loaded.dtype == np.float64
    assert np.all(loaded == array)
    with open('t.ten', 'wb') as fpt:
        fpt.write(b'XXXX')
    try:
        load_tensor('t.ten')
    except FormatError:
        os.unlink('t.ten')
        return
    assert False


def test_gradcheck_report():
    """Test passed compares the relative error with the tolerance"""
    assert GradCheckReport(1e-6, 1e-7, 4, 1e-4).passed
    assert not GradCheckReport(1e-3, 1e-7, 4, 1e-4).passed
    assert GradCheckReport.passed.__doc__
