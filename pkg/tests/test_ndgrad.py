import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from quantcal import ndgrad as nd


def grad_of(f, x):
    """Tape gradient of a scalar-valued function of one array leaf."""
    leaf = nd.param(x)
    (g,) = nd.gradients(f(leaf), [leaf])
    return g


def test_node_wraps_float64():
    node = nd.as_node([1, 2, 3])
    assert node.value.dtype == np.float64
    assert node.shape == (3,)
    assert node.size == 3
    assert not node.requires_grad


def test_param_requires_grad_and_copies():
    x = np.ones(3)
    p = nd.param(x)
    p.value[0] = 5.0
    assert x[0] == 1.0
    assert p.requires_grad


def test_requires_grad_propagates():
    a = nd.param([1.0])
    b = nd.constant([2.0])
    assert (a + b).requires_grad
    assert not (b + b).requires_grad


def test_item_on_scalar():
    assert nd.as_node(3.5).item() == 3.5


@pytest.mark.parametrize(
    "op,ref",
    [
        (nd.add, np.add),
        (nd.subtract, np.subtract),
        (nd.multiply, np.multiply),
        (nd.divide, np.divide),
    ],
)
def test_binary_values_match_numpy(op, ref):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0  # keep denominators away from zero
    assert np.array_equal(op(a, b).value, ref(a, b))


@pytest.mark.parametrize(
    "f",
    [
        lambda x: (x * x + 2.0 * x).sum(),
        lambda x: (x / (x * x + 1.0)).sum(),
        lambda x: nd.exp(x).mean(),
        lambda x: nd.log(x * x + 1.0).sum(),
        lambda x: nd.tanh(x).sum(),
        lambda x: nd.relu(x).sum(),
        lambda x: nd.softplus(x).sum(),
        lambda x: nd.absolute(x).sum(),
        lambda x: nd.std_normal_cdf(x).sum(),
        lambda x: (-x).sum(),
        lambda x: nd.softmax(x.reshape((2, 4))).reshape((8,))[2:6].sum(),
        lambda x: nd.clip(x, -0.5, 0.5).sum(),
        lambda x: nd.pairwise_abs_diff(x).mean(),
        lambda x: (x[1:] - x[:-1]).sum() + x[np.array([0, 0, 3])].sum(),
        lambda x: nd.concat([x[:3] * 2.0, x[3:]]).sum(),
        lambda x: x.reshape((4, 2)).mean(axis=1).sum(),
        lambda x: x.reshape((2, 4)).sum(axis=0, keepdims=True).mean(),
    ],
)
def test_gradients_match_finite_differences(f):
    rng = np.random.default_rng(7)
    # offsets keep relu/clip kinks and |.| ties off the sample points
    x = rng.normal(size=8) + 0.05
    assert nd.finite_diff_check(f, x) < 1e-6


def test_matmul_gradients():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    assert nd.finite_diff_check(lambda x: (nd.matmul(x, b)).sum(), a) < 1e-7
    assert nd.finite_diff_check(lambda x: (nd.matmul(a, x)).sum(), b) < 1e-7


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ValueError, match="matmul: incompatible shapes"):
        nd.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError, match="matmul"):
        nd.matmul(np.ones(3), np.ones((3, 1)))


def test_broadcasting_gradients_unbroadcast():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 4))
    row = rng.normal(size=(1, 4))
    assert nd.finite_diff_check(lambda x: (nd.as_node(a) * x).sum(), row) < 1e-7
    scalar = np.array(1.5)
    assert nd.finite_diff_check(lambda x: (nd.as_node(a) + x).sum(), scalar) < 1e-7


def test_fanout_accumulates():
    g = grad_of(lambda x: (x * x + x).sum(), np.array([1.0, -2.0, 3.0]))
    assert np.allclose(g, np.array([3.0, -3.0, 7.0]))


def test_unused_leaf_gets_zero_gradient():
    a = nd.param([1.0, 2.0])
    b = nd.param([3.0])
    ga, gb = nd.gradients((a * a).sum(), [a, b])
    assert np.array_equal(gb, np.zeros(1))
    assert np.allclose(ga, [2.0, 4.0])


def test_gradients_requires_scalar_output():
    a = nd.param([1.0, 2.0])
    with pytest.raises(ValueError, match="must be scalar"):
        nd.gradients(a * 2.0, [a])


def test_gradients_rejects_constant_wrt():
    a = nd.param([1.0])
    c = nd.constant([1.0])
    with pytest.raises(ValueError, match="requires_grad"):
        nd.gradients((a + c).sum(), [c])


def test_deep_chain_no_recursion_limit():
    x = nd.param(np.array([1.0]))
    y = x
    for _ in range(5000):
        y = y + 0.001
    (g,) = nd.gradients(y.sum(), [x])
    assert g[0] == 1.0


def test_divide_by_zero_raises():
    with pytest.raises(ValueError, match="zero in denominator"):
        nd.divide(np.ones(2), np.array([1.0, 0.0]))


def test_log_nonpositive_raises():
    with pytest.raises(ValueError, match="log"):
        nd.log(np.array([1.0, 0.0]))


def test_nonfinite_result_raises():
    with np.errstate(over="ignore"):
        with pytest.raises(ValueError, match="non-finite"):
            nd.exp(np.array([1000.0]))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    out = nd.softmax(nd.as_node(rng.normal(size=(5, 7)) * 10.0)).value
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_clip_gradient_zero_outside_range():
    g = grad_of(lambda x: nd.clip(x, -1.0, 1.0).sum(), np.array([-2.0, 0.5, 3.0]))
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_take_with_duplicate_indices_accumulates():
    idx = np.array([0, 0, 2])
    g = grad_of(lambda x: x[idx].sum(), np.arange(4.0))
    assert np.array_equal(g, [2.0, 0.0, 1.0, 0.0])


def test_take_with_2d_slice():
    x = np.arange(12.0).reshape(3, 4)
    g = grad_of(lambda n: n[:, 1].sum(), x)
    expected = np.zeros((3, 4))
    expected[:, 1] = 1.0
    assert np.array_equal(g, expected)


def test_dropout_scales_and_masks():
    x = np.ones((2, 3))
    mask = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    out = nd.dropout(nd.as_node(x), mask, 0.25)
    assert np.allclose(out.value, mask / 0.75)
    with pytest.raises(ValueError, match="mask shape"):
        nd.dropout(nd.as_node(x), np.ones(3), 0.25)
    with pytest.raises(ValueError, match="rate"):
        nd.dropout(nd.as_node(x), np.ones((2, 3)), 1.0)


def test_std_normal_cdf_matches_scipy():
    z = np.linspace(-6, 6, 25)
    assert np.allclose(nd.std_normal_cdf(nd.as_node(z)).value, ndtr(z), atol=0)


def test_pairwise_abs_diff_values():
    s = np.array([0.0, 1.0, 3.0])
    out = nd.pairwise_abs_diff(nd.as_node(s)).value
    assert np.array_equal(out, np.abs(s[:, None] - s[None, :]))
    with pytest.raises(ValueError, match="1-d"):
        nd.pairwise_abs_diff(nd.as_node(np.ones((2, 2))))


def test_reduce_mean_axis_tuple():
    x = np.arange(24.0).reshape(2, 3, 4)
    node = nd.reduce_mean(nd.as_node(x), axis=(0, 2))
    assert np.allclose(node.value, x.mean(axis=(0, 2)))
    assert nd.finite_diff_check(lambda n: nd.reduce_mean(n, axis=(0, 2)).sum(), x) < 1e-7


def test_concat_empty_rejected():
    with pytest.raises(ValueError, match="concat"):
        nd.concat([])


def test_finite_diff_check_validates():
    with pytest.raises(ValueError, match="h must be positive"):
        nd.finite_diff_check(lambda x: x.sum(), np.ones(2), h=0.0)
    with pytest.raises(ValueError, match="scalar"):
        nd.finite_diff_check(lambda x: x * 1.0, np.ones(2))


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_composite_gradient_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    w = nd.constant(rng.normal(size=(3, 2)))

    def f(leaf):
        h = nd.tanh(nd.matmul(leaf, w))
        return (nd.softplus(h) * nd.exp(-0.1 * h)).mean()

    assert nd.finite_diff_check(f, x) < 1e-5
