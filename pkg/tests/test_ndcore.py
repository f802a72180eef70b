import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from envtrack import ndcore as nd
from envtrack.ndcore import Tape, Tensor, backward, finite_diff_check


def weighted_sum(t: Tensor, seed: int = 99) -> Tensor:
    """Scalar probe with generic (nonzero) output gradients."""
    w = np.random.default_rng(seed).standard_normal(t.shape)
    return nd.total(nd.mul(t, Tensor(w)))


def grad_of(f, *arrays):
    with Tape() as tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = f(*leaves)
    g = backward(loss, tape)
    return loss, [g[x] for x in leaves]


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    b = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(nd.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_hand_arithmetic():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_gradient_of_sum_is_tight():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    err = finite_diff_check(lambda p: nd.total(nd.matmul(*p)), [a, b])
    assert err < 1e-8


def test_matmul_gradient_rules():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 4)), rng.standard_normal((4, 3))
    dc = rng.standard_normal((2, 3))
    _, (ga, gb) = grad_of(lambda x, y: nd.total(nd.mul(nd.matmul(x, y), Tensor(dc))), a, b)
    np.testing.assert_allclose(ga, dc @ b.T)
    np.testing.assert_allclose(gb, a.T @ dc)


# -- conv1d ------------------------------------------------------------------

def test_conv1d_hand_arithmetic():
    x = Tensor([[1.0, 2.0, 3.0, 4.0, 5.0]])
    out = nd.conv1d(x, Tensor([[[1.0, 1.0]]]), Tensor([0.0]), stride=1)
    np.testing.assert_array_equal(out.data, [[3.0, 5.0, 7.0, 9.0]])


def test_conv1d_is_cross_correlation():
    x = Tensor([[1.0, 2.0, 3.0]])
    out = nd.conv1d(x, Tensor([[[1.0, 0.0]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


@pytest.mark.parametrize("T, expected", [(640, 211), (320, 104)])
def test_conv1d_window_lengths(T, expected):
    x = Tensor(np.zeros((2, T)))
    out = nd.conv1d(x, Tensor(np.zeros((3, 2, 10))), Tensor(np.zeros(3)), stride=3)
    assert out.shape == (3, expected)
    assert nd.conv_output_length(T, 10, 3) == expected


def test_conv1d_length_formula_exhaustive():
    for T in range(1, 33):
        for K in range(1, T + 1):
            for s in range(1, K + 1):
                out = nd.conv1d(Tensor(np.ones((1, T))), Tensor(np.ones((1, 1, K))), Tensor([0.0]), s)
                assert out.shape[-1] == (T - K) // s + 1


def test_conv1d_rejects_short_input():
    with pytest.raises(ValueError):
        nd.conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 5))), Tensor([0.0]))


def test_conv1d_batched_matches_single():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 2, 20))
    k, b = Tensor(rng.standard_normal((4, 2, 5))), Tensor(rng.standard_normal(4))
    batched = nd.conv1d(Tensor(x), k, b, stride=2).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], nd.conv1d(Tensor(x[i]), k, b, stride=2).data)


def test_conv1d_against_numpy_correlate():
    rng = np.random.default_rng(3)
    x, k = rng.standard_normal(30), rng.standard_normal(4)
    out = nd.conv1d(Tensor(x[None]), Tensor(k[None, None]), Tensor([0.5]), stride=1).data[0]
    np.testing.assert_allclose(out, np.correlate(x, k, mode="valid") + 0.5)


# -- activations -------------------------------------------------------------

def test_activation_values():
    assert nd.activation(Tensor(0.0), "sigmoid").item() == 0.5
    assert nd.activation(Tensor(0.0), "tanh").item() == 0.0
    np.testing.assert_array_equal(nd.activation(Tensor([-1.0, 2.0]), "relu").data, [0.0, 2.0])


def test_sigmoid_saturates_without_overflow():
    out = nd.activation(Tensor([-800.0, 800.0]), "sigmoid").data
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_unknown_activation_rejected():
    with pytest.raises(ValueError):
        nd.activation(Tensor(1.0), "gelu")


# -- normalization -----------------------------------------------------------

def test_unit_normalize_examples():
    out = nd.unit_normalize_columns(Tensor([[3.0, 0.0], [4.0, 0.0]])).data
    np.testing.assert_allclose(out[:, 0], [0.6, 0.8])
    np.testing.assert_array_equal(out[:, 1], [0.0, 0.0])


def test_unit_normalize_gradient():
    m = np.random.default_rng(4).standard_normal((4, 5))
    err = finite_diff_check(lambda p: weighted_sum(nd.unit_normalize_columns(p[0])), [m])
    assert err < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6),
       st.floats(-8, 8))
def test_unit_normalize_norms(seed, d, n, log_scale):
    m = np.random.default_rng(seed).standard_normal((d, n)) * 10.0 ** log_scale
    out = nd.unit_normalize_columns(Tensor(m)).data
    in_norms = np.linalg.norm(m, axis=0)
    out_norms = np.linalg.norm(out, axis=0)
    big = in_norms > 1e-6
    assert np.all(np.abs(out_norms[big] - 1.0) < 1e-9)


# -- backward ----------------------------------------------------------------

def test_square_gradient():
    _, (g,) = grad_of(lambda w: nd.mul(w, w), np.array(3.0))
    assert g == 6.0


def test_constant_gradient_is_zero():
    with Tape() as tape:
        w = Tensor(2.0, requires_grad=True)
        c = nd.add(Tensor(5.0), Tensor(1.0))
    g = backward(c, tape)
    assert g[w] == 0.0


def test_fan_out_accumulates():
    # f = w*w + 3w  ->  f' = 2w + 3
    _, (g,) = grad_of(lambda w: nd.add(nd.mul(w, w), nd.mul(Tensor(3.0), w)), np.array(2.0))
    assert g == 7.0


def test_non_scalar_loss_rejected():
    with Tape() as tape:
        w = Tensor(np.ones(3), requires_grad=True)
        y = nd.mul(w, w)
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)


def test_backward_bitwise_deterministic():
    rng = np.random.default_rng(5)
    x, k, b = rng.standard_normal((2, 3, 40)), rng.standard_normal((4, 3, 5)), rng.standard_normal(4)

    def f(x, k, b):
        y = nd.activation(nd.conv1d(x, k, b, stride=3), "tanh")
        return weighted_sum(nd.unit_normalize_columns(y))

    _, g1 = grad_of(f, x, k, b)
    _, g2 = grad_of(f, x, k, b)
    for a, c in zip(g1, g2):
        assert a.tobytes() == c.tobytes()


def test_ops_reject_non_finite_results():
    with pytest.raises(FloatingPointError):
        nd.log(Tensor([0.0]))


def test_nothing_recorded_without_requires_grad():
    with Tape() as tape:
        nd.mul(Tensor(2.0), Tensor(3.0))
    assert len(tape) == 0


def test_tensors_are_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


# -- finite_diff_check -------------------------------------------------------

@pytest.mark.parametrize("h", [1e-1, 1e-3, 1e-5])
def test_quadratic_central_difference_exact(h):
    assert finite_diff_check(lambda p: nd.mul(p[0], p[0]), [np.array(3.0)], h=h) < 1e-9


def test_linear_has_zero_error():
    # a dyadic step keeps every intermediate exactly representable
    f = lambda p: nd.mul(Tensor(5.0), p[0])
    assert finite_diff_check(f, [np.array(1.5)], h=2.0 ** -16) == 0.0
    assert finite_diff_check(f, [np.array(1.5)]) < 1e-9


def test_fd_rejects_bad_step_and_nonfinite():
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: p[0], [np.array(1.0)], h=0.0)
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda p: nd.log(nd.clip(p[0], -1.0, 1.0)), [np.array(1e-6)], h=1e-3)


def test_fd_random_two_layer_net():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((5, 4)))
    w1, w2 = rng.standard_normal((4, 6)), rng.standard_normal((6, 1))

    def f(p):
        hidden = nd.activation(nd.matmul(x, p[0]), "tanh")
        return nd.mean(nd.activation(nd.matmul(hidden, p[1]), "sigmoid"))

    assert finite_diff_check(f, [w1, w2]) < 1e-4


# -- gradient property over many seeds ---------------------------------------

def _op_cases(rng):
    """(name, objective, parameter arrays) for each differentiable op."""
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    m, n = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))
    away = rng.uniform(0.1, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    x, k, bias = rng.standard_normal((2, 3, 17)), rng.standard_normal((4, 3, 5)), rng.standard_normal(4)
    pos = rng.uniform(0.5, 2.0, (3, 4))
    return [
        ("add", lambda p: weighted_sum(nd.add(p[0], p[1])), [a, b[:1]]),
        ("mul", lambda p: weighted_sum(nd.mul(p[0], p[1])), [a, b]),
        ("neg", lambda p: weighted_sum(nd.neg(p[0])), [a]),
        ("matmul", lambda p: weighted_sum(nd.matmul(p[0], p[1])), [m, n]),
        ("transpose", lambda p: weighted_sum(nd.transpose(p[0])), [m]),
        ("total", lambda p: weighted_sum(nd.total(p[0], axis=1)), [m]),
        ("mean", lambda p: nd.mean(nd.mul(p[0], p[0])), [a]),
        ("log", lambda p: weighted_sum(nd.log(p[0])), [pos]),
        ("clip", lambda p: weighted_sum(nd.clip(p[0], -0.05, 0.05)), [away]),
        ("sigmoid", lambda p: weighted_sum(nd.activation(p[0], "sigmoid")), [a]),
        ("tanh", lambda p: weighted_sum(nd.activation(p[0], "tanh")), [a]),
        ("relu", lambda p: weighted_sum(nd.activation(p[0], "relu")), [away]),
        ("conv1d", lambda p: weighted_sum(nd.conv1d(p[0], p[1], p[2], stride=2)), [x, k, bias]),
        ("normalize", lambda p: weighted_sum(nd.unit_normalize_columns(p[0])), [m]),
    ]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_every_op_matches_finite_differences(seed):
    for name, f, params in _op_cases(np.random.default_rng(seed)):
        err = finite_diff_check(f, params)
        assert err < 1e-4, (name, err)
