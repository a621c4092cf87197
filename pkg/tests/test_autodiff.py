import numpy as np
import pytest

import selfguide.autodiff as ad
from selfguide.rng import SeededRng

from conftest import fd_grad, rel_err


def test_identity_linear_map_transpose():
    A = np.eye(2)
    x = ad.leaf(np.array([0.7, -1.3]), name="x")
    y = ad.matmul(A, x)
    grads = ad.vjp(y, np.array([1.0, 0.0]))
    np.testing.assert_allclose(grads[x], [1.0, 0.0], atol=0)


def test_gelu_derivative_at_zero():
    x = ad.leaf(np.array([0.0]))
    y = ad.gelu(x)
    grads = ad.vjp(y, np.array([1.0]))
    # gelu'(0) = Phi(0) = 0.5 exactly
    assert grads[x][0] == pytest.approx(0.5, abs=1e-15)


def _scalar(fn, x_val):
    """Wrap fn so it maps a plain array to a plain scalar via the graph."""
    def f(x):
        v = ad.leaf(x, name="x")
        out = fn(v)
        return float(ad.value_of(ad.reduce_sum(out)))
    return f


PRIMITIVES = {
    "add": lambda v: ad.add(v, np.array([0.3, -0.4, 1.1])),
    "add_broadcast": lambda v: ad.add(v, np.array([0.5])),
    "sub": lambda v: ad.sub(np.array([1.0, 2.0, 3.0]), v),
    "mul": lambda v: ad.mul(v, np.array([1.5, -2.0, 0.7])),
    "div_num": lambda v: ad.div(v, np.array([1.2, -1.7, 2.3])),
    "div_den": lambda v: ad.div(np.array([0.4, 1.8, -0.9]), v),
    "gelu": ad.gelu,
    "exp": ad.exp,
    "mean": lambda v: ad.reduce_mean(ad.mul(v, v)),
    "slice": lambda v: ad.mul(ad.slice_cols(v, 1, 3), 2.0),
    "concat": lambda v: ad.concat([v, ad.mul(v, -0.5)], axis=-1),
    "floor": lambda v: ad.maximum_floor(v, -0.5),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    rng = SeededRng(101, stream=hash(name) % 2**32)
    x = rng.uniform((3,)) * 4.0 - 2.0  # in [-2, 2]
    if name == "floor":
        # keep away from the kink at the floor
        x = np.where(np.abs(x + 0.5) < 0.1, x + 0.3, x)
    if name == "div_den":
        x = np.where(np.abs(x) < 0.3, x + 1.0, x)
    fn = PRIMITIVES[name]

    v = ad.leaf(x, name="x")
    out = ad.reduce_sum(fn(v))
    g = ad.vjp(out)[v]
    g_fd = fd_grad(_scalar(fn, x), x)
    assert rel_err(g, g_fd) < 1e-5


def test_log_matches_finite_differences():
    x = np.array([0.3, 1.1, 1.9])
    v = ad.leaf(x)
    g = ad.vjp(ad.reduce_sum(ad.log(v)))[v]
    g_fd = fd_grad(_scalar(ad.log, x), x)
    assert rel_err(g, g_fd) < 1e-5


def test_relu_matches_finite_differences_off_kink():
    x = np.array([-1.4, -0.5, 0.6, 1.7])
    v = ad.leaf(x)
    g = ad.vjp(ad.reduce_sum(ad.relu(v)))[v]
    g_fd = fd_grad(_scalar(ad.relu, x), x)
    assert rel_err(g, g_fd) < 1e-5


def test_matmul_both_sides_match_finite_differences():
    rng = SeededRng(7)
    A = rng.uniform((4, 3)) * 2 - 1
    B = rng.uniform((3, 5)) * 2 - 1
    cot = rng.uniform((4, 5))

    vA = ad.leaf(A, name="A")
    g = ad.vjp(ad.matmul(vA, B), cot)[vA]
    g_fd = fd_grad(lambda a: float(np.sum((a @ B) * cot)), A.copy())
    assert rel_err(g, g_fd) < 1e-5

    vB = ad.leaf(B, name="B")
    g = ad.vjp(ad.matmul(A, vB), cot)[vB]
    g_fd = fd_grad(lambda b: float(np.sum((A @ b) * cot)), B.copy())
    assert rel_err(g, g_fd) < 1e-5


def test_layer_norm_matches_finite_differences():
    rng = SeededRng(21)
    x = rng.uniform((4, 6)) * 4 - 2
    gain = rng.uniform((6,)) + 0.5
    bias = rng.uniform((6,)) - 0.5
    cot = rng.uniform((4, 6))

    for arg, args in (("x", 0), ("gain", 1), ("bias", 2)):
        vals = [x.copy(), gain.copy(), bias.copy()]
        v = ad.leaf(vals[args], name=arg)
        lifted = list(vals)
        lifted[args] = v
        out = ad.layer_norm(lifted[0], lifted[1], lifted[2])
        g = ad.vjp(out, cot)[v]

        def f(a, idx=args):
            vv = [x, gain, bias]
            vv[idx] = a
            return float(np.sum(ad.layer_norm(vv[0], vv[1], vv[2]) * cot))

        g_fd = fd_grad(f, vals[args])
        assert rel_err(g, g_fd) < 1e-5, arg


def test_six_layer_network_input_gradient():
    """Deep composition of primitives vs central differences at h = 1e-5."""
    rng = SeededRng(33)
    dims = [5, 8, 8, 8, 8, 8, 4]
    Ws = [rng.uniform((dims[i], dims[i + 1])) * 0.8 - 0.4 for i in range(6)]
    bs = [rng.uniform((dims[i + 1],)) * 0.2 - 0.1 for i in range(6)]
    cot = rng.uniform((2, 4))

    def net(x):
        h = x
        for W, b in zip(Ws, bs):
            h = ad.gelu(ad.add(ad.matmul(h, W), b))
        return h

    x = rng.uniform((2, 5)) * 4 - 2
    v = ad.leaf(x, name="input")
    g = ad.vjp(net(v), cot)[v]
    g_fd = fd_grad(lambda a: float(np.sum(ad.value_of(net(a)) * cot)), x.copy())
    assert rel_err(g, g_fd) < 1e-5


def test_random_three_op_chains_compose():
    """Chain rule on random 3-op chains agrees with finite differences."""
    unary = [ad.gelu, ad.exp, lambda v: ad.mul(v, 1.7),
             lambda v: ad.add(v, 0.3), lambda v: ad.maximum_floor(v, -3.0)]
    rng = SeededRng(55)
    for trial in range(8):
        idx = rng.integers(0, len(unary), (3,))
        chain = [unary[int(i)] for i in idx]

        def f(v):
            out = v
            for op in chain:
                out = op(out)
            return out

        x = rng.uniform((4,)) * 2 - 1
        v = ad.leaf(x)
        g = ad.vjp(ad.reduce_sum(f(v)))[v]
        g_fd = fd_grad(_scalar(f, x), x)
        assert rel_err(g, g_fd) < 1e-5


def test_plain_arrays_stay_plain():
    a = np.ones(3)
    out = ad.gelu(ad.add(a, a))
    assert isinstance(out, np.ndarray)


def test_stop_gradient_detaches():
    x = ad.leaf(np.array([1.0, 2.0]))
    y = ad.mul(ad.stop_gradient(ad.mul(x, 3.0)), x)
    g = ad.vjp(ad.reduce_sum(y))[x]
    np.testing.assert_allclose(g, [3.0, 6.0])  # only the outer factor
    assert isinstance(ad.stop_gradient(x), np.ndarray)


def test_shape_mismatch_names_node():
    A = np.ones((2, 3))
    B = np.ones((2, 3))
    with pytest.raises(ad.GraphError, match="badmatmul"):
        ad.matmul(ad.leaf(A), B, name="badmatmul")


def test_vjp_cotangent_shape_checked():
    x = ad.leaf(np.ones(3), name="x3")
    y = ad.mul(x, 2.0, name="double")
    with pytest.raises(ad.GraphError, match="double"):
        ad.vjp(y, np.ones(4))
    with pytest.raises(ad.GraphError, match="double"):
        ad.vjp(y)  # non-scalar without cotangent


def test_grad_accumulates_on_reuse():
    x = ad.leaf(np.array([2.0]))
    y = ad.add(ad.mul(x, x), ad.mul(x, 3.0))  # x^2 + 3x -> 2x + 3 = 7
    g = ad.vjp(ad.reduce_sum(y))[x]
    assert g[0] == pytest.approx(7.0, rel=1e-12)
