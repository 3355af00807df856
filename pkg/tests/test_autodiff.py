import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nofas import autodiff as ad
from nofas.autodiff import Tensor, backward, tape
from nofas.optim import RMSprop, exp_decay_scheduler, rmsprop_step

from oracles import central_diff, check_random_graph, grads_close


def test_add_values():
    np.testing.assert_array_equal(ad.forward_op("add", [[1, 2], [3, 4]]).data, [4, 6])


def test_exp_zero():
    assert ad.forward_op("exp", [[0.0]]).data.tolist() == [1.0]


def test_matmul_identity():
    v = np.array([0.3, -1.2, 7.0])
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ v).data, v)


def test_untraced_ops_create_no_node():
    out = Tensor([1.0]) + Tensor([2.0])
    assert out.node_id is None and not out.requires_grad


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])
    with pytest.raises(ad.ShapeError, match="matmul"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_log_domain_error():
    with pytest.raises(ad.DomainError):
        Tensor([1.0, 0.0]).log()


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown op kind"):
        ad.forward_op("pow", [1.0])


def test_grad_sum_of_squares():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with tape():
        root = w.square().sum()
    np.testing.assert_array_equal(backward(root)[w].data, [2, 4, 6])


def test_product_rule():
    a = Tensor(0.0, requires_grad=True)
    b = Tensor(2.0, requires_grad=True)
    with tape():
        root = a.exp() * b
    g = backward(root)
    assert g[a].item() == pytest.approx(2.0)
    assert g[b].item() == pytest.approx(1.0)


def test_non_scalar_root_rejected():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with tape():
        y = w * 2.0
    with pytest.raises(ValueError, match="scalar"):
        backward(y)


def test_reused_leaf_accumulates():
    x = Tensor(3.0, requires_grad=True)
    with tape():
        root = x * x + x
    assert backward(root)[x].item() == pytest.approx(7.0)


def test_relu_gradient_at_zero_is_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with tape():
        root = x.relu().sum()
    np.testing.assert_array_equal(backward(root)[x].data, [0.0, 0.0, 1.0])


def test_softmax_stable_for_large_logits():
    s = Tensor([1000.0, 1000.0, 0.0]).softmax()
    np.testing.assert_allclose(s.data, [0.5, 0.5, 0.0], atol=1e-300)


def test_unreached_leaf_gets_zero_gradient():
    a = Tensor(np.ones(4), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with tape():
        c = b * 1.0
        root = (a.sum() + 1.0)
    del c
    np.testing.assert_array_equal(backward(root)[a].data, np.ones(4))


def test_requires_active_tape():
    with pytest.raises(RuntimeError):
        Tensor(1.0, requires_grad=True) * 2.0


def test_leaf_reused_across_graphs():
    w = Tensor([1.0, -2.0], requires_grad=True)
    out = []
    for _ in range(2):
        with tape():
            root = (w * w * w).sum()
        out.append(backward(root)[w].data.copy())
    np.testing.assert_array_equal(out[0], out[1])


@pytest.mark.parametrize("kind", sorted(ad.OP_KINDS))
def test_each_op_matches_finite_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    x0 = rng.normal(size=(3, 4))
    y0 = rng.normal(size=(3, 4))

    def build(x, y):
        if kind in ("add", "sub", "mul", "elementwise-max"):
            return ad.forward_op(kind, [x, y])
        if kind == "div":
            return x / (y.square() + 1.0)
        if kind == "matmul":
            return x @ ad.concat([y, y], axis=0)[:4]
        if kind == "log":
            return (x.square() + 0.1).log() + 0.0 * y
        if kind in ("sum", "mean"):
            return ad.forward_op(kind, [x * y], axis=0)
        if kind == "softmax":
            return ad.forward_op(kind, [x * y], axis=1)
        if kind == "broadcast":
            return x[0].broadcast_to((5, 4)) * 1.0 + 0.0 * y.sum()
        if kind == "slice":
            return x[1:, ::2] * y[:2, 1:3]
        if kind == "concat":
            return ad.concat([x, y.exp()], axis=1)
        return ad.forward_op(kind, [x]) + y

    weights = rng.normal(size=build(Tensor(x0), Tensor(y0)).shape)

    def scalar(xv, yv):
        return float((build(Tensor(xv), Tensor(yv)).data * weights).sum())

    xt, yt = Tensor(x0.copy(), requires_grad=True), Tensor(y0.copy(), requires_grad=True)
    with tape():
        root = (build(xt, yt) * weights).sum()
    g = backward(root)
    assert grads_close(g[xt].data, central_diff(lambda v: scalar(v, y0), x0), 1e-5, 1e-8)
    assert grads_close(g[yt].data, central_diff(lambda v: scalar(x0, v), y0), 1e-5, 1e-8)


def test_randomized_graphs_match_finite_differences():
    rng = np.random.default_rng(7)
    assert all(check_random_graph(rng) for _ in range(40))


def test_backward_is_deterministic():
    build_rng = np.random.default_rng(3)
    x = build_rng.normal(size=(6, 5))

    def run():
        t = Tensor(x.copy(), requires_grad=True)
        with tape():
            root = (t @ t.tanh().data.T).softmax().log().sum()
        return backward(root)[t].data

    np.testing.assert_array_equal(run(), run())


# --- optimiser ------------------------------------------------------------

def _grads_for(params, values):
    with tape():
        root = sum(((p * v).sum() for p, v in zip(params, values)), Tensor(0.0))
    return backward(root)


def test_rmsprop_zero_gradient_leaves_params():
    p = Tensor([1.0, -3.0], requires_grad=True)
    state = [np.zeros(2)]
    rmsprop_step([p], _grads_for([p], [np.zeros(2)]), state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -3.0])


def test_rmsprop_single_step_arithmetic():
    p = Tensor(0.0, requires_grad=True)
    state = [np.zeros(())]
    rmsprop_step([p], _grads_for([p], [np.array(1.0)]), state, lr=0.1, rho=0.9, eps=0.0)
    assert state[0] == pytest.approx(0.1)
    assert p.item() == pytest.approx(-0.1 / np.sqrt(0.1))
    assert p.item() == pytest.approx(-0.316227766, abs=1e-9)


def test_rmsprop_constant_gradient_step_tends_to_lr():
    p = Tensor(0.0, requires_grad=True)
    state = [np.zeros(())]
    prev = 0.0
    for _ in range(2000):
        rmsprop_step([p], _grads_for([p], [np.array(2.5)]), state, lr=0.01, rho=0.9, eps=0.0)
        delta = p.item() - prev
        prev = p.item()
    assert abs(delta) == pytest.approx(0.01, rel=1e-9)


def test_rmsprop_missing_gradient():
    p, q = Tensor(1.0, requires_grad=True), Tensor(1.0, requires_grad=True)
    grads = _grads_for([p], [np.array(1.0)])
    with pytest.raises(KeyError):
        rmsprop_step([p, q], grads, [np.zeros(()), np.zeros(())], lr=0.1)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.5, 0.999), st.integers(0, 50))
def test_rmsprop_delta_scales_with_lr(lr, gamma, t):
    rng = np.random.default_rng(t)
    g = rng.normal(size=4)
    state0 = rng.uniform(0.1, 1.0, size=4)
    deltas = []
    for scale in (1.0, 2.0):
        p = Tensor(np.zeros(4), requires_grad=True)
        rmsprop_step([p], _grads_for([p], [g]), [state0.copy()],
                     lr=scale * exp_decay_scheduler(lr, gamma, t))
        deltas.append(p.data.copy())
    np.testing.assert_allclose(deltas[1], 2 * deltas[0], rtol=1e-12)


def test_scheduler_values():
    assert exp_decay_scheduler(0.03, 0.9995, 0) == 0.03
    assert exp_decay_scheduler(0.03, 0.9995, 1) == pytest.approx(0.029985, abs=1e-12)
    assert exp_decay_scheduler(0.7, 1.0, 12345) == 0.7


def test_optimizer_reset_schedule():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = RMSprop([p], lr=0.1, gamma=0.5)
    opt.step(_grads_for([p], [np.ones(2)]))
    assert opt.lr == pytest.approx(0.05)
    opt.reset_schedule()
    assert opt.lr == 0.1
