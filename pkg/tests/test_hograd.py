import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rationalpg import hograd as hg
from rationalpg.games import get_game, exact_utility

finite = st.floats(-3, 3, allow_nan=False)


def test_square_gradient(backend):
    t = hg.new_tape()
    x = t.leaf(3.0)
    assert hg.grad(x * x, [x])[0] == pytest.approx(6.0)


def test_cube_second_derivative(backend):
    t = hg.new_tape()
    x = t.leaf(2.0)
    (g,) = hg.grad(x * x * x, [x], create_graph=True)
    assert hg.value(g) == pytest.approx(12.0)
    assert hg.grad(g, [x])[0] == pytest.approx(12.0)


def test_softmax_gradient_at_origin(backend):
    t = hg.new_tape()
    xs = t.leaves([0.0, 0.0])
    assert hg.grad(hg.softmax(xs)[0], xs)[0] == pytest.approx(0.25, abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_nested_power_falling_factorial(backend, n):
    x0 = 1.3
    t = hg.new_tape()
    x = t.leaf(x0)
    y = x
    for _ in range(n - 1):
        y = y * x
    for k in range(1, 4):
        (y,) = hg.grad(y, [x], create_graph=True)
        coef = math.perm(n, k)
        expect = coef * x0 ** (n - k) if k <= n else 0.0
        assert hg.value(y) == pytest.approx(expect, abs=1e-9)
        if not hg.is_var(y):
            break


def test_non_scalar_root_rejected(backend):
    t = hg.new_tape()
    xs = t.leaves([1.0, 2.0])
    with pytest.raises(hg.ContractViolation):
        hg.grad(xs, xs)


def test_disconnected_leaf_is_flagged(backend):
    t = hg.new_tape()
    x, y = t.leaves([1.0, 2.0])
    g = hg.grad(x * 2.0, [x, y])
    assert list(g) == [2.0, 0.0]
    assert g.disconnected == (1,)
    assert g.any_disconnected


def test_other_tape_leaf_is_disconnected(backend):
    t1, t2 = hg.new_tape(), hg.new_tape()
    x = t1.leaf(1.0)
    z = t2.leaf(1.0)
    g = hg.grad(x * x, [x, z])
    assert g[1] == 0.0 and 1 in g.disconnected


def test_closed_tape_raises(backend):
    t = hg.new_tape()
    x = t.leaf(1.0)
    y = x * x
    t.close()
    with pytest.raises(hg.StaleDependencyError):
        hg.grad(y, [x])


def test_parents_precede_children(backend):
    t = hg.new_tape()
    x, y = t.leaves([0.5, -1.0])
    z = hg.exp(x * y) + hg.log(x) - y / x
    for i in range(len(t)):
        assert all(p < i for p in t.parents(i))
    assert t.op_tag(z.idx) == "sub"


def test_stop_gradient_examples(backend):
    t = hg.new_tape()
    x = t.leaf(3.0)
    assert hg.grad(hg.stop_gradient(x), [x])[0] == 0.0
    assert hg.grad(x * hg.stop_gradient(x), [x])[0] == pytest.approx(3.0)
    assert hg.value(hg.stop_gradient(t.leaf(1.7))) == 1.7


def test_stop_gradient_blocks_nested(backend):
    t = hg.new_tape()
    x = t.leaf(2.0)
    s = hg.stop_gradient(x * x)
    (g,) = hg.grad(s * x, [x], create_graph=True)
    assert hg.value(g) == pytest.approx(4.0)
    assert hg.grad(g, [x])[0] == 0.0


@given(finite)
@settings(max_examples=30, deadline=None)
def test_magic_box_forward_is_one(tau0):
    for b in hg.available_backends():
        with hg.use_backend(b):
            t = hg.new_tape()
            assert hg.value(hg.magic_box(t.leaf(tau0))) == 1.0


def test_magic_box_gradient_is_score(backend):
    t = hg.new_tape()
    th = t.leaves([0.0, 0.0])
    tau = hg.log_softmax(th)[0]
    assert hg.grad(hg.magic_box(tau), th)[0] == pytest.approx(0.5)
    c = 2.5
    g1 = hg.grad(hg.magic_box(tau) * c, th)
    g2 = hg.grad(tau, th)
    assert np.allclose(np.asarray(g1), c * np.asarray(g2))


@given(st.lists(finite, min_size=3, max_size=3), st.integers(0, 2), finite)
@settings(max_examples=30, deadline=None)
def test_dice_score_function_identity(theta, a, adv):
    t = hg.new_tape()
    xs = t.leaves(theta)
    tau = hg.log_softmax(xs)[a]
    g = np.asarray(hg.grad(hg.magic_box(tau) * hg.stop_gradient(t.const(adv)), xs))

    def f(tape, ys):
        return hg.log_softmax(ys)[a]

    fd = hg.finite_diff_check(f, theta)
    assert np.allclose(g, adv * np.asarray(fd.numeric), atol=1e-8)


def test_magic_box_second_order(backend):
    # d2/dth2 of box(tau) = d2tau + (dtau)^2 for the DiCE estimator
    t = hg.new_tape()
    x = t.leaf(0.4)
    tau = x * x
    (g,) = hg.grad(hg.magic_box(tau), [x], create_graph=True)
    assert hg.value(g) == pytest.approx(0.8)
    assert hg.grad(g, [x])[0] == pytest.approx(2.0 + 0.8 ** 2)


def test_sgd_examples(backend):
    st0 = hg.OptimizerState()
    p, s = hg.optimizer_step([1.0, 2.0], [1.0, -1.0], st0, 0.1)
    assert p == pytest.approx([1.1, 1.9])
    p, s = hg.optimizer_step([1.0, 2.0], [5.0, 5.0], st0, 0.0)
    assert p == [1.0, 2.0] and s == st0


def test_optimizer_shape_mismatch():
    with pytest.raises(hg.ContractViolation):
        hg.optimizer_step([1.0], [1.0, 2.0], hg.OptimizerState(), 0.1)
    with pytest.raises(hg.ContractViolation):
        hg.optimizer_step([1.0], [1.0], hg.OptimizerState(), -0.1)


def _adam_oracle(p, g, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mh = m / (1 - b1)
    vh = v / (1 - b2)
    return p + lr * mh / (math.sqrt(vh) + eps)


@pytest.mark.parametrize("g", [0.3, -2.0, 1e-4])
def test_adam_first_step_matches_oracle(backend, g):
    p, s = hg.optimizer_step([0.5], [g], hg.OptimizerState(kind="adam"), 0.01)
    assert p[0] == pytest.approx(_adam_oracle(0.5, g, 0.01), abs=1e-12)
    assert s.step == 1


def test_adam_two_steps_match_oracle():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    p, m, v = 1.0, 0.0, 0.0
    state = hg.OptimizerState(kind="adam")
    ours = [1.0]
    for t, g in enumerate([0.7, -0.2], 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p + lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        ours, state = hg.optimizer_step(ours, [g], state, lr)
    assert ours[0] == pytest.approx(p, abs=1e-12)


@given(st.lists(finite, min_size=2, max_size=4), st.floats(-5, 5), st.floats(0, 1))
@settings(max_examples=40, deadline=None)
def test_sgd_linear_in_grads(ps, alpha, lr):
    gs = [0.5 * i - 1 for i in range(len(ps))]
    st0 = hg.OptimizerState()
    a, _ = hg.optimizer_step(ps, [alpha * g for g in gs], st0, lr)
    b, _ = hg.optimizer_step(ps, gs, st0, lr)
    for x, y, p in zip(a, b, ps):
        assert x - p == pytest.approx(alpha * (y - p), abs=1e-9)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_gradient_flows_through_optimizer(backend, kind):
    # updated param of an inner quadratic, differentiated wrt an outer leaf
    def f(tape, xs):
        w, c = xs
        inner = tape.leaf(0.3)
        loss = -(inner - c) * (inner - c) * w
        (g,) = hg.grad(loss, [inner], create_graph=True)
        # Adam starts mid-run: a first Adam step is ~lr*sign(g), nearly flat in g
        state = hg.OptimizerState(kind=kind)
        if kind == "adam":
            state = hg.OptimizerState(kind="adam", step=3, m=[0.2], v=[0.05])
        (new,), _ = hg.optimizer_step([inner], [g], state, 0.1)
        return new * new

    r = hg.finite_diff_check(f, [0.8, 1.2])
    assert max(abs(a) for a in r.analytic) > 0
    assert r.max_rel_error < 1e-5


def test_finite_diff_quadratic(backend):
    r = hg.finite_diff_check(lambda t, xs: xs[0] * xs[0] * 3.0 + xs[0] * xs[1],
                             [0.7, -1.1], h=1e-5)
    assert r.max_rel_error < 1e-6


def test_finite_diff_fig2_utility(backend):
    game = get_game("fig2_coop")
    r = hg.finite_diff_check(
        lambda t, xs: exact_utility(game, hg.softmax(xs), [0.1, 0.6, 0.3], 1), [0.4, -0.3])
    assert r.max_rel_error < 1e-5


def test_finite_diff_reports_stop_gradient_discrepancy(backend):
    r = hg.finite_diff_check(lambda t, xs: xs[0] * hg.stop_gradient(xs[0]), [2.0])
    assert r.max_rel_error > 0.1
    assert r.analytic[0] == pytest.approx(2.0) and r.numeric[0] == pytest.approx(4.0)


def test_finite_diff_non_finite(backend):
    with pytest.raises(hg.NumericalError):
        hg.finite_diff_check(lambda t, xs: hg.log(xs[0]), [-1.0])
    with pytest.raises(hg.ContractViolation):
        hg.finite_diff_check(lambda t, xs: xs[0], [1.0], h=0)


def test_clip_by_global_norm():
    g, n = hg.clip_by_global_norm([3.0, 4.0], 0.5)
    assert n == pytest.approx(5.0)
    assert g == pytest.approx([0.3, 0.4])
    g, n = hg.clip_by_global_norm([0.1, 0.1], 0.5)
    assert g == pytest.approx([0.1, 0.1])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=5))
@settings(max_examples=50, deadline=None)
def test_softmax_sums_to_one_and_logsumexp(xs):
    p = hg.values(hg.softmax(list(xs)))
    assert sum(p) == pytest.approx(1.0)
    assert hg.value(hg.logsumexp(list(xs))) == pytest.approx(
        max(xs) + math.log(sum(math.exp(x - max(xs)) for x in xs)))


@given(st.lists(st.floats(-2, 2), min_size=2, max_size=4), st.floats(0.1, 2.0))
@settings(max_examples=25, deadline=None)
def test_backends_agree(xs, c):
    results = []
    for b in hg.available_backends():
        with hg.use_backend(b):
            t = hg.new_tape()
            v = t.leaves(xs)
            y = hg.logsumexp([x * c for x in v]) + hg.sqrt(v[0] * v[0] + 1.0) / (v[1] + 3.0)
            g = hg.grad(y, v, create_graph=True)
            h = hg.grad(hg.vsum(g), v)
            results.append((hg.value(y), list(hg.values(g)), list(h)))
    for r in results[1:]:
        assert r[0] == pytest.approx(results[0][0], abs=1e-12)
        assert np.allclose(r[1], results[0][1], atol=1e-12)
        assert np.allclose(r[2], results[0][2], atol=1e-10)


def test_backend_switching():
    assert hg.active_backend() in hg.available_backends()
    with pytest.raises(hg.ContractViolation):
        hg.set_backend("nope")
