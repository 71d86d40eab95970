import dataclasses

import numpy as np
import pytest

from rationalpg import hograd as hg
from rationalpg.algorithms import AlgorithmSpec, build_graph, init_policies
from rationalpg.games import RolloutBatch, exact_utility, get_game
from rationalpg.hograd import ContractViolation, StaleDependencyError
from rationalpg.shaping import (
    Edge, LookaheadConfig, ObjectiveGraph, base_loss, exact_rpg_step, manipulator_gradients,
    manipulator_loss, objective_function, rpg_step, validate_graph,
)

FIG2 = get_game("fig2_coop")


def at_rpg(victim=(30.0, -30.0), adversary=(0.0, 0.0, 0.0), manip=(0.0, 0.0), seed=0):
    spec = AlgorithmSpec("AT_RPG")
    graph = build_graph(spec)
    pols = init_policies(spec, graph, FIG2, seed)
    for aid, seat, v in (("victim", 0, victim), ("adversary", 1, adversary),
                         ("adversary_m", 0, manip)):
        if v is not None:
            pols[aid] = dataclasses.replace(pols[aid], logits={seat: np.array(v, float)})
    return graph, pols


# ----------------------------------------------------------------------
# numpy oracle for the AT-RPG lookahead on the bilinear game

def _sm(z):
    z = np.exp(z - np.max(z))
    return z / z.sum()


def _dcol(R, p, y):
    q = _sm(y)
    v = R.T @ p
    return q * (v - q @ v)


def _drow(R, x, q):
    p = _sm(x)
    v = R @ q
    return p * (v - p @ v)


def oracle_objective(x, v, y, n, lr):
    """-U_victim after n simultaneous ascent steps of victim and adversary."""
    R = FIG2.payoff1
    for _ in range(n):
        gv = _drow(R, v, _sm(y))
        gy = _dcol(R, _sm(x), y)
        v, y = v + lr * gv, y + lr * gy
    return -(_sm(v) @ R @ _sm(y))


def oracle_grad(x, v, y, n, lr, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (oracle_objective(x + e, v, y, n, lr) - oracle_objective(x - e, v, y, n, lr)) / (2 * h)
    return g


@pytest.mark.parametrize("n", [1, 2, 4])
def test_manipulator_gradient_matches_nested_oracle(backend, n):
    rng = np.random.default_rng(n)
    v, y, x = rng.normal(0, 1, 2), rng.normal(0, 1, 3), rng.normal(0, 1, 2)
    graph, pols = at_rpg(v, y, x)
    cfg = LookaheadConfig(n=n)
    g = manipulator_gradients(graph, pols, cfg, FIG2)["adversary_m"]
    want = oracle_grad(x, v, y, n, cfg.lr("lookahead"))
    np.testing.assert_allclose(g, want, atol=1e-7)


def test_manipulator_pushes_adversary_toward_d_not_e():
    graph, pols = at_rpg()
    cfg = LookaheadConfig(n=1)
    g = manipulator_gradients(graph, pols, cfg, FIG2)["adversary_m"]
    # ascent raises B over A: the manipulator plays the row that makes D a best response
    assert g[1] > 0 > g[0]
    x0 = np.zeros(2)
    x1 = x0 + 0.1 * g / np.linalg.norm(g)
    lr = cfg.lr("lookahead")
    y = np.zeros(3)
    dq = _sm(y + lr * _dcol(FIG2.payoff1, _sm(x1), y)) - _sm(y + lr * _dcol(FIG2.payoff1, _sm(x0), y))
    assert dq[1] > 0
    assert dq[2] < dq[1]


def test_zero_lookahead_lr_gives_zero_manipulator_gradient(backend):
    graph, pols = at_rpg(None, (0.3, -0.1, 0.2), (0.5, -0.4), seed=3)
    g = manipulator_gradients(graph, pols, LookaheadConfig(n=2, lr_lookahead=0.0), FIG2)
    assert np.all(g["adversary_m"] == 0.0)


def test_partnerplay_weight_shrinks_manipulator_influence():
    graph0, pols = at_rpg(None, (0.3, -0.1, 0.2), (0.5, -0.4), seed=3)
    norms = []
    for eps in (0.0, 0.5, 0.9, 0.99, 0.999):
        graph = build_graph(AlgorithmSpec("AT_RPG"), partnerplay=eps)
        cfg = LookaheadConfig(n=1, partnerplay=eps)
        norms.append(np.linalg.norm(manipulator_gradients(graph, pols, cfg, FIG2)["adversary_m"]))
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.01 * norms[0]


def test_exact_and_sampled_gradients_agree():
    graph, pols = at_rpg(None, (0.3, -0.5, 0.1), (0.4, -0.2), seed=1)
    cfg = LookaheadConfig(n=1)
    exact = manipulator_gradients(graph, pols, cfg, FIG2)["adversary_m"]
    sampled = manipulator_gradients(graph, pols, cfg, FIG2, sampled=True, batch_size=10000,
                                    seed=5)["adversary_m"]
    cos = exact @ sampled / (np.linalg.norm(exact) * np.linalg.norm(sampled))
    assert cos > 0.9


def test_objective_function_fd_consistency():
    graph, pols = at_rpg(None, (0.2, 0.1, -0.3), (0.1, -0.2), seed=2)
    cfg = LookaheadConfig(n=2)
    f = objective_function(graph, pols, cfg, FIG2, "adversary_m")
    rep = hg.finite_diff_check(f, pols["adversary_m"].flat(), h=1e-5)
    assert rep.passed(1e-5)
    with pytest.raises(ContractViolation):
        objective_function(graph, pols, cfg, FIG2, "nobody")


# ----------------------------------------------------------------------
# steps

def test_all_learning_rates_zero_leave_parameters(backend):
    graph, pols = at_rpg(None, (0.3, -0.1, 0.2), (0.5, -0.4), seed=4)
    cfg = LookaheadConfig(n=2, lr_lookahead=0.0, lr_base=0.0, lr_manipulator=0.0)
    for res in (exact_rpg_step(graph, pols, cfg, FIG2),
                rpg_step(graph, pols, {}, cfg, FIG2, batch_size=64, seed=1)):
        for a, p in pols.items():
            np.testing.assert_array_equal(res.policies[a].flat(), p.flat())


def test_zero_manipulator_lr_fixes_manipulator():
    graph, pols = at_rpg(None, (0.3, -0.1, 0.2), (0.5, -0.4), seed=4)
    res = exact_rpg_step(graph, pols, LookaheadConfig(lr_manipulator=0.0), FIG2)
    np.testing.assert_array_equal(res.policies["adversary_m"].flat(), pols["adversary_m"].flat())
    # the base step is plain ascent on U(manipulator, adversary)
    x = pols["adversary_m"].probs(0)
    y = pols["adversary"].logits[1]
    want = y + LookaheadConfig().lr("base") * _dcol(FIG2.payoff1, x, y)
    np.testing.assert_allclose(res.policies["adversary"].logits[1], want, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_rationality_pressure(seed):
    rng = np.random.default_rng(seed)
    graph, pols = at_rpg(None, rng.normal(0, 0.1, 3), rng.normal(0, 1, 2), seed=seed)
    cfg = LookaheadConfig(lr_manipulator=0.0, lr_base=0.1)
    x = pols["adversary_m"].probs(0)
    br = max(x @ FIG2.payoff2)
    prev = -np.inf
    gap0 = br - exact_utility(FIG2, x, pols["adversary"].probs(1), 2)
    for _ in range(1000):
        u = exact_utility(FIG2, x, pols["adversary"].probs(1), 2)
        if br - u > 1e-6:
            assert u > prev
        prev = u
        pols = exact_rpg_step(graph, pols, cfg, FIG2).policies
    assert br - prev < 0.1 * gap0


def test_step_determinism():
    graph, pols = at_rpg(None, (0.3, -0.1, 0.2), (0.5, -0.4), seed=4)
    cfg = LookaheadConfig(n=2)
    a = rpg_step(graph, pols, {}, cfg, FIG2, batch_size=64, seed=9, step=3)
    b = rpg_step(graph, pols, {}, cfg, FIG2, batch_size=64, seed=9, step=3)
    for k in pols:
        np.testing.assert_array_equal(a.policies[k].flat(), b.policies[k].flat())
    assert a.metrics.rows == b.metrics.rows
    c = rpg_step(graph, pols, {}, cfg, FIG2, batch_size=64, seed=10, step=3)
    assert not np.array_equal(a.policies["adversary_m"].flat(), c.policies["adversary_m"].flat())


# ----------------------------------------------------------------------
# validation

def test_library_graph_valid():
    assert validate_graph(build_graph(AlgorithmSpec("AT_RPG"))) == []


def test_manipulator_edge_on_train_phase_reported():
    g = build_graph(AlgorithmSpec("AT_RPG"))
    edges = [dataclasses.replace(e, phase="train") if e.owner == "adversary_m" else e
             for e in g.edges]
    out = validate_graph(ObjectiveGraph(g.nodes, edges, g.name))
    assert any("not an evaluation edge" in v for v in out)


def test_frozen_victim_with_edge_reported():
    g = build_graph(AlgorithmSpec("AP_RPG", victim="unused.ckpt"))
    assert validate_graph(g) == []
    edges = g.edges + [Edge("victim", ("victim", "adversary"), 1.0)]
    out = validate_graph(ObjectiveGraph(g.nodes, edges, g.name))
    assert any("frozen node victim" in v for v in out)


def test_partnerplay_weights_validated():
    g = build_graph(AlgorithmSpec("AT_RPG"), partnerplay=0.1)
    assert validate_graph(g) == []
    edges = [dataclasses.replace(e, weight=0.5) if e.phase == "train" else e for e in g.edges]
    out = validate_graph(ObjectiveGraph(g.nodes, edges, g.name))
    assert any("train weight" in v for v in out)


def test_epsilon_zero_has_only_manipulator_terms():
    g = build_graph(AlgorithmSpec("AT_RPG"), partnerplay=0.0)
    mine = g.edges_of("adversary")
    assert [e.phase for e in mine] == ["train"]
    assert mine[0].weight == 1.0 and "adversary_m" in mine[0].pair


def test_config_bounds():
    with pytest.raises(ContractViolation):
        LookaheadConfig(n=0)
    with pytest.raises(ContractViolation):
        LookaheadConfig(partnerplay=1.0)
    with pytest.raises(ContractViolation):
        LookaheadConfig(optimizer="rmsprop")


# ----------------------------------------------------------------------
# surrogate losses

def one_step_batch(action, logits, n=1, weight=1.0):
    t = hg.new_tape()
    xs = t.leaves(logits)
    lp = hg.log_softmax(xs)
    actions = np.zeros((n, 1, 2), int)
    actions[:, 0, 0] = action
    return t, xs, RolloutBatch(("a", "b"), "train", actions, np.zeros((n, 1, 2)), (lp, None), weight)


def test_base_loss_single_step_example(backend):
    logits = [0.3, -0.2]
    t, xs, b = one_step_batch(0, logits)
    loss = base_loss([b], [np.ones((1, 1))], [0])
    p = _sm(np.array(logits))
    assert hg.value(loss) == pytest.approx(np.log(p[0]), abs=1e-12)
    g = hg.grad(loss, xs)
    assert g[0] == pytest.approx(1 - p[0], abs=1e-12)
    # finite-difference oracle
    h = 1e-6
    fd = (np.log(_sm(np.array([0.3 + h, -0.2]))[0]) - np.log(_sm(np.array([0.3 - h, -0.2]))[0])) / (2 * h)
    assert g[0] == pytest.approx(fd, abs=1e-8)


def test_base_loss_convex_weights_on_identical_data(backend):
    logits = [0.1, 0.4]
    _, xs, b = one_step_batch(1, logits)
    single = base_loss([b], [np.full((1, 1), 0.7)], [0])
    b9, b1 = dataclasses.replace(b, weight=0.9), dataclasses.replace(b, weight=0.1)
    mixed = base_loss([b9, b1], [np.full((1, 1), 0.7)] * 2, [0, 0])
    assert hg.value(mixed) == pytest.approx(hg.value(single), abs=1e-15)
    np.testing.assert_allclose(hg.grad(mixed, xs), hg.grad(single, xs), atol=1e-15)


def test_base_loss_missing_advantages():
    _, _, b = one_step_batch(0, [0.0, 0.0])
    with pytest.raises(ContractViolation):
        base_loss([b], [], [0])
    with pytest.raises(ContractViolation):
        base_loss([b], [np.ones((2, 1))], [0])


def _eval_batch(rng, n=50, T=3):
    t = hg.new_tape()
    x0, x1 = t.leaves(rng.normal(0, 1, 2)), t.leaves(rng.normal(0, 1, 3))
    lp = (hg.log_softmax(x0), hg.log_softmax(x1))
    actions = np.stack([rng.integers(0, 2, (n, T)), rng.integers(0, 3, (n, T))], axis=-1)
    b = RolloutBatch(("a", "b"), "evaluation", actions, np.zeros((n, T, 2)), lp, weight=0.6)
    return t, b


def test_manipulator_loss_forward_equals_plain_objective(backend):
    rng = np.random.default_rng(0)
    t, b = _eval_batch(rng)
    A = rng.normal(0, 1, (50, 3))
    val = hg.value(manipulator_loss([b], [A], gamma=0.9))
    want = 0.6 * sum(0.9 ** s * A[:, s].mean() for s in range(3))
    assert val == pytest.approx(want, abs=1e-12)


def test_manipulator_loss_stale_tape():
    rng = np.random.default_rng(1)
    t, b = _eval_batch(rng)
    t.close()
    with pytest.raises(StaleDependencyError):
        manipulator_loss([b], [np.ones((50, 3))])
