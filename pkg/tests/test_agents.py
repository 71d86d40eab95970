import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rationalpg import hograd as hg
from rationalpg.agents import (
    PolicyParams, CriticParams, AdvantageBatch, init_policy, policy_log_prob, entropy_bonus,
    gae_advantages, critic_update, critic_value_loss, normalize_advantages, discounted_returns,
    save_checkpoint, load_checkpoint,
)
from rationalpg.games import PayoffGame, sample_batch, make_rng
from rationalpg.hograd import ContractViolation


def test_log_prob_examples(backend):
    t = hg.new_tape()
    assert hg.value(policy_log_prob(t.leaves([0.0, 0.0]), 0, 0)) == pytest.approx(-0.693147, abs=1e-6)
    assert hg.value(policy_log_prob([math.log(3), 0.0], 0, 0)) == pytest.approx(math.log(0.75))
    xs = t.leaves([0.4, -0.2, 1.0])
    g = hg.grad(policy_log_prob(xs, 0, 1), xs)
    p = np.exp([0.4, -0.2, 1.0])
    p /= p.sum()
    assert g[1] == pytest.approx(1 - p[1])


def test_log_prob_errors():
    with pytest.raises(ContractViolation):
        policy_log_prob([0.0, 0.0], 0, 2)
    with pytest.raises(ContractViolation):
        policy_log_prob([0.0, 0.0], 1, 0)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=4), st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_log_probs_normalised_and_shift_invariant(logits, c):
    lp = [hg.value(policy_log_prob(logits, 0, a)) for a in range(len(logits))]
    assert abs(sum(math.exp(x) for x in lp) - 1) < 1e-12
    shifted = [hg.value(policy_log_prob([x + c for x in logits], 0, a))
               for a in range(len(logits))]
    assert np.allclose(lp, shifted, atol=1e-10)


def test_entropy_examples(backend):
    assert hg.value(entropy_bonus([0.0, 0.0, 0.0])) == pytest.approx(math.log(3))
    assert hg.value(entropy_bonus([40.0, 0.0])) < 1e-15
    assert hg.value(entropy_bonus([1.0, 0.0])) == pytest.approx(0.5822, abs=1e-4)
    r = hg.finite_diff_check(lambda t, xs: entropy_bonus(xs), [0.3, -0.7, 1.1])
    assert r.max_rel_error < 1e-6


def test_gae_examples():
    g = PayoffGame("one", [[1.0]], [[1.0]])
    b = sample_batch(g, [1.0], [1.0], 1, 0)
    assert gae_advantages(b, CriticParams("k", [0.0]), 0.95, 0.95).advantages[0, 0] == 1.0
    g3 = PayoffGame("three", [[1.0]], [[1.0]], horizon=3)
    b3 = sample_batch(g3, [1.0], [1.0], 1, 0)
    a = gae_advantages(b3, CriticParams("k", [0.0] * 3), 0.95, 0.95).advantages[0]
    assert a[0] == pytest.approx(1 + 0.9025 + 0.81450625)
    a = gae_advantages(b3, CriticParams("k", [0.2, 0.3, 0.4]), 0.0, 0.95).advantages[0]
    assert np.allclose(a, [0.8, 0.7, 0.6])


def test_gae_lambda_one_is_reward_to_go():
    g = PayoffGame("it", [[1.0, -1.0]], [[1.0, -1.0]], horizon=5, discount=0.9)
    b = sample_batch(g, [1.0], [0.5, 0.5], 20, make_rng(3))
    a = gae_advantages(b, CriticParams("k", [0.0] * 5), 0.9, 1.0).advantages
    assert np.allclose(a, discounted_returns(b.rewards[:, :, 0], 0.9), atol=1e-12)


def test_gae_critic_too_short():
    g = PayoffGame("it", [[1.0]], [[1.0]], horizon=3)
    with pytest.raises(ContractViolation):
        gae_advantages(sample_batch(g, [1.0], [1.0], 1, 0), CriticParams("k", [0.0]), 0.9, 0.9)


def test_critic_update_examples():
    g = PayoffGame("one", [[1.0]], [[1.0]])
    b = sample_batch(g, [1.0], [1.0], 1, 0)
    c, loss = critic_update(CriticParams("k", [0.0], lr=1.0, vf_coef=0.5), b, 0.95)
    assert c.values[0] == pytest.approx(0.5) and loss == pytest.approx(0.25)
    exact, loss0 = critic_update(CriticParams("k", [1.0], lr=1.0), b, 0.95)
    assert exact.values[0] == 1.0 and loss0 == 0.0
    empty = sample_batch(g, [1.0], [1.0], 0, 0)
    with pytest.raises(ContractViolation, match="no data for pairing"):
        critic_update(CriticParams("k", [0.0]), empty, 0.95)


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_critic_update_decreases_loss(seed):
    g = PayoffGame("it", [[1.0, -2.0], [0.5, 3.0]], [[1.0, -2.0], [0.5, 3.0]], horizon=3)
    b = sample_batch(g, [0.4, 0.6], [0.7, 0.3], 16, make_rng(seed))
    c = CriticParams("k", np.random.default_rng(seed).normal(size=3), lr=1e-3)
    new, before = critic_update(c, b, 0.95)
    assert critic_value_loss(new, b, 0.95) < before


def test_normalize_examples():
    out = normalize_advantages([AdvantageBatch([[2.0, 2.0, 2.0]], ())])
    assert np.allclose(out[0].advantages, 0)
    a, b = normalize_advantages([AdvantageBatch([[1.0, -1.0]], ()), AdvantageBatch([[3.0, -3.0]], ())])
    sd = math.sqrt(5)
    assert a.std == pytest.approx(sd) and b.std == pytest.approx(sd)
    assert np.allclose(b.advantages, [[3 / sd, -3 / sd]], atol=1e-8)
    assert normalize_advantages([AdvantageBatch([[7.0]], ())])[0].advantages[0, 0] == 0
    pa, pb = normalize_advantages([AdvantageBatch([[1.0, -1.0]], ()), AdvantageBatch([[3.0, -3.0]], ())],
                                  per_partner=True)
    assert np.allclose(pb.advantages, [[1, -1]], atol=1e-7)


@given(st.lists(st.lists(st.floats(-5, 5), min_size=1, max_size=6), min_size=1, max_size=3))
@settings(max_examples=50, deadline=None)
def test_normalize_pooled_moments(rows):
    out = normalize_advantages([AdvantageBatch([r], ()) for r in rows])
    pooled = np.concatenate([o.advantages.ravel() for o in out])
    assert abs(pooled.mean()) < 1e-6
    raw = np.concatenate([np.asarray(r) for r in rows])
    if raw.std() > 1e-3:
        assert abs(pooled.std() - 1) < 1e-6


def test_policy_params_and_checkpoint(tmp_path):
    rng = np.random.default_rng(0)
    p = init_policy("m", "manipulator", (0, 1), {0: 2, 1: 4}, rng, scale=0.5)
    assert p.seats == (0, 1) and len(p.flat()) == 6
    assert abs(p.probs(1).sum() - 1) < 1e-12
    q = p.with_flat(np.arange(6.0))
    assert q.logits[1].tolist() == [2.0, 3.0, 4.0, 5.0]
    path = save_checkpoint(p, tmp_path / "m.ckpt", step=7, game="appB_sabotage")
    back = load_checkpoint(path)
    assert back.agent_id == "m" and back.role == "manipulator"
    for s in (0, 1):
        assert np.array_equal(back.logits[s], p.logits[s])
    with pytest.raises(ContractViolation):
        PolicyParams("x", "king", {0: [0.0]})
    with pytest.raises(ContractViolation, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")
    (tmp_path / "bad.ckpt").write_text("[agent]\nagent_id = x\n")
    with pytest.raises(ContractViolation):
        load_checkpoint(tmp_path / "bad.ckpt")
