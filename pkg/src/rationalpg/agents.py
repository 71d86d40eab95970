"""Tabular softmax policies, critics and advantage estimation."""

import configparser
from dataclasses import dataclass, field, replace

import numpy as np

from . import hograd as hg
from .hograd import ContractViolation, OptimizerState

SEAT_NAMES = ("row", "col")
ROLES = ("base", "manipulator")


@dataclass
class PolicyParams:
    """Softmax policy of one agent, with one logit vector per seat it plays.

    Matrix games have a single observation, so each seat holds one vector.
    """

    agent_id: str
    role: str
    logits: dict
    trainable: bool = True
    optimizer: OptimizerState = field(default_factory=OptimizerState)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractViolation("role must be 'base' or 'manipulator'")
        clean = {}
        for seat, v in self.logits.items():
            if seat not in (0, 1):
                raise ContractViolation("seat must be 0 (row) or 1 (col)")
            clean[seat] = np.array(v, dtype=float)
        self.logits = clean

    @property
    def seats(self):
        return tuple(sorted(self.logits))

    def probs(self, seat):
        return np.asarray(hg.values(hg.softmax(list(self.logits[seat]))))

    def flat(self):
        return np.concatenate([self.logits[s] for s in self.seats])

    def with_flat(self, flat):
        flat = np.asarray(flat, float)
        out, i = {}, 0
        for s in self.seats:
            n = len(self.logits[s])
            out[s] = flat[i:i + n]
            i += n
        return replace(self, logits=out)

    def copy(self):
        return replace(self, logits={s: v.copy() for s, v in self.logits.items()},
                       optimizer=self.optimizer.detached())


def init_policy(agent_id, role, seats, n_actions, rng, scale=0.01, trainable=True,
                optimizer="sgd"):
    """Random logits ~ N(0, scale^2) for each seat.

    ``n_actions`` maps seat to action count.
    """
    logits = {s: rng.normal(0.0, scale, size=n_actions[s]) for s in seats}
    return PolicyParams(agent_id, role, logits, trainable, OptimizerState(kind=optimizer))


def policy_log_prob(logits, observation, action):
    """log softmax(logits)[action]; differentiable for tape logits."""
    if observation != 0:
        raise ContractViolation("matrix-game policies have a single observation")
    if not 0 <= action < len(logits):
        raise ContractViolation("invalid action %r" % (action,))
    return hg.log_softmax(list(logits))[action]


def entropy_bonus(logits, observation=0):
    """Shannon entropy of softmax(logits) in nats."""
    if observation != 0:
        raise ContractViolation("matrix-game policies have a single observation")
    return hg.entropy(list(logits))


@dataclass
class CriticParams:
    """Tabular value estimate per timestep for one ordered pairing and payoff seat."""

    key: tuple
    values: np.ndarray
    lr: float = 0.5
    vf_coef: float = 0.5

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ContractViolation("critic table must be finite")


@dataclass
class AdvantageBatch:
    """Per-episode, per-step advantages for one pairing.

    ``mean`` and ``std`` record the normalisation applied (0 and 1 when raw).
    """

    advantages: np.ndarray
    pairing: tuple
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        self.advantages = np.atleast_2d(np.asarray(self.advantages, dtype=float))


def _rewards(batch_or_traj, seat):
    """(episodes, horizon) rewards for ``seat`` from a batch or trajectories."""
    if hasattr(batch_or_traj, "rewards"):
        return np.asarray(batch_or_traj.rewards[:, :, seat], float)
    trajs = batch_or_traj if isinstance(batch_or_traj, (list, tuple)) else [batch_or_traj]
    return np.array([[s.rewards[seat] for s in tr.steps] for tr in trajs], float)


def _pairing(batch_or_traj):
    if isinstance(batch_or_traj, (list, tuple)):
        return batch_or_traj[0].pairing if batch_or_traj else ()
    return batch_or_traj.pairing


def gae_advantages(trajectory, critic, gamma, lam, seat=0):
    """Generalised advantage estimates with terminal value 0.

    ``trajectory`` may be a Trajectory, a list of them or a RolloutBatch.
    """
    r = _rewards(trajectory, seat)
    T = r.shape[1]
    V = np.asarray(critic.values, float)
    if V.shape[0] < T:
        raise ContractViolation("critic covers %d steps, trajectory has %d" % (V.shape[0], T))
    adv = np.zeros_like(r)
    nxt = np.zeros(r.shape[0])
    for t in range(T - 1, -1, -1):
        v_next = V[t + 1] if t + 1 < T else 0.0
        delta = r[:, t] + gamma * v_next - V[t]
        nxt = delta + gamma * lam * nxt
        adv[:, t] = nxt
    return AdvantageBatch(adv, _pairing(trajectory))


def discounted_returns(rewards, gamma):
    r = np.asarray(rewards, float)
    out = np.zeros_like(r)
    acc = np.zeros(r.shape[0])
    for t in range(r.shape[1] - 1, -1, -1):
        acc = r[:, t] + gamma * acc
        out[:, t] = acc
    return out


def critic_value_loss(critic, trajectories, gamma, seat=0):
    G = discounted_returns(_rewards(trajectories, seat), gamma)
    if G.size == 0:
        raise ContractViolation("no data for pairing %r" % (critic.key,))
    err = critic.values[None, :G.shape[1]] - G
    return critic.vf_coef * 0.5 * float(np.mean(np.sum(err ** 2, axis=1)))


def critic_update(critic, trajectories, gamma, seat=0):
    """One gradient step on vf_coef * 0.5 * squared error to discounted returns.

    Returns the new critic and the value loss before the step. Runs off-tape.
    """
    G = discounted_returns(_rewards(trajectories, seat), gamma)
    if G.size == 0:
        raise ContractViolation("no data for pairing %r" % (critic.key,))
    T = G.shape[1]
    err = critic.values[None, :T] - G
    loss = critic.vf_coef * 0.5 * float(np.mean(np.sum(err ** 2, axis=1)))
    grad = np.zeros_like(critic.values)
    grad[:T] = critic.vf_coef * err.mean(axis=0)
    return replace(critic, values=critic.values - critic.lr * grad), loss


def normalize_advantages(batches, groups=None, per_partner=False, eps=1e-8):
    """Standardise advantages, pooling all batches of one agent.

    ``groups`` maps a group name to indices into ``batches``; by default all
    batches form one group. With ``per_partner`` each batch is standardised
    on its own.
    """
    batches = list(batches)
    if groups is None:
        groups = {"all": list(range(len(batches)))}
    out = list(batches)
    for name, idx in groups.items():
        idx = list(idx)
        if not idx:
            raise ContractViolation("no advantages for group %r" % (name,))
        sets = [[i] for i in idx] if per_partner else [idx]
        for members in sets:
            pooled = np.concatenate([batches[i].advantages.ravel() for i in members])
            if pooled.size == 0:
                raise ContractViolation("no advantages for group %r" % (name,))
            mu = float(pooled.mean())
            sd = float(pooled.std())
            for i in members:
                b = batches[i]
                out[i] = replace(b, advantages=(b.advantages - mu) / (sd + eps),
                                 mean=mu, std=sd)
    return out


CHECKPOINT_VERSION = "1"


def save_checkpoint(policy, path, step=None, game=None):
    """Write a plain-text checkpoint (INI) for one agent."""
    cp = configparser.ConfigParser()
    head = {"version": CHECKPOINT_VERSION, "agent_id": policy.agent_id,
            "role": policy.role, "trainable": str(bool(policy.trainable)).lower()}
    if step is not None:
        head["step"] = str(int(step))
    if game is not None:
        head["game"] = game
    cp["agent"] = head
    for s in policy.seats:
        cp["seat.%s" % SEAT_NAMES[s]] = {
            "logits": " ".join(repr(float(x)) for x in policy.logits[s])}
    with open(path, "w") as fh:
        cp.write(fh)
    return path


def load_checkpoint(path):
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ContractViolation("checkpoint not found: %s" % path) from None
    except configparser.Error as exc:
        raise ContractViolation("cannot parse checkpoint %s: %s" % (path, exc)) from None
    if "agent" not in cp:
        raise ContractViolation("%s: missing [agent] section" % path)
    head = cp["agent"]
    logits = {}
    for s, name in enumerate(SEAT_NAMES):
        sec = "seat.%s" % name
        if sec in cp:
            try:
                logits[s] = [float(x) for x in cp[sec]["logits"].split()]
            except (KeyError, ValueError) as exc:
                raise ContractViolation("%s: bad logits in [%s]: %s" % (path, sec, exc)) from None
    if not logits:
        raise ContractViolation("%s: no seat sections" % path)
    return PolicyParams(head.get("agent_id", "agent"), head.get("role", "base"), logits,
                        head.getboolean("trainable", True))


def entropy_of(probs):
    p = np.asarray(probs, float)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum()) if p.size else 0.0


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())

