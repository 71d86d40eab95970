"""Objective graphs, surrogate losses and the lookahead shaping update.

Every objective is written to be maximised. A base agent ascends its own
reward against its manipulator (plus partner-play); a manipulator ascends
its adversarial objective by differentiating through the base agents'
on-tape lookahead updates.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import hograd as hg
from .hograd import ContractViolation, NumericalError, StaleDependencyError
from .agents import (
    AdvantageBatch, CriticParams, critic_update, gae_advantages, normalize_advantages,
    SEAT_NAMES,
)
from .games import exact_utility, sample_batch, make_rng

PHASES = ("train", "partnerplay", "eval")


@dataclass(frozen=True)
class Node:
    """An agent in the graph.

    ``target`` names the base agent a manipulator shapes. ``lookahead``
    marks base agents that take on-tape lookahead steps.
    """

    agent_id: str
    role: str
    trainable: bool = True
    seats: tuple = (0,)
    target: str = None
    lookahead: bool = True


@dataclass(frozen=True)
class Edge:
    """Objective term: ``owner`` maximises weight * U(pair).

    ``pair`` is (row agent, col agent). ``reward_of`` is the seat whose
    payoff counts; None means the payoff of whichever seat is being
    trained. ``grad_seats`` restricts which of the owner's seats the term
    trains. With ``seating="both"`` the term averages the two seat
    assignments of the pair.
    """

    owner: str
    pair: tuple
    weight: float
    reward_of: int = None
    phase: str = "eval"
    grad_seats: tuple = None
    seating: str = "fixed"

    @property
    def edge_id(self):
        r = "own" if self.reward_of is None else SEAT_NAMES[self.reward_of]
        sep = "~" if self.seating == "both" else "|"
        return "%s:%s:%s%s%s:%s" % (self.owner, self.phase, self.pair[0], sep, self.pair[1], r)

    def terms(self):
        """(row, col) pairings with their weights."""
        a, b = self.pair
        if self.seating == "both":
            if a == b:
                return [((a, b), self.weight)]
            return [((a, b), 0.5 * self.weight), ((b, a), 0.5 * self.weight)]
        return [((a, b), self.weight)]

    def owner_seats(self, pair=None):
        pair = self.pair if pair is None else pair
        seats = tuple(s for s in (0, 1) if pair[s] == self.owner)
        if self.grad_seats is not None:
            seats = tuple(s for s in seats if s in self.grad_seats)
        return seats

    def all_owner_seats(self):
        return tuple(sorted({s for p, _ in self.terms() for s in self.owner_seats(p)}))


@dataclass
class ObjectiveGraph:
    nodes: list
    edges: list
    name: str = ""

    def node(self, agent_id):
        for n in self.nodes:
            if n.agent_id == agent_id:
                return n
        raise KeyError(agent_id)

    @property
    def ids(self):
        return [n.agent_id for n in self.nodes]

    def edges_of(self, owner):
        return [e for e in self.edges if e.owner == owner]

    @property
    def base_nodes(self):
        return [n for n in self.nodes if n.role == "base"]

    @property
    def manipulator_nodes(self):
        return [n for n in self.nodes if n.role == "manipulator"]

    def manipulator_of(self, base_id):
        for n in self.manipulator_nodes:
            if n.target == base_id:
                return n
        return None

    def pairings(self):
        out = []
        for e in self.edges:
            for pair, _ in e.terms():
                if tuple(pair) not in out:
                    out.append(tuple(pair))
        return out


@dataclass
class LookaheadConfig:
    """Hyperparameters of one shaping update.

    The learning-rate fields hold the matrix-game table values; every
    effective step is multiplied by ``lr_scale`` (see README, tabular
    logits).
    """

    n: int = 1
    lr_lookahead: float = 1e-1
    lr_base: float = 1e-2
    lr_manipulator: float = 1e-2
    max_grad_norm: float = 0.5
    partnerplay: float = 0.0
    dice_lambda: float = 0.95
    lr_scale: float = 10.0
    gamma: float = 0.95
    gae_lambda: float = 0.95
    entropy_coef: float = 0.0
    vf_coef: float = 0.5
    critic_lr: float = 0.5
    normalize: bool = True
    per_partner_norm: bool = False
    dice_mode: str = "loaded"
    optimizer: str = "sgd"

    def __post_init__(self):
        if int(self.n) < 1:
            raise ContractViolation("lookahead steps must be >= 1")
        for f in ("lr_lookahead", "lr_base", "lr_manipulator", "lr_scale", "critic_lr"):
            if getattr(self, f) < 0:
                raise ContractViolation("%s must be non-negative" % f)
        if not 0.0 <= self.partnerplay < 1.0:
            raise ContractViolation("partner-play weight must lie in [0, 1)")
        if self.dice_mode not in ("loaded", "raw"):
            raise ContractViolation("dice_mode must be 'loaded' or 'raw'")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation("optimizer must be 'sgd' or 'adam'")

    def lr(self, which):
        return getattr(self, "lr_" + which) * self.lr_scale


def validate_graph(graph, tol=1e-9):
    """Return a list of invariant violations (empty when valid)."""
    out = []
    ids = [n.agent_id for n in graph.nodes]
    if len(set(ids)) != len(ids):
        out.append("duplicate agent ids")
    nodes = {n.agent_id: n for n in graph.nodes}
    for e in graph.edges:
        if e.owner not in nodes:
            out.append("edge %s: unknown owner" % e.edge_id)
            continue
        if any(p not in nodes for p in e.pair):
            out.append("edge %s: unknown agent in pair" % e.edge_id)
            continue
        if e.phase not in PHASES:
            out.append("edge %s: unknown phase %r" % (e.edge_id, e.phase))
        if e.reward_of not in (None, 0, 1):
            out.append("edge %s: reward_of must be a seat or None" % e.edge_id)
        if e.seating not in ("fixed", "both"):
            out.append("edge %s: unknown seating %r" % (e.edge_id, e.seating))
        if not math.isfinite(e.weight):
            out.append("edge %s: non-finite weight" % e.edge_id)
        for pair, _ in e.terms():
            for s in (0, 1):
                if s not in nodes[pair[s]].seats:
                    out.append("edge %s: %s does not play seat %s"
                               % (e.edge_id, pair[s], SEAT_NAMES[s]))
        owner = nodes[e.owner]
        if not owner.trainable:
            out.append("frozen node %s has outgoing edge %s" % (e.owner, e.edge_id))
        if owner.role == "manipulator":
            if e.phase != "eval":
                out.append("manipulator edge %s is not an evaluation edge" % e.edge_id)
            if any(nodes[p].role != "base" for p in e.pair):
                out.append("manipulator edge %s pairs non-base agents" % e.edge_id)
            if e.reward_of is None:
                out.append("manipulator edge %s needs an explicit reward seat" % e.edge_id)
        elif not e.all_owner_seats():
            out.append("base edge %s trains none of its owner's seats" % e.edge_id)
    for n in graph.nodes:
        if n.trainable and not graph.edges_of(n.agent_id):
            out.append("trainable node %s has no outgoing edge" % n.agent_id)
        if n.role == "manipulator":
            if n.target not in nodes or nodes[n.target].role != "base":
                out.append("manipulator %s has no base target" % n.agent_id)
    for n in graph.base_nodes:
        m = graph.manipulator_of(n.agent_id)
        mine = graph.edges_of(n.agent_id)
        if m is None:
            if any(e.phase in ("train", "partnerplay") for e in mine):
                out.append("base %s has train edges but no manipulator" % n.agent_id)
            continue
        for s in n.seats:
            train = [e for e in mine if e.phase == "train" and s in e.all_owner_seats()]
            pp = [e for e in mine if e.phase == "partnerplay" and s in e.all_owner_seats()]
            if len(train) != 1 or m.agent_id not in train[0].pair:
                out.append("base %s seat %s needs exactly one train edge to %s"
                           % (n.agent_id, SEAT_NAMES[s], m.agent_id))
                continue
            eps = sum(e.weight for e in pp)
            if abs(train[0].weight - (1.0 - eps)) > tol:
                out.append("base %s seat %s: train weight %g != 1 - %g"
                           % (n.agent_id, SEAT_NAMES[s], train[0].weight, eps))
            for e in pp:
                if any(nodes[p].role != "base" for p in e.pair):
                    out.append("partner-play edge %s pairs a manipulator" % e.edge_id)
        if any(e.phase == "eval" for e in mine):
            out.append("manipulated base %s owns evaluation edges" % n.agent_id)
    return out


# ----------------------------------------------------------------------
# surrogate losses

def _check_alive(refs):
    for lp in refs:
        if lp is None:
            continue
        for x in lp:
            if hg.is_var(x) and x.tape.closed:
                raise StaleDependencyError(
                    "stale dependency: evaluation log-probs reference a closed tape")


def _group(keys, weights):
    """Unique rows of ``keys`` with summed ``weights``."""
    if keys.shape[1] == 0:
        return np.zeros((1, 0), dtype=int), np.array([weights.sum()])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    return uniq, np.bincount(inv.ravel(), weights=weights, minlength=len(uniq))


def _dep_sum(key_actions, seats, refs, t, lam):
    """sum_{t'<=t} lam^(t-t') sum_seats log pi(a_t') for one key row."""
    tau = None
    for tp in range(t + 1):
        decay = lam ** (t - tp)
        for k, s in enumerate(seats):
            lp = refs[s][int(key_actions[tp * len(seats) + k])]
            term = lp if decay == 1.0 else lp * decay
            tau = term if tau is None else tau + term
    return tau


def _on_tape(lp):
    return lp is not None and any(hg.is_var(x) for x in lp)


def base_loss(batches, advantages, own_seats, gamma=0.95, entropy=None, entropy_coef=0.0,
              partner_dependencies=False, dice_lambda=1.0):
    """Weighted score-function surrogate, to be maximised.

    sum_e w_e mean_episodes sum_t gamma^t log pi(a_t) A_t + entropy_coef * H.
    With ``partner_dependencies`` each term is multiplied by the magic box
    of the partner's action log-probs, which leaves the value and first
    gradient unchanged and lets a second derivative reach the partner.
    """
    batches = list(batches)
    advantages = list(advantages)
    own_seats = list(own_seats)
    if len(advantages) != len(batches) or len(own_seats) != len(batches):
        raise ContractViolation("advantages missing for some trajectories")
    total = None
    for b, adv, s in zip(batches, advantages, own_seats):
        A = adv.advantages if isinstance(adv, AdvantageBatch) else np.asarray(adv, float)
        if A.shape != b.actions.shape[:2]:
            raise ContractViolation("advantages missing for some trajectories")
        lp_own = b.log_probs[s]
        if lp_own is None:
            raise ContractViolation("batch has no log-probs for the trained seat")
        partner = 1 - s
        use_dep = partner_dependencies and _on_tape(b.log_probs[partner])
        _check_alive([lp_own, b.log_probs[partner] if use_dep else None])
        n = b.n_episodes
        for t in range(b.horizon):
            coef = A[:, t] * (b.weight * gamma ** t / n)
            if use_dep:
                keys = np.concatenate([b.actions[:, t:t + 1, s], b.actions[:, :t + 1, partner]],
                                      axis=1)
            else:
                keys = b.actions[:, t:t + 1, s]
            uniq, sums = _group(keys, coef)
            for row, c in zip(uniq, sums):
                if c == 0.0:
                    continue
                term = lp_own[int(row[0])]
                if use_dep:
                    tau = _dep_sum(row[1:], (partner,), b.log_probs, t, dice_lambda)
                    term = term * hg.magic_box(tau)
                term = term * float(c)
                total = term if total is None else total + term
    if entropy is not None and entropy_coef:
        total = entropy * entropy_coef if total is None else total + entropy * entropy_coef
    return 0.0 if total is None else total


def manipulator_loss(batches, advantages, gamma=0.95, dice_lambda=0.95):
    """DiCE objective over evaluation rollouts, to be maximised.

    sum_e w_e mean_episodes sum_t gamma^t box(tau_t) A_t, where tau_t sums
    the (lambda-decayed) log-probs of every on-tape seat's actions up to t.
    The value equals the same sum with every box replaced by 1.
    """
    batches = list(batches)
    advantages = list(advantages)
    if len(advantages) != len(batches):
        raise ContractViolation("advantages missing for some trajectories")
    total = None
    for b, adv in zip(batches, advantages):
        A = adv.advantages if isinstance(adv, AdvantageBatch) else np.asarray(adv, float)
        if A.shape != b.actions.shape[:2]:
            raise ContractViolation("advantages missing for some trajectories")
        seats = tuple(s for s in (0, 1) if _on_tape(b.log_probs[s]))
        _check_alive([b.log_probs[s] for s in seats])
        n = b.n_episodes
        for t in range(b.horizon):
            coef = A[:, t] * (b.weight * gamma ** t / n)
            keys = b.actions[:, :t + 1, list(seats)].reshape(n, -1)
            uniq, sums = _group(keys, coef)
            for row, c in zip(uniq, sums):
                if c == 0.0:
                    continue
                if seats:
                    term = hg.magic_box(_dep_sum(row, seats, b.log_probs, t, dice_lambda)) * float(c)
                else:
                    term = float(c)
                total = term if total is None else total + term
    return 0.0 if total is None else total


# ----------------------------------------------------------------------
# the update

@dataclass
class StepMetrics:
    rows: list = field(default_factory=list)
    grad_norms: dict = field(default_factory=dict)

    def add(self, edge, reward_mean, loss, grad_norm):
        self.rows.append({"edge": edge.edge_id, "agent": edge.owner,
                          "reward_mean": float(reward_mean), "loss": float(loss),
                          "grad_norm": float(grad_norm)})


@dataclass
class StepResult:
    policies: dict
    critics: dict
    metrics: StepMetrics


def _finite(grads, what):
    vals = [hg.value(g) for g in grads]
    if not all(math.isfinite(v) for v in vals):
        raise NumericalError("non-finite gradient for %s" % what)
    return vals


def _norm(vals):
    return math.sqrt(sum(v * v for v in vals))


class _Dists:
    """Memoised softmax probabilities and log-probs per logit list."""

    def __init__(self):
        self._cache = {}

    def get(self, logits):
        key = id(logits)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not logits:
            probs, logp = hg.softmax_and_log(logits)
            hit = (logits, probs, logp, np.asarray(hg.values(probs)))
            self._cache[key] = hit
        return hit[1], hit[2], hit[3]


class _Update:
    """One application of the shaping update to a graph."""

    def __init__(self, graph, policies, game, config, critics=None, sampled=False,
                 batch_size=128, seed=0, step=0):
        self.graph = graph
        self.policies = policies
        self.game = game
        self.cfg = config
        self.sampled = sampled
        self.batch_size = int(batch_size)
        self.seed = seed
        self.step = step
        self.critics = dict(critics or {})
        self.critic_batches = {}
        self.dists = _Dists()
        self.metrics = StepMetrics()
        self.pair_index = {p: i for i, p in enumerate(graph.pairings())}
        self.nodes = {n.agent_id: n for n in graph.nodes}
        for a in graph.ids:
            if a not in policies:
                raise ContractViolation("no policy for agent %s" % a)
        self.edge_index = {id(e): i for i, e in enumerate(graph.edges)}

    # parameter views ------------------------------------------------
    def _params(self, tape, overrides=None):
        """agent -> seat -> logits list; trainable agents become leaves."""
        out = {}
        for n in self.graph.nodes:
            pol = self.policies[n.agent_id]
            if overrides and n.agent_id in overrides:
                out[n.agent_id] = {s: [float(x) for x in v]
                                   for s, v in overrides[n.agent_id].items()}
            elif n.trainable and tape is not None:
                out[n.agent_id] = {s: tape.leaves(pol.logits[s]) for s in n.seats}
            else:
                out[n.agent_id] = {s: [float(x) for x in pol.logits[s]] for s in n.seats}
        return out

    def _blocks(self, agent_id):
        """Seats of ``agent_id`` that have at least one training term."""
        mine = self.graph.edges_of(agent_id)
        return [s for s in self.nodes[agent_id].seats
                if any(s in e.all_owner_seats() for e in mine)]

    def _terms(self, agent_id, seat=None):
        """(edge, sub-index, pair, weight, reward seat, trained seat) tuples."""
        out = []
        for e in self.graph.edges_of(agent_id):
            for k, (pair, w) in enumerate(e.terms()):
                if seat is None:
                    out.append((e, k, pair, w, e.reward_of, None))
                elif seat in e.owner_seats(pair):
                    r = seat if e.reward_of is None else e.reward_of
                    out.append((e, k, pair, w, r, seat))
        return out

    # exact objectives -----------------------------------------------
    def _utility(self, pair, reward_seat, params):
        p, _, _ = self.dists.get(params[pair[0]][0])
        q, _, _ = self.dists.get(params[pair[1]][1])
        return exact_utility(self.game, p, q, reward_seat + 1)

    def _entropy(self, logits):
        probs, logp, _ = self.dists.get(logits)
        return -hg.vsum(p * lp for p, lp in zip(probs, logp))

    # sampled plumbing -----------------------------------------------
    def _batch(self, pair, params, stream, name, weight=1.0):
        """Sample a batch; ``stream`` is the (phase, iteration, index) counter."""
        cache = self.__dict__.setdefault("_batch_cache", {})
        key = (stream, id(params[pair[0]][0]), id(params[pair[1]][1]))
        hit = cache.get(key)
        if hit is not None:
            return replace(hit, weight=weight)
        row, col = pair
        _, p_logp, p_np = self.dists.get(params[row][0])
        _, q_logp, q_np = self.dists.get(params[col][1])
        phase, it, idx = stream
        rng = make_rng(self.seed, self.step, phase * 4096 + it, idx)
        b = sample_batch(self.game, p_np, q_np, self.batch_size, rng, pairing=pair,
                         phase=name, log_probs=(p_logp, q_logp), weight=weight)
        cache[key] = b
        return b

    def _critic(self, pair, reward_seat):
        key = (pair[0], pair[1], reward_seat)
        c = self.critics.get(key)
        if c is None:
            c = CriticParams(key, np.zeros(self.game.horizon), self.cfg.critic_lr,
                             self.cfg.vf_coef)
            self.critics[key] = c
        return c

    def _advantages(self, batch, pair, reward_seat):
        if self.cfg.dice_mode == "raw":
            return AdvantageBatch(batch.rewards[:, :, reward_seat], batch.pairing)
        c = self._critic(pair, reward_seat)
        return gae_advantages(batch, c, self.cfg.gamma, self.cfg.gae_lambda, seat=reward_seat)

    def _normalize(self, advs):
        if not self.cfg.normalize or self.cfg.dice_mode == "raw" or not advs:
            return advs
        return normalize_advantages(advs, per_partner=self.cfg.per_partner_norm)

    def _remember(self, batch, pair, reward_seat):
        key = (pair[0], pair[1], reward_seat)
        self.critic_batches[key] = batch

    # base-agent objective per seat block -----------------------------
    def _base_objectives(self, agent_id, params, phase, it, partner_deps):
        """Return {seat: objective} and per-edge (edge, reward, weighted) metrics."""
        blocks = self._blocks(agent_id)
        objs = {}
        info = []
        if not self.sampled:
            for s in blocks:
                total = None
                for e, k, pair, w, r, _ in self._terms(agent_id, s):
                    u = self._utility(pair, r, params)
                    term = u * w
                    total = term if total is None else total + term
                    info.append((e, hg.value(u), hg.value(term)))
                if self.cfg.entropy_coef:
                    total = total + self._entropy(params[agent_id][s]) * self.cfg.entropy_coef
                objs[s] = total
            return objs, info
        batches, advs, seats = [], [], []
        for s in blocks:
            for e, k, pair, w, r, _ in self._terms(agent_id, s):
                name = "partnerplay" if e.phase == "partnerplay" else (
                    "lookahead" if phase == 0 else "evaluation")
                stream = (phase, it, 2 * self.edge_index[id(e)] + k)
                b = self._batch(pair, params, stream, name, weight=w)
                batches.append(b)
                advs.append(self._advantages(b, pair, r))
                seats.append(s)
                info.append((e, float(b.rewards[:, :, r].mean()), None))
                if phase == 3:
                    self._remember(b, pair, r)
        advs = self._normalize(advs)
        for s in blocks:
            idx = [i for i, x in enumerate(seats) if x == s]
            ent = self._entropy(params[agent_id][s]) if self.cfg.entropy_coef else None
            objs[s] = base_loss([batches[i] for i in idx], [advs[i] for i in idx],
                                [s] * len(idx), gamma=self.cfg.gamma, entropy=ent,
                                entropy_coef=self.cfg.entropy_coef,
                                partner_dependencies=partner_deps,
                                dice_lambda=self.cfg.dice_lambda)
        return objs, info

    def _manipulator_objective(self, m_id, params):
        info = []
        if not self.sampled:
            total = None
            for e, k, pair, w, r, _ in self._terms(m_id):
                u = self._utility(pair, r, params)
                term = u * w
                total = term if total is None else total + term
                info.append((e, hg.value(u), hg.value(term)))
            return total, info
        batches, advs = [], []
        for e, k, pair, w, r, _ in self._terms(m_id):
            b = self._batch(pair, params, (1, 0, self.pair_index[pair]), "evaluation", weight=w)
            self._remember(b, pair, r)
            batches.append(b)
            advs.append(self._advantages(b, pair, r))
            info.append((e, float(b.rewards[:, :, r].mean()), None))
        advs = self._normalize(advs)
        return manipulator_loss(batches, advs, gamma=self.cfg.gamma,
                                dice_lambda=self.cfg.dice_lambda), info

    # driver -----------------------------------------------------------
    def _flat(self, agent_id, params):
        return [x for s in self.nodes[agent_id].seats for x in params[agent_id][s]]

    def _unflat(self, agent_id, flat):
        out, i = {}, 0
        for s in self.nodes[agent_id].seats:
            k = len(self.policies[agent_id].logits[s])
            out[s] = list(flat[i:i + k])
            i += k
        return out

    def _block_grads(self, agent_id, objs, params, create_graph):
        grads = []
        for s in self.nodes[agent_id].seats:
            xs = params[agent_id][s]
            if s in objs and hg.is_var(objs[s]):
                g = hg.grad(objs[s], xs, create_graph=create_graph)
            else:
                g = [0.0] * len(xs)
            grads.extend(g)
        return grads

    def lookahead(self, params0):
        """Base parameters after N differentiable lookahead steps."""
        cfg = self.cfg
        graph = self.graph
        la = dict(params0)
        la_opt = {n.agent_id: self.policies[n.agent_id].optimizer.detached()
                  for n in graph.base_nodes}
        movers = [n.agent_id for n in graph.base_nodes
                  if n.trainable and (n.lookahead or graph.manipulator_of(n.agent_id))]
        lr_la = cfg.lr("lookahead")
        for it in range(cfg.n):
            steps = {}
            for a in movers:
                objs, _ = self._base_objectives(a, la, 0, it, partner_deps=True)
                g = self._block_grads(a, objs, la, create_graph=True)
                _finite(g, "lookahead step %d of %s" % (it, a))
                steps[a] = g
            for a, g in steps.items():
                flat, la_opt[a] = hg.optimizer_step(self._flat(a, la), g, la_opt[a], lr_la)
                la[a] = self._unflat(a, flat)
        return la

    def manipulator_grads(self, params0):
        """Raw (unclipped) manipulator gradients through N lookahead steps."""
        manips = [n for n in self.graph.manipulator_nodes if n.trainable]
        out = {}
        if not manips:
            return out
        la = self.lookahead(params0)
        for m in manips:
            obj, info = self._manipulator_objective(m.agent_id, la)
            leaves = self._flat(m.agent_id, params0)
            g = _finite(hg.grad(obj, leaves) if hg.is_var(obj) else [0.0] * len(leaves),
                        "manipulator %s" % m.agent_id)
            out[m.agent_id] = (g, hg.value(obj), info)
        return out

    def run(self):
        cfg = self.cfg
        graph = self.graph
        tape = hg.new_tape()
        params0 = self._params(tape)
        new_manip = {}
        lr_m = cfg.lr("manipulator")
        for m, (g, loss, info) in self.manipulator_grads(params0).items():
            g, norm = hg.clip_by_global_norm(g, cfg.max_grad_norm)
            pol = self.policies[m]
            flat, opt = hg.optimizer_step(list(pol.flat()), g, pol.optimizer, lr_m)
            new_manip[m] = (flat, opt)
            for e, r, _ in info:
                self.metrics.add(e, r, loss, norm)
            self.metrics.grad_norms[m] = norm
        tape.close()

        # outer step for base agents against the updated manipulators
        tape2 = hg.new_tape()
        overrides = {m: self._unflat(m, flat) for m, (flat, _) in new_manip.items()}
        params1 = self._params(tape2, overrides)
        new_policies = dict(self.policies)
        lr_b = cfg.lr("base")
        updates = {}
        for n in graph.base_nodes:
            if not n.trainable:
                continue
            objs, info = self._base_objectives(n.agent_id, params1, 3, 0, partner_deps=False)
            g = _finite(self._block_grads(n.agent_id, objs, params1, create_graph=False),
                        "base agent %s" % n.agent_id)
            norm = _norm(g)
            pol = self.policies[n.agent_id]
            flat, opt = hg.optimizer_step(list(pol.flat()), g, pol.optimizer, lr_b)
            updates[n.agent_id] = (flat, opt)
            loss = sum(hg.value(o) for o in objs.values())
            for e, r, _ in info:
                self.metrics.add(e, r, loss, norm)
            self.metrics.grad_norms[n.agent_id] = norm
        tape2.close()
        for a, (flat, opt) in list(updates.items()) + list(new_manip.items()):
            pol = self.policies[a]
            new_policies[a] = replace(pol.with_flat(np.asarray(flat, float)),
                                      optimizer=opt.detached())
        if self.sampled:
            for key, b in self.critic_batches.items():
                c = self.critics.get(key)
                if c is not None:
                    self.critics[key], _ = critic_update(c, b, cfg.gamma, seat=key[2])
        return StepResult(new_policies, self.critics, self.metrics)


def exact_rpg_step(graph, policies, config, game):
    """Shaping update on exact expected utilities (no sampling, no critics)."""
    return _Update(graph, policies, game, config).run()


def rpg_step(graph, policies, critics, config, game, batch_size=128, seed=0, step=0):
    """Sampled shaping update with DiCE losses and tabular critics.

    Randomness comes from a counter-based generator keyed by ``seed`` and
    indexed by (step, phase, iteration, pairing).
    """
    return _Update(graph, policies, game, config, critics=critics, sampled=True,
                   batch_size=batch_size, seed=seed, step=step).run()


def manipulator_gradients(graph, policies, config, game, sampled=False, batch_size=128,
                          seed=0, step=0):
    """Unclipped manipulator gradients, exact or sampled; {manipulator: array}."""
    up = _Update(graph, policies, game, config, critics={} if sampled else None,
                 sampled=sampled, batch_size=batch_size, seed=seed, step=step)
    tape = hg.new_tape()
    try:
        grads = up.manipulator_grads(up._params(tape))
    finally:
        tape.close()
    return {m: np.asarray(g, float) for m, (g, _, _) in grads.items()}


def objective_function(graph, policies, config, game, agent_id):
    """``f(tape, xs)`` giving the exact objective of ``agent_id`` at logits ``xs``.

    Manipulators see their objective after the lookahead; base agents see
    their outer-step objective. Meant for finite-difference checks.
    """
    up = _Update(graph, policies, game, config)
    node = up.nodes.get(agent_id)
    if node is None:
        raise ContractViolation("no agent %s in graph" % agent_id)
    seats = policies[agent_id].seats

    def f(tape, xs):
        params = up._params(tape)
        split, i = {}, 0
        for s in seats:
            n = len(policies[agent_id].logits[s])
            split[s] = list(xs[i:i + n])
            i += n
        params[agent_id] = split
        if node.role == "manipulator":
            obj, _ = up._manipulator_objective(agent_id, up.lookahead(params))
            return obj
        objs, _ = up._base_objectives(agent_id, params, 3, 0, partner_deps=False)
        return hg.vsum(list(objs.values()))

    return f
