"""Algorithm graphs, training loop, convergence detection, cross-play and audits."""

import collections
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .hograd import ContractViolation, NumericalError
from .agents import (
    PolicyParams, init_policy, load_checkpoint, save_checkpoint, total_variation, SEAT_NAMES,
)
from .games import exact_utility, rationality_check, sample_batch, make_rng
from .shaping import (
    Edge, Node, ObjectiveGraph, LookaheadConfig, validate_graph, exact_rpg_step, rpg_step,
)

KINDS = ("SP", "AP", "AT", "PAIRED", "AD",
         "AP_RPG", "AT_RPG", "PAIRED_RPG", "PAIRED_A_RPG", "AD_RPG")
ATTACKS = ("AP", "AP_RPG", "PAIRED_A_RPG")


def normalize_kind(kind):
    k = str(kind).upper().replace("-", "_")
    if k not in KINDS:
        raise ContractViolation("unknown algorithm kind %r (known: %s)" % (kind, ", ".join(KINDS)))
    return k


@dataclass
class AlgorithmSpec:
    """Which algorithm to train.

    ``victim`` is a checkpoint path or PolicyParams for attack variants.
    ``victim_lookahead`` lets the unmanipulated victim take the on-tape
    lookahead steps too (see README).
    """

    kind: str
    population: int = 2
    diversity_lambda: float = 0.25
    victim: object = None
    seed: int = 0
    victim_lookahead: bool = True
    sequential: bool = False

    def __post_init__(self):
        self.kind = normalize_kind(self.kind)
        if self.kind in ATTACKS and self.victim is None:
            raise ContractViolation("%s needs a victim checkpoint" % self.kind)
        if self.kind in ("AD", "AD_RPG") and int(self.population) < 2:
            raise ContractViolation("adversarial diversity needs a population of at least 2")
        if self.sequential and self.kind != "AD":
            raise ContractViolation("sequential training only applies to baseline AD")

    @property
    def is_rpg(self):
        return self.kind.endswith("RPG")


def build_graph(spec, partnerplay=0.0, stage=None):
    """Objective graph for ``spec``; ``partnerplay`` is the weight epsilon.

    ``stage`` selects one phase of sequential AD: member ``stage`` trains
    against itself and against the frozen earlier members.
    """
    if stage is not None:
        return _sequential_ad_graph(spec, int(stage))
    k = spec.kind
    eps = float(partnerplay)
    if not 0.0 <= eps < 1.0:
        raise ContractViolation("partner-play weight must lie in [0, 1)")
    nodes, edges = [], []

    def manipulated(base, seats, partners):
        """Edges of a base agent trained against its own manipulator."""
        m = base + "_m"
        for s in seats:
            pair = (m, base) if s == 1 else (base, m)
            edges.append(Edge(base, pair, 1.0 - eps, None, "train", grad_seats=(s,)))
            for other in (partners if eps > 0 else ()):
                pair = (other, base) if s == 1 else (base, other)
                edges.append(Edge(base, pair, eps / len(partners), None, "partnerplay",
                                  grad_seats=(s,)))
        return m

    if k == "SP":
        nodes.append(Node("agent", "base", True, (0, 1)))
        edges.append(Edge("agent", ("agent", "agent"), 1.0, None, "eval"))
    elif k in ("AP", "AT", "AP_RPG", "AT_RPG"):
        frozen = k in ("AP", "AP_RPG")
        nodes.append(Node("victim", "base", not frozen, (0,),
                          lookahead=spec.victim_lookahead))
        nodes.append(Node("adversary", "base", True, (1,)))
        if not frozen:
            edges.append(Edge("victim", ("victim", "adversary"), 1.0, 0, "eval"))
        if spec.is_rpg:
            m = manipulated("adversary", (1,), ["victim"])
            nodes.append(Node(m, "manipulator", True, (0,), target="adversary"))
            edges.append(Edge(m, ("victim", "adversary"), -1.0, 0, "eval"))
        else:
            edges.append(Edge("adversary", ("victim", "adversary"), -1.0, 0, "eval"))
    elif k in ("PAIRED", "PAIRED_RPG", "PAIRED_A_RPG"):
        frozen = k == "PAIRED_A_RPG"
        nodes.append(Node("protagonist", "base", not frozen, (0,), lookahead=False))
        nodes.append(Node("antagonist", "base", True, (0,), lookahead=False))
        nodes.append(Node("adversary", "base", True, (1,)))
        if not frozen:
            edges.append(Edge("protagonist", ("protagonist", "adversary"), 1.0, 0, "eval"))
        edges.append(Edge("antagonist", ("antagonist", "adversary"), 1.0, 0, "eval"))
        owner = "adversary"
        if spec.is_rpg:
            owner = manipulated("adversary", (1,), ["protagonist", "antagonist"])
            nodes.append(Node(owner, "manipulator", True, (0,), target="adversary"))
        edges.append(Edge(owner, ("antagonist", "adversary"), 1.0, 0, "eval"))
        edges.append(Edge(owner, ("protagonist", "adversary"), -1.0, 0, "eval"))
    elif k in ("AD", "AD_RPG"):
        m_pop = int(spec.population)
        lam = float(spec.diversity_lambda)
        members = ["member%d" % i for i in range(m_pop)]
        for i, a in enumerate(members):
            others = [b for b in members if b != a]
            nodes.append(Node(a, "base", True, (0, 1)))
            owner = a
            if spec.is_rpg:
                owner = manipulated(a, (0, 1), others)
                nodes.append(Node(owner, "manipulator", True, (0, 1), target=a))
            reward = 0 if spec.is_rpg else None
            edges.append(Edge(owner, (a, a), 1.0, reward, "eval"))
            for b in others:
                edges.append(Edge(owner, (a, b), -lam / (m_pop - 1), reward, "eval",
                                  seating="both"))
    else:  # pragma: no cover - normalize_kind guards this
        raise ContractViolation("unknown algorithm kind %r" % k)
    return ObjectiveGraph(nodes, edges, name=k)


def _sequential_ad_graph(spec, stage):
    m_pop = int(spec.population)
    if not 0 <= stage < m_pop:
        raise ContractViolation("stage must lie in [0, %d)" % m_pop)
    lam = float(spec.diversity_lambda)
    members = ["member%d" % i for i in range(m_pop)]
    nodes = [Node(a, "base", i == stage, (0, 1)) for i, a in enumerate(members)]
    a = members[stage]
    edges = [Edge(a, (a, a), 1.0, None, "eval")]
    for b in members[:stage]:
        edges.append(Edge(a, (a, b), -lam / (m_pop - 1), None, "eval", seating="both"))
    return ObjectiveGraph(nodes, edges, name="AD-stage%d" % stage)


def ad_objective_value(population, game, lam=0.25):
    """Self-play minus lambda-weighted, seat-averaged cross-play.

    ``population`` is a list of (row strategy, col strategy) pairs.
    """
    if not game.cooperative:
        raise ContractViolation("the diversity objective needs a cooperative game")
    m = len(population)
    if m < 2:
        raise ContractViolation("population needs at least two members")
    total = 0.0
    for i, (ri, ci) in enumerate(population):
        total += exact_utility(game, ri, ci, 1)
        cross = 0.0
        for j, (rj, cj) in enumerate(population):
            if j != i:
                cross += 0.5 * (exact_utility(game, ri, cj, 1) + exact_utility(game, rj, ci, 1))
        total -= lam / (m - 1) * cross
    return total


# ----------------------------------------------------------------------
# convergence

class ConvergenceDetector:
    """Sliding-window total-variation test on policy probabilities.

    Converged at step t when every tracked distribution stayed within
    ``threshold`` total variation of its current value over the last
    ``window`` steps. ``swings`` counts committed reversals: a tracked
    probability that moved by at least ``swing`` in one direction and then
    by at least ``swing`` back.
    """

    def __init__(self, window=200, threshold=0.01, swing=0.25):
        self.window = int(window)
        self.threshold = float(threshold)
        self.swing = float(swing)
        self.history = collections.deque(maxlen=self.window + 1)
        self.steps = 0
        self.converged_at = None
        self.last_tv = math.inf
        self._ext = None
        self.swings = 0

    def update(self, dists):
        """Feed a list of probability vectors; returns the converged flag."""
        cur = [np.asarray(d, float) for d in dists]
        self.history.append(cur)
        self.steps += 1
        self._track_swings(np.concatenate(cur))
        if len(self.history) <= self.window:
            self.last_tv = math.inf
            self.converged_at = None
            return False
        tv = 0.0
        for past in self.history:
            for a, b in zip(past, cur):
                tv = max(tv, total_variation(a, b))
        self.last_tv = tv
        if tv < self.threshold:
            if self.converged_at is None:
                self.converged_at = self.steps - self.window - 1
        else:
            self.converged_at = None
        return self.converged_at is not None

    def _track_swings(self, x):
        # per coordinate: reference point, direction of the committed move
        if self._ext is None:
            self._ext = [x.copy(), np.zeros_like(x)]
            return
        ref, direction = self._ext
        for i, v in enumerate(x):
            d = v - ref[i]
            if direction[i] == 0:
                if abs(d) >= self.swing:
                    direction[i] = np.sign(d)
                    ref[i] = v
            elif direction[i] * d > 0:
                ref[i] = v  # extend the current move
            elif abs(d) >= self.swing:
                self.swings += 1
                direction[i] = np.sign(d)
                ref[i] = v

    @property
    def converged(self):
        return self.converged_at is not None

    @property
    def oscillating(self):
        return self.swings > 0 and not self.converged


# ----------------------------------------------------------------------
# training

@dataclass
class TrainingResult:
    policies: dict
    graph: ObjectiveGraph
    metrics: list
    checkpoints: list
    outcome: str
    steps: int
    converged_at: int = None
    swings: int = 0
    oscillation: bool = False
    final_tv: float = math.inf
    error: str = None
    wall_clock: float = 0.0
    critics: dict = field(default_factory=dict)

    def probs(self, agent_id, seat=None):
        pol = self.policies[agent_id]
        seat = pol.seats[0] if seat is None else seat
        return pol.probs(seat)


def _load_victim(victim):
    if isinstance(victim, PolicyParams):
        return victim
    return load_checkpoint(victim)


def init_policies(spec, graph, game, seed, init_scale=0.01, optimizer="sgd"):
    """Seeded initial policies; frozen agents load the victim checkpoint."""
    rng = np.random.default_rng([int(seed), 7919])
    n_actions = {0: game.rows, 1: game.cols}
    out = {}
    for n in graph.nodes:
        if not n.trainable and spec.kind in ATTACKS:
            v = _load_victim(spec.victim)
            for s in n.seats:
                if s not in v.logits:
                    raise ContractViolation("victim checkpoint lacks seat %s" % SEAT_NAMES[s])
                if len(v.logits[s]) != n_actions[s]:
                    raise ContractViolation("victim checkpoint does not match the game shape")
            out[n.agent_id] = PolicyParams(n.agent_id, n.role,
                                           {s: v.logits[s] for s in n.seats}, False)
        else:
            out[n.agent_id] = init_policy(n.agent_id, n.role, n.seats, n_actions, rng,
                                          init_scale, True, optimizer)
    return out


def _probs_str(pol):
    return "/".join(";".join("%.6f" % p for p in pol.probs(s)) for s in pol.seats)


def _tracked(graph, policies):
    return [policies[n.agent_id].probs(s) for n in graph.base_nodes for s in n.seats]


def _save_all(policies, directory, step, game_name):
    paths = []
    os.makedirs(directory, exist_ok=True)
    for a, pol in sorted(policies.items()):
        path = os.path.join(directory, "step%06d_%s.ckpt" % (step, a))
        save_checkpoint(pol, path, step=step, game=game_name)
        paths.append(path)
    return paths


def run_training(spec, game, config=None, steps=3000, seed=0, mode="exact", batch_size=128,
                 checkpoint_dir=None, checkpoint_interval=0, init_scale=0.01,
                 window=200, threshold=0.01, log_every=1, policies=None):
    """Run the shaping update (or its baseline form) for ``steps`` steps.

    Sequential AD runs ``steps`` steps per member, one member at a time.

    Outcome is "converged" when the convergence detector holds at the end,
    "diverged" on a non-finite gradient, else "budget-exhausted".
    """
    config = config or LookaheadConfig()
    if mode not in ("exact", "sampled"):
        raise ContractViolation("mode must be 'exact' or 'sampled'")
    if spec.sequential:
        graphs = [build_graph(spec, config.partnerplay, stage=i)
                  for i in range(int(spec.population))]
    else:
        graphs = [build_graph(spec, config.partnerplay)]
    for graph in graphs:
        problems = validate_graph(graph)
        if problems:
            raise ContractViolation("invalid objective graph: " + "; ".join(problems))
    if policies is None:
        policies = init_policies(spec, graphs[0], game, seed, init_scale, config.optimizer)
    critics = {}
    metrics = []
    checkpoints = []
    t0 = time.perf_counter()
    if checkpoint_dir:
        checkpoints += _save_all(policies, checkpoint_dir, 0, game.name)
    last_good = list(checkpoints)
    outcome, error = "budget-exhausted", None
    done = 0
    total = steps * len(graphs)
    for graph in graphs:
        # each sequential stage gets the full budget and a fresh detector
        detector = ConvergenceDetector(window, threshold)
        detector.update(_tracked(graph, policies))
        for _ in range(steps):
            try:
                if mode == "exact":
                    res = exact_rpg_step(graph, policies, config, game)
                else:
                    res = rpg_step(graph, policies, critics, config, game, batch_size, seed, done)
            except NumericalError as exc:
                outcome, error = "diverged", "step %d: %s" % (done, exc)
                break
            policies, critics = res.policies, res.critics
            done += 1
            detector.update(_tracked(graph, policies))
            if log_every and ((done - 1) % log_every == 0 or done == total):
                probs = {a: _probs_str(p) for a, p in policies.items()}
                for row in _merge_rows(res.metrics.rows):
                    row["step"] = done
                    row["probs"] = probs[row["agent"]]
                    metrics.append(row)
            if checkpoint_dir and checkpoint_interval and done % checkpoint_interval == 0:
                last_good = _save_all(policies, checkpoint_dir, done, game.name)
                checkpoints += last_good
        if outcome == "diverged":
            break
    if checkpoint_dir and outcome != "diverged" and not (checkpoints and checkpoints[-1].startswith(
            os.path.join(checkpoint_dir, "step%06d_" % done))):
        last_good = _save_all(policies, checkpoint_dir, done, game.name)
        checkpoints += last_good
    if outcome != "diverged" and detector.converged:
        outcome = "converged"
    if outcome == "diverged" and last_good:
        error += " (last good checkpoint: %s)" % os.path.join(
            os.path.dirname(last_good[0]), os.path.basename(last_good[0])[:10] + "_*.ckpt")
    return TrainingResult(policies, graphs[-1], metrics, checkpoints, outcome, done,
                          detector.converged_at, detector.swings, detector.oscillating,
                          detector.last_tv, error, time.perf_counter() - t0, critics)


def _merge_rows(rows):
    """Average metric rows that share an edge id (seat-averaged terms)."""
    merged = collections.OrderedDict()
    for r in rows:
        key = (r["agent"], r["edge"])
        if key not in merged:
            merged[key] = dict(r, _n=1)
        else:
            m = merged[key]
            m["reward_mean"] += r["reward_mean"]
            m["_n"] += 1
    out = []
    for m in merged.values():
        m["reward_mean"] /= m.pop("_n")
        out.append(m)
    return out


# ----------------------------------------------------------------------
# evaluation

@dataclass
class CrossPlayGrid:
    """Mean reward of the row-label agent when paired with the column-label agent.

    ``per_seat[(i, j)]`` maps "row"/"col" (the seat agent i occupied) to
    that seating's value. Seatings an agent cannot take are skipped.
    """

    labels: list
    values: np.ndarray
    per_seat: dict
    episodes: int

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("# rationalpg crossplay schema=1 episodes=%d\n" % self.episodes)
            fh.write("agent," + ",".join(self.labels) + "\n")
            for lab, row in zip(self.labels, self.values):
                fh.write(lab + "," + ",".join(repr(float(v)) for v in row) + "\n")
        return path


def crossplay_eval(policies, game, episodes=0, seed=0, labels=None):
    """Exact (episodes=0) or Monte-Carlo cross-play grid."""
    pols = [p if isinstance(p, PolicyParams) else load_checkpoint(p) for p in policies]
    labels = list(labels) if labels else [p.agent_id for p in pols]
    if len(labels) != len(pols):
        raise ContractViolation("label count does not match checkpoint count")
    for p in pols:
        for s in p.seats:
            if len(p.logits[s]) != (game.rows, game.cols)[s]:
                raise ContractViolation("checkpoint %s does not match game %s"
                                        % (p.agent_id, game.name))
    n = len(pols)
    values = np.full((n, n), np.nan)
    per_seat = {}
    for i in range(n):
        for j in range(n):
            cell = {}
            for seat in (0, 1):
                a, b = (pols[i], pols[j]) if seat == 0 else (pols[j], pols[i])
                if 0 not in a.seats or 1 not in b.seats:
                    continue
                p, q = a.probs(0), b.probs(1)
                if episodes:
                    rng = make_rng(seed, i, j, seat)
                    batch = sample_batch(game, p, q, int(episodes), rng)
                    disc = game.discount ** np.arange(game.horizon)
                    cell[SEAT_NAMES[seat]] = float(
                        (batch.rewards[:, :, seat] * disc).sum(axis=1).mean())
                else:
                    cell[SEAT_NAMES[seat]] = exact_utility(game, p, q, seat + 1)
            per_seat[(i, j)] = cell
            if cell:
                values[i, j] = float(np.mean(list(cell.values())))
    return CrossPlayGrid(labels, values, per_seat, int(episodes))


@dataclass
class AuditReport:
    verdicts: list

    @property
    def flagged(self):
        return [v for v in self.verdicts if not v["rational"]]

    def lines(self):
        out = []
        for v in self.verdicts:
            if v["rational"]:
                w = ";".join("%.4f" % x for x in v["witness"])
                out.append("agent=%s seat=%s verdict=rational support=%s witness=%s"
                           % (v["agent"], v["seat"], v["support"], w))
            else:
                out.append("agent=%s seat=%s verdict=IRRATIONAL support=%s "
                           "no co-strategy makes the support a best response (min gap %.4g)"
                           % (v["agent"], v["seat"], v["support"], v["gap"]))
        return out


def sabotage_audit(checkpoint, game, delta=0.01, support_tol=0.05):
    """Rationality check of every seat policy in a checkpoint.

    Actions with probability at most ``support_tol`` are treated as noise.
    """
    pol = checkpoint if isinstance(checkpoint, PolicyParams) else load_checkpoint(checkpoint)
    verdicts = []
    for s in pol.seats:
        probs = pol.probs(s)
        if len(probs) != (game.rows, game.cols)[s]:
            raise ContractViolation("checkpoint %s does not match game %s"
                                    % (pol.agent_id, game.name))
        res = rationality_check(game, probs, s + 1, delta, support_tol=support_tol)
        labels = game.labels(s + 1)
        verdicts.append({
            "agent": pol.agent_id, "seat": SEAT_NAMES[s], "rational": res.rational,
            "witness": None if res.witness is None else list(res.witness),
            "support": "{%s}" % ",".join(labels[a] for a in res.support),
            "gap": res.gap,
        })
    return AuditReport(verdicts)
