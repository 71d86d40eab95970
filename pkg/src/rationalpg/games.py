"""Two-player matrix games: exact utilities, sampling, best responses and
rationality oracles."""

import configparser
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import hograd as hg
from .hograd import ContractViolation

SIMPLEX_TOL = 1e-9
TIE_TOL = 1e-9
RATIONAL_TOL = 1e-6
MAX_ORACLE_ACTIONS = 4


class OracleLimitError(ContractViolation):
    """Opponent action count exceeds the grid-search bound."""


@dataclass(frozen=True, eq=False)
class PayoffGame:
    """Two-player general-sum matrix game, optionally repeated ``horizon`` times."""

    name: str
    payoff1: np.ndarray
    payoff2: np.ndarray
    horizon: int = 1
    discount: float = 0.95
    row_labels: tuple = ()
    col_labels: tuple = ()

    def __post_init__(self):
        p1 = np.array(self.payoff1, dtype=float)
        p2 = np.array(self.payoff2, dtype=float)
        if p1.ndim != 2 or p1.shape != p2.shape:
            raise ContractViolation("payoff matrices must share a 2-D shape")
        if not (np.all(np.isfinite(p1)) and np.all(np.isfinite(p2))):
            raise ContractViolation("payoffs must be finite")
        if int(self.horizon) < 1:
            raise ContractViolation("horizon must be >= 1")
        if not 0.0 <= float(self.discount) <= 1.0:
            raise ContractViolation("discount must lie in [0, 1]")
        p1.setflags(write=False)
        p2.setflags(write=False)
        object.__setattr__(self, "payoff1", p1)
        object.__setattr__(self, "payoff2", p2)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "discount", float(self.discount))
        rows, cols = p1.shape
        rl = tuple(self.row_labels) or tuple("r%d" % i for i in range(rows))
        cl = tuple(self.col_labels) or tuple("c%d" % j for j in range(cols))
        if len(rl) != rows or len(cl) != cols:
            raise ContractViolation("label counts must match the payoff shape")
        object.__setattr__(self, "row_labels", rl)
        object.__setattr__(self, "col_labels", cl)

    @property
    def rows(self):
        return self.payoff1.shape[0]

    @property
    def cols(self):
        return self.payoff1.shape[1]

    @property
    def shape(self):
        return self.payoff1.shape

    @property
    def cooperative(self):
        return bool(np.array_equal(self.payoff1, self.payoff2))

    @property
    def zero_sum(self):
        return bool(np.array_equal(self.payoff1, -self.payoff2))

    def payoff(self, player):
        return self.payoff1 if _player(player) == 1 else self.payoff2

    def n_actions(self, player):
        return self.rows if _player(player) == 1 else self.cols

    def labels(self, player):
        return self.row_labels if _player(player) == 1 else self.col_labels

    @property
    def horizon_weight(self):
        """Sum of gamma^t for t < T."""
        if self.horizon == 1:
            return 1.0
        return float(sum(self.discount ** t for t in range(self.horizon)))


def _player(player):
    if player not in (1, 2):
        raise ContractViolation("player must be 1 or 2")
    return player


def _game(rows, cols, p1, p2, name):
    return PayoffGame(name, np.array(p1, float), np.array(p2, float),
                      row_labels=tuple(rows), col_labels=tuple(cols))


def _library():
    fig2 = [[1, 0, -1], [0, 1, -1]]
    appb = [[1, 0.9, -1, 0], [0, -1, 0.9, 1]]
    fig11 = [[0.9, 0, 1], [0, 0.9, 1]]
    rps = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], float)
    return {
        "fig2_coop": _game("AB", "CDE", fig2, fig2, "fig2_coop"),
        "appB_sabotage": _game("AB", "CDEF", appb, appb, "appB_sabotage"),
        "fig10_bach": _game("AB", "CDE", [[3, 0, -1], [1, 2, -1]],
                            [[2, 0, -1], [1, 3, -1]], "fig10_bach"),
        "fig11_coop": _game("AB", "CDE", fig11, fig11, "fig11_coop"),
        "fig12_chicken": _game("CD", "CD", [[0, -1], [1, -10]],
                               [[0, 1], [-1, -10]], "fig12_chicken"),
        "fig13_rps": _game(("R", "P", "S"), ("R", "P", "S"), rps, -rps, "fig13_rps"),
    }


GAMES = _library()


def get_game(name_or_path):
    """Built-in game by name, otherwise a game definition file."""
    if name_or_path in GAMES:
        return GAMES[name_or_path]
    return load_game(name_or_path)


def _parse_matrix(text, what):
    rows = [r for r in text.replace("\n", ";").split(";") if r.strip()]
    try:
        return [[float(x) for x in r.replace(",", " ").split()] for r in rows]
    except ValueError as exc:
        raise ContractViolation("bad %s matrix: %s" % (what, exc)) from None


def load_game(path):
    """Read a game file (INI with a [game] section).

    Keys: name, payoff1 (rows separated by ';'), payoff2 (a matrix, or
    ``common`` or ``zerosum``), horizon, discount, row_labels, col_labels.
    """
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ContractViolation("game file not found: %s" % path) from None
    except configparser.Error as exc:
        raise ContractViolation("cannot parse game file %s: %s" % (path, exc)) from None
    if "game" not in cp:
        raise ContractViolation("%s: missing [game] section" % path)
    sec = cp["game"]
    if "payoff1" not in sec:
        raise ContractViolation("%s: missing field payoff1" % path)
    p1 = np.array(_parse_matrix(sec["payoff1"], "payoff1"), float)
    spec2 = sec.get("payoff2", "common").strip()
    if spec2 == "common":
        p2 = p1.copy()
    elif spec2 == "zerosum":
        p2 = -p1
    else:
        p2 = np.array(_parse_matrix(spec2, "payoff2"), float)
    labels = {}
    for key in ("row_labels", "col_labels"):
        if key in sec:
            labels[key] = tuple(sec[key].replace(",", " ").split())
    return PayoffGame(sec.get("name", str(path)), p1, p2,
                      horizon=sec.getint("horizon", 1),
                      discount=sec.getfloat("discount", 0.95), **labels)


def save_game(game, path):
    cp = configparser.ConfigParser()
    fmt = lambda m: "; ".join(" ".join(repr(float(x)) for x in r) for r in m)
    cp["game"] = {
        "name": game.name,
        "payoff1": fmt(game.payoff1),
        "payoff2": "common" if game.cooperative else fmt(game.payoff2),
        "horizon": str(game.horizon),
        "discount": repr(game.discount),
        "row_labels": " ".join(game.row_labels),
        "col_labels": " ".join(game.col_labels),
    }
    with open(path, "w") as fh:
        cp.write(fh)


def _check_simplex(x, n, what):
    if len(x) != n:
        raise ContractViolation("%s has %d entries, expected %d" % (what, len(x), n))
    vals = hg.values(x)
    if min(vals) < -SIMPLEX_TOL or abs(sum(vals) - 1.0) > SIMPLEX_TOL:
        raise ContractViolation("%s is not on the probability simplex: %r" % (what, vals))


def exact_utility(game, p, q, player):
    """Expected discounted return of ``player`` when rows play p and cols q.

    Differentiable when p or q hold tape values.
    """
    R = game.payoff(player)
    _check_simplex(p, game.rows, "row strategy")
    _check_simplex(q, game.cols, "column strategy")
    p_is_var = any(hg.is_var(x) for x in p)
    q_is_var = any(hg.is_var(x) for x in q)
    if not p_is_var and not q_is_var:
        u = float(np.asarray(p, float) @ R @ np.asarray(q, float))
    elif not q_is_var:
        u = hg.dot(R @ np.asarray(q, float), p)
    elif not p_is_var:
        u = hg.dot(np.asarray(p, float) @ R, q)
    else:
        u = hg.vsum(p[i] * hg.dot(R[i], q) for i in range(game.rows))
    w = game.horizon_weight
    return u if w == 1.0 else u * w


def action_values(game, opponent, player):
    """Expected payoff of each own pure action against ``opponent``."""
    R = game.payoff(player)
    opp = np.asarray(hg.values(opponent), float)
    return R @ opp if player == 1 else opp @ R


def best_response_set(game, opponent, player, tol=TIE_TOL):
    """All own pure actions within ``tol`` of the best payoff."""
    _player(player)
    n_opp = game.cols if player == 1 else game.rows
    _check_simplex(opponent, n_opp, "opponent strategy")
    v = action_values(game, opponent, player)
    best = v.max()
    return frozenset(int(a) for a in np.flatnonzero(v >= best - tol))


@dataclass
class RationalityVerdict:
    rational: bool
    witness: np.ndarray = None
    gap: float = math.inf
    support: tuple = ()

    def __bool__(self):
        return self.rational


def _own_matrix(game, player):
    """Own-payoff matrix indexed (own action, opponent action)."""
    return game.payoff1 if player == 1 else game.payoff2.T


def _support(strategy, support_tol):
    s = np.asarray(hg.values(strategy), float)
    return tuple(int(a) for a in np.flatnonzero(s > support_tol))


def _compositions(n, k):
    """All length-k non-negative integer vectors summing to n."""
    if k == 1:
        return np.array([[n]])
    out = []
    for bars in itertools.combinations(range(n + k - 1), k - 1):
        prev = -1
        row = []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(n + k - 1 - prev - 1)
        out.append(row)
    return np.array(out)


def _gaps(M, support, Y):
    vals = Y @ M.T  # (points, own actions)
    return vals.max(axis=1) - vals[:, list(support)].min(axis=1)


def rationality_check(game, strategy, player, delta=0.01, tol=RATIONAL_TOL,
                      support_tol=SIMPLEX_TOL, refine=True):
    """Is ``strategy`` a best response to some co-strategy?

    Searches the co-strategy simplex on a grid of resolution ``delta``, then
    zooms in around the best grid point. The strategy is rational when every
    support action is within ``tol`` of the best own payoff at some point.
    """
    _player(player)
    M = _own_matrix(game, player)
    k = M.shape[1]
    if k > MAX_ORACLE_ACTIONS:
        raise OracleLimitError(
            "oracle limit: opponent has %d actions, grid search supports %d"
            % (k, MAX_ORACLE_ACTIONS))
    if delta <= 0:
        raise ContractViolation("grid resolution must be positive")
    _check_simplex(strategy, M.shape[0], "strategy")
    support = _support(strategy, support_tol)
    n = max(1, int(round(1.0 / delta)))
    Y = _compositions(n, k) / n
    g = _gaps(M, support, Y)
    i = int(np.argmin(g))
    best, y = float(g[i]), Y[i]
    if refine and k > 1:
        step = 1.0 / n
        r = 10
        offsets = np.array(list(itertools.product(range(-r, r + 1), repeat=k - 1)), float)
        while best > tol and step > 1e-12:
            step_new = step / r
            D = np.concatenate([offsets, -offsets.sum(axis=1, keepdims=True)], axis=1) * step_new
            cand = y + D
            cand = cand[(cand >= -1e-15).all(axis=1)]
            cand = np.clip(cand, 0.0, None)
            cand /= cand.sum(axis=1, keepdims=True)
            gc = _gaps(M, support, cand)
            j = int(np.argmin(gc))
            if gc[j] < best:
                best, y = float(gc[j]), cand[j]
            step = step_new
    if best <= tol:
        return RationalityVerdict(True, np.asarray(y, float), best, support)
    return RationalityVerdict(False, None, best, support)


def support_enumeration_check(game, strategy, player, support_tol=SIMPLEX_TOL, tol=1e-9):
    """Independent exact oracle: vertex enumeration of the witness polytope.

    The set of co-strategies y making every support action a best response
    is a polytope. It is non-empty iff one of its vertices exists, and each
    vertex solves the equality constraints plus a choice of tight
    inequalities.
    """
    _player(player)
    M = _own_matrix(game, player)
    n_own, k = M.shape
    support = _support(strategy, support_tol)
    a0 = support[0]
    others = [a for a in range(n_own) if a not in support]
    eq_rows = [np.ones(k)] + [M[a] - M[a0] for a in support[1:]]
    eq_rhs = [1.0] + [0.0] * (len(support) - 1)
    # inequalities G y >= 0: y_j >= 0 and (M[a0] - M[b]) y >= 0
    G = [np.eye(k)[j] for j in range(k)] + [M[a0] - M[b] for b in others]
    for size in range(0, min(k, len(G)) + 1):
        for tight in itertools.combinations(range(len(G)), size):
            A = np.array(eq_rows + [G[t] for t in tight])
            b = np.array(eq_rhs + [0.0] * size)
            if np.linalg.matrix_rank(A) < k:
                continue
            y, *_ = np.linalg.lstsq(A, b, rcond=None)
            if np.abs(A @ y - b).max() > 1e-9:
                continue
            if min(g @ y for g in G) >= -tol:
                return RationalityVerdict(True, y, 0.0, support)
    return RationalityVerdict(False, None, math.inf, support)


def min_rational_utility(game, strategy, player):
    """Worst utility of ``player`` against any individually rational co-player.

    A co-player mixture is rational exactly when its support lies in one best
    response set, and utility is linear in that mixture, so the minimum is
    attained at a rational pure co-action.
    """
    other = 2 if player == 1 else 1
    n_other = game.n_actions(other)
    vals = []
    for a in range(n_other):
        e = np.zeros(n_other)
        e[a] = 1.0
        if support_enumeration_check(game, e, other).rational:
            p, q = (strategy, e) if player == 1 else (e, strategy)
            vals.append(exact_utility(game, hg.values(p), hg.values(q), player))
    return min(vals)


@dataclass
class Step:
    observation: int
    actions: tuple
    rewards: tuple
    log_probs: tuple = (None, None)


@dataclass
class Trajectory:
    """One episode between a row agent and a column agent."""

    episode_id: int
    pairing: tuple
    phase: str
    steps: list = field(default_factory=list)
    weight: float = 1.0

    PHASES = ("lookahead", "evaluation", "partnerplay")

    def __post_init__(self):
        if self.phase not in self.PHASES:
            raise ContractViolation("unknown phase %r" % self.phase)


@dataclass
class RolloutBatch:
    """Vectorised batch of episodes for one pairing.

    ``actions`` and ``rewards`` have shape (episodes, horizon, 2).
    ``log_probs`` holds, per seat, a list of per-action log-prob tape
    references (or None when that seat needs no gradient).
    """

    pairing: tuple
    phase: str
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: tuple = (None, None)
    weight: float = 1.0

    @property
    def n_episodes(self):
        return self.actions.shape[0]

    @property
    def horizon(self):
        return self.actions.shape[1]

    def trajectory(self, e):
        steps = []
        for t in range(self.horizon):
            a = tuple(int(x) for x in self.actions[e, t])
            lp = tuple(None if self.log_probs[s] is None else self.log_probs[s][a[s]]
                       for s in (0, 1))
            steps.append(Step(0, a, tuple(float(x) for x in self.rewards[e, t]), lp))
        return Trajectory(e, self.pairing, self.phase, steps, self.weight)

    def trajectories(self):
        return [self.trajectory(e) for e in range(self.n_episodes)]


def make_rng(seed, *counter):
    """Counter-based generator keyed by ``seed``; counter words index the stream."""
    words = [int(c) & 0xFFFFFFFFFFFFFFFF for c in counter][:4]
    words += [0] * (4 - len(words))
    return np.random.Generator(np.random.Philox(key=int(seed), counter=words))


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(int(rng))


def _probs(x, n, what):
    _check_simplex(x, n, what)
    p = np.clip(np.asarray(hg.values(x), float), 0.0, None)
    return p / p.sum()


def sample_batch(game, p, q, n, rng, pairing=("row", "col"), phase="evaluation",
                 log_probs=(None, None), weight=1.0):
    """Sample ``n`` episodes with i.i.d. joint actions per step."""
    p = _probs(p, game.rows, "row policy")
    q = _probs(q, game.cols, "column policy")
    rng = _as_rng(rng)
    T = game.horizon
    a1 = rng.choice(game.rows, size=(n, T), p=p)
    a2 = rng.choice(game.cols, size=(n, T), p=q)
    actions = np.stack([a1, a2], axis=-1)
    rewards = np.stack([game.payoff1[a1, a2], game.payoff2[a1, a2]], axis=-1)
    return RolloutBatch(tuple(pairing), phase, actions, rewards, tuple(log_probs), weight)


def sample_episode(game, p, q, rng_seed, pairing=("row", "col"), phase="evaluation",
                   log_probs=(None, None), episode_id=0):
    """One episode; identical seeds give identical trajectories."""
    batch = sample_batch(game, p, q, 1, rng_seed, pairing, phase, log_probs)
    traj = batch.trajectory(0)
    traj.episode_id = episode_id
    return traj
