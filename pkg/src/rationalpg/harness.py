"""Command-line interface, experiment configs, sweeps and self-check suites.

Subcommands: run, crossplay, sweep, check, audit.
Exit codes: 0 success, 1 usage, 2 numerical failure, 3 check-suite failure.
"""

import argparse
import concurrent.futures
import configparser
import contextlib
import csv
import dataclasses
import glob
import hashlib
import itertools
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import hograd as hg
from .hograd import ContractViolation, NumericalError
from .games import (
    GAMES, get_game, rationality_check, support_enumeration_check, exact_utility,
)
from .shaping import (
    LookaheadConfig, manipulator_gradients, objective_function,
)
from .algorithms import (
    AlgorithmSpec, KINDS, build_graph, init_policies, run_training, crossplay_eval,
    sabotage_audit, normalize_kind,
)

SCHEMA_VERSION = 1
OUTPUT_ENV = "RATIONALPG_OUTPUT"
METRIC_COLUMNS = ("step", "agent", "edge", "reward_mean", "loss", "grad_norm", "probs")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


class ConfigError(ContractViolation):
    pass


# ----------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    """One experiment: algorithm, game, update hyperparameters, seeds.

    Defaults are the matrix-game values.
    """

    algo: str = "AT_RPG"
    game: str = "fig2_coop"
    mode: str = "exact"
    batch_size: int = 128
    steps: int = 3000
    seeds: list = field(default_factory=lambda: [0])
    output: str = None
    checkpoint_interval: int = 0
    init_scale: float = 0.01
    population: int = 2
    diversity_lambda: float = 0.25
    victim: str = None
    sequential: bool = False
    victim_lookahead: bool = True
    window: int = 200
    threshold: float = 0.01
    lookahead: LookaheadConfig = field(default_factory=LookaheadConfig)

    def __post_init__(self):
        self.algo = normalize_kind(self.algo)
        if self.output is None:
            self.output = os.environ.get(OUTPUT_ENV, "runs")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if self.mode not in ("exact", "sampled"):
            raise ConfigError("mode must be 'exact' or 'sampled'")
        if int(self.steps) < 0:
            raise ConfigError("steps must be non-negative")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be positive")
        if self.game not in GAMES and not os.path.exists(self.game):
            raise ConfigError("game file not found: %s" % self.game)
        if self.victim is not None and not os.path.exists(self.victim):
            raise ConfigError("victim checkpoint not found: %s" % self.victim)

    def spec(self):
        return AlgorithmSpec(self.algo, population=self.population,
                             diversity_lambda=self.diversity_lambda, victim=self.victim,
                             victim_lookahead=self.victim_lookahead,
                             sequential=self.sequential)

    def as_dict(self):
        d = dataclasses.asdict(self)
        d["lookahead"] = dataclasses.asdict(self.lookahead)
        return d

    def config_hash(self):
        """Hash of everything that affects emitted numbers except the seed."""
        d = self.as_dict()
        for k in ("seeds", "output", "checkpoint_interval"):
            d.pop(k)
        if self.game not in GAMES:
            with open(self.game, "rb") as fh:
                d["game_file"] = hashlib.sha256(fh.read()).hexdigest()
        if self.victim:
            with open(self.victim, "rb") as fh:
                d["victim_file"] = hashlib.sha256(fh.read()).hexdigest()
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_RUN_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "lookahead"}
_LA_FIELDS = {f.name: f for f in dataclasses.fields(LookaheadConfig)}
# accepted section names for run-level keys
_RUN_SECTIONS = ("run", "algorithm", "experiment")


def _coerce(text, default, name):
    text = str(text).strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean for %s, got %r" % (name, text))
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, list):
        return [int(x) for x in text.replace(",", " ").split()]
    if text.lower() in ("", "none"):
        return None
    return text


def _line_of(path, section, key):
    try:
        with open(path) as fh:
            cur = None
            for i, line in enumerate(fh, 1):
                s = line.strip()
                if s.startswith("[") and s.endswith("]"):
                    cur = s[1:-1].strip()
                elif cur == section and s.split("=")[0].split(":")[0].strip() == key:
                    return i
    except OSError:
        pass
    return 0


def _defaults():
    d = {}
    for name, f in _RUN_FIELDS.items():
        if f.default is not dataclasses.MISSING:
            d[name] = f.default
        else:
            d[name] = f.default_factory()
    return d


def _assign(values, la_values, section, key, raw, where):
    section = section.lower()
    if section in _RUN_SECTIONS:
        if key not in _RUN_FIELDS:
            raise ConfigError("%s: unknown key %r in [%s]" % (where, key, section))
        default = _defaults()[key]
        if key in ("victim", "output") or default is None:
            default = ""
        try:
            values[key] = _coerce(raw, default, key)
        except ValueError as exc:
            raise ConfigError("%s: [%s] %s: %s" % (where, section, key, exc)) from None
    elif section == "lookahead":
        if key not in _LA_FIELDS:
            raise ConfigError("%s: unknown key %r in [lookahead]" % (where, key))
        try:
            la_values[key] = _coerce(raw, _LA_FIELDS[key].default, key)
        except ValueError as exc:
            raise ConfigError("%s: [lookahead] %s: %s" % (where, key, exc)) from None
    else:
        raise ConfigError("%s: unknown section [%s]" % (where, section))


def load_config(path=None, overrides=()):
    """Parse an INI experiment file, then apply ``section.key=value`` overrides."""
    values, la_values = {}, {}
    if path:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except FileNotFoundError:
            raise ConfigError("config file not found: %s" % path) from None
        except configparser.Error as exc:
            raise ConfigError("%s: %s" % (path, exc)) from None
        for section in cp.sections():
            for key, raw in cp[section].items():
                where = "%s:%d" % (path, _line_of(path, section, key))
                _assign(values, la_values, section, key, raw, where)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override %r is not section.key=value" % item)
        lhs, raw = item.split("=", 1)
        section, _, key = lhs.strip().rpartition(".")
        _assign(values, la_values, section or "run", key, raw, "override %r" % item)
    return make_config(values, la_values)


def make_config(values, la_values=None):
    try:
        la = LookaheadConfig(**(la_values or {}))
        return ExperimentConfig(lookahead=la, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ----------------------------------------------------------------------
# runs

@dataclass
class RunRecord:
    config_hash: str
    seed: int
    metrics: list
    checkpoints: list
    wall_clock: float
    outcome: str
    run_dir: str = None
    converged_at: int = None
    swings: int = 0
    oscillation: bool = False
    final_tv: float = float("inf")
    error: str = None
    final_probs: dict = field(default_factory=dict)

    def summary(self):
        return ("seed=%d outcome=%s steps_to_converge=%s swings=%d oscillation=%s "
                "wall=%.2fs hash=%s" % (self.seed, self.outcome, self.converged_at,
                                        self.swings, str(self.oscillation).lower(),
                                        self.wall_clock, self.config_hash))


def write_metrics_csv(path, rows, config_hash="", seed=0):
    with open(path, "w", newline="") as fh:
        fh.write("# rationalpg metrics schema=%d config_hash=%s seed=%d\n"
                 % (SCHEMA_VERSION, config_hash, seed))
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"], r["agent"], r["edge"], repr(float(r["reward_mean"])),
                        repr(float(r["loss"])), repr(float(r["grad_norm"])), r["probs"]])
    return path


def read_metrics_csv(path):
    with open(path) as fh:
        head = fh.readline()
        if "schema=" not in head:
            raise ContractViolation("%s: missing schema header" % path)
        return list(csv.DictReader(fh))


def run_dir_for(cfg, seed):
    tag = "%s_%s_%s" % (cfg.algo.lower(), os.path.splitext(os.path.basename(cfg.game))[0],
                        cfg.config_hash()[:10])
    return os.path.join(cfg.output, tag, "seed%d" % seed)


def run_experiment(cfg, seed, write=True, log_every=1):
    """Train one seed; writes metrics, checkpoints and a record file."""
    game = get_game(cfg.game)
    h = cfg.config_hash()
    rd = run_dir_for(cfg, seed) if write else None
    ck = os.path.join(rd, "checkpoints") if rd else None
    if rd:
        os.makedirs(rd, exist_ok=True)
    res = run_training(cfg.spec(), game, cfg.lookahead, steps=cfg.steps, seed=seed,
                       mode=cfg.mode, batch_size=cfg.batch_size, checkpoint_dir=ck,
                       checkpoint_interval=cfg.checkpoint_interval,
                       init_scale=cfg.init_scale, window=cfg.window,
                       threshold=cfg.threshold, log_every=log_every)
    final = {a: p.probs(p.seats[0]).tolist() for a, p in res.policies.items()}
    rec = RunRecord(h, seed, res.metrics, res.checkpoints, res.wall_clock, res.outcome, rd,
                    res.converged_at, res.swings, res.oscillation, res.final_tv, res.error,
                    final)
    if rd:
        write_metrics_csv(os.path.join(rd, "metrics.csv"), res.metrics, h, seed)
        cp = configparser.ConfigParser()
        cp["record"] = {
            "schema": str(SCHEMA_VERSION), "config_hash": h, "seed": str(seed),
            "outcome": rec.outcome, "steps": str(res.steps),
            "converged_at": str(rec.converged_at), "swings": str(rec.swings),
            "oscillation": str(rec.oscillation).lower(), "final_tv": repr(rec.final_tv),
            "wall_clock": "%.3f" % rec.wall_clock, "error": rec.error or "",
            "checkpoints": "\n".join(rec.checkpoints),
        }
        cp["config"] = {k: json.dumps(v, default=str) for k, v in cfg.as_dict().items()}
        with open(os.path.join(rd, "record.ini"), "w") as fh:
            cp.write(fh)
    return rec


def cli_run(cfg, out=None):
    out = out or sys.stdout
    records = []
    for seed in cfg.seeds:
        rec = run_experiment(cfg, seed)
        print(rec.summary(), file=out)
        if rec.error:
            print("  error: %s" % rec.error, file=out)
        records.append(rec)
    return records


# ----------------------------------------------------------------------
# sweeps

def parse_grid(items):
    """["lookahead.n=1,2,4"] -> {"lookahead.n": ["1", "2", "4"]}"""
    grid = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError("grid entry %r is not key=v1,v2,..." % item)
        k, vs = item.split("=", 1)
        vals = [v.strip() for v in vs.split(",") if v.strip()]
        if not vals:
            raise ConfigError("grid entry %r has no values" % item)
        grid[k.strip()] = vals
    return grid


def _sweep_job(args):
    path, overrides, seed = args
    cfg = load_config(path, overrides)
    rec = run_experiment(cfg, seed, log_every=10)
    rec.metrics = []  # already on disk; keep the pickle small
    return rec


def cli_sweep(path, overrides, grid, workers=None, out=None, summary_path=None):
    """Cartesian product of ``grid`` over the base config, in a process pool."""
    out = out or sys.stdout
    base = load_config(path, overrides)
    keys = list(grid)
    combos = list(itertools.product(*[grid[k] for k in keys])) if keys else [()]
    jobs, labels = [], []
    for combo in combos:
        ov = list(overrides) + ["%s=%s" % (k, v) for k, v in zip(keys, combo)]
        cfg = load_config(path, ov)  # validate before spawning
        for seed in cfg.seeds:
            jobs.append((path, ov, seed))
            labels.append(combo)
    workers = workers or os.cpu_count() or 1
    if workers == 1:
        records = [_sweep_job(j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_sweep_job, jobs))
    summary_path = summary_path or os.path.join(
        base.output, "sweep_%s.csv" % hashlib.sha256(
            json.dumps([path, list(overrides), grid], sort_keys=True).encode()).hexdigest()[:10])
    os.makedirs(os.path.dirname(summary_path) or ".", exist_ok=True)
    with open(summary_path, "w", newline="") as fh:
        fh.write("# rationalpg sweep schema=%d\n" % SCHEMA_VERSION)
        w = csv.writer(fh)
        w.writerow(keys + ["seed", "outcome", "converged_at", "swings", "oscillation",
                           "final_tv", "wall_clock", "config_hash", "run_dir"])
        for combo, rec in zip(labels, records):
            w.writerow(list(combo) + [rec.seed, rec.outcome, rec.converged_at, rec.swings,
                                      str(rec.oscillation).lower(), repr(rec.final_tv),
                                      "%.3f" % rec.wall_clock, rec.config_hash, rec.run_dir])
            desc = " ".join("%s=%s" % kv for kv in zip(keys, combo))
            print("%s %s" % (desc, rec.summary()) if desc else rec.summary(), file=out)
    print("summary: %s" % summary_path, file=out)
    return summary_path, records


# ----------------------------------------------------------------------
# check suites

@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self):
        return "[%s] %-44s %s  %s" % (self.suite, self.name, "PASS" if self.passed else "FAIL",
                                      self.detail)


def _flipped_magic_box(tau):
    # fault-injection fixture: forward value still 1, gradient sign flipped
    return hg.exp(hg.stop_gradient(tau) - tau)


@contextlib.contextmanager
def mutated_magic_box():
    """Temporarily replace magic_box with a sign-flipped version."""
    from .hograd import ops
    saved = (hg.magic_box, ops.magic_box)
    hg.magic_box = ops.magic_box = _flipped_magic_box
    try:
        yield
    finally:
        hg.magic_box, ops.magic_box = saved


GRAD_CASES = (
    ("fig2_coop", "AT"), ("fig2_coop", "AT_RPG"), ("fig2_coop", "PAIRED_RPG"),
    ("fig12_chicken", "AT_RPG"), ("appB_sabotage", "AD"), ("appB_sabotage", "AD_RPG"),
    ("fig2_coop", "SP"),
)


def grad_suite(h=1e-5, tol=1e-5, lookaheads=(1, 2)):
    """Finite differences against tape gradients for every exact objective."""
    out = []
    fig2 = get_game("fig2_coop")

    def util(tape, xs):
        p = hg.softmax(xs)
        return exact_utility(fig2, p, [0.2, 0.3, 0.5], 1)

    r = hg.finite_diff_check(util, [0.3, -0.2], h)
    out.append(CheckResult("grad", "exact utility wrt victim logits", r.passed(tol),
                           "max rel err %.2e (h=%g)" % (r.max_rel_error, h)))
    for gname, kind in GRAD_CASES:
        game = get_game(gname)
        spec = AlgorithmSpec(kind)
        for n in lookaheads if spec.is_rpg else (1,):
            eps = 0.1 if spec.is_rpg else 0.0
            cfg = LookaheadConfig(n=n, partnerplay=eps)
            graph = build_graph(spec, eps)
            pols = init_policies(spec, graph, game, seed=11, init_scale=1.0)
            worst = 0.0
            for node in graph.nodes:
                f = objective_function(graph, pols, cfg, game, node.agent_id)
                worst = max(worst, hg.finite_diff_check(f, pols[node.agent_id].flat(),
                                                        h).max_rel_error)
            out.append(CheckResult("grad", "%s %s N=%d all objectives" % (gname, kind, n),
                                   worst < tol, "max rel err %.2e" % worst))
    if h > 1e-4:
        out.append(CheckResult("grad", "step size note", True,
                               "h=%g is coarse; truncation error dominates the reported "
                               "errors" % h))
    return out


def oracle_suite(n_random=100, seed=0, delta=0.01):
    """rationality_check against the support-enumeration oracle."""
    out = []
    rng = np.random.default_rng(seed)
    total = agree = 0
    bad = []
    for name, game in GAMES.items():
        for player in (1, 2):
            n = game.n_actions(player)
            cases = [np.eye(n)[i] for i in range(n)] + [np.full(n, 1.0 / n)]
            for _ in range(n_random):
                # sparse random supports as well as full ones
                x = rng.dirichlet(np.ones(n))
                if rng.random() < 0.5:
                    x[rng.random(n) < 0.4] = 0.0
                    if x.sum() == 0:
                        x[rng.integers(n)] = 1.0
                    x = x / x.sum()
                cases.append(x)
            for x in cases:
                a = rationality_check(game, x, player, delta).rational
                b = support_enumeration_check(game, x, player).rational
                total += 1
                agree += a == b
                if a != b and len(bad) < 3:
                    bad.append("%s p%d %s" % (name, player, np.round(x, 3).tolist()))
    out.append(CheckResult("oracle", "grid check vs support enumeration", agree == total,
                           "%d/%d agree%s" % (agree, total,
                                              ("; e.g. " + ", ".join(bad)) if bad else "")))
    return out


def dice_suite(trials=20, batch_size=10000, need=19, lookahead=1):
    """Magic-box identities and sampled-vs-exact manipulator gradients."""
    out = []
    worst = 0.0
    for tau0 in (-3.0, -0.5, 0.0, 0.7, 2.5):
        t = hg.new_tape()
        x = t.leaf(tau0)
        worst = max(worst, abs(hg.value(hg.magic_box(x)) - 1.0))
    out.append(CheckResult("dice", "magic box forward is 1", worst < 1e-12,
                           "max |box-1| %.1e" % worst))
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        theta = rng.normal(size=3)
        a = int(rng.integers(3))
        adv = float(rng.normal())
        t = hg.new_tape()
        xs = t.leaves(theta)
        tau = hg.log_softmax(xs)[a]
        box = hg.magic_box(tau) * hg.stop_gradient(t.const(adv))
        g = hg.grad(box, xs)
        # analytic score function: adv * (onehot - softmax)
        p = np.exp(theta - theta.max())
        p /= p.sum()
        ref = adv * (np.eye(3)[a] - p)
        worst = max(worst, float(np.abs(np.asarray(g, float) - ref).max()))
    out.append(CheckResult("dice", "score-function identity", worst < 1e-8,
                           "max abs err %.1e" % worst))
    for gname, kind, m in (("fig2_coop", "AT_RPG", "adversary_m"),
                           ("appB_sabotage", "AD_RPG", "member0_m")):
        game = get_game(gname)
        spec = AlgorithmSpec(kind)
        graph = build_graph(spec)
        cfg = LookaheadConfig(n=lookahead)
        hits = 0
        for k in range(trials):
            pols = init_policies(spec, graph, game, seed=100 + k, init_scale=1.0)
            ge = manipulator_gradients(graph, pols, cfg, game)[m]
            gs = manipulator_gradients(graph, pols, cfg, game, sampled=True,
                                       batch_size=batch_size, seed=k)[m]
            hits += float(ge @ gs) > 0
        out.append(CheckResult("dice", "%s %s sampled vs exact gradient" % (gname, kind),
                               hits >= need, "%d/%d positive inner products (batch %d)"
                               % (hits, trials, batch_size)))
    return out


SUITES = {"grad": grad_suite, "oracle": oracle_suite, "dice": dice_suite}


def cli_check(suites, h=1e-5, mutate=False, out=None):
    out = out or sys.stdout
    results = []
    ctx = mutated_magic_box() if mutate else contextlib.nullcontext()
    with ctx:
        for s in suites:
            t0 = time.perf_counter()
            res = grad_suite(h=h) if s == "grad" else SUITES[s]()
            for r in res:
                print(r.line(), file=out)
            print("[%s] %.1fs" % (s, time.perf_counter() - t0), file=out)
            results += res
    return results


# ----------------------------------------------------------------------
# CLI

def _expand(patterns):
    paths = []
    for pat in patterns:
        hits = sorted(glob.glob(pat))
        if not hits:
            if any(c in pat for c in "*?["):
                raise ContractViolation("no checkpoints match %s" % pat)
            raise ContractViolation("checkpoint not found: %s" % pat)
        paths += hits
    return paths


def build_parser():
    ap = argparse.ArgumentParser(prog="rpg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    def run_args(p):
        p.add_argument("--config", help="INI experiment file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--game")
        p.add_argument("--algo", help="one of: " + ", ".join(k.lower().replace("_", "-")
                                                             for k in KINDS))
        p.add_argument("--lookahead", type=int, help="lookahead steps N")
        p.add_argument("--steps", type=int)
        p.add_argument("--seeds", help="comma separated seed list")
        p.add_argument("--mode", choices=("exact", "sampled"))
        p.add_argument("--batch-size", type=int)
        p.add_argument("--output", help="output root (default $%s or ./runs)" % OUTPUT_ENV)
        p.add_argument("--victim", help="victim checkpoint for attack variants")
        p.add_argument("--population", type=int)
        p.add_argument("--sequential", action="store_true",
                       help="train AD members one after another")
        p.add_argument("--checkpoint-interval", type=int)

    p = sub.add_parser("run", help="train one configuration for each seed")
    run_args(p)
    p = sub.add_parser("sweep", help="Cartesian-product sweep in a worker pool")
    run_args(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="swept parameter, e.g. lookahead.n=1,2,4,8 (repeatable)")
    p.add_argument("--workers", type=int)
    p.add_argument("--summary", help="summary CSV path")
    p = sub.add_parser("crossplay", help="cross-play grid over checkpoints")
    p.add_argument("checkpoints", nargs="+", help="checkpoint paths or globs")
    p.add_argument("--game", required=True)
    p.add_argument("--episodes", type=int, default=0, help="0 = exact utilities")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="crossplay.csv")
    p = sub.add_parser("check", help="run the self-check suites")
    p.add_argument("suites", nargs="*", help="any of %s (default: all)" % ", ".join(sorted(SUITES)))
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--mutate-magic-box", action="store_true",
                   help="fault injection: flip the magic-box gradient sign")
    p = sub.add_parser("audit", help="rationality audit of checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--game", required=True)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--support-tol", type=float, default=0.05)
    return ap


def _overrides(args):
    ov = list(args.set)
    flat = {"game": args.game, "algo": args.algo, "steps": args.steps, "mode": args.mode,
            "batch_size": args.batch_size, "output": args.output, "victim": args.victim,
            "population": args.population,
            "checkpoint_interval": args.checkpoint_interval}
    for k, v in flat.items():
        if v is not None:
            ov.append("run.%s=%s" % (k, v))
    if args.seeds is not None:
        ov.append("run.seeds=%s" % args.seeds)
    if args.sequential:
        ov.append("run.sequential=true")
    if args.lookahead is not None:
        ov.append("lookahead.n=%d" % args.lookahead)
    return ov


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.cmd == "run":
            recs = cli_run(load_config(args.config, _overrides(args)))
            return EXIT_NUMERIC if any(r.outcome == "diverged" for r in recs) else EXIT_OK
        if args.cmd == "sweep":
            _, recs = cli_sweep(args.config, _overrides(args), parse_grid(args.grid),
                                args.workers, summary_path=args.summary)
            return EXIT_NUMERIC if any(r.outcome == "diverged" for r in recs) else EXIT_OK
        if args.cmd == "crossplay":
            grid = crossplay_eval(_expand(args.checkpoints), get_game(args.game),
                                  args.episodes, args.seed)
            print(grid.to_csv(args.out))
            return EXIT_OK
        if args.cmd == "check":
            unknown = [x for x in args.suites if x not in SUITES]
            if unknown:
                print("error: unknown suite %s" % ", ".join(unknown), file=sys.stderr)
                return EXIT_USAGE
            res = cli_check(args.suites or sorted(SUITES), args.h, args.mutate_magic_box)
            return EXIT_OK if all(r.passed for r in res) else EXIT_CHECK
        if args.cmd == "audit":
            game = get_game(args.game)
            for path in _expand(args.checkpoints):
                for line in sabotage_audit(path, game, args.delta, args.support_tol).lines():
                    print("%s %s" % (path, line))
            return EXIT_OK
    except NumericalError as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
