"""Compare the compiled and pure-Python tape backends.

Times three workloads per backend: a first-order gradient of a long
expression, a nested (second-order) gradient, and full exact shaping
steps on fig2_coop. Prints one line per workload and backend.
"""

import argparse
import time

import numpy as np

from rationalpg import hograd as hg
from rationalpg.algorithms import AlgorithmSpec, build_graph, init_policies
from rationalpg.games import get_game
from rationalpg.shaping import LookaheadConfig, exact_rpg_step


def first_order(n):
    t = hg.new_tape()
    xs = t.leaves(np.linspace(-1, 1, n))
    acc = xs[0]
    for x in xs[1:]:
        acc = acc * 0.5 + hg.exp(x * 0.1) * x
    hg.grad(acc, xs)


def second_order(n):
    t = hg.new_tape()
    xs = t.leaves(np.linspace(-1, 1, n))
    y = hg.logsumexp([x * x for x in xs])
    gs = hg.grad(y, xs, create_graph=True)
    hg.grad(hg.vsum(gs), xs)


def shaping_steps(k, lookahead=4):
    game = get_game("fig2_coop")
    spec = AlgorithmSpec("AT_RPG")
    graph = build_graph(spec)
    pols = init_policies(spec, graph, game, seed=0)
    cfg = LookaheadConfig(n=lookahead)
    for _ in range(k):
        pols = exact_rpg_step(graph, pols, cfg, game).policies


def bench(fn, arg, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(arg)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=2000, help="expression length")
    ap.add_argument("--steps", type=int, default=20, help="shaping steps")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    work = [("first-order grad", first_order, args.size),
            ("second-order grad", second_order, args.size // 4),
            ("exact shaping steps N=4", shaping_steps, args.steps)]
    backends = hg.available_backends()
    print("backends: %s" % ", ".join(backends))
    for name, fn, arg in work:
        times = {}
        for b in backends:
            with hg.use_backend(b):
                times[b] = bench(fn, arg, args.repeat)
        line = "  ".join("%s=%.4fs" % (b, times[b]) for b in backends)
        if "compiled" in times and "python" in times:
            line += "  speedup=%.1fx" % (times["python"] / times["compiled"])
        print("%-26s %s" % (name, line))


if __name__ == "__main__":
    main()
