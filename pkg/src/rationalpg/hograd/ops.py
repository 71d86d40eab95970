"""Backend-agnostic helpers over tape values and plain floats.

Every function accepts either tape values or Python floats and returns the
same kind, so the same code computes exact utilities with or without a tape.
"""

import math
from dataclasses import dataclass, field, replace

from ._common import ContractViolation, Gradients
from . import VAR_TYPES


class NumericalError(ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


def is_var(x):
    return isinstance(x, VAR_TYPES)


def value(x):
    return x.value if isinstance(x, VAR_TYPES) else float(x)


def values(xs):
    return [value(x) for x in xs]


def exp(x):
    return x.exp() if isinstance(x, VAR_TYPES) else math.exp(x)


def log(x):
    return x.log() if isinstance(x, VAR_TYPES) else math.log(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, VAR_TYPES) else math.sqrt(x)


def stop_gradient(x):
    """Identity in value, zero local partial to every ancestor."""
    return x.stop_gradient() if isinstance(x, VAR_TYPES) else float(x)


def magic_box(tau):
    """DiCE operator exp(tau - stop_gradient(tau)); value is exactly 1."""
    return exp(tau - stop_gradient(tau))


def vsum(xs):
    total = None
    for x in xs:
        total = x if total is None else total + x
    return 0.0 if total is None else total


def dot(coeffs, xs):
    """Sum of c_i * x_i with float coefficients; zero terms are skipped."""
    total = None
    for c, x in zip(coeffs, xs):
        c = float(c)
        if c == 0.0:
            continue
        term = x if c == 1.0 else (-x if c == -1.0 else x * c)
        total = term if total is None else total + term
    return 0.0 if total is None else total


def logsumexp(xs):
    xs = list(xs)
    m = max(value(x) for x in xs)
    return log(vsum(exp(x - m) for x in xs)) + m


def softmax_and_log(logits):
    """Return (probabilities, log-probabilities) of softmax(logits).

    The max shift is a plain constant, so it carries no gradient.
    """
    m = max(value(x) for x in logits)
    shifted = [x - m for x in logits]
    e = [exp(s) for s in shifted]
    z = vsum(e)
    logz = log(z)
    probs = [ei / z for ei in e]
    logp = [s - logz for s in shifted]
    return probs, logp


def softmax(logits):
    return softmax_and_log(logits)[0]


def log_softmax(logits):
    return softmax_and_log(logits)[1]


def entropy(logits):
    """Shannon entropy of softmax(logits) in nats."""
    probs, logp = softmax_and_log(logits)
    return -vsum(p * lp for p, lp in zip(probs, logp))


def grad(root, wrt, create_graph=False):
    """Gradient of a scalar tape value with respect to ``wrt``.

    Returns ``Gradients``; entries are tape values when ``create_graph``.
    """
    if not isinstance(root, VAR_TYPES):
        if isinstance(root, (list, tuple)):
            raise ContractViolation("root must be a scalar, got a sequence")
        wrt = list(wrt)
        zero = 0.0
        return Gradients([zero] * len(wrt), range(len(wrt)))
    return root.tape.grad(root, wrt, create_graph)


tape_backward = grad


@dataclass
class OptimizerState:
    """State for a differentiable SGD or Adam step.

    ``step`` counts Adam updates (bias correction); SGD leaves it at zero.
    Moments may hold tape values during lookahead.
    """
    kind: str = "sgd"
    step: int = 0
    m: list = field(default=None)
    v: list = field(default=None)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractViolation("optimizer kind must be 'sgd' or 'adam'")

    def detached(self):
        """Copy with moments reduced to floats."""
        return replace(
            self,
            m=None if self.m is None else values(self.m),
            v=None if self.v is None else values(self.v),
        )


def optimizer_step(params, grads, state, lr):
    """Ascent step: SGD gives p + lr*g; Adam the bias-corrected update.

    Works on floats or tape values; with tape values the result stays
    differentiable with respect to everything ``grads`` depends on.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ContractViolation(
            "shape mismatch: %d params vs %d grads" % (len(params), len(grads)))
    if lr < 0:
        raise ContractViolation("learning rate must be non-negative")
    if state.kind == "sgd":
        if lr == 0:
            return params, state
        return [p + lr * g for p, g in zip(params, grads)], state
    n = len(params)
    m = state.m if state.m is not None else [0.0] * n
    v = state.v if state.v is not None else [0.0] * n
    if len(m) != n or len(v) != n:
        raise ContractViolation("Adam moments do not match parameter count")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m = [b1 * mi + (1.0 - b1) * g for mi, g in zip(m, grads)]
    new_v = [b2 * vi + (1.0 - b2) * (g * g) for vi, g in zip(v, grads)]
    c1 = 1.0 / (1.0 - b1 ** t)
    c2 = 1.0 / (1.0 - b2 ** t)
    new_p = []
    for p, mi, vi in zip(params, new_m, new_v):
        # tiny floor keeps the sqrt derivative finite when a gradient is 0
        denom = sqrt(vi * c2 + 1e-30) + state.eps
        new_p.append(p + lr * (mi * c1) / denom)
    return new_p, replace(state, step=t, m=new_m, v=new_v)


def clip_by_global_norm(grads, max_norm):
    """Scale float gradients so their L2 norm is at most ``max_norm``."""
    g = [float(x) for x in grads]
    norm = math.sqrt(sum(x * x for x in g))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        g = [x * s for x in g]
    return g, norm


@dataclass
class FDReport:
    max_rel_error: float
    analytic: list
    numeric: list
    h: float

    def passed(self, tol):
        return self.max_rel_error < tol


def finite_diff_check(f, params, h=1e-5):
    """Compare tape gradients of ``f`` with central differences.

    ``f(tape, xs)`` receives a fresh tape and leaf values for ``params`` and
    returns a scalar tape value. The report holds the max over parameters of
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12). A discrepancy
    (for example from an internal stop_gradient) is reported, not raised.
    """
    from . import new_tape

    if h <= 0:
        raise ContractViolation("h must be positive")
    params = [float(p) for p in params]

    def evaluate(ps):
        tape = new_tape()
        out = f(tape, tape.leaves(ps))
        val = value(out)
        if not math.isfinite(val):
            raise NumericalError("f is not finite at %r (value %r)" % (ps, val))
        return val

    tape = new_tape()
    xs = tape.leaves(params)
    root = f(tape, xs)
    if not math.isfinite(value(root)):
        raise NumericalError("f is not finite at %r" % (params,))
    analytic = [float(g) for g in grad(root, xs)]
    numeric = []
    for i in range(len(params)):
        up = list(params)
        dn = list(params)
        up[i] += h
        dn[i] -= h
        numeric.append((evaluate(up) - evaluate(dn)) / (2 * h))
    err = 0.0
    for a, n in zip(analytic, numeric):
        err = max(err, abs(a - n) / (abs(a) + abs(n) + 1e-12))
    return FDReport(err, analytic, numeric, h)
