"""Scalar reverse-mode autodiff with nested gradients.

Two interchangeable tape backends exist: a compiled Cython kernel
(``_ctape``) and a pure-Python fallback (``_pytape``). The compiled one is
picked at import when it is importable; setting ``RATIONALPG_PURE_PYTHON=1``
forces the fallback. ``use_backend`` switches at runtime.
"""

import contextlib
import os

from . import _pytape
from ._common import ContractViolation, Gradients, StaleDependencyError, OP_NAMES

_BACKENDS = {"python": _pytape}
try:
    from . import _ctape
except ImportError:  # extension not built
    _ctape = None
else:
    _BACKENDS["compiled"] = _ctape

if _ctape is not None and not os.environ.get("RATIONALPG_PURE_PYTHON"):
    _active = _ctape
else:
    _active = _pytape

VAR_TYPES = tuple(m.Var for m in _BACKENDS.values())


def available_backends():
    return sorted(_BACKENDS)


def active_backend():
    return _active.BACKEND


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ContractViolation("unknown or unbuilt backend %r" % name)
    _active = _BACKENDS[name]


@contextlib.contextmanager
def use_backend(name):
    prev = _active.BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def new_tape():
    """Fresh tape from the active backend."""
    return _active.Tape()


def tape_class(name=None):
    return (_BACKENDS[name] if name else _active).Tape


from .ops import (  # noqa: E402
    NumericalError, OptimizerState, FDReport,
    is_var, value, values, exp, log, sqrt, stop_gradient, magic_box,
    vsum, dot, logsumexp, log_softmax, softmax, softmax_and_log, entropy,
    grad, tape_backward, optimizer_step, clip_by_global_norm,
    finite_diff_check,
)

__all__ = [
    "ContractViolation", "StaleDependencyError", "NumericalError", "Gradients",
    "OptimizerState", "FDReport", "OP_NAMES", "VAR_TYPES",
    "available_backends", "active_backend", "set_backend", "use_backend",
    "new_tape", "tape_class",
    "is_var", "value", "values", "exp", "log", "sqrt", "stop_gradient",
    "magic_box", "vsum", "dot", "logsumexp", "log_softmax", "softmax",
    "softmax_and_log", "entropy", "grad", "tape_backward", "optimizer_step",
    "clip_by_global_norm", "finite_diff_check",
]
