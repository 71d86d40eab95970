"""Pure-Python scalar reverse-mode tape.

Nodes live in flat parallel lists (value, op code, two parent ids, one
constant). Backward sweeps either accumulate float adjoints or, with
``create_graph``, record the adjoint computation itself as new nodes so
the returned gradients can be differentiated again.
"""

import math

from ._common import (
    OP_LEAF, OP_CONST, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_NEG, OP_ADDC,
    OP_MULC, OP_EXP, OP_LOG, OP_SQRT, OP_POWC, OP_STOP,
    ContractViolation, StaleDependencyError, Gradients,
)

BACKEND = "python"


class Tape:
    """Append-only computation record for one update step."""

    def __init__(self):
        self.val = []
        self.op = []
        self.pa = []
        self.pb = []
        self.cst = []
        self.closed = False

    def __len__(self):
        return len(self.val)

    def _push(self, v, op, a=-1, b=-1, c=0.0):
        if self.closed:
            raise StaleDependencyError("stale dependency: tape was closed")
        self.val.append(v)
        self.op.append(op)
        self.pa.append(a)
        self.pb.append(b)
        self.cst.append(c)
        return len(self.val) - 1

    def leaf(self, value):
        return Var(self, self._push(float(value), OP_LEAF))

    def const(self, value):
        return Var(self, self._push(float(value), OP_CONST))

    def leaves(self, values):
        return [self.leaf(v) for v in values]

    def close(self):
        """Mark the tape dead; later use of its nodes raises."""
        self.closed = True

    def op_tag(self, idx):
        from ._common import OP_NAMES
        return OP_NAMES[self.op[idx]]

    def parents(self, idx):
        return [p for p in (self.pa[idx], self.pb[idx]) if p >= 0]

    # ------------------------------------------------------------------
    # primitive constructors on indices
    def _add(self, a, b):
        return self._push(self.val[a] + self.val[b], OP_ADD, a, b)

    def _sub(self, a, b):
        return self._push(self.val[a] - self.val[b], OP_SUB, a, b)

    def _mul(self, a, b):
        return self._push(self.val[a] * self.val[b], OP_MUL, a, b)

    def _div(self, a, b):
        x, y = self.val[a], self.val[b]
        if y == 0.0:
            r = math.nan if x == 0.0 else math.copysign(math.inf, x)
        else:
            r = x / y
        return self._push(r, OP_DIV, a, b)

    def _neg(self, a):
        return self._push(-self.val[a], OP_NEG, a)

    def _addc(self, a, c):
        return self._push(self.val[a] + c, OP_ADDC, a, -1, c)

    def _mulc(self, a, c):
        return self._push(self.val[a] * c, OP_MULC, a, -1, c)

    def _exp(self, a):
        x = self.val[a]
        return self._push(math.exp(x) if x < 709.0 else math.inf, OP_EXP, a)

    def _log(self, a):
        x = self.val[a]
        return self._push(math.log(x) if x > 0 else (-math.inf if x == 0 else math.nan), OP_LOG, a)

    def _sqrt(self, a):
        x = self.val[a]
        return self._push(math.sqrt(x) if x >= 0 else math.nan, OP_SQRT, a)

    def _powc(self, a, c):
        return self._push(self.val[a] ** c, OP_POWC, a, -1, c)

    def _stop(self, a):
        return self._push(self.val[a], OP_STOP, a)

    # ------------------------------------------------------------------
    def grad(self, root, wrt, create_graph=False):
        """Return d root / d w for each w in ``wrt``.

        Leaves that are not connected to ``root`` (or live on another tape)
        get a zero gradient and are listed in ``Gradients.disconnected``.
        """
        if not isinstance(root, Var):
            raise ContractViolation("root must be a scalar tape value")
        if root.tape is not self:
            raise ContractViolation("root belongs to a different tape")
        if self.closed:
            raise StaleDependencyError("stale dependency: tape was closed")
        wrt = list(wrt)
        targets = []
        for w in wrt:
            if isinstance(w, Var) and w.tape is self and w.idx <= root.idx:
                targets.append(w.idx)
            else:
                targets.append(-1)
        valid = [t for t in targets if t >= 0]
        r = root.idx
        if not valid:
            zero = self.const(0.0) if create_graph else 0.0
            return Gradients([zero] * len(wrt), list(range(len(wrt))))
        lo = min(valid)
        ops, pa, pb = self.op, self.pa, self.pb

        # forward mask: nodes in [lo, r] that depend on any target
        span = r - lo + 1
        dep = [False] * span
        for t in valid:
            dep[t - lo] = True
        for i in range(lo, r + 1):
            if dep[i - lo]:
                continue
            o = ops[i]
            if o == OP_STOP or o == OP_LEAF or o == OP_CONST:
                continue
            a = pa[i]
            b = pb[i]
            if (a >= lo and dep[a - lo]) or (b >= lo and dep[b - lo]):
                dep[i - lo] = True

        if create_graph:
            adj = self._sweep_graph(r, lo, dep)
            out = []
            disconnected = []
            zero = None
            for k, t in enumerate(targets):
                g = adj[t - lo] if t >= 0 else None
                if g is None:
                    if zero is None:
                        zero = self._push(0.0, OP_CONST)
                    g = zero
                    disconnected.append(k)
                out.append(Var(self, g))
            return Gradients(out, disconnected)

        adj, reach = self._sweep_numeric(r, lo, dep)
        out = []
        disconnected = []
        for k, t in enumerate(targets):
            if t < 0 or not reach[t - lo]:
                out.append(0.0)
                disconnected.append(k)
            else:
                out.append(adj[t - lo])
        return Gradients(out, disconnected)

    def _sweep_numeric(self, r, lo, dep):
        span = r - lo + 1
        adj = [0.0] * span
        reach = [False] * span
        adj[r - lo] = 1.0
        reach[r - lo] = True
        val, ops, pa, pb, cst = self.val, self.op, self.pa, self.pb, self.cst
        for i in range(r, lo - 1, -1):
            k = i - lo
            if not reach[k] or not dep[k]:
                continue
            o = ops[i]
            if o == OP_LEAF or o == OP_CONST or o == OP_STOP:
                continue
            g = adj[k]
            a = pa[i]
            b = pb[i]
            if o == OP_ADD:
                da, db = 1.0, 1.0
            elif o == OP_SUB:
                da, db = 1.0, -1.0
            elif o == OP_MUL:
                da, db = val[b], val[a]
            elif o == OP_DIV:
                vb = val[b]
                da, db = 1.0 / vb, -val[i] / vb
            elif o == OP_NEG:
                da, db = -1.0, 0.0
            elif o == OP_ADDC:
                da, db = 1.0, 0.0
            elif o == OP_MULC:
                da, db = cst[i], 0.0
            elif o == OP_EXP:
                da, db = val[i], 0.0
            elif o == OP_LOG:
                da, db = 1.0 / val[a], 0.0
            elif o == OP_SQRT:
                da, db = 0.5 / val[i], 0.0
            elif o == OP_POWC:
                c = cst[i]
                da, db = c * val[a] ** (c - 1.0), 0.0
            else:
                raise ContractViolation("unknown op code %d" % o)
            if a >= lo and dep[a - lo]:
                adj[a - lo] += g * da
                reach[a - lo] = True
            if b >= lo and dep[b - lo]:
                adj[b - lo] += g * db
                reach[b - lo] = True
        return adj, reach

    def _sweep_graph(self, r, lo, dep):
        span = r - lo + 1
        adj = [None] * span
        adj[r - lo] = self._push(1.0, OP_CONST)
        ops, pa, pb, cst = self.op, self.pa, self.pb, self.cst

        def acc(p, g):
            if p < lo or not dep[p - lo]:
                return
            cur = adj[p - lo]
            adj[p - lo] = g if cur is None else self._add(cur, g)

        for i in range(r, lo - 1, -1):
            k = i - lo
            g = adj[k]
            if g is None or not dep[k]:
                continue
            o = ops[i]
            if o == OP_LEAF or o == OP_CONST or o == OP_STOP:
                continue
            a = pa[i]
            b = pb[i]
            da = a >= lo and dep[a - lo]
            db = b >= lo and dep[b - lo]
            if o == OP_ADD:
                if da:
                    acc(a, g)
                if db:
                    acc(b, g)
            elif o == OP_SUB:
                if da:
                    acc(a, g)
                if db:
                    acc(b, self._neg(g))
            elif o == OP_MUL:
                if da:
                    acc(a, self._mul(g, b))
                if db:
                    acc(b, self._mul(g, a))
            elif o == OP_DIV:
                if da:
                    acc(a, self._div(g, b))
                if db:
                    acc(b, self._neg(self._div(self._mul(g, i), b)))
            elif o == OP_NEG:
                acc(a, self._neg(g))
            elif o == OP_ADDC:
                acc(a, g)
            elif o == OP_MULC:
                acc(a, self._mulc(g, cst[i]))
            elif o == OP_EXP:
                acc(a, self._mul(g, i))
            elif o == OP_LOG:
                acc(a, self._div(g, a))
            elif o == OP_SQRT:
                acc(a, self._mulc(self._div(g, i), 0.5))
            elif o == OP_POWC:
                c = cst[i]
                if c == 1.0:
                    acc(a, g)
                elif c == 2.0:
                    acc(a, self._mulc(self._mul(g, a), 2.0))
                else:
                    acc(a, self._mulc(self._mul(g, self._powc(a, c - 1.0)), c))
            else:
                raise ContractViolation("unknown op code %d" % o)
        return adj


def _coerce(tape, x):
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ContractViolation("operands live on different tapes")
        return x.idx
    return None


class Var:
    """Handle to one scalar node on a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.val[self.idx]

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return "Var(%r, op=%s)" % (self.value, self.tape.op_tag(self.idx))

    def __add__(self, other):
        t = self.tape
        j = _coerce(t, other)
        if j is None:
            return Var(t, t._addc(self.idx, float(other)))
        return Var(t, t._add(self.idx, j))

    __radd__ = __add__

    def __sub__(self, other):
        t = self.tape
        j = _coerce(t, other)
        if j is None:
            return Var(t, t._addc(self.idx, -float(other)))
        return Var(t, t._sub(self.idx, j))

    def __rsub__(self, other):
        t = self.tape
        return Var(t, t._addc(t._neg(self.idx), float(other)))

    def __mul__(self, other):
        t = self.tape
        j = _coerce(t, other)
        if j is None:
            return Var(t, t._mulc(self.idx, float(other)))
        return Var(t, t._mul(self.idx, j))

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = self.tape
        j = _coerce(t, other)
        if j is None:
            return Var(t, t._mulc(self.idx, 1.0 / float(other)))
        return Var(t, t._div(self.idx, j))

    def __rtruediv__(self, other):
        t = self.tape
        return Var(t, t._mulc(t._powc(self.idx, -1.0), float(other)))

    def __neg__(self):
        t = self.tape
        return Var(t, t._neg(self.idx))

    def __pow__(self, c):
        if isinstance(c, Var):
            raise ContractViolation("only constant exponents are supported")
        t = self.tape
        return Var(t, t._powc(self.idx, float(c)))

    def exp(self):
        t = self.tape
        return Var(t, t._exp(self.idx))

    def log(self):
        t = self.tape
        return Var(t, t._log(self.idx))

    def sqrt(self):
        t = self.tape
        return Var(t, t._sqrt(self.idx))

    def stop_gradient(self):
        t = self.tape
        return Var(t, t._stop(self.idx))
