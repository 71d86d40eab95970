# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scalar reverse-mode tape.

Same node layout and API as the pure-Python backend, with node storage in
growable C arrays and both backward sweeps in C loops.
"""

from libc.math cimport exp as c_exp, log as c_log, sqrt as c_sqrt, pow as c_pow, NAN, INFINITY
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memset

from ._common import ContractViolation, StaleDependencyError, Gradients, OP_NAMES

BACKEND = "compiled"

cdef enum:
    OP_LEAF = 0
    OP_CONST = 1
    OP_ADD = 2
    OP_SUB = 3
    OP_MUL = 4
    OP_DIV = 5
    OP_NEG = 6
    OP_ADDC = 7
    OP_MULC = 8
    OP_EXP = 9
    OP_LOG = 10
    OP_SQRT = 11
    OP_POWC = 12
    OP_STOP = 13


cdef class Tape:
    cdef double* val
    cdef double* cst
    cdef int* op
    cdef int* pa
    cdef int* pb
    cdef int n
    cdef int cap
    cdef public bint closed

    def __cinit__(self):
        self.cap = 256
        self.n = 0
        self.val = <double*>malloc(self.cap * sizeof(double))
        self.cst = <double*>malloc(self.cap * sizeof(double))
        self.op = <int*>malloc(self.cap * sizeof(int))
        self.pa = <int*>malloc(self.cap * sizeof(int))
        self.pb = <int*>malloc(self.cap * sizeof(int))
        if not (self.val and self.cst and self.op and self.pa and self.pb):
            raise MemoryError()
        self.closed = False

    def __dealloc__(self):
        free(self.val)
        free(self.cst)
        free(self.op)
        free(self.pa)
        free(self.pb)

    def __len__(self):
        return self.n

    cdef int _grow(self) except -1:
        cdef int cap = self.cap * 2
        cdef void* p
        p = realloc(self.val, cap * sizeof(double))
        if not p:
            raise MemoryError()
        self.val = <double*>p
        p = realloc(self.cst, cap * sizeof(double))
        if not p:
            raise MemoryError()
        self.cst = <double*>p
        p = realloc(self.op, cap * sizeof(int))
        if not p:
            raise MemoryError()
        self.op = <int*>p
        p = realloc(self.pa, cap * sizeof(int))
        if not p:
            raise MemoryError()
        self.pa = <int*>p
        p = realloc(self.pb, cap * sizeof(int))
        if not p:
            raise MemoryError()
        self.pb = <int*>p
        self.cap = cap
        return 0

    cdef int _push(self, double v, int o, int a, int b, double c) except -1:
        if self.closed:
            raise StaleDependencyError("stale dependency: tape was closed")
        if self.n == self.cap:
            self._grow()
        cdef int i = self.n
        self.val[i] = v
        self.op[i] = o
        self.pa[i] = a
        self.pb[i] = b
        self.cst[i] = c
        self.n = i + 1
        return i

    cdef inline Var _wrap(self, int i):
        cdef Var v = Var.__new__(Var)
        v.tape = self
        v.idx = i
        return v

    def leaf(self, value):
        return self._wrap(self._push(float(value), OP_LEAF, -1, -1, 0.0))

    def const(self, value):
        return self._wrap(self._push(float(value), OP_CONST, -1, -1, 0.0))

    def leaves(self, values):
        return [self.leaf(v) for v in values]

    def close(self):
        self.closed = True

    def op_tag(self, int idx):
        return OP_NAMES[self.op[idx]]

    def parents(self, int idx):
        return [p for p in (self.pa[idx], self.pb[idx]) if p >= 0]

    @property
    def values(self):
        return [self.val[i] for i in range(self.n)]

    # primitive constructors on indices
    cdef int _add(self, int a, int b) except -1:
        return self._push(self.val[a] + self.val[b], OP_ADD, a, b, 0.0)

    cdef int _sub(self, int a, int b) except -1:
        return self._push(self.val[a] - self.val[b], OP_SUB, a, b, 0.0)

    cdef int _mul(self, int a, int b) except -1:
        return self._push(self.val[a] * self.val[b], OP_MUL, a, b, 0.0)

    cdef int _div(self, int a, int b) except -1:
        cdef double vb = self.val[b]
        cdef double r
        if vb == 0.0:
            r = NAN if self.val[a] == 0.0 else (INFINITY if self.val[a] > 0 else -INFINITY)
        else:
            r = self.val[a] / vb
        return self._push(r, OP_DIV, a, b, 0.0)

    cdef int _neg(self, int a) except -1:
        return self._push(-self.val[a], OP_NEG, a, -1, 0.0)

    cdef int _addc(self, int a, double c) except -1:
        return self._push(self.val[a] + c, OP_ADDC, a, -1, c)

    cdef int _mulc(self, int a, double c) except -1:
        return self._push(self.val[a] * c, OP_MULC, a, -1, c)

    cdef int _exp(self, int a) except -1:
        return self._push(c_exp(self.val[a]), OP_EXP, a, -1, 0.0)

    cdef int _log(self, int a) except -1:
        cdef double x = self.val[a]
        cdef double r
        if x > 0:
            r = c_log(x)
        elif x == 0:
            r = -INFINITY
        else:
            r = NAN
        return self._push(r, OP_LOG, a, -1, 0.0)

    cdef int _sqrt(self, int a) except -1:
        cdef double x = self.val[a]
        return self._push(c_sqrt(x) if x >= 0 else NAN, OP_SQRT, a, -1, 0.0)

    cdef int _powc(self, int a, double c) except -1:
        return self._push(c_pow(self.val[a], c), OP_POWC, a, -1, c)

    cdef int _stop(self, int a) except -1:
        return self._push(self.val[a], OP_STOP, a, -1, 0.0)

    def grad(self, root, wrt, create_graph=False):
        """Return d root / d w for each w in ``wrt``.

        Leaves that are not connected to ``root`` (or live on another tape)
        get a zero gradient and are listed in ``Gradients.disconnected``.
        """
        if not isinstance(root, Var):
            raise ContractViolation("root must be a scalar tape value")
        if (<Var>root).tape is not self:
            raise ContractViolation("root belongs to a different tape")
        if self.closed:
            raise StaleDependencyError("stale dependency: tape was closed")
        cdef int r = (<Var>root).idx
        wrt = list(wrt)
        targets = []
        for w in wrt:
            if isinstance(w, Var) and (<Var>w).tape is self and (<Var>w).idx <= r:
                targets.append((<Var>w).idx)
            else:
                targets.append(-1)
        valid = [t for t in targets if t >= 0]
        if not valid:
            zero = self.const(0.0) if create_graph else 0.0
            return Gradients([zero] * len(wrt), list(range(len(wrt))))
        cdef int lo = min(valid)
        cdef int span = r - lo + 1
        cdef char* dep = <char*>malloc(span)
        if not dep:
            raise MemoryError()
        memset(dep, 0, span)
        cdef int i, o, a, b, t
        try:
            for t in valid:
                dep[t - lo] = 1
            for i in range(lo, r + 1):
                if dep[i - lo]:
                    continue
                o = self.op[i]
                if o == OP_STOP or o == OP_LEAF or o == OP_CONST:
                    continue
                a = self.pa[i]
                b = self.pb[i]
                if (a >= lo and dep[a - lo]) or (b >= lo and dep[b - lo]):
                    dep[i - lo] = 1
            if create_graph:
                return self._grad_graph(r, lo, span, dep, targets)
            return self._grad_numeric(r, lo, span, dep, targets)
        finally:
            free(dep)

    cdef object _grad_numeric(self, int r, int lo, int span, char* dep, list targets):
        cdef double* adj = <double*>malloc(span * sizeof(double))
        cdef char* reach = <char*>malloc(span)
        if not adj or not reach:
            free(adj)
            free(reach)
            raise MemoryError()
        cdef int i, k, o, a, b, t
        cdef double g, da, db, c
        try:
            memset(reach, 0, span)
            for k in range(span):
                adj[k] = 0.0
            adj[r - lo] = 1.0
            reach[r - lo] = 1
            for i in range(r, lo - 1, -1):
                k = i - lo
                if not reach[k] or not dep[k]:
                    continue
                o = self.op[i]
                if o == OP_LEAF or o == OP_CONST or o == OP_STOP:
                    continue
                g = adj[k]
                a = self.pa[i]
                b = self.pb[i]
                db = 0.0
                if o == OP_ADD:
                    da = 1.0
                    db = 1.0
                elif o == OP_SUB:
                    da = 1.0
                    db = -1.0
                elif o == OP_MUL:
                    da = self.val[b]
                    db = self.val[a]
                elif o == OP_DIV:
                    da = 1.0 / self.val[b]
                    db = -self.val[i] / self.val[b]
                elif o == OP_NEG:
                    da = -1.0
                elif o == OP_ADDC:
                    da = 1.0
                elif o == OP_MULC:
                    da = self.cst[i]
                elif o == OP_EXP:
                    da = self.val[i]
                elif o == OP_LOG:
                    da = 1.0 / self.val[a]
                elif o == OP_SQRT:
                    da = 0.5 / self.val[i]
                elif o == OP_POWC:
                    c = self.cst[i]
                    da = c * c_pow(self.val[a], c - 1.0)
                else:
                    raise ContractViolation("unknown op code %d" % o)
                if a >= lo and dep[a - lo]:
                    adj[a - lo] += g * da
                    reach[a - lo] = 1
                if b >= lo and dep[b - lo]:
                    adj[b - lo] += g * db
                    reach[b - lo] = 1
            out = []
            disconnected = []
            for k, t in enumerate(targets):
                if t < 0 or not reach[t - lo]:
                    out.append(0.0)
                    disconnected.append(k)
                else:
                    out.append(adj[t - lo])
            return Gradients(out, disconnected)
        finally:
            free(adj)
            free(reach)

    cdef inline int _acc(self, int* adj, int lo, char* dep, int p, int g) except -2:
        if p < lo or not dep[p - lo]:
            return 0
        cdef int cur = adj[p - lo]
        if cur < 0:
            adj[p - lo] = g
        else:
            adj[p - lo] = self._add(cur, g)
        return 0

    cdef object _grad_graph(self, int r, int lo, int span, char* dep, list targets):
        cdef int* adj = <int*>malloc(span * sizeof(int))
        if not adj:
            raise MemoryError()
        cdef int i, k, o, a, b, g, t, zero
        cdef bint hasa, hasb
        cdef double c
        try:
            for k in range(span):
                adj[k] = -1
            adj[r - lo] = self._push(1.0, OP_CONST, -1, -1, 0.0)
            for i in range(r, lo - 1, -1):
                k = i - lo
                g = adj[k]
                if g < 0 or not dep[k]:
                    continue
                o = self.op[i]
                if o == OP_LEAF or o == OP_CONST or o == OP_STOP:
                    continue
                a = self.pa[i]
                b = self.pb[i]
                hasa = a >= lo and dep[a - lo]
                hasb = b >= lo and dep[b - lo]
                if o == OP_ADD:
                    if hasa:
                        self._acc(adj, lo, dep, a, g)
                    if hasb:
                        self._acc(adj, lo, dep, b, g)
                elif o == OP_SUB:
                    if hasa:
                        self._acc(adj, lo, dep, a, g)
                    if hasb:
                        self._acc(adj, lo, dep, b, self._neg(g))
                elif o == OP_MUL:
                    if hasa:
                        self._acc(adj, lo, dep, a, self._mul(g, b))
                    if hasb:
                        self._acc(adj, lo, dep, b, self._mul(g, a))
                elif o == OP_DIV:
                    if hasa:
                        self._acc(adj, lo, dep, a, self._div(g, b))
                    if hasb:
                        self._acc(adj, lo, dep, b, self._neg(self._div(self._mul(g, i), b)))
                elif o == OP_NEG:
                    self._acc(adj, lo, dep, a, self._neg(g))
                elif o == OP_ADDC:
                    self._acc(adj, lo, dep, a, g)
                elif o == OP_MULC:
                    self._acc(adj, lo, dep, a, self._mulc(g, self.cst[i]))
                elif o == OP_EXP:
                    self._acc(adj, lo, dep, a, self._mul(g, i))
                elif o == OP_LOG:
                    self._acc(adj, lo, dep, a, self._div(g, a))
                elif o == OP_SQRT:
                    self._acc(adj, lo, dep, a, self._mulc(self._div(g, i), 0.5))
                elif o == OP_POWC:
                    c = self.cst[i]
                    if c == 1.0:
                        self._acc(adj, lo, dep, a, g)
                    elif c == 2.0:
                        self._acc(adj, lo, dep, a, self._mulc(self._mul(g, a), 2.0))
                    else:
                        self._acc(adj, lo, dep, a,
                                  self._mulc(self._mul(g, self._powc(a, c - 1.0)), c))
                else:
                    raise ContractViolation("unknown op code %d" % o)
            out = []
            disconnected = []
            zero = -1
            for k, t in enumerate(targets):
                g = adj[t - lo] if t >= 0 else -1
                if g < 0:
                    if zero < 0:
                        zero = self._push(0.0, OP_CONST, -1, -1, 0.0)
                    g = zero
                    disconnected.append(k)
                out.append(self._wrap(g))
            return Gradients(out, disconnected)
        finally:
            free(adj)


cdef class Var:
    """Handle to one scalar node on a tape."""

    cdef readonly Tape tape
    cdef readonly int idx

    @property
    def value(self):
        return self.tape.val[self.idx]

    def __float__(self):
        return self.tape.val[self.idx]

    def __repr__(self):
        return "Var(%r, op=%s)" % (self.value, self.tape.op_tag(self.idx))

    def __add__(self, other):
        cdef Tape t = self.tape
        if isinstance(other, Var):
            if (<Var>other).tape is not t:
                raise ContractViolation("operands live on different tapes")
            return t._wrap(t._add(self.idx, (<Var>other).idx))
        return t._wrap(t._addc(self.idx, float(other)))

    def __radd__(self, other):
        cdef Tape t = self.tape
        return t._wrap(t._addc(self.idx, float(other)))

    def __sub__(self, other):
        cdef Tape t = self.tape
        if isinstance(other, Var):
            if (<Var>other).tape is not t:
                raise ContractViolation("operands live on different tapes")
            return t._wrap(t._sub(self.idx, (<Var>other).idx))
        return t._wrap(t._addc(self.idx, -float(other)))

    def __rsub__(self, other):
        cdef Tape t = self.tape
        return t._wrap(t._addc(t._neg(self.idx), float(other)))

    def __mul__(self, other):
        cdef Tape t = self.tape
        if isinstance(other, Var):
            if (<Var>other).tape is not t:
                raise ContractViolation("operands live on different tapes")
            return t._wrap(t._mul(self.idx, (<Var>other).idx))
        return t._wrap(t._mulc(self.idx, float(other)))

    def __rmul__(self, other):
        cdef Tape t = self.tape
        return t._wrap(t._mulc(self.idx, float(other)))

    def __truediv__(self, other):
        cdef Tape t = self.tape
        if isinstance(other, Var):
            if (<Var>other).tape is not t:
                raise ContractViolation("operands live on different tapes")
            return t._wrap(t._div(self.idx, (<Var>other).idx))
        return t._wrap(t._mulc(self.idx, 1.0 / float(other)))

    def __rtruediv__(self, other):
        cdef Tape t = self.tape
        return t._wrap(t._mulc(t._powc(self.idx, -1.0), float(other)))

    def __neg__(self):
        cdef Tape t = self.tape
        return t._wrap(t._neg(self.idx))

    def __pow__(self, c, mod):
        if isinstance(c, Var):
            raise ContractViolation("only constant exponents are supported")
        cdef Tape t = self.tape
        return t._wrap(t._powc(self.idx, float(c)))

    def exp(self):
        cdef Tape t = self.tape
        return t._wrap(t._exp(self.idx))

    def log(self):
        cdef Tape t = self.tape
        return t._wrap(t._log(self.idx))

    def sqrt(self):
        cdef Tape t = self.tape
        return t._wrap(t._sqrt(self.idx))

    def stop_gradient(self):
        cdef Tape t = self.tape
        return t._wrap(t._stop(self.idx))
