"""Symbolic expressions in the jet coordinates of curvature and torsion.

Expressions are built from exact rational constants, jet variables
``kappa, kappa_s, ..., tau, tau_s, ...``, sums, products, integer powers,
quotients and the unary functions sin, cos, exp, sqrt. ``simplify``
rewrites any expression into a canonical normal form: a sum of Laurent
monomials over atomic factors (jet variables, function values, inverted
sums), with all positive integer powers of sums expanded. The normal form
makes printing deterministic and lets structurally equal quantities cancel
exactly, which the variational identities rely on (a formally exact zero
stays an exact zero).

Floats enter only at evaluation time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

from .errors import (
    DivisionByZeroError,
    EvaluationDomainError,
    ExprSyntaxError,
    JetOrderLimitError,
    MissingJetOrderError,
    TauNotAllowedError,
    UnknownIdentifierError,
)

FAMILIES = ("kappa", "tau")
MAX_PARSE_ORDER = 8
UNARY_FUNCTIONS = ("sin", "cos", "exp", "sqrt")


# ---------------------------------------------------------------------------
# AST nodes
# ---------------------------------------------------------------------------

class JetExpression:
    """Base class; all arithmetic operators return simplified expressions."""

    __slots__ = ()

    def __add__(self, other):
        return simplify(Add((self, _as_expr(other))))

    __radd__ = __add__

    def __sub__(self, other):
        return simplify(Add((self, Mul((_MINUS_ONE, _as_expr(other))))))

    def __rsub__(self, other):
        return simplify(Add((_as_expr(other), Mul((_MINUS_ONE, self)))))

    def __mul__(self, other):
        return simplify(Mul((self, _as_expr(other))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return simplify(Mul((self, Pow(_as_expr(other), -1))))

    def __rtruediv__(self, other):
        return simplify(Mul((_as_expr(other), Pow(self, -1))))

    def __pow__(self, k):
        if not isinstance(k, int):
            raise TypeError("exponents must be integers")
        return simplify(Pow(self, k))

    def __neg__(self):
        return simplify(Mul((_MINUS_ONE, self)))

    def __str__(self):
        return render(self)

    def __repr__(self):
        return f"<{type(self).__name__} {render(self)}>"


@dataclass(frozen=True, repr=False)
class Const(JetExpression):
    value: Fraction

    def __post_init__(self):
        if not isinstance(self.value, Fraction):
            object.__setattr__(self, "value", Fraction(self.value))


@dataclass(frozen=True, repr=False)
class JetVar(JetExpression):
    family: str
    order: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.order < 0:
            raise ValueError("derivative order must be >= 0")


@dataclass(frozen=True, repr=False)
class Add(JetExpression):
    terms: tuple


@dataclass(frozen=True, repr=False)
class Mul(JetExpression):
    factors: tuple


@dataclass(frozen=True, repr=False)
class Pow(JetExpression):
    base: JetExpression
    exponent: int

    def __post_init__(self):
        if not isinstance(self.exponent, int):
            raise TypeError("exponents must be integers")


@dataclass(frozen=True, repr=False)
class Call(JetExpression):
    fn: str
    arg: JetExpression

    def __post_init__(self):
        if self.fn not in UNARY_FUNCTIONS:
            raise ValueError(f"unknown function {self.fn!r}")


ZERO = Const(Fraction(0))
ONE = Const(Fraction(1))
_MINUS_ONE = Const(Fraction(-1))


def _as_expr(x):
    if isinstance(x, JetExpression):
        return x
    if isinstance(x, (int, Fraction)):
        return Const(Fraction(x))
    raise TypeError(f"cannot coerce {type(x).__name__} to an expression")


def jet(family, order=0):
    return JetVar(family, order)


def const(value):
    return Const(Fraction(value))


# ---------------------------------------------------------------------------
# Normal form: dict {monomial: Fraction} with monomial = tuple of (atom, exp)
# sorted by atom key. Atoms are jet variables, function calls with canonical
# arguments, and content-free sums (the latter only with negative exponents).
# ---------------------------------------------------------------------------

def _atom_key(atom):
    if isinstance(atom, JetVar):
        return (0, FAMILIES.index(atom.family), atom.order, "")
    if isinstance(atom, Call):
        return (1, 0, 0, f"{atom.fn}({render(atom.arg)})")
    return (2, 0, 0, render(atom))


def _mono_mul(m1, m2):
    merged = dict(m1)
    for atom, e in m2:
        e2 = merged.get(atom, 0) + e
        if e2:
            merged[atom] = e2
        else:
            del merged[atom]
    return tuple(sorted(merged.items(), key=lambda it: _atom_key(it[0])))


def _p_add(p1, p2):
    out = dict(p1)
    for m, c in p2.items():
        c2 = out.get(m, 0) + c
        if c2:
            out[m] = c2
        else:
            out.pop(m, None)
    return out


def _p_mul(p1, p2):
    out = {}
    for m1, c1 in p1.items():
        for m2, c2 in p2.items():
            m = _mono_mul(m1, m2)
            c = out.get(m, 0) + c1 * c2
            if c:
                out[m] = c
            else:
                out.pop(m, None)
    return out


def _p_pow(p, k):
    out = {(): Fraction(1)}
    base = p
    n = k
    while n:
        if n & 1:
            out = _p_mul(out, base)
        n >>= 1
        if n:
            base = _p_mul(base, base)
    return out


def _p_scale(p, c):
    if not c:
        return {}
    return {m: c * q for m, q in p.items()}


def _p_const(c):
    return {(): Fraction(c)} if c else {}


def _p_atom(atom, exp=1):
    return {((atom, exp),): Fraction(1)}


def _content(p):
    """gcd of the coefficients, signed so the leading monomial is positive."""
    monos = sorted(p, key=_mono_sort_key, reverse=True)
    lead = p[monos[0]]
    num = 0
    den = 1
    for c in p.values():
        num = math.gcd(num, abs(c.numerator))
        den = math.lcm(den, c.denominator)
    content = Fraction(num, den)
    return -content if lead < 0 else content


def _expand_positive_sum_atoms(p):
    """Re-expand sum atoms that acquired a positive exponent (via inversion)."""
    out = {}
    for mono, c in p.items():
        poly = {(): c}
        plain = []
        for atom, e in mono:
            if e > 0 and not isinstance(atom, (JetVar, Call)):
                poly = _p_mul(poly, _p_pow(_to_poly(atom), e))
            else:
                plain.append((atom, e))
        key = tuple(sorted(plain, key=lambda it: _atom_key(it[0])))
        out = _p_add(out, _p_mul(poly, {key: Fraction(1)}))
    return out


def _p_inv(p):
    if not p:
        raise DivisionByZeroError("division by an expression that simplifies to 0")
    if len(p) == 1:
        (mono, c), = p.items()
        inv = tuple(sorted(((a, -e) for a, e in mono), key=lambda it: _atom_key(it[0])))
        return _expand_positive_sum_atoms({inv: 1 / c})
    content = _content(p)
    atom = _from_poly(_p_scale(p, 1 / content))
    return _p_scale(_p_atom(atom, -1), 1 / content)


def _to_poly(e):
    if isinstance(e, Const):
        return _p_const(e.value)
    if isinstance(e, JetVar):
        return _p_atom(e)
    if isinstance(e, Call):
        arg = simplify(e.arg)
        if e.fn == "sqrt" and isinstance(arg, Const) and arg.value >= 0:
            rn = math.isqrt(arg.value.numerator)
            rd = math.isqrt(arg.value.denominator)
            if rn * rn == arg.value.numerator and rd * rd == arg.value.denominator:
                return _p_const(Fraction(rn, rd))
        return _p_atom(Call(e.fn, arg))
    if isinstance(e, Add):
        out = {}
        for t in e.terms:
            out = _p_add(out, _to_poly(t))
        return out
    if isinstance(e, Mul):
        out = _p_const(1)
        for f in e.factors:
            out = _p_mul(out, _to_poly(f))
        return out
    if isinstance(e, Pow):
        base, k = e.base, e.exponent
        while isinstance(base, Pow):
            k *= base.exponent
            base = base.base
        if k == 0:
            return _p_const(1)
        pb = _to_poly(base)
        if len(pb) == 1 and () in pb:
            # pure constant: fold exactly
            c = pb[()]
            if c == 0 and k < 0:
                raise DivisionByZeroError("0 raised to a negative power")
            return _p_const(c**k)
        if k > 0:
            return _p_pow(pb, k)
        return _p_pow(_p_inv(pb), -k)
    raise TypeError(f"not an expression node: {e!r}")


def _mono_sort_key(mono):
    # Descending lexicographic order on (atom key, exponent) pairs, highest
    # atom first; ties broken by total degree. Sorting with reverse=True puts
    # highest-derivative terms first, which fixes the printed golden forms.
    pairs = sorted(((_atom_key(a), e) for a, e in mono), reverse=True)
    degree = sum(e for _, e in mono)
    return (tuple(pairs), degree)


def _from_poly(p):
    if not p:
        return ZERO
    terms = []
    for mono in sorted(p, key=_mono_sort_key, reverse=True):
        c = p[mono]
        factors = []
        for atom, e in sorted(mono, key=lambda it: _atom_key(it[0])):
            factors.append(atom if e == 1 else Pow(atom, e))
        if not factors:
            terms.append(Const(c))
        elif c == 1 and len(factors) == 1:
            terms.append(factors[0])
        elif c == 1:
            terms.append(Mul(tuple(factors)))
        else:
            terms.append(Mul((Const(c), *factors)))
    if len(terms) == 1:
        return terms[0]
    return Add(tuple(terms))


def simplify(e):
    """Canonical normal form; idempotent."""
    return _from_poly(_to_poly(_as_expr(e)))


# ---------------------------------------------------------------------------
# Printing (canonical; emits the same grammar the parser accepts)
# ---------------------------------------------------------------------------

def _jet_name(v):
    return v.family + ("_" + "s" * v.order if v.order else "")


def _atom_str(atom):
    if isinstance(atom, JetVar):
        return _jet_name(atom)
    if isinstance(atom, Call):
        return f"{atom.fn}({render(atom.arg)})"
    return f"({render(atom)})"


def _factor_str(atom, e):
    s = _atom_str(atom)
    return s if e == 1 else f"{s}^{e}"


def _term_str(e):
    """Render one canonical term as num[/den]; may start with '-'."""
    if isinstance(e, Const):
        c, factors = e.value, []
    elif isinstance(e, Mul):
        fs = list(e.factors)
        if isinstance(fs[0], Const):
            c, factors = fs[0].value, fs[1:]
        else:
            c, factors = Fraction(1), fs
    else:
        c, factors = Fraction(1), [e]
    num_parts, den_parts = [], []
    for f in factors:
        atom, exp = (f.base, f.exponent) if isinstance(f, Pow) else (f, 1)
        if exp > 0:
            num_parts.append(_factor_str(atom, exp))
        else:
            den_parts.append(_factor_str(atom, -exp))
    sign = "-" if c < 0 else ""
    c = abs(c)
    if c.numerator != 1 or not num_parts:
        num_parts.insert(0, str(c.numerator))
    if c.denominator != 1:
        den_parts.insert(0, str(c.denominator))
    num = "*".join(num_parts)
    if not den_parts:
        return sign + num
    den = "*".join(den_parts)
    if len(den_parts) > 1:
        den = f"({den})"
    return f"{sign}{num}/{den}"


@lru_cache(maxsize=None)
def render(e):
    """Canonical text form. Assumes a canonical (simplified) expression."""
    if isinstance(e, Add):
        out = _term_str(e.terms[0])
        for t in e.terms[1:]:
            s = _term_str(t)
            out += f" - {s[1:]}" if s.startswith("-") else f" + {s}"
        return out
    return _term_str(e)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()\[\]]))"
)
_JET_RE = re.compile(r"(kappa|tau)(_s*)?$")


class _Parser:
    def __init__(self, text, group=None):
        self.text = text
        self.group = group
        self.pos = 0
        self.tok = None
        self.tok_start = 0
        self._advance()

    def _advance(self):
        m = _TOKEN_RE.match(self.text, self.pos)
        if m is None:
            rest = self.text[self.pos:]
            if rest.strip():
                raise ExprSyntaxError(
                    f"unexpected character {rest.strip()[0]!r}",
                    self.pos + len(rest) - len(rest.lstrip()),
                )
            self.tok = None
            self.tok_start = len(self.text)
            return
        self.tok = m
        self.tok_start = m.start(m.lastgroup)
        self.pos = m.end()

    def _expect_op(self, op):
        if self.tok is None or self.tok["op"] != op:
            raise ExprSyntaxError(f"expected {op!r}", self.tok_start)
        self._advance()

    def parse(self):
        e = self.parse_sum()
        if self.tok is not None:
            raise ExprSyntaxError("unexpected trailing input", self.tok_start)
        return e

    def parse_sum(self):
        terms = [self.parse_product()]
        while self.tok is not None and self.tok["op"] in ("+", "-"):
            op = self.tok["op"]
            self._advance()
            t = self.parse_product()
            terms.append(t if op == "+" else Mul((_MINUS_ONE, t)))
        return terms[0] if len(terms) == 1 else Add(tuple(terms))

    def parse_product(self):
        factors = [self.parse_factor()]
        while self.tok is not None and self.tok["op"] in ("*", "/"):
            op = self.tok["op"]
            self._advance()
            f = self.parse_factor()
            factors.append(f if op == "*" else Pow(f, -1))
        return factors[0] if len(factors) == 1 else Mul(tuple(factors))

    def parse_factor(self):
        if self.tok is not None and self.tok["op"] == "-":
            self._advance()
            return Mul((_MINUS_ONE, self.parse_factor()))
        base = self.parse_atom()
        if self.tok is not None and self.tok["op"] == "^":
            self._advance()
            return Pow(base, self._parse_exponent())
        return base

    def _parse_exponent(self):
        sign = 1
        if self.tok is not None and self.tok["op"] == "-":
            sign = -1
            self._advance()
        if self.tok is None or self.tok["num"] is None or "." in self.tok["num"]:
            raise ExprSyntaxError("expected an integer exponent", self.tok_start)
        k = int(self.tok["num"])
        self._advance()
        return sign * k

    def _parse_int(self):
        if self.tok is None or self.tok["num"] is None or "." in self.tok["num"]:
            raise ExprSyntaxError("expected an integer", self.tok_start)
        k = int(self.tok["num"])
        self._advance()
        return k

    def parse_atom(self):
        tok = self.tok
        if tok is None:
            raise ExprSyntaxError("unexpected end of input", self.tok_start)
        if tok["num"] is not None:
            self._advance()
            return Const(Fraction(tok["num"]))
        if tok["op"] == "(":
            self._advance()
            e = self.parse_sum()
            self._expect_op(")")
            return e
        if tok["ident"] is not None:
            return self._parse_ident(tok["ident"], tok.start("ident"))
        raise ExprSyntaxError(f"unexpected {tok.group().strip()!r}", self.tok_start)

    def _parse_ident(self, name, start):
        self._advance()
        if name in UNARY_FUNCTIONS:
            self._expect_op("(")
            arg = self.parse_sum()
            self._expect_op(")")
            return Call(name, arg)
        m = _JET_RE.match(name)
        if m is None:
            raise UnknownIdentifierError(f"unknown identifier {name!r}", start)
        family = m.group(1)
        suffix = m.group(2)
        if suffix == "_":
            raise ExprSyntaxError(
                "derivative suffix must be one or more 's' characters",
                start + len(family) + 1,
            )
        order = len(suffix) - 1 if suffix else 0
        if self.tok is not None and self.tok["op"] == "[":
            if suffix:
                raise ExprSyntaxError(
                    "cannot combine a suffix with bracket notation", self.tok_start
                )
            self._advance()
            order = self._parse_int()
            self._expect_op("]")
        if order > MAX_PARSE_ORDER:
            raise JetOrderLimitError(
                f"jet order {order} exceeds the supported maximum {MAX_PARSE_ORDER}"
            )
        if family == "tau" and self.group == "se2":
            raise TauNotAllowedError("tau is not available for the group SE(2)")
        return JetVar(family, order)


def parse_lagrangian(text, group=None):
    """Parse expression text into a canonical JetExpression.

    ``group='se2'`` rejects any use of tau.
    """
    return simplify(_Parser(text, group=group).parse())


# ---------------------------------------------------------------------------
# Structure queries
# ---------------------------------------------------------------------------

def max_order(e, family):
    """Highest derivative order of ``family`` in e, or -1 when absent."""
    if isinstance(e, JetVar):
        return e.order if e.family == family else -1
    if isinstance(e, Call):
        return max_order(e.arg, family)
    if isinstance(e, Pow):
        return max_order(e.base, family)
    if isinstance(e, Add):
        return max((max_order(t, family) for t in e.terms), default=-1)
    if isinstance(e, Mul):
        return max((max_order(f, family) for f in e.factors), default=-1)
    return -1


def contains_family(e, family):
    return max_order(e, family) >= 0


def is_zero(e):
    return isinstance(e, Const) and e.value == 0


# ---------------------------------------------------------------------------
# Calculus: total derivative, partial derivatives, Euler operators,
# multiplier elimination
# ---------------------------------------------------------------------------

def _p_derive(p, atom_rule):
    """Apply a derivation defined by atom_rule(atom) -> poly to a poly."""
    out = {}
    for mono, c in p.items():
        for i, (atom, e) in enumerate(mono):
            datom = atom_rule(atom)
            if not datom:
                continue
            rest = list(mono)
            if e == 1:
                del rest[i]
            else:
                rest[i] = (atom, e - 1)
            piece = _p_mul({tuple(rest): c * e}, datom)
            out = _p_add(out, piece)
    return out


_CHAIN = {
    "sin": lambda u: _p_atom(Call("cos", u)),
    "cos": lambda u: _p_scale(_p_atom(Call("sin", u)), Fraction(-1)),
    "exp": lambda u: _p_atom(Call("exp", u)),
    "sqrt": lambda u: _p_scale(_p_atom(Call("sqrt", u), -1), Fraction(1, 2)),
}


def _atom_ds(atom):
    if isinstance(atom, JetVar):
        return _p_atom(JetVar(atom.family, atom.order + 1))
    if isinstance(atom, Call):
        return _p_mul(_CHAIN[atom.fn](atom.arg), _p_derive(_to_poly(atom.arg), _atom_ds))
    # content-free sum atom
    return _p_derive(_to_poly(atom), _atom_ds)


def d_s(e):
    """Formal total derivative with respect to arc length."""
    return _from_poly(_p_derive(_to_poly(_as_expr(e)), _atom_ds))


def partial_jet(e, family, order):
    """Partial derivative with respect to the jet variable (family, order)."""

    def rule(atom):
        if isinstance(atom, JetVar):
            if atom.family == family and atom.order == order:
                return _p_const(1)
            return {}
        if isinstance(atom, Call):
            return _p_mul(_CHAIN[atom.fn](atom.arg), _p_derive(_to_poly(atom.arg), rule))
        return _p_derive(_to_poly(atom), rule)

    return _from_poly(_p_derive(_to_poly(_as_expr(e)), rule))


def euler_operator(e, family):
    """Variational derivative: sum_m (-1)^m D_s^m (dL/d family_m)."""
    e = _as_expr(e)
    top = max_order(e, family)
    acc = {}
    for m in range(top + 1):
        p = _to_poly(partial_jet(e, family, m))
        for _ in range(m):
            p = _p_derive(p, _atom_ds)
        acc = _p_add(acc, p if m % 2 == 0 else _p_scale(p, Fraction(-1)))
    return _from_poly(acc)


def _multiplier_sum(L, family):
    """sum_{m>=1} sum_{j<m} (-1)^j D_s^j (dL/d f_m) f_{m-j}."""
    acc = ZERO
    for m in range(1, max_order(L, family) + 1):
        dLdm = partial_jet(L, family, m)
        term = dLdm
        for j in range(m):
            sign = 1 if j % 2 == 0 else -1
            acc = acc + sign * term * JetVar(family, m - j)
            term = d_s(term)
    return acc


def lambda_se2(L):
    """Arc-length multiplier for a planar Lagrangian in the kappa family."""
    L = _as_expr(L)
    return simplify(_multiplier_sum(L, "kappa") - L)


def lambda_se3(L):
    """Arc-length multiplier for a spatial Lagrangian in kappa and tau."""
    L = _as_expr(L)
    tau = JetVar("tau", 0)
    return simplify(
        2 * tau * euler_operator(L, "tau")
        - L
        + _multiplier_sum(L, "kappa")
        + _multiplier_sum(L, "tau")
    )


# ---------------------------------------------------------------------------
# Numeric jets and evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InvariantJet:
    """Numeric jet values at one arc-length point."""

    kappa_derivs: tuple
    tau_derivs: tuple = ()
    s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kappa_derivs", tuple(float(v) for v in self.kappa_derivs))
        object.__setattr__(self, "tau_derivs", tuple(float(v) for v in self.tau_derivs))

    def value(self, family, order):
        derivs = self.kappa_derivs if family == "kappa" else self.tau_derivs
        if order >= len(derivs):
            raise MissingJetOrderError(
                f"jet provides {family} derivatives up to order {len(derivs) - 1}, "
                f"order {order} requested"
            )
        return derivs[order]


def evaluate(e, jet):
    """Evaluate an expression at a numeric jet (IEEE double arithmetic)."""
    e = _as_expr(e)
    if isinstance(e, Const):
        return float(e.value)
    if isinstance(e, JetVar):
        return jet.value(e.family, e.order)
    if isinstance(e, Add):
        return math.fsum(evaluate(t, jet) for t in e.terms)
    if isinstance(e, Mul):
        out = 1.0
        for f in e.factors:
            out *= evaluate(f, jet)
        return out
    if isinstance(e, Pow):
        b = evaluate(e.base, jet)
        if b == 0.0 and e.exponent < 0:
            raise DivisionByZeroError(f"division by zero in {render(simplify(e))!r}")
        return b**e.exponent
    if isinstance(e, Call):
        a = evaluate(e.arg, jet)
        if e.fn == "sqrt":
            if a < 0:
                raise EvaluationDomainError(f"sqrt of negative value in {render(simplify(e))!r}")
            return math.sqrt(a)
        return getattr(math, e.fn)(a)
    raise TypeError(f"not an expression node: {e!r}")


def _emit(e):
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, JetVar):
        arr = "k" if e.family == "kappa" else "t"
        return f"{arr}[{e.order}]"
    if isinstance(e, Add):
        return "(" + " + ".join(_emit(t) for t in e.terms) + ")"
    if isinstance(e, Mul):
        return "(" + "*".join(_emit(f) for f in e.factors) + ")"
    if isinstance(e, Pow):
        return f"({_emit(e.base)})**({e.exponent})"
    if isinstance(e, Call):
        fn = {"sin": "math.sin", "cos": "math.cos", "exp": "math.exp", "sqrt": "math.sqrt"}[e.fn]
        return f"{fn}({_emit(e.arg)})"
    raise TypeError(f"not an expression node: {e!r}")


@lru_cache(maxsize=None)
def compile_expression(e):
    """Compile to ``f(kappa_seq, tau_seq) -> float`` for hot loops."""
    src = f"def _fn(k, t):\n    return {_emit(e)}\n"
    ns = {"math": math}
    exec(src, ns)  # noqa: S102 - source is generated from our own AST
    return ns["_fn"]


def evaluate_compiled(e, jet):
    return compile_expression(e)(jet.kappa_derivs, jet.tau_derivs)
