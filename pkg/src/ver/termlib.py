"""Symbolic term grammar: parsing, canonicalization, and evaluation.

A term is a product of factors, each either a variable power ``z1^3``, a
unary function of one bare variable ``sin(z2)``, or the lone constant
``1``. Libraries of terms evaluate into design matrices; per-variable
gradients are also available for losses that differentiate through the
library.
"""

import re
from dataclasses import dataclass

import numpy as np

from .errors import EvalError, InvalidArgumentError, ParseError

FUNCS = ("sin", "cos", "exp", "tanh", "log")

MAX_POWER = 6
DEFAULT_K_MAX = 25

#: positivity guard for log evaluation
LOG_EPS = 1e-8

_FUNC_VALUE = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "log": lambda z: np.log(np.abs(z) + LOG_EPS),
}

_FUNC_GRAD = {
    "sin": np.cos,
    "cos": lambda z: -np.sin(z),
    "exp": np.exp,
    "tanh": lambda z: 1.0 - np.tanh(z) ** 2,
    "log": lambda z: np.sign(z) / (np.abs(z) + LOG_EPS),
}


@dataclass(frozen=True, order=True)
class Term:
    """Canonical product of factors.

    ``poly`` is a tuple of (var_index, power) with 0-based variables, one
    entry per variable, sorted by variable. ``funcs`` is a tuple of
    (func_name, var_index) sorted by name then variable. Both empty means
    the constant term.
    """

    poly: tuple = ()
    funcs: tuple = ()

    def text(self):
        parts = [f"z{v + 1}" + (f"^{p}" if p > 1 else "") for v, p in self.poly]
        parts += [f"{f}(z{v + 1})" for f, v in self.funcs]
        return "*".join(parts) if parts else "1"

    def max_var(self):
        vs = [v for v, _ in self.poly] + [v for _, v in self.funcs]
        return max(vs) if vs else -1

    def value(self, states):
        """Evaluate on an (n, d) state matrix; returns length-n vector."""
        out = np.ones(len(states))
        for v, p in self.poly:
            out = out * states[:, v] ** p
        for f, v in self.funcs:
            out = out * _FUNC_VALUE[f](states[:, v])
        return out

    def grad(self, states):
        """Gradient wrt each state variable; returns an (n, d) matrix."""
        n, d = states.shape
        factors = []  # (value array, var, derivative array)
        for v, p in self.poly:
            z = states[:, v]
            dv = p * z ** (p - 1) if p > 1 else np.ones(n)
            factors.append((z ** p, v, dv))
        for f, v in self.funcs:
            z = states[:, v]
            factors.append((_FUNC_VALUE[f](z), v, _FUNC_GRAD[f](z)))
        out = np.zeros((n, d))
        if not factors:
            return out
        vals = np.stack([f[0] for f in factors])  # (m, n)
        m = len(factors)
        prefix = np.ones((m + 1, n))
        for j in range(m):
            prefix[j + 1] = prefix[j] * vals[j]
        suffix = np.ones((m + 1, n))
        for j in range(m - 1, -1, -1):
            suffix[j] = suffix[j + 1] * vals[j]
        for j, (_, v, dv) in enumerate(factors):
            out[:, v] += prefix[j] * suffix[j + 1] * dv
        return out

    def __str__(self):
        return self.text()


@dataclass(frozen=True)
class TermLibrary:
    """Ordered list of distinct canonical terms over ``dim`` variables."""

    terms: tuple
    dim: int

    def __post_init__(self):
        if not (1 <= len(self.terms)):
            raise InvalidArgumentError("library must contain at least one term")
        texts = [t.text() for t in self.terms]
        if len(set(texts)) != len(texts):
            dupes = sorted({t for t in texts if texts.count(t) > 1})
            raise InvalidArgumentError(f"duplicate terms in library: {dupes}")
        too_big = max(t.max_var() for t in self.terms)
        if too_big >= self.dim:
            raise InvalidArgumentError(
                f"term references z{too_big + 1} but dim={self.dim}")

    @property
    def k(self):
        return len(self.terms)

    def texts(self):
        return [t.text() for t in self.terms]

    def __iter__(self):
        return iter(self.terms)


def _make_factor_term(poly, funcs):
    merged = {}
    for v, p in poly:
        merged[v] = merged.get(v, 0) + p
    for v, p in merged.items():
        if not (1 <= p <= MAX_POWER):
            raise ParseError(f"combined power {p} of z{v + 1} outside 1..{MAX_POWER}")
    return Term(poly=tuple(sorted(merged.items())), funcs=tuple(sorted(funcs)))


_VAR_RE = re.compile(r"(z(\d+)|x|y)")
_POWER_RE = re.compile(r"\^(\d+)")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def parse_term(text, dim):
    """Parse one term string into its canonical Term.

    Accepts ``x``/``y`` as aliases for ``z1``/``z2``; whitespace is
    ignored. Raises ParseError with the byte offset of the offending
    token.
    """
    if dim < 1:
        raise InvalidArgumentError("dim must be >= 1")
    pos = 0
    n = len(text)
    poly = []
    funcs = []

    def skip_ws(p):
        while p < n and text[p].isspace():
            p += 1
        return p

    def parse_var(p, context):
        m = _VAR_RE.match(text, p)
        if not m:
            raise ParseError(f"expected a variable {context}", offset=p)
        if m.group(1) == "x":
            idx = 0
        elif m.group(1) == "y":
            idx = 1
        else:
            idx = int(m.group(2)) - 1
        if not (0 <= idx < dim):
            raise ParseError(f"variable z{idx + 1} out of range for dim={dim}",
                             offset=p)
        return idx, m.end()

    expecting_factor = True
    while True:
        pos = skip_ws(pos)
        if pos >= n:
            if expecting_factor:
                raise ParseError("unexpected end of term", offset=pos)
            break
        if not expecting_factor:
            if text[pos] == "*":
                pos += 1
                expecting_factor = True
                continue
            raise ParseError(f"expected '*' or end, found {text[pos]!r}", offset=pos)
        start = pos
        if text[pos] == "1":
            pos += 1
            if poly or funcs or skip_ws(pos) < n:
                raise ParseError("constant '1' must be the only factor",
                                 offset=start)
            expecting_factor = False
            continue
        name_match = _NAME_RE.match(text, pos)
        if name_match and skip_ws(name_match.end()) < n \
                and text[skip_ws(name_match.end())] == "(":
            fname = name_match.group(0)
            if fname not in FUNCS:
                raise ParseError(f"unknown function {fname!r}", offset=start)
            pos = skip_ws(name_match.end()) + 1
            pos = skip_ws(pos)
            idx, pos = parse_var(pos, f"inside {fname}(...)")
            pos = skip_ws(pos)
            if pos >= n or text[pos] != ")":
                raise ParseError(f"missing ')' for {fname}(...)", offset=pos)
            pos += 1
            funcs.append((fname, idx))
        else:
            idx, pos = parse_var(pos, "at factor start")
            power = 1
            m = _POWER_RE.match(text, skip_ws(pos))
            if m:
                power = int(m.group(1))
                if not (1 <= power <= MAX_POWER):
                    raise ParseError(f"power {power} outside 1..{MAX_POWER}",
                                     offset=skip_ws(pos))
                pos = m.end()
            poly.append((idx, power))
        expecting_factor = False

    return _make_factor_term(poly, funcs)


def parse_library(text, dim, k_max=DEFAULT_K_MAX):
    """Parse a comma-separated list of terms into a TermLibrary."""
    pieces = [p for p in (s.strip() for s in text.split(",")) if p]
    if not pieces:
        raise ParseError("empty library text")
    terms = []
    seen = set()
    for piece in pieces:
        term = parse_term(piece, dim)
        if term.text() not in seen:
            seen.add(term.text())
            terms.append(term)
    if len(terms) > k_max:
        raise InvalidArgumentError(f"library has {len(terms)} terms, cap is {k_max}")
    return TermLibrary(terms=tuple(terms), dim=dim)


def make_library(term_texts, dim, k_max=DEFAULT_K_MAX):
    """Build a TermLibrary from an iterable of term strings."""
    return parse_library(",".join(term_texts), dim, k_max=k_max)


def evaluate_library(library, states):
    """Evaluate every library term on an (n, d) state matrix -> (n, k)."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if states.shape[1] != library.dim:
        raise InvalidArgumentError(
            f"states have dim {states.shape[1]}, library expects {library.dim}")
    if not np.all(np.isfinite(states)):
        raise InvalidArgumentError("states must be finite")
    out = np.empty((len(states), library.k))
    with np.errstate(over="ignore", invalid="ignore"):
        for j, term in enumerate(library.terms):
            col = term.value(states)
            if not np.all(np.isfinite(col)):
                row = int(np.nonzero(~np.isfinite(col))[0][0])
                raise EvalError(
                    f"non-finite value of {term.text()} at row {row}",
                    row=row, term=term.text())
            out[:, j] = col
    return out


def evaluate_library_grad(library, states):
    """Per-variable gradients of every term -> (n, k, d)."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    out = np.empty((len(states), library.k, library.dim))
    for j, term in enumerate(library.terms):
        out[:, j, :] = term.grad(states)
    return out


def library_signature(library):
    """Order-independent deterministic identity string for a library."""
    return ",".join(sorted(library.texts()))
