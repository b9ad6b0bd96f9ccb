"""Trace polynomials, the trace derivative and the trace Poisson bracket.

Symbols are :class:`Letter` objects: ``q``/``p`` of a roster label, or a
constant matrix tag resolved against a registry at evaluation time.  The
identity constant ``1`` is always available.

Derivative convention: ``delta P / delta x`` is the matrix ``D`` with
``delta P = Tr(D delta x)`` (variation moved to the right end of the trace by
graded cyclicity).  With it the equations of motion
``qdot = eps dH/dp, pdot = -dH/dq`` satisfy ``dA/dt = {A, H}`` for fermionic
variables as well as bosonic ones.

Text grammar (whitespace-insensitive)::

    poly    := ["-"] term (("+" | "-") term)*
    term    := [coeff "*"] ("tr" | "mat") "(" letter* ")"
    coeff   := real | imaginary | "(" python-complex ")"
    letter  := "q" LABEL | "p" LABEL | CONST

``LABEL`` starts with a digit or underscore (``q1``, ``p_a``); any other
identifier is a constant tag (``j``, ``k``, ``i_eff``, ``1``).  ``tr(...)``
terms make trace polynomials, ``mat(...)`` terms make matrix polynomials
(``mat()`` is the identity matrix).
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .grassmann import CONJ_PRESERVE, CONJ_REVERSE, GrassmannAlgebra, GrassmannElement

DEFAULT_MAX_DEGREE = 8
IDENTITY = "1"


class DegreeError(ValueError):
    pass


class UnknownLabelError(KeyError):
    pass


class PolynomialSyntaxError(ValueError):
    def __init__(self, msg: str, text: str = "", pos: int | None = None):
        if pos is not None:
            msg = f"{msg} at column {pos + 1}: {text[max(0, pos - 10):pos + 10]!r}"
        super().__init__(msg)
        self.pos = pos


@dataclass(frozen=True, order=True)
class Letter:
    kind: str  # "q", "p" or "c"
    label: str

    def __post_init__(self):
        if self.kind not in ("q", "p", "c"):
            raise ValueError(f"bad letter kind {self.kind!r}")

    def __str__(self):
        return self.label if self.kind == "c" else f"{self.kind}{self.label}"

    @property
    def is_variable(self) -> bool:
        return self.kind != "c"

    @property
    def conjugate(self) -> "Letter":
        """The canonically conjugate letter (``q_r <-> p_r``)."""
        if self.kind == "c":
            raise ValueError("constants have no conjugate")
        return Letter("p" if self.kind == "q" else "q", self.label)


def Q(label) -> Letter:
    return Letter("q", str(label))


def P(label) -> Letter:
    return Letter("p", str(label))


def C(name: str) -> Letter:
    return Letter("c", name)


_VAR_RE = re.compile(r"^([qp])([0-9_]\w*)$")


def letter_from_text(tok: str) -> Letter:
    m = _VAR_RE.match(tok)
    if m:
        return Letter(m.group(1), m.group(2))
    return Letter("c", tok)


def _grade(letter: Letter, odd: frozenset) -> int:
    return 1 if letter.kind != "c" and letter.label in odd else 0


def _odd_set(odd) -> frozenset:
    """Accept a roster, a state or an iterable of fermionic labels."""
    if odd is None:
        return frozenset()
    if hasattr(odd, "roster"):
        odd = odd.roster
    items = list(odd)
    if items and hasattr(items[0], "parity"):
        return frozenset(v.label for v in items if v.parity == -1)
    return frozenset(str(x) for x in items)


# ---------------------------------------------------------------------------
# symbolic containers


@dataclass(frozen=True)
class TraceWord:
    coeff: complex
    letters: tuple[Letter, ...]

    def __post_init__(self):
        object.__setattr__(self, "coeff", complex(self.coeff))
        object.__setattr__(self, "letters", tuple(self.letters))

    @property
    def degree(self) -> int:
        return len(self.letters)


def _fmt_coeff(c: complex) -> str:
    if c.imag == 0:
        return repr(c.real)
    sep = "-" if np.signbit(c.imag) else "+"
    return f"({c.real!r}{sep}{abs(c.imag)!r}j)"


class _PolyBase:
    _head = ""
    _allow_empty = False

    def __init__(self, words: Iterable[TraceWord | tuple] = (), max_degree: int | None = DEFAULT_MAX_DEGREE):
        ws = []
        for w in words:
            if not isinstance(w, TraceWord):
                w = TraceWord(*w)
            if not w.letters and not self._allow_empty:
                raise ValueError("trace words need at least one letter (use tr(1))")
            if max_degree is not None and w.degree > max_degree:
                raise DegreeError(f"word of degree {w.degree} exceeds cap {max_degree}")
            if w.coeff != 0:
                ws.append(w)
        self.words: tuple[TraceWord, ...] = tuple(ws)

    @classmethod
    def _new(cls, words):
        return cls(words, max_degree=None)

    def __add__(self, other):
        if not isinstance(other, type(self)):
            return NotImplemented
        return self._new(self.words + other.words)

    def __neg__(self):
        return self._new(TraceWord(-w.coeff, w.letters) for w in self.words)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, c):
        if not isinstance(c, (int, float, complex, np.number)):
            return NotImplemented
        return self._new(TraceWord(w.coeff * c, w.letters) for w in self.words)

    __rmul__ = __mul__

    def __len__(self):
        return len(self.words)

    def __iter__(self):
        return iter(self.words)

    def __eq__(self, other):
        return type(self) is type(other) and self.words == other.words

    def __hash__(self):
        return hash(self.words)

    @property
    def degree(self) -> int:
        return max((w.degree for w in self.words), default=0)

    def letters(self) -> set[Letter]:
        return {x for w in self.words for x in w.letters}

    def __str__(self):
        if not self.words:
            return "0"
        out = []
        for i, w in enumerate(self.words):
            c = w.coeff
            body = f"{self._head}({' '.join(str(x) for x in w.letters)})"
            if i and c.imag == 0 and np.signbit(c.real):
                out.append(f" - {_fmt_coeff(-c)} * {body}")
            else:
                out.append((" + " if i else "") + f"{_fmt_coeff(c)} * {body}")
        return "".join(out)

    def __repr__(self):
        return f"{type(self).__name__}({str(self)!r})"

    @classmethod
    def parse(cls, text: str, max_degree: int | None = DEFAULT_MAX_DEGREE):
        words = _parse(text, cls._head)
        return cls(words, max_degree=max_degree)

    def collect(self):
        """Merge words with identical letter sequences."""
        acc: dict[tuple, complex] = {}
        for w in self.words:
            acc[w.letters] = acc.get(w.letters, 0) + w.coeff
        return self._new(TraceWord(c, ls) for ls, c in acc.items() if abs(c) > 1e-15)


class TracePolynomial(_PolyBase):
    """Sum of ``coeff * Tr(letters)``."""

    _head = "tr"

    def canonical(self, odd=None) -> "TracePolynomial":
        """Rotate each word to its least cyclic form (graded signs) and merge.

        Words that equal minus themselves under a rotation vanish identically
        and are dropped.
        """
        oddset = _odd_set(odd)
        acc: dict[tuple, complex] = {}
        for w in self.words:
            rot = _canonical_rotation(w.letters, oddset)
            if rot is None:
                continue
            letters, sign = rot
            acc[letters] = acc.get(letters, 0) + sign * w.coeff
        items = sorted(acc.items())
        return TracePolynomial._new(TraceWord(c, ls) for ls, c in items if abs(c) > 1e-15)


class MatrixPolynomial(_PolyBase):
    """Sum of ``coeff * letters`` as a matrix; empty letters mean identity."""

    _head = "mat"
    _allow_empty = True

    def __matmul__(self, other: "MatrixPolynomial") -> "MatrixPolynomial":
        return MatrixPolynomial._new(
            TraceWord(a.coeff * b.coeff, a.letters + b.letters) for a in self.words for b in other.words
        )

    def trace(self) -> TracePolynomial:
        return TracePolynomial._new(
            TraceWord(w.coeff, w.letters or (C(IDENTITY),)) for w in self.words
        )

    @classmethod
    def identity(cls) -> "MatrixPolynomial":
        return cls([TraceWord(1.0, ())])

    @classmethod
    def letter(cls, x: Letter, coeff: complex = 1.0) -> "MatrixPolynomial":
        return cls([TraceWord(coeff, (x,))])


def _canonical_rotation(letters: tuple, odd: frozenset):
    k = len(letters)
    grades = [_grade(x, odd) for x in letters]
    total = sum(grades)
    best = None
    best_sign = 0
    prefix = 0
    for r in range(k):
        rot = letters[r:] + letters[:r]
        sign = -1 if (prefix * (total - prefix)) % 2 else 1
        if best is None or rot < best:
            best, best_sign = rot, sign
        elif rot == best and sign != best_sign:
            return None
        prefix += grades[r]
    return best, best_sign


_TOKEN = re.compile(
    r"\s*(?:(?P<fn>tr|mat)\s*\(|(?P<cplx>\([^()]*\))|(?P<num>[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?j?|[0-9]+\.(?:[eE][-+]?[0-9]+)?j?)"
    r"|(?P<op>[-+*])|(?P<close>\))|(?P<ident>[A-Za-z0-9_]+))"
)


def _parse(text: str, head: str) -> list[TraceWord]:
    pos = 0
    n = len(text)
    words: list[TraceWord] = []
    sign = 1.0
    expect_term = True
    first = True

    def skip_ws(i):
        while i < n and text[i].isspace():
            i += 1
        return i

    while True:
        pos = skip_ws(pos)
        if pos >= n:
            if expect_term and not first:
                raise PolynomialSyntaxError("dangling operator", text, pos)
            break
        if not expect_term:
            m = _TOKEN.match(text, pos)
            if not m or m.group("op") not in ("+", "-"):
                raise PolynomialSyntaxError("expected '+' or '-'", text, pos)
            sign = -1.0 if m.group("op") == "-" else 1.0
            pos = m.end()
            expect_term = True
            continue
        m = _TOKEN.match(text, pos)
        if m and m.group("op") == "-" and first:
            sign = -1.0
            pos = m.end()
            m = _TOKEN.match(text, pos)
        coeff: complex = 1.0
        if m and (m.group("num") or m.group("cplx")):
            raw = m.group("num") or m.group("cplx")
            try:
                coeff = complex(raw) if ("j" in raw or raw.startswith("(")) else float(raw)
            except ValueError:
                raise PolynomialSyntaxError(f"bad coefficient {raw!r}", text, pos) from None
            pos = m.end()
            m = _TOKEN.match(text, pos)
            if not m or m.group("op") != "*":
                raise PolynomialSyntaxError("expected '*' after coefficient", text, pos)
            pos = m.end()
            m = _TOKEN.match(text, pos)
        if not m or not m.group("fn"):
            raise PolynomialSyntaxError(f"expected '{head}('", text, pos)
        if m.group("fn") != head:
            raise PolynomialSyntaxError(f"expected '{head}(' but found '{m.group('fn')}('", text, pos)
        pos = m.end()
        letters = []
        while True:
            m = _TOKEN.match(text, pos)
            if not m:
                raise PolynomialSyntaxError("unterminated word", text, pos)
            if m.group("close"):
                pos = m.end()
                break
            tok = m.group("ident") or m.group("num")
            if not tok or m.group("num") and not tok.isdigit():
                raise PolynomialSyntaxError("expected a letter", text, pos)
            letters.append(letter_from_text(tok))
            pos = m.end()
        c = complex(coeff) * sign
        if sign < 0 and isinstance(coeff, float):
            c = complex(-coeff, 0.0)
        words.append(TraceWord(c, tuple(letters)))
        sign = 1.0
        expect_term = False
        first = False
    return words


# ---------------------------------------------------------------------------
# derivatives and brackets


def trace_derivative(P: TracePolynomial, x: Letter, odd=None) -> MatrixPolynomial:
    """Matrix ``D`` with ``delta P = Tr(D delta x)``.

    For the occurrence ``Tr(A x B)`` the contribution is ``+-(B A)``, the sign
    being ``(-1)^{|B|(|A|+|x|)}`` from moving ``B`` cyclically to the front.
    """
    oddset = _odd_set(odd)
    out = []
    for w in P.words:
        L = w.letters
        g = [_grade(a, oddset) for a in L]
        for m, a in enumerate(L):
            if a != x:
                continue
            gA = sum(g[:m])
            gB = sum(g[m + 1:])
            sign = -1 if (gB * (gA + g[m])) % 2 else 1
            out.append(TraceWord(sign * w.coeff, L[m + 1:] + L[:m]))
    return MatrixPolynomial._new(out).collect()


def bracket(A: TracePolynomial, B: TracePolynomial, roster, max_degree: int | None = DEFAULT_MAX_DEGREE) -> TracePolynomial:
    """Symbolic trace Poisson bracket ``{A, B}`` as a canonical trace polynomial."""
    oddset = _odd_set(roster)
    labels = _roster_labels(roster)
    words = []
    for r in labels:
        eps = -1 if r in oddset else 1
        dAq = trace_derivative(A, Q(r), oddset)
        dBp = trace_derivative(B, P(r), oddset)
        dBq = trace_derivative(B, Q(r), oddset)
        dAp = trace_derivative(A, P(r), oddset)
        for a in dAq.words:
            for b in dBp.words:
                words.append(TraceWord(eps * a.coeff * b.coeff, a.letters + b.letters))
        for a in dBq.words:
            for b in dAp.words:
                words.append(TraceWord(-eps * a.coeff * b.coeff, a.letters + b.letters))
    words = [TraceWord(w.coeff, w.letters or (C(IDENTITY),)) for w in words]
    out = TracePolynomial._new(words).canonical(oddset)
    if max_degree is not None and out.degree > max_degree:
        raise DegreeError(f"bracket degree {out.degree} exceeds cap {max_degree}")
    return out


def _roster_labels(roster) -> list[str]:
    if hasattr(roster, "roster"):
        roster = roster.roster
    return [v.label for v in roster]


def adjoint_polynomial(P: TracePolynomial, roster, conj_order: str = CONJ_PRESERVE) -> TracePolynomial:
    """The complex-conjugate functional ``Tr(A)^* = Tr(A^dagger)``.

    Bosonic letters and constants are taken self-adjoint; fermionic letters
    follow ``q^dagger = p``.  Under order-preserving conjugation a product of
    ``f`` odd letters picks up ``(-1)^{f(f-1)/2}`` when reversed.
    """
    oddset = _odd_set(roster)
    out = []
    for w in P.words:
        rev = []
        for x in reversed(w.letters):
            if x.kind != "c" and x.label in oddset:
                x = x.conjugate
            rev.append(x)
        f = sum(_grade(x, oddset) for x in w.letters)
        sign = -1 if conj_order == CONJ_PRESERVE and (f * (f - 1) // 2) % 2 else 1
        out.append(TraceWord(sign * np.conj(w.coeff), tuple(rev)))
    return TracePolynomial._new(out)


def is_separable(H: TracePolynomial) -> bool:
    """Every word depends on momenta only or on coordinates only."""
    for w in H.words:
        kinds = {x.kind for x in w.letters if x.kind != "c"}
        if kinds == {"q", "p"}:
            return False
    return True


# ---------------------------------------------------------------------------
# numeric evaluation


class _Rep:
    """Numeric matrix representation of a state's letters.

    Plain complex ``(N, N)`` matrices, or Grassmann coefficient stacks
    ``(nb, N, N)`` multiplied through the algebra's pair table.
    """

    def __init__(self, dim: int, algebra: GrassmannAlgebra | None):
        self.dim = dim
        self.algebra = algebra
        self.shape = (dim, dim) if algebra is None else (algebra.nb, dim, dim)
        self.mul = np.matmul if algebra is None else algebra.matmul

    def identity(self):
        return self.lift_constant(np.eye(self.dim))

    def lift_constant(self, M):
        M = np.asarray(M, dtype=complex)
        if self.algebra is None:
            return M
        return self.algebra.embed(M)


class WordBatch:
    """Vectorized products for a fixed list of letter sequences.

    ``products(stack)`` takes letter matrices stacked along axis 0 (in the
    order of ``self.alphabet``) and returns one product per word.
    """

    def __init__(self, words: Sequence[tuple[Letter, ...]], alphabet: Sequence[Letter] | None = None):
        self.words = [tuple(w) for w in words]
        if alphabet is None:
            alphabet = sorted({x for w in self.words for x in w})
        self.alphabet = list(alphabet)
        index = {x: i for i, x in enumerate(self.alphabet)}
        groups: dict[int, list[int]] = defaultdict(list)
        for i, w in enumerate(self.words):
            groups[len(w)].append(i)
        self.groups = []
        for L, members in sorted(groups.items()):
            idx = np.array([[index[x] for x in self.words[i]] for i in members], dtype=int).reshape(len(members), L)
            self.groups.append((L, np.array(members, dtype=int), idx))

    def products(self, stack: np.ndarray, eye: np.ndarray, mul=np.matmul) -> np.ndarray:
        out = np.empty((len(self.words),) + stack.shape[1:], dtype=complex)
        for L, members, idx in self.groups:
            if L == 0:
                out[members] = eye
                continue
            acc = stack[idx[:, 0]]
            for j in range(1, L):
                acc = mul(acc, stack[idx[:, j]])
            out[members] = acc
        return out


def _letter_matrix(x: Letter, values, registry, rep: _Rep, batch_shape=()):
    if x.kind == "c":
        if x.label == IDENTITY:
            return np.broadcast_to(rep.identity(), batch_shape + rep.shape)
        if registry is None or x.label not in registry:
            raise UnknownLabelError(f"constant {x.label!r} not in registry")
        M = np.asarray(registry[x.label], dtype=complex)
        if M.shape[-2:] != (rep.dim, rep.dim):
            raise ValueError(f"constant {x.label!r} has shape {M.shape}, expected N={rep.dim}")
        return np.broadcast_to(rep.lift_constant(M), batch_shape + rep.shape)
    if x.label not in values:
        raise UnknownLabelError(f"label {x.label!r} not in state")
    pair = values[x.label]
    M = pair[0] if x.kind == "q" else pair[1]
    return np.asarray(M)


def _stack_letters(alphabet, values, registry, rep, batch_shape=()):
    if not alphabet:
        return np.zeros((0,) + batch_shape + rep.shape, dtype=complex)
    mats = [_letter_matrix(x, values, registry, rep, batch_shape) for x in alphabet]
    return np.stack([np.broadcast_to(m, batch_shape + rep.shape) for m in mats])


def _state_parts(s):
    return s.values, s.dim, getattr(s, "algebra", None)


def _batch_shape(values, algebra):
    for q, _ in values.values():
        q = np.asarray(q)
        return q.shape[:-3] if algebra is not None else q.shape[:-2]
    return ()


def matrix_eval(M: MatrixPolynomial, s, registry: Mapping | None = None) -> np.ndarray:
    """Evaluate a matrix polynomial to a matrix value in the state's representation."""
    values, dim, algebra = _state_parts(s)
    rep = _Rep(dim, algebra)
    bshape = _batch_shape(values, algebra)
    if not M.words:
        return np.zeros(bshape + rep.shape, dtype=complex)
    batch = WordBatch([w.letters for w in M.words])
    stack = _stack_letters(batch.alphabet, values, registry, rep, bshape)
    prods = batch.products(stack, rep.identity(), rep.mul)
    coeffs = np.array([w.coeff for w in M.words])
    return np.tensordot(coeffs, prods, axes=(0, 0))


def trace_eval(P: TracePolynomial, s, registry: Mapping | None = None):
    """``sum_w coeff_w Tr(word_w)``: complex, complex array (batched states)
    or :class:`GrassmannElement` for Grassmann-valued states."""
    values, dim, algebra = _state_parts(s)
    M = matrix_eval(MatrixPolynomial._new(P.words), s, registry)
    tr = np.trace(M, axis1=-2, axis2=-1)
    if algebra is None:
        return complex(tr) if np.ndim(tr) == 0 else tr
    return algebra.element(tr)


def evaluate_generic(P: TracePolynomial | MatrixPolynomial, mats: Mapping[Letter, np.ndarray], dim: int):
    """Slow path for matrices of arbitrary scalar objects (e.g. object arrays
    of :class:`GrassmannElement`).  Returns the trace for trace polynomials."""
    total = None
    for w in P.words:
        prod = None
        for x in w.letters:
            if x.kind == "c" and x.label == IDENTITY:
                continue
            M = mats[x]
            prod = M if prod is None else prod @ M
        if prod is None:
            prod = np.eye(dim, dtype=complex)
        term = prod * w.coeff
        total = term if total is None else total + term
    if total is None:
        total = np.zeros((dim, dim), dtype=complex)
    if isinstance(P, TracePolynomial):
        acc = total[0, 0]
        for i in range(1, dim):
            acc = acc + total[i, i]
        return acc
    return total


def poisson_bracket(A: TracePolynomial, B: TracePolynomial, s, registry: Mapping | None = None):
    """``Tr sum_r eps_r [dA/dq_r dB/dp_r - dB/dq_r dA/dp_r]`` at state ``s``."""
    odd = _odd_set(s)
    rep_alg = getattr(s, "algebra", None)
    total = None
    for r in _roster_labels(s):
        eps = -1 if r in odd else 1
        dAq = matrix_eval(trace_derivative(A, Q(r), odd), s, registry)
        dBp = matrix_eval(trace_derivative(B, P(r), odd), s, registry)
        dBq = matrix_eval(trace_derivative(B, Q(r), odd), s, registry)
        dAp = matrix_eval(trace_derivative(A, P(r), odd), s, registry)
        if rep_alg is None:
            term = eps * (np.trace(dAq @ dBp) - np.trace(dBq @ dAp))
        else:
            term = eps * (
                rep_alg.trace(rep_alg.matmul(dAq, dBp)) - rep_alg.trace(rep_alg.matmul(dBq, dAp))
            )
        total = term if total is None else total + term
    if total is None:
        return 0j
    if rep_alg is None:
        return complex(total)
    return rep_alg.element(total)


def jacobi_terms(A, B, C_, s, registry=None, max_degree: int | None = DEFAULT_MAX_DEGREE):
    """The three cyclic terms ``{A,{B,C}}, {B,{C,A}}, {C,{A,B}}``."""
    ro = s.roster
    t1 = trace_eval(bracket(A, bracket(B, C_, ro, max_degree), ro, max_degree), s, registry)
    t2 = trace_eval(bracket(B, bracket(C_, A, ro, max_degree), ro, max_degree), s, registry)
    t3 = trace_eval(bracket(C_, bracket(A, B, ro, max_degree), ro, max_degree), s, registry)
    return t1, t2, t3


def jacobi_residual(A, B, C_, s, registry=None, max_degree: int | None = DEFAULT_MAX_DEGREE) -> float:
    t1, t2, t3 = jacobi_terms(A, B, C_, s, registry, max_degree)
    total = t1 + t2 + t3
    if isinstance(total, GrassmannElement):
        return float(np.linalg.norm(total.to_vector()))
    return float(abs(total))


# ---------------------------------------------------------------------------
# compiled gradients (dynamics hot path)


class CompiledGradient:
    """All trace derivatives of one polynomial, evaluated in a single pass.

    ``targets`` lists the variable letters; :meth:`evaluate` returns the
    derivative matrices stacked in that order, in the state's representation.
    """

    def __init__(self, H: TracePolynomial, roster, targets: Sequence[Letter] | None = None):
        self.roster = tuple(roster.roster if hasattr(roster, "roster") else roster)
        odd = _odd_set(self.roster)
        if targets is None:
            targets = [x for v in self.roster for x in (Q(v.label), P(v.label))]
        self.targets = list(targets)
        words = []
        rows = []
        coeffs = []
        for t, x in enumerate(self.targets):
            for w in trace_derivative(H, x, odd).words:
                words.append(w.letters)
                rows.append(t)
                coeffs.append(w.coeff)
        # merge duplicate products
        uniq: dict[tuple, int] = {}
        for ls in words:
            uniq.setdefault(ls, len(uniq))
        self.batch = WordBatch(list(uniq))
        W = np.zeros((len(self.targets), len(uniq)), dtype=complex)
        for t, ls, c in zip(rows, words, coeffs):
            W[t, uniq[ls]] += c
        self.weights = W
        self.constants = sorted({x for x in self.batch.alphabet if x.kind == "c"})

    def evaluate(self, values, dim: int, algebra: GrassmannAlgebra | None, registry=None) -> np.ndarray:
        rep = _Rep(dim, algebra)
        if not self.batch.words:
            return np.zeros((len(self.targets),) + rep.shape, dtype=complex)
        stack = _stack_letters(self.batch.alphabet, values, registry, rep)
        prods = self.batch.products(stack, rep.identity(), rep.mul)
        flat = prods.reshape(len(self.batch.words), -1)
        return (self.weights @ flat).reshape((len(self.targets),) + rep.shape)


class CompiledPolynomial:
    """Reusable evaluator for a fixed trace or matrix polynomial.

    Avoids re-grouping the words on every call; intended for inner loops
    (Metropolis updates, repeated observables over sample batches).
    """

    def __init__(self, P: TracePolynomial | MatrixPolynomial):
        self.is_trace = isinstance(P, TracePolynomial)
        self.batch = WordBatch([w.letters for w in P.words])
        self.coeffs = np.array([w.coeff for w in P.words], dtype=complex)

    def matrix(self, values, dim: int, algebra: GrassmannAlgebra | None = None, registry=None) -> np.ndarray:
        rep = _Rep(dim, algebra)
        bshape = _batch_shape(values, algebra)
        if not self.batch.words:
            return np.zeros(bshape + rep.shape, dtype=complex)
        stack = _stack_letters(self.batch.alphabet, values, registry, rep, bshape)
        prods = self.batch.products(stack, rep.identity(), rep.mul)
        return np.tensordot(self.coeffs, prods, axes=(0, 0))

    def trace(self, values, dim: int, algebra: GrassmannAlgebra | None = None, registry=None) -> np.ndarray:
        """Trace per batch element (Grassmann coefficient vectors if ``algebra``)."""
        return np.trace(self.matrix(values, dim, algebra, registry), axis1=-2, axis2=-1)


def random_polynomial(
    labels: Sequence[str],
    rng: np.random.Generator,
    max_degree: int = 4,
    n_words: int = 3,
    constants: Sequence[str] = (),
    complex_coeffs: bool = True,
) -> TracePolynomial:
    """Random trace polynomial over ``q``/``p`` letters of ``labels`` (and
    optional constant tags), word lengths uniform in ``1..max_degree``."""
    alphabet = [Q(lab) for lab in labels] + [P(lab) for lab in labels] + [C(c) for c in constants]
    words = []
    for _ in range(n_words):
        k = int(rng.integers(1, max_degree + 1))
        letters = tuple(alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=k))
        c = rng.standard_normal() + (1j * rng.standard_normal() if complex_coeffs else 0.0)
        words.append(TraceWord(c, letters))
    return TracePolynomial(words, max_degree=None)
