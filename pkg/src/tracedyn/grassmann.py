"""Finite complex Grassmann algebras.

Two representations live here:

* :class:`GrassmannElement` -- an immutable sparse element, a map from ordered
  generator subsets to complex coefficients.  This is the user-facing scalar
  type and the one used for exact Berezin integration.
* :class:`GrassmannAlgebra` -- dense tables for an algebra with ``G``
  generators.  Matrices with Grassmann entries are stored as coefficient
  stacks of shape ``(2**G, N, N)`` (one complex matrix per basis monomial) and
  multiplied through the left-regular representation, which turns every
  Grassmann matrix product into one ordinary complex matmul.

Basis monomials are indexed by bitmask: bit ``g`` set means generator
``theta_g`` is present, factors in increasing index order.  Generators come in
conjugate pairs ``(2k, 2k+1)``.
"""

from __future__ import annotations

from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

#: Conjugation reverses factor order: ``(ab)* = b* a*``.
CONJ_REVERSE = "reverse"
#: Conjugation keeps factor order: ``(ab)* = a* b*``.
CONJ_PRESERVE = "preserve"
_CONJ_ORDERS = (CONJ_REVERSE, CONJ_PRESERVE)

ZERO_CUTOFF = 1e-14


class AlgebraMismatchError(ValueError):
    """Operands belong to Grassmann algebras of different size or convention."""


def _bits(mask: int) -> list[int]:
    out = []
    g = 0
    while mask:
        if mask & 1:
            out.append(g)
        mask >>= 1
        g += 1
    return out


def _popcount(x: int) -> int:
    return bin(x).count("1")


def merge_sign(a: int, b: int) -> int:
    """Sign of reordering ``theta_a theta_b`` (disjoint masks) into canonical order."""
    swaps = 0
    for j in _bits(b):
        swaps += _popcount(a >> (j + 1))
    return -1 if swaps & 1 else 1


def _conj_generator(g: int) -> int:
    return g ^ 1


def conj_monomial(mask: int, order: str = CONJ_REVERSE) -> tuple[int, int]:
    """Return ``(mask', sign)`` with ``conj(theta_mask) = sign * theta_mask'``."""
    gens = _bits(mask)
    images = [_conj_generator(g) for g in gens]
    if order == CONJ_REVERSE:
        images.reverse()
    # sort the image sequence, counting inversions
    inversions = 0
    for i in range(len(images)):
        for j in range(i + 1, len(images)):
            if images[i] > images[j]:
                inversions += 1
    out = 0
    for g in images:
        out |= 1 << g
    return out, (-1 if inversions & 1 else 1)


class GrassmannElement:
    """Immutable element of the complex Grassmann algebra on ``G`` generators.

    ``terms`` maps strictly increasing generator-index tuples to nonzero
    complex coefficients.  Coefficients with magnitude below ``1e-14`` are
    dropped after every operation.
    """

    __slots__ = ("_terms", "_G", "_order")

    def __init__(
        self,
        terms: Mapping[tuple[int, ...], complex] | None = None,
        G: int = 0,
        order: str = CONJ_REVERSE,
    ):
        if order not in _CONJ_ORDERS:
            raise ValueError(f"unknown conjugation order {order!r}")
        masks: dict[int, complex] = {}
        for key, c in (terms or {}).items():
            key = tuple(key)
            if any(b <= a for a, b in zip(key, key[1:])):
                raise ValueError(f"generator indices must be strictly increasing: {key}")
            if key and (key[0] < 0 or key[-1] >= G):
                raise ValueError(f"generator index out of range 0..{G - 1}: {key}")
            m = 0
            for g in key:
                m |= 1 << g
            masks[m] = masks.get(m, 0) + complex(c)
        self._G = G
        self._order = order
        self._terms = _clean(masks)

    @classmethod
    def _from_masks(cls, masks: dict[int, complex], G: int, order: str) -> "GrassmannElement":
        obj = cls.__new__(cls)
        obj._G = G
        obj._order = order
        obj._terms = _clean(masks)
        return obj

    @classmethod
    def scalar(cls, c: complex, G: int, order: str = CONJ_REVERSE) -> "GrassmannElement":
        return cls._from_masks({0: complex(c)}, G, order)

    @classmethod
    def generator(cls, g: int, G: int, coeff: complex = 1.0, order: str = CONJ_REVERSE) -> "GrassmannElement":
        if not 0 <= g < G:
            raise ValueError(f"generator {g} out of range for G={G}")
        return cls._from_masks({1 << g: complex(coeff)}, G, order)

    @classmethod
    def from_vector(cls, vec: np.ndarray, order: str = CONJ_REVERSE) -> "GrassmannElement":
        vec = np.asarray(vec)
        G = int(vec.shape[0]).bit_length() - 1
        if 1 << G != vec.shape[0]:
            raise ValueError("coefficient vector length must be a power of two")
        return cls._from_masks({m: complex(c) for m, c in enumerate(vec) if c != 0}, G, order)

    # -- accessors -----------------------------------------------------
    @property
    def G(self) -> int:
        return self._G

    @property
    def order(self) -> str:
        return self._order

    @property
    def terms(self) -> dict[tuple[int, ...], complex]:
        return {tuple(_bits(m)): c for m, c in sorted(self._terms.items())}

    @property
    def masks(self) -> dict[int, complex]:
        return dict(self._terms)

    def to_vector(self) -> np.ndarray:
        vec = np.zeros(1 << self._G, dtype=complex)
        for m, c in self._terms.items():
            vec[m] = c
        return vec

    def body(self) -> complex:
        """Coefficient of the empty monomial."""
        return self._terms.get(0, 0j)

    def even(self) -> "GrassmannElement":
        return GrassmannElement._from_masks(
            {m: c for m, c in self._terms.items() if _popcount(m) % 2 == 0}, self._G, self._order
        )

    def odd(self) -> "GrassmannElement":
        return GrassmannElement._from_masks(
            {m: c for m, c in self._terms.items() if _popcount(m) % 2 == 1}, self._G, self._order
        )

    def is_zero(self) -> bool:
        return not self._terms

    # -- arithmetic ----------------------------------------------------
    def _coerce(self, other) -> "GrassmannElement":
        if isinstance(other, GrassmannElement):
            if other._G != self._G or other._order != self._order:
                raise AlgebraMismatchError(
                    f"G={self._G}/{self._order} vs G={other._G}/{other._order}"
                )
            return other
        if isinstance(other, (int, float, complex, np.number)):
            return GrassmannElement.scalar(complex(other), self._G, self._order)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = dict(self._terms)
        for m, c in other._terms.items():
            out[m] = out.get(m, 0) + c
        return GrassmannElement._from_masks(out, self._G, self._order)

    __radd__ = __add__

    def __neg__(self):
        return GrassmannElement._from_masks({m: -c for m, c in self._terms.items()}, self._G, self._order)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return other - self

    def __mul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            c = complex(other)
            return GrassmannElement._from_masks({m: c * v for m, v in self._terms.items()}, self._G, self._order)
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return g_mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return self * other
        return NotImplemented

    def __truediv__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return self * (1.0 / complex(other))
        return NotImplemented

    def __eq__(self, other):
        if isinstance(other, (int, float, complex)):
            other = GrassmannElement.scalar(other, self._G, self._order)
        if not isinstance(other, GrassmannElement):
            return NotImplemented
        return self._G == other._G and self._terms == other._terms

    def __hash__(self):
        return hash((self._G, frozenset(self._terms.items())))

    def allclose(self, other, atol: float = 1e-12) -> bool:
        other = self._coerce(other)
        return bool(np.allclose(self.to_vector(), other.to_vector(), atol=atol, rtol=0))

    def conj(self) -> "GrassmannElement":
        return g_conj(self)

    def __repr__(self):
        if not self._terms:
            return "0"
        parts = []
        for key, c in self.terms.items():
            mono = "*".join(f"t{g}" for g in key)
            parts.append(f"{c!r}" + (f"*{mono}" if mono else ""))
        return " + ".join(parts)


def _clean(masks: dict[int, complex]) -> dict[int, complex]:
    return {m: c for m, c in masks.items() if abs(c) >= ZERO_CUTOFF}


def g_mul(a: GrassmannElement, b: GrassmannElement) -> GrassmannElement:
    """Product of two elements; reordering signs applied, repeats annihilate."""
    if a.G != b.G or a.order != b.order:
        raise AlgebraMismatchError(f"G={a.G}/{a.order} vs G={b.G}/{b.order}")
    out: dict[int, complex] = {}
    for ma, ca in a._terms.items():
        for mb, cb in b._terms.items():
            if ma & mb:
                continue
            m = ma | mb
            out[m] = out.get(m, 0) + merge_sign(ma, mb) * ca * cb
    return GrassmannElement._from_masks(out, a.G, a.order)


def g_conj(a: GrassmannElement) -> GrassmannElement:
    """Conjugate: complex-conjugate coefficients, map theta_2k <-> theta_2k+1.

    Under the default ``reverse`` order the factor order of each monomial is
    reversed, so ``g_conj(a*b) == g_conj(b)*g_conj(a)``.
    """
    if a.G % 2:
        raise ValueError("conjugation needs paired generators (even G)")
    out: dict[int, complex] = {}
    for m, c in a._terms.items():
        mc, s = conj_monomial(m, a.order)
        out[mc] = out.get(mc, 0) + s * np.conj(c)
    return GrassmannElement._from_masks(out, a.G, a.order)


def grade(a: GrassmannElement) -> str:
    parities = {_popcount(m) % 2 for m in a._terms}
    if parities == {1}:
        return "odd"
    if parities == {0, 1}:
        return "mixed"
    return "even"


def berezin_integrate(a: GrassmannElement, gens: Iterable[int]) -> GrassmannElement:
    """Berezin integral ``int d theta_{gens[0]} ... d theta_{gens[-1]} a``.

    The innermost measure factor (last in ``gens``) is applied first; each
    integration moves the generator to the front (left derivative) and drops
    it.  Terms missing the generator vanish.
    """
    gens = list(gens)
    for g in gens:
        if not 0 <= g < a.G:
            raise ValueError(f"generator {g} out of range for G={a.G}")
    terms = dict(a._terms)
    for g in reversed(gens):
        bit = 1 << g
        nxt: dict[int, complex] = {}
        for m, c in terms.items():
            if not m & bit:
                continue
            sign = -1 if _popcount(m & (bit - 1)) & 1 else 1
            m2 = m ^ bit
            nxt[m2] = nxt.get(m2, 0) + sign * c
        terms = nxt
    return GrassmannElement._from_masks(terms, a.G, a.order)


def g_exp(a: GrassmannElement) -> GrassmannElement:
    """Exponential of an element; the soul part is nilpotent so the series ends."""
    body = a.body()
    soul = a - body
    result = GrassmannElement.scalar(1.0, a.G, a.order)
    term = result
    for k in range(1, a.G + 1):
        term = term * soul / k
        if term.is_zero():
            break
        result = result + term
    return result * np.exp(body)


class GrassmannAlgebra:
    """Dense tables for the algebra on ``G`` generators.

    Coefficient stacks have the monomial axis third from the end:
    ``(..., 2**G, N, N)``.
    """

    def __init__(self, G: int, order: str = CONJ_REVERSE):
        if G < 0 or G > 12:
            raise ValueError("dense Grassmann tables support 0 <= G <= 12")
        if order not in _CONJ_ORDERS:
            raise ValueError(f"unknown conjugation order {order!r}")
        self.G = G
        self.order = order
        self.nb = 1 << G

    def __eq__(self, other):
        return isinstance(other, GrassmannAlgebra) and (self.G, self.order) == (other.G, other.order)

    def __hash__(self):
        return hash((self.G, self.order))

    def __repr__(self):
        return f"GrassmannAlgebra(G={self.G}, order={self.order!r})"

    @cached_property
    def grades(self) -> np.ndarray:
        return np.array([_popcount(m) % 2 for m in range(self.nb)], dtype=np.int8)

    @cached_property
    def product_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Arrays ``(a, b, a|b, sign)`` over all disjoint monomial pairs."""
        pa, pb, pm, ps = [], [], [], []
        for a in range(self.nb):
            for b in range(self.nb):
                if a & b:
                    continue
                pa.append(a)
                pb.append(b)
                pm.append(a | b)
                ps.append(merge_sign(a, b))
        return np.array(pa), np.array(pb), np.array(pm), np.array(ps, dtype=float)

    @cached_property
    def conj_table(self) -> tuple[np.ndarray, np.ndarray]:
        if self.G % 2:
            raise ValueError("conjugation needs paired generators (even G)")
        tgt = np.empty(self.nb, dtype=int)
        sgn = np.empty(self.nb)
        for m in range(self.nb):
            tgt[m], sgn[m] = conj_monomial(m, self.order)
        return tgt, sgn

    def element(self, vec: np.ndarray) -> GrassmannElement:
        return GrassmannElement.from_vector(vec, self.order)

    def conj(self, coeffs: np.ndarray) -> np.ndarray:
        """Conjugate entrywise (no transpose) along the monomial axis -3."""
        tgt, sgn = self.conj_table
        out = np.zeros_like(coeffs)
        src = np.moveaxis(coeffs, -3, 0)
        dst = np.moveaxis(out, -3, 0)
        dst[tgt] = sgn.reshape(-1, *([1] * (src.ndim - 1))) * np.conj(src)
        return out

    def mul_scalar(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Product of two coefficient vectors."""
        pa, pb, pm, ps = self.product_table
        out = np.zeros(self.nb, dtype=complex)
        np.add.at(out, pm, ps * x[pa] * y[pb])
        return out

    def to_regular(self, coeffs: np.ndarray) -> np.ndarray:
        """Map ``(..., nb, N, N)`` coefficients to ``(..., nb*N, nb*N)`` matrices.

        The image is the left-regular representation tensored with the matrix
        index, so products map to products.
        """
        pa, pb, pm, ps = self.product_table
        lead = coeffs.shape[:-3]
        N = coeffs.shape[-1]
        big = np.zeros(lead + (self.nb, self.nb, N, N), dtype=complex)
        big[..., pm, pb, :, :] = ps[:, None, None] * coeffs[..., pa, :, :]
        big = np.swapaxes(big, -3, -2)
        return big.reshape(lead + (self.nb * N, self.nb * N))

    def from_regular(self, big: np.ndarray) -> np.ndarray:
        lead = big.shape[:-2]
        N = big.shape[-1] // self.nb
        return big.reshape(lead + (self.nb, N, self.nb, N))[..., :, :, 0, :].copy()

    def trace(self, coeffs: np.ndarray) -> np.ndarray:
        return np.trace(coeffs, axis1=-2, axis2=-1)

    @cached_property
    def _sorted_pairs(self):
        pa, pb, pm, ps = self.product_table
        order = np.argsort(pm, kind="stable")
        pa, pb, pm, ps = pa[order], pb[order], pm[order], ps[order]
        starts = np.searchsorted(pm, np.arange(self.nb))
        return pa, pb, ps, starts

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Product of coefficient stacks ``(..., nb, N, N)``, broadcasting over ``...``."""
        pa, pb, ps, starts = self._sorted_pairs
        prod = np.matmul(a[..., pa, :, :], b[..., pb, :, :])
        prod *= ps[:, None, None]
        return np.add.reduceat(prod, starts, axis=-3)

    def matmul_regular(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Same product through the regular representation (independent route)."""
        return self.from_regular(self.to_regular(a) @ self.to_regular(b))

    def embed(self, m: np.ndarray) -> np.ndarray:
        """Complex matrix as a body-only coefficient stack."""
        out = np.zeros(m.shape[:-2] + (self.nb,) + m.shape[-2:], dtype=complex)
        out[..., 0, :, :] = m
        return out
