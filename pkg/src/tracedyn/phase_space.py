"""Matrix-valued phase-space states, adjointness rules and the ``i_eff`` sector.

A matrix value is a plain ``(N, N)`` complex array for purely bosonic
rosters, or a coefficient stack ``(2**G, N, N)`` over a
:class:`~tracedyn.grassmann.GrassmannAlgebra` when fermions are present (in
that case bosonic matrices are stacks too, carrying only even monomials).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .grassmann import CONJ_PRESERVE, GrassmannAlgebra

BOSONIC = 1
FERMIONIC = -1

SELF_ADJOINT = "self-adjoint-pair"
DAGGER = "p-equals-q-dagger"
GENERALIZED = "generalized"


class ConstraintError(ValueError):
    """A phase-space adjointness rule is violated at construction."""


class NotUnitaryError(ValueError):
    pass


@dataclass(frozen=True)
class VariableSpec:
    """One canonical pair ``(q_r, p_r)``.

    For the generalized rule, ``coupling`` maps labels ``s`` to ``N x N``
    matrices ``A_sr`` and the rule reads ``p_r = sum_s q_s^dagger A_sr``.
    """

    label: str
    parity: int = BOSONIC
    adjoint_rule: str = SELF_ADJOINT
    coupling: Mapping[str, np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.parity not in (BOSONIC, FERMIONIC):
            raise ValueError(f"parity must be +1 or -1, got {self.parity}")
        if self.parity == BOSONIC and self.adjoint_rule != SELF_ADJOINT:
            raise ValueError("bosonic variables use the self-adjoint-pair rule")
        if self.parity == FERMIONIC and self.adjoint_rule == SELF_ADJOINT:
            object.__setattr__(self, "adjoint_rule", DAGGER)
        if self.adjoint_rule == GENERALIZED and not self.coupling:
            raise ValueError("generalized adjoint rule needs coupling matrices")

    @property
    def fermionic(self) -> bool:
        return self.parity == FERMIONIC


def boson(label: str) -> VariableSpec:
    return VariableSpec(str(label), BOSONIC)


def fermion(label: str) -> VariableSpec:
    return VariableSpec(str(label), FERMIONIC, DAGGER)


Roster = Sequence[VariableSpec]


def check_coupling_hermiticity(roster: Roster, tol: float = 1e-12) -> None:
    """Generalized rules must satisfy ``A_sr^dagger = A_rs``."""
    by_label = {v.label: v for v in roster}
    for v in roster:
        if v.adjoint_rule != GENERALIZED:
            continue
        for s, A in v.coupling.items():
            other = by_label.get(s)
            if other is None or other.adjoint_rule != GENERALIZED:
                raise ValueError(f"coupling of {v.label} refers to non-generalized variable {s}")
            A_rs = other.coupling.get(v.label)
            if A_rs is None or np.linalg.norm(np.conj(np.asarray(A)).T - np.asarray(A_rs)) > tol:
                raise ValueError(f"coupling A_{s}{v.label} is not the adjoint of A_{v.label}{s}")


# ---------------------------------------------------------------------------
# matrix helpers


def adjoint(M: np.ndarray, algebra: GrassmannAlgebra | None = None) -> np.ndarray:
    """Conjugate transpose; Grassmann stacks conjugate every entry."""
    M = np.asarray(M)
    if algebra is None:
        return np.conj(np.swapaxes(M, -1, -2))
    return np.swapaxes(algebra.conj(M), -1, -2)


def i_eff(dim: int) -> np.ndarray:
    """``diag(+i, ..., +i, -i, ..., -i)`` with ``dim/2`` entries of each sign."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"N must be even for i_eff, got {dim}")
    half = dim // 2
    return np.diag(np.r_[np.full(half, 1j), np.full(half, -1j)])


def eff_project(M: np.ndarray) -> np.ndarray:
    """Part of ``M`` commuting with ``i_eff``: ``-1/2 i_eff {M, i_eff}``.

    Works on plain matrices and on coefficient stacks (the projection acts
    on the matrix indices only).
    """
    M = np.asarray(M)
    ie = i_eff(M.shape[-1])
    return -0.5 * (ie @ (M @ ie + ie @ M))


def is_unitary(U: np.ndarray, tol: float = 1e-10) -> bool:
    U = np.asarray(U)
    return bool(np.linalg.norm(U.conj().T @ U - np.eye(U.shape[0])) <= tol)


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_eff_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Random unitary commuting with ``i_eff`` (block diagonal)."""
    half = dim // 2
    U = np.zeros((dim, dim), dtype=complex)
    U[:half, :half] = random_unitary(half, rng)
    U[half:, half:] = random_unitary(half, rng)
    return U


def random_hermitian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    z = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return scale * (z + z.conj().T) / 2


def hermitian_basis(dim: int) -> np.ndarray:
    """Frobenius-orthonormal basis of ``dim x dim`` Hermitian matrices.

    Ordering: diagonal units first, then for each ``a < b`` the symmetric and
    antisymmetric off-diagonal elements.  Returns shape ``(dim**2, dim, dim)``.
    """
    out = []
    for a in range(dim):
        E = np.zeros((dim, dim), dtype=complex)
        E[a, a] = 1.0
        out.append(E)
    r = 1 / np.sqrt(2)
    for a in range(dim):
        for b in range(a + 1, dim):
            E = np.zeros((dim, dim), dtype=complex)
            E[a, b] = E[b, a] = r
            out.append(E)
            E = np.zeros((dim, dim), dtype=complex)
            E[a, b], E[b, a] = 1j * r, -1j * r
            out.append(E)
    return np.array(out)


def hermitian_from_coords(x: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """``sum_k x_k E_k`` over the last axis of ``x``."""
    return np.tensordot(x, basis, axes=(-1, 0))


def hermitian_coords(M: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hermitian_from_coords` (real part of ``Tr(E_k M)``)."""
    return np.einsum("kji,...ij->...k", basis, M).real


# ---------------------------------------------------------------------------
# states


@dataclass(frozen=True, eq=False)
class PhaseState:
    """Classical configuration: per-label ``(q_r, p_r)`` matrices plus time."""

    roster: tuple[VariableSpec, ...]
    values: Mapping[str, tuple[np.ndarray, np.ndarray]]
    dim: int
    time: float = 0.0
    algebra: GrassmannAlgebra | None = None

    def __post_init__(self):
        object.__setattr__(self, "roster", tuple(self.roster))
        labels = [v.label for v in self.roster]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels in roster")
        if set(labels) != set(self.values):
            raise ValueError(f"values labels {sorted(self.values)} do not match roster {labels}")
        if any(v.fermionic for v in self.roster) and self.algebra is None:
            raise ValueError("fermionic variables need a Grassmann algebra")
        shape = self.matrix_shape
        frozen = {}
        for lab in labels:
            q, p = self.values[lab]
            q = np.array(q, dtype=complex)
            p = np.array(p, dtype=complex)
            if q.shape != shape or p.shape != shape:
                raise ValueError(f"variable {lab}: expected shape {shape}, got {q.shape}/{p.shape}")
            q.setflags(write=False)
            p.setflags(write=False)
            frozen[lab] = (q, p)
        object.__setattr__(self, "values", frozen)

    @property
    def matrix_shape(self) -> tuple[int, ...]:
        if self.algebra is None:
            return (self.dim, self.dim)
        return (self.algebra.nb, self.dim, self.dim)

    @property
    def labels(self) -> list[str]:
        return [v.label for v in self.roster]

    def spec(self, label: str) -> VariableSpec:
        for v in self.roster:
            if v.label == label:
                return v
        raise KeyError(label)

    def q(self, label: str) -> np.ndarray:
        return self.values[label][0]

    def p(self, label: str) -> np.ndarray:
        return self.values[label][1]

    def replace(self, values=None, time=None) -> "PhaseState":
        return PhaseState(
            self.roster,
            self.values if values is None else values,
            self.dim,
            self.time if time is None else time,
            self.algebra,
        )

    def stack(self) -> np.ndarray:
        """All matrices in roster order ``q_1, p_1, q_2, p_2, ...``."""
        return np.stack([m for lab in self.labels for m in self.values[lab]])

    def from_stack(self, arr: np.ndarray, time: float | None = None) -> "PhaseState":
        vals = {lab: (arr[2 * i], arr[2 * i + 1]) for i, lab in enumerate(self.labels)}
        return self.replace(vals, time)

    def matrix_body(self, M: np.ndarray) -> np.ndarray:
        return M if self.algebra is None else M[0]

    def constant(self, M: np.ndarray) -> np.ndarray:
        """Lift a complex matrix into this state's matrix representation."""
        M = np.asarray(M, dtype=complex)
        return M if self.algebra is None else self.algebra.embed(M)

    # -- serialization ---------------------------------------------------
    def to_record(self) -> dict:
        def enc(M):
            return {"re": np.real(M).tolist(), "im": np.imag(M).tolist()}

        return {
            "dim": self.dim,
            "time": self.time,
            "generators": None if self.algebra is None else self.algebra.G,
            "conj_order": None if self.algebra is None else self.algebra.order,
            "roster": [
                {"label": v.label, "parity": v.parity, "adjoint_rule": v.adjoint_rule}
                for v in self.roster
            ],
            "variables": {
                lab: {"q": enc(self.values[lab][0]), "p": enc(self.values[lab][1])} for lab in self.labels
            },
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "PhaseState":
        def dec(d):
            return np.array(d["re"], dtype=float) + 1j * np.array(d["im"], dtype=float)

        roster = tuple(VariableSpec(r["label"], r["parity"], r["adjoint_rule"]) for r in rec["roster"])
        algebra = None
        if rec.get("generators") is not None:
            algebra = GrassmannAlgebra(rec["generators"], rec.get("conj_order") or CONJ_PRESERVE)
        values = {lab: (dec(v["q"]), dec(v["p"])) for lab, v in rec["variables"].items()}
        return cls(roster, values, rec["dim"], rec.get("time", 0.0), algebra)

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_json(cls, text: str) -> "PhaseState":
        return cls.from_record(json.loads(text))

    def allclose(self, other: "PhaseState", atol: float = 1e-10) -> bool:
        return self.labels == other.labels and all(
            np.allclose(a, b, atol=atol, rtol=0) for a, b in zip(self.stack(), other.stack())
        )


def expected_p(s: PhaseState, label: str) -> np.ndarray | None:
    """Momentum implied by the adjoint rule of ``label`` (None for bosons)."""
    v = s.spec(label)
    if v.adjoint_rule == DAGGER:
        return adjoint(s.q(label), s.algebra)
    if v.adjoint_rule == GENERALIZED:
        total = np.zeros(s.matrix_shape, dtype=complex)
        for other, A in v.coupling.items():
            total = total + adjoint(s.q(other), s.algebra) @ np.asarray(A, dtype=complex)
        return total
    return None


@dataclass(frozen=True)
class ConstraintReport:
    ok: dict[str, bool]
    violation: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(self.ok.values())

    @property
    def max_violation(self) -> float:
        return max(self.violation.values(), default=0.0)


def check_constraints(s: PhaseState, tol: float = 1e-12) -> ConstraintReport:
    """Frobenius-norm violation of every variable's adjoint rule."""
    ok, viol = {}, {}
    for v in s.roster:
        q, p = s.values[v.label]
        if v.adjoint_rule == SELF_ADJOINT:
            err = max(
                np.linalg.norm(q - adjoint(q, s.algebra)),
                np.linalg.norm(p - adjoint(p, s.algebra)),
            )
        else:
            err = np.linalg.norm(p - expected_p(s, v.label))
        viol[v.label] = float(err)
        ok[v.label] = bool(err <= tol)
    return ConstraintReport(ok, viol, tol)


def make_state(
    roster: Roster,
    values: Mapping[str, tuple[np.ndarray, np.ndarray] | np.ndarray],
    dim: int | None = None,
    algebra: GrassmannAlgebra | None = None,
    time: float = 0.0,
    tol: float = 1e-12,
) -> PhaseState:
    """Build a state and enforce the declared adjoint rules.

    Fermionic entries may be given as ``q`` alone; ``p`` is then filled in
    from the rule.  Rule violations raise :class:`ConstraintError`.
    """
    roster = tuple(roster)
    filled = {}
    for v in roster:
        val = values[v.label]
        if isinstance(val, tuple):
            filled[v.label] = val
        else:
            filled[v.label] = (val, None)
    if dim is None:
        dim = np.asarray(filled[roster[0].label][0]).shape[-1]
    shape = (dim, dim) if algebra is None else (algebra.nb, dim, dim)
    provisional = {
        lab: (q, np.zeros(shape, dtype=complex) if p is None else p) for lab, (q, p) in filled.items()
    }
    s = PhaseState(roster, provisional, dim, time, algebra)
    final = dict(s.values)
    for v in roster:
        if filled[v.label][1] is None:
            exp = expected_p(s, v.label)
            if exp is None:
                raise ConstraintError(f"bosonic variable {v.label} needs an explicit p")
            final[v.label] = (s.q(v.label), exp)
    s = s.replace(final)
    report = check_constraints(s, tol)
    if not report.passed:
        bad = {k: report.violation[k] for k, good in report.ok.items() if not good}
        raise ConstraintError(f"adjoint rules violated: {bad}")
    return s


def apply_unitary(s: PhaseState, U: np.ndarray, tol: float = 1e-10) -> PhaseState:
    """Conjugate every matrix: ``x -> U^dagger x U``."""
    U = np.asarray(U, dtype=complex)
    if U.shape != (s.dim, s.dim) or not is_unitary(U, tol):
        raise NotUnitaryError("U must be a unitary N x N matrix")
    Ud = U.conj().T
    vals = {lab: (Ud @ q @ U, Ud @ p @ U) for lab, (q, p) in s.values.items()}
    return s.replace(vals)


def random_bosonic_state(
    labels: Sequence[str], dim: int, rng: np.random.Generator, scale: float = 1.0
) -> PhaseState:
    roster = tuple(boson(lab) for lab in labels)
    vals = {
        lab: (random_hermitian(dim, rng, scale), random_hermitian(dim, rng, scale)) for lab in labels
    }
    return PhaseState(roster, vals, dim)


def fermionic_algebra(n_pairs: int) -> GrassmannAlgebra:
    """Algebra with ``n_pairs`` conjugate generator pairs for fermionic dynamics.

    Uses the order-preserving conjugation: with it ``{q, q^dagger}`` is
    anti-self-adjoint and ``i Tr q q^dagger`` is real.
    """
    return GrassmannAlgebra(2 * n_pairs, CONJ_PRESERVE)


def random_mixed_state(
    bosons: Sequence[str],
    fermions: Sequence[str],
    dim: int,
    algebra: GrassmannAlgebra,
    rng: np.random.Generator,
    scale: float = 1.0,
    fermion_scale: float = 1.0,
) -> PhaseState:
    """Bosons with complex bodies; fermions linear in the ``theta_2k`` generators."""
    roster = tuple([boson(b) for b in bosons] + [fermion(f) for f in fermions])
    vals = {}
    for b in bosons:
        vals[b] = (
            algebra.embed(random_hermitian(dim, rng, scale)),
            algebra.embed(random_hermitian(dim, rng, scale)),
        )
    for f in fermions:
        q = np.zeros((algebra.nb, dim, dim), dtype=complex)
        for k in range(algebra.G // 2):
            z = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
            q[1 << (2 * k)] = fermion_scale * z / np.sqrt(2)
        vals[f] = q
    return make_state(roster, vals, dim, algebra)
