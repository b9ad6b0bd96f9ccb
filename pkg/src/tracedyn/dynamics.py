"""Equations of motion, integrators and the conserved charges H, N and C-tilde."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .grassmann import GrassmannElement
from .phase_space import (
    FERMIONIC,
    PhaseState,
    VariableSpec,
    check_constraints,
)
from .trace_calculus import (
    P,
    Q,
    CompiledGradient,
    Letter,
    TracePolynomial,
    TraceWord,
    adjoint_polynomial,
    is_separable,
    trace_eval,
)


class IntegrationError(RuntimeError):
    """Integration aborted; ``last_good`` holds the last finite state."""

    def __init__(self, msg: str, last_good: PhaseState | None = None):
        super().__init__(msg)
        self.last_good = last_good


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TangentState:
    roster: tuple[VariableSpec, ...]
    values: Mapping[str, tuple[np.ndarray, np.ndarray]]

    def stack(self) -> np.ndarray:
        return np.stack([m for v in self.roster for m in self.values[v.label]])


@dataclass(frozen=True)
class ChargeRecord:
    time: float
    H_trace: complex | GrassmannElement
    N_trace: complex | GrassmannElement
    C_tilde: np.ndarray
    constraint_violation: float = 0.0


# ---------------------------------------------------------------------------
# vector field


class HamiltonianField:
    """Compiled right-hand side ``qdot = eps dH/dp, pdot = -dH/dq``."""

    def __init__(self, H: TracePolynomial, roster: Sequence[VariableSpec], registry: Mapping | None = None):
        self.H = H
        self.roster = tuple(roster)
        self.registry = registry
        self.grad = CompiledGradient(H, self.roster)
        self.eps = np.array([v.parity for v in self.roster], dtype=float)

    def _values(self, stack):
        return {v.label: (stack[2 * i], stack[2 * i + 1]) for i, v in enumerate(self.roster)}

    def __call__(self, stack: np.ndarray, dim: int, algebra) -> np.ndarray:
        D = self.grad.evaluate(self._values(stack), dim, algebra, self.registry)
        out = np.empty_like(D)
        out[0::2] = self.eps.reshape(-1, *([1] * (D.ndim - 1))) * D[1::2]
        out[1::2] = -D[0::2]
        return out


def eom_field(H: TracePolynomial, s: PhaseState, registry: Mapping | None = None) -> TangentState:
    f = HamiltonianField(H, s.roster, registry)
    d = f(s.stack(), s.dim, s.algebra)
    return TangentState(s.roster, {v.label: (d[2 * i], d[2 * i + 1]) for i, v in enumerate(s.roster)})


def canonical_generator_flow(W: TracePolynomial, s: PhaseState, eps: float, registry: Mapping | None = None) -> PhaseState:
    """One explicit Euler step of length ``eps`` along the flow generated by ``W``."""
    t = eom_field(W, s, registry).stack()
    return s.from_stack(s.stack() + eps * t)


# ---------------------------------------------------------------------------
# charges


def _mul(s: PhaseState, a, b):
    return a @ b if s.algebra is None else s.algebra.matmul(a, b)


def charge_H(H: TracePolynomial, s: PhaseState, registry: Mapping | None = None):
    val = trace_eval(H, s, registry)
    return val


def charge_N(s: PhaseState):
    """Trace fermion number ``i sum_F Tr(q_r p_r)``."""
    total = np.zeros(s.algebra.nb if s.algebra else (), dtype=complex)
    for v in s.roster:
        if v.parity != FERMIONIC:
            continue
        q, p = s.values[v.label]
        total = total + 1j * np.trace(_mul(s, q, p), axis1=-2, axis2=-1)
    if s.algebra is None:
        return complex(total)
    return s.algebra.element(total)


def charge_Ctilde(s: PhaseState) -> np.ndarray:
    """``sum_B [q_r, p_r] - sum_F {q_r, p_r}``."""
    C = np.zeros(s.matrix_shape, dtype=complex)
    for v in s.roster:
        q, p = s.values[v.label]
        qp, pq = _mul(s, q, p), _mul(s, p, q)
        C = C + (qp - pq if v.parity != FERMIONIC else -(qp + pq))
    return C


def _to_vec(x) -> np.ndarray:
    if isinstance(x, GrassmannElement):
        return x.to_vector()
    return np.atleast_1d(np.asarray(x, dtype=complex))


def charges(H: TracePolynomial, s: PhaseState, registry: Mapping | None = None) -> ChargeRecord:
    return ChargeRecord(
        s.time,
        charge_H(H, s, registry),
        charge_N(s),
        charge_Ctilde(s),
        check_constraints(s).max_violation,
    )


def ctilde_checks(C: np.ndarray, s: PhaseState) -> tuple[float, float]:
    """``(|Tr C|, ||C + C^dagger||_F)`` over all Grassmann coefficients."""
    from .phase_space import adjoint

    tr = np.trace(C, axis1=-2, axis2=-1)
    return float(np.linalg.norm(tr)), float(np.linalg.norm(C + adjoint(C, s.algebra)))


# ---------------------------------------------------------------------------
# integration


@dataclass
class Trajectory:
    states: list[PhaseState] = field(default_factory=list)
    charges: list[ChargeRecord] = field(default_factory=list)

    def drift(self) -> dict[str, float]:
        """Maximum relative drift of H, N and C-tilde against the first record."""
        c0 = self.charges[0]
        h0, n0, k0 = _to_vec(c0.H_trace), _to_vec(c0.N_trace), c0.C_tilde
        out = {"H": 0.0, "N": 0.0, "Ctilde": 0.0}
        for c in self.charges[1:]:
            out["H"] = max(out["H"], _rel(_to_vec(c.H_trace) - h0, h0))
            out["N"] = max(out["N"], _rel(_to_vec(c.N_trace) - n0, n0))
            out["Ctilde"] = max(out["Ctilde"], _rel(c.C_tilde - k0, k0))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "H_trace", "abs_N_trace", "Ctilde_fro_norm", "constraint_violation"])
        for c in self.charges:
            h = c.H_trace.body().real if isinstance(c.H_trace, GrassmannElement) else np.real(c.H_trace)
            w.writerow(
                [
                    repr(float(c.time)),
                    repr(float(h)),
                    repr(float(np.linalg.norm(_to_vec(c.N_trace)))),
                    repr(float(np.linalg.norm(c.C_tilde))),
                    repr(float(c.constraint_violation)),
                ]
            )
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_record()) + "\n" for s in self.states)


def _rel(diff, ref, floor: float = 1e-300) -> float:
    return float(np.linalg.norm(diff) / max(np.linalg.norm(ref), floor))


def _rk4_step(f, y, dt, dim, alg):
    k1 = f(y, dim, alg)
    k2 = f(y + 0.5 * dt * k1, dim, alg)
    k3 = f(y + 0.5 * dt * k2, dim, alg)
    k4 = f(y + dt * k3, dim, alg)
    return y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


class _Leapfrog:
    def __init__(self, H, roster, registry):
        if not is_separable(H):
            raise ConfigurationError("leapfrog needs H = Tr F(p) + Tr G(q); use rk4")
        self.roster = tuple(roster)
        self.registry = registry
        self.gq = CompiledGradient(H, self.roster, [Q(v.label) for v in self.roster])
        self.gp = CompiledGradient(H, self.roster, [P(v.label) for v in self.roster])
        self.eps = np.array([v.parity for v in self.roster], dtype=float)

    def _vals(self, y):
        return {v.label: (y[2 * i], y[2 * i + 1]) for i, v in enumerate(self.roster)}

    def step(self, y, dt, dim, alg):
        y = y.copy()
        shape = (-1,) + (1,) * (y.ndim - 1)
        y[1::2] -= 0.5 * dt * self.gq.evaluate(self._vals(y), dim, alg, self.registry)
        y[0::2] += dt * self.eps.reshape(shape) * self.gp.evaluate(self._vals(y), dim, alg, self.registry)
        y[1::2] -= 0.5 * dt * self.gq.evaluate(self._vals(y), dim, alg, self.registry)
        return y


def integrate(
    H: TracePolynomial,
    s0: PhaseState,
    t_final: float,
    dt: float,
    scheme: str = "rk4",
    record_every: int = 10,
    registry: Mapping | None = None,
    keep_states: bool = True,
) -> Trajectory:
    """Fixed-step integration with a charge record every ``record_every`` steps.

    Leapfrog (kick-drift-kick) requires a separable Hamiltonian.  A
    non-finite value aborts with :class:`IntegrationError` carrying the last
    finite state.
    """
    if dt <= 0 or t_final < 0:
        raise ConfigurationError("dt must be positive and t_final non-negative")
    n_steps = int(round(t_final / dt))
    if scheme == "rk4":
        f = HamiltonianField(H, s0.roster, registry)

        def step(y):
            return _rk4_step(f, y, dt, s0.dim, s0.algebra)

    elif scheme == "leapfrog":
        lf = _Leapfrog(H, s0.roster, registry)

        def step(y):
            return lf.step(y, dt, s0.dim, s0.algebra)

    else:
        raise ConfigurationError(f"unknown scheme {scheme!r}")

    traj = Trajectory()
    y = s0.stack()
    state = s0
    traj.charges.append(charges(H, s0, registry))
    if keep_states:
        traj.states.append(s0)
    for n in range(1, n_steps + 1):
        y_new = step(y)
        if not np.all(np.isfinite(y_new)):
            raise IntegrationError(
                f"non-finite value at step {n} (t={s0.time + n * dt:.6g})", s0.from_stack(y, s0.time + (n - 1) * dt)
            )
        y = y_new
        if n % record_every == 0 or n == n_steps:
            state = s0.from_stack(y, s0.time + n * dt)
            traj.charges.append(charges(H, state, registry))
            if keep_states:
                traj.states.append(state)
    return traj


# ---------------------------------------------------------------------------
# Liouville


def _hermitian_basis(dim: int) -> list[tuple[np.ndarray, tuple[int, int], str]]:
    basis = []
    for a in range(dim):
        E = np.zeros((dim, dim), dtype=complex)
        E[a, a] = 1
        basis.append((E, (a, a), "re"))
    for a in range(dim):
        for b in range(a + 1, dim):
            E = np.zeros((dim, dim), dtype=complex)
            E[a, b] = E[b, a] = 1
            basis.append((E, (a, b), "re"))
            E = np.zeros((dim, dim), dtype=complex)
            E[a, b], E[b, a] = 1j, -1j
            basis.append((E, (a, b), "im"))
    return basis


def liouville_divergence(
    H: TracePolynomial, s: PhaseState, h: float = 1e-5, registry: Mapping | None = None
) -> tuple[float, float]:
    """Central-difference divergence of the flow over all real coordinates.

    Returns ``(divergence, field_scale)`` where the scale is the Frobenius
    norm of the vector field at ``s``.
    """
    if s.algebra is not None or any(v.parity == FERMIONIC for v in s.roster):
        raise ConfigurationError("liouville_divergence is defined for bosonic rosters only")
    f = HamiltonianField(H, s.roster, registry)
    y0 = s.stack()
    basis = _hermitian_basis(s.dim)
    div = 0.0
    for k in range(y0.shape[0]):
        for E, (a, b), part in basis:
            yp = y0.copy()
            ym = y0.copy()
            yp[k] += h * E
            ym[k] -= h * E
            fp = f(yp, s.dim, None)[k, a, b]
            fm = f(ym, s.dim, None)[k, a, b]
            comp = (fp - fm) / (2 * h)
            div += comp.real if part == "re" else comp.imag
    scale = float(np.linalg.norm(f(y0, s.dim, None)))
    return float(div), scale


# ---------------------------------------------------------------------------
# random Hamiltonians


def hermitize(Pw: TracePolynomial, roster, conj_order: str = "preserve") -> TracePolynomial:
    """``P + P^dagger``: a real (self-adjoint) trace functional."""
    return (Pw + adjoint_polynomial(Pw, roster, conj_order)).collect()


def random_hamiltonian(
    roster: Sequence[VariableSpec],
    rng: np.random.Generator,
    max_degree: int = 4,
    coupling: float = 0.1,
    n_random: int = 3,
) -> TracePolynomial:
    """Confining random Hamiltonian: quadratic oscillators, positive quartics and
    small random self-adjoint perturbations of degree <= ``max_degree``.

    Fermionic words always contain as many ``q`` as ``p`` letters.  No
    constant matrices appear, so the result is unitary invariant.
    """
    bos = [v.label for v in roster if v.parity != FERMIONIC]
    fer = [v.label for v in roster if v.parity == FERMIONIC]
    words: list[TraceWord] = []
    for b in bos:
        words.append(TraceWord(1.0, (P(b), P(b))))
        words.append(TraceWord(rng.uniform(0.5, 2.0), (Q(b), Q(b))))
        if max_degree >= 4:
            words.append(TraceWord(rng.uniform(0.0, coupling), (Q(b),) * 4))
    if max_degree >= 4:
        for i, a in enumerate(bos):
            for b in bos[i + 1:]:
                words.append(TraceWord(rng.uniform(0.0, coupling), (Q(a), Q(a), Q(b), Q(b))))
    base = TracePolynomial(words)
    pert = []
    letters_b = [x for b in bos for x in (Q(b), P(b))]
    for _ in range(n_random if bos else 0):
        k = int(rng.integers(2, max_degree + 1))
        ls = tuple(letters_b[int(i)] for i in rng.integers(0, len(letters_b), size=k))
        c = coupling * (rng.standard_normal() + 1j * rng.standard_normal()) / 2
        pert.append(TraceWord(c, ls))
    for f in fer:
        pert.append(TraceWord(0.5j * rng.uniform(0.5, 1.5), (Q(f), P(f))))
        for b in bos[:2]:
            c = coupling * (rng.standard_normal() + 1j * rng.standard_normal())
            pert.append(TraceWord(c, (Q(b), Q(f), P(f))))
        if max_degree >= 4:
            c = coupling * (rng.standard_normal() + 1j * rng.standard_normal())
            pert.append(TraceWord(c, (Q(f), P(f), Q(f), P(f))))
    if pert:
        base = base + hermitize(TracePolynomial(pert), roster)
    return base.collect()
