"""Stochastic statevector reduction: completed nonlinear SDE, Lindblad
averages, Born-rule statistics and the degenerate-energy contrast.

For each collapse channel ``A`` (``A = H_eff`` in energy-driven mode) the
completed equation integrated here is

    d psi = [-(i/hbar) H dt - (gamma/2) (A - <A>)^2 dt + (A - <A>) dW] psi

with ``dW`` of variance ``gamma dt``, stepped by Euler-Maruyama and
renormalized.  Its ensemble average obeys the Lindblad equation

    rho' = -(i/hbar) [H, rho] - (gamma/2) sum_A [A, [A, rho]].

The uncompleted linear form ``d psi = [-(i/hbar) H dt - A dW] psi`` is kept
as a diagnostic: it does not conserve the norm.

Per-trajectory noise streams come from ``SeedSequence(seed).spawn(n_traj)``
so that trajectory ``k`` sees the same increments however the run is split.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.linalg import expm

ENERGY_DRIVEN = "energy_driven"
CSL = "csl"
RESOLVE_THRESHOLD = 1 - 1e-3
NOISE_CHUNK = 1024


class CollapseError(ValueError):
    """Invalid collapse configuration or input state."""


def _hermitian(M, name: str, tol: float = 1e-10) -> np.ndarray:
    M = np.asarray(M, dtype=complex)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise CollapseError(f"{name} must be a square matrix")
    if np.linalg.norm(M - M.conj().T) > tol * max(1.0, np.linalg.norm(M)):
        raise CollapseError(f"{name} is not self-adjoint")
    return M


@dataclass(frozen=True)
class StateVector:
    amplitudes: np.ndarray
    time: float = 0.0
    hbar: float = 1.0
    basis: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "amplitudes", np.asarray(self.amplitudes, dtype=complex))
        if self.hbar <= 0:
            raise CollapseError("hbar must be positive")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        return StateVector(self.amplitudes / self.norm, self.time, self.hbar, self.basis)


@dataclass(frozen=True)
class CollapseConfig:
    """Collapse model: mode, effective Hamiltonian, channels, rate.

    In energy-driven mode the single channel is ``H_eff`` itself and
    ``channels`` must be left empty.  ``dephasing`` adds the non-collapsing
    real-noise contribution as a unitary-noise channel along ``H_eff``.
    """

    mode: str
    H_eff: np.ndarray
    gamma: float
    channels: tuple[np.ndarray, ...] = ()
    hbar: float = 1.0
    dephasing: float = 0.0

    def __post_init__(self):
        if self.mode not in (ENERGY_DRIVEN, CSL):
            raise CollapseError(f"unknown mode {self.mode!r}")
        if self.gamma < 0:
            raise CollapseError("gamma must be >= 0")
        if self.dephasing < 0:
            raise CollapseError("dephasing rate must be >= 0")
        if self.hbar <= 0:
            raise CollapseError("hbar must be positive")
        H = _hermitian(self.H_eff, "H_eff")
        object.__setattr__(self, "H_eff", H)
        chans = tuple(_hermitian(A, f"channel {i}") for i, A in enumerate(self.channels))
        if self.mode == ENERGY_DRIVEN and chans:
            raise CollapseError("energy-driven mode uses H_eff as its only channel")
        if self.mode == CSL and not chans:
            raise CollapseError("csl mode needs at least one channel")
        for A in chans:
            if A.shape != H.shape:
                raise CollapseError("channel and H_eff dimensions differ")
        for i, A in enumerate(chans):
            for j in range(i):
                B = chans[j]
                if np.linalg.norm(A @ B - B @ A) > 1e-10:
                    raise CollapseError(f"channels {j} and {i} do not commute")
        object.__setattr__(self, "channels", chans)

    @property
    def dim(self) -> int:
        return self.H_eff.shape[0]

    @property
    def operators(self) -> tuple[np.ndarray, ...]:
        return (self.H_eff,) if self.mode == ENERGY_DRIVEN else self.channels

    def outcome_projectors(self, tol: float = 1e-9) -> list[np.ndarray]:
        """Projectors onto the joint eigenspaces of the channels."""
        return joint_eigenspaces(self.operators, tol)

    def to_dict(self) -> dict:
        enc = lambda M: [[[z.real, z.imag] for z in row] for row in np.asarray(M)]  # noqa: E731
        return {
            "mode": self.mode,
            "H_eff": enc(self.H_eff),
            "channels": [enc(A) for A in self.channels],
            "gamma": self.gamma,
            "hbar": self.hbar,
            "dephasing": self.dephasing,
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON encoding (sorted keys, no spaces)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def joint_eigenspaces(ops: Sequence[np.ndarray], tol: float = 1e-9) -> list[np.ndarray]:
    """Joint eigenspace projectors of commuting self-adjoint matrices.

    Diagonalizes a generic real combination, then groups eigenvectors by the
    tuple of eigenvalues of every operator.  Order: ascending by that tuple.
    """
    d = ops[0].shape[0]
    weights = np.cos(np.arange(1, len(ops) + 1) * 0.7390851) + 1.2345
    mix = sum(w * A for w, A in zip(weights, ops))
    _, V = np.linalg.eigh(mix)
    keys = []
    for k in range(d):
        v = V[:, k]
        keys.append(tuple(float(np.real(v.conj() @ A @ v)) for A in ops))
    groups: list[tuple[tuple, list[int]]] = []
    for k, key in enumerate(keys):
        for gk, members in groups:
            if all(abs(a - b) <= tol * max(1.0, abs(a)) for a, b in zip(gk, key)):
                members.append(k)
                break
        else:
            groups.append((key, [k]))
    groups.sort(key=lambda g: g[0])
    out = []
    for _, members in groups:
        sub = V[:, members]
        out.append(sub @ sub.conj().T)
    return out


# ---------------------------------------------------------------------------
# ground-state projector


def contour_projector(H: np.ndarray, center: float, radius: float, nodes: int = 64) -> np.ndarray:
    """``(2 pi i)^-1`` times the resolvent integral around a circle (trapezoid rule)."""
    H = np.asarray(H, dtype=complex)
    d = H.shape[0]
    I = np.eye(d)
    acc = np.zeros((d, d), dtype=complex)
    for k in range(nodes):
        phi = 2 * np.pi * k / nodes
        z = center + radius * np.exp(1j * phi)
        dz = 1j * radius * np.exp(1j * phi) * (2 * np.pi / nodes)
        acc += np.linalg.solve(z * I - H, I) * dz
    return acc / (2j * np.pi)


def ground_state_projector(H_eff, nodes: int = 64, min_gap: float = 1e-8, check_tol: float = 1e-8) -> np.ndarray:
    """Rank-one projector onto the nondegenerate ground state.

    Cross-checked against contour quadrature of the resolvent on a circle of
    radius ``gap / 2`` around the lowest eigenvalue.
    """
    H = _hermitian(H_eff, "H_eff")
    evals, V = np.linalg.eigh(H)
    gap = evals[1] - evals[0] if len(evals) > 1 else np.inf
    if gap <= min_gap:
        raise CollapseError(f"ground state is degenerate (gap {gap:.3e})")
    v = V[:, 0]
    P = np.outer(v, v.conj())
    if np.isfinite(gap):
        Pc = contour_projector(H, evals[0], gap / 2, nodes)
        err = np.linalg.norm(Pc - P)
        if err > check_tol:
            raise CollapseError(f"contour and spectral projectors disagree by {err:.3e}")
    return P


# ---------------------------------------------------------------------------
# noise


@dataclass
class NoiseRealization:
    """Wiener increments ``(n_steps, n_channels)`` with variance ``gamma dt``."""

    seed: int
    dt: float
    gamma: float
    increments: np.ndarray

    @classmethod
    def generate(cls, seed: int, dt: float, n_steps: int, n_channels: int, gamma: float) -> "NoiseRealization":
        rng = np.random.default_rng(seed)
        inc = np.sqrt(gamma * dt) * rng.standard_normal((n_steps, n_channels))
        return cls(seed, dt, gamma, inc)


def trajectory_generators(seed: int, n_traj: int) -> list[np.random.Generator]:
    """Independent per-trajectory streams: ``SeedSequence(seed).spawn(n_traj)``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_traj)]


# ---------------------------------------------------------------------------
# stepping


def _expect(psi: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.real(np.einsum("...i,ij,...j->...", psi.conj(), A, psi))


def _raw_step(psi, cfg: CollapseConfig, dW, dt: float, completed: bool, dW_deph=None) -> np.ndarray:
    """One Euler-Maruyama increment without renormalization (batched)."""
    H = cfg.H_eff
    d = -1j / cfg.hbar * dt * (psi @ H.T)
    for c, A in enumerate(cfg.operators):
        Apsi = psi @ A.T
        w = dW[..., c][..., None]
        if completed:
            m = _expect(psi, A)[..., None]
            D = Apsi - m * psi
            D2 = D @ A.T - m * D
            d = d - 0.5 * cfg.gamma * dt * D2 + w * D
        else:
            d = d - w * Apsi
    if cfg.dephasing and dW_deph is not None:
        Hpsi = psi @ H.T
        d = d - 1j * dW_deph[..., None] * Hpsi - 0.5 * cfg.dephasing * dt * (Hpsi @ H.T)
    return psi + d


def sde_step(
    psi: StateVector | np.ndarray,
    cfg: CollapseConfig,
    dW: np.ndarray,
    dt: float,
    completed: bool = True,
    dW_deph=None,
):
    """Advance by ``dt`` with increments ``dW`` (one per channel, variance
    ``gamma dt``).

    ``completed=True`` applies the norm-preserving completion followed by
    renormalization; ``completed=False`` is the raw linear diagnostic step
    (no completion terms, no renormalization).  Arrays of shape
    ``(..., d)`` are stepped in batch; a :class:`StateVector` in gives one out.
    """
    if cfg.gamma < 0:
        raise CollapseError("gamma must be >= 0")
    arr = psi.amplitudes if isinstance(psi, StateVector) else np.asarray(psi, dtype=complex)
    dW = np.asarray(dW, dtype=float)
    if dW.shape[-1] != len(cfg.operators):
        raise CollapseError(f"expected {len(cfg.operators)} increments, got {dW.shape[-1]}")
    out = _raw_step(arr, cfg, dW, dt, completed, dW_deph)
    if completed:
        out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    if isinstance(psi, StateVector):
        return StateVector(out, psi.time + dt, psi.hbar, psi.basis)
    return out


# ---------------------------------------------------------------------------
# ensembles of trajectories


@dataclass
class EnsembleRecord:
    """Outcome of :func:`run_trajectories`.

    ``outcome[k]`` is the index of the dominant joint eigenspace at
    ``t_final`` (``-1`` if no population reaches the threshold);
    ``resolve_time[k]`` is the first time the threshold was crossed (NaN if
    never).  ``checkpoint_states[c, k]`` are the states at
    ``checkpoint_times[c]`` (``c = 0`` is the initial state).
    """

    outcome: np.ndarray
    resolve_time: np.ndarray
    final_states: np.ndarray
    final_norm: np.ndarray
    checkpoint_times: np.ndarray
    checkpoint_states: np.ndarray
    projectors: list[np.ndarray]
    seed: int
    dt: float
    t_final: float
    config_hash: str
    completed: bool = True
    threshold: float = RESOLVE_THRESHOLD
    mean_norm_rate: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n_traj(self) -> int:
        return len(self.outcome)

    @property
    def resolved_fraction(self) -> float:
        return float(np.mean(self.outcome >= 0))

    @property
    def n_unresolved(self) -> int:
        return int(np.sum(self.outcome < 0))

    def populations(self) -> np.ndarray:
        """``(n_checkpoints, n_traj, n_outcomes)`` eigenspace populations."""
        psi = self.checkpoint_states
        nrm = np.sum(np.abs(psi) ** 2, axis=-1)
        return np.stack([_expect(psi, P) for P in self.projectors], axis=-1) / nrm[..., None]

    def mean_density(self, checkpoint: int = -1) -> tuple[np.ndarray, np.ndarray]:
        """Trajectory average of ``|psi><psi|`` and entrywise stderr (complex:
        real-part error + i * imaginary-part error)."""
        psi = self.checkpoint_states[checkpoint]
        psi = psi / np.linalg.norm(psi, axis=-1, keepdims=True)
        rho = np.einsum("ki,kj->kij", psi, psi.conj())
        n = rho.shape[0]
        mean = rho.mean(axis=0)
        se = rho.real.std(axis=0, ddof=1) / np.sqrt(n) + 1j * rho.imag.std(axis=0, ddof=1) / np.sqrt(n)
        return mean, se

    def to_csv(self) -> str:
        rows = ["trajectory_id,outcome,resolve_time,final_norm"]
        for k in range(self.n_traj):
            rt = self.resolve_time[k]
            rts = "" if np.isnan(rt) else f"{rt:.6f}"
            rows.append(f"{k},{int(self.outcome[k])},{rts},{self.final_norm[k]:.12f}")
        return "\n".join(rows) + "\n"


def run_trajectories(
    psi0,
    cfg: CollapseConfig,
    t_final: float,
    dt: float,
    n_traj: int,
    seed: int,
    n_checkpoints: int = 10,
    completed: bool = True,
    threshold: float = RESOLVE_THRESHOLD,
) -> EnsembleRecord:
    """Integrate ``n_traj`` independent trajectories from ``psi0``.

    All trajectories are stepped together; trajectory ``k`` draws its
    increments from its own spawned stream in chunks of ``NOISE_CHUNK``
    steps, so results do not depend on batching.  ``n_checkpoints``
    equally spaced snapshots (plus ``t = 0``) are kept.
    """
    if n_traj <= 0:
        raise CollapseError("n_traj must be positive")
    psi0 = psi0.amplitudes if isinstance(psi0, StateVector) else np.asarray(psi0, dtype=complex)
    if abs(np.linalg.norm(psi0) - 1) > 1e-9:
        raise CollapseError("initial state must be normalized")
    n_steps = int(round(t_final / dt))
    if n_steps <= 0:
        raise CollapseError("t_final must exceed dt")
    n_ch = len(cfg.operators) + (1 if cfg.dephasing else 0)
    gens = trajectory_generators(seed, n_traj)
    projectors = cfg.outcome_projectors()
    check_steps = np.unique(np.linspace(0, n_steps, n_checkpoints + 1).round().astype(int))
    psi = np.tile(psi0, (n_traj, 1))
    snaps = [psi.copy()]
    resolve = np.full(n_traj, np.nan)
    norm_rate = 0.0
    sg = np.sqrt(cfg.gamma * dt)
    sd = np.sqrt(cfg.dephasing * dt)
    buf = None
    for step in range(n_steps):
        j = step % NOISE_CHUNK
        if j == 0:
            m = min(NOISE_CHUNK, n_steps - step)
            buf = np.stack([g.standard_normal((m, n_ch)) for g in gens], axis=1)
        z = buf[j]
        dW = sg * z[:, : len(cfg.operators)]
        dWd = sd * z[:, -1] if cfg.dephasing else None
        raw = _raw_step(psi, cfg, dW, dt, completed, dWd)
        n_old = np.sum(np.abs(psi) ** 2, axis=-1)
        n_new = np.sum(np.abs(raw) ** 2, axis=-1)
        norm_rate += float(np.mean((n_new - n_old) / n_old)) / dt
        psi = raw / np.sqrt(n_new)[:, None] if completed else raw
        t = (step + 1) * dt
        pops = _max_population(psi, projectors)
        newly = np.isnan(resolve) & (pops >= threshold)
        resolve[newly] = t
        if step + 1 in check_steps:
            snaps.append(psi.copy())
    pops_final = np.stack([_expect(psi, P) for P in projectors], axis=-1)
    pops_final /= np.sum(np.abs(psi) ** 2, axis=-1)[:, None]
    best = pops_final.argmax(axis=-1)
    outcome = np.where(pops_final.max(axis=-1) >= threshold, best, -1)
    return EnsembleRecord(
        outcome=outcome,
        resolve_time=resolve,
        final_states=psi,
        final_norm=np.linalg.norm(psi, axis=-1),
        checkpoint_times=check_steps * dt,
        checkpoint_states=np.stack(snaps),
        projectors=projectors,
        seed=seed,
        dt=dt,
        t_final=n_steps * dt,
        config_hash=cfg.hash(),
        completed=completed,
        threshold=threshold,
        mean_norm_rate=norm_rate / n_steps,
    )


def _max_population(psi, projectors) -> np.ndarray:
    nrm = np.sum(np.abs(psi) ** 2, axis=-1)
    return np.max(np.stack([_expect(psi, P) for P in projectors], axis=-1), axis=-1) / nrm


# ---------------------------------------------------------------------------
# Born statistics


@dataclass
class BornReport:
    probabilities: np.ndarray
    frequencies: np.ndarray
    sigma: np.ndarray
    intervals: np.ndarray
    resolved_fraction: float
    martingale_z: np.ndarray
    n_traj: int

    @property
    def frequency_z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(self.frequencies - self.probabilities) / self.sigma
        return np.where(self.sigma > 0, z, np.where(np.abs(self.frequencies - self.probabilities) < 1e-12, 0.0, np.inf))

    @property
    def frequencies_ok(self) -> bool:
        return bool(np.all(self.frequency_z <= 3.0))

    @property
    def martingale_ok(self) -> bool:
        return bool(np.all(self.martingale_z < 3.0))

    @property
    def passed(self) -> bool:
        return self.resolved_fraction >= 0.99 and self.frequencies_ok and self.martingale_ok

    def to_dict(self) -> dict:
        return {
            "probabilities": self.probabilities.tolist(),
            "frequencies": self.frequencies.tolist(),
            "sigma": self.sigma.tolist(),
            "intervals_3sigma": self.intervals.tolist(),
            "frequency_z": self.frequency_z.tolist(),
            "resolved_fraction": self.resolved_fraction,
            "martingale_max_z": float(np.max(self.martingale_z)) if self.martingale_z.size else 0.0,
            "n_traj": self.n_traj,
            "passed": self.passed,
        }


def born_statistics(record: EnsembleRecord, psi0) -> BornReport:
    """Compare outcome frequencies with ``|c_i|^2`` and test the martingale.

    Frequencies are over all trajectories (unresolved ones count against
    every outcome).  ``sigma = sqrt(p (1 - p) / n)``; ``intervals`` are exact
    Clopper-Pearson bounds at the 3-sigma confidence level.  The martingale
    check compares the trajectory mean of each eigenspace population at
    every checkpoint after ``t = 0`` with its initial value.
    """
    psi0 = psi0.amplitudes if isinstance(psi0, StateVector) else np.asarray(psi0, dtype=complex)
    probs = np.array([_expect(psi0, P) for P in record.projectors])
    n = record.n_traj
    counts = np.array([np.sum(record.outcome == i) for i in range(len(probs))])
    freqs = counts / n
    sigma = np.sqrt(probs * (1 - probs) / n)
    alpha = 2 * stats.norm.sf(3.0)
    lo = np.where(counts > 0, stats.beta.ppf(alpha / 2, counts, n - counts + 1), 0.0)
    hi = np.where(counts < n, stats.beta.ppf(1 - alpha / 2, counts + 1, n - counts), 1.0)
    pops = record.populations()[1:]
    means = pops.mean(axis=1)
    ses = pops.std(axis=1, ddof=1) / np.sqrt(n)
    dev = np.abs(means - probs[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(ses > 0, dev / ses, np.where(dev < 1e-12, 0.0, np.inf))
    return BornReport(probs, freqs, sigma, np.stack([lo, hi], axis=-1), record.resolved_fraction, z, n)


# ---------------------------------------------------------------------------
# Lindblad


def lindblad_generator(cfg: CollapseConfig) -> np.ndarray:
    """Superoperator on row-major ``vec(rho)``: ``vec(X rho Y) = (X kron Y^T) vec(rho)``."""
    d = cfg.dim
    I = np.eye(d)
    H = cfg.H_eff
    L = -1j / cfg.hbar * (np.kron(H, I) - np.kron(I, H.T))
    terms = [(cfg.gamma, A) for A in cfg.operators]
    if cfg.dephasing:
        terms.append((cfg.dephasing, H))
    for g, A in terms:
        A2 = A @ A
        L = L - 0.5 * g * (np.kron(A2, I) - 2 * np.kron(A, A.T) + np.kron(I, A2.T))
    return L


def lindblad_evolve(rho0, cfg: CollapseConfig, t, trace_tol: float = 1e-8) -> np.ndarray:
    """Exact dense propagation ``rho(t) = exp(L t) rho0`` (``t`` scalar or array)."""
    rho0 = np.asarray(rho0, dtype=complex)
    d = cfg.dim
    if rho0.shape != (d, d):
        raise CollapseError("rho0 has the wrong shape")
    if np.linalg.norm(rho0 - rho0.conj().T) > 1e-10:
        raise CollapseError("rho0 is not self-adjoint")
    if np.min(np.linalg.eigvalsh(rho0)) < -1e-10:
        raise CollapseError("rho0 is not positive")
    if abs(np.trace(rho0) - 1) > 1e-10:
        raise CollapseError("rho0 must have unit trace")
    L = lindblad_generator(cfg)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    out = []
    for ti in ts:
        r = (expm(L * ti) @ rho0.reshape(-1)).reshape(d, d)
        drift = abs(np.trace(r) - 1)
        if drift > trace_tol:
            raise CollapseError(f"trace drift {drift:.3e} at t={ti}")
        out.append(r)
    out = np.array(out)
    return out[0] if np.ndim(t) == 0 else out


def offdiagonal_decay(rho01_0: complex, E0: float, E1: float, gamma: float, t, hbar: float = 1.0):
    """Closed form ``rho_01(t) = rho_01(0) exp(-i w t - gamma (E1-E0)^2 t / 2)``
    with ``w = (E0 - E1) / hbar`` for the energy-driven two-level model."""
    t = np.asarray(t, dtype=float)
    w = (E0 - E1) / hbar
    return rho01_0 * np.exp(-1j * w * t - 0.5 * gamma * (E1 - E0) ** 2 * t)


# ---------------------------------------------------------------------------
# degenerate-energy contrast


def mass_density_channels(site_projectors: Sequence[np.ndarray], masses: Sequence[float]) -> tuple[np.ndarray, ...]:
    """One channel per site: ``m_s P_s`` (single-site terms, mutually commuting)."""
    return tuple(float(m) * np.asarray(P, dtype=complex) for P, m in zip(site_projectors, masses))


@dataclass
class DegenerateReport:
    energy_drift: float
    energy_drift_stderr: float
    energy_max_abs_drift: float
    control_drift: float
    control_drift_stderr: float
    csl_resolved_fraction: float
    energy_resolved_fraction: float
    n_traj: int

    @staticmethod
    def _consistent(m, se) -> bool:
        # roundoff floor: a drift that is identically zero up to rounding
        return abs(m) <= 3 * se + 1e-12

    @property
    def passed(self) -> bool:
        return (
            self._consistent(self.energy_drift, self.energy_drift_stderr)
            and self._consistent(self.control_drift, self.control_drift_stderr)
            and self.csl_resolved_fraction >= 0.99
        )

    def to_dict(self) -> dict:
        d = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in self.__dict__.items()}
        d["passed"] = self.passed
        return d


def degenerate_model(internal_energies=(0.0, 1.0), mass: float = 1.0):
    """Two locations (L, R) times an internal level pair; basis ``loc * 2 + level``.

    Returns ``(H, site_projectors, psi0)`` where both locations carry the
    same internal spectrum and ``psi0`` is the equal superposition of
    locations and levels.
    """
    h = np.diag(np.asarray(internal_energies, dtype=complex))
    H = np.kron(np.eye(2), h)
    PL = np.kron(np.diag([1.0, 0.0]), np.eye(2)).astype(complex)
    PR = np.kron(np.diag([0.0, 1.0]), np.eye(2)).astype(complex)
    psi0 = np.kron(np.ones(2) / np.sqrt(2), np.ones(2) / np.sqrt(2)).astype(complex)
    return H, (PL, PR), psi0


def degenerate_no_collapse_experiment(
    gamma: float = 1.0,
    t_final: float = 20.0,
    dt: float = 2e-3,
    n_traj: int = 500,
    seed: int = 0,
    internal_energies=(0.0, 1.0),
    mass: float = 1.0,
) -> DegenerateReport:
    """Energy-driven vs csl collapse on a location superposition with equal
    energy spectra in both branches (plus a ``gamma = 0`` control)."""
    H, (PL, PR), psi0 = degenerate_model(internal_energies, mass)
    e_cfg = CollapseConfig(ENERGY_DRIVEN, H, gamma)
    c_cfg = CollapseConfig(CSL, H, gamma, mass_density_channels((PL, PR), (mass, mass)))
    z_cfg = CollapseConfig(ENERGY_DRIVEN, H, 0.0)
    ss = np.random.SeedSequence(seed).spawn(3)
    seeds = [int(s.generate_state(1)[0]) for s in ss]
    rec_e = run_trajectories(psi0, e_cfg, t_final, dt, n_traj, seeds[0])
    rec_c = run_trajectories(psi0, c_cfg, t_final, dt, n_traj, seeds[1])
    rec_z = run_trajectories(psi0, z_cfg, t_final, dt, n_traj, seeds[2])

    def drift(rec):
        p0 = _expect(psi0, PL)
        pf = _expect(rec.final_states, PL) / np.sum(np.abs(rec.final_states) ** 2, axis=-1)
        d = pf - p0
        se = d.std(ddof=1) / np.sqrt(len(d)) if len(d) > 1 else 0.0
        return float(d.mean()), float(se), float(np.max(np.abs(d)))

    me, se_e, mx = drift(rec_e)
    mz, se_z, _ = drift(rec_z)
    return DegenerateReport(me, se_e, mx, mz, se_z, rec_c.resolved_fraction, rec_e.resolved_fraction, n_traj)


# ---------------------------------------------------------------------------
# norm diagnostic


@dataclass
class NormDriftReport:
    linear_rate: float
    completed_rate: float

    @property
    def ratio(self) -> float:
        return abs(self.linear_rate) / abs(self.completed_rate) if self.completed_rate else np.inf

    @property
    def passed(self) -> bool:
        return abs(self.linear_rate) > 0 and abs(self.linear_rate) > 10 * abs(self.completed_rate)


def norm_drift_diagnostic(psi0, cfg: CollapseConfig, t_final: float, dt: float, n_traj: int, seed: int) -> NormDriftReport:
    """Mean relative norm change per unit time before renormalization, for
    the raw linear equation and for the completed one (same noise)."""
    lin = run_trajectories(psi0, cfg, t_final, dt, n_traj, seed, completed=False, n_checkpoints=1)
    comp = run_trajectories(psi0, cfg, t_final, dt, n_traj, seed, completed=True, n_checkpoints=1)
    return NormDriftReport(lin.mean_norm_rate, comp.mean_norm_rate)


# ---------------------------------------------------------------------------
# C~ fluctuations as a noise source


@dataclass
class NoiseBridge:
    """Scalar (``K``) and traceless (``Nmat``) fluctuation series of ``C~``
    about ``i_eff hbar``, with autocorrelation time and a Ljung-Box
    whiteness test on ``Re K``."""

    K: np.ndarray
    Nmat: np.ndarray
    hbar: float
    K_variance: float
    tau_int: float
    ljung_box_p: float
    constant: bool

    @property
    def white(self) -> bool:
        return self.constant or self.ljung_box_p > 0.01


def ljung_box(x: np.ndarray, lags: int) -> float:
    """p-value of the Ljung-Box portmanteau statistic up to ``lags``."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = len(x)
    var = np.dot(x, x)
    if var == 0:
        return 1.0
    lags = min(lags, n - 1)
    acf = np.array([np.dot(x[:-k], x[k:]) / var for k in range(1, lags + 1)])
    Q = n * (n + 2) * np.sum(acf**2 / (n - np.arange(1, lags + 1)))
    return float(stats.chi2.sf(Q, lags))


def ctilde_noise_bridge(series, hbar: float | None = None, window: int = 20, const_tol: float = 1e-9) -> NoiseBridge:
    """Split ``-i_eff C~ / hbar = (1 + K) 1 + Nmat`` along a series of ``C~``.

    ``series`` is an array ``(T, N, N)`` (or ``(steps, chains, N, N)``, which
    is flattened chain by chain).  ``hbar`` defaults to the series mean of
    the ``i_eff`` projection.  The series counts as constant when no entry of
    ``-i_eff C~ / hbar`` moves by more than ``const_tol`` (relative).
    """
    from .ensemble import integrated_time
    from .phase_space import i_eff

    Cs = np.asarray(series, dtype=complex)
    if Cs.ndim == 4:
        Cs = np.swapaxes(Cs, 0, 1).reshape(-1, *Cs.shape[2:])
    N = Cs.shape[-1]
    ie = i_eff(N)
    if hbar is None:
        signs = np.diag(ie).imag
        hbar = float(np.mean(np.einsum("tkk->tk", Cs).imag * signs))
    if hbar == 0:
        raise CollapseError("hbar estimate is zero; the split around i_eff hbar is undefined")
    X = -(ie @ Cs) / hbar
    K = np.trace(X, axis1=-2, axis2=-1) / N - 1
    Nmat = X - (1 + K)[:, None, None] * np.eye(N)
    kr = K.real
    scale = max(1.0, float(np.max(np.abs(X)))) if len(K) else 1.0
    constant = bool(np.max(np.abs(X - X[0])) < const_tol * scale) if len(K) else True
    tau = float(integrated_time(kr[:, None])) if len(K) > 1 else 1.0
    p = 1.0 if constant else ljung_box(kr, window)
    return NoiseBridge(K, Nmat, hbar, float(np.var(kr)), tau, p, constant)
