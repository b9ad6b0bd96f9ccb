"""Canonical-ensemble sampling over bosonic matrix phase space.

The weight is ``exp(-S)`` with

    S = lambda_hat * Tr(i_eff C~) + tau * H + eta * Re N,

sampled by random-walk Metropolis over orthonormal Hermitian coordinates
(``Tr x^2 = sum_k xi_k^2``).  Fermionic averages are not sampled: Grassmann
weights are not probabilities, so a tiny-size exact Berezin path is provided
instead (:func:`berezin_average`).

Standard errors are autocorrelation-corrected with Sokal's adaptive window
over all chains.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .grassmann import CONJ_PRESERVE, GrassmannElement, berezin_integrate, g_exp
from .phase_space import (
    BOSONIC,
    FERMIONIC,
    PhaseState,
    VariableSpec,
    apply_unitary,
    boson,
    eff_project,
    hermitian_basis,
    hermitian_from_coords,
    i_eff,
)
from .trace_calculus import (
    C,
    CompiledPolynomial,
    Letter,
    MatrixPolynomial,
    TracePolynomial,
    TraceWord,
    evaluate_generic,
    trace_derivative,
)

SOKAL_WINDOW = 5.0
TARGET_ACCEPTANCE = 0.3


class EnsembleError(ValueError):
    """Invalid ensemble parameters or sampling request."""


class ConsistencyError(RuntimeError):
    """A quantity that must be real came out complex."""


@dataclass(frozen=True)
class EnsembleParams:
    """Inverse temperatures of the canonical weight, size and roster.

    ``roster`` may be given as labels (bosonic) or :class:`VariableSpec`.
    """

    tau: float
    dim: int
    roster: tuple = ("1",)
    eta: float = 0.0
    lambda_hat: float = 0.0

    def __post_init__(self):
        ro = tuple(v if isinstance(v, VariableSpec) else boson(str(v)) for v in self.roster)
        object.__setattr__(self, "roster", ro)
        if self.tau < 0:
            raise EnsembleError("tau must be >= 0")
        if self.tau == 0 and self.lambda_hat == 0:
            raise EnsembleError("tau and lambda_hat cannot both vanish (weight not normalizable)")
        if self.lambda_hat != 0 and self.dim % 2:
            raise EnsembleError(f"N must be even when lambda_hat != 0 (got N={self.dim})")
        if self.dim < 1:
            raise EnsembleError("dim must be positive")

    @property
    def bosonic(self) -> bool:
        return all(v.parity == BOSONIC for v in self.roster)

    @property
    def labels(self) -> list[str]:
        return [v.label for v in self.roster]


def _ieff_or_none(dim: int):
    return i_eff(dim) if dim % 2 == 0 else None


def _check_real(name: str, val, tol: float = 1e-10):
    val = np.asarray(val)
    scale = np.maximum(1.0, np.abs(val.real))
    if np.any(np.abs(val.imag) > tol * scale):
        raise ConsistencyError(f"{name} has an imaginary part {np.max(np.abs(val.imag)):.3e}")
    return val.real


def _ctilde_bosonic(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``sum_r [q_r, p_r]`` over axis -3 of ``(..., n_vars, N, N)`` arrays."""
    return (q @ p - p @ q).sum(axis=-3)


def log_weight(s: PhaseState, H: TracePolynomial, params: EnsembleParams, registry: Mapping | None = None) -> float:
    """``-[lambda_hat Tr(i_eff C~) + tau H + eta Re N]`` for a bosonic state.

    Raises :class:`ConsistencyError` if a term that must be real is not.
    """
    if s.algebra is not None:
        raise EnsembleError("log_weight is defined here for plain bosonic states")
    from .dynamics import charge_Ctilde, charge_N

    total = 0.0
    if params.lambda_hat != 0:
        lam = np.trace(i_eff(s.dim) @ charge_Ctilde(s))
        total += params.lambda_hat * float(_check_real("Tr(i_eff C~)", lam))
    if params.tau != 0:
        h = CompiledPolynomial(H).trace(s.values, s.dim, None, registry)
        total += params.tau * float(_check_real("H", h))
    if params.eta != 0:
        total += params.eta * float(np.real(charge_N(s)))
    return -total


# ---------------------------------------------------------------------------
# sample sets and statistics


def integrated_time(x: np.ndarray, c: float = SOKAL_WINDOW) -> np.ndarray:
    """Integrated autocorrelation time ``1 + 2 sum rho(t)`` per component.

    ``x`` has shape ``(n_steps, n_chains, ...)``; the normalized
    autocorrelation is averaged over chains and summed up to Sokal's window
    (smallest ``M >= c * tau(M)``).  Constant components get ``tau = 1``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    flat = x.reshape(n, x.shape[1], -1)
    d = flat - flat.mean(axis=0, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, n=nfft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=0)[:n].mean(axis=1)
    var0 = acov[0]
    tau = np.ones(flat.shape[-1])
    ok = var0 > 0
    if not np.any(ok):
        return tau.reshape(x.shape[2:])
    rho = acov[:, ok] / var0[ok]
    taus = 2.0 * np.cumsum(rho, axis=0) - 1.0
    m = np.arange(n)[:, None]
    window = m >= c * taus
    first = np.where(window.any(axis=0), window.argmax(axis=0), n - 1)
    tau[ok] = np.maximum(taus[first, np.arange(rho.shape[1])], 1.0)
    return tau.reshape(x.shape[2:])


def mean_stderr(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean over the first two axes ``(steps, chains)`` and its error bar.

    Complex inputs return a complex mean and a complex stderr whose real and
    imaginary parts are the errors of the respective parts.
    """
    x = np.asarray(x)
    if np.iscomplexobj(x):
        mr, sr = mean_stderr(x.real)
        mi, si = mean_stderr(x.imag)
        return mr + 1j * mi, sr + 1j * si
    n_tot = x.shape[0] * x.shape[1]
    mean = x.mean(axis=(0, 1))
    var = x.var(axis=(0, 1))
    tau = integrated_time(x) if x.shape[0] > 1 else np.ones(mean.shape)
    return mean, np.sqrt(var * tau / n_tot)


@dataclass
class SampleSet:
    """Post-burn-in draws ``mats[step, chain, var, 0/1]`` (``q``/``p``).

    Chain diagnostics live in ``acceptance`` (per chain), ``step_scale`` and
    ``notes`` (warnings raised while sampling).
    """

    roster: tuple[VariableSpec, ...]
    dim: int
    mats: np.ndarray
    acceptance: np.ndarray
    step_scale: float
    seed: int | None = None
    params: EnsembleParams | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.mats.shape[0]

    @property
    def n_chains(self) -> int:
        return self.mats.shape[1]

    def __len__(self) -> int:
        return self.n_steps * self.n_chains

    def values(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Batched ``label -> (q, p)`` with batch shape ``(steps, chains)``."""
        return {v.label: (self.mats[:, :, i, 0], self.mats[:, :, i, 1]) for i, v in enumerate(self.roster)}

    def state(self, step: int, chain: int = 0) -> PhaseState:
        vals = {v.label: (self.mats[step, chain, i, 0], self.mats[step, chain, i, 1]) for i, v in enumerate(self.roster)}
        return PhaseState(self.roster, vals, self.dim)

    @property
    def states(self) -> list[PhaseState]:
        return [self.state(t, c) for t in range(self.n_steps) for c in range(self.n_chains)]

    def ctilde(self) -> np.ndarray:
        return _ctilde_bosonic(self.mats[:, :, :, 0], self.mats[:, :, :, 1])

    def evaluate(self, obs, registry: Mapping | None = None) -> np.ndarray:
        """Per-sample values, shape ``(steps, chains, ...)``."""
        if isinstance(obs, (TracePolynomial, MatrixPolynomial)):
            cp = CompiledPolynomial(obs)
            vals = self.values()
            return cp.trace(vals, self.dim, None, registry) if cp.is_trace else cp.matrix(vals, self.dim, None, registry)
        if isinstance(obs, str):
            if obs.lower() in ("ctilde", "c~"):
                return self.ctilde()
            raise EnsembleError(f"unknown named observable {obs!r}")
        if callable(obs):
            return np.asarray(obs(self))
        arr = np.asarray(obs, dtype=complex)
        return np.broadcast_to(arr, (self.n_steps, self.n_chains) + arr.shape)

    def replace_mats(self, mats: np.ndarray) -> "SampleSet":
        return SampleSet(self.roster, self.dim, mats, self.acceptance, self.step_scale, self.seed, self.params, list(self.notes))

    @property
    def diagnostics(self) -> dict:
        return {
            "n_steps": self.n_steps,
            "n_chains": self.n_chains,
            "acceptance": [float(a) for a in self.acceptance],
            "step_scale": float(self.step_scale),
            "seed": self.seed,
            "notes": list(self.notes),
        }

    def to_jsonl(self, every: int = 1) -> str:
        lines = []
        for t in range(0, self.n_steps, every):
            for c in range(self.n_chains):
                rec = self.state(t, c).to_record()
                rec["step"], rec["chain"] = t, c
                lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Metropolis


class _BosonicWeight:
    """Batched ``-S`` over coordinate arrays ``(batch, n_vars, 2, n_basis)``."""

    def __init__(self, H: TracePolynomial, params: EnsembleParams, registry: Mapping | None):
        self.params = params
        self.H = CompiledPolynomial(H)
        self.registry = registry
        self.basis = hermitian_basis(params.dim)
        self.ie = _ieff_or_none(params.dim)

    def mats(self, x: np.ndarray) -> np.ndarray:
        return hermitian_from_coords(x, self.basis)

    def __call__(self, M: np.ndarray) -> np.ndarray:
        p = self.params
        total = np.zeros(M.shape[0])
        if p.lambda_hat != 0:
            Ct = _ctilde_bosonic(M[:, :, 0], M[:, :, 1])
            lam = np.einsum("ii,bii->b", self.ie, Ct)
            total += p.lambda_hat * _check_real("Tr(i_eff C~)", lam)
        if p.tau != 0:
            vals = {v.label: (M[:, i, 0], M[:, i, 1]) for i, v in enumerate(p.roster)}
            h = self.H.trace(vals, p.dim, None, self.registry)
            total += p.tau * _check_real("H", h)
        return -total


def mcmc_sample(
    H: TracePolynomial,
    params: EnsembleParams,
    n_samples: int,
    burn_in: int = 2000,
    step_scale: float = 0.5,
    seed: int | None = 0,
    n_chains: int = 4,
    tune: bool = True,
    registry: Mapping | None = None,
    init_scale: float = 0.5,
) -> SampleSet:
    """Random-walk Metropolis over all Hermitian coordinates jointly.

    ``n_samples`` counts post-burn-in draws over all chains (rounded up to a
    multiple of ``n_chains``).  During burn-in the common step size is tuned
    toward 30 % acceptance; a final acceptance outside ``[0.1, 0.9]`` is
    recorded in ``notes`` and emitted as a warning.
    """
    if not params.bosonic:
        raise EnsembleError("Metropolis sampling covers bosonic rosters only; use berezin_average for fermions")
    if n_samples <= 0 or n_chains <= 0:
        raise EnsembleError("n_samples and n_chains must be positive")
    rng = np.random.default_rng(seed)
    w = _BosonicWeight(H, params, registry)
    nv, nb = len(params.roster), params.dim**2
    steps = -(-n_samples // n_chains)
    x = init_scale * rng.standard_normal((n_chains, nv, 2, nb))
    M = w.mats(x)
    lw = w(M)
    step = float(step_scale)
    out = np.empty((steps, n_chains, nv, 2, params.dim, params.dim), dtype=complex)
    accepted = np.zeros(n_chains)
    window_acc, window_n = 0.0, 0
    for it in range(burn_in + steps):
        prop = x + step * rng.standard_normal(x.shape)
        Mp = w.mats(prop)
        lwp = w(Mp)
        u = rng.random(n_chains)
        with np.errstate(over="ignore"):
            acc = np.log(u) < (lwp - lw)
        x = np.where(acc[:, None, None, None], prop, x)
        M = np.where(acc[:, None, None, None, None], Mp, M)
        lw = np.where(acc, lwp, lw)
        if it < burn_in:
            if tune and step > 0:
                window_acc += acc.mean()
                window_n += 1
                if window_n == 50:
                    step *= float(np.exp(window_acc / window_n - TARGET_ACCEPTANCE))
                    window_acc, window_n = 0.0, 0
            continue
        accepted += acc
        out[it - burn_in] = M
    acceptance = accepted / steps
    notes = []
    if np.any((acceptance < 0.1) | (acceptance > 0.9)):
        msg = f"acceptance {np.round(acceptance, 3).tolist()} outside [0.1, 0.9]"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return SampleSet(params.roster, params.dim, out, acceptance, step, seed, params, notes)


def ensemble_average(A, samples: SampleSet, registry: Mapping | None = None):
    """Sample mean and autocorrelation-corrected standard error.

    ``A`` may be a number, a trace polynomial (scalar result), a matrix
    polynomial or the name ``"ctilde"`` (entrywise results), or a callable
    mapping the sample set to per-sample values.  Complex estimates carry a
    complex stderr (error of the real part + i * error of the imaginary part).
    """
    if len(samples) == 0:
        raise EnsembleError("empty sample set")
    vals = samples.evaluate(A, registry)
    mean, se = mean_stderr(vals)
    if np.ndim(mean) == 0:
        tiny = 1e-12 * max(1.0, abs(mean.real))
        if np.iscomplexobj(mean) and abs(mean.imag) <= tiny and abs(se.imag) <= tiny:
            return float(mean.real), float(se.real)
        if np.iscomplexobj(mean):
            return complex(mean), complex(se)
        return float(mean), float(se)
    return mean, se


# ---------------------------------------------------------------------------
# global unitary fixing


@dataclass(frozen=True)
class FixInfo:
    unitary: np.ndarray
    degenerate: bool


def _phase_fix(V: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    V = V.copy()
    for k in range(V.shape[1]):
        col = V[:, k]
        idx = np.flatnonzero(np.abs(col) > tol)
        if idx.size:
            c = col[idx[0]]
            V[:, k] = col * (abs(c) / c)
    return V


def _fixing_unitary(q: np.ndarray, second: np.ndarray, gap_tol: float) -> tuple[np.ndarray, bool]:
    evals, V = np.linalg.eigh(q)
    degenerate = False
    k = 0
    n = len(evals)
    while k < n:
        m = k + 1
        while m < n and evals[m] - evals[m - 1] < gap_tol:
            m += 1
        if m - k > 1:
            degenerate = True
            sub = V[:, k:m]
            red = sub.conj().T @ second @ sub
            _, W = np.linalg.eigh((red + red.conj().T) / 2)
            V[:, k:m] = sub @ W
        k = m
    return _phase_fix(V), degenerate


def unitary_fix(
    s: PhaseState,
    label: str | None = None,
    gap_tol: float = 1e-9,
    return_info: bool = False,
):
    """Conjugate the whole state into the frame where ``q_label`` is diagonal.

    Eigenvalues ascend; each eigenvector's first nonzero component is made
    positive real.  Inside a degenerate cluster (gap below ``gap_tol``) the
    basis is fixed by diagonalizing ``p_label`` restricted to it, which is
    flagged in the returned :class:`FixInfo` when ``return_info`` is set.
    """
    bos = [v.label for v in s.roster if v.parity == BOSONIC]
    if not bos:
        raise EnsembleError("unitary fixing needs a bosonic variable")
    label = bos[0] if label is None else label
    if label not in bos:
        raise EnsembleError(f"{label!r} is not a bosonic variable")
    if s.algebra is not None:
        q, p = s.matrix_body(s.q(label)), s.matrix_body(s.p(label))
    else:
        q, p = s.q(label), s.p(label)
    U, deg = _fixing_unitary(q, p, gap_tol)
    out = apply_unitary(s, U) if s.algebra is None else _apply_unitary_stack(s, U)
    return (out, FixInfo(U, deg)) if return_info else out


def _apply_unitary_stack(s: PhaseState, U: np.ndarray) -> PhaseState:
    Ud = U.conj().T
    return s.replace({lab: (Ud @ q @ U, Ud @ p @ U) for lab, (q, p) in s.values.items()})


def fix_samples(samples: SampleSet, label: str | None = None, gap_tol: float = 1e-9) -> SampleSet:
    """Apply :func:`unitary_fix` to every draw (batched eigendecomposition)."""
    labels = [v.label for v in samples.roster]
    i = 0 if label is None else labels.index(label)
    q = samples.mats[:, :, i, 0]
    p = samples.mats[:, :, i, 1]
    evals, V = np.linalg.eigh(q)
    gaps = np.diff(evals, axis=-1)
    # phase rule: first component above tolerance made positive real
    mag = np.abs(V)
    first = np.argmax(mag > 1e-10, axis=-2)
    c = np.take_along_axis(V, first[..., None, :], axis=-2)
    V = V * (np.abs(c) / c)
    bad = np.argwhere((gaps < gap_tol).any(axis=-1)) if gaps.size else np.empty((0, 2), int)
    for t, ch in bad:
        V[t, ch], _ = _fixing_unitary(q[t, ch], p[t, ch], gap_tol)
    Vd = np.conj(np.swapaxes(V, -1, -2))
    mats = Vd[:, :, None, None] @ samples.mats @ V[:, :, None, None]
    out = samples.replace_mats(mats)
    if len(bad):
        out.notes.append(f"{len(bad)} draws with degenerate q eigenvalues tie-broken by p")
    return out


# ---------------------------------------------------------------------------
# Ward identity


@dataclass
class WardReport:
    """Monte Carlo estimates of the five Ward-identity contributions.

    Each entry of ``terms`` holds complex means over the real coordinate
    derivatives ``d/d xi_k`` of the chosen variable (length ``N**2``);
    ``stderr`` holds matching complex error bars.  ``passed`` is the
    chi-square consistency of ``total`` with zero at the 3-sigma level.
    """

    variable: str
    W: str
    terms: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    chi2: float
    dof: int
    p_value: float
    max_abs_z: float

    @property
    def total(self) -> np.ndarray:
        return self.terms["total"]

    @property
    def passed(self) -> bool:
        return self.p_value >= 2 * stats.norm.sf(3.0)

    def magnitudes(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.terms.items()}

    def to_csv(self) -> str:
        rows = ["term,component,estimate_re,estimate_im,stderr_re,stderr_im"]
        for name, val in self.terms.items():
            se = self.stderr[name]
            for k, (v, e) in enumerate(zip(val, se)):
                rows.append(f"{name},{k},{v.real:.12e},{v.imag:.12e},{e.real:.12e},{e.imag:.12e}")
        return "\n".join(rows) + "\n"


def _as_letter(x) -> Letter:
    if isinstance(x, Letter):
        return x
    label, kind = x
    return Letter(kind, str(label))


def _ctilde_derivative(K: np.ndarray, x: Letter, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``delta Tr(C~ K) / delta x`` with ``K`` held fixed (bosonic ``x``)."""
    if x.kind == "q":
        return p @ K - K @ p
    return K @ q - q @ K


def _coord_derivs(D: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """``d/d xi_k = Tr(D E_k)`` for each orthonormal Hermitian direction."""
    return np.einsum("kji,...ij->...k", basis, D)


def ward_terms(
    W: TracePolynomial | MatrixPolynomial,
    x,
    H: TracePolynomial,
    params: EnsembleParams,
    samples: SampleSet,
    registry: Mapping | None = None,
) -> WardReport:
    """Decompose ``<dA/dx> - <A dS/dx> = 0`` for ``A = Tr(C~ {i_eff, W})``.

    For a matrix polynomial ``W`` this is ``A = Tr(C~ {i_eff, W})``; for a
    trace polynomial ``w`` the product ``Tr({C~, i_eff}) * w`` is used.
    Terms: ``t1`` from ``lambda_hat Tr(i_eff C~)``, ``t2`` from ``tau H``,
    ``t3`` from ``eta N`` (zero for bosonic rosters), ``t4`` varying ``C~``
    in ``A``, ``t5`` varying ``W``.
    """
    x = _as_letter(x)
    if params.dim % 2:
        raise EnsembleError("the Ward decomposition uses i_eff and needs even N")
    spec = {v.label: v for v in samples.roster}
    if x.kind == "c" or x.label not in spec:
        raise EnsembleError(f"{x} is not a variable of the roster")
    N = samples.dim
    ie = i_eff(N)
    basis = hermitian_basis(N)
    vals = samples.values()
    reg = dict(registry or {})
    q_x, p_x = vals[x.label]
    Ct = samples.ctilde()
    shape = Ct.shape[:2]

    if isinstance(W, MatrixPolynomial):
        Wm = CompiledPolynomial(W).matrix(vals, N, None, reg)
        Wm = np.broadcast_to(Wm, shape + (N, N))
        K = ie @ Wm + Wm @ ie
        A = np.trace(Ct @ K, axis1=-2, axis2=-1)
        d4 = _ctilde_derivative(K, x, q_x, p_x)
        Mkey = "__ward_M"
        reg[Mkey] = Ct @ ie + ie @ Ct
        trW = (MatrixPolynomial._new([TraceWord(1.0, (C(Mkey),))]) @ W).trace()
        d5 = CompiledPolynomial(trace_derivative(trW, x)).matrix(vals, N, None, reg)
        d5 = np.broadcast_to(d5, shape + (N, N))
    else:
        w = np.broadcast_to(CompiledPolynomial(W).trace(vals, N, None, reg), shape)
        a = 2 * np.einsum("ii,...ii->...", ie, Ct)
        A = a * w
        d4 = 2 * w[..., None, None] * _ctilde_derivative(ie, x, q_x, p_x)
        dw = np.broadcast_to(CompiledPolynomial(trace_derivative(W, x)).matrix(vals, N, None, reg), shape + (N, N))
        d5 = a[..., None, None] * dw

    dlam = _ctilde_derivative(ie, x, q_x, p_x)
    dH = np.broadcast_to(CompiledPolynomial(trace_derivative(H, x)).matrix(vals, N, None, reg), shape + (N, N))
    series = {
        "t1": -params.lambda_hat * A[..., None] * _coord_derivs(dlam, basis),
        "t2": -params.tau * A[..., None] * _coord_derivs(dH, basis),
        "t3": np.zeros(shape + (N * N,), dtype=complex),
        "t4": _coord_derivs(d4, basis),
        "t5": _coord_derivs(d5, basis),
    }
    series["total"] = sum(series[k] for k in ("t1", "t2", "t3", "t4", "t5"))
    terms, errs = {}, {}
    for k, v in series.items():
        terms[k], errs[k] = mean_stderr(v)
    tot, se = terms["total"], errs["total"]
    z = []
    for m, e in ((tot.real, se.real), (tot.imag, se.imag)):
        for mi, ei in zip(m, e):
            if ei > 0:
                z.append(mi / ei)
            elif abs(mi) > 1e-12:
                z.append(np.inf)
    z = np.array(z)
    chi2 = float(np.sum(z**2))
    dof = len(z)
    p_value = float(stats.chi2.sf(chi2, dof)) if dof else 1.0
    return WardReport(
        variable=str(x),
        W=str(W),
        terms=terms,
        stderr=errs,
        chi2=chi2,
        dof=dof,
        p_value=p_value,
        max_abs_z=float(np.max(np.abs(z))) if dof else 0.0,
    )


# ---------------------------------------------------------------------------
# emergent hbar and commutator structure


@dataclass(frozen=True)
class HbarEstimate:
    hbar: float
    anisotropy: float
    stderr: float
    components: np.ndarray

    def __iter__(self):
        yield self.hbar
        yield self.anisotropy


def effective_hbar(samples: SampleSet | np.ndarray) -> HbarEstimate:
    """Project ``<C~>`` onto ``i_eff``: ``hbar`` is the mean of
    ``Im(C~_kk) * sign_k`` over the diagonal; ``anisotropy`` is the largest
    deviation of an individual diagonal entry from it.

    Accepts a :class:`SampleSet` (ideally unitary-fixed) or an array of
    ``C~`` matrices with shape ``(n, N, N)`` or ``(steps, chains, N, N)``.
    """
    if isinstance(samples, SampleSet):
        Ct = samples.ctilde()
    else:
        Ct = np.asarray(samples, dtype=complex)
        if Ct.ndim == 3:
            Ct = Ct[:, None]
    N = Ct.shape[-1]
    signs = np.diag(i_eff(N)).imag
    comp = np.einsum("...kk->...k", Ct).imag * signs
    m, se_k = mean_stderr(comp)
    hbar_series = comp.mean(axis=-1)
    hbar, se = mean_stderr(hbar_series)
    return HbarEstimate(float(hbar), float(np.max(np.abs(m - hbar))), float(se), m)


def gaussian_ctilde_mean(params: EnsembleParams) -> np.ndarray:
    """Exact ``<C~>`` for ``H = sum_r Tr(p_r^2 + q_r^2)`` with ``eta = 0``.

    The weight is then a Gaussian in the real coordinates, with precision
    built from ``tau`` and the bilinear form ``Tr(i_eff [q, p])``; the mean of
    ``C~`` follows from the ``q``-``p`` block of the covariance.  The result
    is ``i_eff hbar`` with ``hbar = n_vars (N/2) lambda_hat / (tau^2 - lambda_hat^2)``.
    """
    if params.eta != 0:
        raise EnsembleError("the closed form assumes eta = 0")
    N = params.dim
    B = hermitian_basis(N)
    ie = i_eff(N)
    comm = np.einsum("kab,lbc->klac", B, B) - np.einsum("lab,kbc->klac", B, B)
    A = np.einsum("ab,klba->kl", ie, comm).real
    d = len(B)
    # -log weight = x^T M x per boson, x = (q coords, p coords)
    M = np.block([[params.tau * np.eye(d), params.lambda_hat * A / 2], [params.lambda_hat * A.T / 2, params.tau * np.eye(d)]])
    if np.linalg.eigvalsh(M).min() <= 0:
        raise EnsembleError("weight is not normalizable for these parameters")
    cov = np.linalg.inv(2 * M)[:d, d:]
    return len(params.roster) * np.einsum("kl,klac->ac", cov, comm)


@dataclass(frozen=True)
class CommutatorResidual:
    commutator: np.ndarray
    derivative: np.ndarray
    residual: np.ndarray
    stderr: np.ndarray


def emergent_commutator_residual(
    W: MatrixPolynomial,
    x,
    samples: SampleSet,
    hbar_est: float,
    registry: Mapping | None = None,
) -> CommutatorResidual:
    """``<i_eff [W_eff, x_eff] -+ hbar (d Tr W / d x')_eff>`` with ``x'`` the
    conjugate of ``x``; the sign is ``-`` for a bosonic coordinate ``q`` and
    ``+`` otherwise."""
    x = _as_letter(x)
    N = samples.dim
    ie = i_eff(N)
    vals = samples.values()
    shape = (samples.n_steps, samples.n_chains)
    Wm = np.broadcast_to(CompiledPolynomial(W).matrix(vals, N, None, registry), shape + (N, N))
    q, p = vals[x.label]
    xm = q if x.kind == "q" else p
    We, xe = eff_project(Wm), eff_project(xm)
    comm = ie @ (We @ xe - xe @ We)
    D = CompiledPolynomial(trace_derivative(W.trace(), x.conjugate)).matrix(vals, N, None, registry)
    D = eff_project(np.broadcast_to(D, shape + (N, N)))
    spec = {v.label: v for v in samples.roster}[x.label]
    sign = -1.0 if (x.kind == "q" and spec.parity == BOSONIC) else 1.0
    res = comm + sign * hbar_est * D
    cm, _ = mean_stderr(comm)
    dm, _ = mean_stderr(hbar_est * D)
    rm, rs = mean_stderr(res)
    return CommutatorResidual(cm, dm, rm, rs)


# ---------------------------------------------------------------------------
# exact fermionic averages


@dataclass(frozen=True)
class BerezinResult:
    values: dict[str, complex]
    partition: complex
    n_generators: int


def _fermion_matrices(n_vars: int, dim: int):
    """Grassmann matrices with independent generator entries, ``p = q^dagger``.

    Entry ``(i, j)`` of variable ``r`` is generator ``2 k`` with
    ``k = r N^2 + i N + j``; its conjugate is generator ``2 k + 1``.
    """
    G = 2 * n_vars * dim * dim
    mats = []
    for r in range(n_vars):
        q = np.empty((dim, dim), dtype=object)
        p = np.empty((dim, dim), dtype=object)
        for i in range(dim):
            for j in range(dim):
                k = r * dim * dim + i * dim + j
                q[i, j] = GrassmannElement.generator(2 * k, G, order=CONJ_PRESERVE)
                p[j, i] = GrassmannElement.generator(2 * k + 1, G, order=CONJ_PRESERVE)
        mats.append((q, p))
    return G, mats


def berezin_average(
    observables: Mapping[str, TracePolynomial | str],
    H: TracePolynomial,
    params: EnsembleParams,
    registry: Mapping | None = None,
    max_generators: int = 16,
) -> BerezinResult:
    """Exact ``<A> = int e^{-S} A / int e^{-S}`` over a fermion-only roster.

    Every matrix entry is an independent generator (``2 N^2`` per variable),
    so this is only practical for one or two variables at ``N = 2``.  The
    observable ``"N"`` is the trace fermion number.
    """
    if any(v.parity != FERMIONIC for v in params.roster):
        raise EnsembleError("exact Berezin averages take fermion-only rosters")
    N = params.dim
    G, mats = _fermion_matrices(len(params.roster), N)
    if G > max_generators:
        raise EnsembleError(f"{G} generators exceeds the exact-integration limit {max_generators}")
    one = GrassmannElement.scalar(1.0, G, CONJ_PRESERVE)
    letters = {}
    for v, (q, p) in zip(params.roster, mats):
        letters[Letter("q", v.label)] = q
        letters[Letter("p", v.label)] = p
    for name, M in (registry or {}).items():
        letters[C(name)] = np.asarray(M, dtype=complex).astype(object)

    def tr_poly(P: TracePolynomial):
        return evaluate_generic(P, letters, N) * one

    def tr(M):
        acc = M[0, 0]
        for i in range(1, N):
            acc = acc + M[i, i]
        return acc * one

    Nf = sum((tr(q @ p) * 1j for q, p in mats), 0 * one)
    S = 0 * one
    if params.tau:
        S = S + params.tau * tr_poly(H)
    if params.lambda_hat:
        ie = i_eff(N).astype(object)
        Ct = sum((-(q @ p + p @ q) for q, p in mats), np.zeros((N, N), dtype=object) * one)
        S = S + params.lambda_hat * tr(ie @ Ct)
    if params.eta:
        S = S + params.eta * Nf
    rho = g_exp(-S)
    gens = list(range(G))
    Z = berezin_integrate(rho, gens).body()
    if abs(Z) < 1e-300:
        raise EnsembleError("the Berezin partition function vanishes for this weight")
    out = {}
    for name, A in observables.items():
        val = Nf if (isinstance(A, str) and A == "N") else tr_poly(A)
        out[name] = complex(berezin_integrate(rho * val, gens).body() / Z)
    return BerezinResult(out, complex(Z), G)


# ---------------------------------------------------------------------------
# two-chain comparisons


@dataclass(frozen=True)
class Comparison:
    name: str
    mean_a: complex
    stderr_a: float
    mean_b: complex
    stderr_b: float

    @property
    def z(self) -> float:
        se = np.hypot(self.stderr_a, self.stderr_b)
        d = abs(self.mean_a - self.mean_b)
        return float(d / se) if se > 0 else (0.0 if d < 1e-12 else np.inf)


def compare_averages(
    observables: Mapping[str, TracePolynomial | Callable],
    a: SampleSet,
    b: SampleSet,
    registry: Mapping | None = None,
) -> list[Comparison]:
    """Two-sample comparison of scalar averages between independent sets."""
    out = []
    for name, A in observables.items():
        ma, sa = ensemble_average(A, a, registry)
        mb, sb = ensemble_average(A, b, registry)
        out.append(Comparison(name, ma, abs(sa), mb, abs(sb)))
    return out
