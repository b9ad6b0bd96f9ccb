"""Strict TOML experiment configuration.

Layout::

    experiment = "conservation"     # required, see EXPERIMENTS
    seed = 1                        # optional, default 0
    output = "runs/conservation"    # optional; --out overrides

    [system]                        # matrix model
    dim = 2
    bosons = ["1", "2"]
    fermions = []
    hamiltonian = "tr(p1 p1) + tr(q1 q1)"   # trace-polynomial grammar
    fermion_pairs = 1                # Grassmann generator pairs for fermions
    [system.constants]               # constant matrices used in polynomials
    j = [[0.5, "0.1+0.2j"], ["0.1-0.2j", -0.5]]

    [params]                         # numeric knobs (see PARAM_KEYS)
    dt = 1e-3
    t_final = 10.0

    [collapse]                       # collapse experiments
    energies = [0.0, 1.0]
    amplitudes = [0.5477225575051661, 0.8366600265340756]

    [ward]
    choices = [["mat(q1)", "q1"], ["tr(q1 j)", "p1"]]

Unknown keys anywhere are rejected with the line where they occur.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from .collapse import config_hash
from .trace_calculus import MatrixPolynomial, PolynomialSyntaxError, TracePolynomial

EXPERIMENTS = (
    "conservation",
    "liouville",
    "ensemble_gaussian",
    "ward",
    "hbar",
    "collapse_born",
    "collapse_lindblad",
    "degenerate_contrast",
    "noise_bridge",
    "algebra",
    "derivative",
    "gauge",
    "norm_drift",
)

TOP_KEYS = {"experiment", "seed", "output", "system", "params", "collapse", "ward"}
SYSTEM_KEYS = {"dim", "bosons", "fermions", "hamiltonian", "fermion_pairs", "constants", "state_scale"}
PARAM_KEYS = {
    "dt": float,
    "t_final": float,
    "scheme": str,
    "record_every": int,
    "n_samples": int,
    "burn_in": int,
    "n_chains": int,
    "step_scale": float,
    "n_traj": int,
    "tau": float,
    "eta": float,
    "lambda_hat": float,
    "gamma": float,
    "hbar": float,
    "n_points": int,
    "n_hamiltonians": int,
    "n_cases": int,
    "n_checkpoints": int,
    "tolerance": float,
    "window": int,
}
COLLAPSE_KEYS = {"mode", "energies", "amplitudes", "masses", "dephasing"}
WARD_KEYS = {"choices"}


class ConfigError(ValueError):
    """Configuration rejected; ``line`` is 1-based when known."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line else msg)


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    output: str | None = None
    dim: int = 2
    bosons: list[str] = field(default_factory=lambda: ["1"])
    fermions: list[str] = field(default_factory=list)
    hamiltonian: str | None = None
    fermion_pairs: int = 1
    state_scale: float = 1.0
    constants: dict[str, list] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)
    collapse: dict[str, Any] = field(default_factory=dict)
    ward: dict[str, Any] = field(default_factory=dict)

    def param(self, key: str, default=None):
        return self.params.get(key, default)

    def registry(self) -> dict[str, np.ndarray]:
        return {k: _matrix(v) for k, v in self.constants.items()}

    def hamiltonian_poly(self) -> TracePolynomial | None:
        return TracePolynomial.parse(self.hamiltonian) if self.hamiltonian else None

    def resolved(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.resolved()
        d.pop("output", None)
        return config_hash(d)

    def to_json(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True, indent=2)


def _matrix(rows) -> np.ndarray:
    return np.array([[complex(str(x).replace(" ", "")) if isinstance(x, str) else complex(x) for x in r] for r in rows])


def _line_of(text: str, key: str, section: str | None) -> int | None:
    lines = text.splitlines()
    start = 0
    if section:
        hdr = re.compile(r"^\s*\[\s*" + re.escape(section) + r"\s*\]\s*(#.*)?$")
        for i, ln in enumerate(lines):
            if hdr.match(ln):
                start = i + 1
                break
    pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for i in range(start, len(lines)):
        if section is None and lines[i].lstrip().startswith("["):
            break
        if pat.match(lines[i]):
            return i + 1
    sec = re.compile(r"^\s*\[\s*" + re.escape(key) + r"\s*\]")
    for i, ln in enumerate(lines):
        if sec.match(ln):
            return i + 1
    return None


def _check_keys(table: dict, allowed, text: str, section: str | None):
    for k in table:
        if k not in allowed:
            where = f"[{section}]" if section else "top level"
            raise ConfigError(f"unknown key {k!r} in {where}", _line_of(text, k, section))


def _typed(value, typ, key: str, text: str, section: str):
    line = _line_of(text, key, section)
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number", line)
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer", line)
        return int(value)
    if not isinstance(value, typ):
        raise ConfigError(f"{key} must be of type {typ.__name__}", line)
    return value


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment description."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"TOML syntax: {e}", int(m.group(1)) if m else None) from None
    _check_keys(raw, TOP_KEYS, text, None)
    if "experiment" not in raw:
        raise ConfigError("missing required key 'experiment'")
    exp = raw["experiment"]
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; choose from {', '.join(EXPERIMENTS)}", _line_of(text, "experiment", None))
    cfg = ExperimentConfig(experiment=exp)
    if "seed" in raw:
        seed = raw["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", _line_of(text, "seed", None))
        cfg.seed = seed
    if "output" in raw:
        cfg.output = str(raw["output"])

    system = raw.get("system", {})
    if not isinstance(system, dict):
        raise ConfigError("[system] must be a table", _line_of(text, "system", None))
    _check_keys(system, SYSTEM_KEYS, text, "system")
    if "dim" in system:
        cfg.dim = _typed(system["dim"], int, "dim", text, "system")
        if cfg.dim < 1:
            raise ConfigError("dim must be positive", _line_of(text, "dim", "system"))
    for key in ("bosons", "fermions"):
        if key in system:
            v = system[key]
            if not isinstance(v, list):
                raise ConfigError(f"{key} must be a list of labels", _line_of(text, key, "system"))
            setattr(cfg, key, [str(x) for x in v])
    if "fermion_pairs" in system:
        cfg.fermion_pairs = _typed(system["fermion_pairs"], int, "fermion_pairs", text, "system")
    if "state_scale" in system:
        cfg.state_scale = _typed(system["state_scale"], float, "state_scale", text, "system")
    if "constants" in system:
        consts = system["constants"]
        for name, rows in consts.items():
            try:
                M = _matrix(rows)
            except (TypeError, ValueError):
                raise ConfigError(f"constant {name!r} is not a numeric matrix", _line_of(text, name, "system.constants")) from None
            if M.ndim != 2 or M.shape != (cfg.dim, cfg.dim):
                raise ConfigError(f"constant {name!r} must be {cfg.dim}x{cfg.dim}", _line_of(text, name, "system.constants"))
        cfg.constants = {k: [[str(complex(x)) if isinstance(x, str) else x for x in r] for r in v] for k, v in consts.items()}
    if "hamiltonian" in system:
        cfg.hamiltonian = str(system["hamiltonian"])
        try:
            H = TracePolynomial.parse(cfg.hamiltonian)
        except (PolynomialSyntaxError, ValueError) as e:
            raise ConfigError(f"malformed hamiltonian: {e}", _line_of(text, "hamiltonian", "system")) from None
        labels = set(cfg.bosons) | set(cfg.fermions)
        for x in H.letters():
            if x.kind != "c" and x.label not in labels:
                raise ConfigError(f"hamiltonian uses unknown label {x.label!r}", _line_of(text, "hamiltonian", "system"))
            if x.kind == "c" and x.label != "1" and x.label not in cfg.constants:
                raise ConfigError(f"hamiltonian uses undefined constant {x.label!r}", _line_of(text, "hamiltonian", "system"))

    params = raw.get("params", {})
    _check_keys(params, PARAM_KEYS, text, "params")
    cfg.params = {k: _typed(v, PARAM_KEYS[k], k, text, "params") for k, v in params.items()}
    for k in ("dt", "t_final", "tau", "gamma", "hbar"):
        if k in cfg.params and cfg.params[k] < 0:
            raise ConfigError(f"{k} must be non-negative", _line_of(text, k, "params"))
    if cfg.params.get("lambda_hat", 0.0) != 0 and cfg.dim % 2:
        raise ConfigError(f"N must be even when lambda_hat != 0 (dim = {cfg.dim})", _line_of(text, "lambda_hat", "params"))

    coll = raw.get("collapse", {})
    _check_keys(coll, COLLAPSE_KEYS, text, "collapse")
    for key in ("energies", "amplitudes", "masses"):
        if key in coll:
            try:
                [complex(str(x)) for x in coll[key]]
            except (TypeError, ValueError):
                raise ConfigError(f"{key} must be a list of numbers", _line_of(text, key, "collapse")) from None
    if "mode" in coll and coll["mode"] not in ("energy_driven", "csl"):
        raise ConfigError(f"unknown collapse mode {coll['mode']!r}", _line_of(text, "mode", "collapse"))
    cfg.collapse = dict(coll)

    ward = raw.get("ward", {})
    _check_keys(ward, WARD_KEYS, text, "ward")
    for item in ward.get("choices", []):
        if not (isinstance(item, list) and len(item) == 2):
            raise ConfigError("ward choices are [W, variable] pairs", _line_of(text, "choices", "ward"))
        W, var = item
        try:
            MatrixPolynomial.parse(W) if W.strip().startswith(("mat", "-mat")) or "mat(" in W else TracePolynomial.parse(W)
        except (PolynomialSyntaxError, ValueError) as e:
            raise ConfigError(f"malformed W {W!r}: {e}", _line_of(text, "choices", "ward")) from None
        if not re.match(r"^[qp][0-9_]\w*$", var):
            raise ConfigError(f"bad ward variable {var!r}", _line_of(text, "choices", "ward"))
    cfg.ward = dict(ward)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
