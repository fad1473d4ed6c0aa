"""Case configuration: physical, geometric, numerical and optimization parameters.

The on-disk format is plain ``key = value`` lines. ``#`` starts a comment and
``[section]`` headers are accepted and ignored, so files written by
:func:`dump_config` can be read back unchanged.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "VRFB_"

KAPPA_MODES = ("computed", "constant")


@dataclass(frozen=True)
class CaseConfig:
    # electrode
    eps: float = 0.929
    a: float = 1.62e4  # specific surface area, 1/m
    d_f: float = 1.76e-5
    sigma_s: float = 1.0e3
    K_ck: float = 4.28
    L: float = 0.1
    W: float = 0.1
    t_e: float = 3.0e-3
    # electrolyte
    mu: float = 4.928e-3
    c2_in: float = 750.0
    c3_in: float = 750.0
    D2: float = 2.4e-4
    D3: float = 2.4e-4
    kappa_e: float = 7.8
    kappa_mode: str = "computed"
    # kinetics
    k: float = 1.7e-7
    alpha_c: float = 0.5
    alpha_a: float = 0.5
    U0: float = -0.255
    # operating point
    T: float = 298.0
    p_in: float = 1.0e3
    p_out: float = 0.0
    I: float = 4.0
    # constants
    F: float = 96485.33212
    R: float = 8.314462618
    z2: int = 2
    z3: int = 3
    # geometry / grid
    nx: int = 48
    ny: int = 48
    nz_channel: int = 2
    nz_electrode: int = 6
    t_c: float = 3.0e-3
    inlet_face: str = "x0"
    outlet_face: str = "x1"
    inlet_center: float = 0.5  # fraction of the face's in-plane extent
    outlet_center: float = 0.5
    inlet_width: float = 3.0e-3
    outlet_width: float = 3.0e-3
    # flow / electrochemistry numerics
    u_floor: float = 1.0e-9
    eta_clamp: float = 50.0
    electro_tol: float = 1.0e-10
    electro_max_iter: int = 50
    flowrate_tol: float = 1.0e-3
    # optimization
    q: float = 0.01
    alpha_fic_factor: float = 5.0
    filter_radius_cells: float = 2.0
    move_limit: float = 0.1
    rho_init: float = 0.5
    max_iter: int = 100
    conv_tol: float = 1.0e-4
    conv_window: int = 5
    volume_fraction: float = 0.0  # 0 disables the optional volume constraint
    seed: int = 0

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "CaseConfig":
        return dataclasses.replace(self, **changes)

    @property
    def thermal_voltage(self) -> float:
        """RT/F in volts."""
        return self.R * self.T / self.F

    @property
    def f(self) -> float:
        return self.F / (self.R * self.T)

    @property
    def t_total(self) -> float:
        return self.t_c + self.t_e

    @property
    def electrode_area(self) -> float:
        return self.L * self.W

    def hash(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


_SECTIONS = {
    "electrode": ("eps", "a", "d_f", "sigma_s", "K_ck", "L", "W", "t_e"),
    "electrolyte": ("mu", "c2_in", "c3_in", "D2", "D3", "kappa_e", "kappa_mode"),
    "kinetics": ("k", "alpha_c", "alpha_a", "U0"),
    "operating": ("T", "p_in", "p_out", "I"),
    "constants": ("F", "R", "z2", "z3"),
    "geometry": ("nx", "ny", "nz_channel", "nz_electrode", "t_c", "inlet_face",
                 "outlet_face", "inlet_center", "outlet_center", "inlet_width",
                 "outlet_width"),
    "numerics": ("u_floor", "eta_clamp", "electro_tol", "electro_max_iter", "flowrate_tol"),
    "optimization": ("q", "alpha_fic_factor", "filter_radius_cells", "move_limit",
                     "rho_init", "max_iter", "conv_tol", "conv_window",
                     "volume_fraction", "seed"),
}

_FACES = ("x0", "x1", "y0", "y1")


class ConfigError(ValueError):
    pass


def validate(cfg: CaseConfig) -> None:
    if not 0.0 < cfg.eps < 1.0:
        raise ConfigError(f"eps must lie in (0, 1), got {cfg.eps}")
    positive = ("a", "d_f", "sigma_s", "K_ck", "L", "W", "t_e", "mu", "c2_in", "c3_in",
                "D2", "D3", "kappa_e", "k", "alpha_c", "alpha_a", "T", "F", "R", "t_c",
                "inlet_width", "outlet_width", "u_floor", "eta_clamp", "electro_tol",
                "q", "alpha_fic_factor", "move_limit", "conv_tol", "flowrate_tol")
    for name in positive:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    if cfg.I < 0:
        raise ConfigError(f"applied current I must be nonnegative, got {cfg.I}")
    for name in ("nx", "ny", "nz_channel", "nz_electrode", "electro_max_iter",
                 "max_iter", "conv_window", "z2", "z3"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    if cfg.move_limit > 1.0:
        raise ConfigError("move_limit must be <= 1")
    if not 0.0 <= cfg.rho_init <= 1.0:
        raise ConfigError("rho_init must lie in [0, 1]")
    if not 0.0 <= cfg.volume_fraction <= 1.0:
        raise ConfigError("volume_fraction must lie in [0, 1]")
    if cfg.filter_radius_cells < 0:
        raise ConfigError("filter_radius_cells must be >= 0")
    if cfg.kappa_mode not in KAPPA_MODES:
        raise ConfigError(f"unknown kappa_mode {cfg.kappa_mode!r}; expected one of {KAPPA_MODES}")
    for name in ("inlet_face", "outlet_face"):
        if getattr(cfg, name) not in _FACES:
            raise ConfigError(f"{name} must be one of {_FACES}")


def _convert(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip("\"'")
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from exc


def _field_types() -> dict:
    hints = {"float": float, "int": int, "str": str}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(CaseConfig)}


def parse_config_text(text: str, env: dict | None = None) -> CaseConfig:
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, types[key])
    for var, raw in (env or {}).items():
        if not var.startswith(ENV_PREFIX):
            continue
        key = var[len(ENV_PREFIX):]
        matches = [k for k in types if k.upper() == key.upper()]
        if not matches:
            raise ConfigError(f"environment override {var} names unknown key")
        values[matches[0]] = _convert(matches[0], raw, types[matches[0]])
    return CaseConfig(**values)


def parse_config(path, use_env: bool = True) -> CaseConfig:
    """Read a key/value case file; omitted keys fall back to the defaults.

    Environment variables ``VRFB_<KEY>`` override file values when ``use_env``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), dict(os.environ) if use_env else None)


def dump_config(cfg: CaseConfig) -> str:
    lines = []
    for section, names in _SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {getattr(cfg, name)!r}".replace("'", ""))
        lines.append("")
    return "\n".join(lines)


def _check_sections_cover_fields():
    listed = [n for names in _SECTIONS.values() for n in names]
    assert sorted(listed) == sorted(f.name for f in fields(CaseConfig)), "config sections out of sync"


_check_sections_cover_fields()
