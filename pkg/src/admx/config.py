"""Scenario description: unit and grid parameters, dispatch commands.

All physical quantities are SI.  Dispatch commands are per-unit of each unit's
own rating.  dq quantities use the amplitude-invariant Park transform, so the
nominal voltage ``u_nom`` is the phase peak value and three-phase power is
``1.5 * (ud * id + uq * iq)``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    """Raised when a scenario description is malformed or violates an invariant."""


@dataclass(frozen=True)
class VscParams:
    id: str
    s_rated: float
    u_dc: float
    l_f: float
    c_f: float
    j_inertia: float
    d_p: float
    d_q: float
    k_q: float
    k_pv: float
    k_iv: float
    k_pi: float
    r_v: float
    l_v: float
    l_f2: float = 0.0
    filter: str = "LC"
    r_f: float = 0.0
    r_f2: float = 0.0

    @property
    def is_lcl(self) -> bool:
        return self.filter == "LCL"

    def validate(self):
        positive = ("s_rated", "u_dc", "l_f", "c_f", "j_inertia", "d_p", "d_q", "k_q")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{self.id}: {name} must be positive")
        for name in ("k_pv", "k_iv", "k_pi", "r_v", "l_v", "l_f2", "r_f", "r_f2"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"{self.id}: {name} must be non-negative")
        if self.filter not in ("LC", "LCL"):
            raise ConfigError(f"{self.id}: filter must be 'LC' or 'LCL'")
        if self.is_lcl != (self.l_f2 > 0):
            raise ConfigError(f"{self.id}: l_f2 must be positive exactly for LCL units")


@dataclass(frozen=True)
class GridParams:
    l_g: float
    r_g: float
    u_nom: float = 311.0
    omega_n: float = 2 * math.pi * 50
    u_g: float | None = None

    def __post_init__(self):
        if self.u_g is None:
            object.__setattr__(self, "u_g", self.u_nom)

    @property
    def x_g(self) -> float:
        return self.omega_n * self.l_g

    def validate(self):
        if not self.l_g > 0:
            raise ConfigError("grid: l_g must be positive")
        if not self.r_g >= 0:
            raise ConfigError("grid: r_g must be non-negative")
        if not self.u_nom > 0:
            raise ConfigError("grid: u_nom must be positive")
        if not self.omega_n > 0:
            raise ConfigError("grid: omega_n must be positive")
        if not self.u_g > 0:
            raise ConfigError("grid: u_g must be positive")


@dataclass(frozen=True)
class DispatchCommand:
    p_ref: float
    q_ref: float

    def validate(self, where=""):
        for name in ("p_ref", "q_ref"):
            v = getattr(self, name)
            if not -1.0 - 1e-12 <= v <= 1.0 + 1e-12:
                raise ConfigError(f"{where}{name} must lie in [-1, 1] p.u., got {v}")

    def physical(self, vsc: VscParams) -> tuple[float, float]:
        """Setpoints in W and var."""
        return self.p_ref * vsc.s_rated, self.q_ref * vsc.s_rated


@dataclass(frozen=True)
class BaseQuantities:
    power: float
    voltage: float
    current: float
    impedance: float
    admittance: float


@dataclass(frozen=True)
class MicrogridConfig:
    vscs: tuple[VscParams, ...]
    grid: GridParams
    nominal_commands: dict[str, DispatchCommand]
    measurement_unit: str
    extra: dict = field(default_factory=dict, compare=False)

    def validate(self):
        if len(self.vscs) < 2:
            raise ConfigError("at least 2 units are required")
        seen = set()
        for v in self.vscs:
            if v.id in seen:
                raise ConfigError(f"duplicate unit id {v.id!r}")
            seen.add(v.id)
            v.validate()
        self.grid.validate()
        if self.measurement_unit not in seen:
            raise ConfigError(f"unknown measurement_unit {self.measurement_unit!r}")
        for uid in seen:
            if uid not in self.nominal_commands:
                raise ConfigError(f"nominal_commands missing unit {uid!r}")
        for uid, cmd in self.nominal_commands.items():
            if uid not in seen:
                raise ConfigError(f"nominal_commands names unknown unit {uid!r}")
            cmd.validate(f"{uid}: ")
        if not any(not v.is_lcl for v in self.vscs):
            raise ConfigError("at least one LC unit is required to define the PCC node")

    @property
    def ids(self) -> list[str]:
        return [v.id for v in self.vscs]

    def unit(self, uid: str) -> VscParams:
        for v in self.vscs:
            if v.id == uid:
                return v
        raise KeyError(uid)

    def index(self, uid: str) -> int:
        return self.ids.index(uid)

    def commands(self, overrides: dict[str, DispatchCommand] | None = None):
        """Per-unit command list in unit order, nominal unless overridden."""
        merged = dict(self.nominal_commands)
        merged.update(overrides or {})
        return [merged[v.id] for v in self.vscs]

    def replace_unit(self, vsc: VscParams) -> "MicrogridConfig":
        vscs = tuple(vsc if v.id == vsc.id else v for v in self.vscs)
        return dataclasses.replace(self, vscs=vscs)


def per_unit_base(vsc: VscParams, grid: GridParams) -> BaseQuantities:
    """Power base = rating, voltage base = phase peak, amplitude-invariant current."""
    s = vsc.s_rated
    u = grid.u_nom
    i = s / (1.5 * u)
    z = u / i
    return BaseQuantities(power=s, voltage=u, current=i, impedance=z, admittance=1.0 / z)


_VSC_FIELDS = {f.name for f in dataclasses.fields(VscParams)}
_GRID_FIELDS = {f.name for f in dataclasses.fields(GridParams)}


def config_from_dict(data: dict) -> MicrogridConfig:
    try:
        grid_raw = data["grid"]
        vscs_raw = data["vscs"]
        cmds_raw = data["nominal_commands"]
        mu = data["measurement_unit"]
    except KeyError as exc:
        raise ConfigError(f"missing top-level key {exc.args[0]!r}") from None
    unknown = set(grid_raw) - _GRID_FIELDS
    if unknown:
        raise ConfigError(f"grid: unknown keys {sorted(unknown)}")
    grid = GridParams(**grid_raw)
    vscs = []
    for raw in vscs_raw:
        unknown = set(raw) - _VSC_FIELDS
        if unknown:
            raise ConfigError(f"{raw.get('id', '?')}: unknown keys {sorted(unknown)}")
        try:
            vscs.append(VscParams(**raw))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    cmds = {uid: DispatchCommand(float(c["p_ref"]), float(c["q_ref"]))
            for uid, c in cmds_raw.items()}
    extra = {k: v for k, v in data.items()
             if k not in ("grid", "vscs", "nominal_commands", "measurement_unit")}
    cfg = MicrogridConfig(tuple(vscs), grid, cmds, mu, extra)
    cfg.validate()
    return cfg


def config_to_dict(cfg: MicrogridConfig) -> dict:
    out = {
        "grid": dataclasses.asdict(cfg.grid),
        "vscs": [dataclasses.asdict(v) for v in cfg.vscs],
        "nominal_commands": {k: dataclasses.asdict(c) for k, c in cfg.nominal_commands.items()},
        "measurement_unit": cfg.measurement_unit,
    }
    out.update(cfg.extra)
    return out


def load_config(path) -> MicrogridConfig:
    """Read and validate a JSON scenario file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def dump_config(cfg: MicrogridConfig, path=None) -> str:
    text = json.dumps(config_to_dict(cfg), indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("admx") / "data" / name))


def five_vsc() -> MicrogridConfig:
    """The bundled five-unit microgrid."""
    return load_config(bundled_path("five_vsc.json"))
