"""Scenario definitions: dynamics profiles, domain contexts, geometry, flows and
the experiment configuration file.

Every tunable constant of an experiment lives in :class:`ExperimentConfig`.
Configuration files are INI-style text with one section per subsystem; the
schema is documented in ``docs/config.md`` and ``dumps_config`` always writes
every field, so a dumped file is a complete record of a run.
"""
from __future__ import annotations

import configparser
import dataclasses
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

APPROACHES = ("N", "E", "S", "W")
MOVEMENTS = ("left", "through", "right")
NUM_LANES = len(APPROACHES) * len(MOVEMENTS)
NUM_PHASES = 4


class ConfigError(ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class Weather(str, enum.Enum):
    SUNNY = "sunny"
    RAINY = "rainy"
    SNOWY = "snowy"


class RoadType(str, enum.Enum):
    NORMAL = "normal"
    LIGHT_INDUSTRY = "light_industry"
    HEAVY_INDUSTRY = "heavy_industry"


@dataclass(frozen=True)
class DynamicsProfile:
    """Vehicle kinematics of one world: accelerations in m/s^2, delay in s."""

    accel: float
    decel: float
    e_decel: float
    startup_delay: float

    def __post_init__(self):
        for name in ("accel", "decel", "e_decel", "startup_delay"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(name, f"must be a finite value >= 0, got {value!r}")
        if self.accel <= 0:
            raise ConfigError("accel", "must be > 0")
        if self.e_decel < self.decel:
            raise ConfigError("e_decel", f"must be >= decel ({self.e_decel} < {self.decel})")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.accel, self.decel, self.e_decel, self.startup_delay)


# Real-world configuration rows (accel, decel, eDecel, sDelay).
_PROFILE_TABLE = {
    "V0": (2.60, 4.50, 9.00, 0.00),
    "V1": (1.00, 2.50, 6.00, 0.50),
    "V2": (1.00, 2.50, 6.00, 0.75),
    "V3": (0.75, 3.50, 6.00, 0.25),
    "V4": (0.50, 1.50, 2.00, 0.50),
}
SETTINGS = tuple(_PROFILE_TABLE)


def builtin_profile(name: str) -> DynamicsProfile:
    """Return the built-in dynamics profile ``V0`` .. ``V4``."""
    try:
        return DynamicsProfile(*_PROFILE_TABLE[name])
    except KeyError:
        raise ConfigError("profile", f"unknown profile {name!r}; expected one of {', '.join(SETTINGS)}") from None


@dataclass(frozen=True)
class DomainContext:
    weather: Weather = Weather.SUNNY
    road_type: RoadType = RoadType.NORMAL

    def __post_init__(self):
        try:
            object.__setattr__(self, "weather", Weather(self.weather))
        except ValueError:
            raise ConfigError("weather", f"unknown weather {self.weather!r}") from None
        try:
            object.__setattr__(self, "road_type", RoadType(self.road_type))
        except ValueError:
            raise ConfigError("road_type", f"unknown road type {self.road_type!r}") from None

    def tokens(self) -> tuple[str, str]:
        return (self.weather.value, self.road_type.value)


_DEFAULT_CONTEXTS = {
    "V0": (Weather.SUNNY, RoadType.NORMAL),
    "V1": (Weather.SUNNY, RoadType.LIGHT_INDUSTRY),
    "V2": (Weather.SUNNY, RoadType.HEAVY_INDUSTRY),
    "V3": (Weather.RAINY, RoadType.NORMAL),
    "V4": (Weather.SNOWY, RoadType.NORMAL),
}


def default_context_for(name: str) -> DomainContext:
    if name not in _DEFAULT_CONTEXTS:
        raise ConfigError("profile", f"unknown profile {name!r}")
    return DomainContext(*_DEFAULT_CONTEXTS[name])


@dataclass(frozen=True)
class RoadNetwork:
    """Single four-approach intersection; each approach has left/through/right lanes."""

    lanes_per_approach: int = 3
    lane_length: float = 300.0
    speed_limit: float = 13.89
    vehicle_length: float = 5.0
    min_gap: float = 2.5

    def __post_init__(self):
        if self.lanes_per_approach != len(MOVEMENTS):
            raise ConfigError("lanes_per_approach", "only 3 lanes (left, through, right) are supported")
        if not self.speed_limit > 0:
            raise ConfigError("speed_limit", "must be > 0")
        if self.vehicle_length <= 0 or self.min_gap < 0:
            raise ConfigError("vehicle_length", "vehicle_length must be > 0 and min_gap >= 0")
        if not self.lane_length > 10 * (self.vehicle_length + self.min_gap):
            raise ConfigError("lane_length", "must exceed 10 * (vehicle_length + min_gap)")

    @property
    def num_lanes(self) -> int:
        return len(APPROACHES) * self.lanes_per_approach


def lane_index(approach: str | int, movement: str | int) -> int:
    """Fixed lane ordering: N, E, S, W x left, through, right."""
    a = APPROACHES.index(approach) if isinstance(approach, str) else int(approach)
    m = MOVEMENTS.index(movement) if isinstance(movement, str) else int(movement)
    if not (0 <= a < 4 and 0 <= m < 3):
        raise ValueError(f"invalid lane ({approach!r}, {movement!r})")
    return 3 * a + m


@dataclass(frozen=True)
class Arrival:
    time: float
    approach: int
    lane: int  # lane index within the approach (0=left, 1=through, 2=right)


@dataclass(frozen=True)
class FlowSpec:
    """Arrival process: Poisson per approach (``rates`` in veh/s) or an explicit schedule.

    With a schedule the rates are ignored.
    """

    rates: tuple[float, float, float, float] = (0.15, 0.15, 0.15, 0.15)
    schedule: tuple[Arrival, ...] | None = None
    horizon: float = 3600.0

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if len(self.rates) != 4:
            raise ConfigError("rates", "need one rate per approach (4)")
        if any(not math.isfinite(r) or r < 0 for r in self.rates):
            raise ConfigError("rates", "rates must be finite and >= 0")
        if not self.horizon > 0:
            raise ConfigError("horizon", "must be > 0")
        if self.schedule is not None:
            sched = tuple(sorted(self.schedule, key=lambda a: (a.time, a.approach, a.lane)))
            for arr in sched:
                if not 0 <= arr.time < self.horizon:
                    raise ConfigError("schedule", f"arrival time {arr.time} outside [0, {self.horizon})")
                if not (0 <= arr.approach < 4 and 0 <= arr.lane < 3):
                    raise ConfigError("schedule", f"invalid lane in arrival {arr}")
            object.__setattr__(self, "schedule", sched)

    def with_horizon(self, horizon: float) -> "FlowSpec":
        if self.schedule is not None:
            kept = tuple(a for a in self.schedule if a.time < horizon)
            return FlowSpec(self.rates, kept, horizon)
        return FlowSpec(self.rates, None, horizon)

    def sample(self, rng: np.random.Generator) -> list[Arrival]:
        """Materialize arrivals, sorted by time. Lanes are chosen uniformly per arrival."""
        if self.schedule is not None:
            return list(self.schedule)
        out = []
        for approach, rate in enumerate(self.rates):
            if rate <= 0:
                continue
            t = rng.exponential(1.0 / rate)
            while t < self.horizon:
                out.append(Arrival(float(t), approach, int(rng.integers(3))))
                t += rng.exponential(1.0 / rate)
        out.sort(key=lambda a: (a.time, a.approach, a.lane))
        return out


def read_schedule(path: str | Path, horizon: float) -> FlowSpec:
    """Read ``time_s,approach,lane_index`` lines (no header)."""
    arrivals = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ConfigError("schedule", f"line {lineno}: expected time_s,approach,lane_index")
        approach = APPROACHES.index(parts[1]) if parts[1] in APPROACHES else int(parts[1])
        arrivals.append(Arrival(float(parts[0]), approach, int(parts[2])))
    return FlowSpec(schedule=tuple(arrivals), horizon=horizon)


def write_schedule(arrivals: Iterable[Arrival], path: str | Path) -> None:
    lines = [f"{a.time!r},{APPROACHES[a.approach]},{a.lane}" for a in arrivals]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass(frozen=True)
class TrainerParams:
    steps: int = 3600
    test_steps: int = 3600
    episodes: int = 300
    action_interval: int = 10
    yellow_length: int = 5
    learning_start: int = 5000
    buffer_size: int = 5000
    update_model_rate: int = 1
    update_target_rate: int = 5
    fixed_cycle: int = 30


@dataclass(frozen=True)
class DqnParams:
    learning_rate: float = 0.001
    batch_size: int = 64
    gamma: float = 0.98
    epsilon: float = 0.1
    epsilon_decay: float = 0.99
    epsilon_min: float = 0.01
    grad_clip: float = 0.5
    hidden: tuple[int, ...] = (64, 64)


@dataclass(frozen=True)
class GatParams:
    pretrain_episodes: int = 100
    policy_episodes: int = 1
    real_rollouts: int = 1
    eval_episodes: int = 1
    forward_epochs: int = 20
    inverse_epochs: int = 20
    forward_lr: float = 1e-4
    inverse_lr: float = 1e-5
    batch_size: int = 64
    grad_clip: float = 0.5
    fusion_width: int = 8
    forward_hidden: tuple[int, ...] = (128, 64)
    inverse_hidden: tuple[int, ...] = (64, 64)


@dataclass(frozen=True)
class OracleParams:
    backend: str = "rule"
    table: str = ""
    replay: str = ""
    endpoint: str = ""
    model: str = "gpt-4"
    timeout: float = 30.0
    cache: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    sim_profile: DynamicsProfile = field(default_factory=lambda: builtin_profile("V0"))
    real_profile: DynamicsProfile = field(default_factory=lambda: builtin_profile("V4"))
    real_context: DomainContext = field(default_factory=lambda: default_context_for("V4"))
    setting: str | None = "V4"
    network: RoadNetwork = field(default_factory=RoadNetwork)
    flow: FlowSpec = field(default_factory=FlowSpec)
    trainer: TrainerParams = field(default_factory=TrainerParams)
    dqn: DqnParams = field(default_factory=DqnParams)
    gat: GatParams = field(default_factory=GatParams)
    oracle: OracleParams = field(default_factory=OracleParams)
    seed: int = 0

    def __post_init__(self):
        _validate(self)

    @property
    def sim_context(self) -> DomainContext:
        return DomainContext()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_setting(self, name: str) -> "ExperimentConfig":
        return self.replace(real_profile=builtin_profile(name), real_context=default_context_for(name), setting=name)

    def flow_for(self, steps: int | None = None) -> FlowSpec:
        return self.flow.with_horizon(float(steps if steps is not None else self.trainer.steps))


def _positive(section: str, obj, names: Sequence[str], allow_zero: Sequence[str] = ()):
    for name in names:
        value = getattr(obj, name)
        ok = value >= 0 if name in allow_zero else value > 0
        if not ok or (isinstance(value, float) and not math.isfinite(value)):
            raise ConfigError(f"{section}.{name}", f"must be {'>= 0' if name in allow_zero else '> 0'}, got {value!r}")


def _validate(cfg: ExperimentConfig) -> None:
    tr = cfg.trainer
    _positive("trainer", tr, [f.name for f in dataclasses.fields(tr)], allow_zero=("learning_start", "yellow_length"))
    if tr.steps % tr.action_interval:
        raise ConfigError("trainer.steps", f"T not divisible by action_interval ({tr.steps} % {tr.action_interval} != 0)")
    if tr.test_steps % tr.action_interval:
        raise ConfigError("trainer.test_steps", f"T not divisible by action_interval ({tr.test_steps} % {tr.action_interval} != 0)")
    if not tr.yellow_length < tr.action_interval:
        raise ConfigError("trainer.yellow_length", "must be < action_interval")
    if tr.fixed_cycle < tr.action_interval:
        raise ConfigError("trainer.fixed_cycle", "must be >= action_interval")
    d = cfg.dqn
    _positive("dqn", d, ["learning_rate", "batch_size", "grad_clip", "epsilon_decay"])
    if not 0 <= d.gamma <= 1:
        raise ConfigError("dqn.gamma", "must be in [0, 1]")
    if not 0 <= d.epsilon_min <= d.epsilon <= 1:
        raise ConfigError("dqn.epsilon", "need 0 <= epsilon_min <= epsilon <= 1")
    if d.epsilon_decay > 1:
        raise ConfigError("dqn.epsilon_decay", "must be <= 1")
    if not d.hidden or min(d.hidden) < 1:
        raise ConfigError("dqn.hidden", "widths must be >= 1")
    g = cfg.gat
    _positive("gat", g, ["forward_epochs", "inverse_epochs", "forward_lr", "inverse_lr", "batch_size",
                         "grad_clip", "fusion_width", "real_rollouts", "eval_episodes"],
              allow_zero=())
    _positive("gat", g, ["pretrain_episodes", "policy_episodes"], allow_zero=("pretrain_episodes", "policy_episodes"))
    for name in ("forward_hidden", "inverse_hidden"):
        widths = getattr(g, name)
        if not widths or min(widths) < 1:
            raise ConfigError(f"gat.{name}", "widths must be >= 1")
    if cfg.oracle.backend not in ("rule", "replay", "remote"):
        raise ConfigError("oracle.backend", f"unknown backend {cfg.oracle.backend!r}")
    if cfg.oracle.timeout <= 0:
        raise ConfigError("oracle.timeout", "must be > 0")
    if cfg.setting is not None and cfg.setting not in SETTINGS:
        raise ConfigError("scenario.profile", f"unknown setting {cfg.setting!r}")


# --- config file --------------------------------------------------------------

_SECTIONS = {
    "trainer": ("trainer", TrainerParams),
    "dqn": ("dqn", DqnParams),
    "gat": ("gat", GatParams),
    "oracle": ("oracle", OracleParams),
    "network": ("network", RoadNetwork),
}


def _coerce(key: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None


def _parse_profile(key: str, raw: str) -> tuple[DynamicsProfile, str | None]:
    raw = raw.strip()
    if raw in _PROFILE_TABLE:
        return builtin_profile(raw), raw
    try:
        parts = [float(p) for p in raw.split(",")]
    except ValueError:
        raise ConfigError(key, f"expected a profile name or accel,decel,e_decel,startup_delay; got {raw!r}") from None
    if len(parts) != 4:
        raise ConfigError(key, "expected 4 comma-separated values")
    try:
        return DynamicsProfile(*parts), None
    except ConfigError as err:
        raise ConfigError(key, str(err)) from None


def loads_config(text: str, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Parse configuration text; absent keys take their defaults."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError("file", f"parse failure: {err}") from None
    known = set(_SECTIONS) | {"scenario", "flow", "run"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(section, "unknown section")

    parts: dict = {}
    for section, (attr, cls) in _SECTIONS.items():
        defaults = cls() if cls is not RoadNetwork else RoadNetwork()
        values = {}
        if parser.has_section(section):
            names = {f.name for f in dataclasses.fields(cls)}
            for key, raw in parser.items(section):
                if key not in names:
                    raise ConfigError(f"{section}.{key}", "unknown key")
                values[key] = _coerce(f"{section}.{key}", raw, getattr(defaults, key))
        try:
            parts[attr] = cls(**values)
        except ConfigError as err:
            raise ConfigError(f"{section}.{err.field}", str(err).split(": ", 1)[-1]) from None

    sc = dict(parser.items("scenario")) if parser.has_section("scenario") else {}
    unknown = set(sc) - {"profile", "sim_profile", "weather", "road_type"}
    if unknown:
        raise ConfigError(f"scenario.{sorted(unknown)[0]}", "unknown key")
    real_profile, setting = _parse_profile("scenario.profile", sc.get("profile", "V4"))
    sim_profile, _ = _parse_profile("scenario.sim_profile", sc.get("sim_profile", "V0"))
    context = default_context_for(setting) if setting else DomainContext()
    try:
        context = DomainContext(sc["weather"].strip() if "weather" in sc else context.weather,
                                sc["road_type"].strip() if "road_type" in sc else context.road_type)
    except ConfigError as err:
        raise ConfigError(f"scenario.{err.field}", str(err).split(": ", 1)[-1]) from None

    steps = parts["trainer"].steps
    fl = dict(parser.items("flow")) if parser.has_section("flow") else {}
    unknown = set(fl) - {"rate", "rates", "schedule"}
    if unknown:
        raise ConfigError(f"flow.{sorted(unknown)[0]}", "unknown key")
    if "schedule" in fl and fl["schedule"].strip():
        path = Path(fl["schedule"].strip())
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            flow = read_schedule(path, horizon=float(steps))
        except OSError as err:
            raise ConfigError("flow.schedule", str(err)) from None
    else:
        if "rates" in fl:
            try:
                rates = tuple(float(r) for r in fl["rates"].split(","))
            except ValueError:
                raise ConfigError("flow.rates", f"cannot parse {fl['rates']!r}") from None
        else:
            rate = _coerce("flow.rate", fl.get("rate", "0.15"), 0.15)
            rates = (rate,) * 4
        try:
            flow = FlowSpec(rates=rates, horizon=float(steps))
        except ConfigError as err:
            raise ConfigError(f"flow.{err.field}", str(err).split(": ", 1)[-1]) from None

    run = dict(parser.items("run")) if parser.has_section("run") else {}
    if set(run) - {"seed"}:
        raise ConfigError(f"run.{sorted(set(run) - {'seed'})[0]}", "unknown key")
    seed = _coerce("run.seed", run.get("seed", "0"), 0)

    oracle = parts["oracle"]
    if base_dir is not None:
        # file paths in [oracle] are relative to the config file
        fixed = {k: str(Path(base_dir) / v) for k in ("table", "replay", "cache")
                 if (v := getattr(oracle, k)) and not Path(v).is_absolute()}
        oracle = dataclasses.replace(oracle, **fixed)

    return ExperimentConfig(sim_profile=sim_profile, real_profile=real_profile, real_context=context,
                            setting=setting, network=parts["network"], flow=flow, trainer=parts["trainer"],
                            dqn=parts["dqn"], gat=parts["gat"], oracle=oracle, seed=seed)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return loads_config(path.read_text(), base_dir=path.parent)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _profile_text(profile: DynamicsProfile, name: str | None) -> str:
    if name is not None and builtin_profile(name) == profile:
        return name
    return _fmt(profile.as_tuple())


def dumps_config(cfg: ExperimentConfig) -> str:
    """Serialize every field. Explicit schedules are not inlined; they serialize as rates."""
    out = ["[scenario]",
           f"profile = {_profile_text(cfg.real_profile, cfg.setting)}",
           f"sim_profile = {_fmt(cfg.sim_profile.as_tuple())}",
           f"weather = {cfg.real_context.weather.value}",
           f"road_type = {cfg.real_context.road_type.value}",
           "",
           "[flow]",
           f"rates = {_fmt(cfg.flow.rates)}",
           ""]
    for section, (attr, cls) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        out.append(f"[{section}]")
        for f in dataclasses.fields(cls):
            out.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        out.append("")
    out += ["[run]", f"seed = {cfg.seed}", ""]
    return "\n".join(out)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))
