"""Duty-cycled energy budget of the trap: cycle energy, battery lifetime,
solar harvesting and a state-of-charge simulator.

Energies are joules, powers watts, times seconds.  Defaults (twelve cycle
profiles, the battery and the harvester curve) live in ``energy_defaults.cfg``
next to this module; :func:`load_energy_config` reads that file or a user copy
with the same schema.
"""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

TASKS = ("boot", "task1", "task2", "task3", "task4", "shutdown")
TASK_LABELS = {
    "boot": "Boot", "task1": "capture", "task2": "preprocess",
    "task3": "inference", "task4": "radio", "shutdown": "Shutdown",
}
DAY = 86400.0
CYCLES_PER_DAY = 2
VOLTS_EMPTY, VOLTS_FULL = 3.0, 4.2

# Published recharge times per illuminance: (20->100% of the battery, one cycle)
RECHARGE_TABLE = {
    2000: (60 * 3600.0, 23 * 60.0),
    10000: (13 * 3600.0, 5 * 60.0),
    25000: (7 * 3600.0, 3 * 60.0),
}


class EnergyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CycleProfile:
    """Per-task energies (J) of one application cycle."""

    name: str
    boot: float
    task1: float
    task2: float
    task3: float
    task4: float
    shutdown: float
    published_total: float | None = None

    def __post_init__(self):
        for k in TASKS:
            v = getattr(self, k)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"profile {self.name!r}: {k} energy must be finite and >= 0, got {v}")

    def tasks(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TASKS}

    @property
    def inference_dominant(self) -> bool:
        """True when inference is the largest of the four in-cycle tasks."""
        return self.task3 == max(self.task1, self.task2, self.task3, self.task4)


@dataclass(frozen=True)
class Battery:
    capacity_mah: float = 1820.0
    nominal_volts: float = 3.7
    state_of_charge: float = 1.0

    def __post_init__(self):
        if self.capacity_mah < 0 or self.nominal_volts <= 0:
            raise ValueError("battery capacity must be >= 0 and voltage > 0")
        object.__setattr__(self, "state_of_charge", float(min(1.0, max(0.0, self.state_of_charge))))

    @property
    def full_energy(self) -> float:
        return self.capacity_mah / 1000.0 * 3600.0 * self.nominal_volts

    @property
    def energy(self) -> float:
        return self.full_energy * self.state_of_charge

    def with_soc(self, soc: float) -> "Battery":
        return Battery(self.capacity_mah, self.nominal_volts, soc)

    def recharge_energy(self, soc_from: float = 0.2, soc_to: float = 1.0) -> float:
        return self.full_energy * (soc_to - soc_from)


@dataclass(frozen=True)
class SolarPanel:
    """Harvested power (W, after the harvester) at characterized illuminances."""

    points: tuple[tuple[float, float], ...]
    width_mm: float = 140.0
    height_mm: float = 100.0

    def __post_init__(self):
        pts = tuple(sorted((float(l), float(p)) for l, p in dict(self.points).items()))
        if not pts:
            raise ValueError("solar panel needs at least one characterized point")
        if any(l < 0 or p < 0 for l, p in pts):
            raise ValueError("illuminance and power must be >= 0")
        powers = [p for _, p in pts]
        if any(b < a for a, b in zip(powers, powers[1:])):
            raise ValueError("harvest power must be nondecreasing in illuminance")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_dict(cls, points: dict, **kw) -> "SolarPanel":
        return cls(tuple(points.items()), **kw)

    @classmethod
    def from_iv(cls, curves: dict, **kw) -> "SolarPanel":
        """Build from raw I-V samples ``{lux: [(volts, amps), ...]}``; each
        illuminance contributes its maximum power point max(V*I)."""
        pts = {}
        for lux, samples in curves.items():
            vi = np.asarray(samples, dtype=float).reshape(-1, 2)
            pts[lux] = float(np.max(vi[:, 0] * vi[:, 1])) if len(vi) else 0.0
        return cls.from_dict(pts, **kw)


@dataclass(frozen=True)
class Lifetime:
    cycles: int
    days: float


def cycle_energy(profile: CycleProfile) -> float:
    return float(sum(profile.tasks().values()))


def lifetime_cycles(battery: Battery, profile: CycleProfile) -> Lifetime:
    """Whole cycles the battery can power without recharge, and days at two a day."""
    e = cycle_energy(profile)
    if e <= 0:
        raise ValueError(f"profile {profile.name!r} has zero cycle energy")
    cycles = int(math.floor(battery.energy / e + 1e-9))
    return Lifetime(cycles, cycles / CYCLES_PER_DAY)


def harvest_power(panel: SolarPanel, lux: float) -> float:
    if lux < 0:
        raise ValueError(f"illuminance must be >= 0, got {lux}")
    xs, ys = zip(*panel.points)
    return float(np.interp(lux, xs, ys))


def recharge_time(energy_needed: float, panel: SolarPanel, lux: float) -> float:
    """Seconds to harvest ``energy_needed``; ``math.inf`` when nothing is harvested."""
    if energy_needed < 0:
        raise ValueError("energy_needed must be >= 0")
    if energy_needed == 0:
        return 0.0
    p = harvest_power(panel, lux)
    if p <= 0:
        return math.inf
    return energy_needed / p


# ---------------------------------------------------------------------------
# simulation


def daylight_schedule(lux: float, sunrise_h: float = 6.0, hours: float = 12.0) -> Callable[[float], float]:
    """Square day/night illuminance: ``lux`` for ``hours`` from ``sunrise_h`` each day."""
    start, stop = sunrise_h * 3600.0, (sunrise_h + hours) * 3600.0

    def schedule(t: float) -> float:
        tod = t % DAY
        return lux if start <= tod < stop else 0.0

    return schedule


def constant_schedule(lux: float) -> Callable[[float], float]:
    return lambda t: lux


@dataclass
class SocTrace:
    t: np.ndarray
    soc: np.ndarray
    events: list[str]
    full_energy: float
    harvested: float = 0.0
    consumed: float = 0.0
    clamped: bool = False
    depletion_time: float | None = None
    cycle_times: list[float] = field(default_factory=list)

    @property
    def volts(self) -> np.ndarray:
        return VOLTS_EMPTY + (VOLTS_FULL - VOLTS_EMPTY) * self.soc

    @property
    def depleted(self) -> bool:
        return self.depletion_time is not None

    def energy_balance_error(self) -> float:
        """|dSoC * E_full - (harvested - consumed)| in joules."""
        return abs((self.soc[-1] - self.soc[0]) * self.full_energy - (self.harvested - self.consumed))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_seconds", "soc", "volts", "event"])
            for t, s, v, e in zip(self.t, self.soc, self.volts, self.events):
                w.writerow([f"{t:.0f}", f"{s:.6f}", f"{v:.4f}", e])


def simulate_soc(battery: Battery, profile: CycleProfile, panel: SolarPanel, schedule, days: int,
                 cycle_times: tuple[float, ...] = (8.0, 20.0), step: float = 60.0) -> SocTrace:
    """Step the state of charge through ``days`` days.

    ``schedule`` maps seconds since midnight of day 0 to lux; a number means a
    constant illuminance.  Each step first harvests ``P(lux(t)) * step`` and then,
    when a cycle starts at ``t``, draws one cycle's energy.  SoC is clamped to
    [0, 1]; reaching 0 records the depletion time and the run continues.
    The returned series has one sample per step plus the final state.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    if step <= 0:
        raise ValueError("step must be positive")
    if not callable(schedule):
        schedule = constant_schedule(float(schedule))
    full = battery.full_energy
    if full <= 0:
        raise ValueError("battery has zero capacity")
    e_cycle = cycle_energy(profile)
    n = int(round(days * DAY / step))
    cycle_steps = {int(round((d * DAY + h * 3600.0) / step)) for d in range(days) for h in cycle_times}

    soc = battery.state_of_charge
    ts, socs, events = [], [], []
    tr = SocTrace(np.empty(0), np.empty(0), [], full)
    for i in range(n):
        t = i * step
        event = ""
        gained = harvest_power(panel, schedule(t)) * step
        tr.harvested += gained
        soc += gained / full
        if soc > 1.0:
            soc, tr.clamped = 1.0, True
        if i in cycle_steps:
            tr.consumed += e_cycle
            tr.cycle_times.append(t)
            soc -= e_cycle / full
            event = "cycle"
            if soc <= 0.0:
                if soc < 0.0:
                    tr.clamped = True
                soc = 0.0
                if tr.depletion_time is None:
                    tr.depletion_time = t
                event = "cycle;depleted"
        ts.append(t)
        socs.append(soc)
        events.append(event)
    tr.t = np.concatenate([[0.0], np.asarray(ts) + step])
    tr.soc = np.concatenate([[battery.state_of_charge], socs])
    tr.events = ["start"] + events
    return tr


# ---------------------------------------------------------------------------
# cross-checks


@dataclass(frozen=True)
class ConsistencyRow:
    lux: float
    power_full: float
    power_cycle: float
    gap: float
    model_power: float

    def __str__(self):
        return (f"{self.lux:>7.0f} lx  full-row {self.power_full:.4f} W  cycle-row {self.power_cycle:.4f} W  "
                f"gap {100 * self.gap:.1f}%  model {self.model_power:.4f} W")


def consistency_check(panel: SolarPanel, battery: Battery, profile: CycleProfile,
                      table: dict | None = None) -> list[ConsistencyRow]:
    """Harvest power implied by each row of the recharge table, per illuminance.

    The gap is |a - b| relative to their mean.
    """
    table = RECHARGE_TABLE if table is None else table
    rows = []
    for lux, (t_full, t_cycle) in sorted(table.items()):
        a = battery.recharge_energy() / t_full
        b = cycle_energy(profile) / t_cycle
        gap = abs(a - b) / ((a + b) / 2)
        rows.append(ConsistencyRow(lux, a, b, gap, harvest_power(panel, lux)))
    return rows


# ---------------------------------------------------------------------------
# configuration file


@dataclass
class EnergyConfig:
    profiles: dict[str, CycleProfile]
    battery: Battery
    panel: SolarPanel

    def profile(self, name: str) -> CycleProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise EnergyConfigError(f"unknown profile {name!r}; choose from {sorted(self.profiles)}") from None


def _float(section, key) -> float:
    raw = section[key]
    try:
        return float(raw)
    except ValueError:
        raise EnergyConfigError(f"[{section.name}] {key} = {raw!r} is not a number") from None


def parse_energy_config(text: str) -> EnergyConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise EnergyConfigError(str(e)) from None

    profiles = {}
    for name in cp.sections():
        if not name.startswith("profile:"):
            continue
        sec = cp[name]
        pname = name.split(":", 1)[1].strip()
        unknown = set(sec) - set(TASKS) - {"total"}
        if unknown:
            raise EnergyConfigError(f"[{name}] unknown keys {sorted(unknown)}")
        missing = [k for k in TASKS if k not in sec]
        if missing:
            raise EnergyConfigError(f"[{name}] missing keys {missing}")
        vals = {k: _float(sec, k) for k in TASKS}
        total = _float(sec, "total") if "total" in sec else None
        profiles[pname] = CycleProfile(pname, published_total=total, **vals)

    battery = Battery()
    if cp.has_section("battery"):
        sec = cp["battery"]
        battery = Battery(_float(sec, "capacity_mah") if "capacity_mah" in sec else battery.capacity_mah,
                          _float(sec, "nominal_volts") if "nominal_volts" in sec else battery.nominal_volts)

    points, dims = {}, {}
    if cp.has_section("panel"):
        sec = cp["panel"]
        for key in sec:
            if key.startswith("lux_"):
                try:
                    lux = float(key[4:])
                except ValueError:
                    raise EnergyConfigError(f"[panel] bad illuminance key {key!r}") from None
                points[lux] = _float(sec, key)
            elif key in ("width_mm", "height_mm"):
                dims[key] = _float(sec, key)
            else:
                raise EnergyConfigError(f"[panel] unknown key {key!r}")
    iv = {}
    for name in cp.sections():
        if name.startswith("iv:"):
            lux = float(name.split(":", 1)[1])
            # keys are sample labels, values "volts,amps"
            samples = []
            for key, raw in cp[name].items():
                try:
                    v, a = (float(x) for x in raw.split(","))
                except ValueError:
                    raise EnergyConfigError(f"[{name}] {key} = {raw!r} is not 'volts,amps'") from None
                samples.append((v, a))
            iv[lux] = samples
    if iv:
        mpp = SolarPanel.from_iv(iv)
        points.update(dict(mpp.points))
    if not points:
        raise EnergyConfigError("no panel points ([panel] lux_* keys or [iv:*] sections)")
    try:
        panel = SolarPanel.from_dict(points, **dims)
    except ValueError as e:
        raise EnergyConfigError(str(e)) from None
    return EnergyConfig(profiles, battery, panel)


def default_config_text() -> str:
    return resources.files("mothtrap").joinpath("energy_defaults.cfg").read_text()


def load_energy_config(path=None) -> EnergyConfig:
    text = default_config_text() if path is None else Path(path).read_text()
    return parse_energy_config(text)


def default_profiles() -> dict[str, CycleProfile]:
    return load_energy_config().profiles


def default_panel() -> SolarPanel:
    return load_energy_config().panel
