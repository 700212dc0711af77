"""Energy, CO2 and dollar accounting for training runs.

Power readings arrive as ``timestamp,component,watts`` records, from a CSV
file or from the periodic output of an external sampler piped into
:func:`follow`. Energy per component is the trapezoidal integral of its
readings; the total is scaled by the datacenter PUE.
"""
from __future__ import annotations

import csv
import math
import re
import threading
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Optional, TextIO

PUE_DEFAULT = 1.58
CO2_LBS_PER_KWH = 0.954
_COMPONENT = re.compile(r"^(cpu|dram|gpu:\d+)$")


class PowerDataError(ValueError):
    pass


@dataclass(frozen=True)
class PowerSample:
    timestamp: float
    component: str
    watts: float

    def __post_init__(self):
        if not _COMPONENT.match(self.component):
            raise PowerDataError(f"unknown component {self.component!r} (expected cpu, dram or gpu:<n>)")
        if not math.isfinite(self.watts) or self.watts < 0:
            raise PowerDataError(f"{self.component}: watts must be finite and non-negative, got {self.watts}")
        if not math.isfinite(self.timestamp):
            raise PowerDataError(f"{self.component}: timestamp must be finite")


@dataclass
class ResourceConfig:
    pue: float = PUE_DEFAULT
    co2_lbs_per_kwh: float = CO2_LBS_PER_KWH
    usd_per_hour: float = 1.0

    def __post_init__(self):
        bad = [k for k in ("pue", "co2_lbs_per_kwh", "usd_per_hour") if not getattr(self, k) > 0]
        if bad:
            raise ValueError(f"resource settings must be positive: {', '.join(bad)}")


@dataclass
class ResourceReport:
    wall_hours: float
    energy_kwh: float
    co2_lbs: float
    cost_usd: float
    breakdown_kwh: dict = field(default_factory=dict)
    omitted: list = field(default_factory=list)
    pue: float = PUE_DEFAULT

    def to_dict(self) -> dict:
        return dict(wall_hours=self.wall_hours, energy_kwh=self.energy_kwh, co2_lbs=self.co2_lbs,
                    cost_usd=self.cost_usd, breakdown_kwh=dict(sorted(self.breakdown_kwh.items())),
                    omitted=list(self.omitted), pue=self.pue)

    def table_row(self, model: str = "run", hardware: str = "-") -> str:
        """Columns Model | HW | Hours | Cost | Power | CO2, rounded for display."""
        return " | ".join([model, hardware, _num(self.wall_hours), str(round_half_up(self.cost_usd, 0)),
                           f"{round_half_up(self.energy_kwh, 2)}", f"{round_half_up(self.co2_lbs, 2)}"])


TABLE_HEADER = "Model | HW | Hours | Cost | Power | CO2"


def round_half_up(x: float, places: int) -> Decimal:
    return Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def _num(x: float) -> str:
    return f"{x:g}"


# ------------------------------------------------------------------ input

def read_samples(stream: Iterable[str]) -> list[PowerSample]:
    """Parse ``timestamp,component,watts`` lines; a header line is optional."""
    out = []
    for lineno, row in enumerate(csv.reader(stream), start=1):
        if not row or not "".join(row).strip():
            continue
        if lineno == 1 and [c.strip() for c in row] == ["timestamp", "component", "watts"]:
            continue
        if len(row) != 3:
            raise PowerDataError(f"line {lineno}: expected 3 fields, got {len(row)}")
        try:
            out.append(PowerSample(float(row[0]), row[1].strip(), float(row[2])))
        except ValueError as e:
            raise PowerDataError(f"line {lineno}: {e}") from None
    return out


def write_samples(samples: Iterable[PowerSample], stream: TextIO):
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["timestamp", "component", "watts"])
    for s in samples:
        w.writerow([repr(s.timestamp), s.component, repr(s.watts)])


class PowerSink:
    """Append-only, per-component time-ordered store shared with a sampler thread."""

    def __init__(self):
        self._lock = threading.Lock()
        self._samples: list[PowerSample] = []
        self._last: dict[str, float] = {}

    def append(self, sample: PowerSample):
        with self._lock:
            last = self._last.get(sample.component)
            if last is not None and sample.timestamp < last:
                raise PowerDataError(f"{sample.component}: timestamp {sample.timestamp} goes backwards")
            self._last[sample.component] = sample.timestamp
            self._samples.append(sample)

    def snapshot(self) -> tuple[PowerSample, ...]:
        with self._lock:
            return tuple(self._samples)

    def __len__(self):
        with self._lock:
            return len(self._samples)


def follow(stream: Iterable[str], sink: PowerSink) -> threading.Thread:
    """Feed lines from an external sampler's output into ``sink`` on a daemon thread."""

    def run():
        for line in stream:
            for s in read_samples([line]):
                sink.append(s)

    t = threading.Thread(target=run, daemon=True)
    t.start()
    return t


# ------------------------------------------------------------------ arithmetic

def integrate_power(samples: Iterable[PowerSample], pue: float = PUE_DEFAULT) -> tuple[float, dict]:
    """Total kWh (times PUE) and the per-component kWh before PUE."""
    if not pue > 0:
        raise ValueError("pue must be positive")
    by_comp: dict[str, list] = {}
    for s in samples:
        if s.watts < 0:
            raise PowerDataError(f"{s.component}: negative watts")
        by_comp.setdefault(s.component, []).append(s)
    breakdown = {}
    for comp, ss in sorted(by_comp.items()):
        if len(ss) < 2:
            raise PowerDataError(f"component {comp!r} has a single sample; need at least 2 to integrate")
        joules = 0.0
        for a, b in zip(ss, ss[1:]):
            if b.timestamp < a.timestamp:
                raise PowerDataError(f"{comp}: timestamps go backwards at {b.timestamp}")
            joules += 0.5 * (a.watts + b.watts) * (b.timestamp - a.timestamp)
        breakdown[comp] = joules / 3.6e6
    return pue * sum(breakdown.values()), breakdown


def co2(energy_kwh: float, factor: float = CO2_LBS_PER_KWH) -> float:
    """Pounds of CO2 for ``energy_kwh``."""
    if energy_kwh < 0:
        raise ValueError("energy must be non-negative")
    return factor * energy_kwh


def cost(wall_hours: float, usd_per_hour: float) -> float:
    if wall_hours < 0 or usd_per_hour < 0:
        raise ValueError("hours and hourly rate must be non-negative")
    return wall_hours * usd_per_hour


def report(samples: Iterable[PowerSample], wall_hours: float, config: Optional[ResourceConfig] = None,
           expected: Iterable[str] = ("cpu", "dram", "gpu")) -> ResourceReport:
    """Compose integration, CO2 and cost. Expected component families with no
    samples are listed in ``omitted`` rather than imputed."""
    config = config or ResourceConfig()
    samples = list(samples)
    kwh, breakdown = integrate_power(samples, config.pue)
    families = {c.split(":")[0] for c in breakdown}
    omitted = [f for f in expected if f not in families]
    return ResourceReport(wall_hours=wall_hours, energy_kwh=kwh, co2_lbs=co2(kwh, config.co2_lbs_per_kwh),
                          cost_usd=cost(wall_hours, config.usd_per_hour), breakdown_kwh=breakdown,
                          omitted=omitted, pue=config.pue)


def report_from_energy(energy_kwh: float, wall_hours: float,
                       config: Optional[ResourceConfig] = None) -> ResourceReport:
    """Report for a run whose total (PUE-scaled) energy is already known."""
    config = config or ResourceConfig()
    return ResourceReport(wall_hours=wall_hours, energy_kwh=energy_kwh,
                          co2_lbs=co2(energy_kwh, config.co2_lbs_per_kwh),
                          cost_usd=cost(wall_hours, config.usd_per_hour), pue=config.pue)
