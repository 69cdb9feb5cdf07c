"""Synthetic fleets with planted port-call itineraries.

Vessels sail straight lines between port anchors at a fixed speed and dwell
at the berth between legs.  Every port gets three nested square geofences
(berth inside pilot inside parking).  Route regimes:

``cyclic``
    repeat a fixed loop forever.
``evolving``
    follow ``loop`` until ``switch_day``, then ``alt_loop``.
``partial``
    follow ``loop`` but detour to a random other port with ``branch_prob``.
``irregular``
    draw each next port from ``transitions`` (uniform over other ports if absent).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .geofence import GeofenceSet, Geofence, ZoneType, classify_points

REGIMES = ("cyclic", "evolving", "partial", "irregular")
NM_PER_DEG = 60.0


class SpecError(ValueError):
    """Raised for an inconsistent fleet specification."""


@dataclass
class PortSpec:
    name: str
    lon: float
    lat: float


@dataclass
class VesselSpec:
    imo: str
    regime: str = "cyclic"
    loop: list = field(default_factory=list)
    alt_loop: list = field(default_factory=list)
    transitions: dict = field(default_factory=dict)
    speed_knots: float = 14.0
    length: float = 300.0
    width: float = 45.0
    teu: float = 10000.0
    carrier: str = "C0"
    draught: float = 12.0
    start_index: int = 0


@dataclass
class FleetSpec:
    ports: list
    vessels: list
    duration_days: float = 365.0
    report_minutes: float = 240.0
    dwell_hours: float = 24.0
    switch_day: float = 180.0
    branch_prob: float = 0.2
    jitter: float = 0.0
    seed: int = 0
    start: str = "2024-01-01T00:00:00Z"
    berth_half: float = 0.05
    pilot_half: float = 0.15
    parking_half: float = 0.3

    def __post_init__(self):
        self.ports = [p if isinstance(p, PortSpec) else PortSpec(**p) for p in self.ports]
        self.vessels = [v if isinstance(v, VesselSpec) else VesselSpec(**v) for v in self.vessels]
        self.validate()

    def validate(self):
        names = [p.name for p in self.ports]
        if len(set(names)) != len(names):
            raise SpecError("duplicate port names")
        if not self.vessels:
            raise SpecError("fleet has no vessels")
        if len({v.imo for v in self.vessels}) != len(self.vessels):
            raise SpecError("duplicate IMO numbers")
        if not 0.0 <= self.branch_prob <= 1.0:
            raise SpecError(f"branch_prob {self.branch_prob} outside [0, 1]")
        if self.report_minutes <= 0 or self.duration_days <= 0:
            raise SpecError("duration and report interval must be positive")
        if self.dwell_hours * 60.0 < self.report_minutes:
            raise SpecError("dwell shorter than the report interval; berth calls could go unobserved")
        if not 0 < self.berth_half < self.pilot_half < self.parking_half:
            raise SpecError("geofence half-widths must satisfy berth < pilot < parking")
        known = set(names)
        for v in self.vessels:
            if v.regime not in REGIMES:
                raise SpecError(f"{v.imo}: unknown regime {v.regime!r}")
            if v.speed_knots <= 0:
                raise SpecError(f"{v.imo}: speed must be positive")
            if v.regime != "irregular" and len(v.loop) < 2:
                raise SpecError(f"{v.imo}: loop needs at least two ports")
            if v.regime == "evolving" and len(v.alt_loop) < 2:
                raise SpecError(f"{v.imo}: evolving regime needs alt_loop")
            refs = set(v.loop) | set(v.alt_loop) | set(v.transitions)
            for row in v.transitions.values():
                refs |= set(row)
                if any(not 0.0 <= p <= 1.0 for p in row.values()):
                    raise SpecError(f"{v.imo}: transition probabilities outside [0, 1]")
            if refs - known:
                raise SpecError(f"{v.imo}: unknown ports {sorted(refs - known)}")
            for seq in (v.loop, v.alt_loop):
                if any(a == b for a, b in zip(seq, seq[1:] + seq[:1])) and len(seq) > 1:
                    raise SpecError(f"{v.imo}: loop repeats a port back to back")
        boxes = [(p.name, p.lon, p.lat) for p in self.ports]
        for i, (a, x1, y1) in enumerate(boxes):
            for b, x2, y2 in boxes[i + 1:]:
                if abs(x1 - x2) < 2 * self.parking_half and abs(y1 - y2) < 2 * self.parking_half:
                    raise SpecError(f"geofences of {a} and {b} overlap")

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_json(cls, path):
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.as_dict(), indent=2) + "\n")


@dataclass
class Visit:
    port: str
    arrive: float
    depart: float


@dataclass
class GeneratedFleet:
    ais_dir: Path
    geofences: Path
    ports: Path
    static: Path
    itineraries: dict  # imo -> list of observed port names in call order
    edges: set  # planted directed legs (from, to) over observed calls


# ---------------------------------------------------------------- geometry


def square(lon, lat, half):
    return [(lon - half, lat - half), (lon + half, lat - half), (lon + half, lat + half),
            (lon - half, lat + half), (lon - half, lat - half)]


def wkt_polygon(ring):
    return "POLYGON ((" + ", ".join(f"{x:.6f} {y:.6f}" for x, y in ring) + "))"


def fence_set(spec: FleetSpec) -> GeofenceSet:
    entries = []
    for pid, p in enumerate(spec.ports, start=1):
        for zone, half in ((ZoneType.BERTH, spec.berth_half), (ZoneType.PILOT, spec.pilot_half),
                           (ZoneType.PARKING, spec.parking_half)):
            entries.append(Geofence(pid, p.name, zone, np.array(square(p.lon, p.lat, half))))
    return GeofenceSet(entries)


def leg_hours(a: PortSpec, b: PortSpec, knots: float) -> float:
    """Sailing time on the equirectangular plane."""
    dx = (b.lon - a.lon) * math.cos(math.radians(0.5 * (a.lat + b.lat)))
    dy = b.lat - a.lat
    return math.hypot(dx, dy) * NM_PER_DEG / knots


def bearing(a: PortSpec, b: PortSpec) -> float:
    dx = (b.lon - a.lon) * math.cos(math.radians(0.5 * (a.lat + b.lat)))
    return math.degrees(math.atan2(dx, b.lat - a.lat)) % 360.0


# ---------------------------------------------------------------- itineraries


def _next_port(v: VesselSpec, spec: FleetSpec, state: dict, t_days: float, rng) -> str:
    here = state["here"]
    if v.regime == "irregular":
        row = v.transitions.get(here)
        if row:
            names = sorted(row)
            p = np.array([row[n] for n in names], dtype=np.float64)
            return names[rng.choice(len(names), p=p / p.sum())]
        others = [p.name for p in spec.ports if p.name != here]
        return others[rng.integers(len(others))]
    loop = v.alt_loop if v.regime == "evolving" and t_days >= spec.switch_day else v.loop
    if state.get("loop") is not loop:
        state["loop"] = loop
        state["pos"] = loop.index(here) if here in loop else -1
    if v.regime == "partial" and rng.random() < spec.branch_prob:
        others = [p.name for p in spec.ports if p.name != here and p.name != loop[(state["pos"] + 1) % len(loop)]]
        if others:
            return others[rng.integers(len(others))]
    state["pos"] = (state["pos"] + 1) % len(loop)
    nxt = loop[state["pos"]]
    if nxt == here:
        state["pos"] = (state["pos"] + 1) % len(loop)
        nxt = loop[state["pos"]]
    return nxt


def plan_visits(v: VesselSpec, spec: FleetSpec, t0: float, t_end: float, rng) -> list[Visit]:
    ports = {p.name: p for p in spec.ports}
    first = v.loop[v.start_index % len(v.loop)] if v.loop else spec.ports[rng.integers(len(spec.ports))].name
    state = {"here": first}
    visits = [Visit(first, t0, t0 + spec.dwell_hours * 3600.0)]
    while visits[-1].depart < t_end:
        here = visits[-1].port
        nxt = _next_port(v, spec, state, (visits[-1].depart - t0) / 86400.0, rng)
        arrive = visits[-1].depart + leg_hours(ports[here], ports[nxt], v.speed_knots) * 3600.0
        visits.append(Visit(nxt, arrive, arrive + spec.dwell_hours * 3600.0))
        state["here"] = nxt
    return visits


def _unix(text):
    return datetime.fromisoformat(text.replace("Z", "+00:00")).timestamp()


def _iso(ts):
    return datetime.fromtimestamp(round(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def sample_track(v: VesselSpec, spec: FleetSpec, visits: list[Visit], times: np.ndarray, rng):
    """AIS rows of one vessel at the given report times."""
    ports = {p.name: p for p in spec.ports}
    knot_t, knot_lon, knot_lat = [], [], []
    for vis in visits:
        p = ports[vis.port]
        knot_t += [vis.arrive, vis.depart]
        knot_lon += [p.lon, p.lon]
        knot_lat += [p.lat, p.lat]
    lon = np.interp(times, knot_t, knot_lon)
    lat = np.interp(times, knot_t, knot_lat)
    if spec.jitter > 0:
        lon = lon + rng.normal(0.0, spec.jitter, len(times))
        lat = lat + rng.normal(0.0, spec.jitter, len(times))
    arrivals = np.array([vis.arrive for vis in visits])
    departs = np.array([vis.depart for vis in visits])
    rows, legs = [], []
    for t, x, y in zip(times, lon, lat):
        k = int(np.searchsorted(arrivals, t, side="right")) - 1  # last visit arrived at or before t
        docked = t <= departs[k]
        dest = visits[k] if docked else visits[k + 1]
        heading = bearing(ports[visits[k].port], ports[visits[k + 1].port]) if k + 1 < len(visits) else 0.0
        if docked and k > 0:
            heading = bearing(ports[visits[k - 1].port], ports[visits[k].port])
        speed = 0.0 if docked else v.speed_knots
        eta = dest.arrive if not docked else (visits[k + 1].arrive if k + 1 < len(visits) else math.nan)
        dest_name = visits[k + 1].port if k + 1 < len(visits) else ""
        rows.append([v.imo, _iso(t), f"{y:.6f}", f"{x:.6f}", f"{speed:.1f}", f"{heading:.1f}",
                     f"{heading:.0f}", f"{v.draught:.1f}", dest_name,
                     "" if math.isnan(eta) else _iso(eta)])
        legs.append((k, docked))
    return rows, legs


AIS_HEADER = ["IMO", "timestamp", "latitude", "longitude", "speed", "course", "heading",
              "draught", "destination", "ETA"]


def generate(spec: FleetSpec, out_dir) -> GeneratedFleet:
    """Write AIS, geofence, port and static CSVs plus ``itineraries.json`` under ``out_dir``."""
    out = Path(out_dir)
    ais_dir = out / "ais"
    ais_dir.mkdir(parents=True, exist_ok=True)
    fences = fence_set(spec)
    t0 = _unix(spec.start)
    t_end = t0 + spec.duration_days * 86400.0
    dt = spec.report_minutes * 60.0
    itineraries, edges = {}, set()
    master = np.random.default_rng(spec.seed)
    seeds = master.integers(0, 2**63 - 1, size=len(spec.vessels))
    for v, s in zip(spec.vessels, seeds):
        rng = np.random.default_rng(int(s))
        phase = float(rng.uniform(0.0, dt))
        visits = plan_visits(v, spec, t0, t_end, rng)
        times = np.arange(t0 + phase, t_end, dt)
        rows, legs = sample_track(v, spec, visits, times, rng)
        lon = np.array([float(r[3]) for r in rows])
        lat = np.array([float(r[2]) for r in rows])
        zones, names = classify_points(lon, lat, fences)
        observed = _check_and_observe(v, visits, legs, zones, names)
        itineraries[v.imo] = [visits[k].port for k in observed]
        edges |= set(zip(itineraries[v.imo], itineraries[v.imo][1:]))
        with open(ais_dir / f"{v.imo}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(AIS_HEADER)
            w.writerows(rows)
    with open(out / "geofences.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["portId", "geometry", "polygonType"])
        for pid, p in enumerate(spec.ports, start=1):
            for zone, half in (("berth", spec.berth_half), ("pilot", spec.pilot_half),
                               ("parking", spec.parking_half)):
                w.writerow([pid, wkt_polygon(square(p.lon, p.lat, half)), zone])
    with open(out / "ports.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["portId", "name", "lon", "lat"])
        for pid, p in enumerate(spec.ports, start=1):
            w.writerow([pid, p.name, f"{p.lon:.6f}", f"{p.lat:.6f}"])
    with open(out / "static.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["imo", "length", "width", "TEU", "crrId"])
        for v in spec.vessels:
            w.writerow([v.imo, f"{v.length:g}", f"{v.width:g}", f"{v.teu:g}", v.carrier])
    (out / "itineraries.json").write_text(json.dumps(itineraries, indent=1, sort_keys=True) + "\n")
    return GeneratedFleet(ais_dir, out / "geofences.csv", out / "ports.csv", out / "static.csv",
                          itineraries, edges)


def _check_and_observe(v, visits, legs, zones, names):
    """Indices of visits with a berth observation; reject routes crossing foreign fences."""
    observed = []
    for (k, docked), zone, name in zip(legs, zones, names):
        allowed = {visits[k].port} if docked else {visits[k].port, visits[k + 1].port}
        if name is not None and name not in allowed:
            raise SpecError(f"{v.imo}: route {sorted(allowed)} enters the geofence of {name}")
        if zone == ZoneType.BERTH:
            hit = k if docked or name == visits[k].port else k + 1
            if not observed or observed[-1] != hit:
                observed.append(hit)
    return observed


# ---------------------------------------------------------------- presets


def _ring(n, radius, lon0=0.0, lat0=0.0):
    return [(lon0 + radius * math.cos(2 * math.pi * i / n), lat0 + radius * math.sin(2 * math.pi * i / n))
            for i in range(n)]


def cyclic_fleet(n_vessels: int = 20, days: float = 365.0, seed: int = 0, radius: float = 12.0) -> FleetSpec:
    """Fixed 6-port loops (both directions) plus two 2-port shuttles hanging off the ring.

    Ring ports share hubs with the shuttles so reachability sets branch.
    """
    ring = _ring(6, radius)
    ports = [PortSpec(f"P{i}", round(x, 6), round(y, 6)) for i, (x, y) in enumerate(ring)]
    ports.append(PortSpec("P6", 2 * radius, 0.0))
    ports.append(PortSpec("P7", -2 * radius, 0.0))
    loops = [
        ["P0", "P1", "P2", "P3", "P4", "P5"],
        ["P0", "P5", "P4", "P3", "P2", "P1"],
        ["P0", "P6"],
        ["P3", "P7"],
    ]
    vessels = []
    for i in range(n_vessels):
        loop = loops[i % len(loops)]
        vessels.append(VesselSpec(
            imo=f"{9100000 + i}", regime="cyclic", loop=list(loop), start_index=i % len(loop),
            speed_knots=14.0 + (i % 3), length=250.0 + 10 * (i % 5), width=40.0 + (i % 4),
            teu=8000.0 + 500 * (i % 7), carrier=f"C{i % 3}", draught=11.0 + 0.5 * (i % 3)))
    return FleetSpec(ports=ports, vessels=vessels, duration_days=days, seed=seed)


def shuttle_fleet(days: float = 30.0, seed: int = 0) -> FleetSpec:
    ports = [PortSpec("A", 0.0, 0.0), PortSpec("B", 6.0, 0.0)]
    return FleetSpec(ports=ports, vessels=[VesselSpec("9000001", loop=["A", "B"])],
                     duration_days=days, seed=seed)


def mixed_fleet(days: float = 120.0, seed: int = 0) -> FleetSpec:
    """One vessel per regime on a shared ring of eight ports."""
    ring = _ring(8, 10.0)
    ports = [PortSpec(f"Q{i}", round(x, 6), round(y, 6)) for i, (x, y) in enumerate(ring)]
    names = [p.name for p in ports]
    vessels = [
        VesselSpec("9200001", "cyclic", loop=names[:4]),
        VesselSpec("9200002", "evolving", loop=names[:4], alt_loop=names[4:] + names[:1]),
        VesselSpec("9200003", "partial", loop=names[::2]),
        VesselSpec("9200004", "irregular"),
    ]
    return FleetSpec(ports=ports, vessels=vessels, duration_days=days, seed=seed, switch_day=days / 2)


PRESETS = {"cyclic": cyclic_fleet, "shuttle": shuttle_fleet, "mixed": mixed_fleet}


__all__ = ["FleetSpec", "PortSpec", "VesselSpec", "SpecError", "GeneratedFleet", "Visit", "generate",
           "plan_visits", "fence_set", "cyclic_fleet", "shuttle_fleet", "mixed_fleet", "PRESETS"]
