"""Geofence-based extraction of port stays and sailing intervals from AIS.

Indices into a vessel's point stream are 0-based and episode / interval
bounds are inclusive on both ends.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import shapely.wkt
from shapely.geometry import MultiPolygon, Polygon


class ZoneType(str, enum.Enum):
    BERTH = "berth"
    PILOT = "pilot"
    PARKING = "parking"
    NONE = "none"


# lookup priority used by locate()
ZONE_PRIORITY = (ZoneType.BERTH, ZoneType.PILOT, ZoneType.PARKING)


class GeofenceError(ValueError):
    pass


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class Geofence:
    port_id: int
    port_name: str
    zone: ZoneType
    ring: np.ndarray  # (n, 2) closed ring of (lon, lat)

    @property
    def bbox(self):
        return (*self.ring.min(axis=0), *self.ring.max(axis=0))


class GeofenceSet:
    def __init__(self, entries: Sequence[Geofence]):
        self.entries = list(entries)
        for g in self.entries:
            validate_ring(g.ring)
        self._by_zone = {z: [g for g in self.entries if g.zone == z] for z in ZONE_PRIORITY}

    def __len__(self):
        return len(self.entries)

    def by_zone(self, zone: ZoneType):
        return self._by_zone[zone]

    def port_names(self):
        return sorted({g.port_name for g in self.entries})


def validate_ring(ring):
    ring = np.asarray(ring, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 4:
        raise GeofenceError(f"polygon ring needs >= 4 (lon, lat) vertices, got shape {ring.shape}")
    if not np.array_equal(ring[0], ring[-1]):
        raise GeofenceError("polygon ring is not closed")
    if (np.abs(ring[:, 0]) > 180).any() or (np.abs(ring[:, 1]) > 90).any():
        raise GeofenceError("polygon vertex outside lon/lat range")
    if (np.abs(np.diff(ring[:, 0])) > 180).any():
        raise GeofenceError("polygon crosses the antimeridian; split it before loading")


def parse_zone_type(text: str) -> ZoneType:
    t = text.strip().lower()
    for zone, key in ((ZoneType.BERTH, "berth"), (ZoneType.PILOT, "pilot"), (ZoneType.PARKING, "park")):
        if key in t:
            return zone
    raise GeofenceError(f"unknown polygonType {text!r}")


def rings_from_wkt(text: str) -> list[np.ndarray]:
    """Outer rings of a WKT POLYGON or MULTIPOLYGON, one array per part."""
    try:
        geom = shapely.wkt.loads(text)
    except Exception as exc:  # shapely raises its own error hierarchy
        raise GeofenceError(f"unparseable WKT: {text[:60]!r}") from exc
    if isinstance(geom, Polygon):
        parts = [geom]
    elif isinstance(geom, MultiPolygon):
        parts = list(geom.geoms)
    else:
        raise GeofenceError(f"expected POLYGON or MULTIPOLYGON, got {geom.geom_type}")
    rings = []
    for part in parts:
        if len(part.interiors):
            raise GeofenceError("polygons with holes are not supported")
        rings.append(np.asarray(part.exterior.coords, dtype=np.float64)[:, :2])
    return rings


def load_geofences(path, port_names: dict[int, str] | None = None) -> GeofenceSet:
    """Read a ``portId,geometry,polygonType`` CSV.

    ``port_names`` maps port ids to display names; ids without an entry use
    their decimal string as name.
    """
    port_names = port_names or {}
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"portId", "geometry", "polygonType"} - set(reader.fieldnames or ())
        if missing:
            raise GeofenceError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            pid = int(row["portId"])
            zone = parse_zone_type(row["polygonType"])
            for ring in rings_from_wkt(row["geometry"]):
                entries.append(Geofence(pid, port_names.get(pid, str(pid)), zone, ring))
    return GeofenceSet(entries)


def load_port_table(path) -> dict[int, str]:
    """``portId,name,lon,lat`` CSV to an id -> name map."""
    with open(path, newline="") as fh:
        return {int(r["portId"]): r["name"] for r in csv.DictReader(fh)}


# ---------------------------------------------------------------- geometry


def points_in_ring(lon, lat, ring, tol=1e-12):
    """Vectorised ray casting in the lon/lat plane; boundary points count as inside."""
    lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
    lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
    inside = np.zeros(lon.shape, dtype=bool)
    boundary = np.zeros(lon.shape, dtype=bool)
    x1, y1 = ring[:-1, 0], ring[:-1, 1]
    x2, y2 = ring[1:, 0], ring[1:, 1]
    for a, b, c, d in zip(x1, y1, x2, y2):
        cross = (c - a) * (lat - b) - (d - b) * (lon - a)
        scale = max(abs(c - a), abs(d - b), 1.0)
        on_line = np.abs(cross) <= tol * scale
        within = ((lon >= min(a, c) - tol) & (lon <= max(a, c) + tol)
                  & (lat >= min(b, d) - tol) & (lat <= max(b, d) + tol))
        boundary |= on_line & within
        straddles = (b > lat) != (d > lat)
        if straddles.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                x_cross = a + (lat - b) * (c - a) / (d - b)
            inside ^= straddles & (lon < x_cross)
    return inside | boundary


def classify_points(lon, lat, fences: GeofenceSet):
    """Zone label and port name for every point, by priority berth > pilot > parking.

    Within one zone type the first matching polygon in load order wins.
    """
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    n = len(lon)
    # np.full would coerce the str-valued enum; fill an object array explicitly
    zones = np.empty(n, dtype=object)
    zones[:] = [ZoneType.NONE] * n
    ports = np.full(n, None, dtype=object)
    unassigned = np.ones(n, dtype=bool)
    for zone in ZONE_PRIORITY:
        for g in fences.by_zone(zone):
            if not unassigned.any():
                break
            x0, y0, x1, y1 = g.bbox
            cand = unassigned & (lon >= x0) & (lon <= x1) & (lat >= y0) & (lat <= y1)
            if not cand.any():
                continue
            idx = np.flatnonzero(cand)
            hit = idx[points_in_ring(lon[idx], lat[idx], g.ring)]
            zones[hit] = zone
            ports[hit] = g.port_name
            unassigned[hit] = False
    return list(zones), list(ports)


@dataclass(frozen=True)
class AisPoint:
    imo: str
    timestamp: datetime
    lat: float
    lon: float
    speed: float = 0.0
    course: float = 0.0
    heading: float = 0.0
    draught: float = 0.0
    eta: datetime | None = None
    destination_text: str | None = None

    def __post_init__(self):
        if not -90 <= self.lat <= 90 or not -180 <= self.lon <= 180:
            raise ValueError(f"position out of range: lat={self.lat}, lon={self.lon}")


def locate(point: AisPoint, fences: GeofenceSet):
    zones, ports = classify_points([point.lon], [point.lat], fences)
    return zones[0], ports[0]


# ---------------------------------------------------------------- episodes and intervals


@dataclass(frozen=True)
class PortEpisode:
    start_idx: int
    end_idx: int
    port_name: str
    saw_berth: bool = True


@dataclass(frozen=True)
class SailingInterval:
    start_idx: int
    end_idx: int
    pre_port: str | None
    next_port: str | None

    def __len__(self):
        return self.end_idx - self.start_idx + 1


def episodes_from_zones(zones: Sequence, ports: Sequence) -> list[PortEpisode]:
    """Scan zone labels for in-port episodes that touch a berth.

    An episode opens at the first zoned point, keeps the port of that point
    and closes at the next unzoned point.
    """
    episodes = []
    in_episode = seen_berth = False
    start = -1
    cur_port = None
    for t, (z, p) in enumerate(zip(zones, ports)):
        z = ZoneType(z)
        if not in_episode and z is not ZoneType.NONE:
            in_episode, start, cur_port = True, t, p
            seen_berth = z is ZoneType.BERTH
        elif in_episode:
            if z is ZoneType.BERTH:
                seen_berth = True
            if z is ZoneType.NONE:
                if seen_berth:
                    episodes.append(PortEpisode(start, t - 1, cur_port))
                in_episode = seen_berth = False
                cur_port = None
    if in_episode and seen_berth:
        episodes.append(PortEpisode(start, len(zones) - 1, cur_port))
    return episodes


def extract_episodes(lon, lat, fences: GeofenceSet) -> list[PortEpisode]:
    zones, ports = classify_points(lon, lat, fences)
    return episodes_from_zones(zones, ports)


def label_sailing_intervals(n_points: int, episodes: Sequence[PortEpisode]) -> list[SailingInterval]:
    """Complement of the episodes over ``0..n_points-1`` with neighbouring port labels."""
    prev_end = -1
    for ep in episodes:
        if ep.start_idx > ep.end_idx or ep.start_idx <= prev_end:
            raise SegmentationError(f"episodes overlap or are unsorted at {ep}")
        prev_end = ep.end_idx
    if episodes and episodes[-1].end_idx >= n_points:
        raise SegmentationError("episode extends beyond the point stream")

    intervals = []
    cursor, pre = 0, None
    for ep in episodes:
        if ep.start_idx > cursor:
            intervals.append(SailingInterval(cursor, ep.start_idx - 1, pre, ep.port_name))
        cursor, pre = ep.end_idx + 1, ep.port_name
    if cursor < n_points:
        intervals.append(SailingInterval(cursor, n_points - 1, pre, None))
    return intervals


# ---------------------------------------------------------------- AIS input

AIS_COLUMNS = ("IMO", "timestamp", "latitude", "longitude", "speed", "course",
               "heading", "draught", "destination", "ETA")


@dataclass
class VesselTrack:
    """One vessel's time-sorted AIS stream as parallel arrays (times in unix seconds)."""

    imo: str
    time: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    speed: np.ndarray
    course: np.ndarray
    heading: np.ndarray
    draught: np.ndarray
    eta: np.ndarray  # NaN where missing
    destination: list

    def __len__(self):
        return len(self.time)


def _to_unix(series: pd.Series) -> np.ndarray:
    ts = pd.to_datetime(series, utc=True, errors="coerce", format="ISO8601")
    out = np.full(len(ts), np.nan)
    ok = ts.notna().to_numpy()
    out[ok] = ts[ok].map(lambda t: t.timestamp()).to_numpy(dtype=np.float64)
    return out


def read_ais_csv(path) -> list[VesselTrack]:
    """Parse an AIS CSV into per-vessel tracks with strictly increasing time."""
    df = pd.read_csv(path, dtype={"IMO": str, "destination": str, "ETA": str, "timestamp": str},
                     keep_default_na=True)
    missing = set(AIS_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing AIS columns {sorted(missing)}")
    df["_t"] = _to_unix(df["timestamp"])
    if df["_t"].isna().any():
        raise ValueError(f"{path}: unparseable timestamp(s)")
    df["_eta"] = _to_unix(df["ETA"].fillna(""))
    tracks = []
    for imo, g in df.groupby("IMO", sort=True):
        g = g.sort_values("_t", kind="stable").drop_duplicates("_t", keep="first")
        tracks.append(VesselTrack(
            imo=str(imo),
            time=g["_t"].to_numpy(np.float64),
            lat=g["latitude"].to_numpy(np.float64),
            lon=g["longitude"].to_numpy(np.float64),
            speed=g["speed"].to_numpy(np.float64),
            course=g["course"].to_numpy(np.float64),
            heading=g["heading"].to_numpy(np.float64),
            draught=g["draught"].to_numpy(np.float64),
            eta=g["_eta"].to_numpy(np.float64),
            destination=[None if pd.isna(d) else str(d) for d in g["destination"]],
        ))
    return tracks


def read_ais_dir(path) -> list[VesselTrack]:
    tracks = []
    for f in sorted(Path(path).glob("*.csv")):
        tracks.extend(read_ais_csv(f))
    return sorted(tracks, key=lambda t: t.imo)


def segment_track(track: VesselTrack, fences: GeofenceSet):
    episodes = extract_episodes(track.lon, track.lat, fences)
    return episodes, label_sailing_intervals(len(track), episodes)


def iso_utc(unix_seconds: float) -> str:
    return datetime.fromtimestamp(unix_seconds, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
