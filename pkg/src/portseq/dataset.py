"""Voyage segments, feature normalisation, chronological split and batching."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterable, Sequence

import numpy as np

from .geofence import SailingInterval, VesselTrack, iso_utc
from .graph import PortVocabulary
from .retrieval import HistoricalScenario, HistoryDB

logger = logging.getLogger(__name__)

KIN_COLUMNS = ("lat", "lon", "sog", "cog", "time", "imo_code")
DYN_COLUMNS = ("speed", "draught", "heading", "course", "eta_hours")
STAT_COLUMNS = ("length", "width", "teu", "carrier_code", "imo_code")
KIN_CONTINUOUS = 5  # leading continuous columns; the rest are integer codes
DYN_CONTINUOUS = 5
STAT_CONTINUOUS = 3
CLIP = 10.0


class SplitTooSmallError(ValueError):
    pass


class LeakageError(ValueError):
    """A non-training segment was offered to the retrieval database."""


@dataclass(frozen=True)
class StaticRow:
    length: float
    width: float
    teu: float
    carrier: str


def load_static_table(path) -> dict[str, StaticRow]:
    with open(path, newline="") as fh:
        return {
            r["imo"]: StaticRow(float(r["length"]), float(r["width"]), float(r["TEU"]), r["crrId"])
            for r in csv.DictReader(fh)
        }


@dataclass(frozen=True)
class CategoricalCodes:
    """Dense integer codes for vessels and carriers; 0 is reserved for unknown."""

    imo: dict[str, int]
    carrier: dict[str, int]

    @classmethod
    def from_static(cls, static: dict[str, StaticRow]):
        imos = sorted(static)
        carriers = sorted({row.carrier for row in static.values()})
        return cls({k: i + 1 for i, k in enumerate(imos)}, {k: i + 1 for i, k in enumerate(carriers)})

    @property
    def n_imo(self):
        return len(self.imo) + 1

    @property
    def n_carrier(self):
        return len(self.carrier) + 1


@dataclass
class VoyageSegment:
    imo: str
    start_time: float  # unix seconds, UTC
    end_time: float
    x_kin: np.ndarray  # (L, 6)
    x_dyn: np.ndarray  # (L, 5)
    x_stat: np.ndarray  # (5,)
    mask: np.ndarray  # (L,) bool
    hist_ports: np.ndarray  # (K,) int, last entry is the origin
    future_ports: np.ndarray  # (H,) int, sentinel-padded
    port_chain: tuple = ()  # every port call up to and including the origin
    split: str | None = None

    @property
    def origin(self) -> int:
        return int(self.hist_ports[-1])

    @property
    def destination(self) -> int:
        return int(self.future_ports[0])

    @property
    def length(self) -> int:
        return len(self.mask)


@dataclass
class AssemblyReport:
    short: int = 0
    no_origin: int = 0
    missing_static: list = field(default_factory=list)

    def as_dict(self):
        return {"short": self.short, "no_origin": self.no_origin,
                "missing_static": sorted(set(self.missing_static))}


def _left_pad(values, k, fill):
    values = list(values)[-k:]
    return [fill] * (k - len(values)) + values


def _right_pad(values, h, fill):
    values = list(values)[:h]
    return values + [fill] * (h - len(values))


def assemble_segments(labeled: Iterable[tuple[VesselTrack, Sequence[SailingInterval]]],
                      static: dict[str, StaticRow], vocab: PortVocabulary,
                      codes: CategoricalCodes, K: int = 3, H: int = 3,
                      report: AssemblyReport | None = None) -> list[VoyageSegment]:
    """Turn labelled sailing intervals into model-ready segments.

    The port chain of a vessel is read off the interval labels: interval ``i``
    departs ``pre_port(i)`` and heads for ``next_port(i)``, so the history is
    the last ``K`` departure ports and the targets are the next ``H`` arrival
    ports.  Intervals shorter than two points, without a departure port, or
    of vessels missing from ``static`` are dropped (counted in ``report``).
    """
    report = report if report is not None else AssemblyReport()
    omega = vocab.sentinel
    out = []
    for track, intervals in labeled:
        row = static.get(track.imo)
        if row is None:
            report.missing_static.append(track.imo)
            logger.warning("no static row for IMO %s; skipping its segments", track.imo)
            continue
        imo_code = codes.imo.get(track.imo, 0)
        x_stat = np.array([row.length, row.width, row.teu,
                           codes.carrier.get(row.carrier, 0), imo_code], dtype=np.float64)
        departures = [vocab.index(iv.pre_port) for iv in intervals]
        arrivals = [vocab.index(iv.next_port) for iv in intervals]
        for i, iv in enumerate(intervals):
            if len(iv) < 2:
                report.short += 1
                continue
            if departures[i] == omega:
                report.no_origin += 1
                continue
            sl = slice(iv.start_idx, iv.end_idx + 1)
            t = track.time[sl]
            eta_h = np.where(np.isnan(track.eta[sl]), 0.0, (track.eta[sl] - t) / 3600.0)
            x_kin = np.column_stack([track.lat[sl], track.lon[sl], track.speed[sl],
                                     track.course[sl], t, np.full(len(t), imo_code)])
            x_dyn = np.column_stack([track.speed[sl], track.draught[sl], track.heading[sl],
                                     track.course[sl], eta_h])
            chain = tuple(p for p in departures[:i + 1] if p != omega)
            out.append(VoyageSegment(
                imo=track.imo, start_time=float(t[0]), end_time=float(t[-1]),
                x_kin=x_kin, x_dyn=x_dyn, x_stat=x_stat.copy(),
                mask=np.ones(len(t), dtype=bool),
                hist_ports=np.array(_left_pad(departures[:i + 1], K, omega), dtype=np.int64),
                future_ports=np.array(_right_pad(arrivals[i:], H, omega), dtype=np.int64),
                port_chain=chain,
            ))
    return out


# ---------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class NormalizationStats:
    kin_mean: np.ndarray
    kin_std: np.ndarray
    dyn_mean: np.ndarray
    dyn_std: np.ndarray
    stat_mean: np.ndarray
    stat_std: np.ndarray

    def as_dict(self):
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _moments(x):
    return x.mean(axis=0), x.std(axis=0)


def fit_normalization(train: Sequence[VoyageSegment]) -> NormalizationStats:
    if not train:
        raise ValueError("cannot fit normalisation on an empty training split")
    kin = np.concatenate([s.x_kin[s.mask, :KIN_CONTINUOUS] for s in train])
    dyn = np.concatenate([s.x_dyn[s.mask, :DYN_CONTINUOUS] for s in train])
    stat = np.stack([s.x_stat[:STAT_CONTINUOUS] for s in train])
    return NormalizationStats(*_moments(kin), *_moments(dyn), *_moments(stat))


def _zscore(x, mu, sd):
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    z = (x - mu) / np.where(const, 1.0, sd)
    return np.clip(np.where(const, 0.0, z), -CLIP, CLIP)


def _unzscore(z, mu, sd):
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    return np.where(const, mu, z * sd + mu)


def _map_columns(seg, stats, fn):
    kin, dyn, st = seg.x_kin.copy(), seg.x_dyn.copy(), seg.x_stat.copy()
    kin[:, :KIN_CONTINUOUS] = fn(kin[:, :KIN_CONTINUOUS], stats.kin_mean, stats.kin_std)
    dyn[:, :DYN_CONTINUOUS] = fn(dyn[:, :DYN_CONTINUOUS], stats.dyn_mean, stats.dyn_std)
    st[:STAT_CONTINUOUS] = fn(st[:STAT_CONTINUOUS], stats.stat_mean, stats.stat_std)
    return replace(seg, x_kin=kin, x_dyn=dyn, x_stat=st)


def normalize(segments: Sequence[VoyageSegment], stats: NormalizationStats) -> list[VoyageSegment]:
    """Z-score continuous columns with training statistics and clip to [-10, 10].

    Integer code columns are left untouched; constant columns become 0.
    """
    return [_map_columns(s, stats, _zscore) for s in segments]


def denormalize(segments: Sequence[VoyageSegment], stats: NormalizationStats) -> list[VoyageSegment]:
    return [_map_columns(s, stats, _unzscore) for s in segments]


# ---------------------------------------------------------------- split and history


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list


def chronological_split(segments: Sequence[VoyageSegment],
                        ratios=(0.70, 0.15, 0.15)) -> DatasetSplit:
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9) or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(segments)
    if n < 3:
        raise SplitTooSmallError(f"need at least 3 segments to split, got {n}")
    order = sorted(range(n), key=lambda i: (segments[i].start_time, segments[i].imo, i))
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor(ratios[1] * n + 1e-9)
    parts = []
    for name, idx in (("train", order[:n_train]), ("val", order[n_train:n_train + n_val]),
                      ("test", order[n_train + n_val:])):
        parts.append([replace(segments[i], split=name) for i in idx])
    return DatasetSplit(*parts)


def build_history_db(train: Sequence[VoyageSegment], K: int = 3, H: int = 3,
                     sentinel: int | None = None) -> HistoryDB:
    """Freeze one retrieval scenario per training segment, bucketed by origin."""
    db = HistoryDB(H, sentinel)
    for s in train:
        if s.split != "train":
            raise LeakageError(f"segment of {s.imo} at {iso_utc(s.start_time)} is from split {s.split!r}")
        if len(s.hist_ports) != K or len(s.future_ports) != H:
            raise ValueError("segment history/target lengths do not match K/H")
        prefix = s.port_chain or tuple(int(p) for p in s.hist_ports)
        db.add(HistoricalScenario(prefix=tuple(prefix),
                                  continuation=tuple(int(p) for p in s.future_ports),
                                  origin=s.origin))
    db.freeze()
    return db


# ---------------------------------------------------------------- JSON-lines persistence


def _iso(ts):
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


def _unix(text):
    return datetime.fromisoformat(text).timestamp()


def segment_to_record(seg: VoyageSegment, vocab: PortVocabulary) -> dict:
    return {
        "imo": seg.imo,
        "start_time": _iso(seg.start_time),
        "end_time": _iso(seg.end_time),
        "origin": vocab.name(seg.origin),
        "destination": vocab.name(seg.destination),
        "feature_kin": seg.x_kin.tolist(),
        "feature_dyn": seg.x_dyn.tolist(),
        "feature_stat": seg.x_stat.tolist(),
        "hist_ports": [vocab.name(int(p)) for p in seg.hist_ports],
        "future_ports": [vocab.name(int(p)) for p in seg.future_ports],
        "port_chain": [vocab.name(int(p)) for p in seg.port_chain],
        "split": seg.split,
    }


def segment_from_record(rec: dict, vocab: PortVocabulary) -> VoyageSegment:
    x_kin = np.asarray(rec["feature_kin"], dtype=np.float64).reshape(-1, len(KIN_COLUMNS))
    return VoyageSegment(
        imo=str(rec["imo"]),
        start_time=_unix(rec["start_time"]),
        end_time=_unix(rec["end_time"]),
        x_kin=x_kin,
        x_dyn=np.asarray(rec["feature_dyn"], dtype=np.float64).reshape(-1, len(DYN_COLUMNS)),
        x_stat=np.asarray(rec["feature_stat"], dtype=np.float64),
        mask=np.ones(len(x_kin), dtype=bool),
        hist_ports=np.array([vocab.index(p) for p in rec["hist_ports"]], dtype=np.int64),
        future_ports=np.array([vocab.index(p) for p in rec["future_ports"]], dtype=np.int64),
        port_chain=tuple(vocab.index(p) for p in rec.get("port_chain", [])),
        split=rec.get("split"),
    )


def write_segments(path, segments, vocab):
    with open(path, "w") as fh:
        for s in segments:
            fh.write(json.dumps(segment_to_record(s, vocab)) + "\n")


def read_segments(path, vocab) -> list[VoyageSegment]:
    with open(path) as fh:
        return [segment_from_record(json.loads(line), vocab) for line in fh if line.strip()]


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    kin: np.ndarray  # (B, L, 5) continuous kinematic columns
    kin_imo: np.ndarray  # (B, L) int codes
    dyn: np.ndarray  # (B, L, 5)
    stat: np.ndarray  # (B, 3)
    carrier: np.ndarray  # (B,) int
    imo: np.ndarray  # (B,) int
    mask: np.ndarray  # (B, L) bool
    hist: np.ndarray  # (B, K) int
    targets: np.ndarray  # (B, H) int
    segments: list

    def __len__(self):
        return len(self.segments)

    @property
    def origins(self):
        return self.hist[:, -1]


def make_batch(segments: Sequence[VoyageSegment]) -> Batch:
    """Stack segments, zero-padding every trajectory to the longest one."""
    b = len(segments)
    length = max(s.length for s in segments)
    kin = np.zeros((b, length, len(KIN_COLUMNS)))
    dyn = np.zeros((b, length, len(DYN_COLUMNS)))
    mask = np.zeros((b, length), dtype=bool)
    for i, s in enumerate(segments):
        kin[i, :s.length] = s.x_kin
        dyn[i, :s.length] = s.x_dyn
        mask[i, :s.length] = s.mask
    stat = np.stack([s.x_stat for s in segments])
    return Batch(
        kin=kin[:, :, :KIN_CONTINUOUS],
        kin_imo=kin[:, :, KIN_CONTINUOUS].astype(np.int64),
        dyn=dyn,
        stat=stat[:, :STAT_CONTINUOUS],
        carrier=stat[:, 3].astype(np.int64),
        imo=stat[:, 4].astype(np.int64),
        mask=mask,
        hist=np.stack([s.hist_ports for s in segments]).astype(np.int64),
        targets=np.stack([s.future_ports for s in segments]).astype(np.int64),
        segments=list(segments),
    )
