"""Glue from raw AIS files to model-ready splits, graph and history database."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .dataset import (AssemblyReport, CategoricalCodes, DatasetSplit, NormalizationStats,
                      VoyageSegment, assemble_segments, build_history_db, chronological_split,
                      fit_normalization, load_static_table, normalize)
from .geofence import GeofenceSet, load_geofences, load_port_table, read_ais_dir, segment_track
from .graph import AdjacencyGraph, PortVocabulary, build_adjacency, build_vocabulary
from .retrieval import HistoryDB

logger = logging.getLogger(__name__)


@dataclass
class PreparedData:
    vocab: PortVocabulary
    codes: CategoricalCodes
    split: DatasetSplit
    stats: NormalizationStats
    graph: AdjacencyGraph
    db: HistoryDB
    report: AssemblyReport


def load_fences(geofence_path, ports_path=None) -> GeofenceSet:
    names = load_port_table(ports_path) if ports_path and Path(ports_path).exists() else None
    return load_geofences(geofence_path, names)


def segment_ais(ais_dir, fences: GeofenceSet):
    """Per-vessel (track, sailing intervals) pairs."""
    labeled = []
    for track in read_ais_dir(ais_dir):
        _, intervals = segment_track(track, fences)
        labeled.append((track, intervals))
    return labeled


def graph_from_segments(train: Sequence[VoyageSegment], vocab: PortVocabulary) -> AdjacencyGraph:
    """Adjacency of consecutive calls (origin -> first target) seen in training."""
    return build_adjacency(((s.origin, s.destination) for s in train), vocab)


def prepare(ais_dir, geofence_path, static_path, ports_path=None, K=3, H=3) -> PreparedData:
    fences = load_fences(geofence_path, ports_path)
    vocab = build_vocabulary(fences.port_names())
    static = load_static_table(static_path)
    codes = CategoricalCodes.from_static(static)
    report = AssemblyReport()
    segments = assemble_segments(segment_ais(ais_dir, fences), static, vocab, codes, K, H, report)
    split = chronological_split(segments)
    stats = fit_normalization(split.train)
    split = DatasetSplit(normalize(split.train, stats), normalize(split.val, stats),
                         normalize(split.test, stats))
    graph = graph_from_segments(split.train, vocab)
    db = build_history_db(split.train, K, H, sentinel=vocab.sentinel)
    logger.info("prepared %d/%d/%d segments over %d ports, %d edges", len(split.train),
                len(split.val), len(split.test), len(vocab), len(graph.edge_list()))
    return PreparedData(vocab, codes, split, stats, graph, db, report)


__all__ = ["PreparedData", "load_fences", "segment_ais", "graph_from_segments", "prepare"]
