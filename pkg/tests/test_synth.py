import hashlib

import pytest

from portseq.geofence import read_ais_dir, segment_track
from portseq.pipeline import load_fences, prepare
from portseq.synth import (PRESETS, FleetSpec, PortSpec, SpecError, VesselSpec, cyclic_fleet, generate,
                           mixed_fleet, shuttle_fleet)


def digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def recovered_chains(fleet):
    fences = load_fences(fleet.geofences, fleet.ports)
    out = {}
    for track in read_ais_dir(fleet.ais_dir):
        episodes, _ = segment_track(track, fences)
        out[track.imo] = [e.port_name for e in episodes]
    return out


def test_shuttle_alternates(tmp_path):
    fleet = generate(shuttle_fleet(days=30), tmp_path)
    chain = fleet.itineraries["9000001"]
    assert len(chain) >= 4
    assert all(a != b for a, b in zip(chain, chain[1:]))
    assert set(chain) == {"A", "B"}
    assert fleet.edges == {("A", "B"), ("B", "A")}


def test_same_seed_gives_identical_files(tmp_path):
    spec = mixed_fleet(days=40, seed=3)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    a, b = digest(tmp_path / "a"), digest(tmp_path / "b")
    assert a == b and len(a) >= 5
    generate(mixed_fleet(days=40, seed=4), tmp_path / "c")
    assert digest(tmp_path / "c") != a


def test_output_schemas(tmp_path):
    fleet = generate(shuttle_fleet(days=5), tmp_path)
    head = next(fleet.ais_dir.glob("*.csv")).read_text().splitlines()[0]
    assert head == "IMO,timestamp,latitude,longitude,speed,course,heading,draught,destination,ETA"
    assert fleet.geofences.read_text().splitlines()[0] == "portId,geometry,polygonType"
    assert fleet.static.read_text().splitlines()[0] == "imo,length,width,TEU,crrId"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_segmentation_recovers_planted_chains_for_every_regime(tmp_path, seed):
    spec = mixed_fleet(days=60, seed=seed)
    assert {v.regime for v in spec.vessels} == {"cyclic", "evolving", "partial", "irregular"}
    fleet = generate(spec, tmp_path)
    assert recovered_chains(fleet) == fleet.itineraries


def test_recovery_survives_small_jitter(tmp_path):
    spec = mixed_fleet(days=30, seed=5)
    spec.jitter = 0.01
    fleet = generate(spec, tmp_path)
    assert recovered_chains(fleet) == fleet.itineraries


def test_planted_adjacency_matches_training_graph(tmp_path):
    fleet = generate(cyclic_fleet(n_vessels=8, days=120), tmp_path)
    data = prepare(fleet.ais_dir, fleet.geofences, fleet.static, fleet.ports)
    names = {(data.vocab.name(i), data.vocab.name(j)) for i, j in data.graph.edge_list()}
    assert names == fleet.edges


def test_training_graph_is_subset_of_planted_edges_when_routes_evolve(tmp_path):
    fleet = generate(mixed_fleet(days=120), tmp_path)
    data = prepare(fleet.ais_dir, fleet.geofences, fleet.static, fleet.ports)
    names = {(data.vocab.name(i), data.vocab.name(j)) for i, j in data.graph.edge_list()}
    assert names <= fleet.edges
    train_pairs = {(data.vocab.name(s.origin), data.vocab.name(s.destination)) for s in data.split.train}
    assert names == train_pairs


def test_overlapping_geofences_rejected():
    with pytest.raises(SpecError, match="overlap"):
        FleetSpec(ports=[PortSpec("A", 0.0, 0.0), PortSpec("B", 0.5, 0.0)],
                  vessels=[VesselSpec("1", loop=["A", "B"])])


def test_route_through_foreign_fence_rejected(tmp_path):
    spec = FleetSpec(ports=[PortSpec("A", 0.0, 0.0), PortSpec("B", 10.0, 0.0), PortSpec("C", 5.0, 0.0)],
                     vessels=[VesselSpec("1", loop=["A", "B"])], duration_days=10)
    with pytest.raises(SpecError, match="enters the geofence of C"):
        generate(spec, tmp_path)


@pytest.mark.parametrize("bad", [
    dict(branch_prob=1.5),
    dict(vessels=[VesselSpec("1", loop=["A", "Z"])]),
    dict(vessels=[VesselSpec("1", loop=["A"])]),
    dict(vessels=[VesselSpec("1", regime="evolving", loop=["A", "B"])]),
    dict(report_minutes=48 * 60),
])
def test_spec_validation(bad):
    kw = dict(ports=[PortSpec("A", 0.0, 0.0), PortSpec("B", 6.0, 0.0)],
              vessels=[VesselSpec("1", loop=["A", "B"])])
    kw.update(bad)
    with pytest.raises(SpecError):
        FleetSpec(**kw)


def test_json_round_trip(tmp_path):
    spec = mixed_fleet()
    spec.to_json(tmp_path / "fleet.json")
    assert FleetSpec.from_json(tmp_path / "fleet.json") == spec
    assert set(PRESETS) == {"cyclic", "shuttle", "mixed"}
