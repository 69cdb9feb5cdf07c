"""Pipeline stages as subcommands.

Every stage reads plain files from the working directory, writes its
artifacts there and leaves a ``<stage>.manifest.json`` with input and output
hashes plus the resolved configuration.

Exit codes: 0 ok, 2 missing input, 3 bad config, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .dataset import (AssemblyReport, CategoricalCodes, SplitTooSmallError, assemble_segments,
                      build_history_db, chronological_split, fit_normalization, load_static_table,
                      normalize, read_segments, write_segments)
from .graph import build_vocabulary, load_edgelist, save_edgelist, PortVocabulary
from .metrics import frequency_strata
from .model import ModelConfig, PortSequenceModel, make_retriever, top_k
from .pipeline import graph_from_segments, load_fences, segment_ais
from .retrieval import HistoryDB, diagnostics_record
from .synth import PRESETS, FleetSpec, SpecError, generate
from .training import NumericalError, TrainConfig, batches, evaluate_model, fit

logger = logging.getLogger("portseq")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


class MissingInput(Exception):
    pass


class ConfigError(Exception):
    pass


DEFAULTS = {
    "ais_dir": "data/ais", "geofences": "data/geofences.csv", "ports": "data/ports.csv",
    "static": "data/static.csv", "workdir": "work", "seed": 0,
    "k": 3, "horizon": 3, "alpha": 0.5, "tau_r": 1.0, "top_n": 3,
    "d_enc": 64, "d_r": 64, "d_fuse": 64, "d_ff": 128, "heads": 4,
    "encoder_layers": 2, "decoder_layers": 2, "dropout": 0.1, "tau": 1.0,
    "epochs": 50, "batch_size": 64, "lr": 1e-4, "weight_decay": 1e-5, "epsilon": 0.1,
    "plateau_factor": 0.5, "patience": 3,
}
INT_KEYS = {"seed", "k", "horizon", "top_n", "d_enc", "d_r", "d_fuse", "d_ff", "heads",
            "encoder_layers", "decoder_layers", "epochs", "batch_size", "patience"}
FLOAT_KEYS = {"alpha", "tau_r", "dropout", "tau", "lr", "weight_decay", "epsilon", "plateau_factor"}


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_").lower()
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(f"config file {path} not found")
        cfg.update(parse_config(path.read_text()))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    try:
        for key in INT_KEYS:
            cfg[key] = int(cfg[key])
        for key in FLOAT_KEYS:
            cfg[key] = float(cfg[key])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["k"] < 1 or cfg["horizon"] < 1:
        raise ConfigError("k and horizon must be >= 1")
    if not 0.0 <= cfg["alpha"] <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    if cfg["tau_r"] <= 0 or cfg["tau"] <= 0:
        raise ConfigError("temperatures must be positive")
    return cfg


# ---------------------------------------------------------------- manifests


def file_hash(path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(workdir: Path, stage: str, inputs, outputs, cfg: dict):
    manifest = {
        "stage": stage,
        "inputs": {str(p): file_hash(p) for p in inputs},
        "outputs": {str(p): file_hash(p) for p in outputs},
        "config": cfg,
    }
    (workdir / f"{stage}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def require(*paths, hint=""):
    for p in paths:
        if not Path(p).exists():
            raise MissingInput(f"{p} not found{'; ' + hint if hint else ''}")


# ---------------------------------------------------------------- shared loaders


def _work(cfg, create=False) -> Path:
    w = Path(cfg["workdir"])
    if create:
        w.mkdir(parents=True, exist_ok=True)
    return w


def load_meta(work: Path):
    require(work / "meta.json", hint="run `segment` first")
    meta = json.loads((work / "meta.json").read_text())
    vocab = build_vocabulary(meta["ports"])
    return meta, vocab


def load_splits(work: Path, vocab: PortVocabulary):
    require(work / "segments.jsonl", hint="run `segment` first")
    segs = read_segments(work / "segments.jsonl", vocab)
    parts = {"train": [], "val": [], "test": []}
    for s in segs:
        parts[s.split].append(s)
    return parts


def model_config(cfg, meta) -> ModelConfig:
    return ModelConfig(
        n_ports=len(meta["ports"]), K=cfg["k"], H=cfg["horizon"], d_enc=cfg["d_enc"], d_r=cfg["d_r"],
        d_fuse=cfg["d_fuse"], d_ff=cfg["d_ff"], heads=cfg["heads"],
        encoder_layers=cfg["encoder_layers"], decoder_layers=cfg["decoder_layers"],
        top_n=cfg["top_n"], alpha=cfg["alpha"], tau_r=cfg["tau_r"], tau=cfg["tau"],
        dropout=cfg["dropout"], n_imo=meta["n_imo"], n_carrier=meta["n_carrier"], seed=cfg["seed"])


# ---------------------------------------------------------------- stages


def cmd_synth(args, cfg):
    out = Path(args.out)
    if args.spec:
        require(args.spec)
        try:
            spec = FleetSpec.from_json(args.spec)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{args.spec}: {exc}") from exc
        inputs = [args.spec]
    else:
        spec = PRESETS[args.preset](seed=cfg["seed"])
        inputs = []
    fleet = generate(spec, out)
    outputs = [fleet.ais_dir, fleet.geofences, fleet.ports, fleet.static, out / "itineraries.json"]
    write_manifest(out, "synth", inputs, outputs, {"seed": spec.seed, "preset": args.preset if not args.spec else None})
    print(f"wrote {len(spec.vessels)} vessel stream(s) to {fleet.ais_dir}")


def cmd_segment(args, cfg):
    require(cfg["ais_dir"], cfg["geofences"], cfg["static"], hint="check the data paths or run `synth`")
    work = _work(cfg, create=True)
    fences = load_fences(cfg["geofences"], cfg["ports"])
    vocab = build_vocabulary(fences.port_names())
    static = load_static_table(cfg["static"])
    codes = CategoricalCodes.from_static(static)
    report = AssemblyReport()
    segs = assemble_segments(segment_ais(cfg["ais_dir"], fences), static, vocab, codes,
                             cfg["k"], cfg["horizon"], report)
    try:
        split = chronological_split(segs)
    except SplitTooSmallError as exc:
        raise MissingInput(f"too few voyage segments in {cfg['ais_dir']}: {exc}") from exc
    stats = fit_normalization(split.train)
    ordered = normalize(split.train, stats) + normalize(split.val, stats) + normalize(split.test, stats)
    write_segments(work / "segments.jsonl", ordered, vocab)
    meta = {"ports": list(vocab.names), "imo_codes": codes.imo, "carrier_codes": codes.carrier,
            "n_imo": codes.n_imo, "n_carrier": codes.n_carrier, "K": cfg["k"], "H": cfg["horizon"],
            "normalization": stats.as_dict(), "assembly": report.as_dict(),
            "split_sizes": [len(split.train), len(split.val), len(split.test)]}
    (work / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    inputs = [cfg["ais_dir"], cfg["geofences"], cfg["static"]] + ([cfg["ports"]] if Path(cfg["ports"]).exists() else [])
    write_manifest(work, "segment", inputs, [work / "segments.jsonl", work / "meta.json"], cfg)
    print(f"{len(ordered)} segments ({len(split.train)}/{len(split.val)}/{len(split.test)}) -> {work / 'segments.jsonl'}")


def cmd_build_graph(args, cfg):
    work = _work(cfg)
    meta, vocab = load_meta(work)
    parts = load_splits(work, vocab)
    graph = graph_from_segments(parts["train"], vocab)
    save_edgelist(graph, work / "graph.tsv")
    write_manifest(work, "build-graph", [work / "segments.jsonl"], [work / "graph.tsv"], cfg)
    print(f"{len(graph.edge_list())} edges over {graph.size} ports -> {work / 'graph.tsv'}")


def cmd_build_history(args, cfg):
    work = _work(cfg)
    meta, vocab = load_meta(work)
    parts = load_splits(work, vocab)
    db = build_history_db(parts["train"], meta["K"], meta["H"], sentinel=vocab.sentinel)
    db.to_jsonl(work / "history.jsonl")
    write_manifest(work, "build-history", [work / "segments.jsonl"], [work / "history.jsonl"], cfg)
    print(f"{len(db)} scenarios -> {work / 'history.jsonl'}")


def _graph_and_db(work):
    require(work / "graph.tsv", hint="run `build-graph` first")
    require(work / "history.jsonl", hint="run `build-history` first")
    return load_edgelist(work / "graph.tsv"), HistoryDB.from_jsonl(work / "history.jsonl")


def cmd_train(args, cfg):
    work = _work(cfg)
    meta, vocab = load_meta(work)
    parts = load_splits(work, vocab)
    graph, db = _graph_and_db(work)
    if meta["K"] != cfg["k"] or meta["H"] != cfg["horizon"]:
        raise ConfigError(f"segments were built with K={meta['K']}, H={meta['H']}; re-run `segment`")
    model = PortSequenceModel(model_config(cfg, meta))
    tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       weight_decay=cfg["weight_decay"], epsilon=cfg["epsilon"],
                       plateau_factor=cfg["plateau_factor"], patience=cfg["patience"], seed=cfg["seed"])
    ckpt = work / "model.ckpt"
    fit(model, parts["train"], parts["val"], graph, db, tcfg, log_path=work / "train_log.csv",
        checkpoint_path=ckpt)
    write_manifest(work, "train", [work / "segments.jsonl", work / "graph.tsv", work / "history.jsonl"],
                   [ckpt, work / "train_log.csv"], cfg)
    print(f"checkpoint -> {ckpt}")


def _load_model(work, args):
    path = Path(args.checkpoint) if args.checkpoint else work / "model.ckpt"
    require(path, hint="run `train` first")
    try:
        model, _ = PortSequenceModel.load(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return model, path


def cmd_evaluate(args, cfg):
    work = _work(cfg)
    meta, vocab = load_meta(work)
    parts = load_splits(work, vocab)
    graph, db = _graph_and_db(work)
    model, path = _load_model(work, args)
    strata = frequency_strata([s.future_ports for s in parts["train"]], vocab.sentinel) if args.strata else None
    report = evaluate_model(model, parts[args.split], graph, make_retriever(model, db), strata)
    out = work / f"metrics_{args.split}.json"
    out.write_text(report.to_json() + "\n")
    write_manifest(work, "evaluate", [path, work / "segments.jsonl"], [out], cfg)
    print(report.table())


def cmd_predict(args, cfg):
    work = _work(cfg)
    meta, vocab = load_meta(work)
    parts = load_splits(work, vocab)
    graph, db = _graph_and_db(work)
    model, path = _load_model(work, args)
    segs = [s for s in parts[args.split] if args.imo is None or s.imo == args.imo]
    if not segs:
        raise MissingInput(f"no {args.split} segments{' for IMO ' + args.imo if args.imo else ''}")
    retrieve = make_retriever(model, db)
    out = work / "predictions.jsonl"
    with open(out, "w") as fh:
        for batch in batches(segs, 256):
            preds, det = model.greedy_decode(batch, graph, retrieve, return_details=True)
            for i, seg in enumerate(batch.segments):
                steps = []
                for h in range(model.config.H):
                    probs = det["probs"][h][i]
                    step = {
                        "step": h + 1,
                        "port": vocab.name(int(preds[i, h])),
                        "feasible": len(det["masks"][h][i]),
                        "fallback": det["masks"][h][i].fallback,
                        "top5": [[vocab.name(p), round(q, 6)] for p, q in top_k(probs, 5)],
                    }
                    if args.dump_retrieval:
                        step["retrieval"] = diagnostics_record(det["queries"][h][i], det["retrieved"][h][i])
                    steps.append(step)
                fh.write(json.dumps({
                    "imo": seg.imo, "origin": vocab.name(seg.origin),
                    "predicted": [vocab.name(int(p)) for p in preds[i]],
                    "actual": [vocab.name(int(p)) for p in seg.future_ports],
                    "steps": steps,
                }) + "\n")
    write_manifest(work, "predict", [path, work / "segments.jsonl"], [out], cfg)
    print(f"{len(segs)} forecast(s) -> {out}")


COMMANDS = {
    "synth": cmd_synth, "segment": cmd_segment, "build-graph": cmd_build_graph,
    "build-history": cmd_build_history, "train": cmd_train, "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workdir")
    common.add_argument("--k", type=int)
    common.add_argument("--horizon", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--tau-r", dest="tau_r", type=float)
    common.add_argument("--top-n", dest="top_n", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="portseq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic fleet")
    p.add_argument("--spec", help="fleet spec JSON")
    p.add_argument("--preset", choices=sorted(PRESETS), default="cyclic")
    p.add_argument("--out", default="data")
    sub.add_parser("segment", parents=[common], help="AIS streams to voyage segments")
    sub.add_parser("build-graph", parents=[common], help="port adjacency from the training split")
    sub.add_parser("build-history", parents=[common], help="retrieval database from the training split")
    sub.add_parser("train", parents=[common], help="fit the model")
    p = sub.add_parser("evaluate", parents=[common], help="accuracy report")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--strata", action="store_true", help="add head/body/tail breakdown")
    p = sub.add_parser("predict", parents=[common], help="JSON-lines forecasts")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--imo")
    p.add_argument("--dump-retrieval", action="store_true", help="include retrieval diagnostics")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
