"""``tedge <stage> --config PATH [--seed N] [--out DIR]``

Stages, in order, and the files they write under ``--out``:

    gen-topology  topology.json
    gen-trace     trace.csv            (synthetic M-Zipf workload)
    ingest        trace.csv            (MovieLens ratings file)
    prepare       dataset.bin
    train         model.ckpt, train_metrics.json
    eval          metrics.json
    simulate      results.csv, intervals.csv
    report        report.csv, report.json

Each stage also writes ``<stage>.manifest.json`` with the resolved config,
seed, package version and SHA-256 of every input and output file. ``all``
runs the whole chain. The seed comes from ``--seed``, then ``TEDGE_SEED``,
then ``training.seed``.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .cachesim import (
    hit_ratio_report,
    intervals_csv,
    label_predictor,
    results_csv,
    simulate_optimal,
    simulate_predictive,
    simulate_reactive,
)
from .config import ConfigError, load_config, model_config, set_key, slot_horizon, validate
from .pipeline import Dataset, build_dataset, read_dataset, window_counts, write_dataset
from .topology import RankShuffle, Topology, ZipfModel, default_topology, generate_synthetic_trace
from .trace import assign_requests_to_nodes, make_log, parse_trace, write_events_csv
from .vit import (
    PRESETS,
    count_params,
    evaluate,
    load_checkpoint,
    model_predictor,
    preset_model,
    save_checkpoint,
    train,
)

log = logging.getLogger("tedge")

STAGES = ("gen-topology", "gen-trace", "ingest", "prepare", "train", "eval", "simulate", "report")

FILES = {
    "topology": "topology.json",
    "trace": "trace.csv",
    "dataset": "dataset.bin",
    "model": "model.ckpt",
    "train_metrics": "train_metrics.json",
    "metrics": "metrics.json",
    "results": "results.csv",
    "intervals": "intervals.csv",
    "report_csv": "report.csv",
    "report_json": "report.json",
}

# distinct random streams per stage, all derived from the one seed
_STREAM = {"gen-topology": 1, "gen-trace": 2}


class StageError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Run:
    """One stage invocation: resolved config, seed and output directory."""

    def __init__(self, config: dict, seed: int, out: Path):
        self.config = config
        self.seed = seed
        self.out = out
        self.inputs: list[str] = []
        self.outputs: list[str] = []

    def path(self, key: str) -> Path:
        return self.out / FILES[key]

    def need(self, key: str, stage: str) -> Path:
        p = self.path(key)
        if not p.is_file():
            raise StageError(f"{p.name} not found in {self.out}: run {stage} first")
        self.inputs.append(p.name)
        return p

    def write(self, key: str, data: str | bytes) -> Path:
        p = self.path(key)
        if isinstance(data, str):
            data = data.encode()
        p.write_bytes(data)
        self.outputs.append(p.name)
        return p

    def rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, _STREAM[stage]])

    def manifest(self, stage: str, extra: dict | None = None) -> None:
        doc = {
            "stage": stage,
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "inputs": {n: _sha256(self.out / n) for n in sorted(set(self.inputs))},
            "outputs": {n: _sha256(self.out / n) for n in sorted(set(self.outputs))},
        }
        if extra:
            doc["summary"] = extra
        (self.out / f"{stage}.manifest.json").write_text(_json_dump(doc))


# --- stages ----------------------------------------------------------------------


def stage_gen_topology(run: Run) -> dict:
    t = run.config["topology"]
    topo = default_topology(
        rng_seed=run.rng("gen-topology"),
        n_users=t["n_users"],
        area=tuple(t["area"]),
        expected_faps=t["expected_faps"],
        n_uavs=t["n_uavs"],
        fap_range=t["fap_range"],
        uav_range=t["uav_range"],
    )
    run.write("topology", topo.to_json() + "\n")
    return {"n_faps": len(topo.faps), "n_uavs": len(topo.uavs), "n_users": len(topo.ues)}


def _load_topology(run: Run) -> Topology:
    return Topology.from_json(run.need("topology", "gen-topology").read_text())


def stage_gen_trace(run: Run) -> dict:
    w = run.config["workload"]
    if w["source"] != "synthetic":
        raise StageError("workload.source is not 'synthetic'; use the ingest stage")
    n_users = w["n_users"]
    if run.config["pipeline"]["node"] is not None and n_users is None:
        # users must have positions for node assignment
        n_users = len(_load_topology(run).ues)
        if n_users < w["requests_per_slot"]:
            raise StageError("topology has fewer users than workload.requests_per_slot")
    drift = RankShuffle(w["drift_period"]) if w["drift_period"] else None
    trace = generate_synthetic_trace(
        ZipfModel(w["n_contents"], w["gamma"], w["zeta"]),
        w["n_slots"],
        w["requests_per_slot"],
        drift=drift,
        rng_seed=run.rng("gen-trace"),
        n_users=n_users,
        slot_seconds=w["slot_seconds"],
    )
    buf = io.StringIO()
    write_events_csv(trace, buf)
    run.write("trace", buf.getvalue())
    return {"events": len(trace.events)}


def stage_ingest(run: Run) -> dict:
    w = run.config["workload"]
    if w["source"] != "movielens" or w["path"] is None:
        raise StageError("ingest needs workload.source='movielens' and workload.path")
    with open(w["path"], "rb") as f:
        trace = parse_trace(f, "movielens_tsv", slot_seconds=w["slot_seconds"])
    buf = io.StringIO()
    write_events_csv(trace, buf)
    run.write("trace", buf.getvalue())
    return {"events": len(trace.events), "duplicates_dropped": trace.n_duplicates, "catalog_size": trace.catalog_size}


def _request_log(run: Run):
    """The request log one cache serves, on the pipeline's slot length."""
    cfg = run.config
    p, w = cfg["pipeline"], cfg["workload"]
    with open(run.need("trace", "gen-trace (or ingest)"), "rb") as f:
        parsed = parse_trace(f, "events_csv", slot_seconds=p["slot_seconds"])
    if w["source"] == "synthetic":
        trace = make_log(parsed.events, p["slot_seconds"], w["n_contents"], slot_horizon(cfg), origin=0)
    else:
        trace = parsed
    dropped = 0
    if p["node"] is not None:
        topo = _load_topology(run)
        assignment = assign_requests_to_nodes(trace, topo)
        if p["node"] > len(assignment.logs):
            raise StageError(f"pipeline.node={p['node']} but the topology has {len(assignment.logs)} hgNBs")
        trace, dropped = assignment.logs[p["node"] - 1], assignment.n_dropped
    if p["k"] > trace.catalog_size:
        raise StageError(f"pipeline.k={p['k']} exceeds the trace catalog size {trace.catalog_size}")
    if p["window_len"] > trace.horizon:
        raise StageError(f"pipeline.window_len={p['window_len']} exceeds the trace horizon {trace.horizon}")
    return trace, dropped


def stage_prepare(run: Run) -> dict:
    p = run.config["pipeline"]
    trace, dropped = _request_log(run)
    Rw = window_counts(trace, p["window_len"])
    if p["history_len"] >= Rw.n_windows:
        raise StageError(f"pipeline.history_len={p['history_len']} must be < N_W={Rw.n_windows}")
    ds = build_dataset(Rw, p["history_len"], p["k"], p["gaf_scale"], node_id=p["node"] or 0)
    buf = io.BytesIO()
    write_dataset(ds, buf)
    run.write("dataset", buf.getvalue())
    return {"events": len(trace.events), "dropped": dropped, "windows": Rw.n_windows, "samples": len(ds)}


def _splits(run: Run) -> tuple[Dataset, Dataset]:
    with open(run.need("dataset", "prepare"), "rb") as f:
        ds = read_dataset(f, run.config["pipeline"]["gaf_scale"])
    train_ds, test_ds = ds.split(run.config["training"]["train_fraction"])
    return train_ds, test_ds


def stage_train(run: Run) -> dict:
    tr = run.config["training"]
    train_ds, _ = _splits(run)
    train_ds = replace(train_ds, samples=train_ds.samples[:: tr["sample_stride"]])
    config = model_config(run.config)
    model, history = train(
        train_ds,
        config,
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        lr=tr["lr"],
        seed=run.seed,
        val_fraction=tr["val_fraction"],
        betas=tuple(tr["betas"]),
        weight_decay=tr["weight_decay"],
    )
    buf = io.BytesIO()
    save_checkpoint(model, buf)
    run.write("model", buf.getvalue())
    run.write("train_metrics", _json_dump({"n_params": model.n_params, "epochs": history}))
    return {"train_samples": len(train_ds), "n_params": model.n_params}


def _load_model(run: Run):
    with open(run.need("model", "train"), "rb") as f:
        return load_checkpoint(f)


def stage_eval(run: Run) -> dict:
    _, test_ds = _splits(run)
    if len(test_ds) == 0:
        raise StageError("the test split is empty; lower training.train_fraction")
    model = _load_model(run)
    metrics = evaluate(model, test_ds)
    metrics.update({"test_samples": len(test_ds), "first_update_window": test_ds.samples[0].t_u})
    run.write("metrics", _json_dump(metrics))
    return metrics


def stage_simulate(run: Run) -> dict:
    cfg = run.config
    p, s = cfg["pipeline"], cfg["simulation"]
    _, test_ds = _splits(run)
    if len(test_ds) == 0:
        raise StageError("the test split is empty; lower training.train_fraction")
    score_from = test_ds.samples[0].t_u  # every policy is scored on the held-out windows only
    cap = s["capacity"] if s["capacity"] is not None else p["k"]
    trace, _ = _request_log(run)
    W, l = p["window_len"], p["history_len"]
    Rw = window_counts(trace, W).data
    results = []
    for policy in s["policies"]:
        if policy == "optimal":
            results.append(simulate_optimal(trace, W, cap, score_from=score_from))
        elif policy == "tedge":
            predictor = model_predictor(_load_model(run), cap)
            results.append(simulate_predictive(trace, predictor, W, l, cap, score_from, "tedge", Rw))
        elif policy == "label":
            results.append(simulate_predictive(trace, label_predictor(cap), W, l, cap, score_from, "label", Rw))
        else:
            results.append(simulate_reactive(trace, policy, cap, W, score_from=score_from))
    run.write("results", results_csv(results))
    run.write("intervals", intervals_csv(results))
    return {r.policy: round(r.hit_ratio, 6) for r in results}


def stage_report(run: Run) -> dict:
    import csv

    rows = list(csv.DictReader(io.StringIO(run.need("results", "simulate").read_text())))
    ratio = lambda r: int(r["hits"]) / int(r["events"]) if int(r["events"]) else 0.0
    opt = next((ratio(r) for r in rows if r["policy"] == "optimal"), None)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["policy", "K", "hit_ratio", "ratio_to_optimal"])
    for r in rows:
        h = ratio(r)
        w.writerow([r["policy"], r["K"], f"{h:.6f}", f"{h / opt:.6f}" if opt else ""])
    # the unconstrained bound: every request served at the edge
    w.writerow(["serve_all", "", "1.000000", f"{1 / opt:.6f}" if opt else ""])
    run.write("report_csv", out.getvalue())
    doc = {"results": rows}
    mp = run.path("metrics")
    if mp.is_file():
        run.inputs.append(mp.name)
        doc["metrics"] = json.loads(mp.read_text())
    run.write("report_json", _json_dump(doc))
    print(out.getvalue(), end="")
    return {}


HANDLERS = {
    "gen-topology": stage_gen_topology,
    "gen-trace": stage_gen_trace,
    "ingest": stage_ingest,
    "prepare": stage_prepare,
    "train": stage_train,
    "eval": stage_eval,
    "simulate": stage_simulate,
    "report": stage_report,
}


def resolve_seed(cli_seed: int | None, config: dict) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("TEDGE_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"TEDGE_SEED must be an integer, got {env!r}") from None
    return config["training"]["seed"]


def _config_path(arg: str | None):
    if arg == "toy" and not Path(arg).exists():
        return resources.files("tedge") / "data" / "toy.json"
    return arg


def run_stage(stage: str, config: dict, out: str | Path, seed: int | None = None) -> dict:
    """Run one stage (or ``all``) with an already loaded config."""
    validate(config)
    seed = resolve_seed(seed, config)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    chain = [stage] if stage != "all" else _chain(config)
    summary = {}
    for st in chain:
        log.info("stage %s, seed %d, config %s", st, seed, json.dumps(config, sort_keys=True))
        run = Run(config, seed, out)
        summary[st] = HANDLERS[st](run)
        run.manifest(st, summary[st])
    return summary


def _chain(config: dict) -> list[str]:
    chain = []
    if config["pipeline"]["node"] is not None:
        chain.append("gen-topology")
    chain.append("gen-trace" if config["workload"]["source"] == "synthetic" else "ingest")
    chain += ["prepare", "train", "eval", "simulate", "report"]
    return chain


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tedge", description="Edge-caching benchmark with a ViT popularity predictor.")
    sub = parser.add_subparsers(dest="stage", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file ('toy' selects the bundled toy config)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="runs", help="artifact directory (default: runs)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")
    for st in STAGES + ("all",):
        sub.add_parser(st, parents=[common])
    pre = sub.add_parser("preset", help="print a preset model variant")
    pre.add_argument("model_id", type=int, choices=sorted(PRESETS))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.stage == "preset":
        try:
            cfg = preset_model(args.model_id)
        except ValueError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(_json_dump({**cfg.to_dict(), "n_params": count_params(cfg)}), end="")
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = load_config(_config_path(args.config))
        for item in args.set:
            config = set_key(config, item)
        run_stage(args.stage, config, args.out, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
