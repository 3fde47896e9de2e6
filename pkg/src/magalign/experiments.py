"""End-to-end runs driven by a RunConfig: training, diagnostics, oracles, sweeps, seeds."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import resource
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import oracles
from .config import SCHEMA_VERSION, RunConfig, parse_override, _apply, ConfigError, validate
from .data import MagDataset, generate_synthetic, load_dataset, randomize_edges
from .evaluation import depth_sweep, hard_query_support, knn_overlap, neighbor_purity, retrieval_metrics
from .model import MODALITIES, adapt, embed, forward, new_params
from .readout import selected_depth
from .tensor import make_rng
from .topology import CandidateGraphs, build_candidates
from .training import multi_seed_run, train

log = logging.getLogger(__name__)


def clean_json(obj):
    """Replace non-finite floats by None and numpy scalars by Python ones."""
    if isinstance(obj, dict):
        return {str(k): clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean_json(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dump_json(obj, path: Path) -> None:
    text = json.dumps(clean_json(obj), sort_keys=True, indent=2, allow_nan=False)
    path.write_text(text + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _resources(start: float) -> str:
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
    return f"wall={time.perf_counter() - start:.2f}s peak_rss={rss:.1f}MiB"


# --- pipeline pieces -------------------------------------------------------------

def load_data(cfg: RunConfig) -> MagDataset:
    ds = cfg.dataset
    if ds.source == "synthetic":
        return generate_synthetic(cfg.synth_config(), cfg.split_config())
    return load_dataset(ds.features_v, ds.features_t, ds.edges, cfg.split_config(), ds.categories or None)


@dataclass
class Prepared:
    ds: MagDataset
    graphs: CandidateGraphs
    info: dict


def prepare(cfg: RunConfig) -> Prepared:
    """Dataset, optional edge perturbation, and candidate graphs for one run."""
    ds = load_data(cfg)
    info = {"n": ds.n, "structural_edges": int(len(ds.edges)),
            "split": {s: int(len(ds.nodes(s))) for s in ("train", "val", "test")}}
    mode = cfg.control.randomize_edges
    if mode != "none":
        ds = randomize_edges(ds, mode, make_rng(cfg.train.seed))
        info["randomized_edges"] = mode
        info["edge_stats"] = dict(ds.edge_stats)
    model_cfg = cfg.model_config()
    if cfg.candidates.knn_features == "adapted" or ds.features_v.shape[1] != ds.features_t.shape[1]:
        fv, ft = adapt(new_params(ds, model_cfg, cfg.train.seed), ds.features_v, ds.features_t)
        info["knn_features"] = "adapted"
    else:
        fv, ft = ds.features_v, ds.features_t
        info["knn_features"] = "frozen"
    c = cfg.candidates
    graphs = build_candidates(ds, fv, ft, c.k_intra, c.k_cross, c.mode,
                              allow_self_pairs=cfg.control.allow_self_pair_edges,
                              only_self_pairs=cfg.control.only_self_pair_edges)
    info["candidate_edges"] = {ch: len(graphs[ch]) for ch in ("v", "t", "vt", "tv")}
    return Prepared(ds, graphs, info)


def run_experiment(cfg: RunConfig, out_dir=None) -> dict:
    """Train with the configured switches and report test retrieval from the selected checkpoint."""
    start = time.perf_counter()
    prep = prepare(cfg)
    ds, graphs = prep.ds, prep.graphs
    model_cfg = cfg.model_config()
    result = train(ds, graphs, model_cfg, cfg.loss_weights(), cfg.train_config())
    best = result.best
    z_v, z_t = embed(best.params, ds.features_v, ds.features_t, graphs, model_cfg)
    test = ds.nodes("test")
    gallery = np.arange(ds.n) if cfg.eval.full_gallery else test
    report = retrieval_metrics(z_v, z_t, test, gallery, label="test")
    results = {
        "schema_version": SCHEMA_VERSION,
        "protocol": cfg.protocol,
        "config": cfg.to_dict(),
        "data": prep.info,
        "checkpoint": {"epoch": best.epoch, "metric": cfg.train.metric, "value": best.metric},
        "epochs_run": max(e["epoch"] for e in result.log),
        "aborted": result.aborted,
        "test": report.to_dict(),
        "gallery": "all" if cfg.eval.full_gallery else "test",
    }
    log.info("run finished: %s", _resources(start))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_json(results, out / "results.json")
        with (out / "train_log.jsonl").open("w") as fh:
            for entry in result.log:
                fh.write(json.dumps(clean_json(entry), sort_keys=True) + "\n")
        (out / "resolved_config.toml").write_text(cfg.to_toml())
        if model_cfg.propagate and model_cfg.readout.adaptive:
            fw = forward(best.params, ds.features_v, ds.features_t, graphs, model_cfg, need_operators=False)
            sel = selected_depth(fw.traj, {m: best.params.readout(m) for m in MODALITIES})
            names = np.array(["train", "val", "test"])[ds.split]
            _write_csv(out / "selected_depth.csv", ["node", "split", "depth_v", "depth_t"],
                       zip(range(ds.n), names, sel["v"].tolist(), sel["t"].tolist()))
    return results


def run_diagnostics(cfg: RunConfig, out_dir=None) -> dict:
    """kNN overlap, neighbour purity, frozen-feature depth sweep and hard-query support."""
    ds = load_data(cfg)
    d = cfg.diagnostics
    report: dict = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), "n": ds.n}
    overlap = knn_overlap(ds.features_v, ds.features_t, d.k)
    report["knn_overlap"] = {"k": d.k, "mean": overlap["mean"], "median": overlap["median"]}
    if ds.categories is None:
        report["purity"] = {"available": False, "notice": "no category ids; purity disabled"}
        log.warning("dataset has no categories; neighbour purity disabled")
    else:
        report["purity"] = {"available": True, "k": d.k,
                            **{src: neighbor_purity(ds, src, d.k) for src in ("structural", "knn_v", "knn_t")}}
    same_width = ds.features_v.shape[1] == ds.features_t.shape[1]
    if same_width:
        sweep = depth_sweep(ds, d.depths)
        report["depth_sweep"] = {"available": True, **sweep.to_dict()}
        report["hard_queries"] = {"available": True, **hard_query_support(
            ds, sim_quantile=d.sim_quantile, support_quantile=d.support_quantile)}
    else:
        note = "feature widths differ; paired similarity on frozen features is undefined"
        report["depth_sweep"] = {"available": False, "notice": note}
        report["hard_queries"] = {"available": False, "notice": note}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_json(report, out / "diagnostics.json")
        _write_csv(out / "knn_overlap.csv", ["node", "overlap"], enumerate(overlap["per_node"].tolist()))
        if report["depth_sweep"]["available"]:
            ds_rep = report["depth_sweep"]
            rows = zip(ds_rep["depths"], ds_rep["mean_rank"], ds_rep["separation"])
            _write_csv(out / "depth_sweep.csv", ["depth", "mean_rank", "separation"], rows)
            _write_csv(out / "depth_sweep_meanr.csv", ["depth", "mean_rank"],
                       zip(ds_rep["depths"], ds_rep["mean_rank"]))
        if report["purity"]["available"]:
            _write_csv(out / "purity.csv", ["source", "purity"],
                       [(s, report["purity"][s]) for s in ("structural", "knn_v", "knn_t")])
    return report


def run_oracles(cfg: RunConfig, out_dir=None) -> dict:
    o = cfg.oracles
    report = oracles.run_all(n=o.n, dim=o.dim, alphas=tuple(o.alphas), betas=tuple(o.betas), trials=o.trials,
                             gap_steps=o.gap_steps, collapse_steps=o.collapse_steps, seed=o.seed)
    report = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), **report}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_json(report, out / "oracles.json")
    return report


def with_overrides(cfg: RunConfig, overrides) -> RunConfig:
    new = copy.deepcopy(cfg)
    problems: list = []
    for text in overrides:
        section, key, value = parse_override(text)
        _apply(new, section, key, value, problems)
    problems += validate(new)
    if problems:
        raise ConfigError(problems)
    return new


SUMMARY_KEYS = ("r1", "r5", "r10", "mrr", "mean_rank")


def _summary(results: dict) -> dict:
    return {k: results["test"]["avg"][k] for k in SUMMARY_KEYS}


def run_sweep(cfg: RunConfig, out_dir=None) -> dict:
    """One run per value of ``sweep.parameter``; each run's files land in its own subdirectory."""
    param = cfg.sweep.parameter
    rows = []
    for value in cfg.sweep.values:
        run_cfg = with_overrides(cfg, [f"{param}={json.dumps(value)}"])
        sub = None if out_dir is None else Path(out_dir) / f"{param}={value}"
        res = run_experiment(run_cfg, sub)
        rows.append({"value": value, **_summary(res)})
    report = {"schema_version": SCHEMA_VERSION, "parameter": param, "config": cfg.to_dict(), "runs": rows}
    if out_dir is not None:
        out = Path(out_dir)
        dump_json(report, out / "sweep.json")
        _write_csv(out / "sweep.csv", ["value", *SUMMARY_KEYS], [[r["value"], *(r[k] for k in SUMMARY_KEYS)]
                                                                for r in rows])
    return report


def run_multiseed(cfg: RunConfig, out_dir=None) -> dict:
    def one(seed):
        run_cfg = with_overrides(cfg, [f"train.seed={seed}"])
        sub = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
        return _summary(run_experiment(run_cfg, sub))

    agg = multi_seed_run(list(cfg.multiseed.seeds), one)
    report = {"schema_version": SCHEMA_VERSION, "protocol": cfg.protocol, "config": cfg.to_dict(), **agg}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_json(report, out / "multiseed.json")
    return report
