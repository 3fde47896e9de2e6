"""Adam optimization loop with warm-up, validation checkpointing and multi-seed runs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import MagDataset
from .evaluation import retrieval_metrics
from .model import ModelConfig, ModelParams, embed, new_params
from .objective import LossWeights, NonFiniteLoss, sample_negatives, total_loss_and_grad
from .tensor import make_rng
from .topology import CandidateGraphs

log = logging.getLogger(__name__)

METRICS = {"r10": "r10", "r1": "r1", "mrr": "mrr"}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 512
    epochs: int = 60
    warmup: int = 5
    metric: str = "r10"
    seed: int = 43
    patience: int = 15

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.warmup > self.epochs:
            raise ValueError("warm-up epochs exceed total epochs")
        if self.metric == "weighted_recall":
            raise ValueError("weighted recall is not available; use r10, r1 or mrr")
        if self.metric not in METRICS:
            raise ValueError(f"unknown checkpoint metric {self.metric!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


class Adam:
    """Bias-corrected Adam with a per-parameter step counter, applied in a fixed key order."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params: ModelParams, lr: float, keys=None) -> None:
        for k in (keys if keys is not None else list(params.values)):
            g = params.grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
                self.t[k] = 0
            self.t[k] += 1
            adam_step(params.values[k], g, self.m[k], self.v[k], lr, self.beta1, self.beta2, self.eps, self.t[k])


def adam_step(p, g, m, v, lr, beta1, beta2, eps, t) -> None:
    """In-place Adam update of ``p`` and its moment buffers ``m``, ``v`` at step ``t`` >= 1."""
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Checkpoint:
    epoch: int
    params: ModelParams
    metric: float


@dataclass
class TrainResult:
    best: Checkpoint
    log: list = field(default_factory=list)
    aborted: str | None = None


def trainable_keys(params: ModelParams, cfg: ModelConfig, warmup: bool) -> list:
    keys = params.group("adapter.")
    if warmup:
        return keys
    if cfg.learn_topology:
        keys += params.group("scorer.")
    if cfg.propagate and cfg.readout.adaptive:
        keys += params.group("readout.")
    return keys


def validate(params, ds: MagDataset, graphs, cfg: ModelConfig, metric: str):
    z_v, z_t = embed(params, ds.features_v, ds.features_t, graphs, cfg)
    report = retrieval_metrics(z_v, z_t, ds.nodes("val"), label="val")
    return getattr(report.avg, METRICS[metric]), report


def _rank_key(metric: float, report) -> tuple:
    # recall saturates on small validation sets; MRR breaks ties between checkpoints
    return metric, report.avg.mrr


def train(ds: MagDataset, graphs: CandidateGraphs, model_cfg: ModelConfig, weights: LossWeights,
          cfg: TrainConfig, params: ModelParams | None = None) -> TrainResult:
    rng = make_rng(cfg.seed)
    if params is None:
        params = new_params(ds, model_cfg, cfg.seed)
    train_nodes = ds.nodes("train")
    batch_size = min(cfg.batch_size, len(train_nodes))
    adam = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    metric, report = validate(params, ds, graphs, model_cfg, cfg.metric)
    best = Checkpoint(0, params.copy(), metric)
    best_key = _rank_key(metric, report)
    result = TrainResult(best, [{"epoch": 0, "phase": "init", "val_metric": metric, "val": report.avg.__dict__}])
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        warm = epoch <= cfg.warmup
        order = rng.permutation(train_nodes)
        keys = trainable_keys(params, model_cfg, warm)
        losses, terms_acc = [], {}
        try:
            for lo in range(0, len(order), batch_size):
                batch = order[lo:lo + batch_size]
                negs = None
                if not warm and weights.topo and model_cfg.learn_topology:
                    # one epoch visits each candidate edge about once as a topology positive
                    negs = sample_negatives(graphs, weights.negatives, rng, len(batch) / len(train_nodes))
                loss, terms = total_loss_and_grad(params, ds.features_v, ds.features_t, graphs, model_cfg,
                                                  weights, batch, train_nodes, negatives=negs, warmup=warm)
                losses.append(loss)
                for k, v in terms.items():
                    terms_acc.setdefault(k, []).append(v)
                adam.step(params, cfg.lr, keys)
        except NonFiniteLoss as exc:
            log.error("epoch %d: %s; keeping checkpoint from epoch %d", epoch, exc, result.best.epoch)
            result.aborted = str(exc)
            result.log.append({"epoch": epoch, "phase": "aborted", "error": str(exc)})
            break
        metric, report = validate(params, ds, graphs, model_cfg, cfg.metric)
        entry = {"epoch": epoch, "phase": "warmup" if warm else "full", "loss": float(np.mean(losses)),
                 "terms": {k: float(np.mean(v)) for k, v in terms_acc.items()},
                 "val_metric": metric, "val": report.avg.__dict__}
        result.log.append(entry)
        log.debug("epoch %d %s loss=%.4f val=%.3f", epoch, entry["phase"], entry["loss"], metric)
        key = _rank_key(metric, report)
        if key > best_key:
            result.best, best_key = Checkpoint(epoch, params.copy(), metric), key
            stale = 0
        elif not warm:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, result.best.epoch)
                break
    return result


def aggregate(values) -> tuple[float, float]:
    """Mean and (n-1) standard deviation; a single value has deviation 0."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def multi_seed_run(seeds, run_one) -> dict:
    """Call ``run_one(seed) -> {metric: value}`` per seed and aggregate.

    A failing seed is recorded and excluded from the aggregate.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    per_seed, failures = {}, {}
    for s in seeds:
        try:
            per_seed[s] = run_one(s)
        except Exception as exc:  # noqa: BLE001 - partial results are the contract
            log.error("seed %s failed: %s", s, exc)
            failures[s] = f"{type(exc).__name__}: {exc}"
    summary = {}
    if per_seed:
        for key in next(iter(per_seed.values())):
            mean, std = aggregate([m[key] for m in per_seed.values()])
            summary[key] = {"mean": mean, "std": std}
    return {"per_seed": per_seed, "summary": summary, "failures": failures}
