"""Model parameters and the forward pipeline: adapters -> operators -> smoothing -> readout."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .readout import ReadoutConfig, readout_backward, readout_forward
from .smoothing import SmoothingConfig, coupled_smooth, coupled_smooth_backward
from .tensor import l2_normalize_rows, l2_normalize_rows_backward, make_rng
from .topology import (CHANNELS, ENDPOINTS, CandidateGraphs, normalize_operators, score_pairs,
                       score_pairs_backward, softmax_backward, uniform_operators)

MODALITIES = ("v", "t")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    scorer_hidden: int = 32
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    readout: ReadoutConfig = field(default_factory=ReadoutConfig)
    learn_topology: bool = True  # False -> uniform weights over candidates
    propagate: bool = True  # False -> adapter only, Z = E


class ModelParams:
    """Named parameter arrays in a fixed order, with matching gradient buffers."""

    def __init__(self, values: dict):
        self.values = {k: np.array(v, dtype=np.float64) for k, v in values.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.values.items()}

    def __getitem__(self, key):
        return self.values[key]

    def __iter__(self):
        return iter(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.values.items()})

    def group(self, prefix: str) -> list:
        return [k for k in self.values if k.startswith(prefix)]

    def scorer(self, c: str):
        return self[f"scorer.{c}.W"], self[f"scorer.{c}.b"], self[f"scorer.{c}.a"]

    def readout(self, m: str):
        return self[f"readout.{m}.W"], self[f"readout.{m}.U"], self[f"readout.{m}.q"]


def init_params(dim_v: int, dim_t: int, cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Identity adapters when the feature width equals the embedding width, scaled Gaussians otherwise."""
    d, h, da = cfg.embed_dim, cfg.scorer_hidden, cfg.readout.width
    vals = {}
    for m, f in (("v", dim_v), ("t", dim_t)):
        vals[f"adapter.{m}.W"] = np.eye(d) if f == d else rng.standard_normal((d, f)) / math.sqrt(f)
        vals[f"adapter.{m}.b"] = np.zeros(d)
    for c in CHANNELS:
        vals[f"scorer.{c}.W"] = rng.standard_normal((h, d)) * (math.sqrt(d) / 2)
        vals[f"scorer.{c}.b"] = np.zeros(h)
        vals[f"scorer.{c}.a"] = rng.standard_normal(h) / math.sqrt(h)
    for m in MODALITIES:
        vals[f"readout.{m}.W"] = rng.standard_normal((da, d)) / math.sqrt(d)
        vals[f"readout.{m}.U"] = rng.standard_normal((da, d)) / math.sqrt(d)
        vals[f"readout.{m}.q"] = rng.standard_normal(da) / math.sqrt(da)
    return ModelParams(vals)


def adapt(params: ModelParams, x_v, x_t):
    """Returns ({m: E_m}, {m: pre-normalization adapter output})."""
    pre = {"v": x_v @ params["adapter.v.W"].T + params["adapter.v.b"],
           "t": x_t @ params["adapter.t.W"].T + params["adapter.t.b"]}
    return {m: l2_normalize_rows(pre[m]) for m in MODALITIES}, pre


@dataclass
class Forward:
    emb: dict
    emb_pre: dict
    logits: dict | None
    score_cache: dict | None
    ops: dict | None
    traj: object | None
    readout_cache: dict | None
    z: dict


def forward(params: ModelParams, x_v, x_t, graphs: CandidateGraphs, cfg: ModelConfig,
            *, need_operators: bool = True) -> Forward:
    emb, pre = adapt(params, x_v, x_t)
    logits = cache = ops = traj = rc = None
    if need_operators or cfg.propagate:
        if cfg.learn_topology:
            logits, cache = {}, {}
            for c in CHANNELS:
                ch = graphs[c]
                tm, sm = ENDPOINTS[c]
                logits[c], cache[c] = score_pairs(emb[tm], emb[sm], ch.target, ch.source, *params.scorer(c))
            ops = normalize_operators(graphs, logits)
        else:
            ops = uniform_operators(graphs)
    if cfg.propagate:
        traj = coupled_smooth(ops, emb["v"], emb["t"], cfg.smoothing)
        z, rc = {}, {}
        for m in MODALITIES:
            z[m], rc[m] = readout_forward(np.stack(getattr(traj, m)), emb[m], params.readout(m), cfg.readout)
    else:
        z = dict(emb)
    return Forward(emb, pre, logits, cache, ops, traj, rc, z)


def embed(params: ModelParams, x_v, x_t, graphs: CandidateGraphs, cfg: ModelConfig):
    """Final retrieval embeddings (Z_v, Z_t) for every node."""
    fw = forward(params, x_v, x_t, graphs, cfg, need_operators=False)
    return fw.z["v"], fw.z["t"]


def backward(params: ModelParams, fw: Forward, x_v, x_t, graphs: CandidateGraphs, cfg: ModelConfig,
             g_z: dict, g_emb: dict, g_weights: dict | None, g_logits: dict | None) -> None:
    """Accumulate parameter gradients into ``params.grads``.

    ``g_z``: upstream on Z; ``g_emb``: direct upstream on E (from L_lin, CDE, negatives);
    ``g_weights``: direct upstream on operator weights (CDE); ``g_logits``: direct upstream
    on candidate logits (topology contrast).
    """
    g_e = {m: g_emb[m].copy() for m in MODALITIES}
    g_w = {c: np.zeros(fw.ops[c].nnz) for c in CHANNELS} if fw.ops is not None else None
    if cfg.propagate:
        g_states = {}
        for m in MODALITIES:
            gs, ge, gp = readout_backward(g_z[m], fw.readout_cache[m], params.readout(m), cfg.readout)
            g_states[m] = list(gs)
            g_e[m] += ge
            if gp is not None:
                for name, g in zip("WUq", gp):
                    params.grads[f"readout.{m}.{name}"] += g
        gv, gt, gw = coupled_smooth_backward(fw.ops, fw.traj, cfg.smoothing, g_states["v"], g_states["t"])
        g_e["v"] += gv
        g_e["t"] += gt
        for c in CHANNELS:
            g_w[c] += gw[c]
    else:
        for m in MODALITIES:
            g_e[m] += g_z[m]
    if g_weights is not None and g_w is not None:
        for c in CHANNELS:
            g_w[c] += g_weights[c]
    if cfg.learn_topology and fw.logits is not None:
        g_l = softmax_backward(graphs, fw.ops, g_w)
        for c in CHANNELS:
            if g_logits is not None:
                g_l[c] = g_l[c] + g_logits[c]
            ch = graphs[c]
            tm, sm = ENDPOINTS[c]
            w, b, a = params.scorer(c)
            gW, gb, ga, gtg, gsr = score_pairs_backward(g_l[c], fw.score_cache[c], fw.emb[tm], fw.emb[sm],
                                                        ch.target, ch.source, w, a)
            params.grads[f"scorer.{c}.W"] += gW
            params.grads[f"scorer.{c}.b"] += gb
            params.grads[f"scorer.{c}.a"] += ga
            g_e[tm] += gtg
            g_e[sm] += gsr
    adapter_backward(params, fw, x_v, x_t, g_e)


def adapter_backward(params: ModelParams, fw: Forward, x_v, x_t, g_e: dict) -> None:
    for m, x in (("v", x_v), ("t", x_t)):
        g_pre = l2_normalize_rows_backward(fw.emb_pre[m], fw.emb[m], g_e[m])
        params.grads[f"adapter.{m}.W"] += g_pre.T @ x
        params.grads[f"adapter.{m}.b"] += g_pre.sum(axis=0)


def new_params(ds, cfg: ModelConfig, seed: int) -> ModelParams:
    return init_params(ds.features_v.shape[1], ds.features_t.shape[1], cfg, make_rng(seed))
