"""Training objective: symmetric InfoNCE on both branches, coupled Dirichlet energy,
sampled topology contrast, and the assembled loss with exact gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .model import MODALITIES, ModelConfig, ModelParams, adapter_backward, backward, forward
from .tensor import scatter_add_rows
from .topology import CHANNELS, ENDPOINTS, CandidateGraphs, score_pairs, score_pairs_backward

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value!r})")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    cde: float = 0.1
    topo: float = 0.05
    direct: float = 0.3
    gamma: float = 1.0
    temperature: float = 0.07
    negatives: int = 5
    cde_reduction: str = "mean"  # "sum" is the literal edge sum; "mean" divides by N

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.negatives < 1:
            raise ValueError("need at least one negative per positive")
        if min(self.cde, self.topo, self.direct, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.cde_reduction not in ("sum", "mean"):
            raise ValueError("cde_reduction must be 'sum' or 'mean'")


def info_nce_symmetric(z_v, z_t, batch, gallery, tau: float):
    """Mean over the batch of -log softmax over the gallery, averaged over both directions.

    Returns (loss, g_z_v, g_z_t) with gradients shaped like the full embedding matrices.
    """
    batch = np.asarray(batch, dtype=np.int64)
    gallery = np.asarray(gallery, dtype=np.int64)
    lookup = {int(g): i for i, g in enumerate(gallery)}
    try:
        pos = np.array([lookup[int(b)] for b in batch], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"batch node {exc.args[0]} is missing from the gallery") from None
    g_v, g_t = np.zeros_like(z_v), np.zeros_like(z_t)
    total = 0.0
    rows = np.arange(len(batch))
    for zq, zg, gq, gg in ((z_v, z_t, g_v, g_t), (z_t, z_v, g_t, g_v)):
        s = zq[batch] @ zg[gallery].T / tau
        total += -log_softmax(s, axis=1)[rows, pos].mean()
        ds = softmax(s, axis=1)
        ds[rows, pos] -= 1.0
        ds *= 0.5 / len(batch)
        gq[batch] += ds @ zg[gallery] / tau
        gg[gallery] += ds.T @ zq[batch] / tau
    return 0.5 * total, g_v, g_t


def cde_loss(ops: dict, graphs: CandidateGraphs, e_v, e_t, gamma: float, reduction: str = "sum"):
    """Weighted squared endpoint distances over candidate edges.

    Returns (loss, g_e_v, g_e_t, g_weights per channel).
    """
    emb = {"v": e_v, "t": e_t}
    grads = {"v": np.zeros_like(e_v), "t": np.zeros_like(e_t)}
    scale = 1.0 if reduction == "sum" else 1.0 / graphs.n
    total = 0.0
    g_w = {}
    for c in CHANNELS:
        lam = (1.0 if c in ("v", "t") else gamma / 2) * scale
        ch = graphs[c]
        tm, sm = ENDPOINTS[c]
        diff = emb[tm][ch.target] - emb[sm][ch.source]
        dist = np.einsum("ij,ij->i", diff, diff)
        w = ops[c].data
        total += lam * float(w @ dist)
        g_w[c] = lam * dist
        gd = (2 * lam * w)[:, None] * diff
        grads[tm] += scatter_add_rows(ch.target, gd, graphs.n)
        grads[sm] -= scatter_add_rows(ch.source, gd, graphs.n)
    return total, grads["v"], grads["t"], g_w


def sample_negatives(graphs: CandidateGraphs, q: int, rng: np.random.Generator, fraction: float = 1.0) -> dict:
    """For each channel, a set of positive edge indices and ``q`` uniformly drawn non-edges
    (i != j) per positive.

    ``fraction < 1`` draws that share of the candidate edges (at least one) as positives,
    without replacement. Channels without any non-edge map to ``None``.
    """
    out = {}
    n = graphs.n
    for c in CHANNELS:
        ch = graphs[c]
        if len(ch) + n >= n * n:
            log.warning("channel %s has no non-edges; skipping topology contrast", c)
            out[c] = None
            continue
        if fraction >= 1:
            pos = np.arange(len(ch))
        else:
            size = min(len(ch), max(1, int(round(fraction * len(ch)))))
            pos = np.sort(rng.choice(len(ch), size=size, replace=False))
        m = q * len(pos)
        tgt = np.empty(m, dtype=np.int64)
        src = np.empty(m, dtype=np.int64)
        todo = np.arange(m)
        while len(todo):
            a = rng.integers(0, n, size=len(todo))
            b = rng.integers(0, n, size=len(todo))
            ok = (a != b) & ~ch.contains(a, b)
            tgt[todo[ok]], src[todo[ok]] = a[ok], b[ok]
            todo = todo[~ok]
        out[c] = (tgt, src, pos)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def topology_contrast_terms(pos_logits: dict, neg_logits: dict, q: int):
    """Logistic NCE: -log s(l+) - sum log s(-l-) averaged over positives, summed over channels.

    ``neg_logits[c]`` has ``q * len(pos_logits[c])`` entries (or is None to skip the channel).
    Returns (loss, g_pos, g_neg).
    """
    total, g_pos, g_neg = 0.0, {}, {}
    for c in CHANNELS:
        lp, ln = pos_logits[c], neg_logits.get(c)
        if ln is None or len(lp) == 0:
            g_pos[c] = np.zeros_like(lp)
            g_neg[c] = None
            continue
        npos = len(lp)
        total += (_softplus(-lp).sum() + _softplus(ln).sum()) / npos
        g_pos[c] = -expit(-lp) / npos
        g_neg[c] = expit(ln) / npos
    return total, g_pos, g_neg


def topology_contrast(graphs: CandidateGraphs, e_v, e_t, params: ModelParams, q: int, rng=None,
                      negatives=None):
    """Loss, gradients on the scorer inputs (E_v, E_t) and scorer parameters.

    Returns (loss, g_e_v, g_e_t, g_pos_logits, param_grads).
    """
    emb = {"v": e_v, "t": e_t}
    if negatives is None:
        negatives = sample_negatives(graphs, q, rng)
    pos, neg, caches = {}, {}, {}
    for c in CHANNELS:
        ch = graphs[c]
        tm, sm = ENDPOINTS[c]
        if negatives[c] is None:
            pos[c], neg[c] = np.zeros(0), None
            continue
        tgt, src, idx = negatives[c]
        pos[c], _ = score_pairs(emb[tm], emb[sm], ch.target[idx], ch.source[idx], *params.scorer(c))
        neg[c], caches[c] = score_pairs(emb[tm], emb[sm], tgt, src, *params.scorer(c))
    loss, g_sub, g_neg = topology_contrast_terms(pos, neg, q)
    g_e = {"v": np.zeros_like(e_v), "t": np.zeros_like(e_t)}
    g_pos, pgrads = {}, {}
    for c in CHANNELS:
        g_pos[c] = np.zeros(len(graphs[c]))
        if g_neg[c] is None:
            continue
        tgt, src, idx = negatives[c]
        g_pos[c][idx] = g_sub[c]
        tm, sm = ENDPOINTS[c]
        w, b, a = params.scorer(c)
        gW, gb, ga, gtg, gsr = score_pairs_backward(g_neg[c], caches[c], emb[tm], emb[sm], tgt, src, w, a)
        pgrads[c] = (gW, gb, ga)
        g_e[tm] += gtg
        g_e[sm] += gsr
    return loss, g_e["v"], g_e["t"], g_pos, pgrads


def _check_finite(term: str, value: float):
    if not np.isfinite(value):
        raise NonFiniteLoss(term, value)


def total_loss_and_grad(params: ModelParams, x_v, x_t, graphs: CandidateGraphs, cfg: ModelConfig,
                        weights: LossWeights, batch, gallery, *, rng=None, negatives=None,
                        warmup: bool = False):
    """Full objective and reverse pass; gradients land in ``params.grads`` (zeroed first).

    During warm-up only the direct-branch InfoNCE is active, with weight 1.
    Returns (loss, per-term dict).
    """
    params.zero_grad()
    terms = {}
    if warmup:
        fw = forward(params, x_v, x_t, graphs, replace(cfg, propagate=False), need_operators=False)
        lin, gv, gt = info_nce_symmetric(fw.emb["v"], fw.emb["t"], batch, gallery, weights.temperature)
        _check_finite("lin", lin)
        terms["lin"] = lin
        adapter_backward(params, fw, x_v, x_t, {"v": gv, "t": gt})
        return lin, terms

    fw = forward(params, x_v, x_t, graphs, cfg)
    align, gzv, gzt = info_nce_symmetric(fw.z["v"], fw.z["t"], batch, gallery, weights.temperature)
    terms["align"] = align
    g_emb = {m: np.zeros_like(fw.emb[m]) for m in MODALITIES}
    loss = align
    if weights.direct:
        lin, gv, gt = info_nce_symmetric(fw.emb["v"], fw.emb["t"], batch, gallery, weights.temperature)
        terms["lin"] = lin
        loss += weights.direct * lin
        g_emb["v"] += weights.direct * gv
        g_emb["t"] += weights.direct * gt
    g_weights = None
    if weights.cde:
        cde, gv, gt, gw = cde_loss(fw.ops, graphs, fw.emb["v"], fw.emb["t"], weights.gamma, weights.cde_reduction)
        terms["cde"] = cde
        loss += weights.cde * cde
        g_emb["v"] += weights.cde * gv
        g_emb["t"] += weights.cde * gt
        g_weights = {c: weights.cde * gw[c] for c in CHANNELS}
    g_logits = None
    if weights.topo and cfg.learn_topology:
        topo, gv, gt, gpos, pgrads = topology_contrast(graphs, fw.emb["v"], fw.emb["t"], params,
                                                       weights.negatives, rng, negatives)
        terms["topo"] = topo
        loss += weights.topo * topo
        g_emb["v"] += weights.topo * gv
        g_emb["t"] += weights.topo * gt
        g_logits = {c: weights.topo * gpos[c] for c in CHANNELS}
        for c, (gW, gb, ga) in pgrads.items():
            params.grads[f"scorer.{c}.W"] += weights.topo * gW
            params.grads[f"scorer.{c}.b"] += weights.topo * gb
            params.grads[f"scorer.{c}.a"] += weights.topo * ga
    for name, value in terms.items():
        _check_finite(name, value)
    backward(params, fw, x_v, x_t, graphs, cfg, {"v": gzv, "t": gzt}, g_emb, g_weights, g_logits)
    return float(loss), terms


def finite_difference_check(params: ModelParams, loss_fn, step: float = 1e-5) -> dict:
    """Central differences for every parameter entry vs ``params.grads``.

    ``loss_fn(params)`` must return the scalar loss and leave analytic gradients in
    ``params.grads``. Per group, the error is ``max|analytic - fd| / max|fd|``.
    """
    loss_fn(params)
    analytic = {k: g.copy() for k, g in params.grads.items()}
    report = {}
    for name, value in params.values.items():
        fd = np.zeros_like(value)
        flat, out = value.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(params)
            flat[i] = orig - step
            down = loss_fn(params)
            flat[i] = orig
            out[i] = (up - down) / (2 * step)
        scale = max(np.abs(fd).max(), 1e-12)
        report[name] = float(np.abs(analytic[name] - fd).max() / scale)
    loss_fn(params)
    return report
