"""Candidate edge construction, edge scoring and row-softmax propagation operators."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MagDataset
from .tensor import (ShapeError, SparseRowMatrix, l2_normalize_rows, row_softmax_grouped,
                     row_softmax_grouped_backward, scatter_add_rows)

log = logging.getLogger(__name__)

CHANNELS = ("v", "t", "vt", "tv")
# channel -> (target modality, source modality)
ENDPOINTS = {"v": ("v", "v"), "t": ("t", "t"), "vt": ("v", "t"), "tv": ("t", "v")}


@dataclass(frozen=True, eq=False)
class Channel:
    """Directed candidate pairs (target, source), sorted by target then source."""

    n: int
    target: np.ndarray
    source: np.ndarray

    @classmethod
    def from_pairs(cls, n: int, target, source) -> "Channel":
        keys = np.unique(np.asarray(target, np.int64) * n + np.asarray(source, np.int64))
        return cls(n, keys // n, keys % n)

    @property
    def offsets(self) -> np.ndarray:
        off = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.target, minlength=self.n), out=off[1:])
        return off

    @property
    def keys(self) -> np.ndarray:
        return self.target * self.n + self.source

    def __len__(self) -> int:
        return len(self.target)

    def contains(self, target, source) -> np.ndarray:
        keys = self.keys
        q = np.asarray(target, np.int64) * self.n + np.asarray(source, np.int64)
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, len(keys) - 1)
        return (len(keys) > 0) & (keys[pos] == q)


@dataclass(frozen=True, eq=False)
class CandidateGraphs:
    n: int
    channels: dict
    mode: str = "hybrid"
    k_intra: int = 0
    k_cross: int = 0

    def __getitem__(self, c: str) -> Channel:
        return self.channels[c]

    def total_edges(self) -> int:
        return sum(len(ch) for ch in self.channels.values())

    def save(self, directory, seed: int | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        header = f"mode={self.mode} k_intra={self.k_intra} k_cross={self.k_cross} n={self.n}"
        if seed is not None:
            header += f" seed={seed}"
        for c, ch in self.channels.items():
            body = "\n".join(f"{t} {s}" for t, s in zip(ch.target, ch.source))
            (directory / f"candidates_{c}.txt").write_text(f"# {header}\n{body}\n")

    @classmethod
    def load(cls, directory) -> "CandidateGraphs":
        directory = Path(directory)
        channels, meta = {}, {}
        for c in CHANNELS:
            text = (directory / f"candidates_{c}.txt").read_text()
            first, _, body = text.partition("\n")
            meta = dict(kv.split("=") for kv in first.lstrip("# ").split())
            pairs = np.array([line.split() for line in body.split("\n") if line.strip()], dtype=np.int64)
            pairs = pairs.reshape(-1, 2)
            channels[c] = Channel.from_pairs(int(meta["n"]), pairs[:, 0], pairs[:, 1])
        return cls(int(meta["n"]), channels, meta["mode"], int(meta["k_intra"]), int(meta["k_cross"]))


def knn(query, base, k: int, *, exclude_diagonal: bool, chunk: int = 1024) -> np.ndarray:
    """Top-k cosine neighbours of every query row among ``base`` rows.

    Ties go to the smaller node index; with ``exclude_diagonal`` row i never returns i.
    """
    qn, bn = l2_normalize_rows(query), l2_normalize_rows(base)
    n = qn.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, chunk):
        sim = qn[lo:lo + chunk] @ bn.T
        if exclude_diagonal:
            rows = np.arange(lo, min(lo + chunk, n))
            sim[rows - lo, rows] = -np.inf
        out[lo:lo + chunk] = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return out


def _clamp(k: int, n: int, name: str) -> int:
    if k < 0:
        raise ValueError(f"{name} must be non-negative")
    if k > n - 1:
        log.warning("%s=%d exceeds N-1=%d; clamping", name, k, n - 1)
        return n - 1
    return k


def build_candidates(ds: MagDataset, feats_v, feats_t, k_intra: int = 10, k_cross: int = 10,
                     mode: str = "hybrid", *, allow_self_pairs: bool = False,
                     only_self_pairs: bool = False) -> CandidateGraphs:
    """Per-channel candidate sets: structure (both directions), kNN completion, self-loops.

    Cross-modal channels never contain (i, i) unless a self-pair control is requested.
    """
    n = ds.n
    if feats_v.shape[0] != n or feats_t.shape[0] != n:
        raise ShapeError("feature rows must equal the node count")
    if mode not in ("hybrid", "structure_only"):
        raise ValueError(f"unknown candidate mode {mode!r}")
    k_intra, k_cross = _clamp(k_intra, n, "k_intra"), _clamp(k_cross, n, "k_cross")
    e = ds.edges
    st_t = np.concatenate([e[:, 0], e[:, 1]])
    st_s = np.concatenate([e[:, 1], e[:, 0]])
    loops = np.arange(n)
    channels = {}
    for m, feats in (("v", feats_v), ("t", feats_t)):
        tgt, src = [st_t, loops], [st_s, loops]
        if mode == "hybrid" and k_intra > 0:
            nb = knn(feats, feats, k_intra, exclude_diagonal=True)
            tgt.append(np.repeat(loops, k_intra))
            src.append(nb.ravel())
        channels[m] = Channel.from_pairs(n, np.concatenate(tgt), np.concatenate(src))
    if only_self_pairs:
        vt_t, vt_s = loops, loops
    else:
        vt_t, vt_s = [st_t], [st_s]
        if mode == "hybrid" and k_cross > 0:
            if feats_v.shape[1] != feats_t.shape[1]:
                raise ShapeError("cross-modal kNN needs equal feature widths; use adapted features")
            nb = knn(feats_v, feats_t, k_cross, exclude_diagonal=True)
            vt_t.append(np.repeat(loops, k_cross))
            vt_s.append(nb.ravel())
        vt_t, vt_s = np.concatenate(vt_t), np.concatenate(vt_s)
        keep = vt_t != vt_s
        vt_t, vt_s = vt_t[keep], vt_s[keep]
        if allow_self_pairs:
            vt_t, vt_s = np.concatenate([vt_t, loops]), np.concatenate([vt_s, loops])
    channels["vt"] = Channel.from_pairs(n, vt_t, vt_s)
    channels["tv"] = Channel.from_pairs(n, vt_s, vt_t)
    return CandidateGraphs(n, channels, mode, k_intra, k_cross)


# --- edge scoring --------------------------------------------------------------

@dataclass(frozen=True)
class ScoreCache:
    prod: np.ndarray
    act: np.ndarray


def score_pairs(e_tgt, e_src, target, source, w, b, a):
    """Logits ``a . tanh(W (e_i * e_j) + b)`` for each (target i, source j) pair."""
    if e_tgt.shape[1] != w.shape[1] or e_src.shape[1] != w.shape[1]:
        raise ShapeError("embedding width does not match edge scorer")
    prod = e_tgt[target] * e_src[source]
    act = np.tanh(prod @ w.T + b)
    return act @ a, ScoreCache(prod, act)


def score_pairs_backward(grad_logit, cache: ScoreCache, e_tgt, e_src, target, source, w, a):
    """Returns (g_W, g_b, g_a, g_e_tgt, g_e_src)."""
    g_a = cache.act.T @ grad_logit
    g_pre = np.outer(grad_logit, a) * (1.0 - cache.act ** 2)
    g_w = g_pre.T @ cache.prod
    g_b = g_pre.sum(axis=0)
    g_prod = g_pre @ w
    n = e_tgt.shape[0]
    g_tgt = scatter_add_rows(target, g_prod * e_src[source], n)
    g_src = scatter_add_rows(source, g_prod * e_tgt[target], e_src.shape[0])
    return g_w, g_b, g_a, g_tgt, g_src


def score_edges(graphs: CandidateGraphs, e_v, e_t, scorer: dict) -> dict:
    """Per-channel logits. ``scorer[c]`` is a ``(W_edge, b_edge, a)`` triple."""
    emb = {"v": e_v, "t": e_t}
    out = {}
    for c in CHANNELS:
        ch = graphs[c]
        tm, sm = ENDPOINTS[c]
        out[c], _ = score_pairs(emb[tm], emb[sm], ch.target, ch.source, *scorer[c])
    return out


def normalize_operators(graphs: CandidateGraphs, logits: dict) -> dict:
    ops = {}
    for c in CHANNELS:
        ch = graphs[c]
        intra = c in ("v", "t")
        w = row_softmax_grouped(logits[c], ch.offsets, allow_empty=not intra)
        ops[c] = SparseRowMatrix(graphs.n, graphs.n, ch.offsets, ch.source, w, row_stochastic=intra)
    return ops


def uniform_operators(graphs: CandidateGraphs) -> dict:
    return normalize_operators(graphs, {c: np.zeros(len(graphs[c])) for c in CHANNELS})


def softmax_backward(graphs: CandidateGraphs, ops: dict, grad_w: dict) -> dict:
    return {c: row_softmax_grouped_backward(ops[c].data, grad_w[c], graphs[c].offsets) for c in CHANNELS}
