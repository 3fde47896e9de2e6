"""Paired-node retrieval metrics and frozen-feature diagnostics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .data import MagDataset
from .tensor import SparseRowMatrix, l2_normalize_rows, make_rng
from .topology import knn

KS = (1, 5, 10)


@dataclass(frozen=True)
class DirectionMetrics:
    r1: float
    r5: float
    r10: float
    mrr: float
    mean_rank: float


@dataclass(frozen=True)
class RetrievalReport:
    v2t: DirectionMetrics
    t2v: DirectionMetrics
    avg: DirectionMetrics
    nodes: str
    count: int

    def to_dict(self) -> dict:
        return asdict(self)


def paired_ranks(z_q, z_g, query, gallery) -> np.ndarray:
    """Rank of each query's own counterpart among gallery counterparts (1 = best).

    Ties count against the query: rank = 1 + #{other gallery items scoring >= the positive}.
    """
    query = np.asarray(query, dtype=np.int64)
    gallery = np.asarray(gallery, dtype=np.int64)
    pos_of = {int(g): i for i, g in enumerate(gallery)}
    missing = [int(q) for q in query if int(q) not in pos_of]
    if missing:
        raise ValueError(f"query node {missing[0]} has no counterpart in the gallery")
    pos = np.array([pos_of[int(q)] for q in query], dtype=np.int64)
    scores = z_q[query] @ z_g[gallery].T
    positive = scores[np.arange(len(query)), pos]
    ahead = (scores >= positive[:, None]).sum(axis=1) - 1
    return 1 + ahead


def _direction(ranks: np.ndarray) -> DirectionMetrics:
    r = [100.0 * float(np.mean(ranks <= k)) for k in KS]
    return DirectionMetrics(r[0], r[1], r[2], 100.0 * float(np.mean(1.0 / ranks)), float(np.mean(ranks)))


def retrieval_metrics(z_v, z_t, query, gallery=None, label: str = "test") -> RetrievalReport:
    query = np.asarray(query, dtype=np.int64)
    if len(query) == 0:
        raise ValueError("empty query set")
    gallery = query if gallery is None else np.asarray(gallery, dtype=np.int64)
    v2t = _direction(paired_ranks(z_v, z_t, query, gallery))
    t2v = _direction(paired_ranks(z_t, z_v, query, gallery))
    avg = DirectionMetrics(*[(a + b) / 2 for a, b in zip(asdict(v2t).values(), asdict(t2v).values())])
    return RetrievalReport(v2t, t2v, avg, label, len(query))


# --- diagnostics ---------------------------------------------------------------

def knn_overlap(features_v, features_t, k: int) -> dict:
    """Fraction of shared neighbours between the visual and textual kNN lists of each node."""
    n = features_v.shape[0]
    if not 0 < k < n:
        raise ValueError("need 0 < k < N")
    nv = knn(features_v, features_v, k, exclude_diagonal=True)
    nt = knn(features_t, features_t, k, exclude_diagonal=True)
    per_node = np.array([len(np.intersect1d(a, b, assume_unique=True)) / k for a, b in zip(nv, nt)])
    return {"per_node": per_node, "mean": float(per_node.mean()), "median": float(np.median(per_node))}


def _structural_neighbors(ds: MagDataset) -> list:
    adj = [[] for _ in range(ds.n)]
    for a, b in ds.edges:
        adj[a].append(b)
        adj[b].append(a)
    return [np.array(x, dtype=np.int64) for x in adj]


def neighbor_purity(ds: MagDataset, source: str, k: int = 10) -> float:
    """Mean fraction of a node's neighbours sharing its category (nodes without neighbours skipped)."""
    if ds.categories is None:
        raise ValueError("dataset has no category ids")
    cats = ds.categories
    if source == "structural":
        neigh = _structural_neighbors(ds)
    elif source in ("knn_v", "knn_t"):
        feats = ds.features_v if source == "knn_v" else ds.features_t
        neigh = list(knn(feats, feats, min(k, ds.n - 1), exclude_diagonal=True))
    else:
        raise ValueError(f"unknown neighbourhood source {source!r}")
    vals = [float(np.mean(cats[nb] == cats[i])) for i, nb in enumerate(neigh) if len(nb)]
    return float(np.mean(vals)) if vals else float("nan")


def structural_operator(ds: MagDataset, self_loops: bool = True) -> SparseRowMatrix:
    """Uniform degree-normalized walk on the structural graph; isolated nodes keep a self-loop."""
    n = ds.n
    e = ds.edges
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(rows, minlength=n)
    if self_loops:
        loops = np.arange(n)
    else:
        loops = np.flatnonzero(deg == 0)
    rows = np.concatenate([rows, loops])
    cols = np.concatenate([cols, loops])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.sort_indices()
    a = sp.diags(1.0 / np.asarray(a.sum(axis=1)).ravel()) @ a
    a = sp.csr_matrix(a)
    a.sort_indices()
    return SparseRowMatrix(n, n, a.indptr, a.indices, a.data, row_stochastic=True)


def semantic_separation(states, categories, max_pairs: int = 50_000, seed: int = 0) -> float:
    """Mean intra-category cosine minus mean inter-category cosine over sampled node pairs."""
    h = l2_normalize_rows(states)
    n = h.shape[0]
    rng = make_rng(seed)
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n, size=max_pairs)
        keep = i != j
        i, j = i[keep], j[keep]
    cos = np.einsum("ij,ij->i", h[i], h[j])
    same = categories[i] == categories[j]
    if same.all() or not same.any():
        return float("nan")
    return float(cos[same].mean() - cos[~same].mean())


@dataclass(frozen=True)
class DepthSweepReport:
    depths: list
    mean_rank: list
    separation: list

    def best(self) -> tuple[int, float]:
        i = int(np.argmin(self.mean_rank))
        return self.depths[i], self.mean_rank[i]

    def to_dict(self) -> dict:
        best_depth, best_rank = self.best()
        return {"depths": self.depths, "mean_rank": self.mean_rank, "separation": self.separation,
                "best_depth": best_depth, "mean_rank_best": best_rank}


def depth_sweep(ds: MagDataset, depths, features=None, operator: SparseRowMatrix | None = None,
                nodes=None, seed: int = 0) -> DepthSweepReport:
    """Smooth frozen features with the uniform structural operator (no restart) and track
    paired-retrieval MeanR and semantic separation at each requested depth."""
    depths = sorted(int(d) for d in depths)
    if depths[0] < 0 or len(set(depths)) != len(depths):
        raise ValueError("depths must be distinct and non-negative")
    xv, xt = features if features is not None else (ds.features_v, ds.features_t)
    p = operator if operator is not None else structural_operator(ds)
    nodes = np.arange(ds.n) if nodes is None else np.asarray(nodes)
    hv, ht = np.array(xv, dtype=np.float64), np.array(xt, dtype=np.float64)
    ranks, seps = [], []
    k = 0
    csr = p.to_scipy()
    for target in depths:
        while k < target:
            hv, ht = csr @ hv, csr @ ht
            k += 1
        zv, zt = l2_normalize_rows(hv), l2_normalize_rows(ht)
        ranks.append(retrieval_metrics(zv, zt, nodes).avg.mean_rank)
        if ds.categories is None:
            seps.append(float("nan"))
        else:
            sv = semantic_separation(hv, ds.categories, seed=seed)
            st = semantic_separation(ht, ds.categories, seed=seed)
            seps.append((sv + st) / 2)
    return DepthSweepReport(depths, ranks, seps)


def hard_query_support(ds: MagDataset, z_v=None, z_t=None, nodes=None, sim_quantile: float = 0.25,
                       support_quantile: float = 0.75, tol: float = 1e-9) -> dict:
    """Fraction of nodes whose own-pair similarity is low while structural neighbours'
    cross-modal evidence is high.

    Pair similarity is cos(v_i, t_i); structural support is the mean of cos(v_i, t_j) over
    structural neighbours j (isolated nodes get no support).
    """
    zv = l2_normalize_rows(ds.features_v if z_v is None else z_v)
    zt = l2_normalize_rows(ds.features_t if z_t is None else z_t)
    nodes = ds.nodes("test") if nodes is None else np.asarray(nodes)
    pair = np.einsum("ij,ij->i", zv, zt)
    neigh = _structural_neighbors(ds)
    support = np.array([float(np.mean(zt[nb] @ zv[i])) if len(nb) else -np.inf for i, nb in enumerate(neigh)])
    s, u = pair[nodes], support[nodes]
    finite = np.isfinite(u)
    lo = np.quantile(s, sim_quantile)
    hi = np.quantile(u[finite], support_quantile) if finite.any() else np.inf
    hard = (s < lo - tol) & finite & (u > hi + tol)
    return {"fraction": float(hard.mean()), "count": int(hard.sum()), "nodes": int(len(nodes)),
            "similarity_threshold": float(lo), "support_threshold": float(hi)}
