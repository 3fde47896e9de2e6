"""Finite-step coupled smoothing with restart, the joint block operator, and fixed-point checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .data import write_features
from .tensor import (ShapeError, SparseRowMatrix, as_dense, l2_normalize_rows,
                     l2_normalize_rows_backward, rowdot, spmm)

DENSE_SOLVE_MAX_N = 512


@dataclass(frozen=True)
class SmoothingConfig:
    depth: int = 4
    beta: float = 0.4
    alpha: float = 0.2
    normalize_each_step: bool = True

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class SmoothingTrajectory:
    """States ``v[k]``, ``t[k]`` for k = 0..K; ``pre`` keeps pre-normalization states."""

    v: list
    t: list
    pre: list = field(default_factory=list, repr=False)

    @property
    def depth(self) -> int:
        return len(self.v) - 1

    def dump(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for k, (hv, ht) in enumerate(zip(self.v, self.t)):
            write_features(hv, directory / f"h_v_{k:03d}.magf")
            write_features(ht, directory / f"h_t_{k:03d}.magf")


def _check(ops: dict, e_v, e_t):
    n = e_v.shape[0]
    if e_t.shape != e_v.shape:
        raise ShapeError(f"modality embeddings differ in shape: {e_v.shape} vs {e_t.shape}")
    for c, p in ops.items():
        if (p.rows, p.cols) != (n, n):
            raise ShapeError(f"operator {c} is {p.rows}x{p.cols}, expected {n}x{n}")


def coupled_smooth(ops: dict, e_v, e_t, cfg: SmoothingConfig) -> SmoothingTrajectory:
    e_v, e_t = as_dense(e_v), as_dense(e_t)
    _check(ops, e_v, e_t)
    b, a = cfg.beta, cfg.alpha
    hv, ht = e_v, e_t
    traj = SmoothingTrajectory([hv], [ht])
    for _ in range(cfg.depth):
        # beta == 0 skips the cross terms entirely so cross operators are never read
        mv = (1 - b) * spmm(ops["v"], hv)
        mt = (1 - b) * spmm(ops["t"], ht)
        if b:
            mv = mv + b * spmm(ops["vt"], ht)
            mt = mt + b * spmm(ops["tv"], hv)
        rv = (1 - a) * mv + a * e_v
        rt = (1 - a) * mt + a * e_t
        traj.pre.append((rv, rt))
        if cfg.normalize_each_step:
            hv, ht = l2_normalize_rows(rv), l2_normalize_rows(rt)
        else:
            hv, ht = rv, rt
        traj.v.append(hv)
        traj.t.append(ht)
    return traj


def coupled_smooth_backward(ops: dict, traj: SmoothingTrajectory, cfg: SmoothingConfig,
                            g_v: list, g_t: list):
    """Reverse pass. ``g_v[k]``/``g_t[k]`` are upstream gradients on each stored state.

    Returns ``(g_e_v, g_e_t, g_weights)`` with ``g_weights[c]`` aligned to ``ops[c].data``.
    """
    b, a = cfg.beta, cfg.alpha
    K = traj.depth
    g_weights = {c: np.zeros(p.nnz) for c, p in ops.items()}
    g_ev = np.zeros_like(traj.v[0])
    g_et = np.zeros_like(traj.t[0])
    carry_v, carry_t = g_v[K].copy(), g_t[K].copy()
    for k in range(K, 0, -1):
        rv, rt = traj.pre[k - 1]
        if cfg.normalize_each_step:
            carry_v = l2_normalize_rows_backward(rv, traj.v[k], carry_v)
            carry_t = l2_normalize_rows_backward(rt, traj.t[k], carry_t)
        g_ev += a * carry_v
        g_et += a * carry_t
        gmv, gmt = (1 - a) * carry_v, (1 - a) * carry_t
        hv, ht = traj.v[k - 1], traj.t[k - 1]
        new_v = (1 - b) * ops["v"].transpose_matmul(gmv) + g_v[k - 1]
        new_t = (1 - b) * ops["t"].transpose_matmul(gmt) + g_t[k - 1]
        g_weights["v"] += (1 - b) * rowdot(gmv[ops["v"].row_ids], hv[ops["v"].indices])
        g_weights["t"] += (1 - b) * rowdot(gmt[ops["t"].row_ids], ht[ops["t"].indices])
        if b:
            new_t += b * ops["vt"].transpose_matmul(gmv)
            new_v += b * ops["tv"].transpose_matmul(gmt)
            g_weights["vt"] += b * rowdot(gmv[ops["vt"].row_ids], ht[ops["vt"].indices])
            g_weights["tv"] += b * rowdot(gmt[ops["tv"].row_ids], hv[ops["tv"].indices])
        carry_v, carry_t = new_v, new_t
    g_ev += carry_v
    g_et += carry_t
    return g_ev, g_et, g_weights


def joint_operator(ops: dict, beta: float) -> SparseRowMatrix:
    """The 2N x 2N block operator [[(1-b)P_v, b P_vt], [b P_tv, (1-b)P_t]]."""
    n = ops["v"].rows
    blocks = [[None, None], [None, None]]
    for (r, c), key, coef in (((0, 0), "v", 1 - beta), ((0, 1), "vt", beta),
                              ((1, 0), "tv", beta), ((1, 1), "t", 1 - beta)):
        if coef:
            blocks[r][c] = coef * ops[key].to_scipy()
    for r in range(2):
        if blocks[r][0] is None and blocks[r][1] is None:
            blocks[r][0] = sp.csr_matrix((n, n))
    for c in range(2):
        if blocks[0][c] is None and blocks[1][c] is None:
            blocks[0][c] = sp.csr_matrix((n, n))
    m = sp.bmat(blocks, format="csr")
    m.sum_duplicates()
    m.sort_indices()
    return SparseRowMatrix(2 * n, 2 * n, m.indptr, m.indices, m.data)


def _joint(m, beta):
    if isinstance(m, dict):
        return joint_operator(m, beta).toarray()
    if isinstance(m, SparseRowMatrix):
        return m.toarray()
    return as_dense(m)


def resolvent_fixed_point(m, beta: float, alpha: float, e) -> np.ndarray:
    """Stationary state ``alpha (I - (1-alpha) M)^{-1} E`` by dense LU.

    ``m`` is either the four-operator dict (combined with ``beta``) or the joint matrix.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    m = _joint(m, beta)
    if m.shape[0] > 2 * DENSE_SOLVE_MAX_N:
        raise ValueError(f"joint size {m.shape[0]} exceeds the dense-solve guard "
                         f"(2N <= {2 * DENSE_SOLVE_MAX_N}); use restart_iterate instead")
    e = as_dense(e)
    if alpha == 1:
        return e.copy()
    a = np.eye(m.shape[0]) - (1 - alpha) * m
    return alpha * scipy.linalg.lu_solve(scipy.linalg.lu_factor(a), e)


def restart_iterate(m, beta: float, alpha: float, e, steps: int) -> list:
    """Unnormalized joint recurrence ``H_k = (1-alpha) M H_{k-1} + alpha E``, ``H_0 = E``."""
    m = _joint(m, beta)
    e = as_dense(e)
    out = [e]
    h = e
    for _ in range(steps):
        h = (1 - alpha) * (m @ h) + alpha * e
        out.append(h)
    return out


def gap_norm(traj: SmoothingTrajectory, k: int) -> float:
    if not 0 <= k <= traj.depth:
        raise IndexError(f"step {k} outside 0..{traj.depth}")
    return float(np.linalg.norm(traj.v[k] - traj.t[k]))


def row_variance(h: np.ndarray) -> float:
    """Mean over columns of the across-row variance."""
    return float(np.mean(np.var(h, axis=0)))


def collapse_monitor(m, beta: float, e, steps: int) -> np.ndarray:
    """Row variance of ``M^k E`` for k = 0..steps (no restart)."""
    m = _joint(m, beta)
    h = as_dense(e)
    out = [row_variance(h)]
    for _ in range(steps):
        h = m @ h
        out.append(row_variance(h))
    return np.array(out)


def fitted_rate(residuals) -> float:
    """Per-step geometric rate from a log-linear least-squares fit of positive residuals."""
    r = np.asarray(residuals, dtype=np.float64)
    k = np.flatnonzero(r > 1e-300)
    if len(k) < 2:
        return 0.0
    slope = np.polyfit(k, np.log(r[k]), 1)[0]
    return float(math.exp(slope))
