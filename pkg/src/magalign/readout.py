"""Per-node attention over smoothing depths, blended with the direct embedding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, l2_normalize_rows, l2_normalize_rows_backward, rowdot


@dataclass(frozen=True)
class ReadoutConfig:
    rho: float = 0.7
    width: int = 16
    adaptive: bool = True  # False -> uniform weights over depths

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if self.width < 1:
            raise ValueError("attention width must be >= 1")


@dataclass
class _ReadoutCache:
    states: np.ndarray  # (K+1, N, d)
    mean: np.ndarray
    act: np.ndarray  # (K+1, N, d_a)
    weights: np.ndarray  # (N, K+1)
    mixed: np.ndarray
    pre: np.ndarray
    out: np.ndarray


def _scores(states, w_att, u_att, q):
    if w_att.shape[1] != states.shape[2] or u_att.shape != w_att.shape or q.shape != (w_att.shape[0],):
        raise ShapeError("readout parameter shapes do not match the trajectory width")
    mean = states.mean(axis=0)
    act = np.tanh(states @ w_att.T + (mean @ u_att.T)[None])
    return mean, act, act @ q  # scores: (K+1, N)


def _softmax_over_depth(scores):
    s = scores.T  # (N, K+1)
    s = s - s.max(axis=1, keepdims=True)
    ex = np.exp(s)
    return ex / ex.sum(axis=1, keepdims=True)


def attention_weights(states, w_att, u_att, q) -> np.ndarray:
    """(N, K+1) weights: softmax over depths of ``q . tanh(W h_k + U mean_k h)``."""
    states = np.asarray(states, dtype=np.float64)
    _, _, scores = _scores(states, w_att, u_att, q)
    return _softmax_over_depth(scores)


def readout_forward(states, e, params, cfg: ReadoutConfig):
    """One modality. ``params`` = (W_att, U_att, q). Returns (Z, cache)."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 3 or states.shape[1:] != e.shape:
        raise ShapeError(f"trajectory shape {states.shape} does not match embeddings {e.shape}")
    n_steps = states.shape[0]
    if cfg.adaptive:
        mean, act, scores = _scores(states, *params)
        weights = _softmax_over_depth(scores)
    else:
        mean, act = None, None
        weights = np.full((states.shape[1], n_steps), 1.0 / n_steps)
    mixed = np.einsum("nk,knd->nd", weights, states)
    pre = cfg.rho * mixed + (1 - cfg.rho) * e
    out = l2_normalize_rows(pre)
    return out, _ReadoutCache(states, mean, act, weights, mixed, pre, out)


def readout_backward(grad_out, cache: _ReadoutCache, params, cfg: ReadoutConfig):
    """Returns (g_states (K+1,N,d), g_e, (g_W, g_U, g_q) or None)."""
    g_pre = l2_normalize_rows_backward(cache.pre, cache.out, grad_out)
    g_e = (1 - cfg.rho) * g_pre
    g_mixed = cfg.rho * g_pre
    g_states = cache.weights.T[:, :, None] * g_mixed[None]
    if not cfg.adaptive:
        return g_states, g_e, None
    w_att, u_att, q = params
    g_w_dep = np.stack([rowdot(g_mixed, h) for h in cache.states], axis=1)  # (N, K+1)
    inner = (cache.weights * g_w_dep).sum(axis=1, keepdims=True)
    g_scores = (cache.weights * (g_w_dep - inner)).T  # (K+1, N)
    g_q = np.einsum("kn,kna->a", g_scores, cache.act)
    g_pre_act = g_scores[:, :, None] * q[None, None, :] * (1 - cache.act ** 2)  # (K+1, N, d_a)
    g_w = np.einsum("kna,knd->ad", g_pre_act, cache.states)
    g_ctx = g_pre_act.sum(axis=0)  # (N, d_a)
    g_u = g_ctx.T @ cache.mean
    g_states += g_pre_act @ w_att
    g_states += (g_ctx @ u_att)[None] / cache.states.shape[0]
    return g_states, g_e, (g_w, g_u, g_q)


def trajectory_readout(traj, e_v, e_t, params: dict, cfg: ReadoutConfig):
    """Z_v, Z_t from a smoothing trajectory. ``params[m]`` = (W_att, U_att, q)."""
    z_v, _ = readout_forward(np.stack(traj.v), e_v, params["v"], cfg)
    z_t, _ = readout_forward(np.stack(traj.t), e_t, params["t"], cfg)
    return z_v, z_t


def selected_depth(traj, params: dict) -> dict:
    """Per-node argmax depth for each modality."""
    return {m: attention_weights(np.stack(getattr(traj, m)), *params[m]).argmax(axis=1) for m in ("v", "t")}
