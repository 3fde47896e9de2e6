"""Numerical checks of the smoothing dynamics on small hand-built operators.

Three properties are exercised: restart iterates converge geometrically to the resolvent
fixed point, pure propagation (no restart) collapses node states, and coupled smoothing on
doubly-stochastic operators shrinks the visual/textual gap step by step.
"""
from __future__ import annotations

import math

import numpy as np

from .smoothing import (SmoothingConfig, collapse_monitor, coupled_smooth, fitted_rate, gap_norm,
                        joint_operator, resolvent_fixed_point, restart_iterate)
from .tensor import SparseRowMatrix, make_rng


def _stochastic(dense: np.ndarray) -> SparseRowMatrix:
    dense = dense / dense.sum(axis=1, keepdims=True)
    return SparseRowMatrix.from_dense(dense, row_stochastic=True)


def ring_operators(n: int, rng: np.random.Generator) -> dict:
    """Four sparse row-stochastic operators coupling two rings of ``n`` nodes.

    Every row keeps most of its mass on itself and spreads the rest to ring neighbours, so the
    joint chain is irreducible, aperiodic and slow to mix (all eigenvalues close to 1).
    """
    idx = np.arange(n)
    ops = {}
    for key, shifts in (("v", (0, 1, -1)), ("t", (0, 1, -1)), ("vt", (0, 1)), ("tv", (0, -1))):
        dense = np.zeros((n, n))
        for s in shifts:
            lo, hi = (80.0, 120.0) if s == 0 else (0.5, 1.5)
            dense[idx, (idx + s) % n] += rng.uniform(lo, hi, size=n)
        ops[key] = _stochastic(dense)
    return ops


def sinkhorn(m: np.ndarray, iters: int = 500, tol: float = 1e-14) -> np.ndarray:
    m = np.array(m, dtype=np.float64)
    for _ in range(iters):
        m /= m.sum(axis=1, keepdims=True)
        m /= m.sum(axis=0, keepdims=True)
        if np.abs(m.sum(axis=1) - 1).max() < tol:
            break
    return m


def symmetric_doubly_stochastic(base: np.ndarray, rng: np.random.Generator, spread: float = 0.5) -> np.ndarray:
    """Symmetric doubly-stochastic matrix near a positive ``base``."""
    m = sinkhorn(base * rng.uniform(1 - spread, 1 + spread, size=base.shape))
    return (m + m.T) / 2


def doubly_stochastic_fixture(n: int, rng: np.random.Generator) -> dict:
    """``P_v = P_t = A`` and ``P_vt = P_tv = B`` with distinct symmetric doubly-stochastic A, B."""
    base = rng.uniform(0.1, 1.0, size=(n, n))
    base = base + base.T
    a = symmetric_doubly_stochastic(base, rng)
    b = symmetric_doubly_stochastic(base, rng)
    a_op, b_op = _stochastic(a), _stochastic(b)
    return {"v": a_op, "t": a_op, "vt": b_op, "tv": b_op}


def steps_for(alpha: float, tol: float = 1e-9) -> int:
    if alpha >= 1:
        return 1
    return math.ceil(math.log(tol) / math.log(1 - alpha))


def resolvent_check(alpha: float, n: int = 32, dim: int = 4, beta: float = 0.02, seed: int = 0,
                    tol: float = 1e-8, rate_tol: float = 0.10) -> dict:
    """Iterate the unnormalized restart recurrence and compare with the dense fixed point."""
    rng = make_rng(seed)
    ops = ring_operators(n, rng)
    e = rng.standard_normal((2 * n, dim))
    m = joint_operator(ops, beta)
    fixed = resolvent_fixed_point(m, beta, alpha, e)
    steps = steps_for(alpha)
    traj = restart_iterate(m, beta, alpha, e, steps)
    residuals = np.array([np.abs(h - fixed).max() for h in traj])
    rate = fitted_rate(residuals)
    expected = 1 - alpha
    rate_ok = abs(rate - expected) <= rate_tol * expected if expected > 0 else rate <= 1e-12
    return {"alpha": alpha, "beta": beta, "n_joint": 2 * n, "steps": steps,
            "final_residual": float(residuals[-1]), "fitted_rate": rate, "expected_rate": expected,
            "converged": bool(residuals[-1] <= tol), "rate_within_tolerance": bool(rate_ok),
            "passed": bool(residuals[-1] <= tol and rate_ok)}


def collapse_check(n: int = 32, dim: int = 4, beta: float = 0.3, steps: int = 100, seed: int = 0,
                   ratio: float = 1e-8) -> dict:
    """Row variance of ``M^k E`` without restart on a dense positive (hence primitive) operator."""
    rng = make_rng(seed)
    ops = {k: _stochastic(rng.uniform(0.0, 1.0, size=(n, n)) + 1e-3) for k in ("v", "t", "vt", "tv")}
    e = rng.standard_normal((2 * n, dim))
    var = collapse_monitor(ops, beta, e, steps)
    r = float(var[-1] / var[0])
    return {"steps": steps, "variance_start": float(var[0]), "variance_end": float(var[-1]),
            "ratio": r, "threshold": ratio, "passed": bool(r < ratio)}


def gap_trial(ops: dict, e_v, e_t, beta: float, steps: int, zero_tol: float = 1e-12) -> dict:
    traj = coupled_smooth(ops, e_v, e_t, SmoothingConfig(steps, beta, 0.0, False))
    gaps = np.array([gap_norm(traj, k) for k in range(steps + 1)])
    diffs = np.diff(gaps)
    nonincreasing = bool(np.all(diffs <= 1e-12 * max(gaps[0], 1.0)))
    active = gaps[:-1] > zero_tol
    strict = bool(np.all(diffs[active] < 0))
    return {"gaps": gaps.tolist(), "nonincreasing": nonincreasing, "strict": strict}


def gap_contraction(betas=(0.1, 0.25, 0.4), trials: int = 20, steps: int = 20, n: int = 16,
                    dim: int = 4, seed: int = 0) -> dict:
    """Gap norms under coupled smoothing (no restart) on doubly-stochastic fixtures."""
    rng = make_rng(seed)
    rows, ok = [], True
    for t in range(trials):
        ops = doubly_stochastic_fixture(n, rng)
        e_v = rng.standard_normal((n, dim))
        e_t = rng.standard_normal((n, dim))
        for beta in betas:
            res = gap_trial(ops, e_v, e_t, beta, steps)
            ok &= res["nonincreasing"] and res["strict"]
            rows.append({"trial": t, "beta": beta, "nonincreasing": res["nonincreasing"],
                         "strict": res["strict"], "gap_start": res["gaps"][0], "gap_end": res["gaps"][-1]})
    return {"trials": trials, "betas": list(betas), "steps": steps, "results": rows, "passed": bool(ok)}


def beta_zero_report(n: int = 16, dim: int = 4, steps: int = 20, seed: int = 0) -> dict:
    """With beta = 0 the modalities evolve independently; the gap follows intra-only dynamics.

    On the doubly-stochastic fixture both modalities share ``A`` so the gap obeys
    ``Delta_k = A Delta_{k-1}`` and is still non-increasing.
    """
    rng = make_rng(seed)
    ops = doubly_stochastic_fixture(n, rng)
    e_v = rng.standard_normal((n, dim))
    e_t = rng.standard_normal((n, dim))
    res = gap_trial(ops, e_v, e_t, 0.0, steps)
    a = ops["v"].toarray()
    delta = e_v - e_t
    predicted = [float(np.linalg.norm(delta))]
    for _ in range(steps):
        delta = a @ delta
        predicted.append(float(np.linalg.norm(delta)))
    match = float(np.max(np.abs(np.array(predicted) - np.array(res["gaps"]))))
    return {"gaps": res["gaps"], "intra_only_prediction_error": match,
            "nonincreasing": res["nonincreasing"], "passed": bool(match < 1e-10 and res["nonincreasing"])}


def run_all(n: int = 32, dim: int = 4, alphas=(0.1, 0.3, 0.5), betas=(0.1, 0.25, 0.4), trials: int = 20,
            gap_steps: int = 20, collapse_steps: int = 100, seed: int = 0) -> dict:
    resolvent = [resolvent_check(a, n=n, dim=dim, seed=seed) for a in alphas]
    collapse = collapse_check(n=n, dim=dim, steps=collapse_steps, seed=seed)
    gap = gap_contraction(betas, trials, gap_steps, n=max(2, n // 2), dim=dim, seed=seed)
    zero = beta_zero_report(n=max(2, n // 2), dim=dim, steps=gap_steps, seed=seed)
    passed = all(r["passed"] for r in resolvent) and collapse["passed"] and gap["passed"] and zero["passed"]
    return {"resolvent": resolvent, "collapse": collapse, "gap_contraction": gap, "beta_zero": zero,
            "passed": passed}
