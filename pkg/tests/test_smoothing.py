import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magalign import oracles
from magalign.smoothing import (SmoothingConfig, collapse_monitor, coupled_smooth, gap_norm, joint_operator,
                                resolvent_fixed_point, restart_iterate, row_variance, SmoothingTrajectory)
from magalign.tensor import ShapeError, SparseRowMatrix, make_rng


def _ops(**mats):
    return {k: SparseRowMatrix.from_dense(np.asarray(v, dtype=float)) for k, v in mats.items()}


def _random_ops(n, rng, dense=False):
    out = {}
    for c in ("v", "t", "vt", "tv"):
        m = rng.uniform(0, 1, (n, n))
        if not dense:
            m *= rng.random((n, n)) < 0.5
            m[np.arange(n), rng.integers(0, n, n)] += 0.1  # no empty rows
        out[c] = SparseRowMatrix.from_dense(m / m.sum(axis=1, keepdims=True), row_stochastic=True)
    return out


def test_identity_propagation_keeps_embeddings():
    eye = np.eye(3)
    e = make_rng(0).standard_normal((3, 2))
    traj = coupled_smooth(_ops(v=eye, t=eye, vt=eye, tv=eye), e, e * 2, SmoothingConfig(5, 0.0, 0.0, False))
    assert all(np.array_equal(h, e) for h in traj.v)
    assert traj.depth == 5


def test_full_restart_returns_anchor():
    rng = make_rng(1)
    ops = _random_ops(4, rng)
    e = rng.standard_normal((4, 3))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    traj = coupled_smooth(ops, e, -e, SmoothingConfig(3, 0.4, 1.0, True))
    for k in range(1, 4):
        assert np.allclose(traj.v[k], e) and np.allclose(traj.t[k], -e)


def test_one_hand_step():
    half = np.full((2, 2), 0.5)
    traj = coupled_smooth(_ops(v=half, t=half, vt=half, tv=half), np.array([[1.0], [0.0]]),
                          np.array([[0.0], [1.0]]), SmoothingConfig(1, 0.5, 0.0, False))
    assert np.allclose(traj.v[1], [[0.5], [0.5]])
    assert np.allclose(traj.t[1], [[0.5], [0.5]])


def test_initial_state_is_embedding_and_rows_unit():
    rng = make_rng(2)
    ops = _random_ops(6, rng)
    e_v, e_t = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    traj = coupled_smooth(ops, e_v, e_t, SmoothingConfig(4, 0.3, 0.2, True))
    assert np.array_equal(traj.v[0], e_v) and np.array_equal(traj.t[0], e_t)
    for h in traj.v[1:] + traj.t[1:]:
        assert np.allclose(np.linalg.norm(h, axis=1), 1.0)


def test_deterministic_bits():
    rng = make_rng(3)
    ops = _random_ops(8, rng)
    e_v, e_t = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    cfg = SmoothingConfig(6, 0.4, 0.2)
    a, b = coupled_smooth(ops, e_v, e_t, cfg), coupled_smooth(ops, e_v, e_t, cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.v + a.t, b.v + b.t))


def test_beta_zero_ignores_cross_operators():
    rng = make_rng(4)
    ops = _random_ops(5, rng)
    e_v, e_t = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    cfg = SmoothingConfig(4, 0.0, 0.1)
    base = coupled_smooth(ops, e_v, e_t, cfg)
    junk = dict(ops, vt=SparseRowMatrix.from_dense(rng.standard_normal((5, 5)) * 100),
                tv=SparseRowMatrix.from_dense(rng.standard_normal((5, 5)) * 100))
    other = coupled_smooth(junk, e_v, e_t, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(base.v + base.t, other.v + other.t))


def test_shape_errors():
    eye = np.eye(3)
    ops = _ops(v=eye, t=eye, vt=eye, tv=eye)
    with pytest.raises(ShapeError):
        coupled_smooth(ops, np.ones((3, 2)), np.ones((3, 3)), SmoothingConfig(1))
    with pytest.raises(ShapeError):
        coupled_smooth(ops, np.ones((4, 2)), np.ones((4, 2)), SmoothingConfig(1))


@pytest.mark.parametrize("kw", [dict(depth=-1), dict(beta=1.5), dict(alpha=-0.1)])
def test_config_ranges(kw):
    with pytest.raises(ValueError):
        SmoothingConfig(**kw)


def test_joint_operator_blocks():
    rng = make_rng(5)
    ops = _random_ops(3, rng)
    dense = {c: ops[c].toarray() for c in ops}
    m0 = joint_operator(ops, 0.0).toarray()
    assert np.allclose(m0, np.block([[dense["v"], np.zeros((3, 3))], [np.zeros((3, 3)), dense["t"]]]))
    m1 = joint_operator(ops, 1.0).toarray()
    assert np.allclose(m1, np.block([[np.zeros((3, 3)), dense["vt"]], [dense["tv"], np.zeros((3, 3))]]))
    assert np.allclose(joint_operator(ops, 0.4).toarray().sum(axis=1), 1.0)


def test_joint_operator_identity_blocks():
    eye = np.eye(2)
    m = joint_operator(_ops(v=eye, t=eye, vt=eye, tv=eye), 0.3).toarray()
    expected = np.array([[0.7, 0, 0.3, 0], [0, 0.7, 0, 0.3], [0.3, 0, 0.7, 0], [0, 0.3, 0, 0.7]])
    assert np.allclose(m, expected)


def test_resolvent_closed_forms():
    e = make_rng(6).standard_normal((4, 2))
    assert np.array_equal(resolvent_fixed_point(np.eye(4), 0.0, 1.0, e), e)
    assert np.allclose(resolvent_fixed_point(np.eye(4), 0.0, 0.5, e), e)
    with pytest.raises(ValueError):
        resolvent_fixed_point(np.eye(4), 0.0, 0.0, e)
    with pytest.raises(ValueError, match="guard"):
        resolvent_fixed_point(np.eye(1026), 0.0, 0.5, np.zeros((1026, 1)))


def test_resolvent_matches_long_iteration():
    rng = make_rng(7)
    m = rng.uniform(0, 1, (8, 8))
    m /= m.sum(axis=1, keepdims=True)
    e = rng.standard_normal((8, 3))
    fixed = resolvent_fixed_point(m, 0.0, 0.2, e)
    h = restart_iterate(m, 0.0, 0.2, e, 10_000)[-1]
    assert np.abs(h - fixed).max() < 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.0, 1.0), st.integers(2, 32))
def test_restart_geometric_bound(seed, alpha, beta, n):
    rng = make_rng(seed)
    ops = _random_ops(n, rng)
    e = rng.standard_normal((2 * n, 3))
    fixed = resolvent_fixed_point(ops, beta, alpha, e)
    traj = restart_iterate(ops, beta, alpha, e, 30)
    r0 = np.abs(traj[0] - fixed).max()
    for k, h in enumerate(traj):
        assert np.abs(h - fixed).max() <= (1 - alpha) ** k * r0 * (1 + 1e-9) + 1e-12


def test_gap_norm_examples():
    same = SmoothingTrajectory([np.ones((2, 1))], [np.ones((2, 1))])
    assert gap_norm(same, 0) == 0
    assert gap_norm(SmoothingTrajectory([np.ones((1, 1))], [np.zeros((1, 1))]), 0) == 1
    tr = SmoothingTrajectory([np.array([[1.0], [0.0]])], [np.array([[0.0], [1.0]])])
    assert gap_norm(tr, 0) == pytest.approx(math.sqrt(2))
    with pytest.raises(IndexError):
        gap_norm(tr, 1)


def test_collapse_examples():
    e = make_rng(8).standard_normal((4, 3))
    var = collapse_monitor(np.full((4, 4), 0.25), 0.0, e, 2)
    assert var[1] == pytest.approx(0.0, abs=1e-25)
    assert collapse_monitor(np.eye(4), 0.0, np.ones((4, 3)), 1)[0] == 0
    lazy = 0.5 * np.eye(4) + 0.25 * (np.roll(np.eye(4), 1, axis=1) + np.roll(np.eye(4), -1, axis=1))
    var = collapse_monitor(lazy, 0.0, e, 50)
    assert var[50] < 1e-6 * var[0]
    assert row_variance(e) == pytest.approx(np.var(e, axis=0).mean())


def test_gap_contraction_doubly_stochastic():
    res = oracles.gap_contraction(trials=20)
    assert res["passed"]
    assert len(res["results"]) == 60


def test_beta_zero_follows_intra_dynamics():
    assert oracles.beta_zero_report()["passed"]


def test_dump_writes_every_state(tmp_path):
    rng = make_rng(9)
    ops = _random_ops(3, rng)
    traj = coupled_smooth(ops, rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), SmoothingConfig(2))
    traj.dump(tmp_path)
    assert len(list(tmp_path.glob("h_*.magf"))) == 6
