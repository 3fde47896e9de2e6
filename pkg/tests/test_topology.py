import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magalign.data import MagDataset, SplitConfig, SynthConfig, assign_split, generate_synthetic
from magalign.tensor import ShapeError, make_rng
from magalign.topology import (CHANNELS, CandidateGraphs, Channel, build_candidates, knn, normalize_operators,
                               score_edges, score_pairs, uniform_operators)


def _ds(n, edges, feats=None, dim=4):
    rng = make_rng(1)
    fv = rng.standard_normal((n, dim)) if feats is None else feats
    return MagDataset(fv, fv.copy(), np.array(edges, dtype=np.int64).reshape(-1, 2), assign_split(n, SplitConfig()))


def _pairs(ch):
    return set(zip(ch.target.tolist(), ch.source.tolist()))


def test_structure_and_self_loops_count():
    ds = _ds(3, [[0, 1], [1, 2]])
    g = build_candidates(ds, ds.features_v, ds.features_t, 0, 0, "hybrid")
    assert len(g["v"]) == 7
    assert _pairs(g["v"]) == {(0, 1), (1, 0), (1, 2), (2, 1), (0, 0), (1, 1), (2, 2)}
    assert _pairs(g["vt"]) == {(0, 1), (1, 0), (1, 2), (2, 1)}


def test_identical_rows_are_each_others_neighbour():
    feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]])
    nb = knn(feats, feats, 1, exclude_diagonal=True)
    assert nb[0, 0] == 1 and nb[1, 0] == 0


def test_knn_tie_break_prefers_smaller_index():
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
    assert knn(feats, feats, 2, exclude_diagonal=True)[0].tolist() == [1, 2]


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SynthConfig(n=120, classes=4, p_in=0.1, p_out=0.01, content=0.5))


def test_candidate_invariants(synth):
    g = build_candidates(synth, synth.features_v, synth.features_t, 5, 5)
    idx = np.arange(synth.n)
    for c in CHANNELS:
        keys = g[c].keys
        assert np.all(np.diff(keys) > 0)  # sorted and deduplicated
    for c in ("v", "t"):
        assert np.all(g[c].contains(idx, idx))
    for c in ("vt", "tv"):
        assert not np.any(g[c].contains(idx, idx))
    assert _pairs(g["tv"]) == {(s, t) for t, s in _pairs(g["vt"])}


def test_self_pair_controls(synth):
    idx = np.arange(synth.n)
    g = build_candidates(synth, synth.features_v, synth.features_t, 5, 5, allow_self_pairs=True)
    assert np.all(g["vt"].contains(idx, idx))
    g = build_candidates(synth, synth.features_v, synth.features_t, 5, 5, only_self_pairs=True)
    assert _pairs(g["vt"]) == {(i, i) for i in range(synth.n)}


def test_structure_only_shares_pattern(synth):
    g = build_candidates(synth, synth.features_v, synth.features_t, 5, 5, "structure_only")
    off = [{p for p in _pairs(g[c]) if p[0] != p[1]} for c in CHANNELS]
    assert all(o == off[0] for o in off)
    assert len(off[0]) == 2 * len(synth.edges)


def test_deterministic(synth):
    a = build_candidates(synth, synth.features_v, synth.features_t, 5, 5)
    b = build_candidates(synth, synth.features_v, synth.features_t, 5, 5)
    assert all(np.array_equal(a[c].keys, b[c].keys) for c in CHANNELS)


def test_k_clamped_with_warning(caplog):
    ds = _ds(4, [[0, 1]])
    g = build_candidates(ds, ds.features_v, ds.features_t, 10, 10)
    assert "clamping" in caplog.text
    assert len(g["v"]) == 16  # complete graph with self-loops


def test_negative_k_and_row_mismatch():
    ds = _ds(4, [[0, 1]])
    with pytest.raises(ValueError):
        build_candidates(ds, ds.features_v, ds.features_t, -1, 0)
    with pytest.raises(ShapeError):
        build_candidates(ds, ds.features_v[:3], ds.features_t, 1, 1)


def test_save_load_roundtrip(tmp_path, synth):
    g = build_candidates(synth, synth.features_v, synth.features_t, 3, 3)
    g.save(tmp_path, seed=7)
    assert "seed=7" in (tmp_path / "candidates_vt.txt").read_text().splitlines()[0]
    h = CandidateGraphs.load(tmp_path)
    assert (h.mode, h.k_intra, h.k_cross, h.n) == (g.mode, 3, 3, g.n)
    assert all(np.array_equal(g[c].keys, h[c].keys) for c in CHANNELS)


def test_zero_params_give_zero_logits():
    e = make_rng(0).standard_normal((5, 3))
    logits, _ = score_pairs(e, e, np.array([0, 1]), np.array([2, 3]), np.zeros((4, 3)), np.zeros(4), np.zeros(4))
    assert np.all(logits == 0)


def test_single_unit_closed_form():
    e = np.array([[1.0, 0.0, 0.0]])
    w = np.array([[1.0, 0.0, 0.0]])
    logits, _ = score_pairs(e, e, np.array([0]), np.array([0]), w, np.zeros(1), np.ones(1))
    assert logits[0] == pytest.approx(math.tanh(1.0), abs=1e-12)
    assert logits[0] == pytest.approx(0.7616, abs=1e-4)


def test_outer_projection_is_linear():
    rng = make_rng(2)
    e = rng.standard_normal((6, 3))
    w, a = rng.standard_normal((4, 3)), rng.standard_normal(4)
    t, s = np.array([0, 1, 2]), np.array([3, 4, 5])
    one, _ = score_pairs(e, e, t, s, w, np.zeros(4), a)
    two, _ = score_pairs(e, e, t, s, w, np.zeros(4), 2 * a)
    assert np.allclose(two, 2 * one)


def test_score_dimension_mismatch():
    e = np.ones((2, 3))
    with pytest.raises(ShapeError):
        score_pairs(e, e, np.array([0]), np.array([1]), np.ones((4, 5)), np.zeros(4), np.ones(4))


def _tiny_graphs():
    # node 0: self + neighbour 1 in v; node 1: self only; vt has a single edge 0 <- 1
    ch_v = Channel.from_pairs(2, [0, 0, 1], [0, 1, 1])
    ch_vt = Channel.from_pairs(2, [0], [1])
    ch_tv = Channel.from_pairs(2, [1], [0])
    return CandidateGraphs(2, {"v": ch_v, "t": ch_v, "vt": ch_vt, "tv": ch_tv})


def test_softmax_closed_forms():
    g = _tiny_graphs()
    logits = {"v": np.array([math.log(3.0), 0.0, 5.0]), "t": np.zeros(3), "vt": np.array([2.0]), "tv": np.array([-1.0])}
    ops = normalize_operators(g, logits)
    assert np.allclose(ops["v"].toarray(), [[0.75, 0.25], [0.0, 1.0]])
    assert np.allclose(ops["t"].toarray(), [[0.5, 0.5], [0.0, 1.0]])
    assert np.allclose(ops["vt"].toarray(), [[0.0, 1.0], [0.0, 0.0]])  # empty row stays zero


def test_uniform_operators_rows():
    g = _tiny_graphs()
    ops = uniform_operators(g)
    assert np.allclose(ops["v"].row_sums(), 1.0)
    assert ops["vt"].row_sums().tolist() == [1.0, 0.0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_operators_row_stochastic_and_row_local(seed):
    rng = make_rng(seed)
    ds = generate_synthetic(SynthConfig(n=30, classes=3, dim=6, p_in=0.2, p_out=0.02, seed=seed))
    g = build_candidates(ds, ds.features_v, ds.features_t, 3, 3)
    logits = {c: rng.standard_normal(len(g[c])) * 5 for c in CHANNELS}
    ops = normalize_operators(g, logits)
    for c in CHANNELS:
        sums = ops[c].row_sums()
        live = np.diff(g[c].offsets) > 0
        assert np.allclose(sums[live], 1.0, atol=1e-9)
        assert np.all((ops[c].data > 0) & (ops[c].data <= 1))
        assert np.array_equal(ops[c].indices, g[c].source)
    # perturb row 0 of the v channel; other rows must not move
    bumped = dict(logits)
    bumped["v"] = logits["v"].copy()
    lo, hi = g["v"].offsets[:2]
    bumped["v"][lo:hi] += rng.standard_normal(hi - lo)
    ops2 = normalize_operators(g, bumped)
    assert np.array_equal(ops2["v"].data[hi:], ops["v"].data[hi:])


def test_score_edges_uses_channel_endpoints():
    rng = make_rng(4)
    g = _tiny_graphs()
    e_v, e_t = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    scorer = {c: (rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal(4)) for c in CHANNELS}
    out = score_edges(g, e_v, e_t, scorer)
    w, b, a = scorer["vt"]
    expected = a @ np.tanh(w @ (e_v[0] * e_t[1]) + b)
    assert out["vt"][0] == pytest.approx(expected)
