import numpy as np
import pytest

from magalign import training
from magalign.data import SplitConfig, SynthConfig, generate_synthetic
from magalign.model import ModelConfig, ModelParams
from magalign.objective import LossWeights, NonFiniteLoss
from magalign.readout import ReadoutConfig
from magalign.smoothing import SmoothingConfig
from magalign.topology import build_candidates
from magalign.training import Adam, TrainConfig, adam_step, aggregate, multi_seed_run, train


@pytest.fixture(scope="module")
def small():
    ds = generate_synthetic(SynthConfig(n=200, classes=4, dim=8, p_in=0.08, p_out=0.004, content=0.8, seed=3),
                            SplitConfig(seed=3))
    graphs = build_candidates(ds, ds.features_v, ds.features_t, 5, 5)
    cfg = ModelConfig(embed_dim=8, scorer_hidden=8, smoothing=SmoothingConfig(2, 0.4, 0.2),
                      readout=ReadoutConfig(width=4))
    return ds, graphs, cfg


def _train(small, **kw):
    ds, graphs, cfg = small
    base = dict(epochs=3, warmup=1, batch_size=64, lr=5e-3)
    base.update(kw)
    return train(ds, graphs, cfg, LossWeights(), TrainConfig(**base))


def test_zero_epochs_returns_initialization(small):
    res = _train(small, epochs=0, warmup=0)
    assert res.best.epoch == 0 and len(res.log) == 1
    assert np.isfinite(res.best.metric)


def test_zero_lr_leaves_parameters(small):
    ds, graphs, cfg = small
    init = training.new_params(ds, cfg, 43)
    res = _train(small, lr=0.0, epochs=2)
    assert all(np.array_equal(init[k], res.best.params[k]) for k in init)


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(epochs=2, warmup=3)
    with pytest.raises(ValueError, match="weighted recall"):
        TrainConfig(metric="weighted_recall")
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)


def test_adam_zero_gradient_decays_moments():
    p, g = np.ones(3), np.zeros(3)
    m, v = np.full(3, 0.5), np.full(3, 0.25)
    adam_step(p, g, m, v, 0.1, 0.9, 0.999, 1e-8, 5)
    assert np.allclose(m, 0.45) and np.allclose(v, 0.25 * 0.999)


def test_adam_constant_gradient_limit():
    p = np.zeros(4)
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    m, v = np.zeros(4), np.zeros(4)
    lr = 0.01
    for t in range(1, 1001):
        before = p.copy()
        adam_step(p, g, m, v, lr, 0.9, 0.999, 1e-8, t)
    step = before - p
    assert np.allclose(step, lr * np.sign(g), rtol=0.01)


def test_adam_deterministic_ten_steps():
    def run():
        params = ModelParams({"a": np.linspace(-1, 1, 6).reshape(2, 3)})
        opt = Adam()
        rng = np.random.default_rng(0)
        for _ in range(10):
            params.grads["a"][:] = rng.standard_normal((2, 3))
            opt.step(params, 1e-2)
        return params["a"]
    assert run().tobytes() == run().tobytes()


def test_training_is_deterministic(small):
    a, b = _train(small), _train(small)
    assert a.log == b.log
    assert all(a.best.params[k].tobytes() == b.best.params[k].tobytes() for k in a.best.params)


def test_warmup_keeps_non_adapter_params_exactly(small, monkeypatch):
    ds, graphs, cfg = small
    init = training.new_params(ds, cfg, 43)
    seen = {}
    orig = training.validate

    def spy(params, *args, **kw):
        seen[len(seen)] = params.copy()
        return orig(params, *args, **kw)

    monkeypatch.setattr(training, "validate", spy)
    _train(small, epochs=2, warmup=2)
    after_warmup = seen[2]
    for k in init:
        moved = not np.array_equal(init[k], after_warmup[k])
        assert moved == k.startswith("adapter."), k


def test_test_nodes_never_touched(small, monkeypatch):
    ds, graphs, cfg = small
    test = set(ds.nodes("test").tolist())
    train_set = set(ds.nodes("train").tolist())
    queried, batches = [], []
    orig_metrics, orig_loss = training.retrieval_metrics, training.total_loss_and_grad

    def metrics_spy(z_v, z_t, query, gallery=None, label="test"):
        queried.append(set(np.asarray(query).tolist()) | set(np.asarray(query if gallery is None else gallery).tolist()))
        return orig_metrics(z_v, z_t, query, gallery, label)

    def loss_spy(params, x_v, x_t, graphs, cfg, weights, batch, gallery, **kw):
        batches.append(set(np.asarray(batch).tolist()) | set(np.asarray(gallery).tolist()))
        return orig_loss(params, x_v, x_t, graphs, cfg, weights, batch, gallery, **kw)

    monkeypatch.setattr(training, "retrieval_metrics", metrics_spy)
    monkeypatch.setattr(training, "total_loss_and_grad", loss_spy)
    _train(small)
    assert queried and all(not (q & test) for q in queried)
    assert batches and all(b <= train_set for b in batches)


def test_graph_phase_does_not_hurt(small):
    res = _train(small, epochs=30, warmup=5, metric="r1", patience=30)
    warm_end = res.log[5]["val"]["r1"]
    assert res.log[5]["phase"] == "warmup"
    assert res.log[-1]["val"]["r1"] >= warm_end


def test_warmup_loss_settles(small):
    res = _train(small, epochs=8, warmup=8, batch_size=512, lr=1e-2)
    losses = [e["loss"] for e in res.log[1:]]
    assert all(b <= a + 1e-12 for a, b in zip(losses[1:], losses[2:]))


def test_non_finite_loss_keeps_last_checkpoint(small, monkeypatch):
    calls = {"n": 0}
    orig = training.total_loss_and_grad

    def diverge(*args, **kw):
        calls["n"] += 1
        if calls["n"] > 4:  # 120 train nodes, batch 64: two steps per epoch
            raise NonFiniteLoss("align", float("nan"))
        return orig(*args, **kw)

    monkeypatch.setattr(training, "total_loss_and_grad", diverge)
    res = _train(small, epochs=4, warmup=0, metric="mrr")
    assert res.aborted and "align" in res.aborted
    assert res.log[-1]["phase"] == "aborted"
    assert res.best.epoch <= 2 and np.isfinite(res.best.metric)


def test_aggregate_and_multiseed():
    assert aggregate([0.5]) == (0.5, 0.0)
    mean, std = aggregate([1.0, 2.0, 4.0])
    assert mean == pytest.approx(7 / 3)
    assert std == pytest.approx(np.sqrt(((1 - 7 / 3) ** 2 + (2 - 7 / 3) ** 2 + (4 - 7 / 3) ** 2) / 2))
    out = multi_seed_run([43, 43], lambda s: {"r1": 10.0 + s})
    assert out["summary"]["r1"] == {"mean": 53.0, "std": 0.0}

    def flaky(seed):
        if seed == 44:
            raise RuntimeError("boom")
        return {"r1": float(seed)}

    out = multi_seed_run([43, 44, 45], flaky)
    assert set(out["per_seed"]) == {43, 45}
    assert "boom" in out["failures"][44]
    assert out["summary"]["r1"]["mean"] == 44.0
    with pytest.raises(ValueError):
        multi_seed_run([], flaky)
