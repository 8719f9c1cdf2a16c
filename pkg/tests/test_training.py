import numpy as np
import pytest

from rainmix import autodiff as ad
from rainmix.imaging import CorpusConfig
from rainmix.moe import ToyModel, ToyModelConfig
from rainmix.reweight import MODES
from rainmix.training import (
    NonFiniteLossError,
    TrainConfig,
    load_training_corpus,
    train_toy,
)

SMALL = ToyModelConfig(expert_widths=(2, 3, 4, 5))


def config(**kw):
    base = dict(corpus=CorpusConfig(counts={t: 5 for t in ("DRS", "DRD", "NRS", "NRD")}, size=12),
                model=SMALL, iterations=8, eval_interval=4, holdout_per_type=2)
    base.update(kw)
    return TrainConfig(**base)


def test_defaults_are_logged():
    log = train_toy(config())
    assert log.params["window_size"] == 10 and log.params["tau"] == 5.0
    assert TrainConfig().learning_rate > 0 and TrainConfig().iterations == 2000


def test_same_seed_same_log():
    a, b = train_toy(config(seed=4)), train_toy(config(seed=4))
    assert a.to_csv() == b.to_csv()
    assert a.weights == b.weights
    assert train_toy(config(seed=5)).to_csv() != a.to_csv()


def test_rows_and_weights_shape():
    log = train_toy(config())
    assert [(r.iteration, r.type_id) for r in log.rows] == [(i, t) for i in (4, 8) for t in range(4)]
    assert len(log.weights) == 8
    for omega, af in log.weights:
        assert sum(omega) == pytest.approx(1.0, abs=1e-12)
        assert 0.0 <= af <= 1.0


@pytest.mark.parametrize("mode", MODES)
def test_every_mode_runs(mode):
    log = train_toy(config(mode=mode.upper()))
    assert log.params["mode"] == mode
    assert np.isfinite(log.worst_type_loss())


def test_uniform_mode_keeps_equal_weights():
    log = train_toy(config(mode="uniform"))
    assert all(omega == (0.25,) * 4 for omega, _ in log.weights)


def test_single_type_matches_plain_sgd():
    cfg = config(corpus=CorpusConfig(counts={"DRS": 6}, size=12), mode="uniform", iterations=5, float32=False)
    log = train_toy(cfg)

    # the same loop written out by hand
    clean, degraded, _ = load_training_corpus(cfg.corpus)
    rng = np.random.default_rng(cfg.seed)
    model = ToyModel(SMALL, seed=int(rng.integers(2**63)))
    train_idx = np.arange(4)
    for _ in range(5):
        picks = rng.choice(train_idx, size=1, replace=False)
        out = model.forward(degraded[picks], training=True, rng_seed=rng)
        loss = ad.mean(ad.l1_per_sample(out, clean[picks]))
        model.zero_grad()
        loss.backward()
        for p in model.parameters().values():
            if p.grad is not None:
                p.data -= cfg.learning_rate * p.grad
    for name, p in model.parameters().items():
        np.testing.assert_allclose(log.model.parameters()[name].data, p.data, rtol=0, atol=1e-12)


def test_non_finite_loss_aborts():
    clean, degraded, types = load_training_corpus(config().corpus)
    degraded = degraded.copy()
    degraded[types == 2] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train_toy(config(), corpus=(clean, degraded, types))
    assert info.value.step == 1


def test_missing_type_rejected():
    clean, degraded, types = load_training_corpus(config().corpus)
    keep = types != 1
    with pytest.raises(ValueError, match="missing"):
        train_toy(config(), corpus=(clean[keep], degraded[keep], types[keep]))


def test_holdout_too_large():
    with pytest.raises(ValueError, match="held-out"):
        train_toy(config(holdout_per_type=5))


@pytest.mark.parametrize("kw", [{"mode": "adaptive"}, {"iterations": 0}, {"learning_rate": 0.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        config(**kw)
