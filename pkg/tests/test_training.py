import numpy as np
import pytest

from underspec.core import MlpSpec, input_gradients
from underspec.datasets import Batch
from underspec.errors import BadMagic, ConfigError, ShapeError, TruncatedFile
from underspec.losses import LossWeights, indep_loss
from underspec.training import (ConvergenceLog, ModelSet, TrainConfig, init_models, load_model_set,
                                predictive_losses, save_model_set, train_models)


def toy(n=200, d=4, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, d)) * 0.3 + (2 * y[:, None] - 1)
    return Batch(x, y)


def test_shared_init_without_regularizers_gives_identical_models():
    spec = MlpSpec((4, 3, 1))
    cfg = TrainConfig(3, spec, LossWeights(), n_updates=50, batch_size=32, shared_init=True)
    ms, _ = train_models(cfg, toy(), toy(seed=1))
    for p in ms.params[1:]:
        np.testing.assert_array_equal(p.flatten(), ms.params[0].flatten())


def test_same_seed_is_bit_identical():
    spec = MlpSpec((4, 3, 1))
    cfg = TrainConfig(2, spec, LossWeights(1.0, 0.0), n_updates=40, batch_size=32, seed=5)
    a, ha = train_models(cfg, toy(), toy(seed=1))
    b, hb = train_models(cfg, toy(), toy(seed=1))
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p.flatten(), q.flatten())
    assert ha.rows == hb.rows


def test_independence_makes_two_dim_gradients_orthogonal():
    rng = np.random.default_rng(0)
    n = 400
    y = rng.integers(0, 2, n)
    s = 2.0 * y - 1.0
    x = np.column_stack([s, s]) + 0.1 * rng.standard_normal((n, 2))
    batch = Batch(x, y)
    spec = MlpSpec((2, 8, 1))
    cfg = TrainConfig(2, spec, LossWeights(lambda_indep=1.0), n_updates=1500, batch_size=64, seed=0)
    ms, hist = train_models(cfg, batch, batch)
    g0, g1 = (input_gradients(spec, p, x) for p in ms.params)
    vals = np.array([indep_loss(a, b) for a, b in zip(g0, g1)])
    assert np.mean(vals <= 0.05) >= 0.95
    assert all(tr < 0.3 for tr, _ in hist.final())


def test_training_reduces_loss():
    spec = MlpSpec((4, 3, 1))
    cfg = TrainConfig(2, spec, LossWeights(), n_updates=100, batch_size=32, eval_every=50)
    _, hist = train_models(cfg, toy(), toy(seed=1))
    first, last = hist.first(), hist.final()
    assert all(l[0] < f[0] for f, l in zip(first, last))
    assert sorted({r[2] for r in hist.rows}) == [0, 50, 100]


def test_threaded_workers_match_serial():
    spec = MlpSpec((4, 3, 1))
    kw = dict(n_models=3, spec=spec, weights=LossWeights(1.0, 0.0), n_updates=20, batch_size=32)
    a, _ = train_models(TrainConfig(**kw), toy(), toy(seed=1))
    b, _ = train_models(TrainConfig(workers=2, **kw), toy(), toy(seed=1))
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p.flatten(), q.flatten())


def test_input_masks_all_ones_is_plain_training():
    spec = MlpSpec((4, 3, 1))
    cfg = TrainConfig(1, spec, LossWeights(), n_updates=30, batch_size=32)
    train = toy()
    a, _ = train_models(cfg, train, train)
    b, _ = train_models(cfg, train, train, input_masks=np.ones(train.inputs.shape, dtype=bool))
    np.testing.assert_array_equal(a.params[0].flatten(), b.params[0].flatten())
    with pytest.raises(ShapeError):
        train_models(cfg, train, train, input_masks=np.ones((3, 4), dtype=bool))


@pytest.mark.parametrize("field,kw", [("n_models", {"n_models": 0}), ("batch_size", {"batch_size": 0}),
                                      ("n_updates", {"n_updates": -1}), ("lr", {"lr": 0.0})])
def test_config_validation(field, kw):
    cfg = TrainConfig(spec=MlpSpec((4, 1)), **kw)
    with pytest.raises(ConfigError) as err:
        train_models(cfg, toy(), toy())
    assert err.value.field == field


def test_predictive_losses_and_convergence():
    spec = MlpSpec((4, 1))
    models = init_models(spec, 2, 0)
    losses = predictive_losses(spec, models, toy())
    assert len(losses) == 2 and all(np.isfinite(losses))
    log = ConvergenceLog()
    log.record(0, 0, [0.5, 0.1], [0.6, 0.2])
    log.record(1, 10, [0.2, 0.1], [0.25, 0.4])
    assert log.converged(0.3, 0.3) == [0]


def test_convergence_csv_round_trip(tmp_path):
    log = ConvergenceLog()
    log.record(0, 0, [0.1234567890123, 0.2], [0.3, 0.4])
    log.write_csv(tmp_path / "c.csv")
    assert ConvergenceLog.read_csv(tmp_path / "c.csv").rows == log.rows


def test_model_set_round_trip(tmp_path):
    spec = MlpSpec((5, 3, 2, 1), slope=0.02)
    ms = ModelSet(spec, init_models(spec, 3, 7))
    save_model_set(tmp_path / "m.udm", ms)
    got = load_model_set(tmp_path / "m.udm")
    assert got.spec == spec
    for p, q in zip(ms.params, got.params):
        np.testing.assert_array_equal(p.flatten(), q.flatten())
    raw = (tmp_path / "m.udm").read_bytes()
    (tmp_path / "t.udm").write_bytes(raw[:-1])
    with pytest.raises(TruncatedFile):
        load_model_set(tmp_path / "t.udm")
    (tmp_path / "b.udm").write_bytes(b"UDM1" + raw[4:])
    with pytest.raises(BadMagic):
        load_model_set(tmp_path / "b.udm")
