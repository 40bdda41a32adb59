import math

import numpy as np
import pytest

from tubelet import dataio, datasim
from tubelet import model as mdl
from tubelet import objectives as obj
from tubelet import tensor as tn
from tubelet import trainer as tr
from tubelet.errors import ConfigError, NumericalError

from oracles import adam_naive

MICRO = dict(T=4, H=20, W=20, d_e=16, depth=1, heads=2, ff_dim=32)


@pytest.fixture(scope="module")
def data():
    return datasim.make_dataset(5, 6, 20, 20, clouds=8, T=4)


def micro(variant="smts-vivit"):
    return mdl.ModelConfig.for_variant(variant, **MICRO)


# -- Adam ------------------------------------------------------------------

def test_zero_gradient_leaves_params():
    p = {"w": tn.parameter(np.array([1.0, -2.0]))}
    state = tr.OptimizerState.zeros_like(p)
    tr.adam_step(p, {"w": np.zeros(2)}, state, 1e-3)
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_first_step_moves_by_lr():
    p = {"w": tn.parameter(np.array([1.0, 1.0]))}
    state = tr.OptimizerState.zeros_like(p)
    tr.adam_step(p, {"w": np.array([0.5, -3.0])}, state, 0.1)
    np.testing.assert_allclose(p["w"].data, [0.9, 1.1], atol=1e-7)
    # Frozen: 1 - 0.1 * 0.5 / (0.5 + 1e-8).
    assert p["w"].data[0] == pytest.approx(0.900000002, abs=1e-15)


def test_quadratic_bowl_matches_scalar_adam():
    target = np.array([0.3, -1.2, 2.0])
    p = {"w": tn.parameter(np.array([1.0, 1.0, 1.0]))}
    state = tr.OptimizerState.zeros_like(p)
    history = []
    for _ in range(10):
        g = 2 * (p["w"].data - target)
        history.append(g.copy())
        tr.adam_step(p, {"w": g}, state, 0.05)
    np.testing.assert_allclose(p["w"].data, adam_naive(np.ones(3), history, 0.05), atol=1e-8)


def test_non_finite_gradient_names_parameter():
    p = {"enc.0.w": tn.parameter(np.ones(2))}
    state = tr.OptimizerState.zeros_like(p)
    with pytest.raises(NumericalError, match="enc.0.w"):
        tr.adam_step(p, {"enc.0.w": np.array([1.0, np.nan])}, state, 1e-3)
    assert state.step == 0 and np.array_equal(p["enc.0.w"].data, np.ones(2))


def test_lr_schedule():
    c = tr.TrainConfig()
    assert tr.lr_at(0, c) == 1e-3
    assert tr.lr_at(10, c) == pytest.approx(9.5e-4)
    assert tr.lr_at(199, c) == pytest.approx(1e-3 * 0.95 ** 19)
    lrs = [tr.lr_at(e, c) for e in range(200)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(lr=0)


def test_batches_keep_partial_of_two():
    idx = np.arange(10)
    assert [len(b) for b in tr.batches(idx, 8)] == [8, 2]
    assert [len(b) for b in tr.batches(np.arange(9), 8)] == [8]
    assert [len(b) for b in tr.batches(np.arange(1), 8)] == [1]
    # Full batches of one are not partial.
    assert [len(b) for b in tr.batches(np.arange(3), 1)] == [1, 1, 1]


# -- training --------------------------------------------------------------

def test_smoke_run_is_finite_and_deterministic(data):
    tc = tr.TrainConfig(epochs=2, batch_size=2, val_every=1)
    a = tr.train(data, micro(), tc, progress=None)
    b = tr.train(data, micro(), tc, progress=None)
    assert len(a.losses) == 2 and all(math.isfinite(v) for v in a.losses)
    assert a.losses == b.losses
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert [r["epoch"] for r in a.val_log] == [1, 2]


def test_every_parameter_is_updated(data):
    cfg = micro()
    res = tr.train(data, cfg, tr.TrainConfig(epochs=1, batch_size=4), progress=None)
    init = mdl.init_params(cfg, 42)
    moved = [k for k in init if not np.array_equal(init[k].data, res.params[k].data)]
    assert moved == list(init)
    assert all(np.any(res.state.v[k] > 0) for k in init)


def test_resume_reproduces_uninterrupted_run(data, tmp_path):
    cfg, tc = micro(), tr.TrainConfig(epochs=4, batch_size=2, val_every=2)
    full = tr.train(data, cfg, tc, progress=None)
    path = tmp_path / "half.tblt"
    tr.train(data, cfg, tc, checkpoint_path=str(path), progress=None, stop_after=2)
    resumed = tr.train(data, cfg, tc, resume=dataio.load_checkpoint(str(path)), progress=None)
    assert resumed.losses == full.losses
    assert resumed.val_log == full.val_log
    assert all(full.params[k].data.tobytes() == resumed.params[k].data.tobytes() for k in full.params)


def test_fusion_needs_sar(data):
    no_sar = datasim.Dataset(data.msi_clouded, None, data.mask, data.target)
    with pytest.raises(ConfigError):
        tr.train(no_sar, micro("smts-vivit"), tr.TrainConfig(epochs=1), progress=None)
    with pytest.raises(ConfigError):
        tr.train(data, mdl.ModelConfig.for_variant("mts-vivit"), tr.TrainConfig(epochs=1), progress=None)


def test_nan_loss_halts(data):
    cfg = micro()
    bad = mdl.init_params(cfg, 0)
    bad["dec.linear.bias"].data[:] = np.nan
    resume = tr.TrainResult(bad, tr.OptimizerState.zeros_like(bad))
    with pytest.raises(NumericalError, match="epoch 0, batch 0"):
        tr.train(data, cfg, tr.TrainConfig(epochs=1), resume=resume, progress=None)


def test_resampled_masks_change_the_run(data):
    cfg = micro()
    fixed = tr.train(data, cfg, tr.TrainConfig(epochs=1, batch_size=2), progress=None)
    moving = tr.train(data, cfg, tr.TrainConfig(epochs=1, batch_size=2, resample_masks=True), progress=None)
    assert fixed.losses != moving.losses


def test_variant_name_round_trip():
    for v in mdl.VARIANTS:
        assert tr.variant_name(mdl.ModelConfig.for_variant(v)) == v


def test_summarize_layout_and_means():
    cells = obj.MetricsReport()
    keys = obj.REPORT_COLUMNS[4:]
    rng = np.random.default_rng(0)
    for v in ("A", "B"):
        for c in (20, 30):
            for s in range(3):
                cells.add(v, c, s, "val", dict(zip(keys, rng.random(len(keys)))))
    table = tr.summarize(cells)
    assert [(r["variant"], r["clouds"]) for r in table.rows] == [
        ("A", 20), ("A", 30), ("B", 20), ("B", 30), ("A (AVG)", "-"), ("B (AVG)", "-")]
    a20 = [r["mse"] for r in cells.rows if r["variant"] == "A" and r["clouds"] == 20]
    assert abs(table.rows[0]["mse"] - np.mean(a20)) < 1e-12
    a_all = [r["mse"] for r in cells.rows if r["variant"] == "A"]
    assert abs(table.rows[4]["mse"] - np.mean(a_all)) < 1e-12
