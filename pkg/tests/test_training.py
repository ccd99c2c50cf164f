import json
import math

import numpy as np
import pytest

from firecastnet import data, model
from firecastnet import tensor as tn
from firecastnet.coupling import GridSpec
from firecastnet.training import (
    OptimizerState,
    TrainConfig,
    TrainingError,
    adam_step,
    adamw_step,
    bce_loss,
    cycle_position,
    epoch_lr,
    sgdr_lr,
    train_loop,
)

from conftest import toy_setup


def test_bce_examples():
    rng = np.random.default_rng(0)
    y = rng.random((4, 5)) < 0.5
    z = bce_loss(tn.Tensor(np.zeros((4, 5)), dtype=np.float64), y, np.ones((4, 5), bool))
    assert abs(float(z.data) - math.log(2)) < 1e-9
    z = bce_loss(tn.Tensor(np.array([[0.0, 2.0], [-2.0, 0.0]]), dtype=np.float64), np.array([[1, 1], [0, 0]]), np.ones((2, 2), bool))
    assert float(z.data) == pytest.approx(0.410038, abs=1e-6)
    z = bce_loss(tn.Tensor(np.array([[20.0]]), dtype=np.float64), np.array([[1]]), np.ones((1, 1), bool))
    assert float(z.data) < 1e-8
    with pytest.raises(TrainingError):
        bce_loss(tn.Tensor(np.zeros((2, 2))), np.zeros((2, 2)), np.zeros((2, 2), bool))


def check_mask_invariance(seed=0):
    """True if loss and logit gradient are bitwise unchanged by off-mask edits."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((16, 32)).astype(np.float32)
    y = rng.random((16, 32)) < 0.1
    mask = data.rect_region(GridSpec.global_grid(16, 32), "r", (0, 50), (-40, 60)).mask
    results = []
    for logits in (z, np.where(mask, z, z + 1e3 * rng.standard_normal(z.shape)).astype(np.float32)):
        t = tn.Tensor(logits, requires_grad=True, dtype=np.float32)
        loss = bce_loss(t, y, mask)
        loss.backward()
        results.append((loss.data.tobytes(), t.grad[mask].tobytes(), np.all(t.grad[~mask] == 0)))
    (l0, g0, zero0), (l1, g1, zero1) = results
    return l0 == l1 and g0 == g1 and zero0 and zero1


def test_loss_invariant_outside_mask():
    assert check_mask_invariance()


def test_adamw_decay_only():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st = OptimizerState()
    for _ in range(3):
        adamw_step(st, p, {"w": np.zeros(3)}, 1e-3, 1e-7)
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0, 3.0]) * (1 - 1e-10) ** 3, rtol=0, atol=1e-15)


def test_adamw_first_step_is_sign():
    p = {"w": np.array([0.5, 0.5, 0.5])}
    adamw_step(OptimizerState(), p, {"w": np.array([3.0, -0.01, 1e-3])}, 1e-3, 0.0)
    np.testing.assert_allclose(p["w"] - 0.5, [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_adamw_quadratic_bowl_descends():
    p = {"w": np.array([1.0, -0.7, 0.3])}
    st = OptimizerState()
    losses = [float(np.sum(p["w"] ** 2))]
    for _ in range(5):
        adamw_step(st, p, {"w": 2 * p["w"]}, 0.05, 1e-7)
        losses.append(float(np.sum(p["w"] ** 2)))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def check_adamw_equals_adam(steps=100, seed=0):
    rng = np.random.default_rng(seed)
    a = {"w": rng.standard_normal((5, 4)), "b": rng.standard_normal(4)}
    b = {k: v.copy() for k, v in a.items()}
    sa, sb = OptimizerState(), OptimizerState()
    for _ in range(steps):
        g = {k: rng.standard_normal(v.shape) for k, v in a.items()}
        adamw_step(sa, a, g, 1e-3, 0.0)
        adam_step(sb, b, g, 1e-3)
    return all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_adamw_without_decay_is_adam_bitwise():
    assert check_adamw_equals_adam()


def test_adamw_rejects_bad_gradients():
    p = {"w": np.ones(2)}
    with pytest.raises(TrainingError, match="non-finite"):
        adamw_step(OptimizerState(), p, {"w": np.array([np.nan, 0.0])}, 1e-3)
    with pytest.raises(TrainingError):
        adamw_step(OptimizerState(), p, {"w": np.ones(3)}, 1e-3)
    assert np.all(p["w"] == 1)


def test_sgdr_schedule():
    cfg = TrainConfig()
    assert epoch_lr(0, cfg) == 1e-3
    assert epoch_lr(10, cfg) == 1e-3
    assert epoch_lr(5, cfg) == pytest.approx(5e-4, abs=1e-15)
    assert epoch_lr(30, cfg) == pytest.approx(5e-4, abs=1e-15)
    assert epoch_lr(9, cfg) < epoch_lr(8, cfg)
    assert cycle_position(49, (10, 40)) == (1, 39, 40)
    assert cycle_position(50, (10, 40)) == (2, 0, 40)
    assert sgdr_lr(1, 2, 1.0, 0.0) == pytest.approx(0.5)


def _toy_training(tmp_path, small_cube, epochs=2, seed=0):
    with tn.precision(np.float32):
        cfg, graphs, state, _ = toy_setup(np.float32, hidden=4, layers=1, seed=seed)
    std = data.standardize(small_cube)
    tr, va, _ = data.split_by_years(std)
    ss = data.SampleSet(std, 6, 1, stride=6)
    train, val = ss.subset(tr), ss.subset(va)
    train = train.subset(train.targets[:4])
    val = val.subset(val.targets[:2])

    def fwd(x, training=False, rng=None):
        return model.firecastnet_forward(tn.Tensor(x), graphs, state)

    tc = TrainConfig(epochs=epochs, sgdr_cycles=(1, 2), seed=seed)
    res = train_loop(state, fwd, train, val, tc, std.land_mask(), tmp_path)
    return res, tmp_path


def test_train_loop_is_deterministic(tmp_path, small_cube):
    r1, d1 = _toy_training(tmp_path / "a", small_cube)
    r2, d2 = _toy_training(tmp_path / "b", small_cube)
    assert (d1 / "metrics.jsonl").read_bytes() == (d2 / "metrics.jsonl").read_bytes()
    for name in ("best.bin", "last.bin", "best.json", "last.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    lines = [json.loads(s) for s in (d1 / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    assert set(lines[0]) == {"epoch", "lr", "train_loss", "val_loss", "val_auprc"}
    assert r1.history == r2.history


def test_train_loop_rejects_zero_land_mask(small_cube):
    _, graphs, state, _ = toy_setup(np.float32, hidden=4, layers=1)
    ss = data.make_samples(small_cube, 6, 1, 6)
    with pytest.raises(TrainingError, match="zero land"):
        train_loop(state, lambda x, t, r: None, ss, ss.subset([]), TrainConfig(epochs=1), np.zeros((16, 32), bool))


def test_train_loop_rejects_overlapping_splits(small_cube):
    _, graphs, state, _ = toy_setup(np.float32, hidden=4, layers=1)
    ss = data.make_samples(small_cube, 6, 1, 6)
    with pytest.raises(TrainingError, match="share"):
        train_loop(state, lambda x, t, r: None, ss, ss, TrainConfig(epochs=1), np.ones((16, 32), bool))


def test_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(TrainingError):
        TrainConfig(sgdr_cycles=(0,)).validate()
    assert TrainConfig().to_dict()["betas"] == [0.9, 0.999]
