import numpy as np
import pytest

from firecastnet import data, model
from firecastnet import tensor as tn
from firecastnet.attribution import (
    AttributionError,
    aggregate_by_variable,
    integrated_gradients,
    masked_mean_sigmoid,
)

from conftest import toy_setup


def _linear(w):
    def fn(x):
        return tn.sum_(x * tn.Tensor(w, dtype=x.dtype))

    return fn


@pytest.mark.parametrize("steps", [1, 7])
def test_ig_exact_on_linear_models(steps):
    rng = np.random.default_rng(0)
    with tn.precision(np.float64):
        w = rng.standard_normal((3, 4))
        x = rng.standard_normal((3, 4))
        base = rng.standard_normal((3, 4))
        res = integrated_gradients(_linear(w), x, base, steps=steps)
    assert np.abs(res.attributions - w * (x - base)).max() < 1e-14
    assert res.completeness_residual < 1e-12


def test_ig_at_baseline_is_zero():
    x = np.ones((2, 3))
    res = integrated_gradients(_linear(np.arange(6.0).reshape(2, 3)), x, x, steps=5)
    assert np.all(res.attributions == 0)


def toy_ig(seed, steps=200, bias_std=0.5):
    """IG on the toy model with every parameter, biases included, drawn at random.

    Freshly initialised models have zero biases, so the cube embedding of the
    zero baseline is the zero vector and its layer norm is singular there.
    """
    with tn.precision(np.float64):
        cfg, graphs, state, x = toy_setup(np.float64, hidden=8, layers=2, seed=seed)
        rng = np.random.default_rng(seed)
        for name, p in state.params.items():
            if name.rsplit(".", 1)[-1] in ("b", "b1", "b2", "ln_b"):
                p.data[...] = bias_std * rng.standard_normal(p.shape)
        mask = np.zeros((16, 32), bool)
        mask[4:12, 8:24] = True
        fn = masked_mean_sigmoid(lambda t: model.firecastnet_forward(t, graphs, state), mask)
        return integrated_gradients(fn, x, steps=steps)


def check_toy_completeness(seeds=range(6), steps=200):
    """Worst residual over toy models with |F(x) - F(x')| > 1e-3, and how many qualified."""
    results = [toy_ig(s, steps) for s in seeds]
    kept = [r.completeness_residual for r in results if abs(r.delta) > 1e-3]
    return max(kept), len(kept)


def test_toy_completeness_at_200_steps():
    worst, n = check_toy_completeness()
    assert n >= 3
    assert worst < 0.01


def test_ig_errors():
    with pytest.raises(AttributionError):
        integrated_gradients(_linear(np.ones(2)), np.ones(2), steps=0)
    with pytest.raises(AttributionError):
        integrated_gradients(_linear(np.ones(2)), np.ones(2), np.zeros(3))
    with pytest.raises(AttributionError):
        integrated_gradients(_linear(np.ones(2)), np.ones(2), rule="trapezoid")
    with pytest.raises(AttributionError):
        masked_mean_sigmoid(lambda t: t, np.zeros(3, bool))


def test_midpoint_rule_converges():
    def cubic(x):
        return tn.sum_(x * x * x)

    x = np.array([1.0, -2.0])
    exact = x**3
    right = integrated_gradients(cubic, x, steps=50).attributions
    mid = integrated_gradients(cubic, x, steps=50, rule="midpoint").attributions
    assert np.abs(mid - exact).max() < np.abs(right - exact).max()


def test_aggregation_shares():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 14, 4, 5))
    rep = aggregate_by_variable(a, steps=200, residual=0.001, horizon=1)
    assert list(rep.shares) == list(data.INPUT_VARIABLES)
    assert sum(rep.shares.values()) == pytest.approx(1.0, abs=1e-6)
    assert all(v >= 0 for v in rep.shares.values())
    assert set(rep.positional) == set(data.POSITIONAL_CHANNELS)
    k = data.CHANNELS.index("vpd")
    assert rep.shares["vpd"] == pytest.approx(
        np.abs(a[:, k]).sum() / np.abs(a[:, :11]).sum(), rel=1e-12
    )


def test_single_variable_gets_full_share():
    a = np.zeros((2, 14, 3, 3))
    a[:, data.CHANNELS.index("ndvi")] = -0.5
    a[:, data.CHANNELS.index("cos_lat")] = 9.0
    rep = aggregate_by_variable(a)
    assert rep.shares["ndvi"] == 1.0
    assert rep.positional["cos_lat"] == 9.0 * 18


def test_all_zero_attributions_give_null_report():
    rep = aggregate_by_variable(np.zeros((1, 14, 2, 2)))
    assert rep.shares is None
    assert "zero" in rep.diagnostic
    with pytest.raises(AttributionError):
        aggregate_by_variable(np.zeros((1, 13, 2, 2)))


def test_duplicated_channels_preserve_shares():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((2, 14, 3, 3))
    k = data.CHANNELS.index("vpd")
    dup = np.concatenate([a, a[:, k : k + 1] / 2], axis=1)
    dup[:, k] /= 2
    layout = list(data.CHANNELS) + ["vpd"]
    base = aggregate_by_variable(a).shares
    split = aggregate_by_variable(dup, layout=layout).shares
    assert sorted(base, key=base.get) == sorted(split, key=split.get)
    for name in base:
        assert split[name] == pytest.approx(base[name], rel=1e-12)
