"""Integrated Gradients and per-variable aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as tn
from .data import CHANNELS, INPUT_VARIABLES, POSITIONAL_CHANNELS


class AttributionError(ValueError):
    pass


@dataclass
class IGResult:
    attributions: np.ndarray
    steps: int
    rule: str
    f_input: float
    f_baseline: float

    @property
    def delta(self) -> float:
        return self.f_input - self.f_baseline

    @property
    def completeness_residual(self) -> float:
        """|sum IG - (F(x) - F(x'))| / |F(x) - F(x')|."""
        total = float(np.sum(self.attributions, dtype=np.float64))
        d = self.delta
        if d == 0:
            return abs(total)
        return abs(total - d) / abs(d)


def masked_mean_sigmoid(forward: Callable, mask) -> Callable:
    """Scalar target: mean sigmoid probability of ``forward(x)`` over ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise AttributionError("attribution mask selects no cells")

    def scalar(x: tn.Tensor) -> tn.Tensor:
        probs = tn.sigmoid(forward(x))
        weights = tn.Tensor((mask / n).astype(probs.dtype))
        return tn.sum_(probs * weights)

    return scalar


def integrated_gradients(
    fn: Callable,
    x,
    baseline=None,
    steps: int = 200,
    rule: str = "right",
) -> IGResult:
    """IG_i = (x_i - x'_i) * mean_k dF(x' + a_k (x - x')) / dx_i.

    ``rule`` picks the quadrature nodes a_k: "right" uses k/m for k = 1..m,
    "midpoint" uses (k - 1/2)/m.  ``fn`` maps a Tensor to a scalar Tensor.
    """
    if steps < 1:
        raise AttributionError("steps must be >= 1")
    x = np.asarray(x.data if isinstance(x, tn.Tensor) else x)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.dtype(tn.default_dtype())
    x = x.astype(dtype)
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=dtype)
    if base.shape != x.shape:
        raise AttributionError(f"baseline shape {base.shape} != input shape {x.shape}")
    if rule == "right":
        alphas = np.arange(1, steps + 1) / steps
    elif rule == "midpoint":
        alphas = (np.arange(steps) + 0.5) / steps
    else:
        raise AttributionError(f"unknown quadrature rule {rule!r}")
    diff = x - base
    total = np.zeros(x.shape, dtype=np.float64)
    for a in alphas:
        point = tn.Tensor(base + dtype.type(a) * diff, requires_grad=True, dtype=dtype)
        out = fn(point)
        out.backward()
        g = point.grad
        if g is None:
            g = np.zeros_like(x)
        if not np.all(np.isfinite(g)):
            raise AttributionError(f"non-finite gradient at path point alpha={a}")
        total += g
    attributions = diff * (total / steps)
    with tn.no_grad():
        f_x = float(fn(tn.Tensor(x, dtype=dtype)).data)
        f_b = float(fn(tn.Tensor(base, dtype=dtype)).data)
    return IGResult(attributions, steps, rule, f_x, f_b)


@dataclass
class AttributionReport:
    shares: Optional[dict]
    positional: dict
    steps: int
    baseline: str
    completeness_residual: Optional[float]
    horizon: Optional[int] = None
    diagnostic: Optional[str] = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "shares": self.shares,
            "positional": self.positional,
            "steps": self.steps,
            "baseline": self.baseline,
            "completeness_residual": self.completeness_residual,
            "horizon": self.horizon,
            "diagnostic": self.diagnostic,
            "config": self.config,
        }


def aggregate_by_variable(
    attributions,
    layout: Sequence[str] = CHANNELS,
    positional: Sequence[str] = POSITIONAL_CHANNELS,
    channel_axis: int = 1,
    steps: int = 0,
    baseline: str = "zero",
    residual: Optional[float] = None,
    horizon: Optional[int] = None,
) -> AttributionReport:
    """Per-variable share of sum |IG| over time steps and cells.

    ``layout`` names the variable of each channel (names may repeat).
    Positional channels get raw magnitudes and stay out of the normalisation.
    """
    a = np.abs(np.asarray(attributions, dtype=np.float64))
    a = np.moveaxis(a, channel_axis, 0)
    if a.shape[0] != len(layout):
        raise AttributionError(f"layout has {len(layout)} channels, attributions have {a.shape[0]}")
    per_channel = a.reshape(a.shape[0], -1).sum(axis=1)
    names = list(dict.fromkeys(n for n in layout if n not in positional))
    magnitude = {n: 0.0 for n in names}
    pos = {n: 0.0 for n in dict.fromkeys(n for n in layout if n in positional)}
    for name, value in zip(layout, per_channel):
        if name in positional:
            pos[name] += float(value)
        else:
            magnitude[name] += float(value)
    total = sum(magnitude.values())
    if total == 0:
        return AttributionReport(
            None, pos, steps, baseline, residual, horizon, "all variable attributions are zero"
        )
    shares = {n: magnitude[n] / total for n in names}
    return AttributionReport(shares, pos, steps, baseline, residual, horizon)
