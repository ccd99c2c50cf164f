"""scikit-learn style wrappers around FireCastNet and the recurrent baselines.

``FireCastNetClassifier`` works on whole grids: X is [N, ts, 14, H, W] and y is
[N, H, W], so ``predict_proba`` returns per-pixel probabilities rather than
the usual [n_samples, n_classes] matrix.  ``RecurrentBaselineClassifier`` is a
regular per-sample classifier over local patch sequences.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as tn
from .coupling import GridSpec
from .data import Sample
from .geomesh import build_multimesh
from .metrics import average_precision
from .model import (
    FireCastNetConfig,
    RecurrentConfig,
    firecastnet_forward,
    init_parameters,
    init_recurrent,
    prepare_graphs,
    recurrent_forward,
)
from .training import OptimizerState, TrainConfig, adamw_step, bce_loss, epoch_lr, train_loop


def check_grid_input(X, ts: Optional[int] = None, channels: int = 14) -> np.ndarray:
    """Validate a [N, ts, C, H, W] batch and return it as float32."""
    X = np.asarray(X)
    if X.ndim != 5:
        raise ValueError(f"expected X of shape [N, ts, C, H, W], got {X.shape}")
    if X.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[2]}")
    if ts is not None and X.shape[1] != ts:
        raise ValueError(f"expected ts={ts}, got {X.shape[1]}")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError("X must be numeric")
    X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains NaN or infinity; standardize and zero-fill first")
    return X


def check_grid_target(y, shape) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ValueError(f"expected y of shape {tuple(shape)}, got {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary")
    return y.astype(bool)


def check_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} != grid shape {tuple(shape)}")
    if not mask.any():
        raise ValueError("mask selects no cells")
    return mask


class _ArraySamples:
    """Minimal sample-set view over in-memory arrays for the training loop."""

    def __init__(self, X, y):
        self.X, self.y = X, y

    def __len__(self):
        return len(self.X)

    def input_at(self, k):
        return self.X[k]

    def __getitem__(self, k):
        return Sample(self.X[k], self.y[k], np.datetime64("NaT"), k, 0)


class FireCastNetClassifier(BaseEstimator):
    def __init__(
        self,
        mesh_level: int = 3,
        embed_channels: int = 64,
        mesh_hidden: int = 64,
        processor_layers: int = 12,
        spatial_reduction: int = 4,
        epochs: int = 50,
        lr: float = 1e-3,
        weight_decay: float = 1e-7,
        sgdr_cycles: tuple = (10, 40),
        batch_size: int = 1,
        random_state: int = 0,
        mask=None,
    ):
        self.mesh_level = mesh_level
        self.embed_channels = embed_channels
        self.mesh_hidden = mesh_hidden
        self.processor_layers = processor_layers
        self.spatial_reduction = spatial_reduction
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.sgdr_cycles = sgdr_cycles
        self.batch_size = batch_size
        self.random_state = random_state
        self.mask = mask

    def _forward(self, state):
        graphs = self.graphs_

        def fwd(x, training=False, rng=None):
            return firecastnet_forward(tn.Tensor(x), graphs, state)

        return fwd

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_grid_input(X)
        n, ts, _, h, w = X.shape
        y = check_grid_target(y, (n, h, w))
        self.mask_ = check_mask(self.mask, (h, w))
        self.config_ = FireCastNetConfig(
            ts=ts,
            embed_channels=self.embed_channels,
            mesh_hidden=self.mesh_hidden,
            processor_layers=self.processor_layers,
            spatial_reduction=self.spatial_reduction,
            mesh_level=self.mesh_level,
        )
        self.graphs_ = prepare_graphs(build_multimesh(self.mesh_level), GridSpec.global_grid(h, w), self.config_)
        state = init_parameters(self.config_, self.random_state)
        val = _ArraySamples(X[:0], y[:0])
        if X_val is not None:
            X_val = check_grid_input(X_val, ts)
            val = _ArraySamples(X_val, check_grid_target(y_val, (len(X_val), h, w)))
        cfg = TrainConfig(
            epochs=self.epochs,
            base_lr=self.lr,
            weight_decay=self.weight_decay,
            sgdr_cycles=tuple(self.sgdr_cycles),
            batch_size=self.batch_size,
            seed=self.random_state,
        )
        result = train_loop(state, self._forward(state), _ArraySamples(X, y), val, cfg, self.mask_)
        self.history_ = result.history
        self.state_ = result.best_state if X_val is not None else result.final_state
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        X = check_grid_input(X, self.config_.ts)
        fwd = self._forward(self.state_)
        with tn.no_grad():
            return np.stack([np.asarray(fwd(x).data, dtype=np.float64) for x in X])

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel fire probability, [N, H, W]."""
        return tn._sigmoid(self.decision_function(X))

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int8)

    def score(self, X, y) -> float:
        """Pooled average precision over the mask."""
        p = self.predict_proba(X)
        y = check_grid_target(y, p.shape)
        ap = average_precision(p[:, self.mask_], y[:, self.mask_])
        return float("nan") if ap is None else ap


class RecurrentBaselineClassifier(ClassifierMixin, BaseEstimator):
    """GRU / Conv-GRU / Conv-LSTM over per-location sequences.

    X is [N, T, C] for "gru" and [N, T, C, P, P] for the convolutional cells,
    with the label of the centre pixel in y.
    """

    def __init__(
        self,
        kind: str = "convlstm",
        hidden: int = 64,
        kernel: int = 5,
        dropout: float = 0.1,
        epochs: int = 10,
        lr: float = 1e-3,
        weight_decay: float = 1e-7,
        sgdr_cycles: tuple = (10, 40),
        batch_size: int = 64,
        random_state: int = 0,
    ):
        self.kind = kind
        self.hidden = hidden
        self.kernel = kernel
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.sgdr_cycles = sgdr_cycles
        self.batch_size = batch_size
        self.random_state = random_state

    def _check_X(self, X, fitted: bool = False) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        want = 3 if self.kind == "gru" else 5
        if X.ndim != want:
            raise ValueError(f"{self.kind} expects {want}-d input, got shape {X.shape}")
        if self.kind != "gru" and X.shape[-1] != X.shape[-2]:
            raise ValueError("patches must be square")
        if fitted and X.shape[2:] != self.input_shape_:
            raise ValueError(f"expected per-step shape {self.input_shape_}, got {X.shape[2:]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains NaN or infinity")
        return X

    def fit(self, X, y):
        X = self._check_X(X)
        y = np.asarray(y).ravel()
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples, y has {len(y)}")
        self.classes_ = np.unique(y)
        if not set(self.classes_.tolist()) <= {0, 1}:
            raise ValueError("y must be binary")
        self.input_shape_ = X.shape[2:]
        radius = (X.shape[-1] - 1) // 2 if self.kind != "gru" else 0
        cfg = RecurrentConfig(self.kind, X.shape[2], self.hidden, self.kernel, radius, self.dropout)
        state = init_recurrent(cfg, self.random_state)
        tcfg = TrainConfig(
            epochs=self.epochs, base_lr=self.lr, weight_decay=self.weight_decay,
            sgdr_cycles=tuple(self.sgdr_cycles), seed=self.random_state,
        )
        rng = np.random.default_rng(self.random_state)
        opt = OptimizerState()
        arrays = {k: v.data for k, v in state.params.items()}
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            lr = epoch_lr(epoch, tcfg)
            order = rng.permutation(len(X))
            losses = []
            for start in range(0, len(X), self.batch_size):
                idx = order[start : start + self.batch_size]
                state.zero_grad()
                logits = recurrent_forward(X[idx], state, training=True, rng=rng)
                loss = bce_loss(logits, y[idx], np.ones(len(idx), dtype=bool))
                loss.backward()
                grads = {k: v.grad for k, v in state.params.items() if v.grad is not None}
                adamw_step(opt, arrays, grads, lr, self.weight_decay)
                losses.append(float(loss.data))
            self.loss_curve_.append(float(np.mean(losses)))
        self.state_ = state
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        X = self._check_X(X, fitted=True)
        with tn.no_grad():
            return np.asarray(recurrent_forward(X, self.state_).data, dtype=np.float64)

    def predict_proba(self, X) -> np.ndarray:
        p = tn._sigmoid(self.decision_function(X))
        return np.stack([1 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)


def patch_sequences(samples, k: int, rows, cols, radius: int = 2) -> np.ndarray:
    """[len(rows), ts, C, 2r+1, 2r+1] patches of sample ``k`` (longitude wraps, poles zero-pad)."""
    x = samples.input_at(k)
    ts, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (radius, radius), (0, 0)))
    out = np.empty((len(rows), ts, c, 2 * radius + 1, 2 * radius + 1), dtype=x.dtype)
    offs = np.arange(-radius, radius + 1)
    for i, (r, col) in enumerate(zip(rows, cols)):
        rr = r + radius + offs
        cc = (col + offs) % w
        out[i] = padded[:, :, rr][:, :, :, cc]
    return out
