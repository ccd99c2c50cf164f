"""Masked BCE loss, AdamW, the SGDR schedule and the epoch loop."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as tn
from .metrics import average_precision
from .model import ModelState, save_checkpoint


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    base_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 1e-7
    sgdr_cycles: tuple = (10, 40)
    batch_size: int = 1
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: Optional[float] = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise TrainingError("base_lr must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not self.sgdr_cycles or any(c < 1 for c in self.sgdr_cycles):
            raise TrainingError("sgdr cycle lengths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sgdr_cycles"] = list(self.sgdr_cycles)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# loss


def bce_loss(logits, target, mask) -> tn.Tensor:
    """Mean stable-form BCE over masked cells."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise TrainingError("loss mask selects no cells")
    return tn.bce_with_logits(logits, np.asarray(target), mask)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _moments(state: OptimizerState, name: str, p: np.ndarray, g: np.ndarray):
    b1, b2 = state.betas
    if name not in state.m:
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    m = state.m[name]
    v = state.v[name]
    if m.shape != p.shape:
        raise TrainingError(f"moment shape {m.shape} != parameter {name!r} shape {p.shape}")
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    t = state.step
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return m_hat / (np.sqrt(v_hat) + state.eps)


def _check_grads(params: dict, grads: dict) -> None:
    for name, g in grads.items():
        if name not in params:
            raise TrainingError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter {name!r} shape")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r}; step rejected")


def adamw_step(state: OptimizerState, params: dict, grads: dict, lr: float, weight_decay: float = 0.0):
    """theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta (in place).

    ``params`` maps names to numpy arrays; missing gradients skip the parameter.
    """
    _check_grads(params, grads)
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        decay = lr * weight_decay * p if weight_decay else None
        p -= lr * _moments(state, name, p, g)
        if decay is not None:
            p -= decay
    return params


def adam_step(state: OptimizerState, params: dict, grads: dict, lr: float, l2: float = 0.0):
    """Plain Adam; ``l2`` adds a coupled L2 term to the gradient."""
    _check_grads(params, grads)
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if l2:
            g = g + l2 * p
        p -= lr * _moments(state, name, p, g)
    return params


# ---------------------------------------------------------------------------
# schedule


def cycle_position(epoch: int, cycles: Sequence[int]) -> tuple[int, int, int]:
    """(cycle index, epochs into the cycle, cycle length); the last cycle repeats."""
    if epoch < 0:
        raise TrainingError("epoch must be non-negative")
    start = 0
    for i, length in enumerate(cycles):
        if epoch < start + length:
            return i, epoch - start, length
        start += length
    last = cycles[-1]
    extra = epoch - start
    return len(cycles) + extra // last, extra % last, last


def sgdr_lr(t_cur: float, cycle_length: float, eta_max: float = 1e-3, eta_min: float = 0.0) -> float:
    """Cosine annealing inside one warm-restart cycle."""
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t_cur / cycle_length))


def epoch_lr(epoch: int, cfg: TrainConfig) -> float:
    _, t_cur, length = cycle_position(epoch, cfg.sgdr_cycles)
    return sgdr_lr(t_cur, length, cfg.base_lr, cfg.min_lr)


# ---------------------------------------------------------------------------
# loop

ForwardFn = Callable[[np.ndarray, bool, np.random.Generator], tn.Tensor]


@dataclass
class TrainResult:
    history: list
    best_state: ModelState
    best_epoch: int
    best_val_auprc: Optional[float]
    final_state: ModelState


def _arrays(state: ModelState) -> dict:
    return {k: v.data for k, v in state.params.items()}


def _grads(state: ModelState) -> dict:
    return {k: v.grad for k, v in state.params.items() if v.grad is not None}


def _clip(grads: dict, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def validate_mask(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise TrainingError("loss mask covers zero land cells; check the region mask")
    return mask


def predict_set(forward: ForwardFn, samples) -> np.ndarray:
    """Sigmoid scores [N, H, W] for every sample, in order."""
    out = []
    with tn.no_grad():
        for k in range(len(samples)):
            logits = forward(samples.input_at(k), False, None).data
            out.append(tn._sigmoid(np.asarray(logits, dtype=np.float64)).astype(np.float32))
    return np.stack(out) if out else np.zeros((0,))


def evaluate_set(forward: ForwardFn, samples, mask) -> tuple[Optional[float], float]:
    """(pooled AUPRC, mean masked BCE) over a sample set."""
    if len(samples) == 0:
        return None, float("nan")
    scores, labels, losses = [], [], []
    with tn.no_grad():
        for k in range(len(samples)):
            s = samples[k]
            logits = forward(s.input, False, None)
            losses.append(float(bce_loss(logits, s.target, mask).data))
            z = np.asarray(logits.data, dtype=np.float64)[mask]
            scores.append(tn._sigmoid(z))
            labels.append(s.target[mask])
    return average_precision(np.concatenate(scores), np.concatenate(labels)), float(np.mean(losses))


def train_loop(
    state: ModelState,
    forward: ForwardFn,
    train_samples,
    val_samples,
    cfg: TrainConfig,
    mask,
    out_dir: Optional[Path] = None,
    run_config: Optional[dict] = None,
    verbose: bool = False,
) -> TrainResult:
    """Train ``state`` in place with per-epoch shuffling and best-by-val-AUPRC retention.

    ``forward(x, training, rng)`` maps one sample input to [H, W] logits using
    the tensors in ``state``.  When ``out_dir`` is given, the metric log
    (``metrics.jsonl``), ``best`` and ``last`` checkpoints are written there.
    """
    cfg.validate()
    mask = validate_mask(mask)
    if len(train_samples) == 0:
        raise TrainingError("training split has no samples")
    if hasattr(train_samples, "targets") and hasattr(val_samples, "targets"):
        if np.intersect1d(train_samples.targets, val_samples.targets).size:
            raise TrainingError("train and validation samples share target times")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(tuple(cfg.betas), cfg.eps)
    history = []
    best_state, best_epoch, best_ap = state.copy(), -1, None
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")
    extra = {"run_config": run_config} if run_config else None
    try:
        for epoch in range(cfg.epochs):
            lr = epoch_lr(epoch, cfg)
            order = rng.permutation(len(train_samples))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                state.zero_grad()
                batch_loss = 0.0
                for k in batch:
                    s = train_samples[int(k)]
                    logits = forward(s.input, True, rng)
                    loss = bce_loss(logits, s.target, mask)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                        )
                    (loss * (1.0 / len(batch))).backward()
                    batch_loss += value / len(batch)
                grads = _grads(state)
                if cfg.clip_norm:
                    _clip(grads, cfg.clip_norm)
                adamw_step(opt, _arrays(state), grads, lr, cfg.weight_decay)
                losses.append(batch_loss)
            val_ap, val_loss = evaluate_set(forward, val_samples, mask)
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "val_loss": val_loss,
                "val_auprc": val_ap,
            }
            history.append(record)
            improved = val_ap is not None and (best_ap is None or val_ap > best_ap)
            if improved or best_epoch < 0:
                best_state, best_epoch = state.copy(), epoch
                best_ap = val_ap if val_ap is not None else best_ap
                if out_dir is not None:
                    save_checkpoint(out_dir / "best", best_state, epoch, extra)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if verbose:
                print(
                    f"epoch {epoch:3d} lr={lr:.2e} train={record['train_loss']:.5f} "
                    f"val_loss={val_loss:.5f} val_auprc={val_ap}",
                    file=sys.stderr,
                    flush=True,
                )
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "last", state, cfg.epochs - 1, extra)
    return TrainResult(history, best_state, best_epoch, best_ap, state)
