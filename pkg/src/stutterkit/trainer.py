"""Fine-tuning loop: binary cross-entropy over six label bits, Adam with
decoupled weight decay, layer freezing, and early stopping on a validation
metric.

A training example is (spectrogram values [n_mels x T], label bits [6]).
Gradients are averaged over the batch AND the six classes, so the loss is
the mean element-wise BCE. Frozen parameters receive no updates and keep
their initial values bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluator import EvalReport, f1_report, predict
from .model import (
    DTYPE,
    FreezeConfig,
    ModelConfig,
    ParameterRegistry,
    apply_freeze,
    backward_pass,
    forward_with_cache,
)


class EmptyDataset(Exception):
    """Training or validation split has no examples."""


class NonFiniteGradient(Exception):
    """NaN or Inf gradient; the step is refused."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.5e-5
    batch_size: int = 8
    max_epochs: int = 50
    early_stop_patience: int = 3
    early_stop_metric: str = "macro_f1"  # "macro_f1" | "loss"
    threshold: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_steps: int | None = None  # optimizer-step cap, checked across epochs

    def __post_init__(self) -> None:
        if self.early_stop_metric not in ("macro_f1", "loss"):
            raise ValueError(
                f"early_stop_metric must be 'macro_f1' or 'loss', got {self.early_stop_metric!r}"
            )
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


@dataclass
class TrainState:
    """Optimizer moments plus loop bookkeeping, keyed like the registry."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_validation_metric: float = -np.inf
    epochs_since_improvement: int = 0
    rng_state: np.random.Generator | None = None


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean element-wise binary cross-entropy, computed in the overflow-safe
    form max(z,0) - z*y + log(1 + exp(-|z|))."""
    z = np.asarray(logits, dtype=DTYPE)
    y = np.asarray(targets, dtype=DTYPE)
    if z.shape != y.shape:
        raise ValueError(f"logits shape {z.shape} != targets shape {y.shape}")
    per_element = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per_element.mean())


def bce_with_logits_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(mean BCE)/d logits = (sigmoid(z) - y) / N, N = total element count."""
    z = np.asarray(logits, dtype=DTYPE)
    y = np.asarray(targets, dtype=DTYPE)
    return (sigmoid(z) - y) / z.size


def backward(
    batch: list[tuple[np.ndarray, np.ndarray]],
    registry: ParameterRegistry,
    cfg: ModelConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for a batch, averaged so the loss is the
    mean element-wise BCE over batch x classes. Only trainable parameters
    appear in the gradient dict."""
    if not batch:
        raise EmptyDataset("cannot run a backward pass on an empty batch")
    n = len(batch)
    trainable = [name for name, e in registry.items() if e.trainable]
    grads = {name: np.zeros_like(registry[name]) for name in trainable}
    total_loss = 0.0
    for values, bits in batch:
        logits, cache = forward_with_cache(values, registry, cfg)
        y = np.asarray(bits, dtype=DTYPE)
        total_loss += bce_with_logits(logits, y)
        dlogits = (sigmoid(logits) - y) / (logits.size * n)
        example_grads = backward_pass(dlogits, cache, registry, cfg)
        for name in trainable:
            grads[name] += example_grads[name]
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    return total_loss / n, grads


def adam_update(
    registry: ParameterRegistry,
    grads: dict[str, np.ndarray],
    state: TrainState,
    cfg: TrainConfig,
) -> None:
    """One Adam step over the trainable parameters, in place. Weight decay is
    decoupled (applied directly to the weights, not through the moments)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        entry = registry.entry(name)
        if not entry.trainable:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(entry.value)
            state.v[name] = np.zeros_like(entry.value)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        if cfg.weight_decay:
            entry.value -= cfg.learning_rate * cfg.weight_decay * entry.value
        entry.value -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)


def train_step(
    batch: list[tuple[np.ndarray, np.ndarray]],
    registry: ParameterRegistry,
    state: TrainState,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> float:
    """backward + adam_update; returns the batch loss."""
    loss, grads = backward(batch, registry, model_cfg)
    adam_update(registry, grads, state, train_cfg)
    return loss


def evaluate_split(
    examples: list[tuple[np.ndarray, np.ndarray]],
    registry: ParameterRegistry,
    model_cfg: ModelConfig,
    threshold: float,
) -> tuple[float, EvalReport]:
    """(mean loss, F1 report) over a split."""
    if not examples:
        raise EmptyDataset("validation split is empty")
    losses = []
    preds = []
    targets = []
    for values, bits in examples:
        logits, _ = forward_with_cache(values, registry, model_cfg)
        y = np.asarray(bits, dtype=DTYPE)
        losses.append(bce_with_logits(logits, y))
        preds.append(predict(logits, threshold))
        targets.append(tuple(int(b) for b in bits))
    report = f1_report(preds, targets, threshold=threshold)
    return float(np.mean(losses)), report


def _epoch_score(metric: str, val_loss: float, macro_f1: float) -> float:
    return macro_f1 if metric == "macro_f1" else -val_loss


def fit(
    train_examples: list[tuple[np.ndarray, np.ndarray]],
    val_examples: list[tuple[np.ndarray, np.ndarray]],
    registry: ParameterRegistry,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    freeze: FreezeConfig | None = None,
    seed=None,
) -> tuple[ParameterRegistry, list[dict]]:
    """Full fine-tuning loop.

    Each epoch shuffles the training set (seeded permutation), walks it in
    batches of batch_size (last batch may be short), then scores the
    validation split. Early stopping keeps the parameters from the best
    epoch: a strict improvement in the monitored score resets the patience
    counter; after early_stop_patience consecutive non-improving epochs
    training stops, so a constant metric runs patience+1 epochs (the first
    always improves on the -inf initial score). The shuffle stream comes
    from `seed` when given, else train_cfg.seed. Returns (best registry,
    per-epoch history rows).
    """
    if not train_examples:
        raise EmptyDataset("training split is empty")
    if not val_examples:
        raise EmptyDataset("validation split is empty")
    if freeze is not None:
        apply_freeze(registry, freeze)
    state = TrainState()
    state.rng_state = np.random.default_rng(train_cfg.seed if seed is None else seed)
    best_registry = registry.copy()
    history: list[dict] = []
    steps_exhausted = False
    for epoch in range(train_cfg.max_epochs):
        state.epoch = epoch
        order = state.rng_state.permutation(len(train_examples))
        epoch_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            if train_cfg.max_steps is not None and state.step >= train_cfg.max_steps:
                steps_exhausted = True
                break
            batch = [train_examples[i] for i in order[start : start + train_cfg.batch_size]]
            epoch_losses.append(train_step(batch, registry, state, model_cfg, train_cfg))
        val_loss, report = evaluate_split(
            val_examples, registry, model_cfg, train_cfg.threshold
        )
        score = _epoch_score(train_cfg.early_stop_metric, val_loss, report.macro_f1)
        improved = score > state.best_validation_metric
        if improved:
            state.best_validation_metric = score
            best_registry = registry.copy()
            state.epochs_since_improvement = 0
        else:
            state.epochs_since_improvement += 1
        history.append(
            {
                "epoch": epoch,
                "step": state.step,
                "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
                "val_loss": val_loss,
                "val_micro": report.micro_f1,
                "val_macro": report.macro_f1,
                "val_weighted": report.weighted_f1,
                "score": score,
                "improved": improved,
            }
        )
        if steps_exhausted or (
            not improved and state.epochs_since_improvement >= train_cfg.early_stop_patience
        ):
            break
    return best_registry, history


def write_history(path: str | Path, history: list[dict]) -> None:
    """One JSON object per line, in epoch order."""
    with open(path, "w", encoding="utf-8") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")
