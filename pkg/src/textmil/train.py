"""Adam training of the adapter + attention parameters with early stopping.

One epoch is one full-batch gradient step over the k-shot training
bags (loss averaged per slide in slide-id order), followed by a
validation AUC; the returned parameters are the ones from the best
validation epoch. Everything is deterministic given the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .errors import DataError, NumericError
from .hierpool import wsi_encode
from .metrics import evaluate
from .model import SlideClassifier, TrainableLayout, class_probabilities, nll
from .textenc import build_prompt, encode, refinement_embedding


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, *,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected Adam update; returns the new parameter vector."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match theta {theta.shape}")
    if not np.isfinite(grad).all():
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericError(f"non-finite gradient at coordinate {bad}")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainState:
    """Bookkeeping across epochs: parameters, moments, best-so-far."""

    theta: np.ndarray
    adam: AdamState
    epoch: int = 0
    best_metric: float = -np.inf
    best_theta: np.ndarray | None = None
    best_epoch: int = 0
    since_best: int = 0


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")


def _check_split(model: SlideClassifier, train_bags, val_bags):
    k = model.config.train.shots
    if not train_bags or not val_bags:
        raise DataError("training and validation sets must be nonempty")
    counts: dict[int, int] = {}
    for b in train_bags:
        counts[b.label] = counts.get(b.label, 0) + 1
    expected = {c: k for c in range(model.prompts.n_classes)}
    if counts != expected:
        raise DataError(f"train set must have exactly {k} bags per class, got {counts}")
    overlap = {b.slide_id for b in train_bags} & {b.slide_id for b in val_bags}
    if overlap:
        raise DataError(f"train/val splits overlap: {sorted(overlap)[:3]}")


def epoch_loss(model: SlideClassifier, bags, layout: TrainableLayout, theta: np.ndarray):
    """Mean cross-entropy over `bags` on a fresh tape; returns the loss
    node together with the tape and bound leaf nodes."""
    tape, sites, attn, nodes = layout.bind(theta)
    embs = [encode(model.stack, build_prompt(c), sites) for c in model.prompts.classes]
    guidance = None
    if model.config.refinement.enabled:
        guidance = refinement_embedding(embs, model.tumor_index)
    total = None
    for bag in bags:
        out = wsi_encode(bag, guidance, attn, model.config.refinement)
        probs = class_probabilities(out.slide_embedding, embs, model.config.train.temperature)
        term = nll(probs, bag.label)
        total = term if total is None else tp.add(total, term)
    loss = tp.scale(total, 1.0 / len(bags))
    if not np.isfinite(tp.value(loss)):
        raise NumericError(f"non-finite training loss {tp.value(loss)}")
    return loss, tape, nodes


def fit(model: SlideClassifier, train_bags, val_bags) -> FitResult:
    """Train in place; leaves the model at the best-validation parameters."""
    cfg = model.config.train
    train_bags = sorted(train_bags, key=lambda b: b.slide_id)
    val_bags = sorted(val_bags, key=lambda b: b.slide_id)
    _check_split(model, train_bags, val_bags)

    layout = TrainableLayout(model)
    state = TrainState(theta=layout.pack(), adam=AdamState.zeros(layout.size))
    state.best_theta = state.theta.copy()
    result = FitResult()

    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        loss, tape, nodes = epoch_loss(model, train_bags, layout, state.theta)
        grad = layout.flatten_grads(tape.backward(loss), nodes)
        state.theta = adam_step(state.adam, state.theta, grad,
                                lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                eps=cfg.adam_eps)
        layout.apply(state.theta)
        val_auc = evaluate(model, val_bags).auc
        result.history.append({"epoch": epoch,
                               "train_loss": float(tp.value(loss)),
                               "val_auc": float(val_auc)})
        if val_auc > state.best_metric:
            state.best_metric = val_auc
            state.best_theta = state.theta.copy()
            state.best_epoch = epoch
            state.since_best = 0
        else:
            if val_auc == state.best_metric:
                # equal-metric epochs keep the later, more converged
                # parameters; a tie still counts against the patience
                state.best_theta = state.theta.copy()
                state.best_epoch = epoch
            state.since_best += 1
            if state.since_best > cfg.patience:
                break

    layout.apply(state.best_theta)
    result.best_epoch = state.best_epoch
    result.best_val_auc = float(state.best_metric)
    return result
