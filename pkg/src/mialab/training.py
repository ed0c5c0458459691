"""Mini-batch Adam training loop with the defenses wired in."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .defense import (
    AdaMixup,
    ClippedNoisy,
    DefenseConfig,
    Dropout,
    L1,
    L2,
    LambdaSchedule,
    NoDefense,
    StandardMixup,
    adamixup_batch,
    clip_factors,
    lambda_at,
    standard_mixup_batch,
)
from .errors import ContractError


@dataclass
class TrainStreams:
    """Independent generators so each source of randomness replays on its own."""

    shuffle: np.random.Generator
    dropout: np.random.Generator
    mixup: np.random.Generator
    noise: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "TrainStreams":
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        return cls(*(np.random.default_rng(s) for s in ss.spawn(4)))


@dataclass
class TrainHistory:
    epoch_losses: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)


def build_model(layer_sizes, defense: DefenseConfig, rng: np.random.Generator) -> nx.MlpModel:
    rate = defense.rate if isinstance(defense, Dropout) else 0.0
    return nx.init_mlp(layer_sizes, rng, dropout_rate=rate)


def train_model(
    model: nx.MlpModel,
    features,
    labels,
    defense: DefenseConfig,
    epochs: int,
    batch_size: int = 128,
    learning_rate: float = 1e-3,
    streams: TrainStreams | None = None,
    seed=0,
    on_epoch_end=None,
) -> TrainHistory:
    """Train ``model`` in place for ``epochs`` passes over the data.

    Epoch ``t`` (0-based) of AdaMixup uses ``lambda_at(t)`` with ``T = epochs``,
    so the endpoint value ``lambda_at(T)`` is never trained on.
    """
    if epochs < 1 or batch_size < 1:
        raise ContractError("epochs and batch_size must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    k = model.num_classes
    streams = streams or TrainStreams.from_seed(seed)

    l1 = defense.coef if isinstance(defense, L1) else 0.0
    l2 = defense.coef if isinstance(defense, L2) else 0.0
    schedule = (
        LambdaSchedule(defense.lambda_initial, defense.lambda_min, epochs)
        if isinstance(defense, AdaMixup)
        else None
    )
    if isinstance(defense, Dropout) and model.dropout_rate != defense.rate:
        raise ContractError("model dropout rate does not match the dropout defense")
    if not isinstance(defense, (NoDefense, Dropout, L1, L2, StandardMixup, AdaMixup, ClippedNoisy)):
        raise ContractError(f"unsupported defense {defense!r}")

    params = model.parameters()
    state = nx.AdamState.for_params(params)
    history = TrainHistory()

    for t in range(epochs):
        lam = lambda_at(t, schedule) if schedule is not None else None
        history.lambdas.append(lam if lam is not None else float("nan"))
        order = streams.shuffle.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            if schedule is not None:
                mixed = adamixup_batch(xb, yb, lam, streams.mixup)
                xb, targets = mixed.features, nx.one_hot(mixed.hard_labels, k)
            elif isinstance(defense, StandardMixup):
                mixed = standard_mixup_batch(xb, yb, defense.alpha, streams.mixup, num_classes=k)
                xb, targets = mixed.features, mixed.soft_labels
            else:
                targets = nx.one_hot(yb, k)

            logits, trace = nx.forward(model, xb, train_mode=True, rng=streams.dropout)
            loss, dlogits = nx.softmax_cross_entropy(logits, targets)
            if isinstance(defense, ClippedNoisy):
                grads = _clipped_noisy_grads(model, trace, dlogits, defense, streams.noise)
            else:
                grads = nx.backward(model, trace, dlogits)
            nx.add_regularization_gradient(grads, params, l1, l2)
            nx.adam_step(params, grads, state, learning_rate)
            total += loss * len(idx)
            seen += len(idx)
        history.epoch_losses.append(total / seen)
        if on_epoch_end is not None:
            on_epoch_end(t, model)
    return history


def _clipped_noisy_grads(model, trace, dlogits, defense: ClippedNoisy, rng) -> list[np.ndarray]:
    # The mean loss's dlogits are per-example dlogits / n; gradients are
    # linear in dlogits for a fixed trace, so the clipped mean is one backward
    # pass with each row rescaled by its clip factor.
    n = dlogits.shape[0]
    per_example = dlogits * n
    norms = nx.per_example_grad_norms(model, trace, per_example)
    scale = clip_factors(norms, defense.clip_norm)
    grads = nx.backward(model, trace, per_example * scale[:, None] / n)
    if defense.noise_multiplier > 0:
        std = defense.noise_multiplier * defense.clip_norm / n
        grads = [g + rng.normal(0.0, std, size=g.shape) for g in grads]
    return grads


def accuracy(model: nx.MlpModel, features, labels) -> float:
    return float(np.mean(nx.predict_labels(model, features) == np.asarray(labels)))
