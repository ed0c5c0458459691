"""Training-time defenses against membership inference.

AdaMixup mixes each sample with a random batch partner using a
per-epoch coefficient that decays linearly, and trains on the hard
label of whichever sample dominates the mixture. The remaining
defenses are baselines: standard (Beta) mixup, dropout, L1/L2 weight
penalties and clip-and-noise gradient aggregation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import ClassVar, Union

import numpy as np

from .errors import ContractError, DimensionError

# --- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class NoDefense:
    tag: ClassVar[str] = "none"


@dataclass(frozen=True)
class Dropout:
    tag: ClassVar[str] = "dropout"
    rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class L1:
    tag: ClassVar[str] = "l1"
    coef: float = 1e-4

    def __post_init__(self):
        if self.coef < 0:
            raise ContractError(f"l1 coef must be >= 0, got {self.coef}")


@dataclass(frozen=True)
class L2:
    tag: ClassVar[str] = "l2"
    coef: float = 1e-4

    def __post_init__(self):
        if self.coef < 0:
            raise ContractError(f"l2 coef must be >= 0, got {self.coef}")


@dataclass(frozen=True)
class StandardMixup:
    tag: ClassVar[str] = "mixup"
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractError(f"mixup alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class AdaMixup:
    tag: ClassVar[str] = "adamixup"
    lambda_initial: float = 1.0
    lambda_min: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lambda_min <= self.lambda_initial <= 1.0:
            raise ContractError(
                "need 0 <= lambda_min <= lambda_initial <= 1, got "
                f"lambda_min={self.lambda_min}, lambda_initial={self.lambda_initial}"
            )


@dataclass(frozen=True)
class ClippedNoisy:
    """Clip-and-noise gradient aggregation (DP-SGD mechanism, no accountant).

    ``epsilon_label`` is carried into reports verbatim; nothing computes it.
    """

    tag: ClassVar[str] = "dpsgd"
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    epsilon_label: str = "1.0"

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ContractError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ContractError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")


DefenseConfig = Union[NoDefense, Dropout, L1, L2, StandardMixup, AdaMixup, ClippedNoisy]

DEFENSES: dict[str, type] = {
    cls.tag: cls for cls in (NoDefense, Dropout, L1, L2, StandardMixup, AdaMixup, ClippedNoisy)
}


def defense_from_dict(obj) -> DefenseConfig:
    """Build a defense from ``{"name": tag, **params}``; unknown keys are rejected.

    A bare tag string is accepted as shorthand for default parameters.
    """
    if isinstance(obj, str):
        obj = {"name": obj}
    if not isinstance(obj, dict) or "name" not in obj:
        raise ContractError(f"defense must be an object with a 'name' key, got {obj!r}")
    params = dict(obj)
    name = params.pop("name")
    cls = DEFENSES.get(name)
    if cls is None:
        raise ContractError(f"unknown defense {name!r}; expected one of {sorted(DEFENSES)}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise ContractError(f"unknown keys for defense {name!r}: {unknown}")
    try:
        return cls(**params)
    except TypeError as exc:
        raise ContractError(f"bad parameters for defense {name!r}: {exc}") from None


def defense_to_dict(defense: DefenseConfig) -> dict:
    return {"name": defense.tag, **asdict(defense)}


def defense_label(defense: DefenseConfig) -> str:
    if isinstance(defense, ClippedNoisy):
        return f"dpsgd(eps={defense.epsilon_label})"
    params = ",".join(f"{k}={v}" for k, v in asdict(defense).items())
    return f"{defense.tag}({params})" if params else defense.tag


# --- AdaMixup ----------------------------------------------------------------


@dataclass(frozen=True)
class LambdaSchedule:
    lambda_initial: float
    lambda_min: float
    total_epochs: int

    def __post_init__(self):
        if not 0.0 <= self.lambda_min <= self.lambda_initial <= 1.0:
            raise ContractError("need 0 <= lambda_min <= lambda_initial <= 1")
        if self.total_epochs < 1:
            raise ContractError(f"total_epochs must be >= 1, got {self.total_epochs}")


def lambda_at(t, schedule: LambdaSchedule) -> float:
    """Mixing coefficient for epoch ``t``, linear from lambda_initial to lambda_min.

    With ``lambda_min = 0`` this is ``lambda_initial * (1 - t/T)``.
    """
    T = schedule.total_epochs
    if not 0 <= t <= T:
        raise ContractError(f"epoch {t} outside [0, {T}]")
    frac = t / T
    return schedule.lambda_initial * (1.0 - frac) + schedule.lambda_min * frac


def mix_pair(x1, x2, lam: float) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise DimensionError(f"cannot mix shapes {x1.shape} and {x2.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must be in [0, 1], got {lam}")
    return lam * x1 + (1.0 - lam) * x2


def adamix_label(y1, y2, lam: float):
    """Label of the dominant sample: ``y1`` when ``lam >= 0.5``, else ``y2``."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must be in [0, 1], got {lam}")
    return y1 if lam >= 0.5 else y2


@dataclass(eq=False)
class MixedBatch:
    features: np.ndarray
    lambda_used: float
    partners: np.ndarray
    hard_labels: np.ndarray | None = None
    soft_labels: np.ndarray | None = None

    def __post_init__(self):
        if (self.hard_labels is None) == (self.soft_labels is None):
            raise ContractError("a mixed batch carries exactly one of hard or soft labels")


def _check_batch(features, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("batch must be a non-empty 2-D array")
    if y.shape != (x.shape[0],):
        raise DimensionError(f"labels shape {y.shape} does not match batch of {x.shape[0]}")
    return x, y


def adamixup_batch(features, labels, lam: float, rng: np.random.Generator) -> MixedBatch:
    """Mix row i with row perm(i) at weight ``lam``; emit the dominant hard label.

    Self-pairing is allowed and leaves that row unmixed.
    """
    x, y = _check_batch(features, labels)
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must be in [0, 1], got {lam}")
    perm = rng.permutation(x.shape[0])
    mixed = lam * x + (1.0 - lam) * x[perm]
    hard = y.copy() if lam >= 0.5 else y[perm]
    return MixedBatch(mixed, float(lam), perm, hard_labels=hard)


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) via the ratio of two Gamma(alpha, 1) draws."""
    g1 = rng.gamma(alpha)
    g2 = rng.gamma(alpha)
    total = g1 + g2
    # both draws underflow to 0 only for tiny alpha; the symmetric limit is 1/2
    return 0.5 if total == 0.0 else float(g1 / total)


def standard_mixup_batch(
    features, labels, alpha: float, rng: np.random.Generator, num_classes: int | None = None
) -> MixedBatch:
    x, y = _check_batch(features, labels)
    if not alpha > 0:
        raise ContractError(f"alpha must be > 0, got {alpha}")
    k = num_classes if num_classes is not None else int(y.max()) + 1
    lam = sample_beta(alpha, rng)
    perm = rng.permutation(x.shape[0])
    mixed = lam * x + (1.0 - lam) * x[perm]
    soft = np.zeros((y.size, k))
    rows = np.arange(y.size)
    soft[rows, y] += lam
    soft[rows, y[perm]] += 1.0 - lam
    return MixedBatch(mixed, lam, perm, soft_labels=soft)


# --- clip-and-noise --------------------------------------------------------


def clip_factors(norms, clip_norm: float) -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(norms > clip_norm, clip_norm / norms, 1.0)


def clipped_noisy_gradient(
    per_example_grads, clip_norm: float, noise_multiplier: float, rng: np.random.Generator
) -> list[np.ndarray]:
    """Clip each example's full gradient to L2 norm ``clip_norm``, average, add noise.

    ``per_example_grads`` is a list of arrays sharing a leading batch axis
    (one array per parameter). Noise std per coordinate is
    ``noise_multiplier * clip_norm / batch_size``.
    """
    if not clip_norm > 0:
        raise ContractError(f"clip_norm must be > 0, got {clip_norm}")
    if noise_multiplier < 0:
        raise ContractError(f"noise_multiplier must be >= 0, got {noise_multiplier}")
    grads = [np.asarray(g, dtype=np.float64) for g in per_example_grads]
    n = grads[0].shape[0]
    sq = np.zeros(n)
    for g in grads:
        if g.shape[0] != n:
            raise DimensionError("per-example gradients disagree on batch size")
        sq += np.square(g.reshape(n, -1)).sum(axis=1)
    scale = clip_factors(np.sqrt(sq), clip_norm)
    out = []
    for g in grads:
        mean = np.tensordot(scale, g, axes=1) / n if np.any(scale != 1.0) else g.mean(axis=0)
        if noise_multiplier > 0:
            mean = mean + rng.normal(0.0, noise_multiplier * clip_norm / n, size=mean.shape)
        out.append(mean)
    return out
