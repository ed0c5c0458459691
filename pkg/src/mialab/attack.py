"""Membership-inference attacks and their calibration.

Three attacks are provided:

* ``A1`` - logistic classifier over the top-3 sorted posteriors, trained on
  shadow-model members vs. non-members.
* ``A2`` - threshold on the confidence assigned to the true label,
  ``F(x)_y >= tau`` (global or per-class tau).
* ``A3`` - label-only: fraction of Gaussian perturbations of ``x`` whose
  predicted label stays equal to ``y``, thresholded at ``tau_P``.

All membership decisions are inclusive (``>=``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import Dataset
from .errors import CalibrationError, ContractError, DimensionError

ATTACK_NAMES = ("A1", "A2", "A3")
TOP_K = 3


@dataclass(frozen=True, eq=False)
class ConfidenceRecord:
    probabilities: np.ndarray
    true_label: int
    predicted_label: int

    @property
    def true_confidence(self) -> float:
        return float(self.probabilities[self.true_label])


def collect_confidences(model: nx.MlpModel, dataset: Dataset, indices) -> list[ConfidenceRecord]:
    x, y = dataset.subset(indices)
    if len(y) == 0:
        return []
    probs = nx.predict_proba(model, x)
    preds = np.argmax(probs, axis=1)
    return [ConfidenceRecord(p, int(t), int(q)) for p, t, q in zip(probs, y, preds)]


def _stack(records) -> tuple[np.ndarray, np.ndarray]:
    probs = np.stack([r.probabilities for r in records])
    labels = np.array([r.true_label for r in records], dtype=np.int64)
    return probs, labels


def true_label_confidences(records) -> tuple[np.ndarray, np.ndarray]:
    probs, labels = _stack(records)
    return probs[np.arange(len(labels)), labels], labels


# --- A2: confidence threshold ----------------------------------------------


@dataclass(frozen=True, eq=False)
class ThresholdRule:
    mode: str
    tau: float | np.ndarray

    def __post_init__(self):
        if self.mode not in ("global", "per-class"):
            raise ContractError(f"threshold mode must be 'global' or 'per-class', got {self.mode!r}")
        taus = np.atleast_1d(np.asarray(self.tau, dtype=np.float64))
        if np.any(taus < 0) or np.any(taus > 1):
            raise ContractError("thresholds must lie in [0, 1]")

    def threshold_for(self, label: int) -> float:
        if self.mode == "global":
            return float(self.tau)
        taus = np.asarray(self.tau)
        if not 0 <= label < taus.size:
            raise ContractError(f"rule has no threshold for class {label}")
        return float(taus[label])

    def thresholds_for(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if self.mode == "global":
            return np.full(labels.shape, float(self.tau))
        taus = np.asarray(self.tau, dtype=np.float64)
        if labels.size and (labels.min() < 0 or labels.max() >= taus.size):
            raise ContractError("rule does not cover every record's class")
        return taus[labels]


def threshold_attack(record: ConfidenceRecord, rule: ThresholdRule) -> int:
    return int(record.true_confidence >= rule.threshold_for(record.true_label))


def threshold_attack_many(records, rule: ThresholdRule) -> np.ndarray:
    conf, labels = true_label_confidences(records)
    return (conf >= rule.thresholds_for(labels)).astype(np.int64)


def balanced_accuracy(tp: int, pos: int, tn: int, neg: int) -> float:
    return 0.5 * (tp / pos + tn / neg)


def sweep_threshold(member_scores, nonmember_scores) -> tuple[float, float]:
    """Best inclusive threshold over observed scores plus 0 and 1.

    Returns ``(tau, balanced_accuracy)``. Ties go to the smallest tau.
    """
    m = np.sort(np.asarray(member_scores, dtype=np.float64))
    o = np.sort(np.asarray(nonmember_scores, dtype=np.float64))
    if m.size == 0 or o.size == 0:
        raise CalibrationError("calibration needs at least one member and one non-member")
    candidates = np.unique(np.concatenate([m, o, [0.0, 1.0]]))
    tp = m.size - np.searchsorted(m, candidates, side="left")
    tn = np.searchsorted(o, candidates, side="left")
    scores = 0.5 * (tp / m.size + tn / o.size)
    best = int(np.argmax(scores))
    return float(candidates[best]), float(scores[best])


def calibrate_threshold(member_records, nonmember_records, mode: str = "global") -> ThresholdRule:
    """Pick tau maximizing balanced accuracy on shadow member/non-member records."""
    if not member_records or not nonmember_records:
        raise CalibrationError("calibration needs non-empty member and non-member records")
    m_conf, m_lab = true_label_confidences(member_records)
    o_conf, o_lab = true_label_confidences(nonmember_records)
    if mode == "global":
        tau, _ = sweep_threshold(m_conf, o_conf)
        return ThresholdRule("global", tau)
    if mode != "per-class":
        raise ContractError(f"unknown threshold mode {mode!r}")
    k = len(member_records[0].probabilities)
    taus = np.empty(k)
    for c in range(k):
        mc, oc = m_conf[m_lab == c], o_conf[o_lab == c]
        if mc.size == 0 or oc.size == 0:
            raise CalibrationError(
                f"class {c} has {mc.size} member and {oc.size} non-member calibration records"
            )
        taus[c], _ = sweep_threshold(mc, oc)
    return ThresholdRule("per-class", taus)


# --- A1: shadow-trained attack classifier ------------------------------------


def top_k_features(records, k: int = TOP_K) -> np.ndarray:
    probs, _ = _stack(records)
    ordered = -np.sort(-probs, axis=1)
    if ordered.shape[1] >= k:
        return ordered[:, :k]
    pad = np.zeros((ordered.shape[0], k - ordered.shape[1]))
    return np.hstack([ordered, pad])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class AttackClassifier:
    """Logistic regression on standardized top-3 posterior features."""

    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def predict_proba(self, records) -> np.ndarray:
        z = (top_k_features(records) - self.feature_mean) / self.feature_scale
        return _sigmoid(z @ self.weights + self.bias)

    def predict(self, records) -> np.ndarray:
        return (self.predict_proba(records) >= 0.5).astype(np.int64)


def train_attack_classifier(
    member_records,
    nonmember_records,
    rng: np.random.Generator,
    iterations: int = 500,
    learning_rate: float = 0.1,
) -> AttackClassifier:
    """Full-batch gradient descent on the mean logistic loss (member = 1)."""
    if not member_records or not nonmember_records:
        raise CalibrationError("attack classifier needs member and non-member records")
    x = np.vstack([top_k_features(member_records), top_k_features(nonmember_records)])
    t = np.concatenate([np.ones(len(member_records)), np.zeros(len(nonmember_records))])
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = (x - mean) / scale

    w = rng.normal(0.0, 0.01, size=TOP_K)
    b = 0.0
    n = t.size
    for _ in range(iterations):
        err = _sigmoid(z @ w + b) - t
        w -= learning_rate * (z.T @ err) / n
        b -= learning_rate * err.sum() / n
    return AttackClassifier(w, float(b), mean, scale)


# --- A3: label-only consistency ----------------------------------------------


@dataclass(frozen=True)
class LabelOnlyConfig:
    num_perturbations: int = 50
    noise_std: float = 0.05
    consistency_threshold: float | None = None
    # "true": compare to y as written; "predicted": compare to the clean prediction
    reference: str = "true"

    def __post_init__(self):
        if self.num_perturbations < 1:
            raise ContractError("num_perturbations must be >= 1")
        if not self.noise_std > 0:
            raise ContractError("noise_std must be > 0")
        if self.consistency_threshold is not None and not 0 <= self.consistency_threshold <= 1:
            raise ContractError("consistency_threshold must be in [0, 1]")
        if self.reference not in ("true", "predicted"):
            raise ContractError(f"reference must be 'true' or 'predicted', got {self.reference!r}")


def label_consistency(
    model: nx.MlpModel,
    x,
    y: int,
    config: LabelOnlyConfig,
    rng: np.random.Generator | None = None,
    deltas=None,
) -> float:
    """Fraction of perturbed copies ``clip(x + delta_i, 0, 1)`` predicted as ``y``.

    ``deltas`` (shape ``(N, d)``) replaces the Gaussian draws when given.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if deltas is None:
        if rng is None:
            raise ContractError("label_consistency needs an rng or explicit deltas")
        deltas = rng.normal(0.0, config.noise_std, size=(config.num_perturbations, x.size))
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim != 2 or deltas.shape[1] != x.size:
        raise DimensionError(f"deltas shape {deltas.shape} does not match feature size {x.size}")
    ref = y
    if config.reference == "predicted":
        ref = int(nx.predict_labels(model, x[None, :])[0])
    preds = nx.predict_labels(model, np.clip(x + deltas, 0.0, 1.0))
    return float(np.count_nonzero(preds == ref)) / deltas.shape[0]


def consistency_scores(
    model: nx.MlpModel,
    features,
    labels,
    config: LabelOnlyConfig,
    rng: np.random.Generator,
    chunk_rows: int = 50_000,
) -> np.ndarray:
    """``label_consistency`` for many rows at once, drawing noise row by row in order."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, d = x.shape
    N = config.num_perturbations
    if config.reference == "predicted":
        y = nx.predict_labels(model, x)
    per_chunk = max(1, chunk_rows // N)
    out = np.empty(n)
    for start in range(0, n, per_chunk):
        xs = x[start : start + per_chunk]
        m = xs.shape[0]
        noise = rng.normal(0.0, config.noise_std, size=(m, N, d))
        pert = np.clip(xs[:, None, :] + noise, 0.0, 1.0).reshape(m * N, d)
        preds = nx.predict_labels(model, pert).reshape(m, N)
        out[start : start + m] = np.count_nonzero(preds == y[start : start + m, None], axis=1) / N
    return out


def label_only_attack(p: float, tau_p: float) -> int:
    if not (0 <= p <= 1 and 0 <= tau_p <= 1):
        raise ContractError("consistency and threshold must lie in [0, 1]")
    return int(p >= tau_p)


def calibrate_consistency_threshold(member_scores, nonmember_scores) -> float:
    return sweep_threshold(member_scores, nonmember_scores)[0]


# --- evaluation ----------------------------------------------------------------


@dataclass(frozen=True)
class AttackReport:
    attack: str
    accuracy: float
    tpr: float
    fpr: float
    tp: int
    tn: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_attack(predictions, truth, name: str = "attack") -> AttackReport:
    pred = np.asarray(predictions).astype(np.int64).reshape(-1)
    true = np.asarray(truth).astype(np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise DimensionError(f"{pred.size} predictions vs {true.size} ground-truth labels")
    if true.size == 0:
        raise ContractError("cannot evaluate an attack on an empty set")
    pos = int(np.count_nonzero(true == 1))
    neg = int(np.count_nonzero(true == 0))
    if pos + neg != true.size:
        raise ContractError("ground truth must be 0/1")
    if pos != neg:
        raise ContractError(f"evaluation set is unbalanced: {pos} members vs {neg} non-members")
    tp = int(np.count_nonzero((pred == 1) & (true == 1)))
    tn = int(np.count_nonzero((pred == 0) & (true == 0)))
    fp, fn = neg - tn, pos - tp
    return AttackReport(
        attack=name,
        accuracy=(tp + tn) / true.size,
        tpr=tp / pos if pos else 0.0,
        fpr=fp / neg if neg else 0.0,
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
    )
