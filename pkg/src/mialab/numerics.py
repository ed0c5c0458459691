"""Small feed-forward network engine: forward pass, backprop, Adam.

Everything runs in float64 on plain numpy arrays. A "matrix" is a 2-D
``np.ndarray``; parameters are kept as a flat list ordered
``[W0, b0, W1, b1, ...]`` so gradients and optimizer moments line up
one-to-one with :meth:`MlpModel.parameters`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(values, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


@dataclass
class MlpModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_rate: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ContractError(f"layer_sizes must list >= 2 positive ints, got {self.layer_sizes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise DimensionError("one weight matrix and one bias vector expected per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            fan_in, fan_out = self.layer_sizes[i], self.layer_sizes[i + 1]
            if w.shape != (fan_in, fan_out):
                raise DimensionError(f"weight {i} has shape {w.shape}, expected {(fan_in, fan_out)}")
            if b.shape != (fan_out,):
                raise DimensionError(f"bias {i} has shape {b.shape}, expected {(fan_out,)}")

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def to_npz(self, path) -> None:
        arrays = {f"w{i}": w for i, w in enumerate(self.weights)}
        arrays.update({f"b{i}": b for i, b in enumerate(self.biases)})
        np.savez(
            path,
            layer_sizes=np.asarray(self.layer_sizes, dtype=np.int64),
            dropout_rate=np.float64(self.dropout_rate),
            **arrays,
        )

    @classmethod
    def from_npz(cls, path) -> "MlpModel":
        with np.load(path) as data:
            sizes = [int(s) for s in data["layer_sizes"]]
            n = len(sizes) - 1
            return cls(
                layer_sizes=sizes,
                weights=[data[f"w{i}"].astype(DTYPE) for i in range(n)],
                biases=[data[f"b{i}"].astype(DTYPE) for i in range(n)],
                dropout_rate=float(data["dropout_rate"]),
            )


def init_mlp(layer_sizes, rng: np.random.Generator, dropout_rate: float = 0.0) -> MlpModel:
    """He-normal weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out, dtype=DTYPE))
    return MlpModel(list(layer_sizes), weights, biases, dropout_rate=dropout_rate)


def zero_mlp(layer_sizes, dropout_rate: float = 0.0) -> MlpModel:
    weights = [np.zeros((a, b), dtype=DTYPE) for a, b in zip(layer_sizes[:-1], layer_sizes[1:])]
    biases = [np.zeros(b, dtype=DTYPE) for b in layer_sizes[1:]]
    return MlpModel(list(layer_sizes), weights, biases, dropout_rate=dropout_rate)


@dataclass
class ForwardTrace:
    # activations[0] is the input batch; activations[l + 1] is the output of layer l
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    masks: list[np.ndarray | None] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.activations[0].shape[0]


def forward(
    model: MlpModel,
    batch,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network on ``batch`` and return ``(logits, trace)``.

    In train mode with a positive dropout rate, hidden activations are
    multiplied by an inverted-dropout mask drawn from ``rng`` (scaled by
    ``1/(1-p)`` so inference needs no rescaling).
    """
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != model.layer_sizes[0]:
        raise DimensionError(
            f"batch shape {x.shape} incompatible with input dimension {model.layer_sizes[0]}"
        )
    use_dropout = train_mode and model.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ContractError("train-mode dropout needs an rng")
    keep = 1.0 - model.dropout_rate

    pre, post, masks = [], [x], []
    a = x
    last = model.num_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        if i == last:
            a = z
            masks.append(None)
        else:
            a = np.maximum(z, 0.0)
            if use_dropout:
                mask = (rng.random(a.shape) < keep) / keep
                a = a * mask
                masks.append(mask)
            else:
                masks.append(None)
        post.append(a)
    return a, ForwardTrace(pre, post, masks)


def predict_logits(model: MlpModel, x, chunk_size: int = 4096) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[0] <= chunk_size:
        return forward(model, x)[0]
    return np.concatenate(
        [forward(model, x[i : i + chunk_size])[0] for i in range(0, x.shape[0], chunk_size)]
    )


def predict_proba(model: MlpModel, x, chunk_size: int = 4096) -> np.ndarray:
    return softmax(predict_logits(model, x, chunk_size))


def predict_labels(model: MlpModel, x, chunk_size: int = 4096) -> np.ndarray:
    return np.argmax(predict_logits(model, x, chunk_size), axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_cross_entropy(logits, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against per-row target distributions.

    Returns the scalar loss and its gradient w.r.t. ``logits``, which is
    ``(softmax(logits) - targets) / rows``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    targets = np.asarray(targets, dtype=DTYPE)
    if logits.shape != targets.shape or logits.ndim != 2:
        raise DimensionError(f"logits {logits.shape} and targets {targets.shape} must match")
    if np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-9) or np.any(targets < 0):
        raise ContractError("every target row must be a probability distribution")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = float(-(targets * logp).sum() / n)
    dlogits = (np.exp(logp) - targets) / n
    return loss, dlogits


def _layer_deltas(model: MlpModel, trace: ForwardTrace, dlogits: np.ndarray) -> list[np.ndarray]:
    """Gradient of the loss w.r.t. each layer's pre-activation, last layer first."""
    if len(trace.pre_activations) != model.num_layers:
        raise ContractError("trace does not belong to this model")
    if dlogits.shape != trace.pre_activations[-1].shape:
        raise DimensionError(
            f"dlogits shape {dlogits.shape} != logits shape {trace.pre_activations[-1].shape}"
        )
    deltas = [dlogits]
    delta = dlogits
    for i in range(model.num_layers - 1, 0, -1):
        da = delta @ model.weights[i].T
        mask = trace.masks[i - 1] if trace.masks else None
        if mask is not None:
            da = da * mask
        delta = da * (trace.pre_activations[i - 1] > 0.0)
        deltas.append(delta)
    deltas.reverse()
    return deltas


def backward(model: MlpModel, trace: ForwardTrace, dlogits) -> list[np.ndarray]:
    """Exact gradients for every parameter, ordered like ``model.parameters()``."""
    dlogits = np.asarray(dlogits, dtype=DTYPE)
    deltas = _layer_deltas(model, trace, dlogits)
    grads = []
    for a, delta in zip(trace.activations[:-1], deltas):
        grads.append(a.T @ delta)
        grads.append(delta.sum(axis=0))
    return grads


def per_example_gradients(model: MlpModel, trace: ForwardTrace, dlogits) -> list[np.ndarray]:
    """Per-row gradients; each array carries a leading batch axis.

    ``dlogits`` row i must be the gradient of example i's own loss. Memory
    grows as batch x parameters, so this is meant for small models and tests.
    """
    deltas = _layer_deltas(model, trace, np.asarray(dlogits, dtype=DTYPE))
    grads = []
    for a, delta in zip(trace.activations[:-1], deltas):
        grads.append(np.einsum("ni,nj->nij", a, delta))
        grads.append(delta.copy())
    return grads


def per_example_grad_norms(model: MlpModel, trace: ForwardTrace, dlogits) -> np.ndarray:
    """L2 norm of each row's full gradient without materializing it.

    Uses ||a_i outer d_i||_F = ||a_i|| * ||d_i||.
    """
    deltas = _layer_deltas(model, trace, np.asarray(dlogits, dtype=DTYPE))
    sq = np.zeros(trace.batch_size, dtype=DTYPE)
    for a, delta in zip(trace.activations[:-1], deltas):
        d2 = np.einsum("ij,ij->i", delta, delta)
        sq += np.einsum("ij,ij->i", a, a) * d2 + d2
    return np.sqrt(sq)


def add_regularization_gradient(grads, params, l1_coef: float = 0.0, l2_coef: float = 0.0):
    """Add L1/L2 penalty gradients to weight matrices in place; biases untouched."""
    if l1_coef < 0 or l2_coef < 0:
        raise ContractError(f"penalty coefficients must be >= 0, got l1={l1_coef}, l2={l2_coef}")
    if len(grads) != len(params):
        raise DimensionError("grads and params must align")
    if l1_coef == 0 and l2_coef == 0:
        return grads
    for g, p in zip(grads, params):
        if p.ndim != 2:
            continue
        if l1_coef:
            g += l1_coef * np.sign(p)
        if l2_coef:
            g += 2.0 * l2_coef * p
    return grads


def regularization_penalty(params, l1_coef: float = 0.0, l2_coef: float = 0.0) -> float:
    total = 0.0
    for p in params:
        if p.ndim == 2:
            total += l1_coef * np.abs(p).sum() + l2_coef * np.square(p).sum()
    return float(total)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs,
        )

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(params, grads, state: AdamState, learning_rate: float = 1e-3) -> None:
    """One bias-corrected Adam update. Mutates ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state must align")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"param shape {p.shape} != grad shape {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def loss_and_gradients(model: MlpModel, batch, targets) -> tuple[float, list[np.ndarray]]:
    logits, trace = forward(model, batch)
    loss, dlogits = softmax_cross_entropy(logits, targets)
    return loss, backward(model, trace, dlogits)


def gradient_check(model: MlpModel, batch, targets, step: float = 1e-5, grads=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``grads`` overrides the analytic gradients, which lets tests confirm
    the check actually notices a wrong gradient.
    """
    batch = np.asarray(batch, dtype=DTYPE)
    targets = np.asarray(targets, dtype=DTYPE)
    if grads is None:
        _, grads = loss_and_gradients(model, batch, targets)

    def loss_at() -> float:
        return softmax_cross_entropy(forward(model, batch)[0], targets)[0]

    worst = 0.0
    for p, g in zip(model.parameters(), grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_at()
            flat[k] = orig - step
            down = loss_at()
            flat[k] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = gflat[k]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return float(worst)
