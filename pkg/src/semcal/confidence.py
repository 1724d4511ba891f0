"""Confidence prediction head: a 3-layer MLP over decoder hidden states.

Layer sizes are d_model -> d_model/2 -> d_model/4 -> 1 with ReLU and
inverted dropout after the first two layers and a sigmoid output, so
every per-token confidence lies in (0, 1). Training minimizes the mean
squared error between each sequence's mean masked-token confidence and
its semantic target, with exact analytic gradients (no autograd). All
arithmetic is float64 and deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericError, ValidationError
from . import tensorio

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class HeadConfig:
    d_model: int = 768
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % 4 != 0:
            raise ValidationError(f"d_model must be divisible by 4, got {self.d_model}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def hidden1(self) -> int:
        return self.d_model // 2

    @property
    def hidden2(self) -> int:
        return self.d_model // 4


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    FIELDS = ("W1", "b1", "W2", "b2", "W3", "b3")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.arrays().items()})

    def check_shapes(self, config: HeadConfig) -> None:
        expected = {
            "W1": (config.hidden1, config.d_model),
            "b1": (config.hidden1,),
            "W2": (config.hidden2, config.hidden1),
            "b2": (config.hidden2,),
            "W3": (1, config.hidden2),
            "b3": (1,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")


def init_params(config: HeadConfig) -> HeadParams:
    """He-style initialization, deterministic for the config seed."""
    rng = np.random.default_rng(config.seed)
    d, h1, h2 = config.d_model, config.hidden1, config.hidden2

    def layer(fan_out, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))

    return HeadParams(
        W1=layer(h1, d),
        b1=np.zeros(h1),
        W2=layer(h2, h1),
        b2=np.zeros(h2),
        W3=layer(1, h2),
        b3=np.zeros(1),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the (0, 1) contract even where float rounding saturates
    tiny = np.finfo(np.float64).tiny
    eps = np.finfo(np.float64).eps
    return np.clip(out, tiny, 1.0 - eps)


def sample_dropout_masks(
    config: HeadConfig, n_tokens: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted-dropout masks (values 0 or 1/(1-p)) for both hidden layers."""
    p = config.dropout_rate
    if p == 0.0:
        return np.ones((n_tokens, config.hidden1)), np.ones((n_tokens, config.hidden2))
    scale = 1.0 / (1.0 - p)
    m1 = (rng.random((n_tokens, config.hidden1)) >= p) * scale
    m2 = (rng.random((n_tokens, config.hidden2)) >= p) * scale
    return m1, m2


def _forward(hidden_states: np.ndarray, params: HeadParams, masks=None):
    h = hidden_states
    z1 = h @ params.W1.T + params.b1
    a1 = np.maximum(z1, 0.0)
    d1 = a1 if masks is None else a1 * masks[0]
    z2 = d1 @ params.W2.T + params.b2
    a2 = np.maximum(z2, 0.0)
    d2 = a2 if masks is None else a2 * masks[1]
    u = d2 @ params.W3.T + params.b3
    c = _sigmoid(u[:, 0])
    cache = (h, z1, d1, z2, d2, c)
    return c, cache


def head_forward(
    hidden_states,
    params: HeadParams,
    config: HeadConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-token confidences for a (tokens x d_model) matrix.

    Dropout applies only in train mode, with inverted scaling, so eval
    needs no rescaling and is deterministic.
    """
    h = np.asarray(hidden_states, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != config.d_model:
        raise ValidationError(
            f"hidden states must be (tokens, {config.d_model}), got {h.shape}"
        )
    if not np.all(np.isfinite(h)):
        raise ValidationError("hidden states contain non-finite values")
    params.check_shapes(config)
    if mode == "eval":
        masks = None
    elif mode == "train":
        if rng is None:
            raise ValidationError("train mode requires an rng")
        masks = sample_dropout_masks(config, h.shape[0], rng)
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    c, _ = _forward(h, params, masks)
    return c


def mean_confidence(token_confidences, token_mask) -> float:
    """Arithmetic mean of confidences over mask-true tokens."""
    conf = np.asarray(token_confidences, dtype=np.float64)
    mask = np.asarray(token_mask, dtype=bool)
    if conf.shape != mask.shape:
        raise ValidationError(
            f"length mismatch: {conf.shape[0]} confidences vs {mask.shape[0]} mask entries"
        )
    if not mask.any():
        raise ValidationError("token_mask has no true entries")
    return float(conf[mask].mean())


def confidence_loss(mean_confs, targets) -> float:
    """Mean squared error between sequence confidences and targets."""
    c = np.asarray(mean_confs, dtype=np.float64)
    s = np.asarray(targets, dtype=np.float64)
    if c.shape != s.shape:
        raise ValidationError(f"length mismatch: {c.shape} vs {s.shape}")
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise ValidationError("targets must lie in [0, 1]")
    return float(np.mean((c - s) ** 2))


@dataclass
class TrainExample:
    """One training record: hidden states, content mask, semantic target."""

    hidden_states: np.ndarray
    token_mask: np.ndarray
    target: float
    ce_loss: float | None = None


def _zero_grads(params: HeadParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.arrays().items()}


def loss_and_grads(
    batch: Sequence[TrainExample],
    params: HeadParams,
    config: HeadConfig,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Confidence loss over a batch and its exact gradients.

    When rng is given, fresh dropout masks are sampled per example and
    shared between the forward and backward passes of this step;
    without rng the pass runs in eval mode.
    """
    if not batch:
        raise ValidationError("empty batch")
    grads = _zero_grads(params)
    total_loss = 0.0
    inv_b = 1.0 / len(batch)
    for ex in batch:
        h = np.asarray(ex.hidden_states, dtype=np.float64)
        mask = np.asarray(ex.token_mask, dtype=bool)
        if not 0.0 <= ex.target <= 1.0:
            raise ValidationError(f"target {ex.target} outside [0, 1]")
        if not mask.any():
            raise ValidationError("token_mask has no true entries")
        masks = None if rng is None else sample_dropout_masks(config, h.shape[0], rng)
        c, cache = _forward(h, params, masks)
        _, z1, d1, z2, d2, _ = cache
        m = int(mask.sum())
        cbar = float(c[mask].mean())
        diff = cbar - ex.target
        total_loss += diff * diff

        dc = np.where(mask, 2.0 * diff / m, 0.0)
        du = dc * c * (1.0 - c)
        grads["W3"] += inv_b * (du @ d2)[None, :]
        grads["b3"] += inv_b * du.sum(keepdims=True)
        dd2 = np.outer(du, params.W3[0])
        da2 = dd2 if masks is None else dd2 * masks[1]
        dz2 = da2 * (z2 > 0.0)
        grads["W2"] += inv_b * (dz2.T @ d1)
        grads["b2"] += inv_b * dz2.sum(axis=0)
        dd1 = dz2 @ params.W2
        da1 = dd1 if masks is None else dd1 * masks[0]
        dz1 = da1 * (z1 > 0.0)
        grads["W1"] += inv_b * (dz1.T @ h)
        grads["b1"] += inv_b * dz1.sum(axis=0)
    return total_loss * inv_b, grads


def head_backward(
    hidden_states,
    params: HeadParams,
    config: HeadConfig,
    token_mask,
    target: float,
) -> dict[str, np.ndarray]:
    """Gradients of the single-example confidence loss (eval-mode graph)."""
    ex = TrainExample(
        hidden_states=np.asarray(hidden_states, dtype=np.float64),
        token_mask=np.asarray(token_mask, dtype=bool),
        target=target,
    )
    _, grads = loss_and_grads([ex], params, config)
    return grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: int = 16
    lambda_conf: float = 0.15
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValidationError("learning_rate, epochs, batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    params: HeadParams
    epoch_losses: list[float]
    epoch_combined: list[float] = field(default_factory=list)


def train_head(
    dataset: Sequence[TrainExample],
    head_config: HeadConfig,
    train_config: TrainConfig,
    init: HeadParams | None = None,
) -> TrainResult:
    """Minibatch training of the head on frozen hidden states.

    Deterministic for fixed seeds: shuffling and dropout both derive
    from train_config.seed. epoch_losses holds the mean confidence loss
    per epoch; when examples carry exported cross-entropy values,
    epoch_combined reports mean(ce) + lambda_conf * mean(conf loss).
    """
    if not dataset:
        raise ValidationError("empty dataset")
    params = init.copy() if init is not None else init_params(head_config)
    params.check_shapes(head_config)
    rng = np.random.default_rng(train_config.seed)
    use_dropout = head_config.dropout_rate > 0.0

    adam_m = _zero_grads(params) if train_config.optimizer == "adam" else None
    adam_v = _zero_grads(params) if train_config.optimizer == "adam" else None
    step = 0

    ce_values = [ex.ce_loss for ex in dataset if ex.ce_loss is not None]
    mean_ce = float(np.mean(ce_values)) if ce_values else None

    epoch_losses: list[float] = []
    epoch_combined: list[float] = []
    n = len(dataset)
    for _ in range(train_config.epochs):
        order = rng.permutation(n)
        seen = 0
        loss_sum = 0.0
        for start in range(0, n, train_config.batch_size):
            batch = [dataset[i] for i in order[start : start + train_config.batch_size]]
            loss, grads = loss_and_grads(
                batch, params, head_config, rng if use_dropout else None
            )
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step}")
            loss_sum += loss * len(batch)
            seen += len(batch)
            step += 1
            if train_config.optimizer == "sgd":
                for name, g in grads.items():
                    getattr(params, name)[...] -= train_config.learning_rate * g
            else:
                for name, g in grads.items():
                    adam_m[name] = ADAM_BETA1 * adam_m[name] + (1 - ADAM_BETA1) * g
                    adam_v[name] = ADAM_BETA2 * adam_v[name] + (1 - ADAM_BETA2) * g * g
                    m_hat = adam_m[name] / (1 - ADAM_BETA1**step)
                    v_hat = adam_v[name] / (1 - ADAM_BETA2**step)
                    getattr(params, name)[...] -= (
                        train_config.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
                    )
        epoch_loss = loss_sum / seen
        epoch_losses.append(epoch_loss)
        if mean_ce is not None:
            epoch_combined.append(mean_ce + train_config.lambda_conf * epoch_loss)
    return TrainResult(params=params, epoch_losses=epoch_losses, epoch_combined=epoch_combined)


HEAD_SCHEMA_VERSION = 1


def save_head(params: HeadParams, config: HeadConfig, out_dir: str | Path) -> Path:
    """Serialize params as one tensor file per field plus a descriptor."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    refs = {}
    for name, arr in params.arrays().items():
        ref = f"{name}.semc"
        tensorio.write_tensor(arr.ravel(), arr.shape, "f64", out_dir / ref)
        refs[name] = ref
    descriptor = {
        "schema_version": HEAD_SCHEMA_VERSION,
        "d_model": config.d_model,
        "dropout_rate": config.dropout_rate,
        "seed": config.seed,
        "tensors": refs,
    }
    path = out_dir / "head.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(descriptor, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_head(descriptor_path: str | Path) -> tuple[HeadParams, HeadConfig]:
    descriptor_path = Path(descriptor_path)
    with open(descriptor_path, "r", encoding="utf-8") as fh:
        descriptor = json.load(fh)
    if descriptor.get("schema_version") != HEAD_SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported head schema_version {descriptor.get('schema_version')}"
        )
    config = HeadConfig(
        d_model=descriptor["d_model"],
        dropout_rate=descriptor["dropout_rate"],
        seed=descriptor["seed"],
    )
    arrays = {}
    for name in HeadParams.FIELDS:
        ref = descriptor["tensors"][name]
        values, _, _ = tensorio.read_tensor(descriptor_path.parent / ref)
        arrays[name] = np.asarray(values, dtype=np.float64)
    params = HeadParams(**arrays)
    params.check_shapes(config)
    return params, config
