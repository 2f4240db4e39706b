"""Layered beam classifier with exact backpropagation.

Convolutions run on (channels, rows, cols) tensors; the 1D mode is the
special case of a single row with (1, k) kernels. Activations are flattened
channel-major before the dense layers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from beam_align.configuration import (
    Activation,
    ConvDimensionality,
    FeatureScale,
    LayerKind,
    ModelConfig,
    Optimizer,
    TrainingConfig,
)
from beam_align.errors import ConfigError, DataFormatError, InvalidArgumentError, TrainingDivergenceError
from beam_align.formats import read_container, write_container
from beam_align.sweep import Dataset
from beam_align.utils import substream, to_builtin

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC: Final = b"BAM1"
CHECKPOINT_VERSION: Final = 1
DB_FLOOR_WATT: Final = 1e-20


@dataclass(frozen=True)
class Preprocessing:
    """Map linear RSSI in watts to model inputs: optional dBm, then standardization."""

    scale: FeatureScale = FeatureScale.LINEAR
    mean: float = 0.0
    std: float = 1.0
    floor_watt: float = DB_FLOOR_WATT

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready mapping."""
        return {"scale": self.scale.value, "mean": self.mean, "std": self.std, "floor_watt": self.floor_watt}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Preprocessing:
        """Rebuild from :meth:`to_dict` output."""
        return cls(
            scale=FeatureScale(data["scale"]),
            mean=float(data["mean"]),
            std=float(data["std"]),
            floor_watt=float(data["floor_watt"]),
        )


def _transform(rssi: np.ndarray, scale: FeatureScale, floor: float) -> np.ndarray:
    rssi = np.asarray(rssi, dtype=np.float64)
    if scale == FeatureScale.DB:
        return 10.0 * np.log10(np.maximum(rssi, floor)) + 30.0
    return rssi


def fit_preprocessing(train_rssi: np.ndarray, scale: FeatureScale) -> Preprocessing:
    """Fit scalar standardization statistics on the train features."""
    values = _transform(train_rssi, scale, DB_FLOOR_WATT)
    mean = float(np.mean(values))
    std = float(np.std(values))
    if not (math.isfinite(std) and std > 0):
        std = 1.0
    return Preprocessing(scale=scale, mean=mean, std=std)


def preprocess(rssi: np.ndarray, prep: Preprocessing) -> np.ndarray:
    """Return model inputs for linear RSSI features."""
    return (_transform(rssi, prep.scale, prep.floor_watt) - prep.mean) / prep.std


def preprocess_jacobian(rssi: np.ndarray, prep: Preprocessing) -> np.ndarray:
    """Elementwise derivative of :func:`preprocess` with respect to the linear features."""
    rssi = np.asarray(rssi, dtype=np.float64)
    if prep.scale == FeatureScale.LINEAR:
        return np.full(rssi.shape, 1.0 / prep.std)
    above = rssi > prep.floor_watt
    safe = np.where(above, rssi, 1.0)
    return np.where(above, 10.0 / (math.log(10.0) * safe * prep.std), 0.0)


@dataclass(frozen=True)
class LayerPlan:
    """Resolved shapes and parameter offset of one layer."""

    kind: LayerKind
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    weight_shape: tuple[int, ...]
    activation: Activation
    offset: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    @property
    def n_weights(self) -> int:
        """Number of weight entries."""
        return math.prod(self.weight_shape)

    @property
    def n_params(self) -> int:
        """Weights plus biases."""
        return self.n_weights + self.weight_shape[0]

    @property
    def fan_in(self) -> int:
        """Inputs feeding each output unit."""
        return math.prod(self.weight_shape[1:])


def plan_layers(config: ModelConfig) -> list[LayerPlan]:
    """Resolve every hidden layer plus the output head; the head is last."""
    if config.input_len is None or config.n_classes is None:
        raise ConfigError("model input_len and n_classes must be resolved before building")
    two_d = config.conv_dimensionality == ConvDimensionality.TWO_D
    if two_d:
        if config.reshape is None:
            raise ConfigError("2d convolution mode requires model.reshape")
        shape: tuple[int, ...] = (1, *config.reshape)
    else:
        shape = (1, 1, config.input_len)
    if not config.layers or config.layers[0].kind == LayerKind.DENSE:
        shape = (config.input_len,)

    plans: list[LayerPlan] = []
    offset = 0
    for spec in config.layers:
        if spec.kind == LayerKind.CONV:
            channels, rows, cols = shape
            if two_d:
                kernel, stride, padding = (spec.kernel,) * 2, (spec.stride,) * 2, (spec.padding,) * 2
            else:
                kernel, stride, padding = (1, spec.kernel), (1, spec.stride), (0, spec.padding)
            out_rows = (rows + 2 * padding[0] - kernel[0]) // stride[0] + 1
            out_cols = (cols + 2 * padding[1] - kernel[1]) // stride[1] + 1
            if out_rows < 1 or out_cols < 1:
                raise ConfigError(f"layer {len(plans)} kernel does not fit its {rows}x{cols} input")
            plan = LayerPlan(
                kind=LayerKind.CONV,
                in_shape=shape,
                out_shape=(spec.filters, out_rows, out_cols),
                weight_shape=(spec.filters, channels, *kernel),
                activation=spec.activation,
                offset=offset,
                kernel=kernel,
                stride=stride,
                padding=padding,
            )
        else:
            width = math.prod(shape)
            plan = LayerPlan(
                kind=LayerKind.DENSE,
                in_shape=(width,),
                out_shape=(spec.filters,),
                weight_shape=(spec.filters, width),
                activation=spec.activation,
                offset=offset,
            )
        plans.append(plan)
        offset += plan.n_params
        shape = plan.out_shape
    width = math.prod(shape)
    plans.append(
        LayerPlan(
            kind=LayerKind.DENSE,
            in_shape=(width,),
            out_shape=(config.n_classes,),
            weight_shape=(config.n_classes, width),
            activation=Activation.NONE,
            offset=offset,
        )
    )
    return plans


def parameter_count(config: ModelConfig) -> int:
    """Number of scalar parameters of the resolved architecture."""
    return sum(plan.n_params for plan in plan_layers(config))


@dataclass(eq=False)
class ModelState:
    """Parameters (flat float64 vector), architecture, preprocessing and training record."""

    config: ModelConfig
    params: np.ndarray
    preprocessing: Preprocessing = field(default_factory=Preprocessing)
    training_meta: dict[str, Any] = field(default_factory=dict)
    plans: list[LayerPlan] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.plans = plan_layers(self.config)
        self.params = np.asarray(self.params, dtype=np.float64)
        expected = sum(plan.n_params for plan in self.plans)
        if self.params.shape != (expected,):
            raise InvalidArgumentError(f"expected {expected} parameters, got shape {self.params.shape}")

    @property
    def n_hidden(self) -> int:
        """Number L of hidden layers exposing activations."""
        return len(self.plans) - 1

    @property
    def input_len(self) -> int:
        """Feature length M_w."""
        return int(self.config.input_len)

    @property
    def n_classes(self) -> int:
        """Number of beams Q."""
        return int(self.config.n_classes)

    def weights(self, params: Optional[np.ndarray] = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Return (weight, bias) views into ``params`` for every layer."""
        params = self.params if params is None else params
        views = []
        for plan in self.plans:
            end = plan.offset + plan.n_weights
            views.append(
                (
                    params[plan.offset: end].reshape(plan.weight_shape),
                    params[end: end + plan.weight_shape[0]],
                )
            )
        return views


@dataclass(frozen=True, eq=False)
class LayerActivations:
    """Flattened post-nonlinearity output of each hidden layer, plus the logits."""

    layers: list[np.ndarray]
    logits: np.ndarray

    def __len__(self) -> int:
        return len(self.layers)


def init_model(config: ModelConfig, seed: int, preprocessing: Optional[Preprocessing] = None) -> ModelState:
    """Fan-in scaled uniform weights and zero biases from the ``init`` substream."""
    plans = plan_layers(config)
    rng = substream(seed, "init")
    params = np.zeros(sum(plan.n_params for plan in plans))
    for plan in plans:
        bound = math.sqrt(6.0 / plan.fan_in)
        params[plan.offset: plan.offset + plan.n_weights] = rng.uniform(-bound, bound, plan.n_weights)
    return ModelState(config=config, params=params, preprocessing=preprocessing or Preprocessing())


def _im2col(a: np.ndarray, plan: LayerPlan) -> np.ndarray:
    n, channels = a.shape[:2]
    (kh, kw), (sh, sw), (ph, pw) = plan.kernel, plan.stride, plan.padding
    padded = np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    _, out_rows, out_cols = plan.out_shape
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, out_rows, out_cols, channels * kh * kw)


def _col2im(dcols: np.ndarray, in_shape: tuple[int, ...], plan: LayerPlan) -> np.ndarray:
    n, channels, rows, cols = in_shape
    (kh, kw), (sh, sw), (ph, pw) = plan.kernel, plan.stride, plan.padding
    _, out_rows, out_cols = plan.out_shape
    dcols = dcols.reshape(n, out_rows, out_cols, channels, kh, kw)
    padded = np.zeros((n, channels, rows + 2 * ph, cols + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i: i + sh * out_rows: sh, j: j + sw * out_cols: sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return padded[:, :, ph: ph + rows, pw: pw + cols]


def _check_inputs(X: np.ndarray, state: ModelState) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.input_len:
        raise InvalidArgumentError(f"expected inputs of length {state.input_len}, got shape {X.shape}")
    return X


def _forward(X: np.ndarray, state: ModelState, params: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list]:
    n = X.shape[0]
    a = X.reshape(n, *state.plans[0].in_shape)
    hidden: list[np.ndarray] = []
    caches = []
    for plan, (W, b) in zip(state.plans, state.weights(params)):
        if plan.kind == LayerKind.CONV:
            cols = _im2col(a, plan)
            z = (cols @ W.reshape(W.shape[0], -1).T + b).transpose(0, 3, 1, 2)
            caches.append((a.shape, cols, z))
        else:
            flat = a.reshape(n, -1)
            z = flat @ W.T + b
            caches.append((flat.shape, flat, z))
        a = np.maximum(z, 0.0) if plan.activation == Activation.RELU else z
        hidden.append(a.reshape(n, -1))
    logits = hidden.pop()
    return logits, hidden, caches


def _backward(
        dlogits: np.ndarray,
        state: ModelState,
        params: np.ndarray,
        caches: list,
) -> tuple[np.ndarray, np.ndarray]:
    grad = np.zeros_like(params)
    g = dlogits
    for plan, (W, _), (in_shape, inputs, z) in reversed(list(zip(state.plans, state.weights(params), caches))):
        g = g.reshape(z.shape)
        if plan.activation == Activation.RELU:
            g = g * (z > 0)
        if plan.kind == LayerKind.CONV:
            filters = W.shape[0]
            g_t = g.transpose(0, 2, 3, 1).reshape(-1, filters)
            grad_w = g_t.T @ inputs.reshape(-1, inputs.shape[-1])
            grad_b = g_t.sum(axis=0)
            g = _col2im(g_t @ W.reshape(filters, -1), in_shape, plan)
        else:
            grad_w = g.T @ inputs
            grad_b = g.sum(axis=0)
            g = (g @ W).reshape(in_shape)
        end = plan.offset + plan.n_weights
        grad[plan.offset: end] = grad_w.ravel()
        grad[end: end + plan.weight_shape[0]] = grad_b
    return grad, g.reshape(g.shape[0], -1)


def forward_batch(X: np.ndarray, state: ModelState) -> tuple[np.ndarray, LayerActivations]:
    """Run a batch of model inputs (n, M_w) through the network."""
    X = _check_inputs(X, state)
    logits, hidden, _ = _forward(X, state, state.params)
    return logits, LayerActivations(layers=hidden, logits=logits)


def forward(x: np.ndarray, state: ModelState) -> tuple[np.ndarray, LayerActivations]:
    """Run one model input vector through the network."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgumentError(f"expected a feature vector, got shape {x.shape}")
    logits, acts = forward_batch(x[None, :], state)
    return logits[0], LayerActivations(layers=[a[0] for a in acts.layers], logits=logits[0])


def infer(rssi: np.ndarray, state: ModelState) -> tuple[np.ndarray, LayerActivations]:
    """Preprocess linear RSSI rows and run them through the network."""
    return forward_batch(preprocess(np.atleast_2d(rssi), state.preprocessing), state)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label: int) -> float:
    """Return -log softmax(logits)[label]."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise InvalidArgumentError(f"label {label} outside [0, {logits.shape[-1]})")
    return float(-log_softmax(logits)[label])


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over a batch."""
    return float(-np.mean(log_softmax(logits)[np.arange(len(labels)), labels]))


def _loss_and_gradients(
        X: np.ndarray, labels: np.ndarray, state: ModelState, params: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    logits, _, caches = _forward(X, state, params)
    probs = softmax(logits)
    loss = batch_cross_entropy(logits, labels)
    dlogits = probs
    dlogits[np.arange(len(labels)), labels] -= 1.0
    grad, input_grad = _backward(dlogits, state, params, caches)
    return loss, grad / len(labels), input_grad


def backward_batch(X: np.ndarray, labels: np.ndarray, state: ModelState) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss, its parameter gradient, and each sample's own input gradient."""
    X = _check_inputs(X, state)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (X.shape[0],) or labels.min(initial=0) < 0 or labels.max(initial=0) >= state.n_classes:
        raise InvalidArgumentError("labels must match the batch and lie in [0, Q)")
    return _loss_and_gradients(X, labels, state, state.params)


def backward(x: np.ndarray, label: int, state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the cross-entropy loss w.r.t. the parameters and the input."""
    _, grad, input_grad = backward_batch(np.asarray(x, dtype=np.float64)[None, :], np.array([label]), state)
    return grad, input_grad[0]


def rank_beams(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits per row, descending, ties toward lower index."""
    logits = np.atleast_2d(logits)
    if not 1 <= k <= logits.shape[1]:
        raise InvalidArgumentError(f"k must lie in [1, {logits.shape[1]}], got {k}")
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def predict_topk(x: np.ndarray, state: ModelState, k: int) -> list[int]:
    """Top-k beam indices for one model input."""
    logits, _ = forward(x, state)
    return rank_beams(logits, k)[0].tolist()


@dataclass
class _Adam:
    beta1: float
    beta2: float
    epsilon: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size == 0 or batch_size >= n:
        return [np.arange(n)]
    order = substream(seed, "shuffle", epoch).permutation(n)
    return [order[i: i + batch_size] for i in range(0, n, batch_size)]


def train(
        dataset: Dataset,
        model_config: ModelConfig,
        training: TrainingConfig,
        *,
        feature_scale: FeatureScale = FeatureScale.DB,
        seed: int = 0,
) -> ModelState:
    """Train the classifier on the train split.

    Shuffling and initialization come from seeded substreams, so the same
    inputs always yield the same parameters. When ``training.patience`` is
    set, training stops after that many epochs without a validation-loss
    improvement and the best parameters are restored.
    """
    train_split = dataset.train
    if len(train_split) == 0:
        raise InvalidArgumentError("the train split is empty")
    seed = training.seed if training.seed is not None else seed
    config = model_config.resolved(dataset.m_w, dataset.q)
    prep = fit_preprocessing(train_split.rssi, feature_scale)
    X = preprocess(train_split.rssi, prep)
    y = train_split.labels
    X_val = preprocess(dataset.validation.rssi, prep)
    y_val = dataset.validation.labels

    state = init_model(config, seed, prep)
    params = state.params.copy()
    adam = _Adam(training.beta1, training.beta2, training.epsilon, np.zeros_like(params), np.zeros_like(params))
    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val, best_epoch, best_params = math.inf, -1, params.copy()

    for epoch in range(training.epochs):
        total = 0.0
        for batch in _batches(len(y), training.batch_size, seed, epoch):
            loss, grad, _ = _loss_and_gradients(X[batch], y[batch], state, params)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDivergenceError(epoch, loss)
            total += loss * len(batch)
            if training.optimizer == Optimizer.ADAM:
                params -= adam.step(grad, training.learning_rate)
            else:
                params -= training.learning_rate * grad
        train_losses.append(total / len(y))

        if len(y_val):
            logits, _, _ = _forward(X_val, state, params)
            val_loss = batch_cross_entropy(logits, y_val)
            if not math.isfinite(val_loss):
                raise TrainingDivergenceError(epoch, val_loss)
            val_losses.append(val_loss)
            if val_loss < best_val:
                best_val, best_epoch, best_params = val_loss, epoch, params.copy()
        logger.debug("epoch %d train_loss=%.6f val_loss=%s", epoch, train_losses[-1], val_losses[-1:] or None)
        if (epoch + 1) % 10 == 0 or epoch == training.epochs - 1:
            logger.info("Epoch %d/%d: train loss %.4f", epoch + 1, training.epochs, train_losses[-1])
        if training.patience is not None and len(y_val) and epoch - best_epoch >= training.patience:
            logger.info("Early stop after epoch %d (best epoch %d)", epoch, best_epoch)
            params = best_params
            break

    # Keep the in-memory state identical to what a checkpoint stores.
    state.params = params.astype(np.float32).astype(np.float64)
    state.training_meta = to_builtin(
        {
            "epochs_run": len(train_losses),
            "train_loss": train_losses,
            "val_loss": val_losses,
            "final_train_loss": train_losses[-1],
            "final_val_loss": val_losses[-1] if val_losses else None,
            "best_epoch": best_epoch if training.patience is not None else None,
            "seed": seed,
            "optimizer": training.optimizer.value,
            "learning_rate": training.learning_rate,
            "beta1": training.beta1,
            "beta2": training.beta2,
            "epsilon": training.epsilon,
            "batch_size": training.batch_size,
            "config_hash": dataset.meta.get("config_hash"),
        }
    )
    return state


def accuracy(rssi: np.ndarray, labels: np.ndarray, state: ModelState) -> float:
    """Top-1 accuracy of the softmax head on linear RSSI rows."""
    if len(labels) == 0:
        return math.nan
    logits, _ = infer(rssi, state)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def save_checkpoint(state: ModelState, path: str | Path) -> Path:
    """Write a BAM1 checkpoint: JSON config header plus a float32 parameter blob."""
    header = {
        "version": CHECKPOINT_VERSION,
        "model": state.config.to_dict(),
        "preprocessing": state.preprocessing.to_dict(),
        "training_meta": state.training_meta,
        "n_params": int(state.params.shape[0]),
        "config_hash": state.training_meta.get("config_hash"),
    }
    path = write_container(path, CHECKPOINT_MAGIC, header, state.params.astype("<f4").tobytes())
    logger.info("Wrote checkpoint %s (%d parameters)", path, state.params.shape[0])
    return path


def load_checkpoint(path: str | Path) -> ModelState:
    """Read a checkpoint written by :func:`save_checkpoint`."""

    def body_size(header: dict[str, Any]) -> int:
        try:
            return 4 * int(header["n_params"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: checkpoint header is incomplete") from e

    header, body = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, body_size)
    params = np.frombuffer(body, dtype="<f4").astype(np.float64)
    try:
        return ModelState(
            config=ModelConfig.from_dict(header["model"]),
            params=params,
            preprocessing=Preprocessing.from_dict(header["preprocessing"]),
            training_meta=header.get("training_meta", {}),
        )
    except (KeyError, ValueError) as e:
        raise DataFormatError(f"{path}: invalid checkpoint header: {e}") from e
