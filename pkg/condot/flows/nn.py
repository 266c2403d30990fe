"""
Feedforward velocity model v_t(y, x) with explicit forward and reverse passes.
Parameters live in one flat float64 vector; optimizers and checkpoints work on that vector.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from condot.errors import DimensionMismatchError, NonFiniteLossError
from condot.schemas import Activation, ArchitectureConfig, ModelCheckpoint, OptimizerConfig

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.TANH:
        return np.tanh(z)
    return z * expit(z)


def _activate_grad(z: np.ndarray, a: np.ndarray, activation: Activation) -> np.ndarray:
    """Derivative of the activation given pre-activation z and output a."""
    if activation == Activation.TANH:
        return 1.0 - a ** 2
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def time_features(t: np.ndarray, n_features: int) -> np.ndarray:
    """Raw t followed by sin/cos(2 pi k t) for k = 1..n_features/2."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if n_features == 0:
        return t
    k = np.arange(1, n_features // 2 + 1, dtype=np.float64)[None, :]
    angle = 2.0 * np.pi * k * t
    return np.hstack([t, np.sin(angle), np.cos(angle)])


@dataclass(frozen=True, eq=False)
class VelocityModel:
    """MLP mapping (time features, y, x) to a velocity in R^m.

    The y-velocity is not modelled; it is zero by construction.
    """

    widths: Tuple[int, ...]
    activation: Activation
    n_time_features: int
    condition_dim: int
    state_dim: int
    params: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activation", Activation(self.activation))
        params = np.array(self.params, dtype=np.float64, copy=True)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        if self.widths[0] != self.input_dim or self.widths[-1] != self.state_dim:
            raise DimensionMismatchError(
                f"Widths {self.widths} do not fit input {self.input_dim} / output {self.state_dim}"
            )
        if params.size != self.expected_params(self.widths):
            raise DimensionMismatchError(f"Expected {self.expected_params(self.widths)} parameters, got {params.size}")

    @staticmethod
    def expected_params(widths: Sequence[int]) -> int:
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    @property
    def input_dim(self) -> int:
        return 1 + self.n_time_features + self.condition_dim + self.state_dim

    @property
    def n_params(self) -> int:
        return self.params.size

    def layers(self, params: Optional[np.ndarray] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(W, b) views with W of shape (fan_in, fan_out)."""
        params = self.params if params is None else params
        out, offset = [], 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = params[offset:offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def with_params(self, params: np.ndarray) -> "VelocityModel":
        return replace(self, params=params)

    def inputs(self, t, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if y.shape[1] != self.condition_dim or x.shape[1] != self.state_dim:
            raise DimensionMismatchError(
                f"Inputs of dims ({y.shape[1]}, {x.shape[1]}) for a model of dims ({self.condition_dim}, {self.state_dim})"
            )
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return np.hstack([time_features(t, self.n_time_features), y, x])

    def to_checkpoint(self) -> ModelCheckpoint:
        return ModelCheckpoint(
            version=CHECKPOINT_VERSION,
            widths=list(self.widths),
            activation=self.activation.value,
            time_features=self.n_time_features,
            condition_dim=self.condition_dim,
            state_dim=self.state_dim,
            params=self.params.tolist(),
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: ModelCheckpoint) -> "VelocityModel":
        if checkpoint.version != CHECKPOINT_VERSION:
            raise DimensionMismatchError(f"Unsupported checkpoint version {checkpoint.version}")
        return cls(
            widths=tuple(checkpoint.widths),
            activation=Activation(checkpoint.activation),
            n_time_features=checkpoint.time_features,
            condition_dim=checkpoint.condition_dim,
            state_dim=checkpoint.state_dim,
            params=np.array(checkpoint.params, dtype=np.float64),
        )


def init_model(condition_dim: int, state_dim: int, architecture: Optional[ArchitectureConfig] = None,
               seed: int = 0, zero_final: bool = True) -> VelocityModel:
    """Glorot-uniform weights, zero biases; the final layer is zero unless ``zero_final`` is off."""
    architecture = architecture or ArchitectureConfig()
    if architecture.time_features % 2:
        raise DimensionMismatchError(f"time_features must be even, got {architecture.time_features}")
    widths = (1 + architecture.time_features + condition_dim + state_dim, *architecture.hidden, state_dim)
    rng = np.random.default_rng(seed)
    chunks = []
    n_layers = len(widths) - 1
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if zero_final and index == n_layers - 1:
            w = np.zeros_like(w)
        chunks.extend([w.ravel(), np.zeros(fan_out)])
    model = VelocityModel(
        widths=widths,
        activation=architecture.activation,
        n_time_features=architecture.time_features,
        condition_dim=condition_dim,
        state_dim=state_dim,
        params=np.concatenate(chunks),
    )
    logger.debug(f"Initialized velocity model {widths} with {model.n_params} parameters")
    return model


def _forward_pass(model: VelocityModel, inputs: np.ndarray, params: np.ndarray):
    layers = model.layers(params)
    pre, post = [], [inputs]
    a = inputs
    for index, (w, b) in enumerate(layers):
        z = a @ w + b
        if index < len(layers) - 1:
            a = _activate(z, model.activation)
        else:
            a = z
        pre.append(z)
        post.append(a)
    return pre, post


def forward(model: VelocityModel, t, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Velocity v_t(y, x) of shape (n, m)."""
    _, post = _forward_pass(model, model.inputs(t, y, x), model.params)
    return post[-1]


def loss_and_grad(model: VelocityModel, t, y: np.ndarray, x_t: np.ndarray,
                  target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over the batch of ||v_t(y, x_t) - target||^2 and its gradient in the flat parameters."""
    inputs = model.inputs(t, y, x_t)
    target = np.atleast_2d(target)
    n = inputs.shape[0]
    pre, post = _forward_pass(model, inputs, model.params)
    residual = post[-1] - target
    value = float(np.sum(residual ** 2) / n)

    layers = model.layers()
    grads: List[np.ndarray] = []
    delta = 2.0 * residual / n
    for index in range(len(layers) - 1, -1, -1):
        w, _ = layers[index]
        grads.append(delta.sum(axis=0))
        grads.append((post[index].T @ delta).ravel())
        if index > 0:
            upstream = delta @ w.T
            delta = upstream * _activate_grad(pre[index - 1], post[index], model.activation)
    grads.reverse()
    return value, np.concatenate(grads)


def loss(model: VelocityModel, t, y: np.ndarray, x_t: np.ndarray, target: np.ndarray) -> float:
    residual = forward(model, t, y, x_t) - np.atleast_2d(target)
    return float(np.sum(residual ** 2) / residual.shape[0])


def clip_gradient(grad: np.ndarray, max_norm: Optional[float]) -> np.ndarray:
    if max_norm is None:
        return grad
    total = float(np.linalg.norm(grad))
    if not np.isfinite(total):
        raise NonFiniteLossError("Gradient norm is not finite")
    if total > max_norm:
        return grad * (max_norm / total)
    return grad


@dataclass
class AdamState:
    """First/second moment estimates and step counter."""
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), step=0)


def sgd_step(model: VelocityModel, grad: np.ndarray, learning_rate: float) -> VelocityModel:
    return model.with_params(model.params - learning_rate * grad)


def adam_step(model: VelocityModel, grad: np.ndarray, state: AdamState,
              config: Optional[OptimizerConfig] = None) -> Tuple[VelocityModel, AdamState]:
    """One Adam update with bias correction; returns the new model and a new state."""
    config = config or OptimizerConfig()
    step = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad ** 2
    m_hat = m / (1.0 - config.beta1 ** step)
    v_hat = v / (1.0 - config.beta2 ** step)
    params = model.params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return model.with_params(params), AdamState(m=m, v=v, step=step)


@dataclass
class Optimizer:
    """Adam or SGD driven by an OptimizerConfig, with optional gradient clipping."""
    config: OptimizerConfig
    state: Optional[AdamState] = field(default=None)

    def step(self, model: VelocityModel, grad: np.ndarray) -> VelocityModel:
        grad = clip_gradient(grad, self.config.clip_grad_norm)
        if self.config.name == "sgd":
            return sgd_step(model, grad, self.config.learning_rate)
        if self.state is None:
            self.state = AdamState.zeros(model.n_params)
        model, self.state = adam_step(model, grad, self.state, self.config)
        return model


def save_model(model: VelocityModel, path: Union[str, Path]) -> None:
    Path(path).write_text(model.to_checkpoint().model_dump_json())
    logger.info(f"Checkpoint with {model.n_params} parameters written to {path}")


def load_model(path: Union[str, Path]) -> VelocityModel:
    checkpoint = ModelCheckpoint.model_validate(json.loads(Path(path).read_text()))
    return VelocityModel.from_checkpoint(checkpoint)
