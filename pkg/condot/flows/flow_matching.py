"""
Flow matching with minibatch couplings.
Pairing strategies (independent, ot, diagonal-bayes, ot-bayes), regression targets,
the training loop with validation-based model selection, and Euler posterior sampling.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import Config
from condot.core.geodesics import euler_flow
from condot.core.measures import CostSpec, DiscreteJointMeasure
from condot.core.ot_exact import cost_matrix, solve_assignment
from condot.core.sinkhorn import default_epsilon, sinkhorn_divergence
from condot.errors import NonFiniteLossError
from condot.flows.nn import Optimizer, VelocityModel, forward, init_model, loss, loss_and_grad
from condot.guards.numeric_guards import BatchGuard
from condot.schemas import CouplingKind, CouplingMode, TrainConfig

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["iter", "train_loss", "val_loss"]


@dataclass(frozen=True, eq=False)
class FlowDataset:
    """Fixed set of (y, x) samples."""
    ys: np.ndarray
    xs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ys", np.atleast_2d(np.asarray(self.ys, dtype=np.float64)))
        object.__setattr__(self, "xs", np.atleast_2d(np.asarray(self.xs, dtype=np.float64)))

    def __len__(self) -> int:
        return self.xs.shape[0]

    @property
    def condition_dim(self) -> int:
        return self.ys.shape[1]

    @property
    def state_dim(self) -> int:
        return self.xs.shape[1]


@dataclass(frozen=True, eq=False)
class TrainResult:
    """Best model by validation loss plus the recorded curves."""
    model: VelocityModel
    curves: pd.DataFrame
    best_iteration: int
    best_val_loss: float


def make_batch_pairs(z: np.ndarray, y: np.ndarray, x: np.ndarray,
                     mode: CouplingMode) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Re-pair noise samples z with data pairs (y, x).

    (y, x) stay in place and z is permuted: ``z_paired[sigma[i]] = z[i]`` where sigma is the
    optimal assignment of source (y_i, z_i) to target (y_j, x_j).

    Returns:
        Tuple of (z_paired, y, x)
    """
    z = np.atleast_2d(z)
    y = np.atleast_2d(y)
    x = np.atleast_2d(x)
    exact = mode.kind in (CouplingKind.OT, CouplingKind.OT_BAYES)
    BatchGuard(Config.MAX_ASSIGNMENT_SIZE).require_batch(z, y, x, needs_exact=exact)
    if not exact or z.shape[0] == 1:
        return z, y, x

    if mode.kind == CouplingKind.OT:
        spec = CostSpec(p=2.0, beta=0.0)
    else:
        spec = CostSpec(p=2.0, beta=mode.beta, strict=mode.strict)
    sigma, _ = solve_assignment(cost_matrix((y, z), (y, x), spec))
    z_paired = np.empty_like(z)
    z_paired[sigma] = z
    return z_paired, y, x


def pairing_cost(z: np.ndarray, y: np.ndarray, x: np.ndarray, y_source: Optional[np.ndarray] = None,
                 beta: float = 0.0) -> float:
    """Mean d_beta^2 between (y_source_i, z_i) and (y_i, x_i) of an index-aligned pairing."""
    y_source = y if y_source is None else y_source
    return float(np.mean(np.sum((z - x) ** 2, axis=1) + beta * np.sum((y_source - y) ** 2, axis=1)))


def training_targets(z: np.ndarray, x: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """x_t = (1 - t) z + t x and the regression target x - z."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return (1.0 - t) * z + t * x, x - z


def _paired_dataset(data: FlowDataset, mode: CouplingMode, chunk: int,
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pair a whole dataset chunk by chunk against fresh noise."""
    z = rng.standard_normal(data.xs.shape)
    out = []
    for start in range(0, len(data), chunk):
        sl = slice(start, start + chunk)
        out.append(make_batch_pairs(z[sl], data.ys[sl], data.xs[sl], mode))
    return tuple(np.concatenate(parts) for parts in zip(*out))


class _PairStream:
    """Shuffled coupling batches, re-paired and cut into gradient batches."""

    def __init__(self, data: FlowDataset, config: TrainConfig, rng: np.random.Generator):
        self.data = data
        self.config = config
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)
        self.queue = []

    def _refill(self) -> None:
        size = self.config.coupling_batch_size
        if self.order.size < size:
            self.order = np.concatenate([self.order, self.rng.permutation(len(self.data))])
        index, self.order = self.order[:size], self.order[size:]
        z = self.rng.standard_normal((size, self.data.state_dim))
        z, y, x = make_batch_pairs(z, self.data.ys[index], self.data.xs[index], self.config.coupling)
        step = self.config.batch_size
        self.queue = [(z[k:k + step], y[k:k + step], x[k:k + step]) for k in range(0, size - step + 1, step)]

    def next(self):
        if not self.queue:
            self._refill()
        return self.queue.pop(0)


def train(config: TrainConfig, train_data: FlowDataset, val_data: FlowDataset,
          log_path: Optional[Union[str, Path]] = None,
          model: Optional[VelocityModel] = None) -> TrainResult:
    """Minimize the flow-matching loss of the configured coupling and keep the best validation model.

    Raises:
        NonFiniteLossError: if the training loss becomes NaN or infinite
    """
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_model(train_data.condition_dim, train_data.state_dim, config.architecture, seed=config.seed)
    if config.iterations == 0:
        return TrainResult(model=model, curves=pd.DataFrame(columns=CURVE_COLUMNS), best_iteration=0,
                           best_val_loss=float("nan"))

    val_z, val_y, val_x = _paired_dataset(val_data, config.coupling, config.coupling_batch_size, rng)
    val_t = rng.uniform(size=len(val_data))
    val_xt, val_target = training_targets(val_z, val_x, val_t)

    def validate(current: VelocityModel) -> float:
        return loss(current, val_t, val_y, val_xt, val_target)

    stream = _PairStream(train_data, config, rng)
    optimizer = Optimizer(config.optimizer)
    rows = []
    best_model, best_iteration = model, 0
    best_val = validate(model)
    rows.append({"iter": 0, "train_loss": float("nan"), "val_loss": best_val})
    window = []

    log_file = open(log_path, "w") if log_path is not None else None
    try:
        if log_file:
            log_file.write(json.dumps(rows[0]) + "\n")
        progress = tqdm(range(1, config.iterations + 1), desc=f"train[{config.coupling.kind.value}]",
                        disable=not Config.SHOW_PROGRESS)
        for iteration in progress:
            z, y, x = stream.next()
            t = rng.uniform(size=z.shape[0])
            x_t, target = training_targets(z, x, t)
            value, grad = loss_and_grad(model, t, y, x_t, target)
            if not np.isfinite(value):
                logger.error(f"Non-finite training loss at iteration {iteration}")
                raise NonFiniteLossError(f"Training loss became {value} at iteration {iteration}")
            model = optimizer.step(model, grad)
            window.append(value)

            if iteration % config.eval_every == 0 or iteration == config.iterations:
                val = validate(model)
                row = {"iter": iteration, "train_loss": float(np.mean(window)), "val_loss": val}
                rows.append(row)
                window = []
                if log_file:
                    log_file.write(json.dumps(row) + "\n")
                    log_file.flush()
                if val < best_val:
                    best_model, best_iteration, best_val = model, iteration, val
                progress.set_postfix(val=f"{val:.4f}", best=f"{best_val:.4f}")
    finally:
        if log_file:
            log_file.close()

    logger.info(f"Training finished: best validation loss {best_val:.5f} at iteration {best_iteration}")
    return TrainResult(model=best_model, curves=pd.DataFrame(rows, columns=CURVE_COLUMNS),
                       best_iteration=best_iteration, best_val_loss=best_val)


class ModelVelocityField:
    """Velocity (0, v_t(y, x)) of a trained model; conditions never move."""

    def __init__(self, model: VelocityModel):
        self.model = model

    def __call__(self, t: float, ys: np.ndarray, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros_like(ys), forward(self.model, t, ys, xs)


def sample_flow(model: VelocityModel, ys: np.ndarray, z: np.ndarray,
                euler_steps: int) -> Tuple[np.ndarray, np.ndarray]:
    """Push noise z through the model flow with the conditions ys held fixed."""
    initial = DiscreteJointMeasure.uniform(ys, z)
    final = euler_flow(ModelVelocityField(model), initial, euler_steps)
    return final.ys, final.xs


def sample_posterior(model: VelocityModel, y: np.ndarray, n_samples: int, euler_steps: int = 10,
                     seed: Union[int, np.random.SeedSequence] = 0) -> np.ndarray:
    """Approximate posterior samples x ~ P_{X|Y=y} from z ~ N(0, I)."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, model.state_dim))
    ys = np.repeat(np.atleast_2d(y), n_samples, axis=0)
    _, xs = sample_flow(model, ys, z, euler_steps)
    return xs


def sample_divergence(samples_a: np.ndarray, samples_b: np.ndarray, epsilon: Optional[float] = None,
                      max_iter: int = Config.SINKHORN_MAX_ITER) -> Tuple[float, float]:
    """Sinkhorn divergence between two point clouds in state space; returns (value, epsilon used)."""
    mu = DiscreteJointMeasure.uniform(np.zeros((samples_a.shape[0], 1)), samples_a)
    nu = DiscreteJointMeasure.uniform(np.zeros((samples_b.shape[0], 1)), samples_b)
    spec = CostSpec(p=2.0, beta=0.0)
    if epsilon is None:
        epsilon = default_epsilon(mu, nu, spec)
    return sinkhorn_divergence(mu, nu, spec, epsilon, max_iter), epsilon
