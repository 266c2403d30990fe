"""
Gaussian-mixture inverse problem.
GMM prior, diagonal linear forward operator with Gaussian noise, conjugate posterior
and an importance-sampling oracle for its mixture weights.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from config import Config
from condot.errors import DimensionMismatchError, InvalidMeasureError
from condot.schemas import ForwardDocument, GmmComponentDocument, GmmDocument, PosteriorDocument

logger = logging.getLogger(__name__)


def _read_only(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Mixture of Gaussians with diagonal covariances.

    ``variances[k]`` holds the diagonal of component k's covariance.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _read_only(self.weights))
        object.__setattr__(self, "means", _read_only(np.atleast_2d(self.means)))
        object.__setattr__(self, "variances", _read_only(np.atleast_2d(self.variances)))
        if self.means.shape != self.variances.shape or self.means.shape[0] != self.weights.shape[0]:
            raise DimensionMismatchError(
                f"GMM shapes disagree: weights {self.weights.shape}, means {self.means.shape}, "
                f"variances {self.variances.shape}"
            )
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > Config.WEIGHT_TOL:
            raise InvalidMeasureError(f"GMM weights must form a simplex (sum {self.weights.sum()!r})")
        if np.any(self.variances <= 0):
            raise InvalidMeasureError("GMM variances must be positive")

    @classmethod
    def isotropic(cls, weights, means, std: float) -> "GmmModel":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        return cls(weights, means, np.full(means.shape, std ** 2))

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def component_log_density(self, x: np.ndarray) -> np.ndarray:
        """log w_k + log N(x; m_k, diag(v_k)), shape (n, K)."""
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise DimensionMismatchError(f"Points of dim {x.shape[1]} for a GMM of dim {self.dim}")
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        per_dim = norm.logpdf(x[:, None, :], loc=self.means[None, :, :], scale=np.sqrt(self.variances)[None, :, :])
        return log_w[None, :] + per_dim.sum(axis=2)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_density(x), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Categorical then Gaussian draw; returns (points, component labels)."""
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        points = self.means[labels] + np.sqrt(self.variances[labels]) * noise
        return points, labels

    def to_document(self) -> GmmDocument:
        return GmmDocument(dim=self.dim, components=[
            GmmComponentDocument(weight=float(w), mean=m.tolist(), variance=v.tolist())
            for w, m, v in zip(self.weights, self.means, self.variances)
        ])

    @classmethod
    def from_document(cls, document: GmmDocument) -> "GmmModel":
        return cls(
            [c.weight for c in document.components],
            [c.mean for c in document.components],
            [c.variance for c in document.components],
        )


@dataclass(frozen=True, eq=False)
class LinearGaussianForward:
    """Y = f X + noise_std * N(0, I) with diagonal f."""

    diagonal: np.ndarray
    noise_std: float

    def __post_init__(self):
        object.__setattr__(self, "diagonal", _read_only(np.ravel(self.diagonal)))
        if not self.noise_std > 0:
            raise InvalidMeasureError(f"Noise std must be positive, got {self.noise_std}")

    @property
    def dim(self) -> int:
        return self.diagonal.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) * self.diagonal[None, :]

    def observe(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        clean = self.apply(x)
        return clean + self.noise_std * rng.standard_normal(clean.shape)

    def to_document(self) -> ForwardDocument:
        return ForwardDocument(diagonal=self.diagonal.tolist(), noise_std=self.noise_std)

    @classmethod
    def from_document(cls, document: ForwardDocument) -> "LinearGaussianForward":
        return cls(document.diagonal, document.noise_std)


def make_benchmark_gmm(seed: int, n_components: int = 10, dim: int = 5, std: float = 0.1) -> GmmModel:
    """Uniform-weight GMM with means drawn uniformly from [-1, 1]^dim and isotropic std."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-1.0, 1.0, size=(n_components, dim))
    return GmmModel.isotropic(np.full(n_components, 1.0 / n_components), means, std)


def make_benchmark_forward(dim: int = 5, noise_std: float = 0.1) -> LinearGaussianForward:
    """f_ii = 0.1 / (i + 1) for i = 1..dim."""
    return LinearGaussianForward(0.1 / (np.arange(1, dim + 1) + 1.0), noise_std)


def sample_joint(gmm: GmmModel, forward: LinearGaussianForward, n: int,
                 seed: Union[int, np.random.SeedSequence]) -> Tuple[np.ndarray, np.ndarray]:
    """Draw (y, x) pairs with x ~ gmm and y = f x + noise; returns (ys, xs)."""
    if n < 1:
        raise InvalidMeasureError(f"Sample count must be >= 1, got {n}")
    if forward.dim != gmm.dim:
        raise DimensionMismatchError(f"Forward operator of dim {forward.dim} for a GMM of dim {gmm.dim}")
    rng = np.random.default_rng(seed)
    xs, _ = gmm.sample(n, rng)
    ys = forward.observe(xs, rng)
    return ys, xs


def analytic_posterior(gmm: GmmModel, forward: LinearGaussianForward, y: np.ndarray) -> GmmModel:
    """Conjugate update of every component given one observation y.

    Sigma_k = (V_k^-1 + f^2 / s^2)^-1, m'_k = Sigma_k (V_k^-1 m_k + f y / s^2), and
    w'_k proportional to w_k N(y; f m_k, f^2 V_k + s^2).
    """
    y = np.ravel(np.asarray(y, dtype=np.float64))
    if y.shape[0] != forward.dim or forward.dim != gmm.dim:
        raise DimensionMismatchError(f"Observation of dim {y.shape[0]} for a problem of dim {gmm.dim}")
    f = forward.diagonal
    noise_var = forward.noise_std ** 2

    post_var = 1.0 / (1.0 / gmm.variances + (f ** 2)[None, :] / noise_var)
    post_mean = post_var * (gmm.means / gmm.variances + (f * y)[None, :] / noise_var)

    evidence_scale = np.sqrt((f ** 2)[None, :] * gmm.variances + noise_var)
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    log_w = log_w + norm.logpdf(y[None, :], loc=f[None, :] * gmm.means, scale=evidence_scale).sum(axis=1)
    weights = np.exp(log_w - logsumexp(log_w))
    weights = weights / weights.sum()
    return GmmModel(weights, post_mean, post_var)


def sample_posterior_exact(posterior: GmmModel, n: int,
                           seed: Union[int, np.random.SeedSequence]) -> np.ndarray:
    """Exact draws from a (posterior) mixture."""
    if n < 1:
        raise InvalidMeasureError(f"Sample count must be >= 1, got {n}")
    points, _ = posterior.sample(n, np.random.default_rng(seed))
    return points


def importance_weights(gmm: GmmModel, forward: LinearGaussianForward, y: np.ndarray,
                       n: int, seed: int) -> np.ndarray:
    """Self-normalized importance estimate of the posterior mixture weights.

    Proposal is the prior; each draw is weighted by its likelihood and credited to the
    component that generated it.
    """
    rng = np.random.default_rng(seed)
    xs, labels = gmm.sample(n, rng)
    y = np.ravel(y)
    log_lik = norm.logpdf(y[None, :], loc=forward.apply(xs), scale=forward.noise_std).sum(axis=1)
    w = np.exp(log_lik - logsumexp(log_lik))
    return np.bincount(labels, weights=w, minlength=gmm.n_components)


def condition_streams(seed: int, n: int) -> List[np.random.SeedSequence]:
    """Independent, reproducible child seeds for parallel draws."""
    return np.random.SeedSequence(seed).spawn(n)


def posterior_document(y: np.ndarray, posterior: GmmModel) -> PosteriorDocument:
    return PosteriorDocument(y=np.ravel(y).tolist(), posterior=posterior.to_document())


def save_gmm(gmm: GmmModel, path: Union[str, Path]) -> None:
    Path(path).write_text(gmm.to_document().model_dump_json(indent=2))


def load_gmm(path: Union[str, Path]) -> GmmModel:
    return GmmModel.from_document(GmmDocument.model_validate(json.loads(Path(path).read_text())))
