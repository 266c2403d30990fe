"""
Pydantic schemas for the condot toolkit.
JSON interchange documents, training/coupling configs and experiment command configs.
"""

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StrictModel(BaseModel):
    """Base for every schema: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Interchange documents
# ---------------------------------------------------------------------------

class AtomDocument(StrictModel):
    """One weighted atom (y, x)."""
    y: List[float] = Field(description="Condition vector")
    x: List[float] = Field(description="State vector")
    w: float = Field(description="Atom weight", ge=0)


class MeasureDocument(StrictModel):
    """Discrete joint measure on the product space."""
    d: int = Field(description="Condition dimension", ge=1)
    m: int = Field(description="State dimension", ge=1)
    atoms: List[AtomDocument] = Field(description="Weighted atoms", min_length=1)

    @model_validator(mode="after")
    def check_dimensions(self):
        for atom in self.atoms:
            if len(atom.y) != self.d or len(atom.x) != self.m:
                raise ValueError(f"atom dims ({len(atom.y)}, {len(atom.x)}) differ from ({self.d}, {self.m})")
        return self


class PlanEntryDocument(StrictModel):
    i: int = Field(description="Source atom index", ge=0)
    j: int = Field(description="Target atom index", ge=0)
    m: float = Field(description="Transported mass", gt=0)


class PlanDocument(StrictModel):
    """Sparse coupling between two joint measures."""
    entries: List[PlanEntryDocument]
    y_diagonal: bool = Field(description="Whether the plan moves no mass across conditions")
    value: float = Field(description="Transport cost of the plan (p-th power)")


class GmmComponentDocument(StrictModel):
    weight: float = Field(ge=0)
    mean: List[float]
    variance: List[float] = Field(description="Diagonal covariance entries")


class GmmDocument(StrictModel):
    """Gaussian mixture with diagonal covariances."""
    dim: int = Field(ge=1)
    components: List[GmmComponentDocument] = Field(min_length=1)


class ForwardDocument(StrictModel):
    """Diagonal linear forward operator with Gaussian noise."""
    diagonal: List[float]
    noise_std: float = Field(gt=0)


class PosteriorDocument(StrictModel):
    """Analytic posterior for one observation."""
    y: List[float]
    posterior: GmmDocument


class ModelCheckpoint(StrictModel):
    """Velocity-model checkpoint: layer shapes plus a flat parameter array."""
    version: int = 1
    widths: List[int] = Field(description="Layer widths including input and output")
    activation: str
    time_features: int
    condition_dim: int
    state_dim: int
    params: List[float]


class ErrorResponse(BaseModel):
    """Structured error response."""
    error: str = Field(description="Error message")
    error_type: str = Field(description="Type of error (validation, numerical, grouping, ...)")
    suggestion: str = Field(description="Suggestion for resolving the error")


class CommandResponse(BaseModel):
    """Summary printed by every CLI command."""
    success: bool
    command: str
    run_dir: Optional[str] = None
    metrics: dict = Field(default_factory=dict)
    timestamp: str
    execution_time: Optional[str] = None


# ---------------------------------------------------------------------------
# Flow matching configuration
# ---------------------------------------------------------------------------

class CouplingKind(str, Enum):
    """Minibatch pairing strategies."""
    INDEPENDENT = "independent"
    OT = "ot"
    DIAGONAL_BAYES = "diagonal-bayes"
    OT_BAYES = "ot-bayes"


class CouplingMode(StrictModel):
    """Choice among L_FM, L_OT, L_{Y,FM} and L_{Y,OT}."""
    kind: CouplingKind = CouplingKind.OT_BAYES
    beta: float = Field(default=20.0, ge=0)
    strict: bool = Field(default=False, description="Forbid cross-condition pairs entirely (beta = infinity)")

    @model_validator(mode="after")
    def check_strict(self):
        if self.strict and self.kind != CouplingKind.OT_BAYES:
            raise ValueError("strict pairing only applies to ot-bayes")
        return self


class Activation(str, Enum):
    TANH = "tanh"
    SILU = "silu"


class ArchitectureConfig(StrictModel):
    hidden: List[int] = Field(default_factory=lambda: [256, 256, 256])
    activation: Activation = Activation.TANH
    time_features: int = Field(default=8, ge=0)


class OptimizerConfig(StrictModel):
    name: str = Field(default="adam", pattern="^(adam|sgd)$")
    learning_rate: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    clip_grad_norm: Optional[float] = Field(default=None, gt=0)


class TrainConfig(StrictModel):
    """Flow-matching training protocol."""
    n_train: int = Field(default=10000, ge=1)
    n_val: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=100, ge=1)
    coupling_batch_size: int = Field(default=500, ge=1)
    iterations: int = Field(default=20000, ge=0)
    eval_every: int = Field(default=500, ge=1)
    coupling: CouplingMode = Field(default_factory=CouplingMode)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    seed: int = 0
    euler_steps: int = Field(default=10, ge=1)

    @model_validator(mode="after")
    def check_sizes(self):
        if self.n_train < self.coupling_batch_size or self.n_train < self.batch_size:
            raise ValueError("n_train must be at least the batch sizes")
        if self.n_val < self.batch_size:
            raise ValueError("n_val must be at least batch_size")
        if self.coupling_batch_size < self.batch_size:
            raise ValueError("coupling_batch_size must be at least batch_size")
        if self.coupling_batch_size % self.batch_size:
            raise ValueError("coupling_batch_size must be a multiple of batch_size")
        return self


# ---------------------------------------------------------------------------
# Experiment command configs
# ---------------------------------------------------------------------------

class ExperimentConfig(StrictModel):
    seed: int = 0


class CounterexampleConfig(ExperimentConfig):
    n: float = Field(default=5.0, gt=1)


class BetaSweepConfig(ExperimentConfig):
    n_samples: int = Field(default=1000, ge=2)
    p: float = Field(default=2.0)
    betas: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0, 10000.0])
    limit_n: int = Field(default=10000, ge=1, description="Sample size for the diagonal-coupling limit cost")

    @model_validator(mode="after")
    def check_betas(self):
        if not self.betas or any(b < 0 for b in self.betas):
            raise ValueError("betas must be a nonempty list of nonnegative values")
        return self


class DualityCheckConfig(ExperimentConfig):
    n_instances: int = Field(default=50, ge=1)
    max_conditions: int = Field(default=3, ge=1)
    max_atoms: int = Field(default=8, ge=1)
    d: int = Field(default=1, ge=1)
    m: int = Field(default=2, ge=1)
    tol: float = Field(default=1e-6, gt=0)


class GeodesicCheckConfig(ExperimentConfig):
    n_conditions: int = Field(default=3, ge=1)
    n_per_condition: int = Field(default=4, ge=1)
    d: int = Field(default=1, ge=1)
    m: int = Field(default=2, ge=1)
    time_pairs: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.0, 0.3), (0.3, 0.8), (0.8, 1.0)])
    dump_times: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    tol: float = Field(default=1e-8, gt=0)


class ParticleFlowCommandConfig(ExperimentConfig):
    betas: List[float] = Field(default_factory=lambda: [1.0, 5.0])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    toy: str = Field(default="blobs", pattern="^(blobs|moons)$")
    n_classes: int = Field(default=2, ge=2, le=4)
    n_per_class: int = Field(default=100, ge=1)
    epsilon: float = Field(default=0.01, gt=0)
    eta: float = Field(default=0.5, gt=0)
    iterations: int = Field(default=500, ge=1)
    dump_trajectory: bool = False


class GmmTrainCommandConfig(ExperimentConfig):
    gmm_seed: int = 0
    train: TrainConfig = Field(default_factory=TrainConfig)


class GmmEvalCommandConfig(ExperimentConfig):
    gmm_seed: int = 0
    checkpoint: Optional[str] = Field(default=None, description="Checkpoint path; None evaluates the zero model")
    n_conditions: int = Field(default=20, ge=1)
    n_samples: int = Field(default=500, ge=2)
    euler_steps: int = Field(default=10, ge=1)
    epsilon: Optional[float] = Field(default=None, gt=0, description="Sinkhorn blur; None uses the configured factor of the mean cost")
    sinkhorn_max_iter: int = Field(default=5000, ge=1)
