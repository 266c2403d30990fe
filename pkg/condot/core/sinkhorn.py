"""
Entropic optimal transport in the log domain.
Sinkhorn potentials, the debiased Sinkhorn divergence and its gradient with respect to atom positions.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from config import Config
from condot.core.measures import CostSpec, DiscreteJointMeasure, check_same_space
from condot.core.ot_exact import cost_matrix
from condot.errors import CondotValidationError, SinkhornNotConvergedError

logger = logging.getLogger(__name__)

CHECK_EVERY = 5


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    """Converged (or last) potentials of an entropic OT problem.

    ``cost`` is sum pi_ij c_ij of the implied plan; ``dual_value`` is the entropic
    OT value OT_eps used by the divergence.
    """

    f: np.ndarray
    g: np.ndarray
    plan: np.ndarray
    cost: float
    dual_value: float
    epsilon: float
    iterations: int
    converged: bool
    marginal_error: float


def _softmin(eps: float, cost: np.ndarray, potential: np.ndarray, log_weights: np.ndarray) -> np.ndarray:
    """Soft c-transform: -eps log sum_j w_j exp((h_j - c_ij) / eps)."""
    return -eps * logsumexp(log_weights[None, :] + (potential[None, :] - cost) / eps, axis=1)


def _log_weights(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


def _log_plan(f, g, cost, log_a, log_b, eps) -> np.ndarray:
    return log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - cost) / eps


def solve_entropic(a: np.ndarray, b: np.ndarray, cost: np.ndarray, epsilon: float,
                   max_iter: int = Config.SINKHORN_MAX_ITER, tol: float = Config.SINKHORN_TOL,
                   symmetric: bool = False,
                   init: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> SinkhornResult:
    """Log-domain Sinkhorn on a dense cost table.

    Alternating updates by default; ``symmetric`` averages simultaneous updates of both
    potentials, which suits the self-transport terms of the divergence.
    ``init`` warm-starts the potentials (f, g). Convergence means an L1 marginal violation
    below ``tol``; non-convergence is flagged.
    """
    if epsilon <= 0:
        raise CondotValidationError(f"epsilon must be positive, got {epsilon}")
    log_a, log_b = _log_weights(a), _log_weights(b)
    cost_t = np.ascontiguousarray(cost.T)

    if init is None:
        f = _softmin(epsilon, cost, np.zeros(b.size), log_b)
        g = _softmin(epsilon, cost_t, np.zeros(a.size), log_a)
    else:
        f, g = (np.array(v, dtype=np.float64, copy=True) for v in init)
    converged = False
    error = np.inf
    iteration = 0
    for iteration in range(1, max_iter + 1):
        if symmetric:
            f_new = _softmin(epsilon, cost, g, log_b)
            g_new = _softmin(epsilon, cost_t, f, log_a)
            f, g = 0.5 * (f + f_new), 0.5 * (g + g_new)
        else:
            f = _softmin(epsilon, cost, g, log_b)
            g = _softmin(epsilon, cost_t, f, log_a)

        if iteration % CHECK_EVERY == 0 or iteration == max_iter:
            log_pi = _log_plan(f, g, cost, log_a, log_b, epsilon)
            error = float(np.abs(np.exp(logsumexp(log_pi, axis=1)) - a).sum()
                          + np.abs(np.exp(logsumexp(log_pi, axis=0)) - b).sum())
            if error < tol:
                converged = True
                break

    plan = np.exp(_log_plan(f, g, cost, log_a, log_b, epsilon))
    finite = plan > 0
    transport = float(np.sum(plan[finite] * cost[finite]))
    dual = float(a @ f + b @ g - epsilon * (plan.sum() - 1.0))
    if not converged:
        logger.warning(f"Sinkhorn did not converge in {max_iter} iterations (marginal error {error:.3e}, eps={epsilon:g})")
    else:
        logger.debug(f"Sinkhorn converged in {iteration} iterations (eps={epsilon:g})")
    return SinkhornResult(
        f=f, g=g, plan=plan, cost=transport, dual_value=dual, epsilon=epsilon,
        iterations=iteration, converged=converged, marginal_error=error,
    )


def default_epsilon(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, spec: CostSpec,
                    factor: float = Config.SINKHORN_EPS_FACTOR) -> float:
    """Blur defaulting to ``factor`` times the mean pairwise cost."""
    cost = cost_matrix(mu, nu, spec)
    finite = cost[np.isfinite(cost)]
    mean_cost = float(finite.mean()) if finite.size else 0.0
    return factor * mean_cost if mean_cost > 0 else factor


def sinkhorn_ot(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, spec: CostSpec,
                epsilon: float, max_iter: int = Config.SINKHORN_MAX_ITER,
                tol: float = Config.SINKHORN_TOL, symmetric: bool = False,
                init: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> SinkhornResult:
    """Entropic OT between two measures under d_beta^p.

    Both update rules reach the same fixed point. Cross terms default to alternating updates,
    which need about half the iterations; ``symmetric=True`` selects averaged simultaneous
    updates and is what the self terms of ``sinkhorn_divergence`` use.
    """
    check_same_space(mu, nu)
    cost = cost_matrix(mu, nu, spec)
    return solve_entropic(mu.weights, nu.weights, cost, epsilon, max_iter, tol, symmetric, init)


def _ordered(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure) -> Tuple[DiscreteJointMeasure, DiscreteJointMeasure]:
    # OT_eps is symmetric; solving in a fixed order keeps S_eps(mu, nu) == S_eps(nu, mu) bitwise
    key_mu = (mu.n_atoms, mu.points.tobytes(), mu.weights.tobytes())
    key_nu = (nu.n_atoms, nu.points.tobytes(), nu.weights.tobytes())
    return (mu, nu) if key_mu <= key_nu else (nu, mu)


def sinkhorn_divergence(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, spec: CostSpec,
                        epsilon: Optional[float] = None, max_iter: int = Config.SINKHORN_MAX_ITER,
                        tol: float = Config.SINKHORN_TOL) -> float:
    """Debiased divergence S_eps = OT_eps(mu, nu) - OT_eps(mu, mu)/2 - OT_eps(nu, nu)/2."""
    first, second = _ordered(mu, nu)
    if epsilon is None:
        epsilon = default_epsilon(first, second, spec)
    cross = sinkhorn_ot(first, second, spec, epsilon, max_iter, tol)
    self_mu = sinkhorn_ot(mu, mu, spec, epsilon, max_iter, tol, symmetric=True)
    self_nu = sinkhorn_ot(nu, nu, spec, epsilon, max_iter, tol, symmetric=True)
    return cross.dual_value - 0.5 * (self_mu.dual_value + self_nu.dual_value)


def _cost_gradient(source: DiscreteJointMeasure, target: DiscreteJointMeasure, spec: CostSpec) -> np.ndarray:
    """Gradient of c(z_i, w_j) in z_i, shape (n, m_targets, d + m)."""
    dx = source.xs[:, None, :] - target.xs[None, :, :]
    dy = source.ys[:, None, :] - target.ys[None, :, :]
    if spec.p == 2:
        grad_x = 2.0 * dx
        grad_y = 2.0 * spec.beta * dy
    else:
        nx = np.linalg.norm(dx, axis=2, keepdims=True)
        ny = np.linalg.norm(dy, axis=2, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            grad_x = np.where(nx > 0, spec.p * nx ** (spec.p - 2) * dx, 0.0)
            grad_y = np.where(ny > 0, spec.beta * spec.p * ny ** (spec.p - 2) * dy, 0.0)
    if spec.strict:
        grad_y = np.zeros_like(grad_y)
    return np.concatenate([grad_y, grad_x], axis=2)


@dataclass(frozen=True, eq=False)
class DivergenceGradient:
    """S_eps(mu, nu), its gradient in the atoms of mu, and the solves behind them."""
    value: float
    grad: np.ndarray
    cross: SinkhornResult
    self_mu: SinkhornResult
    self_nu: SinkhornResult


def divergence_and_grad(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, spec: CostSpec,
                        epsilon: float, max_iter: int = Config.SINKHORN_MAX_ITER,
                        tol: float = Config.SINKHORN_TOL,
                        warm: Optional[DivergenceGradient] = None,
                        self_nu: Optional[SinkhornResult] = None) -> DivergenceGradient:
    """Divergence value and position gradient from one set of solves.

    ``warm`` reuses the potentials of a previous call on nearby positions; ``self_nu``
    skips the solve of OT_eps(nu, nu) when nu is fixed across calls.

    Raises:
        SinkhornNotConvergedError: if the cross or self problem of mu did not converge
    """
    cross = sinkhorn_ot(mu, nu, spec, epsilon, max_iter, tol,
                        init=None if warm is None else (warm.cross.f, warm.cross.g))
    self_mu = sinkhorn_ot(mu, mu, spec, epsilon, max_iter, tol, symmetric=True,
                          init=None if warm is None else (warm.self_mu.f, warm.self_mu.g))
    if self_nu is None:
        self_nu = sinkhorn_ot(nu, nu, spec, epsilon, max_iter, tol, symmetric=True)
    for name, result in (("cross", cross), ("self", self_mu)):
        if not result.converged:
            raise SinkhornNotConvergedError(
                f"{name} potentials unconverged after {result.iterations} iterations "
                f"(marginal error {result.marginal_error:.3e})"
            )
    grad_cross = np.einsum("ij,ijk->ik", cross.plan, _cost_gradient(mu, nu, spec))
    grad_self = np.einsum("ij,ijk->ik", self_mu.plan, _cost_gradient(mu, mu, spec))
    value = cross.dual_value - 0.5 * (self_mu.dual_value + self_nu.dual_value)
    return DivergenceGradient(value=value, grad=grad_cross - grad_self,
                              cross=cross, self_mu=self_mu, self_nu=self_nu)


def divergence_position_grad(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, spec: CostSpec,
                             epsilon: float, max_iter: int = Config.SINKHORN_MAX_ITER,
                             tol: float = Config.SINKHORN_TOL) -> np.ndarray:
    """Gradient of S_eps(mu, nu) with respect to the positions (y, x) of the atoms of mu.

    Uses converged potentials as constants (envelope principle):
    grad_i = sum_j pi^{mu,nu}_ij grad c(z_i, w_j) - sum_j pi^{mu,mu}_ij grad c(z_i, z_j).

    Returns:
        Array of shape (n_atoms, d + m), condition block first

    Raises:
        SinkhornNotConvergedError: if either entropic problem did not converge
    """
    return divergence_and_grad(mu, nu, spec, epsilon, max_iter, tol).grad
