"""
Experiment commands of the condot CLI.
Each command takes its validated config and an open run, writes its tables and artifacts,
and returns the metrics table plus a flat summary for the CLI response.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from multiprocessing import get_context
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Type

import numpy as np
import pandas as pd

from condot.backend.run_store import RunHandle, RunStore
from condot.core.bayes_gmm import (
    GmmModel, LinearGaussianForward, analytic_posterior, condition_streams, make_benchmark_forward,
    make_benchmark_gmm, posterior_document, sample_joint, sample_posterior_exact, save_gmm,
)
from condot.core.geodesics import (
    TrajectoryFrame, bb_energy, condition_geodesic_residuals, dump_trajectory, geodesic_identity_check,
    velocity_field,
)
from condot.core.measures import (
    CostSpec, DiscreteJointMeasure, diagonal_coupling_cost, group_by_condition, independent_gaussian_instance,
    match_groups, random_joint_instance, swap_counterexample,
)
from condot.core.ot_exact import (
    conditional_wasserstein, dual_certificate, plan_x_cost, relaxed_wasserstein, wasserstein, y_leakage,
)
from condot.errors import MarginalMismatchError
from condot.flows.flow_matching import FlowDataset, sample_divergence, sample_posterior, train
from condot.flows.nn import VelocityModel, init_model, load_model, save_model
from condot.flows.particle_flow import ParticleFlowConfig, ParticleFlowResult, make_labeled_toy, run_particle_flow
from condot.reporting.report_manager import ReportManager
from condot.schemas import (
    BetaSweepConfig, CounterexampleConfig, DualityCheckConfig, ExperimentConfig, GeodesicCheckConfig,
    GmmEvalCommandConfig, GmmTrainCommandConfig, ParticleFlowCommandConfig,
)

logger = logging.getLogger(__name__)

CommandResult = Tuple[pd.DataFrame, Dict[str, Any]]


def parallel_map(func: Callable, items: Sequence, jobs: int = 1) -> List:
    """Map ``func`` over ``items`` in order, on ``jobs`` worker processes when jobs > 1.

    Results come back in input order, so outputs do not depend on the worker count.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    workers = min(jobs, len(items))
    logger.info(f"Running {len(items)} tasks on {workers} worker processes")
    with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
        return list(pool.map(func, items))


# ---------------------------------------------------------------------------
# counterexample
# ---------------------------------------------------------------------------

def expected_conditional_distance(mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, p: float = 1.0) -> float:
    """E_y[W_p(mu_y, nu_y)^p]^(1/p), computed condition by condition with plain W_p."""
    groups_mu, groups_nu = group_by_condition(mu), group_by_condition(nu)
    pairs = match_groups(groups_mu, groups_nu)
    if pairs is None:
        raise MarginalMismatchError("Measures do not share the condition marginal P_Y")
    total = 0.0
    for a, b in pairs:
        g_mu, g_nu = groups_mu[a], groups_nu[b]
        value, _ = wasserstein(
            DiscreteJointMeasure(np.zeros((g_mu.size, 1)), g_mu.xs, g_mu.conditional_weights),
            DiscreteJointMeasure(np.zeros((g_nu.size, 1)), g_nu.xs, g_nu.conditional_weights),
            p,
        )
        total += g_mu.weight * value ** p
    return total ** (1.0 / p)


def cmd_counterexample(config: CounterexampleConfig, run: RunHandle, jobs: int = 1) -> CommandResult:
    """Joint W_1 against W_{1,Y} on the two-atom swap instance."""
    mu, nu = swap_counterexample(config.n)
    joint, _ = wasserstein(mu, nu, 1.0)
    conditional, plan = conditional_wasserstein(mu, nu, 1.0)
    expected = expected_conditional_distance(mu, nu, 1.0)
    summed, _ = relaxed_wasserstein(mu, nu, CostSpec(p=1.0, beta=1.0))
    row = {
        "n": config.n,
        "w1_joint": joint,
        "w1_conditional": conditional,
        "expected_conditional_w1": expected,
        "w1_sum_metric": summed,
        "plan_y_diagonal": plan.y_diagonal,
    }
    run.write_document("plan.json", plan.to_document())
    summary = dict(row)
    summary["w1_joint_is_one"] = bool(abs(joint - 1.0) <= 1e-12)
    summary["w1_conditional_is_n"] = bool(abs(conditional - config.n) <= 1e-12 * max(1.0, config.n))
    summary["joint_below_conditional"] = joint < conditional
    summary["sum_metric_below_conditional"] = summed < conditional
    summary["conditional_equals_expectation"] = bool(abs(conditional - expected) <= 1e-12 * max(1.0, config.n))
    logger.info(f"Counterexample n={config.n:g}: W1 = {joint:.6g}, W1Y = {conditional:.6g}")
    return pd.DataFrame([row]), summary


# ---------------------------------------------------------------------------
# beta-sweep
# ---------------------------------------------------------------------------

def _relaxed_row(beta: float, mu: DiscreteJointMeasure, nu: DiscreteJointMeasure, p: float,
                 conditional_power: float) -> Dict[str, Any]:
    value, plan = relaxed_wasserstein(mu, nu, CostSpec(p=p, beta=beta))
    leakage = y_leakage(plan, p)
    return {
        "beta": beta,
        "relaxed_value": value,
        "relaxed_cost": plan.cost,
        "y_leakage": leakage,
        "x_cost": plan_x_cost(plan, p),
        "beta_leakage": beta * leakage,
        "bound_holds": beta * leakage <= conditional_power * (1.0 + 1e-9) + 1e-12,
    }


def cmd_beta_sweep(config: BetaSweepConfig, run: RunHandle, jobs: int = 1) -> CommandResult:
    """Relaxed OT under growing beta on independent Gaussian samples."""
    mu, nu = independent_gaussian_instance(config.n_samples, config.seed)
    conditional, _ = conditional_wasserstein(mu, nu, config.p)
    conditional_power = conditional ** config.p
    task = partial(_relaxed_row, mu=mu, nu=nu, p=config.p, conditional_power=conditional_power)
    frame = pd.DataFrame(parallel_map(task, config.betas, jobs))

    limit_mu, limit_nu = independent_gaussian_instance(config.limit_n, config.seed + 1)
    diagonal = diagonal_coupling_cost(limit_mu, limit_nu, config.p)
    self_distance, _ = conditional_wasserstein(mu, mu, config.p)

    ordered = frame.sort_values("beta")
    leak = ordered["y_leakage"].to_numpy()
    summary = {
        "n_samples": config.n_samples,
        "conditional_distance": conditional,
        "leakage_first": float(leak[0]),
        "leakage_last": float(leak[-1]),
        "leakage_ratio": float(leak[-1] / leak[0]) if leak[0] > 0 else 0.0,
        "leakage_non_increasing": bool(np.all(np.diff(leak) <= 1e-12)),
        "bound_holds": bool(frame["bound_holds"].all()),
        "diagonal_cost": diagonal,
        "w_y_self": self_distance,
    }
    logger.info(f"Beta sweep: leakage {summary['leakage_first']:.4g} -> {summary['leakage_last']:.4g}, "
                f"diagonal cost {diagonal:.4f}")
    return frame, summary


# ---------------------------------------------------------------------------
# duality-check
# ---------------------------------------------------------------------------

def _duality_row(instance: int, seed: int, config: DualityCheckConfig) -> Dict[str, Any]:
    rng = np.random.default_rng(seed)
    n_conditions = int(rng.integers(1, config.max_conditions + 1))
    n_per_condition = int(rng.integers(1, config.max_atoms + 1))
    mu, nu = random_joint_instance(seed, config.d, config.m, n_conditions, n_per_condition)
    certificate = dual_certificate(mu, nu)
    return {
        "instance": instance,
        "n_conditions": n_conditions,
        "n_per_condition": n_per_condition,
        "primal": certificate.primal_value,
        "dual": certificate.dual_value,
        "gap": certificate.gap,
        "lipschitz_violation": certificate.lipschitz_violation(),
    }


def _duality_task(item: Tuple[int, int], config: DualityCheckConfig) -> Dict[str, Any]:
    instance, seed = item
    return _duality_row(instance, seed, config)


def cmd_duality_check(config: DualityCheckConfig, run: RunHandle, jobs: int = 1) -> CommandResult:
    """Primal/dual agreement of W_{1,Y} on random instances."""
    seeds = np.random.SeedSequence(config.seed).generate_state(config.n_instances)
    items = [(k, int(s)) for k, s in enumerate(seeds)]
    frame = pd.DataFrame(parallel_map(partial(_duality_task, config=config), items, jobs))
    max_gap = float(frame["gap"].max())
    max_violation = float(frame["lipschitz_violation"].max())
    summary = {
        "n_instances": config.n_instances,
        "max_gap": max_gap,
        "max_lipschitz_violation": max_violation,
        "passed": max_gap <= config.tol and max_violation <= config.tol,
    }
    logger.info(f"Duality check over {config.n_instances} instances: max gap {max_gap:.3e}")
    return frame, summary


# ---------------------------------------------------------------------------
# geodesic-check
# ---------------------------------------------------------------------------

def cmd_geodesic_check(config: GeodesicCheckConfig, run: RunHandle, jobs: int = 1) -> CommandResult:
    """Constant-speed identity, velocity field and energy of the optimal y-diagonal interpolation."""
    mu, nu = random_joint_instance(config.seed, config.d, config.m, config.n_conditions, config.n_per_condition)
    distance, plan = conditional_wasserstein(mu, nu, 2.0)
    squared = distance ** 2

    rows = []
    for s, t in config.time_pairs:
        rows.append({
            "s": s,
            "t": t,
            "residual": geodesic_identity_check(plan, s, t),
            "max_condition_residual": float(np.max(condition_geodesic_residuals(plan, s, t))),
        })
    frame = pd.DataFrame(rows)

    frames = []
    vy_max = 0.0
    norm_error = 0.0
    for t in config.dump_times:
        sample = velocity_field(plan, t)
        vy_max = max(vy_max, float(np.max(np.abs(sample.vy))) if sample.vy.size else 0.0)
        norm_error = max(norm_error, abs(sample.l2_norm_squared() - squared))
        frames.append(TrajectoryFrame(t=t, ys=sample.ys, xs=sample.xs, vy=sample.vy, vx=sample.vx,
                                      weights=sample.weights))
    dump_trajectory(frames, run.artifact_path("trajectory.csv"))
    energy = bb_energy(plan)

    max_residual = float(frame["residual"].max())
    summary = {
        "conditional_w2": distance,
        "max_residual": max_residual,
        "max_condition_residual": float(frame["max_condition_residual"].max()),
        "max_vy": vy_max,
        "max_velocity_norm_error": norm_error,
        "energy": energy,
        "energy_error": abs(energy - squared),
        "passed": max_residual <= config.tol and vy_max == 0.0 and abs(energy - squared) <= config.tol,
    }
    logger.info(f"Geodesic check: W2Y = {distance:.6g}, max residual {max_residual:.3e}")
    return frame, summary


# ---------------------------------------------------------------------------
# particle-flow
# ---------------------------------------------------------------------------

def _particle_task(item: Tuple[float, int], target: DiscreteJointMeasure,
                   config: ParticleFlowCommandConfig) -> ParticleFlowResult:
    beta, seed = item
    return run_particle_flow(ParticleFlowConfig(
        target=target, beta=beta, epsilon=config.epsilon, eta=config.eta,
        iterations=config.iterations, seed=seed, record_trajectory=config.dump_trajectory,
    ))


def _trajectory_table(result: ParticleFlowResult) -> pd.DataFrame:
    tables = []
    for k, xs in enumerate(result.trajectory):
        table = pd.DataFrame(xs, columns=[f"x{j}" for j in range(xs.shape[1])])
        table.insert(0, "label", result.labels[:, 0])
        table.insert(0, "atom", np.arange(xs.shape[0]))
        table.insert(0, "iter", k)
        tables.append(table)
    return pd.concat(tables, ignore_index=True)


def cmd_particle_flow(config: ParticleFlowCommandConfig, run: RunHandle, jobs: int = 1) -> CommandResult:
    """Labeled particle flows for every (beta, seed) pair; purity by beta."""
    target = make_labeled_toy(config.toy, config.n_classes, config.n_per_class, seed=config.seed)
    items = [(float(beta), int(seed)) for beta in config.betas for seed in config.seeds]
    results = parallel_map(partial(_particle_task, target=target, config=config), items, jobs)

    rows = []
    for (beta, seed), result in zip(items, results):
        run.write_table(f"flow_beta{beta:g}_seed{seed}.csv", result.metrics_frame())
        if config.dump_trajectory:
            run.write_table(f"trajectory_beta{beta:g}_seed{seed}.csv", _trajectory_table(result))
        rows.append({
            "beta": beta,
            "seed": seed,
            "initial_divergence": result.divergences[0],
            "final_divergence": result.divergences[-1],
            "final_purity": result.purities[-1],
            "labels_fixed": bool(np.array_equal(result.labels, target.ys)),
        })
    frame = pd.DataFrame(rows)
    by_beta = frame.groupby("beta")["final_purity"].mean()
    summary = {f"mean_purity_beta_{beta:g}": float(value) for beta, value in by_beta.items()}
    summary["purity_gain"] = float(by_beta.iloc[-1] - by_beta.iloc[0]) if len(by_beta) > 1 else 0.0
    summary["labels_fixed"] = bool(frame["labels_fixed"].all())
    return frame, summary


# ---------------------------------------------------------------------------
# gmm-train / gmm-eval
# ---------------------------------------------------------------------------

def gmm_problem(gmm_seed: int) -> Tuple[GmmModel, LinearGaussianForward]:
    return make_benchmark_gmm(gmm_seed), make_benchmark_forward()


def cmd_gmm_train(config: GmmTrainCommandConfig, run: RunHandle, jobs: int = 1) -> CommandResult:
    """Train a velocity model on the mixture inverse problem; checkpoint the best validation model."""
    gmm, forward = gmm_problem(config.gmm_seed)
    train_config = config.train.model_copy(update={"seed": config.seed})
    train_stream, val_stream = np.random.SeedSequence(config.seed).spawn(2)
    train_ys, train_xs = sample_joint(gmm, forward, train_config.n_train, train_stream)
    val_ys, val_xs = sample_joint(gmm, forward, train_config.n_val, val_stream)

    result = train(
        train_config, FlowDataset(train_ys, train_xs), FlowDataset(val_ys, val_xs),
        log_path=run.artifact_path("train_log.jsonl"),
    )
    save_model(result.model, run.artifact_path("model.json"))
    save_gmm(gmm, run.artifact_path("gmm.json"))
    run.write_document("forward.json", forward.to_document())

    curves = result.curves
    initial_val = float(curves["val_loss"].iloc[0]) if len(curves) else float("nan")
    summary = {
        "coupling": train_config.coupling.kind.value,
        "beta": train_config.coupling.beta,
        "n_params": result.model.n_params,
        "initial_val_loss": initial_val,
        "best_val_loss": result.best_val_loss,
        "best_iteration": result.best_iteration,
        "checkpoint": str(run.artifacts / "model.json"),
    }
    return curves, summary


def evaluate_condition(y: np.ndarray, stream: np.random.SeedSequence, model: VelocityModel, gmm: GmmModel,
                       forward: LinearGaussianForward, n_samples: int, euler_steps: int,
                       epsilon: Optional[float], max_iter: int) -> Dict[str, Any]:
    """Sinkhorn divergence between model and exact posterior samples for one observation."""
    posterior = analytic_posterior(gmm, forward, y)
    exact_stream, model_stream = stream.spawn(2)
    exact = sample_posterior_exact(posterior, n_samples, exact_stream)
    approx = sample_posterior(model, y, n_samples, euler_steps, model_stream)
    divergence, used = sample_divergence(approx, exact, epsilon, max_iter)
    return {"divergence": divergence, "epsilon": used, "max_posterior_weight": float(posterior.weights.max())}


def _eval_task(item: Tuple[np.ndarray, np.random.SeedSequence], **kwargs) -> Dict[str, Any]:
    y, stream = item
    return evaluate_condition(y, stream, **kwargs)


def evaluate_posterior_panel(model: VelocityModel, gmm: GmmModel, forward: LinearGaussianForward,
                             ys: np.ndarray, streams: Iterable[np.random.SeedSequence], n_samples: int,
                             euler_steps: int = 10, epsilon: Optional[float] = None,
                             max_iter: int = 5000, jobs: int = 1) -> pd.DataFrame:
    """One divergence row per test observation."""
    task = partial(_eval_task, model=model, gmm=gmm, forward=forward, n_samples=n_samples,
                   euler_steps=euler_steps, epsilon=epsilon, max_iter=max_iter)
    rows = parallel_map(task, list(zip(np.atleast_2d(ys), streams)), jobs)
    frame = pd.DataFrame(rows)
    frame.insert(0, "condition", np.arange(len(frame)))
    return frame


def cmd_gmm_eval(config: GmmEvalCommandConfig, run: RunHandle, jobs: int = 1) -> CommandResult:
    """Posterior quality of a checkpoint over a panel of test observations."""
    gmm, forward = gmm_problem(config.gmm_seed)
    if config.checkpoint:
        model = load_model(config.checkpoint)
    else:
        logger.warning("No checkpoint given; evaluating the untrained zero-velocity model")
        model = init_model(forward.dim, gmm.dim)

    streams = condition_streams(config.seed, config.n_conditions + 1)
    ys, _ = sample_joint(gmm, forward, config.n_conditions, streams[0])
    frame = evaluate_posterior_panel(
        model, gmm, forward, ys, streams[1:], config.n_samples, config.euler_steps,
        config.epsilon, config.sinkhorn_max_iter, jobs,
    )
    run.write_document("posteriors.json", [posterior_document(y, analytic_posterior(gmm, forward, y)) for y in ys])

    summary = {
        "n_conditions": config.n_conditions,
        "divergence_mean": float(frame["divergence"].mean()),
        "divergence_std": float(frame["divergence"].std(ddof=0)),
        "epsilon_mean": float(frame["epsilon"].mean()),
        "checkpoint": config.checkpoint,
    }
    logger.info(f"Posterior panel: divergence {summary['divergence_mean']:.4f} +- {summary['divergence_std']:.4f}")
    return frame, summary


# ---------------------------------------------------------------------------
# Registry and runner
# ---------------------------------------------------------------------------

COMMANDS: Dict[str, Tuple[Type[ExperimentConfig], Callable[..., CommandResult]]] = {
    "counterexample": (CounterexampleConfig, cmd_counterexample),
    "beta-sweep": (BetaSweepConfig, cmd_beta_sweep),
    "duality-check": (DualityCheckConfig, cmd_duality_check),
    "geodesic-check": (GeodesicCheckConfig, cmd_geodesic_check),
    "particle-flow": (ParticleFlowCommandConfig, cmd_particle_flow),
    "gmm-train": (GmmTrainCommandConfig, cmd_gmm_train),
    "gmm-eval": (GmmEvalCommandConfig, cmd_gmm_eval),
}


def run_command(name: str, config: ExperimentConfig, store: RunStore, jobs: int = 1) -> RunHandle:
    """Execute one registered command inside a fresh run directory and render its report."""
    _, func = COMMANDS[name]
    with store.open_run(name, config, config.seed) as run:
        metrics, summary = func(config, run, jobs)
        run.summary = summary
        run.write_metrics(metrics)
        ReportManager().write_report(
            run.path / "report.md", name, config.model_dump(mode="json"), summary, metrics, run.outputs,
        )
        run.outputs.append("report.md")
    return run
