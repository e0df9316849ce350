"""Receding-horizon loop, feedback realization, and Monte-Carlo harness.

Each step solves the coefficient-level program, recovers the initial-germ
realization algebraically from the measured window, applies the realized
first input, and draws the plant disturbance from an independent stream.
The one-step-ahead coefficient predictions feed the next step's interpolated
initial condition.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ddspc.behavioral import HankelStack, build_hankel_stack
from ddspc.conic import SolveStatus, SolverSettings, solve
from ddspc.lti import ArxModel, realization_step
from ddspc.ocp import InitialConditionData, OcpAssembler, OcpConfig, OcpSolution, prepare_initial
from ddspc.terminal import alpha_bound

__all__ = [
    "ControllerInfeasible",
    "ControllerState",
    "StepRecord",
    "ClosedLoopTrace",
    "Controller",
    "InitialStateSampler",
    "MonteCarloSummary",
    "recover_germ_realization",
    "feedback_input",
    "run_closed_loop",
    "monte_carlo",
]


class ControllerInfeasible(RuntimeError):
    """Raised when a per-step program cannot be solved to acceptable accuracy."""


def recover_germ_realization(solution: OcpSolution, z_k: np.ndarray) -> np.ndarray:
    """Initial-germ values that reproduce the measured window.

    Solves M phi = z_k - mean with M the symmetric PSD matrix of initial
    coefficient columns, via an eigenvalue pseudoinverse (null-space
    components set to zero).  The measured window always lies in the carried
    range when the plant and the record share one system, so a residual
    outside tolerance signals an inconsistency.
    """
    z_k = np.asarray(z_k, dtype=float).ravel()
    n_z = z_k.size
    m_cols = solution.z0[1 : n_z + 1].T  # (n_z, n_z), symmetric PSD
    r = z_k - solution.z0[0]
    if np.abs(m_cols).max(initial=0.0) == 0.0:
        phi = np.zeros(n_z)
    else:
        eigvals, eigvecs = np.linalg.eigh(0.5 * (m_cols + m_cols.T))
        cutoff = 1e-10 * max(eigvals.max(initial=0.0), 0.0)
        inv = np.where(eigvals > cutoff, 1.0 / np.where(eigvals > cutoff, eigvals, 1.0), 0.0)
        phi = eigvecs @ (inv * (eigvecs.T @ r))
    resid = float(np.abs(m_cols @ phi - r).max(initial=0.0))
    if resid > 1e-6 * max(1.0, float(np.abs(z_k).max())):
        raise ControllerInfeasible(
            f"measured window is inconsistent with the carried prediction "
            f"(residual {resid:.3e})"
        )
    return phi


def feedback_input(solution: OcpSolution, phi_ini: np.ndarray, t_ini: int) -> np.ndarray:
    """Realized first input: constant coefficient plus the initial-germ terms."""
    phi_ini = np.asarray(phi_ini, dtype=float).ravel()
    first = solution.u_coeffs[:, t_ini, :]
    return first[0] + phi_ini @ first[1 : phi_ini.size + 1]


@dataclass
class StepRecord:
    k: int
    z_cl: np.ndarray
    u_cl: np.ndarray
    y_cl: np.ndarray
    w: np.ndarray
    mu: float
    value: float
    stage_cost: float
    feasible: bool
    phi_ini: np.ndarray
    iterations: int


@dataclass
class ControllerState:
    z_cl: np.ndarray
    k: int = 0
    previous: OcpSolution | None = None
    accumulated_cost: float = 0.0


@dataclass
class ClosedLoopTrace:
    records: list[StepRecord]
    seed: int | None
    alpha: float

    def __len__(self) -> int:
        return len(self.records)

    def array(self, attr: str) -> np.ndarray:
        return np.array([getattr(rec, attr) for rec in self.records])

    @property
    def stage_costs(self) -> np.ndarray:
        return self.array("stage_cost")

    @property
    def averaged_cost(self) -> np.ndarray:
        costs = self.stage_costs
        return np.cumsum(costs) / np.arange(1, len(costs) + 1)

    def to_csv(self) -> str:
        n_u = self.records[0].u_cl.size
        n_y = self.records[0].y_cl.size
        n_w = self.records[0].w.size
        header = (
            ["k"]
            + [f"u{i + 1}" for i in range(n_u)]
            + [f"y{i + 1}" for i in range(n_y)]
            + [f"w{i + 1}" for i in range(n_w)]
            + ["mu", "V_N", "stage_cost", "feasible"]
        )
        lines = [",".join(header)]
        for rec in self.records:
            parts = (
                [str(rec.k)]
                + [repr(float(v)) for v in rec.u_cl]
                + [repr(float(v)) for v in rec.y_cl]
                + [repr(float(v)) for v in rec.w]
                + [repr(float(rec.mu)), repr(float(rec.value)), repr(float(rec.stage_cost))]
                + [str(int(rec.feasible))]
            )
            lines.append(",".join(parts))
        return "\n".join(lines) + "\n"


class Controller:
    """Receding-horizon controller bound to one plant/record/config triple."""

    def __init__(
        self,
        plant: ArxModel,
        config: OcpConfig,
        stack: HankelStack,
        settings: SolverSettings = SolverSettings(),
        mu_mode: str = "free",
    ):
        if mu_mode not in ("free", "zero", "one"):
            raise ValueError("mu_mode must be 'free', 'zero' or 'one'")
        self.plant = plant
        self.config = config
        self.assembler = OcpAssembler(config, stack)
        self.settings = settings
        self.mu_mode = mu_mode
        self.kkt_cache: dict = {}
        self._warm = None
        self.alpha = alpha_bound(config.terminal.p, config.q, plant.disturbance_cov)

    def solve_ocp(self, init: InitialConditionData) -> OcpSolution:
        mu_fix = {"free": None, "zero": 0.0, "one": 1.0}[self.mu_mode]
        program, encoding = self.assembler.assemble(init, mu_fix=mu_fix)
        solution = solve(
            program, self.settings, warm_start=self._warm, kkt_cache=self.kkt_cache
        )
        if solution.status is not SolveStatus.OPTIMAL:
            near = (
                solution.status is SolveStatus.MAX_ITER
                and solution.primal_residual
                <= 1e-4 * (1.0 + float(np.abs(program.b).max(initial=0.0)))
                and solution.dual_residual
                <= 1e-4 * (1.0 + float(np.abs(program.q).max(initial=0.0)))
            )
            if not near:
                raise ControllerInfeasible(
                    f"step program ended with status {solution.status.value} "
                    f"(primal {solution.primal_residual:.2e}, dual {solution.dual_residual:.2e})"
                )
            warnings.warn(
                "iteration limit hit with near-converged residuals; continuing",
                RuntimeWarning,
            )
            solution.status = SolveStatus.OPTIMAL
        self._warm = solution
        return self.assembler.decode(encoding, solution)

    def step(self, state: ControllerState, rng: np.random.Generator):
        """One closed-loop step; returns the updated state and its record."""
        init = prepare_initial(state.z_cl, state.previous)
        try:
            solution = self.solve_ocp(init)
        except ControllerInfeasible:
            raise
        phi_ini = recover_germ_realization(solution, state.z_cl)
        u_cl = feedback_input(solution, phi_ini, self.assembler.t_ini)
        w = self.plant.sample_disturbance(rng)
        y_cl, z_next = realization_step(self.plant, state.z_cl, u_cl, w)
        stage = float(u_cl @ self.config.r @ u_cl + y_cl @ self.config.q @ y_cl)
        record = StepRecord(
            k=state.k,
            z_cl=state.z_cl.copy(),
            u_cl=u_cl,
            y_cl=y_cl,
            w=w,
            mu=solution.mu,
            value=solution.value,
            stage_cost=stage,
            feasible=True,
            phi_ini=phi_ini,
            iterations=solution.conic.iterations,
        )
        new_state = ControllerState(
            z_cl=z_next,
            k=state.k + 1,
            previous=solution,
            accumulated_cost=state.accumulated_cost + stage,
        )
        return new_state, record


def run_closed_loop(
    plant: ArxModel,
    config: OcpConfig,
    stack: HankelStack,
    t_sim: int,
    seed: int,
    z0: np.ndarray,
    settings: SolverSettings = SolverSettings(),
    mu_mode: str = "free",
) -> ClosedLoopTrace:
    """Simulate ``t_sim`` receding-horizon steps from a fixed initial window."""
    controller = Controller(plant, config, stack, settings, mu_mode)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    state = ControllerState(z_cl=np.asarray(z0, dtype=float).ravel().copy())
    records = []
    for _ in range(t_sim):
        state, record = controller.step(state, rng)
        records.append(record)
    return ClosedLoopTrace(records=records, seed=seed, alpha=controller.alpha)


@dataclass(frozen=True)
class InitialStateSampler:
    """Initial extended-state sampler: a base window plus i.i.d. perturbation."""

    base: tuple
    spread: float = 0.0
    kind: str = "uniform"

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian", "fixed"):
            raise ValueError("kind must be 'uniform', 'gaussian' or 'fixed'")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        base = np.asarray(self.base, dtype=float)
        if self.kind == "fixed" or self.spread == 0.0:
            return base.copy()
        if self.kind == "uniform":
            return base + rng.uniform(-self.spread, self.spread, base.size)
        return base + rng.normal(0.0, self.spread, base.size)


@dataclass
class MonteCarloSummary:
    """Aggregated closed-loop statistics over independent runs."""

    n_runs: int
    t_sim: int
    alpha: float
    y_mean: np.ndarray  # (t_sim, n_y)
    y_std: np.ndarray
    y_quantiles: dict  # {q: (t_sim, n_y)}
    violation_rates: dict  # {component: pooled frequency}
    averaged_cost: np.ndarray  # (runs, t_sim)
    values: np.ndarray  # (runs, t_sim)
    stage_costs: np.ndarray  # (runs, t_sim)
    mu: np.ndarray  # (runs, t_sim)
    y_all: np.ndarray  # (runs, t_sim, n_y)
    decay_statistic: np.ndarray  # (t_sim - 1,)
    decay_se: np.ndarray
    histogram_steps: tuple
    histograms: dict  # {k: (edges, normalized counts)}
    failures: list

    def cost_decay_margin(self, k: int) -> tuple[float, float]:
        """Estimate and standard error of the one-step value-decay statistic."""
        return float(self.decay_statistic[k]), float(self.decay_se[k])

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_runs": self.n_runs,
                "t_sim": self.t_sim,
                "alpha": self.alpha,
                "y_mean": self.y_mean.tolist(),
                "y_std": self.y_std.tolist(),
                "y_quantiles": {str(q): v.tolist() for q, v in self.y_quantiles.items()},
                "violation_rates": {str(k): v for k, v in self.violation_rates.items()},
                "averaged_cost_final": self.averaged_cost[:, -1].tolist(),
                "decay_statistic": self.decay_statistic.tolist(),
                "decay_se": self.decay_se.tolist(),
                "failures": self.failures,
            }
        )

    def histogram_csv(self) -> str:
        lines = ["k,bin_left,bin_right,density"]
        for k in self.histogram_steps:
            edges, density = self.histograms[k]
            for left, right, d in zip(edges[:-1], edges[1:], density):
                lines.append(f"{k},{left!r},{right!r},{d!r}")
        return "\n".join(lines) + "\n"


def _run_one(args):
    (plant, config, stack, seed, t_sim, sampler, settings, mu_mode) = args
    seq = np.random.SeedSequence(seed)
    init_rng = np.random.default_rng(seq.spawn(1)[0])
    z0 = sampler.sample(init_rng)
    controller = Controller(plant, config, stack, settings, mu_mode)
    rng = np.random.default_rng(seq.spawn(2)[1])
    state = ControllerState(z_cl=z0)
    records = []
    for _ in range(t_sim):
        state, record = controller.step(state, rng)
        records.append(record)
    return ClosedLoopTrace(records=records, seed=seed, alpha=controller.alpha)


def _worker_count() -> int:
    env = os.environ.get("DDSPC_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, (os.cpu_count() or 1) - 0)


def monte_carlo(
    plant: ArxModel,
    config: OcpConfig,
    stack: HankelStack,
    n_runs: int,
    t_sim: int,
    sampler: InitialStateSampler,
    master_seed: int = 0,
    settings: SolverSettings = SolverSettings(),
    mu_mode: str = "free",
    histogram_steps: tuple = (),
    histogram_component: int = 1,
    workers: int | None = None,
) -> MonteCarloSummary:
    """Independent closed-loop runs with per-run derived seeds.

    Run r uses the r-th child of the master seed sequence, so results are
    identical for any worker count.  Individual run failures are reported in
    the summary without aborting the rest.
    """
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(n_runs)]
    tasks = [
        (plant, config, stack, seed, t_sim, sampler, settings, mu_mode) for seed in seeds
    ]
    workers = workers if workers is not None else _worker_count()
    traces: list = [None] * n_runs
    failures = []
    if workers <= 1 or n_runs == 1:
        for idx, task in enumerate(tasks):
            try:
                traces[idx] = _run_one(task)
            except Exception as exc:  # noqa: BLE001 - isolate per-run failures
                failures.append(f"run {idx}: {exc}")
    else:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = {pool.submit(_run_one, task): idx for idx, task in enumerate(tasks)}
            for future, idx in futures.items():
                try:
                    traces[idx] = future.result()
                except Exception as exc:  # noqa: BLE001
                    failures.append(f"run {idx}: {exc}")
    good = [t for t in traces if t is not None]
    if not good:
        raise ControllerInfeasible(f"all runs failed: {failures}")
    alpha = good[0].alpha
    y_all = np.array([[rec.y_cl for rec in t.records] for t in good])
    values = np.array([[rec.value for rec in t.records] for t in good])
    stage = np.array([[rec.stage_cost for rec in t.records] for t in good])
    mu = np.array([[rec.mu for rec in t.records] for t in good])
    averaged = np.cumsum(stage, axis=1) / np.arange(1, t_sim + 1)
    violation_rates = {}
    for c, bounds in enumerate(config.y_bounds or ()):
        if bounds is None:
            continue
        lo, hi = bounds
        vals = y_all[:, :, c]
        mask = np.zeros_like(vals, dtype=bool)
        if lo is not None:
            mask |= vals < lo
        if hi is not None:
            mask |= vals > hi
        violation_rates[c] = float(mask.mean())
    # value-decay statistic E[V_{k+1} - V_k + stage_k] - alpha, per step
    decay_samples = values[:, 1:] - values[:, :-1] + stage[:, :-1] - alpha
    decay = decay_samples.mean(axis=0)
    decay_se = decay_samples.std(axis=0, ddof=1) / np.sqrt(len(good)) if len(good) > 1 else np.full(
        t_sim - 1, np.inf
    )
    histograms = {}
    for k in histogram_steps:
        samples = y_all[:, k, histogram_component]
        counts, edges = np.histogram(samples, bins=30, density=True)
        histograms[k] = (edges, counts)
    quantiles = {
        q: np.quantile(y_all, q, axis=0) for q in (0.05, 0.25, 0.5, 0.75, 0.95)
    }
    return MonteCarloSummary(
        n_runs=len(good),
        t_sim=t_sim,
        alpha=alpha,
        y_mean=y_all.mean(axis=0),
        y_std=y_all.std(axis=0),
        y_quantiles=quantiles,
        violation_rates=violation_rates,
        averaged_cost=averaged,
        values=values,
        stage_costs=stage,
        mu=mu,
        y_all=y_all,
        decay_statistic=decay,
        decay_se=decay_se,
        histogram_steps=tuple(histogram_steps),
        histograms=histograms,
        failures=failures,
    )
