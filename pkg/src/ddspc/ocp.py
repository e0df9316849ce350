"""Per-step optimal control problem over expansion coefficients.

Builds a quadratic-objective conic program for one receding-horizon step:
the decision surface is the set of admissible future-input coefficients plus
the interpolation weight mu; output coefficients are affine in those through
the data-driven prediction maps, and the Hankel equalities, initial-window
ties and causality zeros hold by construction.  Decoding recovers the full
per-index coefficient trajectories, the column combinations g, and the
optimal value.

Constraints carried explicitly: the interpolated initial condition (mean and
square-root columns scaled by 1 - mu), the per-step tightened bounds as
second-order cones, the terminal polytope on the mean, and the terminal
covariance level as one second-order cone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ddspc.behavioral import HankelStack, is_persistently_exciting
from ddspc.conic import Cone, ConeKind, ConicProgram, ConicSolution
from ddspc.pce import PceBasis, exact_pce_of_disturbance
from ddspc.terminal import TerminalIngredients

__all__ = [
    "tightening_sigma",
    "OcpConfig",
    "InitialConditionData",
    "prepare_initial",
    "OcpSolution",
    "OcpEncoding",
    "OcpAssembler",
    "assemble",
    "decode",
]


def tightening_sigma(eps: float) -> float:
    """Back-off factor sqrt((2 - eps) / eps) of the distribution-free
    chance-constraint approximation."""
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    return math.sqrt((2.0 - eps) / eps)


def _check_spd(name: str, mat: np.ndarray):
    eigs = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    if eigs.min() <= 0:
        raise ValueError(f"{name} must be symmetric positive definite")


@dataclass
class OcpConfig:
    """Weights, bounds, tightening levels, causality mode, and ingredients."""

    horizon: int
    q: np.ndarray
    r: np.ndarray
    basis: PceBasis
    terminal: TerminalIngredients
    y_bounds: tuple | None = None  # per-component (lo, hi), None entries allowed
    u_bounds: tuple | None = None
    eps_y: float = 0.1
    eps_u: float = 0.1
    causality: str = "strict"
    pe_order: int | None = None

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.r = np.atleast_2d(np.asarray(self.r, dtype=float))
        _check_spd("Q", self.q)
        _check_spd("R", self.r)
        if self.causality not in ("strict", "literal"):
            raise ValueError("causality mode must be 'strict' or 'literal'")
        if self.basis.horizon != self.horizon:
            raise ValueError("basis horizon differs from the OCP horizon")
        for bounds, name in ((self.y_bounds, "y_bounds"), (self.u_bounds, "u_bounds")):
            for entry in bounds or ():
                if entry is None:
                    continue
                lo, hi = entry
                if lo is not None and hi is not None and not lo < hi:
                    raise ValueError(f"{name} entry ({lo}, {hi}) is empty")

    @property
    def sigma_y(self) -> float:
        return tightening_sigma(self.eps_y)

    @property
    def sigma_u(self) -> float:
        return tightening_sigma(self.eps_u)


@dataclass
class InitialConditionData:
    """Measured state, carried-over prediction, and its square-root columns."""

    z_k: np.ndarray
    mean_pred: np.ndarray
    q_rhs: np.ndarray
    sqrt_cols: np.ndarray
    bootstrap: bool = False


def prepare_initial(z_k: np.ndarray, previous=None) -> InitialConditionData:
    """Initial-condition data for one step.

    With a previous solution, the one-step-ahead coefficient predictions give
    the carried-over mean and the PSD matrix whose symmetric square root
    parameterizes the interpolated spread; the eigendecomposition clamps
    roundoff-negative eigenvalues (anything materially negative is a
    numerical inconsistency and raises).  Without one (bootstrap), only the
    measured state is used: zero spread.
    """
    z_k = np.asarray(z_k, dtype=float).ravel()
    n_z = z_k.size
    if previous is None:
        return InitialConditionData(
            z_k=z_k,
            mean_pred=z_k.copy(),
            q_rhs=np.zeros((n_z, n_z)),
            sqrt_cols=np.zeros((n_z, n_z)),
            bootstrap=True,
        )
    z1 = np.asarray(previous.z1, dtype=float)
    mean_pred = z1[0].copy()
    rest = z1[1:]
    q_rhs = rest.T @ rest
    q_rhs = 0.5 * (q_rhs + q_rhs.T)
    eigvals, eigvecs = np.linalg.eigh(q_rhs)
    floor = -1e-10 * max(float(np.trace(q_rhs)), 1e-300)
    if eigvals.min(initial=0.0) < floor:
        raise ValueError(
            f"carried-over spread matrix has eigenvalue {eigvals.min():.3e} below "
            "the clamping tolerance; predictions are numerically inconsistent"
        )
    eigvals = np.clip(eigvals, 0.0, None)
    sqrt_cols = (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
    return InitialConditionData(
        z_k=z_k, mean_pred=mean_pred, q_rhs=q_rhs, sqrt_cols=sqrt_cols, bootstrap=False
    )


@dataclass
class OcpSolution:
    """Decoded coefficient trajectories and bookkeeping of one solve."""

    mu: float
    u_coeffs: np.ndarray  # (L, t_ini + N, n_u)
    y_coeffs: np.ndarray  # (L, t_ini + N, n_y)
    g: np.ndarray  # (L, data columns)
    z0: np.ndarray  # (L, n_z)
    z1: np.ndarray  # (L, n_z)
    z_terminal: np.ndarray  # (L, n_z)
    value: float
    conic: ConicSolution
    init: InitialConditionData


@dataclass
class OcpEncoding:
    """Everything needed to decode a raw solver vector for one step."""

    config: OcpConfig
    init: InitialConditionData
    n_vars: int
    mu_index: int
    var_of: dict  # (j, i) -> first variable index of that input coefficient
    u_fix: np.ndarray  # (L, N*n_u, n_vars) selector part
    y_fix: np.ndarray  # (L, N*n_y, n_vars)
    y_mu: np.ndarray  # (L, N*n_y)
    y_const: np.ndarray  # (L, N*n_y)
    z0_const: np.ndarray  # (L, n_z)
    z0_mu: np.ndarray  # (L, n_z)
    w_coeffs: np.ndarray  # (L, N*n_w)
    g_map: np.ndarray
    objective_offset: float
    mu_fix: float | None


class OcpAssembler:
    """Builds per-step conic programs for one (config, data stack) pair.

    All data-dependent pieces (prediction maps, selectors, fixed objective
    blocks, fixed constraint rows) are computed once; `assemble` only fills
    the parts that depend on the measured state and the carried-over
    prediction.
    """

    def __init__(self, config: OcpConfig, stack: HankelStack):
        self.config = config
        self.stack = stack
        basis = config.basis
        if basis.horizon != stack.horizon:
            raise ValueError("basis and stack horizons differ")
        if basis.l_w != 1 and basis.l_w - 1 != stack.n_w:
            raise ValueError("basis disturbance width differs from the recorded data")
        self.n_u, self.n_y, self.n_w = stack.n_u, stack.n_y, stack.n_w
        self.t_ini = stack.t_ini
        self.n_z = self.t_ini * (self.n_u + self.n_y)
        self.horizon = config.horizon
        # l_w = 1 plans with zero disturbance coefficients (mean-only planning)
        if basis.l_ini not in (1, self.n_z + 1):
            raise ValueError(
                "the linear reformulation of the interpolated initial condition "
                f"requires l_ini = n_z + 1 = {self.n_z + 1} (or the deterministic "
                f"l_ini = 1), got {basis.l_ini}"
            )
        self.deterministic_init = basis.l_ini == 1
        if config.pe_order is not None and stack.archive is not None:
            report = is_persistently_exciting(
                stack.archive.u, stack.archive.w, config.pe_order
            )
            if not report:
                raise ValueError(
                    f"record is not persistently exciting of order {config.pe_order}: "
                    f"rank {report.rank} of {report.required_rank}"
                )
        maps = stack.maps()
        self.maps = maps
        self.dim = basis.dimension
        # pinned-column layout: [u_past | u_future | y_past | w]
        nu_past = self.t_ini * self.n_u
        nu_fut = self.horizon * self.n_u
        ny_past = self.t_ini * self.n_y
        self.psi_u_past = maps.y_future[:, :nu_past]
        self.psi_u_fut = maps.y_future[:, nu_past : nu_past + nu_fut]
        self.psi_y_past = maps.y_future[:, nu_past + nu_fut : nu_past + nu_fut + ny_past]
        self.psi_w = maps.y_future[:, nu_past + nu_fut + ny_past :]
        # variable layout: allowed (j, i) input coefficients, then mu
        self.allowed: dict = {}
        index = 0
        for j in range(self.dim):
            for i in range(self.horizon):
                if self._input_allowed(j, i):
                    self.allowed[(j, i)] = index
                    index += self.n_u
        self.mu_index = index
        self.n_vars = index + 1
        # selector tensors
        self.u_fix = np.zeros((self.dim, nu_fut, self.n_vars))
        for (j, i), start in self.allowed.items():
            for c in range(self.n_u):
                self.u_fix[j, i * self.n_u + c, start + c] = 1.0
        self.y_fix = np.einsum("rk,jkn->jrn", self.psi_u_fut, self.u_fix)
        # disturbance coefficients, identical at every step by i.i.d.-ness
        w_rows = np.zeros((self.dim, self.horizon, self.n_w))
        if self.n_w and basis.l_w > 1:
            for m in range(self.horizon):
                w_rows[:, m, :] = exact_pce_of_disturbance(
                    basis.disturbance_families, basis, m
                ).coefficients
        self.w_coeffs = w_rows.reshape(self.dim, -1)
        self.y_w_const = self.w_coeffs @ self.psi_w.T  # (L, N*n_y)
        # chance-constraint coordinate sets: indices with any mass at step i
        self.step_coords = []
        for i in range(self.horizon):
            coords = list(basis.initial_indices)
            for m in range(i + 1):
                coords.extend(basis.disturbance_block(m))
            self.step_coords.append(np.array(coords, dtype=int))
        # fixed objective blocks (no mu column involved)
        q_bar = np.kron(np.eye(self.horizon), config.q)
        r_bar = np.kron(np.eye(self.horizon), config.r)
        self.q_bar, self.r_bar = q_bar, r_bar
        self.p_term = config.terminal.p
        self.z_fix = self._z_terminal_parts()
        p_fixed = 2.0 * (
            np.einsum("jrn,rs,jsm->nm", self.y_fix, q_bar, self.y_fix, optimize=True)
            + np.einsum("jrn,rs,jsm->nm", self.u_fix, r_bar, self.u_fix, optimize=True)
            + np.einsum("jrn,rs,jsm->nm", self.z_fix, self.p_term, self.z_fix, optimize=True)
        )
        self.p_fixed = 0.5 * (p_fixed + p_fixed.T)
        self.gamma_sqrt = self._psd_sqrt(config.terminal.gamma_mat)
        self._sigma_y = config.sigma_y if config.y_bounds else None
        self._sigma_u = config.sigma_u if config.u_bounds else None

    # -- structure helpers -------------------------------------------------

    def _input_allowed(self, j: int, i: int) -> bool:
        basis = self.config.basis
        if j < basis.l_ini:
            return True
        block = basis.block_of(j)[1]
        if self.config.causality == "strict":
            return i >= block + 1
        first = basis.disturbance_block(block)[0]
        return i >= block + 1 or (i == block and j == first)

    def _z_terminal_parts(self):
        """Affine pieces of the terminal window [u; y] over the last t_ini steps."""
        t_ini, horizon = self.t_ini, self.horizon
        n_u, n_y = self.n_u, self.n_y
        dim = self.dim
        z_fix = np.zeros((dim, self.n_z, self.n_vars))
        # selector matrices into (past+future) trajectories; steps N-t_ini..N-1
        u_rows = []
        y_rows = []
        for step in range(horizon - t_ini, horizon):
            if step < 0:
                u_rows.append(("past", step + t_ini))
                y_rows.append(("past", step + t_ini))
            else:
                u_rows.append(("future", step))
                y_rows.append(("future", step))
        self._z_u_rows, self._z_y_rows = u_rows, y_rows
        for w, (kind, step) in enumerate(u_rows):
            if kind == "future":
                z_fix[:, w * n_u : (w + 1) * n_u, :] = self.u_fix[
                    :, step * n_u : (step + 1) * n_u, :
                ]
        off = t_ini * n_u
        for w, (kind, step) in enumerate(y_rows):
            if kind == "future":
                z_fix[:, off + w * n_y : off + (w + 1) * n_y, :] = self.y_fix[
                    :, step * n_y : (step + 1) * n_y, :
                ]
        return z_fix

    @staticmethod
    def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
        eigvals, eigvecs = np.linalg.eigh(0.5 * (mat + mat.T))
        eigvals = np.clip(eigvals, 0.0, None)
        return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T

    def _initial_affine(self, init: InitialConditionData):
        """Per-index initial window z_0^j = const + mu * slope."""
        dim, n_z = self.dim, self.n_z
        z0_const = np.zeros((dim, n_z))
        z0_mu = np.zeros((dim, n_z))
        z0_const[0] = init.mean_pred
        z0_mu[0] = init.z_k - init.mean_pred
        if self.deterministic_init:
            if np.abs(init.sqrt_cols).max(initial=0.0) > 0:
                raise ValueError(
                    "a constant-only initial basis cannot carry interpolated spread"
                )
            return z0_const, z0_mu
        for j in range(1, self.n_z + 1):
            col = init.sqrt_cols[:, j - 1]
            z0_const[j] = col
            z0_mu[j] = -col
        return z0_const, z0_mu

    def _terminal_affine(self, z0_const, z0_mu, y_mu, y_const):
        """Constant and mu parts of the terminal window (fixed part is cached)."""
        t_ini, n_u, n_y = self.t_ini, self.n_u, self.n_y
        z_const = np.zeros((self.dim, self.n_z))
        z_mu = np.zeros((self.dim, self.n_z))
        for w, (kind, step) in enumerate(self._z_u_rows):
            if kind == "past":
                z_const[:, w * n_u : (w + 1) * n_u] = z0_const[
                    :, step * n_u : (step + 1) * n_u
                ]
                z_mu[:, w * n_u : (w + 1) * n_u] = z0_mu[:, step * n_u : (step + 1) * n_u]
        off = t_ini * n_u
        past_y_off = t_ini * n_u
        for w, (kind, step) in enumerate(self._z_y_rows):
            sl = slice(off + w * n_y, off + (w + 1) * n_y)
            if kind == "past":
                z_const[:, sl] = z0_const[:, past_y_off + step * n_y : past_y_off + (step + 1) * n_y]
                z_mu[:, sl] = z0_mu[:, past_y_off + step * n_y : past_y_off + (step + 1) * n_y]
            else:
                z_const[:, sl] = y_const[:, step * n_y : (step + 1) * n_y]
                z_mu[:, sl] = y_mu[:, step * n_y : (step + 1) * n_y]
        return z_const, z_mu

    # -- per-step assembly --------------------------------------------------

    def assemble(self, init: InitialConditionData, mu_fix: float | None = None):
        """Build the conic program for one measured state and carried data."""
        config = self.config
        n_vars, mu_idx = self.n_vars, self.mu_index
        nu_past = self.t_ini * self.n_u
        z0_const, z0_mu = self._initial_affine(init)
        u_past_const = z0_const[:, :nu_past]
        u_past_mu = z0_mu[:, :nu_past]
        y_past_const = z0_const[:, nu_past:]
        y_past_mu = z0_mu[:, nu_past:]
        y_const = (
            u_past_const @ self.psi_u_past.T
            + y_past_const @ self.psi_y_past.T
            + self.y_w_const
        )
        y_mu = u_past_mu @ self.psi_u_past.T + y_past_mu @ self.psi_y_past.T
        z_const, z_mu = self._terminal_affine(z0_const, z0_mu, y_mu, y_const)

        # objective: quadratic in x = [u vars; mu]
        p_mat = self.p_fixed.copy()
        q_bar, r_bar, p_term = self.q_bar, self.r_bar, self.p_term
        cross_y = 2.0 * np.einsum("jr,rs,jsn->n", y_mu, q_bar, self.y_fix, optimize=True)
        cross_z = 2.0 * np.einsum("jr,rs,jsn->n", z_mu, p_term, self.z_fix, optimize=True)
        p_mat[mu_idx, :] += cross_y + cross_z
        p_mat[:, mu_idx] += cross_y + cross_z
        p_mat[mu_idx, mu_idx] += 2.0 * (
            np.einsum("jr,rs,js->", y_mu, q_bar, y_mu)
            + np.einsum("jr,rs,js->", z_mu, p_term, z_mu)
        )
        q_vec = 2.0 * (
            np.einsum("jr,rs,jsn->n", y_const, q_bar, self.y_fix, optimize=True)
            + np.einsum("jr,rs,jsn->n", z_const, p_term, self.z_fix, optimize=True)
        )
        q_vec[mu_idx] += 2.0 * (
            np.einsum("jr,rs,js->", y_const, q_bar, y_mu)
            + np.einsum("jr,rs,js->", z_const, p_term, z_mu)
        )
        offset = float(
            np.einsum("jr,rs,js->", y_const, q_bar, y_const)
            + np.einsum("jr,rs,js->", z_const, p_term, z_const)
        )

        rows: list[np.ndarray] = []
        rhs: list[float] = []
        cones: list[Cone] = []

        def add_rows(mat, vec, cone):
            rows.append(np.atleast_2d(mat))
            rhs.extend(np.atleast_1d(vec).tolist())
            cones.append(cone)

        def add_nonneg_row(lin, bound, label):
            # rows without variable dependence are checked once and dropped
            if np.abs(lin).max(initial=0.0) <= 1e-9 * max(1.0, abs(bound)):
                if bound < -1e-9 * max(1.0, abs(bound)):
                    raise ValueError(f"infeasible by construction: {label}")
                return
            add_rows(lin[None, :], [bound], Cone(ConeKind.NONNEG, 1))

        def add_soc_block(top_lin, top_rhs, body_lin, body_rhs, label):
            lin_scale = max(
                float(np.abs(top_lin).max(initial=0.0)),
                float(np.abs(body_lin).max(initial=0.0)),
            )
            const_scale = max(1.0, abs(top_rhs), float(np.abs(body_rhs).max(initial=0.0)))
            if lin_scale <= 1e-9 * const_scale:
                slack = top_rhs - float(np.linalg.norm(body_rhs))
                if slack < -1e-9 * const_scale:
                    raise ValueError(
                        f"infeasible by construction: {label} (violated by {-slack:.3e})"
                    )
                return
            add_rows(
                np.vstack([top_lin[None, :], body_lin]),
                np.concatenate([[top_rhs], body_rhs]),
                Cone(ConeKind.SOC, 1 + body_lin.shape[0]),
            )

        if mu_fix is not None:
            row = np.zeros((1, n_vars))
            row[0, mu_idx] = 1.0
            add_rows(row, [float(mu_fix)], Cone(ConeKind.ZERO, 1))

        # mu box and terminal polytope share one nonnegative block
        nn_rows = [np.zeros(n_vars), np.zeros(n_vars)]
        nn_rows[0][mu_idx] = -1.0
        nn_rows[1][mu_idx] = 1.0
        nn_rhs = [0.0, 1.0]
        term = config.terminal
        zf_lin = term.zf_mat @ self.z_fix[0]
        zf_lin[:, mu_idx] += term.zf_mat @ z_mu[0]
        nn_rows.extend(list(zf_lin))
        nn_rhs.extend((term.zf_vec - term.zf_mat @ z_const[0]).tolist())
        add_rows(np.vstack(nn_rows), nn_rhs, Cone(ConeKind.NONNEG, len(nn_rhs)))

        def chance_blocks(bounds, sigma, lin_fix, lin_mu, const, width):
            for i in range(self.horizon):
                coords = self.step_coords[i]
                for c, entry in enumerate(bounds or ()):
                    if entry is None:
                        continue
                    lo, hi = entry
                    r_idx = i * width + c
                    mean_lin = lin_fix[0, r_idx].copy()
                    mean_lin[mu_idx] += lin_mu[0, r_idx]
                    mean_const = const[0, r_idx]
                    coord_lin = lin_fix[coords, r_idx, :].copy()
                    coord_lin[:, mu_idx] += lin_mu[coords, r_idx]
                    coord_const = const[coords, r_idx]
                    for sign, bound in ((1.0, hi), (-1.0, lo)):
                        if bound is None:
                            continue
                        label = f"tightened bound at step {i}, component {c}"
                        if coords.size == 0:
                            add_nonneg_row(
                                sign * mean_lin, sign * bound - sign * mean_const, label
                            )
                            continue
                        add_soc_block(
                            sign * mean_lin,
                            sign * bound - sign * mean_const,
                            -sigma * coord_lin,
                            sigma * coord_const,
                            label,
                        )

        if config.y_bounds:
            chance_blocks(
                config.y_bounds, self._sigma_y, self.y_fix, y_mu, y_const, self.n_y
            )
        if config.u_bounds:
            u_mu = np.zeros((self.dim, self.horizon * self.n_u))
            u_const = np.zeros((self.dim, self.horizon * self.n_u))
            chance_blocks(
                config.u_bounds, self._sigma_u, self.u_fix, u_mu, u_const, self.n_u
            )

        # terminal covariance level as one second-order cone
        if self.dim > 1 and term.gamma > 0:
            body_lin = np.einsum("ab,jbn->jan", self.gamma_sqrt, self.z_fix[1:])
            body_mu = z_mu[1:] @ self.gamma_sqrt.T
            body_const = z_const[1:] @ self.gamma_sqrt.T
            lin = body_lin.reshape(-1, n_vars).copy()
            lin[:, mu_idx] += body_mu.reshape(-1)
            top = np.zeros((1, n_vars))
            add_rows(
                np.vstack([top, -lin]),
                np.concatenate([[math.sqrt(term.gamma)], body_const.reshape(-1)]),
                Cone(ConeKind.SOC, 1 + lin.shape[0]),
            )
        elif self.dim > 1 and term.gamma == 0.0:
            # zero level: the terminal spread must vanish exactly
            body_lin = self.z_fix[1:].reshape(-1, n_vars).copy()
            body_lin[:, mu_idx] += z_mu[1:].reshape(-1)
            add_rows(body_lin, (-z_const[1:]).reshape(-1), Cone(ConeKind.ZERO, body_lin.shape[0]))

        program = ConicProgram(
            p=p_mat,
            q=q_vec,
            a=np.vstack(rows),
            b=np.array(rhs),
            cones=tuple(cones),
        )
        encoding = OcpEncoding(
            config=config,
            init=init,
            n_vars=n_vars,
            mu_index=mu_idx,
            var_of=self.allowed,
            u_fix=self.u_fix,
            y_fix=self.y_fix,
            y_mu=y_mu,
            y_const=y_const,
            z0_const=z0_const,
            z0_mu=z0_mu,
            w_coeffs=self.w_coeffs,
            g_map=self.maps.g,
            objective_offset=offset,
            mu_fix=mu_fix,
        )
        return program, encoding

    # -- decoding ------------------------------------------------------------

    def decode(self, encoding: OcpEncoding, solution: ConicSolution) -> OcpSolution:
        """Reconstruct coefficient trajectories from a raw solver vector."""
        if not solution.optimal:
            raise ValueError(f"cannot decode a solution with status {solution.status}")
        x = solution.x
        mu = float(x[encoding.mu_index])
        if not -1e-6 <= mu <= 1.0 + 1e-6:
            raise ValueError(f"interpolation weight {mu} escaped [0, 1]")
        mu = min(max(mu, 0.0), 1.0)
        t_ini, horizon = self.t_ini, self.horizon
        dim = self.dim
        z0 = encoding.z0_const + mu * encoding.z0_mu
        u_past = z0[:, : t_ini * self.n_u].reshape(dim, t_ini, self.n_u)
        y_past = z0[:, t_ini * self.n_u :].reshape(dim, t_ini, self.n_y)
        u_fut = (encoding.u_fix @ x).reshape(dim, horizon, self.n_u)
        y_fut = (encoding.y_fix @ x + encoding.y_const + mu * encoding.y_mu).reshape(
            dim, horizon, self.n_y
        )
        u_coeffs = np.concatenate([u_past, u_fut], axis=1)
        y_coeffs = np.concatenate([y_past, y_fut], axis=1)
        # pinned layout is [u_past | u_future | y_past | w]
        pins = np.hstack(
            [
                u_past.reshape(dim, -1),
                u_fut.reshape(dim, -1),
                y_past.reshape(dim, -1),
                encoding.w_coeffs,
            ]
        )
        g = pins @ encoding.g_map.T
        value = solution.objective + encoding.objective_offset

        def window(step):
            cols = []
            for s in range(step - t_ini, step):
                cols.append(u_coeffs[:, s + t_ini, :])
            for s in range(step - t_ini, step):
                cols.append(y_coeffs[:, s + t_ini, :])
            return np.hstack(cols)

        z1 = window(1)
        z_terminal = window(horizon)
        self._validate(encoding, u_coeffs, y_coeffs, z_terminal, mu)
        return OcpSolution(
            mu=mu,
            u_coeffs=u_coeffs,
            y_coeffs=y_coeffs,
            g=g,
            z0=z0,
            z1=z1,
            z_terminal=z_terminal,
            value=value,
            conic=solution,
            init=encoding.init,
        )

    def _validate(self, encoding, u_coeffs, y_coeffs, z_terminal, mu):
        basis = self.config.basis
        scale = max(1.0, float(np.abs(y_coeffs).max()), float(np.abs(u_coeffs).max()))
        for j in range(self.dim):
            for i in range(self.horizon):
                if (j, i) not in self.allowed:
                    leak = float(np.abs(u_coeffs[j, self.t_ini + i]).max(initial=0.0))
                    if leak > 1e-7 * scale:
                        raise ValueError(
                            f"causality violation at coefficient {j}, step {i}: {leak:.3e}"
                        )
        term = self.config.terminal
        spread = float(
            np.einsum("ja,ab,jb->", z_terminal[1:], term.gamma_mat, z_terminal[1:])
        )
        if spread > term.gamma + 1e-6 * max(1.0, term.gamma):
            raise ValueError(
                f"terminal covariance level violated: {spread:.6e} > {term.gamma:.6e}"
            )


def assemble(
    config: OcpConfig,
    stack: HankelStack,
    init: InitialConditionData,
    mu_fix: float | None = None,
):
    """One-shot assembly; builds a fresh assembler (tests and tooling).

    The receding-horizon loop keeps an `OcpAssembler` instead, which reuses
    every data-dependent block across steps.
    """
    assembler = OcpAssembler(config, stack)
    program, encoding = assembler.assemble(init, mu_fix=mu_fix)
    return assembler, program, encoding


def decode(assembler: OcpAssembler, encoding: OcpEncoding, solution: ConicSolution):
    return assembler.decode(encoding, solution)
