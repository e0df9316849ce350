"""Self-contained first-order solver for quadratic-objective conic programs.

Problem form:  minimize 0.5 x'Px + q'x  subject to  Ax + s = b,  s in K,
where K is a product of zero, nonnegative, and second-order cones.  The
solver is an over-relaxed ADMM (operator splitting) with Ruiz equilibration,
a dense quasi-definite KKT factorization reused across iterations, optional
residual-balanced step-size updates, and an active-set polish step that
refines the returned point to near-machine KKT accuracy when the identified
structure is correct.  Everything is deterministic for fixed inputs.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "ConeKind",
    "Cone",
    "ConicProgram",
    "ConicSolution",
    "SolverSettings",
    "SolveStatus",
    "project_cone",
    "project_dual_cone",
    "factorize_kkt",
    "KktFactorization",
    "solve",
    "brute_force_qp",
    "program_to_json",
    "program_from_json",
    "solution_to_json",
]


class ConeKind(enum.Enum):
    ZERO = "zero"
    NONNEG = "nonneg"
    SOC = "soc"


@dataclass(frozen=True)
class Cone:
    kind: ConeKind
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("cone size must be positive")
        if self.kind is ConeKind.SOC and self.size < 2:
            raise ValueError("second-order cones need size >= 2")


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


@dataclass
class ConicProgram:
    """minimize 0.5 x'Px + q'x  s.t.  Ax + s = b, s in the product cone."""

    p: np.ndarray
    q: np.ndarray
    a: np.ndarray
    b: np.ndarray
    cones: tuple[Cone, ...]

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.p = np.asarray(self.p, dtype=float).reshape(n, n)
        self.b = np.asarray(self.b, dtype=float).ravel()
        m = self.b.size
        self.a = np.asarray(self.a, dtype=float).reshape(m, n)
        self.cones = tuple(
            c if isinstance(c, Cone) else Cone(ConeKind(c[0]), int(c[1])) for c in self.cones
        )
        if sum(c.size for c in self.cones) != m:
            raise ValueError(
                f"cone sizes sum to {sum(c.size for c in self.cones)}, expected {m}"
            )
        sym_err = np.abs(self.p - self.p.T).max(initial=0.0)
        scale = np.abs(self.p).max(initial=0.0)
        if sym_err > 1e-10 * max(1.0, scale):
            raise ValueError("P must be symmetric")
        self.p = 0.5 * (self.p + self.p.T)
        if n and scale > 0:
            min_eig = float(scipy.linalg.eigvalsh(self.p, subset_by_index=[0, 0])[0])
            if min_eig < -1e-10 * scale:
                raise ValueError(f"P must be positive semidefinite (min eig {min_eig:.3e})")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.b.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.p @ x + self.q @ x)


@dataclass
class ConicSolution:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray
    objective: float
    status: SolveStatus
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    polished: bool = False
    kkt_regularized: bool = False

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


@dataclass(frozen=True)
class SolverSettings:
    eps_primal: float = 1e-6
    eps_dual: float = 1e-6
    eps_infeasible: float = 1e-7
    max_iter: int = 50_000
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    sigma: float = 1e-6
    alpha_relax: float = 1.6
    adaptive_rho: bool = True
    adaptive_interval: int = 100
    adaptive_trigger: float = 5.0
    check_interval: int = 1
    polish: bool = True
    equilibrate_iters: int = 10


def _cone_slices(cones: tuple[Cone, ...]):
    out = []
    start = 0
    for cone in cones:
        out.append((cone, slice(start, start + cone.size)))
        start += cone.size
    return out


def project_cone(s: np.ndarray, cones: tuple[Cone, ...]) -> np.ndarray:
    """Euclidean projection onto the product cone, blockwise."""
    s = np.asarray(s, dtype=float)
    if s.size != sum(c.size for c in cones):
        raise ValueError("vector length does not match the cone sizes")
    out = s.copy()
    for cone, sl in _cone_slices(cones):
        if cone.kind is ConeKind.ZERO:
            out[sl] = 0.0
        elif cone.kind is ConeKind.NONNEG:
            np.maximum(out[sl], 0.0, out=out[sl])
        else:
            t, v = s[sl][0], s[sl][1:]
            nv = float(np.linalg.norm(v))
            if nv <= t:
                continue
            if nv <= -t:
                out[sl] = 0.0
            else:
                scale = 0.5 * (1.0 + t / nv)
                out[sl][0] = scale * nv
                out[sl][1:] = scale * v
    return out


def project_dual_cone(y: np.ndarray, cones: tuple[Cone, ...]) -> np.ndarray:
    """Projection onto the dual cone (zero -> free, others self-dual)."""
    y = np.asarray(y, dtype=float)
    out = y.copy()
    for cone, sl in _cone_slices(cones):
        if cone.kind is ConeKind.ZERO:
            continue
        out[sl] = project_cone(y[sl], (cone,))
    return out


@dataclass
class KktFactorization:
    """LU factors of [[P + sigma I, A'], [A, -diag(1/rho)]], reusable across
    iterations and right-hand sides."""

    lu: tuple
    n: int
    m: int
    rho_vec: np.ndarray
    sigma: float
    regularized: bool
    fingerprint: tuple | None = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self.lu, rhs)


def factorize_kkt(
    program: ConicProgram, rho: float | np.ndarray, sigma: float = 1e-6
) -> KktFactorization:
    """Factor the quasi-definite KKT matrix once; retry with a diagonal shift
    if the factorization is numerically singular (flagged on the result)."""
    n, m = program.n, program.m
    rho_vec = np.full(m, float(rho)) if np.isscalar(rho) else np.asarray(rho, dtype=float)
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = program.p + sigma * np.eye(n)
    kkt[:n, n:] = program.a.T
    kkt[n:, :n] = program.a
    if m:
        kkt[n:, n:] = -np.diag(1.0 / rho_vec)
    regularized = False
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(kkt)
        if not np.all(np.isfinite(lu[0])) or np.abs(np.diag(lu[0])).min(initial=np.inf) == 0.0:
            raise np.linalg.LinAlgError
    except (np.linalg.LinAlgError, ValueError):
        shift = 1e-8 * np.eye(n + m)
        shift[n:, n:] *= -1.0
        lu = scipy.linalg.lu_factor(kkt + shift)
        regularized = True
    return KktFactorization(
        lu=lu, n=n, m=m, rho_vec=rho_vec, sigma=sigma, regularized=regularized
    )


def _ruiz_equilibrate(program: ConicProgram, iters: int):
    """Symmetric Ruiz scaling of [[P, A'], [A, 0]] with blockwise-uniform row
    scaling inside each cone (preserves cone membership), plus cost scaling."""
    n, m = program.n, program.m
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    p, q, a, b = program.p.copy(), program.q.copy(), program.a.copy(), program.b.copy()
    slices = _cone_slices(program.cones)
    scale_lo, scale_hi = 1e-4, 1e4
    for _ in range(iters):
        col_norms = np.maximum(
            np.abs(p).max(axis=0, initial=0.0), np.abs(a).max(axis=0, initial=0.0)
        )
        col_norms[col_norms == 0] = 1.0
        # cumulative scalings stay within fixed limits (degenerate rows or
        # columns would otherwise run away and wreck the conditioning)
        delta_d = np.clip(d / np.sqrt(col_norms), scale_lo, scale_hi) / d
        row_norms = np.abs(a).max(axis=1, initial=0.0) if m else np.array([])
        delta_e = np.ones(m)
        for cone, sl in slices:
            block = row_norms[sl].max(initial=0.0)
            if block > 0:
                target = min(max(e[sl.start] / math.sqrt(block), scale_lo), scale_hi)
                delta_e[sl] = target / e[sl.start]
        p = p * delta_d[:, None] * delta_d[None, :]
        a = a * delta_e[:, None] * delta_d[None, :]
        q = q * delta_d
        d *= delta_d
        e *= delta_e
        # cost scaling keeps the quadratic and linear parts balanced
        p_norm = np.abs(p).max(initial=0.0)
        q_norm = np.abs(q).max(initial=0.0)
        gamma = 1.0 / max(p_norm, q_norm, 1e-12)
        gamma = max(min(gamma, 1e6), 1e-6)
        p *= gamma
        q *= gamma
        c *= gamma
    b = b * e
    scaled = ConicProgram.__new__(ConicProgram)
    scaled.p, scaled.q, scaled.a, scaled.b, scaled.cones = p, q, a, b, program.cones
    return scaled, d, e, c


def _infeasibility_certificates(program, delta_x, delta_y, eps):
    """OSQP-style one-sided tests on iterate differences."""
    m = program.m
    primal_infeasible = False
    dual_infeasible = False
    ny = float(np.abs(delta_y).max(initial=0.0))
    if m and ny > 1e-14:
        dy = delta_y / ny
        in_dual = project_dual_cone(dy, program.cones)
        cert = (
            np.abs(program.a.T @ dy).max(initial=0.0) <= eps
            and program.b @ dy <= -eps
            and np.abs(dy - in_dual).max(initial=0.0) <= eps
        )
        primal_infeasible = bool(cert)
    nx = float(np.abs(delta_x).max(initial=0.0))
    if nx > 1e-14:
        dx = delta_x / nx
        adx = program.a @ dx
        # A dx must lie in the recession cone of {v : b - v in K}
        recession_ok = True
        for cone, sl in _cone_slices(program.cones):
            blk = adx[sl]
            if cone.kind is ConeKind.ZERO:
                recession_ok &= bool(np.abs(blk).max(initial=0.0) <= eps)
            elif cone.kind is ConeKind.NONNEG:
                recession_ok &= bool(blk.max(initial=-np.inf) <= eps)
            else:
                proj = project_cone(-blk, (cone,))
                recession_ok &= bool(np.abs(proj + blk).max(initial=0.0) <= eps)
        cert = (
            np.abs(program.p @ dx).max(initial=0.0) <= eps
            and program.q @ dx <= -eps
            and recession_ok
        )
        dual_infeasible = bool(cert)
    return primal_infeasible, dual_infeasible


def _polish(program: ConicProgram, x, s, y, reg=1e-9, max_newton=10):
    """Refine the iterate on the identified active set.

    Zero cones are always active; a nonnegative row is active when its dual
    dominates its slack; an SOC block is inactive, collapsed to the origin, or
    on the boundary (one scalar constraint with a multiplier of fixed
    direction).  Solves the resulting equality-constrained KKT system by a few
    Newton steps and accepts the point only if it is feasible and strictly
    better conditioned than the input.
    """
    n = program.n
    eq_rows: list[int] = []
    soc_active: list[tuple] = []
    for cone, sl in _cone_slices(program.cones):
        if cone.kind is ConeKind.ZERO:
            eq_rows.extend(range(sl.start, sl.stop))
        elif cone.kind is ConeKind.NONNEG:
            for i in range(sl.start, sl.stop):
                if y[i] >= max(s[i], 0.0):
                    eq_rows.append(i)
        else:
            sb = s[sl]
            yb = y[sl]
            margin = sb[0] - np.linalg.norm(sb[1:])
            ynorm = np.linalg.norm(yb)
            if ynorm <= 1e-9 * max(1.0, margin):
                continue  # inactive
            if np.linalg.norm(sb) <= 1e-7 * max(1.0, ynorm):
                eq_rows.extend(range(sl.start, sl.stop))  # vertex: s = 0
            else:
                soc_active.append((sl, max(float(np.linalg.norm(yb)), 1e-12)))
    a_eq = program.a[eq_rows]
    b_eq = program.b[eq_rows]
    n_eq, n_soc = len(eq_rows), len(soc_active)
    xs = x.copy()
    lam_eq = y[eq_rows].copy()
    lam_soc = np.array([ln for _, ln in soc_active])
    scale = max(1.0, np.abs(program.q).max(initial=0.0), np.abs(program.b).max(initial=0.0))
    for _ in range(max_newton):
        grad = program.p @ xs + program.q + a_eq.T @ lam_eq
        phis = np.zeros(n_soc)
        grads_phi = np.zeros((n_soc, n))
        hess = np.zeros((n, n))
        for k, (sl, _) in enumerate(soc_active):
            a0 = program.a[sl.start]
            ab = program.a[sl.start + 1 : sl.stop]
            sb = program.b[sl.start + 1 : sl.stop] - ab @ xs
            s0 = program.b[sl.start] - a0 @ xs
            nv = max(float(np.linalg.norm(sb)), 1e-14)
            unit = sb / nv
            phis[k] = nv - s0
            grads_phi[k] = -ab.T @ unit + a0
            hess += lam_soc[k] * (ab.T @ (np.eye(len(sb)) - np.outer(unit, unit)) @ ab) / nv
            grad += lam_soc[k] * grads_phi[k]
        resid = np.concatenate([grad, a_eq @ xs - b_eq, phis])
        if np.abs(resid).max(initial=0.0) <= 1e-12 * scale:
            break
        dim = n + n_eq + n_soc
        kkt = np.zeros((dim, dim))
        kkt[:n, :n] = program.p + hess + reg * np.eye(n)
        kkt[:n, n : n + n_eq] = a_eq.T
        kkt[n : n + n_eq, :n] = a_eq
        kkt[n : n + n_eq, n : n + n_eq] = -reg * np.eye(n_eq)
        if n_soc:
            kkt[:n, n + n_eq :] = grads_phi.T
            kkt[n + n_eq :, :n] = grads_phi
            kkt[n + n_eq :, n + n_eq :] = -reg * np.eye(n_soc)
        try:
            step = scipy.linalg.lu_solve(scipy.linalg.lu_factor(kkt), -resid)
        except (np.linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(step)):
            return None
        xs = xs + step[:n]
        lam_eq = lam_eq + step[n : n + n_eq]
        lam_soc = lam_soc + step[n + n_eq :]
    else:
        return None
    # rebuild full (s, y) and verify feasibility of the polished point
    s_new = program.b - program.a @ xs
    y_new = np.zeros(program.m)
    y_new[eq_rows] = lam_eq
    for k, (sl, _) in enumerate(soc_active):
        if lam_soc[k] < -1e-9 * scale:
            return None
        sb = s_new[sl][1:]
        nv = max(float(np.linalg.norm(sb)), 1e-14)
        y_new[sl.start] = lam_soc[k]
        y_new[sl.start + 1 : sl.stop] = -lam_soc[k] * sb / nv
    tol = 1e-9 * scale
    for cone, sl in _cone_slices(program.cones):
        blk = s_new[sl]
        if cone.kind is ConeKind.ZERO:
            if np.abs(blk).max(initial=0.0) > tol:
                return None
        elif cone.kind is ConeKind.NONNEG:
            if blk.min(initial=0.0) < -tol:
                return None
            if y_new[sl].min(initial=0.0) < -tol:
                return None
        else:
            if np.linalg.norm(blk[1:]) - blk[0] > tol:
                return None
            if np.linalg.norm(y_new[sl][1:]) - y_new[sl][0] > tol:
                return None
    return xs, s_new, y_new


def _residuals(program: ConicProgram, x, s, y):
    rp = np.abs(program.a @ x + s - program.b).max(initial=0.0)
    rd = np.abs(program.p @ x + program.q + program.a.T @ y).max(initial=0.0)
    primal_obj = program.objective(x)
    dual_obj = float(-0.5 * x @ program.p @ x - program.b @ y)
    return float(rp), float(rd), abs(primal_obj - dual_obj)


def solve(
    program: ConicProgram,
    settings: SolverSettings = SolverSettings(),
    warm_start: ConicSolution | tuple | None = None,
    kkt_cache: dict | None = None,
) -> ConicSolution:
    """Operator-splitting solve with optional warm start and KKT reuse.

    ``kkt_cache`` is a mutable mapping owned by the caller: when the program
    matrices and step sizes match the cached factorization it is reused,
    otherwise it is rebuilt and stored.  Termination uses unscaled residuals
    ``||Ax+s-b||_inf <= eps_p (1 + ||b||_inf)`` and
    ``||Px+q+A'y||_inf <= eps_d (1 + ||q||_inf)``.
    """
    n, m = program.n, program.m
    if n == 0:
        return ConicSolution(
            x=np.zeros(0), s=program.b.copy(), y=np.zeros(m), objective=0.0,
            status=SolveStatus.OPTIMAL, primal_residual=0.0, dual_residual=0.0,
            gap=0.0, iterations=0,
        )
    scaled, d_scale, e_scale, c_scale = _ruiz_equilibrate(program, settings.equilibrate_iters)
    rho_vec = np.full(m, settings.rho)
    for cone, sl in _cone_slices(program.cones):
        if cone.kind is ConeKind.ZERO:
            rho_vec[sl] *= settings.rho_eq_scale
    if kkt_cache is not None:
        carried = kkt_cache.get("rho_vec")
        if carried is not None and carried.shape == rho_vec.shape:
            rho_vec = carried.copy()

    def get_factor(rho_now):
        key = ("kkt", settings.sigma)
        if kkt_cache is not None:
            cached = kkt_cache.get(key)
            if (
                cached is not None
                and cached.rho_vec.shape == rho_now.shape
                and np.array_equal(cached.rho_vec, rho_now)
                and cached.fingerprint is not None
                and cached.fingerprint[0].shape == scaled.p.shape
                and np.array_equal(cached.fingerprint[0], scaled.p)
                and np.array_equal(cached.fingerprint[1], scaled.a)
            ):
                return cached
        factor = factorize_kkt(scaled, rho_now, settings.sigma)
        factor.fingerprint = (scaled.p.copy(), scaled.a.copy())
        if kkt_cache is not None:
            kkt_cache[key] = factor
        return factor

    factor = get_factor(rho_vec)
    regularized = factor.regularized

    # warm start in unscaled coordinates: (x, y, s) -> scaled iterates;
    # ignored when the program dimensions changed since it was produced
    if warm_start is not None:
        if isinstance(warm_start, ConicSolution):
            x0, y0, s0 = warm_start.x, warm_start.y, warm_start.s
        else:
            x0, y0, s0 = warm_start
        if x0.shape != (n,) or y0.shape != (m,) or s0.shape != (m,):
            warm_start = None
    if warm_start is not None:
        x = x0 / d_scale
        z = (program.b - s0) * e_scale
        y = c_scale * (y0 / e_scale)
    else:
        x = np.zeros(n)
        z = np.zeros(m)
        y = np.zeros(m)

    b_scale_inf = np.abs(program.b).max(initial=0.0)
    q_scale_inf = np.abs(program.q).max(initial=0.0)
    alpha = settings.alpha_relax
    status = SolveStatus.MAX_ITER
    iterations = settings.max_iter
    x_prev_cert = x.copy()
    y_prev_cert = y.copy()

    rp = rd = gap = np.inf
    for it in range(1, settings.max_iter + 1):
        rhs = np.concatenate([settings.sigma * x - scaled.q, z - y / rho_vec])
        sol = factor.solve(rhs)
        x_tilde, nu = sol[:n], sol[n:]
        z_tilde = z + (nu - y) / rho_vec
        x = alpha * x_tilde + (1 - alpha) * x
        z_relaxed = alpha * z_tilde + (1 - alpha) * z
        z_new = z_relaxed + y / rho_vec
        # project onto {v : b - v in K}
        z_new = scaled.b - project_cone(scaled.b - z_new, program.cones)
        y = y + rho_vec * (z_relaxed - z_new)
        z = z_new

        if it % settings.check_interval == 0 or it == settings.max_iter:
            x_u = x * d_scale
            s_u = (scaled.b - z) / e_scale
            y_u = (y * e_scale) / c_scale
            rp, rd, gap = _residuals(program, x_u, s_u, y_u)
            if rp <= settings.eps_primal * (1.0 + b_scale_inf) and rd <= settings.eps_dual * (
                1.0 + q_scale_inf
            ):
                status = SolveStatus.OPTIMAL
                iterations = it
                break
            pinf, dinf = _infeasibility_certificates(
                program, x_u - x_prev_cert * d_scale, y_u - (y_prev_cert * e_scale) / c_scale,
                settings.eps_infeasible,
            )
            if pinf:
                status = SolveStatus.INFEASIBLE
                iterations = it
                break
            if dinf:
                status = SolveStatus.UNBOUNDED
                iterations = it
                break
            x_prev_cert = x.copy()
            y_prev_cert = y.copy()

        if (
            settings.adaptive_rho
            and it % settings.adaptive_interval == 0
            and it < settings.max_iter
        ):
            # residual balancing in scaled space
            rp_s = np.abs(scaled.a @ x - z).max(initial=0.0)
            rd_s = np.abs(scaled.p @ x + scaled.q + scaled.a.T @ y).max(initial=0.0)
            denom_p = max(
                np.abs(scaled.a @ x).max(initial=0.0), np.abs(z).max(initial=0.0), 1e-12
            )
            denom_d = max(
                np.abs(scaled.p @ x).max(initial=0.0),
                np.abs(scaled.a.T @ y).max(initial=0.0),
                np.abs(scaled.q).max(initial=0.0),
                1e-12,
            )
            ratio = math.sqrt((rp_s / denom_p) / max(rd_s / denom_d, 1e-18))
            if ratio > settings.adaptive_trigger or ratio < 1.0 / settings.adaptive_trigger:
                ratio = min(max(ratio, 1e-3), 1e3)
                rho_vec = rho_vec * ratio
                factor = get_factor(rho_vec)
                regularized |= factor.regularized

    if kkt_cache is not None:
        kkt_cache["rho_vec"] = rho_vec.copy()
    x_u = x * d_scale
    s_u = (scaled.b - z) / e_scale
    y_u = (y * e_scale) / c_scale
    polished = False
    if status is SolveStatus.OPTIMAL and settings.polish:
        refined = _polish(program, x_u, s_u, y_u)
        if refined is not None:
            rp2, rd2, gap2 = _residuals(program, *refined)
            if max(rp2, rd2) <= max(rp, rd):
                x_u, s_u, y_u = refined
                rp, rd, gap = rp2, rd2, gap2
                polished = True
    rp, rd, gap = _residuals(program, x_u, s_u, y_u)
    return ConicSolution(
        x=x_u,
        s=s_u,
        y=y_u,
        objective=program.objective(x_u),
        status=status,
        primal_residual=rp,
        dual_residual=rd,
        gap=gap,
        iterations=iterations,
        polished=polished,
        kkt_regularized=regularized,
    )


def brute_force_qp(program: ConicProgram) -> ConicSolution:
    """Active-set enumeration oracle for tiny programs (<= 3 variables,
    zero / nonnegative cones only).  Test use only."""
    from scipy.optimize import linprog

    if program.n > 3:
        raise ValueError("brute force oracle is limited to 3 variables")
    if any(c.kind is ConeKind.SOC for c in program.cones):
        raise ValueError("brute force oracle handles zero/nonneg cones only")
    eq_rows = []
    ineq_rows = []
    for cone, sl in _cone_slices(program.cones):
        rows = range(sl.start, sl.stop)
        (eq_rows if cone.kind is ConeKind.ZERO else ineq_rows).extend(rows)
    a, b = program.a, program.b
    # feasibility phase (independent LP)
    lp = linprog(
        c=np.zeros(program.n),
        A_ub=a[ineq_rows] if ineq_rows else None,
        b_ub=b[ineq_rows] if ineq_rows else None,
        A_eq=a[eq_rows] if eq_rows else None,
        b_eq=b[eq_rows] if eq_rows else None,
        bounds=[(None, None)] * program.n,
        method="highs",
    )
    if lp.status == 2:
        return ConicSolution(
            x=np.zeros(program.n), s=np.zeros(program.m), y=np.zeros(program.m),
            objective=np.nan, status=SolveStatus.INFEASIBLE,
            primal_residual=np.inf, dual_residual=np.inf, gap=np.inf, iterations=0,
        )
    best = None
    n = program.n
    feas_tol = 1e-8 * max(1.0, np.abs(b).max(initial=0.0))
    for mask in range(1 << len(ineq_rows)):
        active = eq_rows + [r for i, r in enumerate(ineq_rows) if mask >> i & 1]
        a_act = a[active]
        kkt = np.zeros((n + len(active), n + len(active)))
        kkt[:n, :n] = program.p
        kkt[:n, n:] = a_act.T
        kkt[n:, :n] = a_act
        rhs = np.concatenate([-program.q, b[active]])
        try:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        except np.linalg.LinAlgError:
            continue
        if np.abs(kkt @ sol - rhs).max(initial=0.0) > 1e-7 * max(1.0, np.abs(rhs).max(initial=0.0)):
            continue
        x = sol[:n]
        lam = sol[n:]
        slack = b - a @ x
        if any(slack[r] < -feas_tol for r in ineq_rows):
            continue
        if any(abs(slack[r]) > feas_tol for r in eq_rows):
            continue
        obj = program.objective(x)
        if best is None or obj < best[0] - 1e-12:
            y = np.zeros(program.m)
            for idx, row in enumerate(active):
                y[row] = lam[idx]
            best = (obj, x, y)
    if best is None:
        return ConicSolution(
            x=np.zeros(program.n), s=np.zeros(program.m), y=np.zeros(program.m),
            objective=np.nan, status=SolveStatus.INFEASIBLE,
            primal_residual=np.inf, dual_residual=np.inf, gap=np.inf, iterations=0,
        )
    obj, x, y = best
    s = b - a @ x
    rp, rd, gap = _residuals(program, x, s, y)
    return ConicSolution(
        x=x, s=s, y=y, objective=obj, status=SolveStatus.OPTIMAL,
        primal_residual=rp, dual_residual=rd, gap=gap, iterations=1 << len(ineq_rows),
    )


def program_to_json(program: ConicProgram) -> str:
    return json.dumps(
        {
            "P": program.p.tolist(),
            "q": program.q.tolist(),
            "A": program.a.tolist(),
            "b": program.b.tolist(),
            "cones": [[c.kind.value, c.size] for c in program.cones],
        }
    )


def program_from_json(text: str) -> ConicProgram:
    data = json.loads(text)
    n = len(data["q"])
    m = len(data["b"])
    return ConicProgram(
        p=np.array(data["P"], dtype=float).reshape(n, n),
        q=np.array(data["q"], dtype=float),
        a=np.array(data["A"], dtype=float).reshape(m, n),
        b=np.array(data["b"], dtype=float),
        cones=tuple(Cone(ConeKind(k), int(s)) for k, s in data["cones"]),
    )


def solution_to_json(solution: ConicSolution) -> str:
    return json.dumps(
        {
            "x": solution.x.tolist(),
            "s": solution.s.tolist(),
            "y": solution.y.tolist(),
            "objective": solution.objective,
            "status": solution.status.value,
            "primal_residual": solution.primal_residual,
            "dual_residual": solution.dual_residual,
            "gap": solution.gap,
            "iterations": solution.iterations,
            "polished": solution.polished,
        }
    )
