"""Terminal ingredients: cost weight, feedback, covariance level, terminal set.

Synthesis is Lyapunov-based and runs offline on recorded data.  The one
identification step of the package lives here: a least-squares fit of the
window coefficients, used only to design the terminal pieces (the controller
itself never sees a parametric model).

The terminal set is an invariant polytope for the terminal feedback whose
points keep the tightened output constraint satisfiable at every subsequent
step: the output-variance margin uses the stationary covariance of the
terminal loop, which is exactly the spread the closed loop settles into.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from ddspc.lti import DataArchive, _extended_matrices

__all__ = [
    "TerminalIngredients",
    "identify_arx",
    "synthesize",
    "alpha_bound",
    "terminal_cost_weight",
    "sample_polytope",
]

LYAPUNOV_RIDGE = 1e-8


@dataclass
class TerminalIngredients:
    """Terminal cost P, feedback K, covariance weight/level, and polytope."""

    p: np.ndarray  # (n_z, n_z) terminal cost weight
    k: np.ndarray  # (n_u, n_z) terminal feedback u = K z
    gamma_mat: np.ndarray  # (n_z, n_z) covariance weight
    gamma: float  # covariance level
    zf_mat: np.ndarray  # (rows, n_z) terminal polytope F z <= f
    zf_vec: np.ndarray  # (rows,)
    contraction: float  # delta with A_K' Gamma A_K - Gamma <= -delta Gamma
    c_k: np.ndarray  # closed-loop output map Phi + D K
    a_k: np.ndarray  # closed-loop state map A + B K

    def __post_init__(self):
        for name in ("p", "gamma_mat"):
            mat = getattr(self, name)
            eigs = np.linalg.eigvalsh(0.5 * (mat + mat.T))
            if eigs.min() <= 0:
                raise ValueError(f"{name} must be positive definite (min eig {eigs.min():.3e})")
        if self.gamma < 0:
            raise ValueError("covariance level must be nonnegative")
        if np.any(self.zf_vec <= 0):
            raise ValueError("terminal polytope must contain the origin strictly")

    def contains(self, z: np.ndarray, slack: float = 0.0) -> bool:
        return bool(np.all(self.zf_mat @ z <= self.zf_vec + slack))

    def to_json(self) -> str:
        return json.dumps(
            {
                "p": self.p.tolist(),
                "k": self.k.tolist(),
                "gamma_mat": self.gamma_mat.tolist(),
                "gamma": self.gamma,
                "zf_mat": self.zf_mat.tolist(),
                "zf_vec": self.zf_vec.tolist(),
                "contraction": self.contraction,
                "c_k": self.c_k.tolist(),
                "a_k": self.a_k.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TerminalIngredients":
        data = json.loads(text)
        return cls(
            p=np.array(data["p"], dtype=float),
            k=np.array(data["k"], dtype=float),
            gamma_mat=np.array(data["gamma_mat"], dtype=float),
            gamma=float(data["gamma"]),
            zf_mat=np.array(data["zf_mat"], dtype=float),
            zf_vec=np.array(data["zf_vec"], dtype=float),
            contraction=float(data["contraction"]),
            c_k=np.array(data["c_k"], dtype=float),
            a_k=np.array(data["a_k"], dtype=float),
        )


def identify_arx(archive: DataArchive, t_ini: int | None = None):
    """Least-squares fit of (Phi, D) from recorded (u, w, y).

    Solves min sum_t ||y_t - Phi z_t - D u_t - w_t||^2 over the rows with a
    full window; exact on data generated by the recursion.  Raises on
    rank-deficient regressors with a condition report.
    """
    t_ini = archive.t_ini if t_ini is None else t_ini
    n_z = t_ini * (archive.n_u + archive.n_y)
    rows = range(t_ini, archive.length)
    if len(rows) <= n_z + archive.n_u:
        raise ValueError("archive too short to identify the window coefficients")
    regressors = np.array(
        [np.concatenate([archive.extended_state(t), archive.u[t]]) for t in rows]
    )
    targets = archive.y[t_ini:] - archive.w[t_ini:]
    theta, _, rank, sv = np.linalg.lstsq(regressors, targets, rcond=None)
    if rank < regressors.shape[1]:
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        raise ValueError(
            f"regressors are rank deficient ({rank}/{regressors.shape[1]}, "
            f"condition {cond:.3e}); the record is not exciting enough"
        )
    phi_hat = theta[:n_z].T.copy()
    d_hat = theta[n_z:].T.copy()
    return phi_hat, d_hat


def terminal_cost_weight(a_k, k, c_k, q, r, ridge: float = LYAPUNOV_RIDGE) -> np.ndarray:
    """Terminal cost from the closed-loop Lyapunov equation
    A_K' P A_K - P = -(K'RK + C_K'QC_K) - ridge*I."""
    a_k = np.atleast_2d(np.asarray(a_k, dtype=float))
    k = np.atleast_2d(np.asarray(k, dtype=float))
    c_k = np.atleast_2d(np.asarray(c_k, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    stage = k.T @ r @ k + c_k.T @ q @ c_k + ridge * np.eye(a_k.shape[0])
    p = scipy.linalg.solve_discrete_lyapunov(a_k.T, stage)
    return 0.5 * (p + p.T)


def _polytope_max(rows: np.ndarray, rhs: np.ndarray, direction: np.ndarray) -> float:
    """max direction'z subject to rows z <= rhs (bounded by construction)."""
    res = linprog(-direction, A_ub=rows, b_ub=rhs, bounds=[(None, None)] * rows.shape[1],
                  method="highs")
    if res.status != 0:
        return np.inf
    return float(-res.fun)


def _invariant_polytope(base_mat, base_vec, a_k, max_iters=200, redundancy_slack=1e-9):
    """Largest set {z : base holds along every trajectory of z+ = A_K z}.

    Adds rows base * A_K^t until all candidates are implied by the current
    set; finite because A_K is Schur and the base set is compact.
    """
    rows = base_mat.copy()
    rhs = base_vec.copy()
    power = a_k.copy()
    for _ in range(max_iters):
        added = False
        candidates = base_mat @ power
        for row, bound in zip(candidates, base_vec):
            worst = _polytope_max(rows, rhs, row)
            if worst > bound + redundancy_slack * max(1.0, abs(bound)):
                rows = np.vstack([rows, row])
                rhs = np.append(rhs, bound)
                added = True
        if not added:
            return rows, rhs
        power = power @ a_k
    raise RuntimeError("invariant polytope construction did not terminate")


def sample_polytope(rows, rhs, n_samples, rng, burn_in: int = 5):
    """Hit-and-run samples of {z : rows z <= rhs} starting from the origin."""
    n = rows.shape[1]
    z = np.zeros(n)
    out = np.empty((n_samples, n))
    total = n_samples * burn_in
    directions = rng.normal(size=(total, n))
    idx = 0
    for i in range(total):
        d = directions[i]
        d /= np.linalg.norm(d)
        num = rhs - rows @ z
        den = rows @ d
        t_hi = np.inf
        t_lo = -np.inf
        pos = den > 1e-14
        neg = den < -1e-14
        if pos.any():
            t_hi = (num[pos] / den[pos]).min()
        if neg.any():
            t_lo = (num[neg] / den[neg]).max()
        z = z + rng.uniform(t_lo, t_hi) * d
        if (i + 1) % burn_in == 0:
            out[idx] = z
            idx += 1
    return out


def synthesize(
    phi_hat: np.ndarray,
    d_hat: np.ndarray,
    t_ini: int,
    q: np.ndarray,
    r: np.ndarray,
    sigma_w: np.ndarray,
    y_bounds: list | None = None,
    u_bounds: list | None = None,
    sigma_tighten_y: float = 1.0,
    sigma_tighten_u: float = 1.0,
    box_radius: float = 1e3,
    margin_safety: float = 1.0,
    margin_floor_rel: float = 0.1,
    verify_samples: int = 10_000,
    seed: int = 0,
) -> TerminalIngredients:
    """Synthesize (P, K, Gamma, gamma, Z_f) for the identified window model.

    K comes from a Riccati design, retried with progressively cheaper input
    weights when the resulting loop cannot meet the tightened output margins.
    P solves the closed-loop cost Lyapunov equation, Gamma the identity-driven
    Lyapunov equation (contraction delta = 1/lambda_max), and gamma is the
    smallest level that the disturbance injection cannot escape.  Z_f is the
    invariant polytope of the bounded-output base constraints under A_K, and
    is verified by sampling: every sampled point stays in the set and keeps
    the tightened constraints satisfied one step ahead.

    ``y_bounds`` / ``u_bounds`` are per-component (lo, hi) pairs with None
    for an unbounded side; ``sigma_tighten_*`` are the chance-constraint
    back-off factors applied to the stationary output/input deviations.
    """
    phi_hat = np.atleast_2d(np.asarray(phi_hat, dtype=float))
    d_hat = np.atleast_2d(np.asarray(d_hat, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    sigma_w = np.atleast_2d(np.asarray(sigma_w, dtype=float))
    n_y, n_z = phi_hat.shape
    n_u = d_hat.shape[1]
    a_mat, b_mat, e_mat = _extended_matrices(phi_hat, d_hat, t_ini)
    sigma_hat = e_mat @ sigma_w @ e_mat.T
    rng = np.random.default_rng(seed)

    r_eff = r + d_hat.T @ q @ d_hat
    last_error = None
    # progressively weight the bounded output components in the gain design:
    # the plain regulator gain balances all channels and can leave the
    # constrained channel with more stationary spread than the tightened
    # bound allows
    bounded = [c for c, bb in enumerate(y_bounds or []) if bb is not None]
    for boost in (1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6):
        q_boosted = q.copy()
        for c in bounded:
            q_boosted[c, c] *= boost
        q_design = phi_hat.T @ q_boosted @ phi_hat + 1e-6 * max(1.0, np.linalg.norm(q)) * np.eye(
            n_z
        )
        try:
            x_are = scipy.linalg.solve_discrete_are(a_mat, b_mat, q_design, r_eff)
        except (np.linalg.LinAlgError, ValueError) as exc:
            last_error = f"Riccati solve failed: {exc}"
            continue
        gain = -np.linalg.solve(r_eff + b_mat.T @ x_are @ b_mat, b_mat.T @ x_are @ a_mat)
        a_k = a_mat + b_mat @ gain
        if np.abs(np.linalg.eigvals(a_k)).max() >= 1.0 - 1e-9:
            last_error = "closed loop not Schur stable"
            continue
        c_k = phi_hat + d_hat @ gain
        p = terminal_cost_weight(a_k, gain, c_k, q, r)
        gamma_mat = scipy.linalg.solve_discrete_lyapunov(a_k.T, np.eye(n_z))
        gamma_mat = 0.5 * (gamma_mat + gamma_mat.T)
        delta = 1.0 / float(np.linalg.eigvalsh(gamma_mat).max())
        gamma = float(np.trace(gamma_mat @ sigma_hat)) / delta

        # stationary covariance of the terminal loop drives the output margins
        sigma_stat = scipy.linalg.solve_discrete_lyapunov(a_k, sigma_hat)
        y_cov = c_k @ sigma_stat @ c_k.T + sigma_w
        u_cov = gain @ sigma_stat @ gain.T
        base_rows = []
        base_rhs = []
        margin_ok = True
        for c, bounds in enumerate(y_bounds or []):
            if bounds is None:
                continue
            lo, hi = bounds
            backoff = sigma_tighten_y * margin_safety * float(np.sqrt(max(y_cov[c, c], 0.0)))
            for sign, bound in ((1.0, hi), (-1.0, lo)):
                if bound is None:
                    continue
                margin = sign * bound - backoff
                if margin <= margin_floor_rel * abs(bound):
                    margin_ok = False
                    break
                base_rows.append(sign * c_k[c])
                base_rhs.append(margin)
            if not margin_ok:
                break
        for c, bounds in enumerate(u_bounds or []):
            if bounds is None or not margin_ok:
                continue
            lo, hi = bounds
            backoff = sigma_tighten_u * margin_safety * float(np.sqrt(max(u_cov[c, c], 0.0)))
            for sign, bound in ((1.0, hi), (-1.0, lo)):
                if bound is None:
                    continue
                margin = sign * bound - backoff
                if margin <= margin_floor_rel * abs(bound):
                    margin_ok = False
                    break
                base_rows.append(sign * gain[c])
                base_rhs.append(margin)
        if not margin_ok:
            last_error = (
                "tightened bounds leave no room for the terminal loop's stationary spread"
            )
            continue

        radius = box_radius
        while radius >= 1e-6 * box_radius:
            rows = np.vstack([np.eye(n_z), -np.eye(n_z)] + [np.atleast_2d(r_) for r_ in base_rows])
            rhs = np.concatenate([np.full(2 * n_z, radius), np.array(base_rhs)])
            try:
                zf_mat, zf_vec = _invariant_polytope(rows, rhs, a_k)
            except RuntimeError:
                radius *= 0.5
                continue
            samples = sample_polytope(zf_mat, zf_vec, verify_samples, rng)
            stepped = samples @ a_k.T
            inside = np.all(stepped @ zf_mat.T <= zf_vec + 1e-9, axis=1)
            outputs_ok = np.ones(len(samples), dtype=bool)
            if base_rows:
                base = np.vstack(base_rows)
                vals = stepped @ base.T
                outputs_ok = np.all(vals <= np.array(base_rhs) + 1e-9, axis=1)
            if inside.all() and outputs_ok.all():
                return TerminalIngredients(
                    p=p,
                    k=gain,
                    gamma_mat=gamma_mat,
                    gamma=gamma,
                    zf_mat=zf_mat,
                    zf_vec=zf_vec,
                    contraction=delta,
                    c_k=c_k,
                    a_k=a_k,
                )
            radius *= 0.5
        last_error = "terminal set verification kept failing under shrinking"
    raise ValueError(f"terminal synthesis failed: {last_error}")


def alpha_bound(p: np.ndarray, q: np.ndarray, sigma_w: np.ndarray) -> float:
    """Averaged-cost bound trace(Sigma_W (Q + E'PE)).

    E'PE is the trailing output block of the terminal weight, because the
    disturbance selector injects into the newest-output slot.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    sigma_w = np.atleast_2d(np.asarray(sigma_w, dtype=float))
    n_y = q.shape[0]
    trailing = p[-n_y:, -n_y:]
    return float(np.trace(sigma_w @ (q + trailing)))
