"""Ground-truth ARX plant: realization dynamics, data generation, extended state.

The extended state stacks the last ``t_ini`` inputs and outputs (oldest
first, inputs before outputs) and acts as a surrogate state for output
feedback.  Recorded trajectories keep the disturbance alongside input and
output; downstream modules treat it as part of the measured data.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ddspc.pce import GermFamily, GermKind

__all__ = [
    "ArxModel",
    "DataArchive",
    "Excitation",
    "realization_step",
    "extended_state_matrices",
    "collect_data",
    "aircraft_model",
    "minimal_order_estimate",
    "stacked_window",
]


@dataclass(frozen=True)
class ArxModel:
    """Stochastic ARX system y_k = Phi z_k + D u_k + w_k.

    ``phi`` is (n_y, n_z) with n_z = t_ini*(n_u+n_y); ``d`` is (n_y, n_u).
    The disturbance has one germ family per output component (n_w = n_y).
    """

    phi: np.ndarray
    d: np.ndarray
    t_ini: int
    disturbance_families: tuple[GermFamily, ...]

    def __post_init__(self):
        object.__setattr__(self, "phi", np.atleast_2d(np.asarray(self.phi, dtype=float)))
        object.__setattr__(self, "d", np.atleast_2d(np.asarray(self.d, dtype=float)))
        if self.t_ini < 0:
            raise ValueError("t_ini must be nonnegative")
        if self.d.shape[0] != self.n_y:
            raise ValueError(f"D must have {self.n_y} rows, got {self.d.shape[0]}")
        if self.phi.shape[1] != self.n_z:
            raise ValueError(
                f"Phi must have t_ini*(n_u+n_y) = {self.n_z} columns, got {self.phi.shape[1]}"
            )
        if len(self.disturbance_families) != self.n_y:
            raise ValueError("need one disturbance family per output component")

    @property
    def n_y(self) -> int:
        return self.phi.shape[0]

    @property
    def n_u(self) -> int:
        return self.d.shape[1]

    @property
    def n_w(self) -> int:
        return self.n_y

    @property
    def n_z(self) -> int:
        return self.t_ini * (self.n_u + self.n_y)

    @property
    def disturbance_std(self) -> np.ndarray:
        return np.array([fam.std for fam in self.disturbance_families])

    @property
    def disturbance_cov(self) -> np.ndarray:
        return np.diag(self.disturbance_std**2)

    def sample_disturbance(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        cols = [fam.sample(rng, size) for fam in self.disturbance_families]
        return np.stack(cols, axis=-1) if size is not None else np.array(cols)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.phi.tobytes())
        h.update(self.d.tobytes())
        h.update(str(self.t_ini).encode())
        for fam in self.disturbance_families:
            h.update(repr(fam).encode())
        return h.hexdigest()[:16]


def stacked_window(u_window: np.ndarray, y_window: np.ndarray) -> np.ndarray:
    """Extended state from the last ``t_ini`` inputs/outputs (oldest first)."""
    return np.concatenate([np.asarray(u_window).ravel(), np.asarray(y_window).ravel()])


def realization_step(
    model: ArxModel, z: np.ndarray, u: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One step of the realization dynamics: y = Phi z + D u + w, shift the window.

    Returns ``(y, z_next)`` where ``z_next`` drops the oldest (u, y) pair and
    appends the current one.
    """
    z = np.asarray(z, dtype=float).ravel()
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if z.size != model.n_z or u.size != model.n_u or w.size != model.n_w:
        raise ValueError(
            f"dimension mismatch: expected z={model.n_z}, u={model.n_u}, w={model.n_w}, "
            f"got {z.size}, {u.size}, {w.size}"
        )
    y = model.phi @ z + model.d @ u + w
    if model.t_ini == 0:
        return y, z.copy()
    nu, ny = model.n_u, model.n_y
    split = model.t_ini * nu
    z_next = np.concatenate([z[nu:split], u, z[split + ny :], y])
    return y, z_next


def _extended_matrices(phi: np.ndarray, d: np.ndarray, t_ini: int):
    ny, nu = phi.shape[0], d.shape[1]
    n_z = t_ini * (nu + ny)
    a = np.zeros((n_z, n_z))
    b = np.zeros((n_z, nu))
    e = np.zeros((n_z, ny))
    if t_ini == 0:
        return a, b, e
    split = t_ini * nu
    # shift blocks
    a[: split - nu, nu:split] = np.eye(split - nu)
    a[split : n_z - ny, split + ny :] = np.eye(t_ini * ny - ny)
    # newest input / output rows
    b[split - nu : split] = np.eye(nu)
    a[n_z - ny :, :] = phi
    b[n_z - ny :, :] = d
    e[n_z - ny :, :] = np.eye(ny)
    return a, b, e


def extended_state_matrices(model: ArxModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matrices (A, B, E) with z_{k+1} = A z_k + B u_k + E w_k.

    E injects the disturbance into the newest-output slot and is purely
    structural: E = [0; I_{n_y}] regardless of Phi and D.
    """
    return _extended_matrices(model.phi, model.d, model.t_ini)


@dataclass(frozen=True)
class Excitation:
    """Offline input excitation: i.i.d. uniform dither, optionally on top of a
    stabilizing feedback u = K z + e.

    Open-loop records of an unstable plant span many orders of magnitude and
    make the Hankel least-squares solves numerically useless, so unstable
    benchmarks collect under a mild pre-stabilizing gain; the gain is part of
    the recorded input and invisible to every downstream consumer.
    """

    low: float = -1.0
    high: float = 1.0
    feedback_gain: np.ndarray | None = None

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("excitation support must satisfy low < high")
        if self.feedback_gain is not None:
            object.__setattr__(
                self, "feedback_gain", np.atleast_2d(np.asarray(self.feedback_gain, dtype=float))
            )

    @classmethod
    def stabilized(cls, model: ArxModel, low: float = -1.0, high: float = 1.0) -> "Excitation":
        """Excitation with an LQR pre-feedback computed from the model."""
        a, b, _ = extended_state_matrices(model)
        x = scipy.linalg.solve_discrete_are(a, b, np.eye(model.n_z), np.eye(model.n_u))
        gain = -np.linalg.solve(np.eye(model.n_u) + b.T @ x @ b, b.T @ x @ a)
        return cls(low=low, high=high, feedback_gain=gain)

    def draw_input(self, rng: np.random.Generator, z: np.ndarray, n_u: int) -> np.ndarray:
        e = rng.uniform(self.low, self.high, n_u)
        if self.feedback_gain is None:
            return e
        return (self.feedback_gain @ z).ravel() + e


@dataclass
class DataArchive:
    """Recorded (u, w, y) realization trajectories plus provenance metadata."""

    u: np.ndarray
    w: np.ndarray
    y: np.ndarray
    t_ini: int
    seed: int | None = None
    model_hash: str = ""

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.w = np.asarray(self.w, dtype=float).reshape(self.u.shape[0], -1)
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if not (self.u.shape[0] == self.w.shape[0] == self.y.shape[0]):
            raise ValueError("u, w, y must have the same number of rows")

    @property
    def length(self) -> int:
        return self.u.shape[0]

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def n_w(self) -> int:
        return self.w.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    def extended_state(self, t: int) -> np.ndarray:
        """Extended state z_t from the recorded windows; requires t >= t_ini."""
        if t < self.t_ini or t > self.length:
            raise ValueError(f"t must be in [{self.t_ini}, {self.length}]")
        return stacked_window(self.u[t - self.t_ini : t], self.y[t - self.t_ini : t])

    def consistency_residual(self, model: ArxModel) -> float:
        """Max abs residual of y_t - Phi z_t - D u_t - w_t over checkable rows."""
        resid = 0.0
        for t in range(self.t_ini, self.length):
            z = self.extended_state(t)
            pred = model.phi @ z + model.d @ self.u[t] + self.w[t]
            resid = max(resid, float(np.abs(self.y[t] - pred).max()))
        return resid

    def to_json(self) -> str:
        return json.dumps(
            {
                "T": self.length,
                "n_u": self.n_u,
                "n_w": self.n_w,
                "n_y": self.n_y,
                "t_ini": self.t_ini,
                "u": self.u.tolist(),
                "w": self.w.tolist(),
                "y": self.y.tolist(),
                "seed": self.seed,
                "model_hash": self.model_hash,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DataArchive":
        data = json.loads(text)
        archive = cls(
            u=np.array(data["u"], dtype=float).reshape(data["T"], data["n_u"]),
            w=np.array(data["w"], dtype=float).reshape(data["T"], data["n_w"]),
            y=np.array(data["y"], dtype=float).reshape(data["T"], data["n_y"]),
            t_ini=data["t_ini"],
            seed=data.get("seed"),
            model_hash=data.get("model_hash", ""),
        )
        return archive

    def to_csv(self) -> str:
        header = (
            [f"u{i + 1}" for i in range(self.n_u)]
            + [f"w{i + 1}" for i in range(self.n_w)]
            + [f"y{i + 1}" for i in range(self.n_y)]
        )
        rows = [",".join(header)]
        table = np.hstack([self.u, self.w, self.y])
        for row in table:
            rows.append(",".join(repr(float(v)) for v in row))
        return "\n".join(rows) + "\n"


def collect_data(
    model: ArxModel,
    length: int,
    excitation: Excitation,
    seed: int,
    pe_order: int | None = None,
    disturbed: bool = True,
) -> DataArchive:
    """Simulate ``length`` steps and record (u, w, y).

    The initial window of ``t_ini`` input/output pairs is drawn from the
    excitation dither.  When ``pe_order`` is given, the record must be long
    enough for a full-row-rank input/disturbance Hankel matrix of that order.
    ``disturbed=False`` records an undisturbed variant (w = 0).
    """
    if length < 1:
        raise ValueError("length must be positive")
    if pe_order is not None:
        needed = pe_order * (model.n_u + model.n_w + 1) - 1
        if length < needed:
            raise ValueError(
                f"length {length} too small for persistency of excitation of order "
                f"{pe_order}: need at least {needed} steps"
            )
    rng = np.random.default_rng(seed)
    init = rng.uniform(excitation.low, excitation.high, (model.t_ini, model.n_u + model.n_y))
    z = stacked_window(init[:, : model.n_u], init[:, model.n_u :])
    u_rec = np.zeros((length, model.n_u))
    w_rec = np.zeros((length, model.n_w))
    y_rec = np.zeros((length, model.n_y))
    for t in range(length):
        u = excitation.draw_input(rng, z, model.n_u)
        w = model.sample_disturbance(rng) if disturbed else np.zeros(model.n_w)
        y, z = realization_step(model, z, u, w)
        u_rec[t], w_rec[t], y_rec[t] = u, w, y
    archive = DataArchive(
        u=u_rec, w=w_rec, y=y_rec, t_ini=model.t_ini, seed=seed, model_hash=model.content_hash()
    )
    resid = archive.consistency_residual(model)
    if resid > 1e-12 * max(1.0, float(np.abs(y_rec).max())):
        raise AssertionError(f"recorded data violates the generating model: residual {resid}")
    return archive


AIRCRAFT_PHI = np.array(
    [
        [-0.019, -1.440, -0.201, 0.256, 0.050, 0.160, -0.256, 0.0860],
        [0.711, -1.800, -4.773, 3.6875, 0.650, 2.982, -2.688, 1.707],
        [1.444, -26.922, -15.746, 12.898, 2.319, 10.461, -12.897, 5.171],
    ]
)


def aircraft_model() -> ArxModel:
    """Discretized aircraft benchmark: 3 outputs, 1 input, two-step memory.

    Disturbances are independent uniforms on
    [-0.01, 0.01] x [-1, 1] x [-0.1, 0.1].
    """
    families = (
        GermFamily.uniform(-0.01, 0.01),
        GermFamily.uniform(-1.0, 1.0),
        GermFamily.uniform(-0.1, 0.1),
    )
    return ArxModel(
        phi=AIRCRAFT_PHI.copy(),
        d=np.zeros((3, 1)),
        t_ini=2,
        disturbance_families=families,
    )


def minimal_order_estimate(
    archive: DataArchive, override: int | None = None, tol: float = 1e-4
) -> int:
    """Estimate the minimal state dimension of the map (u, w) -> y.

    Fits the window coefficients by least squares on the recorded data and
    returns the numerical rank of the block Hankel matrix of the resulting
    impulse response (the McMillan degree).  The raw sliding-window rank of
    the record itself counts the free window content on top of the minimal
    order and is therefore not used.

    ``tol`` is the relative singular-value cutoff.  Published benchmark
    coefficients are rounded to a few decimals, which injects spurious modes
    around 1e-5 relative magnitude; the default treats those as noise.  Emits
    a warning when no clear spectral gap supports the cut; pass ``override``
    to bypass estimation entirely.
    """
    if override is not None:
        return override
    if archive.length == 0:
        raise ValueError("archive is empty")
    t_ini, n_z = archive.t_ini, archive.t_ini * (archive.n_u + archive.n_y)
    rows = range(t_ini, archive.length)
    if len(rows) <= n_z + archive.n_u:
        raise ValueError("archive too short for window-coefficient regression")
    regressors = np.array(
        [np.concatenate([archive.extended_state(t), archive.u[t]]) for t in rows]
    )
    targets = archive.y[t_ini:] - archive.w[t_ini:]
    theta, _, rank, sv_reg = np.linalg.lstsq(regressors, targets, rcond=None)
    if rank < regressors.shape[1] or (sv_reg[0] > 0 and sv_reg[0] / sv_reg[-1] > 1e10):
        warnings.warn(
            "window-coefficient regression is ill-conditioned; supply the order explicitly",
            RuntimeWarning,
        )
    if n_z == 0:
        return 0
    phi_hat, d_hat = theta[:n_z].T, theta[n_z:].T
    a, b, e = _extended_matrices(phi_hat, d_hat, t_ini)
    be = np.hstack([b, e])
    # impulse-response block Hankel (Ho-Kalman): rank equals the minimal order
    depth = n_z + 1
    markov = []
    power = np.eye(n_z)
    for _ in range(2 * depth):
        markov.append(phi_hat @ power @ be)
        power = power @ a
    h = np.block([[markov[i + j] for j in range(depth)] for i in range(depth)])
    sv = np.linalg.svd(h, compute_uv=False)
    if sv[0] <= 1e-12:
        return 0
    order = int((sv > tol * sv[0]).sum())
    if 0 < order < sv.size and sv[order] > 0 and sv[order - 1] / sv[order] < 10.0:
        warnings.warn(
            f"weak singular-value gap at order {order} "
            f"({sv[order - 1]:.3e} vs {sv[order]:.3e}); supply the order explicitly",
            RuntimeWarning,
        )
    return order
