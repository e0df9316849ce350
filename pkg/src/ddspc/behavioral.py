"""Hankel-matrix machinery and executable checks of the trajectory lemma.

A persistently exciting record makes the column space of the stacked Hankel
matrices coincide with the set of system trajectories, at the level of
realizations and, by linearity, of expansion-coefficient trajectories.  This
module certifies excitation, verifies candidate trajectories against the
stacked system, and predicts coefficient trajectories by pinning the past
window, the future inputs, and the disturbance coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ddspc.lti import DataArchive

__all__ = [
    "hankel",
    "PersistencyReport",
    "is_persistently_exciting",
    "HankelStack",
    "build_hankel_stack",
    "LemmaCheck",
    "verify_realization_lemma",
    "PcePrediction",
    "predict_pce_trajectory",
    "TrajectoryMaps",
]


def hankel(signal: np.ndarray, depth: int) -> np.ndarray:
    """Block Hankel matrix of a (T, n) signal: column c stacks rows c..c+depth-1.

    One-dimensional input is treated as a scalar signal of length T.
    """
    signal = np.asarray(signal, dtype=float)
    if signal.ndim == 1:
        signal = signal.reshape(-1, 1)
    length, n = signal.shape
    if not 1 <= depth <= length:
        raise ValueError(f"depth must be in [1, {length}], got {depth}")
    cols = length - depth + 1
    out = np.empty((depth * n, cols))
    for c in range(cols):
        out[:, c] = signal[c : c + depth].ravel()
    return out


@dataclass
class PersistencyReport:
    """Rank certificate for persistency of excitation of a given order."""

    satisfied: bool
    order: int
    rank: int
    required_rank: int
    singular_values: np.ndarray

    def __bool__(self) -> bool:
        return self.satisfied


def is_persistently_exciting(
    u: np.ndarray, w: np.ndarray | None, order: int, rtol: float = 1e-9
) -> PersistencyReport:
    """Check full row rank of the stacked depth-``order`` Hankel of (u, w).

    Numerical rank uses a relative tolerance of ``rtol`` times the largest
    singular value; the record is treated as exact (disturbances are part of
    the signal, not noise on it).
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    blocks = [u] if w is None else [u, np.asarray(w, dtype=float).reshape(u.shape[0], -1)]
    n_signals = sum(b.shape[1] for b in blocks)
    required = order * n_signals
    if order > u.shape[0]:
        return PersistencyReport(False, order, 0, required, np.array([]))
    h = np.vstack([hankel(b, order) for b in blocks if b.shape[1]])
    if h.shape[0] == 0:
        return PersistencyReport(True, order, 0, 0, np.array([]))
    sv = np.linalg.svd(h, compute_uv=False)
    rank = int((sv > rtol * sv[0]).sum()) if sv[0] > 0 else 0
    return PersistencyReport(rank == required, order, rank, required, sv)


@dataclass
class HankelStack:
    """Hankel matrices of one archive at prediction depth ``horizon``.

    ``h_u`` and ``h_y`` span the full record at depth ``horizon + t_ini``;
    ``h_w`` spans the record from index ``t_ini`` on at depth ``horizon``, so
    that column c of every matrix is the window starting at archive index c.
    """

    h_u: np.ndarray
    h_y: np.ndarray
    h_w: np.ndarray
    horizon: int
    t_ini: int
    n_u: int
    n_y: int
    n_w: int
    archive: DataArchive | None = None
    _maps: "TrajectoryMaps | None" = field(default=None, repr=False)
    _full_pinv: np.ndarray | None = field(default=None, repr=False)

    @property
    def columns(self) -> int:
        return self.h_u.shape[1]

    @property
    def depth(self) -> int:
        return self.horizon + self.t_ini

    def full_stack(self) -> np.ndarray:
        return np.vstack([self.h_u, self.h_y, self.h_w])

    def pinned_stack(self) -> np.ndarray:
        """Rows of the stacked system fixed by a prediction: all inputs, the
        past outputs, and the disturbance window."""
        return np.vstack([self.h_u, self.h_y[: self.t_ini * self.n_y], self.h_w])

    def maps(self) -> "TrajectoryMaps":
        if self._maps is None:
            self._maps = TrajectoryMaps.from_stack(self)
        return self._maps


def build_hankel_stack(archive: DataArchive, horizon: int) -> HankelStack:
    """Construct the Hankel stack for a given prediction horizon."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    depth = horizon + archive.t_ini
    if archive.length < depth:
        raise ValueError(
            f"archive of length {archive.length} too short for depth {depth}"
        )
    h_u = hankel(archive.u, depth)
    h_y = hankel(archive.y, depth)
    w_tail = archive.w[archive.t_ini :]
    h_w = (
        hankel(w_tail, horizon)
        if archive.n_w
        else np.zeros((0, archive.length - depth + 1))
    )
    assert h_w.shape[1] == h_u.shape[1]
    return HankelStack(
        h_u=h_u,
        h_y=h_y,
        h_w=h_w,
        horizon=horizon,
        t_ini=archive.t_ini,
        n_u=archive.n_u,
        n_y=archive.n_y,
        n_w=archive.n_w,
        archive=archive,
    )


def _refined_lstsq(matrix: np.ndarray, pinv: np.ndarray, rhs: np.ndarray, passes: int = 1):
    """Min-norm least squares through a precomputed pseudoinverse with
    extended-precision residual refinement (corrections stay in the row
    space, so minimality is preserved)."""
    m_ld = matrix.astype(np.longdouble)
    rhs_ld = np.asarray(rhs, dtype=np.longdouble)
    g = (pinv @ rhs).astype(np.longdouble)
    for _ in range(passes):
        resid = rhs_ld - m_ld @ g
        g = g + pinv @ resid.astype(np.float64)
    resid = rhs_ld - m_ld @ g
    return np.asarray(g, dtype=np.float64), np.asarray(resid, dtype=np.float64)


@dataclass
class LemmaCheck:
    """Least-squares residual of a candidate trajectory against the stack."""

    residual: float
    g: np.ndarray
    target: np.ndarray

    def __float__(self) -> float:
        return self.residual


def verify_realization_lemma(
    stack: HankelStack,
    u_traj: np.ndarray,
    w_traj: np.ndarray,
    y_traj: np.ndarray,
) -> LemmaCheck:
    """Residual of the stacked system for a candidate (u, w, y) window.

    ``u_traj`` and ``y_traj`` cover ``horizon + t_ini`` steps, ``w_traj`` the
    ``horizon`` future steps.  A residual below ~1e-8 certifies the candidate
    as a system trajectory; genuine perturbations sit orders of magnitude
    higher.
    """
    u_traj = np.asarray(u_traj, dtype=float).reshape(stack.depth, stack.n_u)
    y_traj = np.asarray(y_traj, dtype=float).reshape(stack.depth, stack.n_y)
    w_traj = np.asarray(w_traj, dtype=float).reshape(stack.horizon, stack.n_w)
    target = np.concatenate([u_traj.ravel(), y_traj.ravel(), w_traj.ravel()])
    full = stack.full_stack()
    if stack._full_pinv is None:
        stack._full_pinv = np.linalg.pinv(full, rcond=1e-11)
    g, resid = _refined_lstsq(full, stack._full_pinv, target)
    return LemmaCheck(residual=float(np.abs(resid).max()), g=g, target=target)


@dataclass
class TrajectoryMaps:
    """Affine maps from pinned quantities to the implied future outputs.

    The pinned right-hand side is ordered ``[u (all steps) | y past | w]``.
    ``y_future`` maps pins to the future outputs; ``g`` maps pins to the
    minimum-norm combination of data columns.  Both are exact on consistent
    pins, which every (past window, future input, disturbance) triple is.
    """

    y_future: np.ndarray
    g: np.ndarray
    horizon: int
    t_ini: int
    n_u: int
    n_y: int
    n_w: int

    @classmethod
    def from_stack(cls, stack: HankelStack) -> "TrajectoryMaps":
        pinned = stack.pinned_stack()
        rows = pinned.shape[0]
        sv = np.linalg.svd(pinned, compute_uv=False)
        if sv.size and sv[0] > 0 and (sv > 1e-9 * sv[0]).sum() < rows:
            raise ValueError(
                "pinned Hankel rows are rank deficient; the record cannot assign "
                "past windows, inputs and disturbances freely (insufficient excitation)"
            )
        pinv = np.linalg.pinv(pinned, rcond=1e-12)
        g_map, _ = _refined_lstsq(pinned, pinv, np.eye(rows), passes=2)
        y_fut_rows = stack.h_y[stack.t_ini * stack.n_y :].astype(np.longdouble)
        y_future = np.asarray(y_fut_rows @ g_map.astype(np.longdouble), dtype=np.float64)
        return cls(
            y_future=y_future,
            g=g_map,
            horizon=stack.horizon,
            t_ini=stack.t_ini,
            n_u=stack.n_u,
            n_y=stack.n_y,
            n_w=stack.n_w,
        )

    def pin_vector(self, u_past, u_future, y_past, w_future) -> np.ndarray:
        """Assemble one pinned right-hand side in the stored column order."""
        return np.concatenate(
            [
                np.asarray(u_past, dtype=float).ravel(),
                np.asarray(u_future, dtype=float).ravel(),
                np.asarray(y_past, dtype=float).ravel(),
                np.asarray(w_future, dtype=float).ravel(),
            ]
        )

    def predict_y_future(self, pins: np.ndarray) -> np.ndarray:
        """Future outputs for one pin vector or a (k, n_pin) batch."""
        return pins @ self.y_future.T

    @property
    def n_pins(self) -> int:
        return (self.horizon + self.t_ini) * self.n_u + self.t_ini * self.n_y + self.horizon * self.n_w


@dataclass
class PcePrediction:
    """Per-coefficient trajectories implied by pinned targets."""

    u: np.ndarray  # (L, horizon + t_ini, n_u)
    y: np.ndarray  # (L, horizon + t_ini, n_y)
    g: np.ndarray  # (L, columns)
    pin_residuals: np.ndarray  # (L,)


def predict_pce_trajectory(
    stack: HankelStack,
    u_past: np.ndarray,
    y_past: np.ndarray,
    u_future: np.ndarray,
    w_future: np.ndarray,
    residual_tol: float = 1e-6,
) -> PcePrediction:
    """Propagate coefficient trajectories through the data for every index j.

    Arguments are (L, t_ini, n_u), (L, t_ini, n_y), (L, horizon, n_u) and
    (L, horizon, n_w) arrays.  Each coefficient row is pinned independently
    (the map is identical across rows); the implied future outputs agree with
    the explicit coefficient dynamics.  Raises when a pinning is inconsistent
    beyond ``residual_tol`` (relative to the pin magnitude).
    """
    t_ini, horizon = stack.t_ini, stack.horizon
    u_past = np.asarray(u_past, dtype=float).reshape(-1, t_ini * stack.n_u)
    y_past = np.asarray(y_past, dtype=float).reshape(-1, t_ini * stack.n_y)
    u_future = np.asarray(u_future, dtype=float).reshape(-1, horizon * stack.n_u)
    w_future = np.asarray(w_future, dtype=float).reshape(-1, horizon * stack.n_w)
    n_coeff = u_past.shape[0]
    if not (y_past.shape[0] == u_future.shape[0] == w_future.shape[0] == n_coeff):
        raise ValueError("all coefficient arrays must share the leading dimension")
    pins = np.hstack([u_past, u_future, y_past, w_future])  # (L, n_pin)
    pinned = stack.pinned_stack()
    maps = stack.maps()
    g = pins @ maps.g.T  # (L, M)
    resid = pins - g @ pinned.T
    scale = np.maximum(1.0, np.abs(pins).max(axis=1))
    pin_residuals = np.abs(resid).max(axis=1)
    if np.any(pin_residuals > residual_tol * scale):
        bad = int(np.argmax(pin_residuals / scale))
        raise ValueError(
            f"inconsistent pinning for coefficient {bad}: residual "
            f"{pin_residuals[bad]:.3e} (no trajectory matches the targets)"
        )
    y_future = maps.predict_y_future(pins)  # (L, horizon*n_y)
    u_traj = np.hstack([u_past, u_future]).reshape(n_coeff, stack.depth, stack.n_u)
    y_traj = np.hstack([y_past, y_future]).reshape(n_coeff, stack.depth, stack.n_y)
    return PcePrediction(u=u_traj, y=y_traj, g=g, pin_residuals=pin_residuals)
