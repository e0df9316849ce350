"""Polynomial chaos machinery: germ families, joint bases, moments, propagation.

Every random signal is represented by the matrix of its expansion
coefficients in a joint orthonormal basis.  The basis stacks one constant
function, the germs describing the initial condition, and one germ block per
prediction step for the disturbance.  All basis functions are normalized to
unit norm, so second moments are plain sums of squared coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "GermKind",
    "GermFamily",
    "PceBasis",
    "PceVector",
    "build_joint_basis",
    "gaussian_initial_basis",
    "exact_pce_of_disturbance",
    "moments",
    "sample_realization",
    "pce_dynamics_step",
]

MAX_POLY_DEGREE = 5


class GermKind(Enum):
    GAUSSIAN_HERMITE = "gaussian_hermite"
    UNIFORM_LEGENDRE = "uniform_legendre"


@dataclass(frozen=True)
class GermFamily:
    """A scalar elementary random variable together with its polynomial family.

    Uniform germs carry Legendre polynomials on their support, Gaussian germs
    carry (probabilists') Hermite polynomials.  In both cases the degree-1
    orthonormal polynomial is the standardization map ``(x - mean) / std``.
    """

    kind: GermKind
    low: float = 0.0
    high: float = 0.0
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind is GermKind.UNIFORM_LEGENDRE:
            if not self.low < self.high:
                raise ValueError(f"uniform germ requires low < high, got [{self.low}, {self.high}]")
        elif self.kind is GermKind.GAUSSIAN_HERMITE:
            if not self.scale > 0:
                raise ValueError(f"gaussian germ requires std > 0, got {self.scale}")

    @classmethod
    def uniform(cls, low: float, high: float) -> "GermFamily":
        return cls(GermKind.UNIFORM_LEGENDRE, low=float(low), high=float(high))

    @classmethod
    def gaussian(cls, mean: float = 0.0, std: float = 1.0) -> "GermFamily":
        return cls(GermKind.GAUSSIAN_HERMITE, loc=float(mean), scale=float(std))

    @property
    def mean(self) -> float:
        if self.kind is GermKind.UNIFORM_LEGENDRE:
            return 0.5 * (self.low + self.high)
        return self.loc

    @property
    def std(self) -> float:
        if self.kind is GermKind.UNIFORM_LEGENDRE:
            return (self.high - self.low) / (2.0 * math.sqrt(3.0))
        return self.scale

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draw realizations of the germ itself (natural units)."""
        if self.kind is GermKind.UNIFORM_LEGENDRE:
            return rng.uniform(self.low, self.high, size)
        return rng.normal(self.loc, self.scale, size)

    def orthonormal_poly(self, degree: int, x) -> np.ndarray:
        """Evaluate the degree-``degree`` orthonormal polynomial at ``x``.

        Three-term recurrences (Legendre / Hermite), implemented up to
        degree 5 for quadrature-based tests; the runtime path only needs
        degree <= 1.
        """
        if not 0 <= degree <= MAX_POLY_DEGREE:
            raise ValueError(f"degree must be in [0, {MAX_POLY_DEGREE}], got {degree}")
        x = np.asarray(x, dtype=float)
        if degree == 0:
            return np.ones_like(x)
        if self.kind is GermKind.UNIFORM_LEGENDRE:
            t = (2.0 * x - self.low - self.high) / (self.high - self.low)
            p_prev, p = np.ones_like(t), t
            for n in range(1, degree):
                p_prev, p = p, ((2 * n + 1) * t * p - n * p_prev) / (n + 1)
            return math.sqrt(2 * degree + 1) * p
        t = (x - self.loc) / self.scale
        h_prev, h = np.ones_like(t), t
        for n in range(1, degree):
            h_prev, h = h, t * h - n * h_prev
        return h / math.sqrt(math.factorial(degree))

    def sample_phi(self, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draw values of the degree-1 orthonormal polynomial (zero mean, unit variance)."""
        return self.orthonormal_poly(1, self.sample(rng, size))


@dataclass(frozen=True)
class PceBasis:
    """Joint orthonormal basis: constant, initial-condition block, per-step disturbance blocks.

    Index 0 is the constant function 1.  Indices ``1 .. l_ini-1`` belong to the
    initial condition.  Step ``m`` of the disturbance occupies indices
    ``l_ini + m*(l_w-1) .. l_ini + (m+1)*(l_w-1) - 1``.
    """

    l_ini: int
    l_w: int
    horizon: int
    initial_families: tuple[GermFamily, ...]
    disturbance_families: tuple[GermFamily, ...]

    def __post_init__(self):
        if self.l_ini < 1 or self.horizon < 1 or self.l_w < 1:
            raise ValueError("l_ini, l_w and horizon must be positive")
        if len(self.initial_families) != self.l_ini - 1:
            raise ValueError("need exactly l_ini - 1 initial germ families")
        if len(self.disturbance_families) != self.l_w - 1:
            raise ValueError("need exactly l_w - 1 disturbance germ families")

    @property
    def dimension(self) -> int:
        return self.l_ini + self.horizon * (self.l_w - 1)

    @property
    def initial_indices(self) -> range:
        return range(1, self.l_ini)

    def disturbance_block(self, step: int) -> range:
        if not 0 <= step < self.horizon:
            raise ValueError(f"step {step} outside horizon [0, {self.horizon - 1}]")
        start = self.l_ini + step * (self.l_w - 1)
        return range(start, start + self.l_w - 1)

    def block_of(self, index: int):
        """Return "constant", "initial", or ("disturbance", step) for a basis index."""
        if index == 0:
            return "constant"
        if index < self.l_ini:
            return "initial"
        if index >= self.dimension:
            raise ValueError(f"index {index} outside basis of dimension {self.dimension}")
        return ("disturbance", (index - self.l_ini) // (self.l_w - 1))

    def family_of(self, index: int) -> GermFamily:
        block = self.block_of(index)
        if block == "constant":
            raise ValueError("index 0 is the constant function, not a germ")
        if block == "initial":
            return self.initial_families[index - 1]
        return self.disturbance_families[(index - self.l_ini) % (self.l_w - 1)]

    def sample_germ_values(self, rng: np.random.Generator, n_samples: int) -> np.ndarray:
        """Draw ``n_samples`` joint realizations of the non-constant basis functions.

        Returns an (n_samples, L-1) array ordered by basis index; all germs
        are mutually independent.
        """
        out = np.empty((n_samples, self.dimension - 1))
        for j in range(1, self.dimension):
            out[:, j - 1] = self.family_of(j).sample_phi(rng, n_samples)
        return out


@dataclass
class PceVector:
    """Coefficients of a vector-valued random variable: row j is the j-th coefficient."""

    coefficients: np.ndarray
    basis: PceBasis

    def __post_init__(self):
        self.coefficients = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        if self.coefficients.shape[0] != self.basis.dimension:
            raise ValueError(
                f"coefficient rows ({self.coefficients.shape[0]}) must equal basis "
                f"dimension ({self.basis.dimension})"
            )

    @property
    def dim(self) -> int:
        return self.coefficients.shape[1]


def build_joint_basis(
    l_ini: int,
    disturbance_families: tuple[GermFamily, ...] | list[GermFamily],
    horizon: int,
    initial_families: tuple[GermFamily, ...] | None = None,
) -> PceBasis:
    """Build the joint basis of dimension ``l_ini + horizon * n_w``.

    Each disturbance component contributes one germ per step (two-term exact
    expansion), so ``l_w = 1 + n_w``.  ``initial_families`` defaults to
    standard Gaussian germs.  An empty ``disturbance_families`` yields the
    deterministic reduction (``l_w = 1``, no disturbance blocks).
    """
    if l_ini < 1:
        raise ValueError(f"l_ini must be >= 1, got {l_ini}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    disturbance_families = tuple(disturbance_families)
    if initial_families is None:
        initial_families = tuple(GermFamily.gaussian() for _ in range(l_ini - 1))
    return PceBasis(
        l_ini=l_ini,
        l_w=1 + len(disturbance_families),
        horizon=horizon,
        initial_families=tuple(initial_families),
        disturbance_families=disturbance_families,
    )


def gaussian_initial_basis(n_z: int) -> tuple[int, tuple[GermFamily, ...]]:
    """Initial-condition germ block: one standard normal per state component.

    Returns ``(l_ini, families)`` with ``l_ini = n_z + 1``; the resulting
    initial condition is Gaussian by linearity.
    """
    if n_z < 1:
        raise ValueError(f"n_z must be >= 1, got {n_z}")
    return n_z + 1, tuple(GermFamily.gaussian() for _ in range(n_z))


def exact_pce_of_disturbance(
    families: tuple[GermFamily, ...] | list[GermFamily],
    basis: PceBasis,
    step: int,
) -> PceVector:
    """Two-term exact expansion of a zero-mean disturbance at a given step.

    Component c carries its standard deviation on its own germ inside the
    block of ``step``; every other coefficient is zero.
    """
    families = tuple(families)
    if len(families) != basis.l_w - 1:
        raise ValueError("families must match the basis disturbance block width")
    coeffs = np.zeros((basis.dimension, len(families)))
    block = basis.disturbance_block(step)
    for c, fam in enumerate(families):
        if fam != basis.disturbance_families[c]:
            raise ValueError(f"component {c} family differs from the basis germ family")
        if abs(fam.mean) > 0:
            raise ValueError(f"disturbance component {c} must have zero mean, got {fam.mean}")
        coeffs[block[c], c] = fam.std
    return PceVector(coeffs, basis)


def moments(v: PceVector) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance from orthonormal coefficients.

    mean = row 0; covariance = sum over j >= 1 of the coefficient outer
    products (symmetric PSD by construction).
    """
    mean = v.coefficients[0].copy()
    rest = v.coefficients[1:]
    cov = rest.T @ rest
    return mean, cov


def sample_realization(v: PceVector, germ_values: np.ndarray) -> np.ndarray:
    """Evaluate the expansion at given basis-function realizations.

    ``germ_values`` holds the values of the non-constant basis functions,
    ordered by index; shape (L-1,) or (k, L-1) for a batch.
    """
    germ_values = np.asarray(germ_values, dtype=float)
    expected = v.basis.dimension - 1
    if germ_values.shape[-1] != expected:
        raise ValueError(
            f"germ_values last dimension must be {expected}, got {germ_values.shape[-1]}"
        )
    return v.coefficients[0] + germ_values @ v.coefficients[1:]


def pce_dynamics_step(
    phi: np.ndarray,
    d: np.ndarray,
    z_coeffs: PceVector,
    u_coeffs: PceVector,
    w_coeffs: PceVector,
) -> PceVector:
    """One step of the coefficient dynamics: row-wise y^j = Phi z^j + D u^j + w^j.

    The linear map acts identically on every coefficient row, which is what
    lets Hankel matrices of realization data propagate coefficient
    trajectories; this function is the model-based oracle for that route.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    if z_coeffs.basis is not u_coeffs.basis or z_coeffs.basis is not w_coeffs.basis:
        if not (z_coeffs.basis == u_coeffs.basis == w_coeffs.basis):
            raise ValueError("coefficient vectors must share one basis")
    n_y = phi.shape[0]
    if phi.shape[1] != z_coeffs.dim:
        raise ValueError(f"Phi has {phi.shape[1]} columns but z has {z_coeffs.dim} components")
    if d.shape != (n_y, u_coeffs.dim):
        raise ValueError(f"D must be ({n_y}, {u_coeffs.dim}), got {d.shape}")
    if w_coeffs.dim != n_y:
        raise ValueError(f"w must have {n_y} components, got {w_coeffs.dim}")
    y = z_coeffs.coefficients @ phi.T + u_coeffs.coefficients @ d.T + w_coeffs.coefficients
    return PceVector(y, z_coeffs.basis)
