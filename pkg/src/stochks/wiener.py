"""Time-homogeneous spatial Wiener processes on [0, 1].

A process is ``W(t, x) = sum_k lambda_k psi_k(x) beta_k(t)`` over the periodic
trigonometric system ``psi_k`` with ``lambda_k = amplitude * (1 + (2 pi k)^2)^(-delta/2)``,
truncated to ``|k| <= K``.  Gaussian draws are pinned: every increment consumes
exactly ``2K + 1`` standard normals, ordered ``k = -K, ..., K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

from .field_space import Field, GridSpec

DEFAULT_MODE_CUTOFF = 64

# smallest delta for which the embedding into the target is Hilbert-Schmidt
HS_THRESHOLDS = {"L2": 1.0, "H1": 2.0}


def basis_psi(k: int, x):
    """Orthonormal trigonometric basis: sqrt2 sin(2 pi k x), 1, sqrt2 cos(2 pi |k| x)."""
    x = np.asarray(x, dtype=float)
    if k >= 1:
        out = math.sqrt(2.0) * np.sin(2.0 * np.pi * k * x)
    elif k == 0:
        out = np.ones_like(x)
    else:
        out = math.sqrt(2.0) * np.cos(2.0 * np.pi * (-k) * x)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NoiseSpec:
    delta: float
    mode_cutoff: int = DEFAULT_MODE_CUTOFF
    amplitude: float = 1.0
    lambdas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode_cutoff < 0 or int(self.mode_cutoff) != self.mode_cutoff:
            raise ValueError(f"mode cutoff must be a non-negative integer, got {self.mode_cutoff!r}")
        if self.amplitude < 0:
            raise ValueError(f"noise amplitude must be non-negative, got {self.amplitude}")
        object.__setattr__(self, "mode_cutoff", int(self.mode_cutoff))
        k = self.modes
        lam = self.amplitude * (1.0 + (2.0 * np.pi * k) ** 2) ** (-self.delta / 2.0)
        # enforce exact symmetry lambda_k == lambda_{-k}
        K = self.mode_cutoff
        lam[:K] = lam[K + 1:][::-1]
        lam.flags.writeable = False
        object.__setattr__(self, "lambdas", lam)

    @property
    def modes(self) -> np.ndarray:
        return np.arange(-self.mode_cutoff, self.mode_cutoff + 1)

    @property
    def n_modes(self) -> int:
        return 2 * self.mode_cutoff + 1

    def lam(self, k: int) -> float:
        return float(self.lambdas[k + self.mode_cutoff])


def make_noise_spec(delta: float, K: int = DEFAULT_MODE_CUTOFF, amplitude: float = 1.0) -> NoiseSpec:
    return NoiseSpec(delta=float(delta), mode_cutoff=K, amplitude=float(amplitude))


def gamma_constant(spec: NoiseSpec) -> float:
    """Trace of the noise covariance, ``sum_k lambda_k^2`` over the simulated modes."""
    return float(np.sum(spec.lambdas**2))


@dataclass(frozen=True)
class AdmissibilityReport:
    target: str
    delta: float
    threshold: float
    admissible: bool
    k_ref: int
    tail_mass: float  # upper bound on sum_{|k|>k_ref} lambda_k^2


def hs_admissibility(spec: NoiseSpec, target: str, k_ref: int | None = None) -> AdmissibilityReport:
    """Check ``delta`` against the Hilbert-Schmidt threshold for ``target`` ("L2" or "H1").

    The omitted variance ``sum_{|k|>k_ref} lambda_k^2`` is bounded by the integral
    of the (decreasing) coefficient profile beyond ``k_ref``.
    """
    if target not in HS_THRESHOLDS:
        raise ValueError(f"target must be one of {sorted(HS_THRESHOLDS)}, got {target!r}")
    if k_ref is None:
        k_ref = spec.mode_cutoff
    threshold = HS_THRESHOLDS[target]
    if spec.amplitude == 0:
        tail = 0.0
    elif spec.delta <= 0.5:
        tail = math.inf
    else:
        val, _ = integrate.quad(lambda s: (1.0 + (2.0 * np.pi * s) ** 2) ** (-spec.delta), k_ref, np.inf)
        tail = 2.0 * spec.amplitude**2 * val
    return AdmissibilityReport(
        target=target,
        delta=spec.delta,
        threshold=threshold,
        admissible=spec.delta > threshold,
        k_ref=int(k_ref),
        tail_mass=float(tail),
    )


@lru_cache(maxsize=32)
def _basis_matrix(K: int, n_cells: int) -> np.ndarray:
    x = GridSpec(n_cells).nodes
    rows = [basis_psi(int(k), x) for k in range(-K, K + 1)]
    out = np.array(rows)
    out.flags.writeable = False
    return out


def noise_matrix(spec: NoiseSpec, grid: GridSpec) -> np.ndarray:
    """``(2K+1, N+1)`` matrix of ``lambda_k psi_k(x_j)``; coefficient rows times it give nodal noise."""
    return spec.lambdas[:, None] * _basis_matrix(spec.mode_cutoff, grid.n_cells)


def nodal_variance_profile(spec: NoiseSpec, grid: GridSpec) -> np.ndarray:
    """``sum_k lambda_k^2 psi_k(x_j)^2``; per unit time variance of W at each node."""
    phi = noise_matrix(spec, grid)
    return np.sum(phi * phi, axis=0)


def coefficients_to_field(coeffs: np.ndarray, spec: NoiseSpec, grid: GridSpec) -> np.ndarray:
    """Map Brownian coefficient increments ``(..., 2K+1)`` to nodal values ``(..., N+1)``."""
    return np.asarray(coeffs) @ noise_matrix(spec, grid)


class RngStream:
    """Gaussian stream for one Wiener process of one trajectory.

    Draws are sequential: consuming blocks of any size yields the same numbers
    as consuming them one increment at a time.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,)))
        )

    def normals(self, n_steps: int, n_modes: int) -> np.ndarray:
        return self._gen.standard_normal((n_steps, n_modes))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def path_streams(base_seed: int, path_index: int) -> tuple[RngStream, RngStream]:
    """The two streams (W1, W2) of ensemble member ``path_index``; injective in the index."""
    return RngStream(base_seed, 2 * path_index), RngStream(base_seed, 2 * path_index + 1)


@dataclass(frozen=True, eq=False)
class NoiseIncrement:
    field: Field
    dt: float


def sample_increment(spec: NoiseSpec, grid: GridSpec, dt: float, rng: RngStream) -> NoiseIncrement:
    if dt <= 0:
        raise ValueError("dt must be positive")
    xi = rng.normals(1, spec.n_modes)[0]
    return NoiseIncrement(Field(grid, coefficients_to_field(xi * math.sqrt(dt), spec, grid)), dt)


class BrownianPath:
    """Brownian coefficients ``beta_k`` on a fine mesh plus their piecewise-linear interpolant.

    ``increments`` has shape ``(*batch, n_fine, 2K+1)`` and holds the fine-mesh
    increments ``sqrt(dt_fine) * xi``, i.e. exactly what an SDE scheme running
    at ``dt_fine`` on the same streams would consume.
    """

    def __init__(self, spec: NoiseSpec, grid: GridSpec, dt_fine: float, increments: np.ndarray):
        self.spec = spec
        self.grid = grid
        self.dt_fine = float(dt_fine)
        self.increments = np.asarray(increments, dtype=float)
        if self.increments.shape[-1] != spec.n_modes:
            raise ValueError("increment array does not match the number of modes")
        self.n_fine = self.increments.shape[-2]
        self.t_end = self.n_fine * self.dt_fine
        self._knots = None

    @property
    def knots(self) -> np.ndarray:
        return np.arange(self.n_fine + 1) * self.dt_fine

    def knot_values(self) -> np.ndarray:
        """Coefficient values at the knots, ``(*batch, n_fine+1, 2K+1)`` starting from 0."""
        if self._knots is None:
            z = np.zeros(self.increments.shape[:-2] + (1, self.spec.n_modes))
            self._knots = np.concatenate([z, np.cumsum(self.increments, axis=-2)], axis=-2)
        return self._knots

    def _piece(self, t: float) -> tuple[int, float]:
        if t < -1e-12 or t > self.t_end * (1 + 1e-12):
            raise ValueError(f"t={t} outside [0, {self.t_end}]")
        m = min(int(math.floor(t / self.dt_fine + 1e-9)), self.n_fine - 1)
        return max(m, 0), t - max(m, 0) * self.dt_fine

    def coefficient_slope(self, t: float) -> np.ndarray:
        m, _ = self._piece(t)
        return self.increments[..., m, :] / self.dt_fine

    def coefficients(self, t: float) -> np.ndarray:
        m, s = self._piece(t)
        base = self.knot_values()[..., m, :]
        if s == 0.0:
            return base.copy()
        return base + self.increments[..., m, :] * (s / self.dt_fine)

    def value(self, t: float) -> np.ndarray:
        return coefficients_to_field(self.coefficients(t), self.spec, self.grid)

    def slope(self, t: float) -> np.ndarray:
        """Nodal slope field of the interpolant on the piece containing ``t`` (right piece at knots)."""
        return coefficients_to_field(self.coefficient_slope(t), self.spec, self.grid)

    def coarse_increments(self, factor: int) -> np.ndarray:
        """Sum consecutive blocks of ``factor`` fine increments."""
        if factor < 1 or self.n_fine % factor:
            raise ValueError(f"cannot aggregate {self.n_fine} fine steps in blocks of {factor}")
        shape = self.increments.shape[:-2] + (self.n_fine // factor, factor, self.spec.n_modes)
        return self.increments.reshape(shape).sum(axis=-2)

    def coarsened(self, factor: int) -> "BrownianPath":
        """Same Brownian path, interpolated on a mesh ``factor`` times coarser."""
        return BrownianPath(self.spec, self.grid, self.dt_fine * factor, self.coarse_increments(factor))


def piecewise_linear_path(
    spec: NoiseSpec,
    grid: GridSpec,
    t_end: float,
    dt_coarse: float,
    refinement: int,
    rng,
) -> BrownianPath:
    """Draw Brownian coefficients on the mesh ``dt_coarse / refinement`` over ``[0, t_end]``.

    ``rng`` is one :class:`RngStream` or a sequence of them (one batch row each).
    """
    if refinement < 1:
        raise ValueError("refinement must be >= 1")
    n_coarse = int(round(t_end / dt_coarse))
    if n_coarse < 1 or abs(n_coarse * dt_coarse - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a positive multiple of dt_coarse")
    n_fine = n_coarse * refinement
    dt_fine = dt_coarse / refinement
    scale = math.sqrt(dt_fine)
    if isinstance(rng, RngStream):
        inc = rng.normals(n_fine, spec.n_modes) * scale
    else:
        inc = np.stack([r.normals(n_fine, spec.n_modes) for r in rng]) * scale
    return BrownianPath(spec, grid, dt_fine, inc)
