"""Scalar fields on [0, 1] with homogeneous Neumann boundary conditions.

Fields are sampled on the uniform nodal grid ``x_j = j/N``, ``j = 0..N``.
Every operator acts on the last axis of ``values``, so a leading batch axis
(one row per ensemble member) is carried through untouched.

Spectral work uses the type-I discrete cosine transform, which diagonalizes
the nodal Neumann Laplacian.  Coefficients ``a_j`` are normalized so that
``f(x_i) = sum_j a_j cos(j pi x_i)`` holds exactly on the grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.fft
from scipy.special import xlogy

NORM_KINDS = ("L1", "L2", "H1seminorm", "Hkappa", "LlogL")


class NegativeValueError(ValueError):
    """Raised when a density-type functional meets values below ``-tol_pos``."""

    def __init__(self, message, min_value, index=None):
        super().__init__(message)
        self.min_value = float(min_value)
        self.index = index


@dataclass(frozen=True)
class GridSpec:
    """Uniform nodal grid with ``n_cells`` intervals on [0, 1]."""

    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 4:
            raise ValueError(f"n_cells must be an integer >= 4, got {self.n_cells!r}")
        object.__setattr__(self, "n_cells", int(self.n_cells))

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.arange(self.n_nodes, dtype=float) / self.n_cells
        x.flags.writeable = False
        return x

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights."""
        return _trapezoid_weights(self.n_cells)


@dataclass(frozen=True, eq=False)
class Field:
    """Nodal samples of a scalar field; ``values.shape[-1] == n_cells + 1``."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 0 or values.shape[-1] != self.grid.n_nodes:
            raise ValueError(
                f"expected trailing axis of length {self.grid.n_nodes}, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "Field":
        return cls(grid, np.broadcast_to(fn(grid.nodes), grid.nodes.shape))

    @classmethod
    def constant(cls, grid: GridSpec, c: float) -> "Field":
        return cls(grid, np.full(grid.n_nodes, float(c)))

    @property
    def batch_shape(self) -> tuple:
        return self.values.shape[:-1]

    def with_values(self, values) -> "Field":
        return Field(self.grid, values)

    def __repr__(self):
        return f"Field(n_cells={self.grid.n_cells}, batch_shape={self.batch_shape})"


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Cosine coefficients of a field, ``cos_coeffs[..., j]`` against ``cos(j pi x)``."""

    grid: GridSpec
    cos_coeffs: np.ndarray

    def to_field(self) -> Field:
        return Field(self.grid, cosine_synthesis(self.cos_coeffs))


# ---------------------------------------------------------------------------
# array kernels (last axis = nodes)


@lru_cache(maxsize=64)
def _trapezoid_weights(n: int) -> np.ndarray:
    w = np.full(n + 1, 1.0 / n)
    w[0] = w[-1] = 0.5 / n
    w.flags.writeable = False
    return w


def trapezoid(values: np.ndarray, n: int) -> np.ndarray:
    """Trapezoid integral over [0, 1] along the last axis."""
    values = np.asarray(values)
    # elementwise multiply + sum keeps each batch row independent of the others
    return np.sum(values * _trapezoid_weights(n), axis=-1)


def laplacian_values(f: np.ndarray, n: int) -> np.ndarray:
    """Second-order Neumann Laplacian with ghost reflection f[-1]=f[1], f[N+1]=f[N-1]."""
    f = np.asarray(f, dtype=float)
    out = np.empty_like(f)
    inv_h2 = float(n) * float(n)
    out[..., 1:-1] = (f[..., :-2] - 2.0 * f[..., 1:-1] + f[..., 2:]) * inv_h2
    out[..., 0] = 2.0 * (f[..., 1] - f[..., 0]) * inv_h2
    out[..., -1] = 2.0 * (f[..., -2] - f[..., -1]) * inv_h2
    return out


def gradient_values(f: np.ndarray, n: int) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    out = np.empty_like(f)
    half_inv_h = 0.5 * n
    out[..., 1:-1] = (f[..., 2:] - f[..., :-2]) * half_inv_h
    out[..., 0] = (-3.0 * f[..., 0] + 4.0 * f[..., 1] - f[..., 2]) * half_inv_h
    out[..., -1] = (3.0 * f[..., -1] - 4.0 * f[..., -2] + f[..., -3]) * half_inv_h
    return out


def chemotactic_divergence_values(u: np.ndarray, v: np.ndarray, n: int) -> np.ndarray:
    """Conservative ``div(u grad v)`` with zero boundary flux.

    Interface fluxes use arithmetic-mean ``u``.  Boundary nodes own half
    cells, so the trapezoid sum of the output telescopes to zero and a
    constant ``u`` reproduces ``u * laplacian_values(v)`` exactly.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    flux = 0.5 * (u[..., :-1] + u[..., 1:]) * (v[..., 1:] - v[..., :-1]) * float(n)
    out = np.empty(np.broadcast_shapes(u.shape, v.shape))
    out[..., 1:-1] = (flux[..., 1:] - flux[..., :-1]) * float(n)
    out[..., 0] = 2.0 * flux[..., 0] * float(n)
    out[..., -1] = -2.0 * flux[..., -1] * float(n)
    return out


def cosine_analysis(values: np.ndarray) -> np.ndarray:
    """Nodal values -> interpolating cosine coefficients (DCT-I)."""
    values = np.asarray(values, dtype=float)
    n = values.shape[-1] - 1
    y = scipy.fft.dct(values, type=1, axis=-1)
    y /= n
    y[..., 0] *= 0.5
    y[..., -1] *= 0.5
    return y


def cosine_synthesis(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.array(coeffs, dtype=float)
    coeffs[..., 0] *= 2.0
    coeffs[..., -1] *= 2.0
    return 0.5 * scipy.fft.dct(coeffs, type=1, axis=-1)


@lru_cache(maxsize=64)
def cosine_wavenumbers_sq(n: int) -> np.ndarray:
    k2 = (np.pi * np.arange(n + 1, dtype=float)) ** 2
    k2.flags.writeable = False
    return k2


@lru_cache(maxsize=64)
def _discrete_mode_mass(n: int) -> np.ndarray:
    # trapezoid integral of cos(j pi x)^2 on the nodal grid
    m = np.full(n + 1, 0.5)
    m[0] = m[-1] = 1.0
    m.flags.writeable = False
    return m


def semigroup_multipliers(n: int, t: float, diffusivity: float, zeroth_order: float) -> np.ndarray:
    return np.exp(t * (-diffusivity * cosine_wavenumbers_sq(n) + zeroth_order))


def phi1_multipliers(n: int, t: float, diffusivity: float, zeroth_order: float) -> np.ndarray:
    """Spectral symbol of ``int_0^t e^{s L} ds`` for ``L = diffusivity*A + zeroth_order``."""
    mu = -diffusivity * cosine_wavenumbers_sq(n) + zeroth_order
    z = t * mu
    out = np.full_like(z, float(t))
    nz = z != 0.0
    out[nz] = np.expm1(z[nz]) / mu[nz]
    return out


# ---------------------------------------------------------------------------
# Field-level API


def _check_same_grid(*fields: Field) -> GridSpec:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise ValueError("fields live on different grids")
    return grid


def neumann_laplacian(f: Field, coeff: float = 1.0) -> Field:
    return f.with_values(coeff * laplacian_values(f.values, f.grid.n_cells))


def gradient(f: Field) -> Field:
    """Central differences inside, one-sided second-order stencils at the ends."""
    return f.with_values(gradient_values(f.values, f.grid.n_cells))


def chemotactic_divergence(u: Field, v: Field, chi: float = 1.0) -> Field:
    grid = _check_same_grid(u, v)
    return Field(grid, chi * chemotactic_divergence_values(u.values, v.values, grid.n_cells))


def to_spectral(f: Field) -> SpectralField:
    return SpectralField(f.grid, cosine_analysis(f.values))


def apply_heat_semigroup(f: Field, t: float, diffusivity: float, zeroth_order: float = 0.0) -> Field:
    """``exp(t (diffusivity * A + zeroth_order * I)) f`` with A the Neumann Laplacian.

    Mode ``j`` of the cosine expansion decays like ``exp(t(-diffusivity (j pi)^2 + zeroth_order))``;
    there is no time-discretization error.
    """
    if t < 0:
        raise ValueError(f"semigroup time must be non-negative, got {t}")
    if t == 0:
        return f
    n = f.grid.n_cells
    a = cosine_analysis(f.values) * semigroup_multipliers(n, t, diffusivity, zeroth_order)
    return f.with_values(cosine_synthesis(a))


def integrate_heat_semigroup(f: Field, t: float, diffusivity: float, zeroth_order: float = 0.0) -> Field:
    """``int_0^t exp(s L) f ds``, the forcing weight of the exponential Euler step."""
    if t < 0:
        raise ValueError(f"integration time must be non-negative, got {t}")
    n = f.grid.n_cells
    a = cosine_analysis(f.values) * phi1_multipliers(n, t, diffusivity, zeroth_order)
    return f.with_values(cosine_synthesis(a))


def default_tol_pos(values) -> float:
    return 1e-10 * max(1.0, float(np.max(values)))


def llogl_values(values: np.ndarray, n: int, tol_pos: float | None = None) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if tol_pos is None:
        tol_pos = default_tol_pos(values)
    lo = np.min(values)
    if lo < -tol_pos:
        idx = np.unravel_index(np.argmin(values), values.shape)
        raise NegativeValueError(f"LlogL of a field with minimum {lo:.3e} < -{tol_pos:.1e}", lo, idx)
    f = np.maximum(values, 0.0)
    return trapezoid(f * np.log(2.0 + f), n)


def hkappa_values(values: np.ndarray, n: int, kappa: float) -> np.ndarray:
    """Bessel-potential norm in the Neumann cosine basis with weights ``(1 + (j pi)^2)^kappa``.

    The mode masses are the discrete (trapezoid) ones, so ``kappa = 0`` reproduces the
    trapezoid L2 norm exactly.
    """
    a = cosine_analysis(values)
    w = _discrete_mode_mass(n) * (1.0 + cosine_wavenumbers_sq(n)) ** kappa
    return np.sqrt(np.sum(a * a * w, axis=-1))


def norm(f: Field, kind: str, kappa: float | None = None, tol_pos: float | None = None):
    """Norms used by the diagnostics.

    kind: ``"L1"``, ``"L2"``, ``"H1seminorm"``, ``"Hkappa"`` (needs ``kappa``) or ``"LlogL"``.
    ``LlogL`` is the equivalent Zygmund functional ``int f log(2 + f) dx`` and raises
    :class:`NegativeValueError` when ``f < -tol_pos`` somewhere.
    Returns a float for a single field and an array for a batch.
    """
    n = f.grid.n_cells
    vals = f.values
    if kind == "L1":
        out = trapezoid(np.abs(vals), n)
    elif kind == "L2":
        out = np.sqrt(trapezoid(vals * vals, n))
    elif kind == "H1seminorm":
        g = gradient_values(vals, n)
        out = np.sqrt(trapezoid(g * g, n))
    elif kind == "Hkappa":
        if kappa is None:
            raise ValueError("Hkappa norm needs kappa")
        out = hkappa_values(vals, n, kappa)
    elif kind == "LlogL":
        out = llogl_values(vals, n, tol_pos)
    else:
        raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# persistence


def write_field_csv(path, f: Field) -> None:
    """Write ``x,value`` rows at full double precision."""
    if f.values.ndim != 1:
        raise ValueError("only single (unbatched) fields can be written")
    with open(path, "w", newline="") as fh:
        fh.write("x,value\n")
        for x, val in zip(f.grid.nodes, f.values):
            fh.write(f"{x:.17g},{val:.17g}\n")


def read_field_csv(path) -> Field:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([float(r["x"]) for r in rows])
    grid = GridSpec(len(x) - 1)
    if not np.allclose(x, grid.nodes, rtol=0, atol=1e-15):
        raise ValueError(f"{path}: x column is not a uniform nodal grid on [0, 1]")
    return Field(grid, np.array([float(r["value"]) for r in rows]))
