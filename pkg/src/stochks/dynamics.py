"""Right-hand sides of the Ito-form chemotaxis system."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field_space import (
    Field,
    GridSpec,
    chemotactic_divergence_values,
    laplacian_values,
)


@dataclass(frozen=True)
class ModelParams:
    r_u: float
    r_v: float
    chi: float
    alpha: float
    beta: float

    def __post_init__(self):
        if self.r_u <= 0 or self.r_v <= 0:
            raise ValueError("diffusivities r_u, r_v must be positive")
        # chi = 0 is allowed: the scalar reductions switch chemotaxis off
        if self.chi < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("chi, alpha and beta must be non-negative")


@dataclass(frozen=True, eq=False)
class State:
    t: float
    u: Field
    v: Field

    def __post_init__(self):
        if self.u.grid != self.v.grid:
            raise ValueError("u and v must share a grid")
        if self.u.values.shape != self.v.values.shape:
            raise ValueError("u and v must have the same batch shape")

    @property
    def grid(self) -> GridSpec:
        return self.u.grid

    @classmethod
    def from_arrays(cls, grid: GridSpec, t: float, u, v) -> "State":
        return cls(float(t), Field(grid, u), Field(grid, v))


def drift_u_values(u, v, n, r_u, chi, gamma_u):
    return r_u * laplacian_values(u, n) - chi * chemotactic_divergence_values(u, v, n) + gamma_u * u


def drift_v_values(u, v, n, r_v, alpha_eff, beta):
    return r_v * laplacian_values(v, n) - alpha_eff * v + beta * u


def drift_u(state: State, params: ModelParams, gamma_u: float = 0.0) -> Field:
    """``r_u lap(u) - chi div(u grad v) + gamma_u u``."""
    n = state.grid.n_cells
    return state.u.with_values(
        drift_u_values(state.u.values, state.v.values, n, params.r_u, params.chi, gamma_u)
    )


def drift_v(state: State, params: ModelParams, alpha_eff: float | None = None) -> Field:
    """``r_v lap(v) - alpha_eff v + beta u``; ``alpha_eff`` defaults to ``params.alpha``."""
    if alpha_eff is None:
        alpha_eff = params.alpha
    n = state.grid.n_cells
    return state.v.with_values(
        drift_v_values(state.u.values, state.v.values, n, params.r_v, alpha_eff, params.beta)
    )


def diffusion_action(f: Field, dW) -> Field:
    """Pointwise product ``f(x_j) * dW(x_j)`` of linear multiplicative noise."""
    w = dW.field if hasattr(dW, "field") else dW
    if w.grid != f.grid:
        raise ValueError("noise increment and field live on different grids")
    return f.with_values(np.asarray(f.values) * w.values)
