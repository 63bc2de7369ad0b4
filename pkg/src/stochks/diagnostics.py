"""Lyapunov functionals, constant checks, positivity monitors and moment statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .field_space import (
    Field,
    NegativeValueError,
    apply_heat_semigroup,
    cosine_analysis,
    cosine_wavenumbers_sq,
    _discrete_mode_mass,
    gradient_values,
    laplacian_values,
    trapezoid,
)

Z95 = 1.96


class ConstraintInapplicable(ValueError):
    """The coefficient constraints are undefined (no production term or no chemical diffusion)."""


@dataclass(frozen=True)
class LyapunovParams:
    rho: float
    c1: float
    c2: float

    def __post_init__(self):
        if not (self.rho > 0 and self.c1 > 0 and self.c2 > 0):
            raise ValueError("rho, c1 and c2 must be positive")


# ---------------------------------------------------------------------------
# array kernels shared with the integrator


def functional_rates(u, v, n):
    """``(|u|_L1, |grad v|_L2, |grad v|_L2^2 + |lap v|_L2^2)`` row by row."""
    g = gradient_values(v, n)
    lap = laplacian_values(v, n)
    gv2 = trapezoid(g * g, n)
    return trapezoid(np.abs(u), n), np.sqrt(gv2), gv2 + trapezoid(lap * lap, n)


def _row_tol(u, tol_pos):
    if tol_pos is not None:
        return np.asarray(tol_pos, dtype=float)
    return 1e-10 * np.maximum(1.0, np.max(u, axis=-1))


def _check_nonneg(u, tol_pos, strict=True):
    bad = np.min(u, axis=-1) < -_row_tol(u, tol_pos)
    if strict and np.any(bad):
        idx = np.unravel_index(np.argmin(u), u.shape)
        lo = float(u[idx])
        raise NegativeValueError(f"u = {lo:.3e} at node {idx[-1]} is below -tol_pos", lo, idx)
    return bad


def lyapunov_values(u, v, n, lp: LyapunovParams, *, strict=True, tol_pos=None):
    """``(W, E)`` for every row; rows with ``u < -tol_pos`` raise (strict) or give NaN."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    bad = _check_nonneg(u, tol_pos, strict)
    uc = np.maximum(u, 0.0)
    g = gradient_values(v, n)
    quad = lp.c1 * trapezoid(g * g, n) + lp.c2 * trapezoid(v * v, n)
    ulogu = trapezoid(xlogy(uc, uc), n)
    e = ulogu + quad
    w = trapezoid(xlogy(uc, uc) - lp.rho * uc * v, n) + quad
    if np.ndim(bad):
        w = np.where(bad, np.nan, w)
        e = np.where(bad, np.nan, e)
    elif bad:
        w = e = math.nan
    return w, e


def _state_arrays(state):
    return state.u.values, state.v.values, state.grid.n_cells


def lyapunov_W(state, lp: LyapunovParams, tol_pos=None):
    """``int (u log u - rho u v) + C1 |grad v|^2 + C2 |v|^2`` with ``0 log 0 = 0``.

    Values of ``u`` in ``[-tol_pos, 0)`` are treated as 0 inside the integrand;
    anything lower raises :class:`NegativeValueError`.
    """
    w, _ = lyapunov_values(*_state_arrays(state), lp, tol_pos=tol_pos)
    return float(w) if np.ndim(w) == 0 else w


def energy_E(state, lp: LyapunovParams, tol_pos=None):
    """``W`` without the ``-rho u v`` cross term."""
    _, e = lyapunov_values(*_state_arrays(state), lp, tol_pos=tol_pos)
    return float(e) if np.ndim(e) == 0 else e


def entropy_ulogu(state, tol_pos=None):
    """``int u log u``, reported next to ``W`` since it is only bounded below."""
    u, _, n = _state_arrays(state)
    _check_nonneg(u, tol_pos)
    uc = np.maximum(u, 0.0)
    out = trapezoid(xlogy(uc, uc), n)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# constant constraints


@dataclass(frozen=True)
class ConstantsReport:
    passed: bool
    c1_bound: float
    c1_margin: float
    denominator: float
    rho_bound: float
    rho_margin: float

    def to_dict(self):
        return {
            "passed": self.passed,
            "c1_bound": self.c1_bound,
            "c1_margin": self.c1_margin,
            "denominator": self.denominator,
            "rho_bound": self.rho_bound,
            "rho_margin": self.rho_margin,
        }


def validate_constants(lp: LyapunovParams, mp) -> ConstantsReport:
    """Check ``C1 > (r_u + r_v)/(beta r_v)`` and ``rho > (chi + C1 beta)/(C1 beta r_v - r_v - r_u)``.

    All inequalities are strict.  Raises :class:`ConstraintInapplicable` when
    ``beta`` or ``r_v`` vanishes.
    """
    if mp.beta == 0 or mp.r_v == 0:
        raise ConstraintInapplicable("constraints need beta > 0 and r_v > 0")
    c1_bound = (mp.r_u + mp.r_v) / (mp.beta * mp.r_v)
    denom = lp.c1 * mp.beta * mp.r_v - mp.r_v - mp.r_u
    rho_bound = (mp.chi + lp.c1 * mp.beta) / denom if denom > 0 else math.inf
    passed = lp.c1 > c1_bound and denom > 0 and lp.rho > rho_bound
    return ConstantsReport(bool(passed), c1_bound, lp.c1 - c1_bound, denom, rho_bound, lp.rho - rho_bound)


# ---------------------------------------------------------------------------
# positivity


@dataclass(frozen=True)
class PositivityReport:
    min_u: float
    min_v: float
    tol_pos: float
    violation_fraction: float
    first_violation_time: float | None = None


def positivity_report(obj, tol_pos=None) -> PositivityReport:
    """Minima and the share of nodes with ``u < -tol_pos``.

    ``obj`` is a single-path :class:`State` or trajectory.  For a trajectory the
    fraction refers to the final state, the minima to the whole run, and the
    first violation time is resolved per step.
    """
    if hasattr(obj, "scalars"):
        if obj.batched:
            raise ValueError("pass one ensemble member (Trajectory.path)")
        tol = 1e-10 * max(1.0, float(np.max(obj.u[0]))) if tol_pos is None else float(tol_pos)
        min_u = obj.scalars["min_u"]
        viol = np.flatnonzero(min_u < -tol)
        first = float(obj.scalars["t"][viol[0]]) if viol.size else None
        frac = float(np.mean(obj.final_u < -tol))
        return PositivityReport(float(np.min(min_u)), float(np.min(obj.scalars["min_v"])), tol, frac, first)
    u = obj.u.values
    if u.ndim != 1:
        raise ValueError("pass a single (unbatched) state")
    tol = 1e-10 * max(1.0, float(np.max(u))) if tol_pos is None else float(tol_pos)
    return PositivityReport(float(np.min(u)), float(np.min(obj.v.values)), tol, float(np.mean(u < -tol)))


# ---------------------------------------------------------------------------
# moment functionals

FUNCTIONALS = ("sup_l1_u", "sup_gradv_l2_sq", "int_gradv_h1_sq")


@dataclass(frozen=True)
class PathMoments:
    index: int
    sup_l1_u: float
    sup_gradv_l2_sq: float
    int_gradv_h1_sq: float


def _stats(x: np.ndarray, p: float) -> dict:
    n = x.size
    xp = x**p
    out = {"n": int(n)}
    if n == 0:
        return out | {"mean": None, "variance": None, "half_width": None,
                      "p_moment": None, "p_half_width": None}
    mean, pm = float(np.mean(x)), float(np.mean(xp))
    if n > 1:
        var, pvar = float(np.var(x, ddof=1)), float(np.var(xp, ddof=1))
        hw, phw = Z95 * math.sqrt(var / n), Z95 * math.sqrt(pvar / n)
    else:
        var = pvar = hw = phw = None
    return out | {"mean": mean, "variance": var, "half_width": hw, "p_moment": pm, "p_half_width": phw}


@dataclass(frozen=True)
class MomentReport:
    """Per-path functional realizations plus derived ensemble statistics.

    Records are kept sorted by path index, so :meth:`merge` is associative and
    commutative bit for bit.  Sup-type values are maxima over the recorded time
    grid, a lower bound on the continuous-time supremum.
    """

    p: float
    records: tuple = ()
    failures: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        object.__setattr__(self, "records", tuple(sorted(self.records, key=lambda r: r.index)))
        object.__setattr__(self, "failures", tuple(sorted(self.failures)))
        seen = [r.index for r in self.records] + list(self.failures)
        if len(seen) != len(set(seen)):
            raise ValueError("a path index appears twice in the report")

    def merge(self, other: "MomentReport") -> "MomentReport":
        if self.p != other.p:
            raise ValueError("cannot merge reports with different p")
        return MomentReport(self.p, self.records + other.records, self.failures + other.failures, dict(self.meta))

    @property
    def n_paths(self) -> int:
        return len(self.records)

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def statistics(self) -> dict:
        return {name: _stats(self.values(name), self.p) for name in FUNCTIONALS}

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "n_paths": self.n_paths,
            "n_failed": len(self.failures),
            "failed_paths": list(self.failures),
            "statistics": self.statistics(),
            "time_sup_resolution": "recorded grid (lower bound of the continuous supremum)",
        }


def _path_moments(scalars, index):
    gv = scalars["gradv_l2"]
    return PathMoments(
        index=int(index),
        sup_l1_u=float(np.max(scalars["l1_u"])),
        sup_gradv_l2_sq=float(np.max(gv * gv)),
        int_gradv_h1_sq=float(scalars["gradv_h1_running_integral"][-1]),
    )


def moment_functionals(traj, p: float = 1.0, index_offset: int = 0) -> MomentReport:
    """Sup of ``|u|_L1``, sup of ``|grad v|_L2^2`` and the running ``H1`` integral at the end.

    Works on single-path and batched trajectories; failed members go to
    ``failures`` instead of ``records``.
    """
    sc = traj.scalars
    if not traj.batched:
        if bool(traj.failed):
            return MomentReport(p, (), (index_offset,))
        return MomentReport(p, (_path_moments(sc, index_offset),))
    records, failures = [], []
    for i in range(traj.u.shape[1]):
        if traj.failed[i]:
            failures.append(index_offset + i)
            continue
        records.append(_path_moments({k: (a if k == "t" else a[:, i]) for k, a in sc.items()}, index_offset + i))
    return MomentReport(p, tuple(records), tuple(failures))


# ---------------------------------------------------------------------------
# Holder regularity


def holder_seminorm(traj, params, eff, beta: float, delta2: float) -> float:
    """Empirical ``C^beta([0,T]; H^{2 delta2})`` seminorm of ``u - e^{t(r_u A + gamma_u)} u0``.

    Maximum over recorded snapshot pairs; the Sobolev norm is the Neumann cosine one.
    """
    if traj.batched:
        raise ValueError("pass one ensemble member (Trajectory.path)")
    times = traj.times
    if len(times) < 2:
        raise ValueError("need at least two snapshots")
    grid = traj.grid
    n = grid.n_cells
    u0 = Field(grid, traj.u[0])
    z = np.stack([traj.u[i] - apply_heat_semigroup(u0, float(t - times[0]), params.r_u, eff.gamma_u).values
                  for i, t in enumerate(times)])
    a = cosine_analysis(z)
    w = _discrete_mode_mass(n) * (1.0 + cosine_wavenumbers_sq(n)) ** (2.0 * delta2)
    best = 0.0
    for i in range(len(times) - 1):
        d = a[i + 1:] - a[i]
        dist = np.sqrt(np.sum(d * d * w, axis=-1))
        gaps = times[i + 1:] - times[i]
        best = max(best, float(np.max(dist / gaps**beta)))
    return best
