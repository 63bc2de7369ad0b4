"""Time stepping of the Ito-form system and the smoothed-noise reference.

Two SDE schemes share one driver:

* ``semi_implicit_em``: diffusion implicit (tridiagonal solve), chemotaxis,
  reaction and noise explicit.
* ``exponential_em``: exponential Euler on the mild form.  The linear part is
  propagated exactly in the cosine basis, deterministic forcing is weighted by
  ``int_0^dt e^{sL} ds`` and the noise term by ``e^{dt L}``.

All kernels work on arrays of shape ``(M, N+1)``; rows are independent
ensemble members.  ``wong_zakai_reference`` solves the random ODE driven by the
piecewise-linear interpolant of the Brownian coefficients with explicit
midpoint steps and no Ito correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from . import diagnostics as _diag
from .conversion import EffectiveParams
from .dynamics import ModelParams, State, drift_u_values, drift_v_values
from .field_space import (
    Field,
    GridSpec,
    chemotactic_divergence_values,
    cosine_analysis,
    cosine_synthesis,
    gradient_values,
    laplacian_values,
    phi1_multipliers,
    semigroup_multipliers,
    trapezoid,
)
from .wiener import BrownianPath, NoiseSpec, RngStream, coefficients_to_field

SCHEMES = ("semi_implicit_em", "exponential_em", "wong_zakai_reference")
REGIMES = ("keller_segel", "heat_continuation")

SCALAR_COLUMNS = (
    "t", "mass_u", "l1_u", "l2_u", "gradv_l2", "gradv_h1_running_integral",
    "W", "E", "min_u", "min_v", "regime", "truncation_level",
)

WZ_BLOWUP = 1e12


class NumericalFailure(RuntimeError):
    """A trajectory produced non-finite values (or blew past the stiffness guard)."""

    def __init__(self, message, step=None, t=None, paths=None):
        super().__init__(message)
        self.step = step
        self.t = t
        self.paths = paths


@dataclass(frozen=True)
class SchemeConfig:
    dt: float
    scheme: str = "semi_implicit_em"
    t_end: float = 1.0
    record_every: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be non-negative")
        if self.t_end > 0 and self.dt > self.t_end * (1 + 1e-12):
            raise ValueError("dt must not exceed t_end")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        steps = self.t_end / self.dt
        if steps > np.iinfo(np.int64).max // 2:
            raise ValueError("t_end/dt does not fit in an integer step counter")

    @property
    def n_steps(self) -> int:
        n = int(round(self.t_end / self.dt))
        if abs(n * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ValueError(f"t_end={self.t_end} is not a multiple of dt={self.dt}")
        return n


@dataclass
class StepControl:
    """Per-path modifiers a hook may impose on subsequent steps.

    ``chem_factor`` multiplies the chemotaxis term, ``coupling_factor`` the
    ``beta u`` production term; ``regime`` is 0 (Keller-Segel) or 1 (heat
    continuation) and ``level`` the current truncation level (0 if none).
    """

    chem_factor: object = 1.0
    coupling_factor: object = 1.0
    regime: object = 0
    level: object = 0


# ---------------------------------------------------------------------------
# kernels


def _col(x):
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim else x


class _SemiImplicitKernel:
    def __init__(self, grid: GridSpec, params: ModelParams, eff: EffectiveParams, dt: float):
        self.n = grid.n_cells
        self.dt = dt
        self.params = params
        self.eff = eff
        self._w = np.ones(self.n + 1)
        self._w[0] = self._w[-1] = 0.5
        self.fac_u = self._factor(dt * params.r_u)
        self.fac_v = self._factor(dt * params.r_v)

    def _factor(self, dr):
        # (I - dr*lap_h) scaled by half-weights at the ends is symmetric positive definite
        c = dr * self.n * self.n
        ab = np.empty((2, self.n + 1))
        ab[0, 0] = 0.0
        ab[0, 1:] = -c
        ab[1, :] = 1.0 + 2.0 * c
        ab[1, 0] = ab[1, -1] = 0.5 + c
        return cholesky_banded(ab, lower=False)

    def _solve(self, fac, rhs):
        x = cho_solve_banded((fac, False), (rhs * self._w).T, check_finite=False)
        return x.T

    def __call__(self, u, v, dw1, dw2, chem=1.0, coup=1.0):
        p, e, dt, n = self.params, self.eff, self.dt, self.n
        fu = e.gamma_u * u
        if p.chi != 0.0:
            fu = fu - (p.chi * _col(chem)) * chemotactic_divergence_values(u, v, n)
        # increment form: constants give an exactly zero update and roundoff scales with dt
        rhs_u = dt * (p.r_u * laplacian_values(u, n) + fu) + u * dw1
        rhs_v = dt * (p.r_v * laplacian_values(v, n) + (p.beta * _col(coup)) * u - e.alpha_eff * v) + v * dw2
        return u + self._solve(self.fac_u, rhs_u), v + self._solve(self.fac_v, rhs_v)


class _ExponentialKernel:
    def __init__(self, grid: GridSpec, params: ModelParams, eff: EffectiveParams, dt: float):
        n = grid.n_cells
        self.n = n
        self.params = params
        self.e_u = semigroup_multipliers(n, dt, params.r_u, eff.gamma_u)
        self.p_u = phi1_multipliers(n, dt, params.r_u, eff.gamma_u)
        self.e_v = semigroup_multipliers(n, dt, params.r_v, -eff.alpha_eff)
        self.p_v = phi1_multipliers(n, dt, params.r_v, -eff.alpha_eff)

    def __call__(self, u, v, dw1, dw2, chem=1.0, coup=1.0):
        p, n = self.params, self.n
        a_u = self.e_u * cosine_analysis(u + u * dw1)
        if p.chi != 0.0:
            f_u = -(p.chi * _col(chem)) * chemotactic_divergence_values(u, v, n)
            a_u = a_u + self.p_u * cosine_analysis(f_u)
        a_v = self.e_v * cosine_analysis(v + v * dw2)
        if p.beta != 0.0:
            a_v = a_v + self.p_v * cosine_analysis((p.beta * _col(coup)) * u)
        return cosine_synthesis(a_u), cosine_synthesis(a_v)


def make_kernel(scheme: str, grid: GridSpec, params: ModelParams, eff: EffectiveParams, dt: float):
    if scheme == "semi_implicit_em":
        return _SemiImplicitKernel(grid, params, eff, dt)
    if scheme == "exponential_em":
        return _ExponentialKernel(grid, params, eff, dt)
    raise ValueError(f"{scheme!r} is not an SDE scheme")


def _increment_values(dW, grid):
    if dW is None:
        return 0.0
    if hasattr(dW, "field"):
        dW = dW.field
    if isinstance(dW, Field):
        if dW.grid != grid:
            raise ValueError("noise increment lives on a different grid")
        return dW.values
    return np.asarray(dW, dtype=float)


def _step(scheme, state, params, eff, dW1, dW2, dt, chem_factor, coupling_factor):
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = state.grid
    kernel = make_kernel(scheme, grid, params, eff, dt)
    u1, v1 = kernel(state.u.values, state.v.values,
                    _increment_values(dW1, grid), _increment_values(dW2, grid),
                    chem_factor, coupling_factor)
    if not (np.all(np.isfinite(u1)) and np.all(np.isfinite(v1))):
        raise NumericalFailure(f"non-finite state after step at t={state.t}", t=state.t)
    return State(state.t + dt, Field(grid, u1), Field(grid, v1))


def step_semi_implicit(state: State, params: ModelParams, eff: EffectiveParams, dW1, dW2, dt: float,
                       *, chem_factor=1.0, coupling_factor=1.0) -> State:
    """One linear-implicit Euler-Maruyama step.

    Solves ``(I - dt r_u lap) u+ = u + dt(-chi div(u grad v) + gamma_u u) + u dW1`` and
    ``(I - dt r_v lap) v+ = v + dt(-alpha_eff v + beta u) + v dW2``.
    """
    return _step("semi_implicit_em", state, params, eff, dW1, dW2, dt, chem_factor, coupling_factor)


def step_exponential(state: State, params: ModelParams, eff: EffectiveParams, dW1, dW2, dt: float,
                     *, chem_factor=1.0, coupling_factor=1.0) -> State:
    """One exponential Euler-Maruyama step of the mild form (linear part exact in time)."""
    return _step("exponential_em", state, params, eff, dW1, dW2, dt, chem_factor, coupling_factor)


# ---------------------------------------------------------------------------
# noise feeds


class _CoefficientFeed:
    """Hands out per-step Brownian coefficient increments ``(M, 2K+1)``."""

    def __init__(self, spec: NoiseSpec, dt: float, n_steps: int, source, chunk: int = 128):
        self.spec = spec
        self.n_steps = n_steps
        self._scale = math.sqrt(dt)
        self._chunk = max(1, int(chunk))
        self._buf = None
        self._pos = 0
        self._array = None
        self._rngs = None
        if isinstance(source, np.ndarray):
            if source.shape[-2] < n_steps:
                raise ValueError("pre-drawn noise is shorter than the run")
            self._array = source
        else:
            self._rngs = list(source)

    def block(self, start: int, size: int) -> np.ndarray:
        """Increments for steps ``start .. start+size`` as ``(M, size, 2K+1)``."""
        if self._array is not None:
            return self._array[..., start:start + size, :]
        return np.stack([r.normals(size, self.spec.n_modes) for r in self._rngs]) * self._scale


def _as_rng_list(r):
    if r is None:
        return None
    if isinstance(r, RngStream):
        return [r]
    return list(r)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(eq=False)
class Trajectory:
    """Recorded run.

    ``u``/``v`` hold snapshots ``(n_snap, *batch, N+1)`` at the global steps in
    ``snapshot_steps``; ``scalars`` holds per-step records ``(n_steps+1, *batch)``.
    """

    grid: GridSpec
    dt: float
    snapshot_steps: np.ndarray
    u: np.ndarray
    v: np.ndarray
    scalars: dict
    final_u: np.ndarray
    final_v: np.ndarray
    failed: np.ndarray
    failure_step: np.ndarray
    start_step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.snapshot_steps * self.dt

    @property
    def batched(self) -> bool:
        return self.u.ndim == 3

    @property
    def n_steps(self) -> int:
        return len(self.scalars["t"]) - 1

    @property
    def states(self) -> list:
        return [State(float(t), Field(self.grid, u), Field(self.grid, v))
                for t, u, v in zip(self.times, self.u, self.v)]

    @property
    def final_state(self) -> State:
        t = (self.start_step + self.n_steps) * self.dt
        return State(t, Field(self.grid, self.final_u), Field(self.grid, self.final_v))

    def path(self, i: int) -> "Trajectory":
        """Single ensemble member ``i`` of a batched trajectory."""
        if not self.batched:
            raise ValueError("trajectory is not batched")
        sc = {k: (a if k == "t" else a[:, i]) for k, a in self.scalars.items()}
        return Trajectory(self.grid, self.dt, self.snapshot_steps, self.u[:, i], self.v[:, i], sc,
                          self.final_u[i], self.final_v[i], self.failed[i], self.failure_step[i],
                          self.start_step, dict(self.meta))


def write_trajectory_csv(path, traj: Trajectory) -> None:
    """Per-step scalar records of a single-path trajectory, full double precision."""
    if traj.batched:
        raise ValueError("write one ensemble member at a time (Trajectory.path)")
    sc = traj.scalars
    with open(path, "w", newline="") as fh:
        fh.write(",".join(SCALAR_COLUMNS) + "\n")
        for i in range(len(sc["t"])):
            row = []
            for col in SCALAR_COLUMNS:
                val = sc[col][i]
                if col == "regime":
                    row.append(REGIMES[int(val)])
                elif col == "truncation_level":
                    row.append(str(int(val)))
                else:
                    row.append(f"{float(val):.17g}")
            fh.write(",".join(row) + "\n")


class _Recorder:
    def __init__(self, n, n_steps, batch, lyapunov, h3_start):
        self.n = n
        self.lyapunov = lyapunov
        shape = (n_steps + 1, batch)
        self.cols = {c: np.empty(shape) for c in SCALAR_COLUMNS if c not in ("t", "regime", "truncation_level")}
        self.cols["regime"] = np.zeros(shape, dtype=np.int8)
        self.cols["truncation_level"] = np.zeros(shape, dtype=np.int64)
        self.h3 = np.broadcast_to(np.asarray(h3_start, dtype=float), (batch,)).copy()

    def record(self, i, u, v, control, dt):
        n = self.n
        c = self.cols
        l1, gv_l2, h3_rate = _diag.functional_rates(u, v, n)
        if i > 0:
            self.h3 = self.h3 + dt * h3_rate
        c["mass_u"][i] = trapezoid(u, n)
        c["l1_u"][i] = l1
        c["l2_u"][i] = np.sqrt(trapezoid(u * u, n))
        c["gradv_l2"][i] = gv_l2
        c["gradv_h1_running_integral"][i] = self.h3
        if self.lyapunov is None:
            c["W"][i] = np.nan
            c["E"][i] = np.nan
        else:
            w, e = _diag.lyapunov_values(u, v, n, self.lyapunov, strict=False)
            c["W"][i] = w
            c["E"][i] = e
        c["min_u"][i] = np.min(u, axis=-1)
        c["min_v"][i] = np.min(v, axis=-1)
        c["regime"][i] = control.regime
        c["truncation_level"][i] = control.level


def _merge_controls(controls):
    active = [c for c in controls if c is not None]
    if len(active) == 1:
        return active[0]
    out = StepControl()
    for c in active:
        out = StepControl(out.chem_factor * np.asarray(c.chem_factor),
                          out.coupling_factor * np.asarray(c.coupling_factor),
                          np.maximum(out.regime, c.regime), np.maximum(out.level, c.level))
    return out


def integrate(
    state0: State,
    params: ModelParams,
    eff: EffectiveParams,
    spec1: NoiseSpec,
    spec2: NoiseSpec,
    cfg: SchemeConfig,
    rngs=None,
    *,
    noise=None,
    hooks=(),
    lyapunov=None,
    on_failure: str = "raise",
    start_step: int = 0,
    running_integral0=0.0,
    chunk: int = 128,
) -> Trajectory:
    """Run the configured stepper from ``state0`` for ``cfg.t_end``.

    Noise comes either from ``rngs = (rng1, rng2)`` (each an :class:`RngStream`
    or one stream per batch row) or from ``noise = (inc1, inc2)``, pre-drawn
    Brownian coefficient increments ``(M, n_steps, 2K+1)`` at step ``cfg.dt``.

    ``hooks`` are objects with optional ``start(t, u, v)`` and
    ``after_step(step, t, u, v)`` methods; a returned :class:`StepControl`
    replaces that hook's previous control for all following steps.

    ``on_failure="raise"`` aborts on the first non-finite value with
    :class:`NumericalFailure`; ``"mask"`` marks the offending rows as failed and
    keeps integrating the others (rows never interact).
    """
    if on_failure not in ("raise", "mask"):
        raise ValueError("on_failure must be 'raise' or 'mask'")
    if cfg.scheme == "wong_zakai_reference":
        if hooks:
            raise ValueError("hooks are not supported by the smoothed-noise reference")
        return _integrate_reference(state0, params, spec1, spec2, cfg, rngs, noise, lyapunov, on_failure)
    grid = state0.grid
    n = grid.n_cells
    batched = state0.u.values.ndim == 2
    u = np.array(state0.u.values, dtype=float, ndmin=2)
    v = np.array(state0.v.values, dtype=float, ndmin=2)
    M = u.shape[0]
    n_steps = cfg.n_steps
    dt = cfg.dt

    if noise is not None:
        src1, src2 = (np.asarray(x, dtype=float) for x in noise)
        if src1.ndim == 2:
            src1, src2 = src1[None], src2[None]
    elif rngs is not None:
        src1, src2 = _as_rng_list(rngs[0]), _as_rng_list(rngs[1])
        if len(src1) != M or len(src2) != M:
            raise ValueError(f"need one RngStream per batch row ({M})")
    else:
        raise ValueError("either rngs or noise must be given")
    feed1 = _CoefficientFeed(spec1, dt, n_steps, src1, chunk)
    feed2 = _CoefficientFeed(spec2, dt, n_steps, src2, chunk)

    kernel = make_kernel(cfg.scheme, grid, params, eff, dt) if n_steps else None
    controls = [None] * len(hooks)
    t0 = start_step * dt
    for j, h in enumerate(hooks):
        if hasattr(h, "start"):
            controls[j] = h.start(t0, u, v)
    control = _merge_controls(controls)

    rec = _Recorder(n, n_steps, M, lyapunov, running_integral0)
    rec.record(0, u, v, control, dt)
    snaps_u, snaps_v, snap_steps = [u.copy()], [v.copy()], [start_step]
    failed = np.zeros(M, dtype=bool)
    failure_step = np.full(M, -1, dtype=np.int64)

    blk1 = blk2 = None
    blk_start = 0
    with np.errstate(all="ignore" if on_failure == "mask" else "warn", under="ignore"):
        for i in range(1, n_steps + 1):
            k = i - 1
            if blk1 is None or k - blk_start >= blk1.shape[-2]:
                size = min(chunk, n_steps - k)
                blk_start = k
                blk1 = coefficients_to_field(feed1.block(k, size), spec1, grid)
                blk2 = coefficients_to_field(feed2.block(k, size), spec2, grid)
            dw1 = blk1[:, k - blk_start]
            dw2 = blk2[:, k - blk_start]
            u, v = kernel(u, v, dw1, dw2, control.chem_factor, control.coupling_factor)
            gstep = start_step + i
            t = gstep * dt
            bad = ~(np.all(np.isfinite(u), axis=-1) & np.all(np.isfinite(v), axis=-1))
            if bad.any():
                if on_failure == "raise":
                    raise NumericalFailure(
                        f"non-finite state at step {gstep} (t={t:.6g}) in paths {np.flatnonzero(bad).tolist()}",
                        step=gstep, t=t, paths=np.flatnonzero(bad).tolist())
                new = bad & ~failed
                failure_step[new] = gstep
                failed |= bad
            for j, h in enumerate(hooks):
                if hasattr(h, "after_step"):
                    c = h.after_step(gstep, t, u, v)
                    if c is not None:
                        controls[j] = c
            control = _merge_controls(controls)
            rec.record(i, u, v, control, dt)
            if gstep % cfg.record_every == 0:
                snaps_u.append(u.copy())
                snaps_v.append(v.copy())
                snap_steps.append(gstep)

    scalars = dict(rec.cols)
    scalars["t"] = (start_step + np.arange(n_steps + 1)) * dt
    traj = Trajectory(grid, dt, np.array(snap_steps), np.stack(snaps_u), np.stack(snaps_v), scalars,
                      u, v, failed, failure_step, start_step)
    if not batched:
        traj = traj.path(0)
    return traj


def trajectory_from_states(grid: GridSpec, dt: float, us: np.ndarray, vs: np.ndarray, *, record_every: int = 1,
                           lyapunov=None, failed=None) -> Trajectory:
    """Wrap states ``(n_steps+1, M, N+1)`` sampled every ``dt`` in a :class:`Trajectory`."""
    n_steps = us.shape[0] - 1
    m = us.shape[1]
    rec = _Recorder(grid.n_cells, n_steps, m, lyapunov, 0.0)
    control = StepControl()
    for i in range(n_steps + 1):
        rec.record(i, us[i], vs[i], control, dt)
    scalars = dict(rec.cols)
    scalars["t"] = np.arange(n_steps + 1) * dt
    steps = np.arange(0, n_steps + 1, record_every)
    failed = np.zeros(m, dtype=bool) if failed is None else failed
    return Trajectory(grid, dt, steps, us[steps], vs[steps], scalars, us[-1], vs[-1], failed,
                      np.where(failed, n_steps, -1))


def _integrate_reference(state0, params, spec1, spec2, cfg, rngs, noise, lyapunov, on_failure):
    grid = state0.grid
    n_steps = cfg.n_steps
    if n_steps == 0:
        raise ValueError("the smoothed-noise reference needs at least one step")
    if noise is not None:
        inc1, inc2 = (np.asarray(x, dtype=float) for x in noise)
    elif rngs is not None:
        scale = math.sqrt(cfg.dt)
        inc1, inc2 = (np.stack([r.normals(n_steps, spec.n_modes) for r in _as_rng_list(src)]) * scale
                      for src, spec in ((rngs[0], spec1), (rngs[1], spec2)))
    else:
        raise ValueError("either rngs or noise must be given")
    p1 = BrownianPath(spec1, grid, cfg.dt, inc1)
    p2 = BrownianPath(spec2, grid, cfg.dt, inc2)
    with np.errstate(all="ignore" if on_failure == "mask" else "warn", under="ignore"):
        _, us, vs, failed = integrate_wong_zakai(state0, params, p1, p2, cfg.dt, on_failure=on_failure)
        traj = trajectory_from_states(grid, cfg.dt, us, vs, record_every=cfg.record_every,
                                      lyapunov=lyapunov, failed=failed)
    return traj if state0.u.values.ndim == 2 else traj.path(0)


# ---------------------------------------------------------------------------
# smoothed-noise (Wong-Zakai) reference


def _wz_rhs(u, v, s1, s2, n, params: ModelParams):
    fu = drift_u_values(u, v, n, params.r_u, params.chi, 0.0) + u * s1
    fv = drift_v_values(u, v, n, params.r_v, params.alpha, params.beta) + v * s2
    return fu, fv


def _wz_midpoint(u, v, s1, s2, n, params, h):
    ku, kv = _wz_rhs(u, v, s1, s2, n, params)
    um, vm = u + 0.5 * h * ku, v + 0.5 * h * kv
    ku, kv = _wz_rhs(um, vm, s1, s2, n, params)
    return u + h * ku, v + h * kv


def wong_zakai_step(state: State, params: ModelParams, path1: BrownianPath, path2: BrownianPath,
                    dt_fine: float) -> State:
    """Explicit midpoint step of the random ODE driven by the paths' slopes.

    The system is the Stratonovich one (original ``alpha``, no ``gamma`` drift).
    Raises :class:`NumericalFailure` once ``|u|`` exceeds the stiffness guard.
    """
    grid = state.grid
    t_mid = state.t + 0.5 * dt_fine
    s1, s2 = path1.slope(t_mid), path2.slope(t_mid)
    u1, v1 = _wz_midpoint(state.u.values, state.v.values, s1, s2, grid.n_cells, params, dt_fine)
    if not np.all(np.isfinite(u1)) or np.max(np.abs(u1)) > WZ_BLOWUP:
        raise NumericalFailure(f"smoothed-noise solution blew up near t={state.t}", t=state.t)
    return State(state.t + dt_fine, Field(grid, u1), Field(grid, v1))


def stable_wz_substep(grid: GridSpec, params: ModelParams, safety: float = 0.5) -> float:
    """Largest explicit midpoint step kept inside the diffusion stability region."""
    h2 = grid.spacing**2
    return safety * h2 / (2.0 * max(params.r_u, params.r_v))


def integrate_wong_zakai(state0: State, params: ModelParams, path1: BrownianPath, path2: BrownianPath,
                         record_dt: float, *, max_substep: float | None = None,
                         on_failure: str = "raise"):
    """Integrate the smoothed-noise system over the paths' horizon.

    Substeps are equal, no longer than ``max_substep`` (default: diffusion
    stability bound) and divide both the interpolation mesh and ``record_dt``,
    so output may be taken inside a linear piece.  Returns
    ``(times, u, v, failed)`` with ``u``/``v`` of shape ``(n_rec, M, N+1)``.
    """
    grid = state0.grid
    n = grid.n_cells
    if abs(path1.dt_fine - path2.dt_fine) > 1e-15 or path1.n_fine != path2.n_fine:
        raise ValueError("the two driving paths must share a mesh")
    piece = path1.dt_fine
    base = min(piece, record_dt)
    ratio_p, ratio_r = piece / base, record_dt / base
    if abs(ratio_p - round(ratio_p)) > 1e-9 or abs(ratio_r - round(ratio_r)) > 1e-9:
        raise ValueError("record_dt and the path mesh must be multiples of one another")
    if max_substep is None:
        max_substep = stable_wz_substep(grid, params)
    per_base = max(1, int(math.ceil(base / max_substep - 1e-9)))
    h = base / per_base
    per_piece = int(round(ratio_p)) * per_base
    per_record = int(round(ratio_r)) * per_base
    total = path1.n_fine * per_piece
    u = np.array(state0.u.values, dtype=float, ndmin=2)
    v = np.array(state0.v.values, dtype=float, ndmin=2)
    slopes1 = coefficients_to_field(path1.increments / piece, path1.spec, grid)
    slopes2 = coefficients_to_field(path2.increments / piece, path2.spec, grid)
    if slopes1.ndim == 2:
        slopes1, slopes2 = slopes1[None], slopes2[None]
    failed = np.zeros(u.shape[0], dtype=bool)
    times, us, vs = [0.0], [u.copy()], [v.copy()]
    with np.errstate(all="ignore" if on_failure == "mask" else "warn", under="ignore"):
        for k in range(total):
            m = k // per_piece
            u, v = _wz_midpoint(u, v, slopes1[:, m], slopes2[:, m], n, params, h)
            if (k + 1) % per_piece == 0 or (k + 1) % per_record == 0:
                bad = ~np.all(np.isfinite(u), axis=-1) | (np.max(np.abs(u), axis=-1) > WZ_BLOWUP)
                if bad.any():
                    t = (k + 1) * h
                    if on_failure == "raise":
                        raise NumericalFailure(f"smoothed-noise solution blew up near t={t:.6g}",
                                               step=k + 1, t=t, paths=np.flatnonzero(bad).tolist())
                    failed |= bad
            if (k + 1) % per_record == 0:
                times.append((k + 1) // per_record * record_dt)
                us.append(u.copy())
                vs.append(v.copy())
    return np.array(times), np.stack(us), np.stack(vs), failed
