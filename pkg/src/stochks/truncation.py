"""Cut-off truncation, stopping times and the concatenated level construction.

Level ``n`` runs the Keller-Segel system with its chemotaxis term damped by
``psi_n(h1) psi_n(h2) psi_n(h3)``, where ``h1 = sup |u|_L1``, ``h2 = sup |grad v|_L2``
and ``h3 = int |grad v|_H1^2`` are accumulated since the level started.  The
level stops at the first step where ``h1``, ``h2^2`` or ``h3`` reaches the
threshold; the process then continues as the linear (heat) system until ``T``
while level ``n+1`` restarts from the stopping state with fresh accumulators.
Thresholds and cut-off scale are ``n * multiplier``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import functional_rates
from .dynamics import State, drift_u_values
from .field_space import Field
from .integrator import (
    SchemeConfig,
    StepControl,
    Trajectory,
    _step,
    integrate,
)
from .wiener import RngStream

TRIGGER_KINDS = ("h1", "h2", "h3")
EVENT_COLUMNS = ("level", "tau_star", "trigger_kind", "tau_bar", "reached_T")


@dataclass(frozen=True)
class CutoffSpec:
    level: int
    multiplier: float = 1.0

    def __post_init__(self):
        if self.level < 1 or int(self.level) != self.level:
            raise ValueError("level must be a positive integer")
        if not self.multiplier > 0:
            raise ValueError("threshold multiplier must be positive")

    @property
    def scale(self) -> float:
        return self.level * self.multiplier


def _q(s):
    with np.errstate(divide="ignore", under="ignore"):
        return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)


def bump(x):
    """Smooth ``psi``: 1 on ``|x| <= 1``, 0 on ``|x| >= 2``, ``q(2-|x|)/(q(2-|x|)+q(|x|-1))`` between."""
    y = np.abs(np.asarray(x, dtype=float))
    a, b = _q(2.0 - y), _q(y - 1.0)
    mid = (y > 1.0) & (y < 2.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(y <= 1.0, 1.0, np.where(mid, a / np.where(mid, a + b, 1.0), 0.0))
    return float(out) if out.ndim == 0 else out


def smooth_cutoff(spec: CutoffSpec, x):
    """``psi_n(x) = psi(x / (n * multiplier))``."""
    return bump(np.asarray(x, dtype=float) / spec.scale)


@dataclass(frozen=True)
class RunningFunctionals:
    h1: object = 0.0
    h2: object = 0.0
    h3: object = 0.0


def initial_functionals(state: State) -> RunningFunctionals:
    """Accumulators at the start of a level: sups over the single starting state, zero integral."""
    l1, gv, _ = functional_rates(state.u.values, state.v.values, state.grid.n_cells)
    return RunningFunctionals(l1, gv, np.zeros_like(np.asarray(l1)) + 0.0)


def update_functionals(rf: RunningFunctionals, state: State, dt: float) -> RunningFunctionals:
    """Fold in the state at the end of a step of length ``dt``.

    ``h3`` grows by ``dt (|grad v|^2 + |lap v|^2)`` evaluated at that state.
    """
    l1, gv, rate = functional_rates(state.u.values, state.v.values, state.grid.n_cells)
    return RunningFunctionals(np.maximum(rf.h1, l1), np.maximum(rf.h2, gv), rf.h3 + dt * rate)


def cutoff_factor(rf: RunningFunctionals, spec: CutoffSpec):
    """``Psi^1 Psi^2 Psi^3`` in ``[0, 1]``."""
    return smooth_cutoff(spec, rf.h1) * smooth_cutoff(spec, rf.h2) * smooth_cutoff(spec, rf.h3)


def truncated_drift_u(state: State, params, gamma_u: float, rf: RunningFunctionals, spec: CutoffSpec) -> Field:
    """``r_u lap u - chi Psi div(u grad v) + gamma_u u``."""
    chi = params.chi * np.asarray(cutoff_factor(rf, spec))
    if chi.ndim:
        chi = chi[..., None]
    vals = drift_u_values(state.u.values, state.v.values, state.grid.n_cells, params.r_u, chi, gamma_u)
    return Field(state.grid, vals)


@dataclass(frozen=True)
class Trigger:
    kind: str
    value: float
    threshold: float
    t: float | None = None


def _trigger_codes(h1, h2, h3, thr):
    # 0 = none, 1/2/3 = h1/h2/h3 with that precedence
    h1, h2, h3, thr = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (h1, h2, h3, thr)))
    return np.where(h1 >= thr, 1, np.where(h2 * h2 >= thr, 2, np.where(h3 >= thr, 3, 0)))


def check_stopping(rf: RunningFunctionals, level: int, t: float | None = None,
                   multiplier: float = 1.0) -> Trigger | None:
    """First of ``h1 >= n``, ``h2^2 >= n``, ``h3 >= n`` that holds (threshold ``n * multiplier``)."""
    thr = CutoffSpec(level, multiplier).scale
    code = int(_trigger_codes(rf.h1, rf.h2, rf.h3, thr))
    if code == 0:
        return None
    value = (float(rf.h1), float(rf.h2) ** 2, float(rf.h3))[code - 1]
    return Trigger(TRIGGER_KINDS[code - 1], value, thr, t)


def heat_continuation_step(state: State, params, eff, dW1, dW2, dt: float,
                           scheme: str = "semi_implicit_em") -> State:
    """One step of the linear system: chemotaxis and the ``beta u`` source are switched off."""
    return _step(scheme, state, params, eff, dW1, dW2, dt, 0.0, 0.0)


# ---------------------------------------------------------------------------
# batched controller


@dataclass(frozen=True)
class LevelEvent:
    path: int
    level: int
    tau_star: float
    trigger_kind: str
    tau_bar: float
    reached_T: bool
    step: int = -1  # global step of the trigger (restart step of the next level)


class TruncationController:
    """Integrator hook realising the level chain for every batch row.

    Rows at level ``n <= level_max`` run truncated Keller-Segel; a row whose
    ``level_max`` has fired continues in the heat regime.  Restart states are
    kept so that the per-level heat branches can be replayed.
    """

    def __init__(self, level_max: int, multiplier: float, dt: float, n_cells: int, t_end: float,
                 path_offset: int = 0, keep_restarts: bool = False):
        if level_max < 1:
            raise ValueError("level_max must be >= 1")
        CutoffSpec(1, multiplier)
        self.level_max = int(level_max)
        self.multiplier = float(multiplier)
        self.dt = dt
        self.n = n_cells
        self.t_end = t_end
        self.path_offset = path_offset
        self.keep_restarts = keep_restarts

    def _control(self):
        heat = self.level > self.level_max
        scale = np.minimum(self.level, self.level_max) * self.multiplier
        psi = bump(self.h1 / scale) * bump(self.h2 / scale) * bump(self.h3 / scale)
        chem = np.where(heat, 0.0, psi)
        return StepControl(chem, np.where(heat, 0.0, 1.0), heat.astype(np.int8),
                           np.minimum(self.level, self.level_max))

    def _fire(self, step, t, u, v, l1, gv):
        while True:
            active = self.level <= self.level_max
            codes = np.where(active, _trigger_codes(self.h1, self.h2, self.h3, self.level * self.multiplier), 0)
            rows = np.flatnonzero(codes)
            if rows.size == 0:
                return
            for i in rows:
                tau_star = t - self.tau_bar[i]
                self.tau_bar[i] = t
                self.events[i].append(LevelEvent(self.path_offset + int(i), int(self.level[i]), float(tau_star),
                                                 TRIGGER_KINDS[codes[i] - 1], float(t),
                                                 bool(t >= self.t_end * (1 - 1e-12)), int(step)))
                if self.keep_restarts:
                    self.restarts[i][int(self.level[i])] = (int(step), u[i].copy(), v[i].copy())
            self.level[rows] += 1
            self.h1[rows] = l1[rows]
            self.h2[rows] = gv[rows]
            self.h3[rows] = 0.0

    def start(self, t, u, v):
        m = u.shape[0]
        self.start_step = int(round(t / self.dt))
        self.level = np.ones(m, dtype=np.int64)
        self.tau_bar = np.full(m, float(t))
        self.events = [[] for _ in range(m)]
        self.restarts = [{} for _ in range(m)]
        l1, gv, _ = functional_rates(u, v, self.n)
        self.h1, self.h2, self.h3 = l1.copy(), gv.copy(), np.zeros(m)
        self._fire(self.start_step, t, u, v, l1, gv)
        return self._control()

    def after_step(self, step, t, u, v):
        l1, gv, rate = functional_rates(u, v, self.n)
        self.h1 = np.maximum(self.h1, l1)
        self.h2 = np.maximum(self.h2, gv)
        self.h3 = self.h3 + self.dt * rate
        self._fire(step, t, u, v, l1, gv)
        return self._control()

    def finalize(self) -> list:
        """Per-row event lists covering levels ``1..level_max``."""
        out = []
        for i, ev in enumerate(self.events):
            ev = list(ev)
            tau_bar = self.tau_bar[i]
            first = True
            for lvl in range(len(ev) + 1, self.level_max + 1):
                tau_star = self.t_end - tau_bar if first else 0.0
                first = False
                tau_bar = max(tau_bar, self.t_end)
                ev.append(LevelEvent(self.path_offset + i, lvl, float(tau_star), "none", float(tau_bar), True))
            out.append(ev)
        return out


class HeatRegime:
    """Hook pinning every row to the heat continuation at a fixed level label."""

    def __init__(self, level: int):
        self.level = level

    def start(self, t, u, v):
        return StepControl(0.0, 0.0, 1, self.level)


# ---------------------------------------------------------------------------
# concatenated runs


def draw_increments(spec, dt: float, n_steps: int, rngs) -> np.ndarray:
    """Brownian coefficient increments ``(M, n_steps, 2K+1)`` drawn from one stream per row."""
    if isinstance(rngs, RngStream):
        rngs = [rngs]
    return np.stack([r.normals(n_steps, spec.n_modes) for r in rngs]) * np.sqrt(dt)


@dataclass(eq=False)
class ConcatenatedRun:
    """Level chain of one or more paths.

    ``chain`` is the trajectory of ``(u_bar_{level_max}, v_bar_{level_max})``; the
    other levels are produced on demand by :meth:`level_trajectory`.
    """

    chain: Trajectory
    events: list  # per path, list of LevelEvent ordered by level
    level_max: int
    _branches: dict = field(default_factory=dict, repr=False)
    _branch_runner: object = field(default=None, repr=False)

    def tau_bar(self, level: int) -> np.ndarray:
        return np.array([ev[level - 1].tau_bar for ev in self.events])

    def reached_T(self, level: int) -> np.ndarray:
        return np.array([ev[level - 1].reached_T for ev in self.events])

    def level_trajectory(self, level: int, path: int = 0) -> Trajectory:
        """``(u_bar_n, v_bar_n)`` for one path: the chain up to ``tau_bar_n``, then heat continuation."""
        if not 1 <= level <= self.level_max:
            raise ValueError("level outside 1..level_max")
        chain = self.chain.path(path) if self.chain.batched else self.chain
        key = (level, path)
        if key in self._branches:
            return self._branches[key]
        ev = self.events[path][level - 1]
        if level == self.level_max or ev.trigger_kind == "none":
            out = chain
        else:
            out = _splice(chain, self._branch_runner(level, path, ev.step))
        self._branches[key] = out
        return out


def _splice(chain: Trajectory, branch: Trajectory) -> Trajectory:
    s = branch.start_step - chain.start_step
    keep = chain.snapshot_steps <= branch.start_step
    bkeep = branch.snapshot_steps > branch.start_step
    sc = {k: np.concatenate([chain.scalars[k][:s + 1], branch.scalars[k][1:]]) for k in chain.scalars}
    return Trajectory(chain.grid, chain.dt,
                      np.concatenate([chain.snapshot_steps[keep], branch.snapshot_steps[bkeep]]),
                      np.concatenate([chain.u[keep], branch.u[bkeep]]),
                      np.concatenate([chain.v[keep], branch.v[bkeep]]),
                      sc, branch.final_u, branch.final_v, branch.failed, branch.failure_step, chain.start_step)


def run_concatenated(level_max: int, state0: State, params, eff, spec1, spec2, cfg: SchemeConfig,
                     rngs=None, *, noise=None, multiplier: float = 1.0, lyapunov=None,
                     on_failure: str = "raise", path_offset: int = 0) -> ConcatenatedRun:
    """Run the level chain ``1..level_max`` and keep what is needed to rebuild every ``u_bar_n``.

    Noise is drawn once per path (``rngs`` as in :func:`integrate`, or pre-drawn
    ``noise``) and replayed for the heat branches, so all levels share one
    Brownian path.
    """
    n_steps = cfg.n_steps
    batched = state0.u.values.ndim == 2
    if noise is None:
        if rngs is None:
            raise ValueError("either rngs or noise must be given")
        noise = (draw_increments(spec1, cfg.dt, n_steps, rngs[0]),
                 draw_increments(spec2, cfg.dt, n_steps, rngs[1]))
    inc1, inc2 = (np.asarray(a, dtype=float) for a in noise)
    if inc1.ndim == 2:
        inc1, inc2 = inc1[None], inc2[None]
    ctrl = TruncationController(level_max, multiplier, cfg.dt, state0.grid.n_cells, cfg.t_end,
                                path_offset, keep_restarts=True)
    try:
        chain = integrate(state0, params, eff, spec1, spec2, cfg, noise=(inc1, inc2), hooks=[ctrl],
                          lyapunov=lyapunov, on_failure=on_failure)
    except Exception as exc:
        if hasattr(exc, "add_note"):
            exc.add_note(f"while running the truncation chain (levels 1..{level_max})")
        raise
    run = ConcatenatedRun(chain, ctrl.finalize(), level_max)

    def branch(level, path, step):
        _, u_s, v_s = ctrl.restarts[path][level]
        chain_p = chain.path(path) if chain.batched else chain
        h3 = chain_p.scalars["gradv_h1_running_integral"][step]
        sub = SchemeConfig(cfg.dt, cfg.scheme, (n_steps - step) * cfg.dt, cfg.record_every)
        st = State(step * cfg.dt, Field(state0.grid, u_s), Field(state0.grid, v_s))
        try:
            return integrate(st, params, eff, spec1, spec2, sub,
                             noise=(inc1[path:path + 1, step:][0], inc2[path:path + 1, step:][0]),
                             hooks=[HeatRegime(level)], lyapunov=lyapunov, on_failure=on_failure,
                             start_step=step, running_integral0=h3)
        except Exception as exc:
            if hasattr(exc, "add_note"):
                exc.add_note(f"while running the heat continuation of level {level}")
            raise

    run._branch_runner = branch
    if not batched:
        run.events = run.events[:1]
    return run


def write_event_log(path, events, with_path: bool = False) -> None:
    """Per-level CSV; ``events`` is one path's list (or a list of lists with ``with_path``)."""
    rows = [e for ev in events for e in ev] if with_path else list(events)
    cols = (("path",) if with_path else ()) + EVENT_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in rows:
            rec = [e.level, f"{e.tau_star:.17g}", e.trigger_kind, f"{e.tau_bar:.17g}", str(e.reached_T).lower()]
            w.writerow(([e.path] if with_path else []) + rec)
