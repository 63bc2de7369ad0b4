"""Monte Carlo ensembles and convergence studies.

Paths are grouped into fixed batches by index, each batch is simulated as one
array computation (in a worker process when ``workers > 1``), and results are
collected back in path order.  Path ``i`` always draws from the streams
``path_streams(base_seed, i)``, so reports do not depend on the worker count.
"""

from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .conversion import CorrectionConvention, effective_params
from .diagnostics import (
    ConstraintInapplicable,
    LyapunovParams,
    MomentReport,
    moment_functionals,
    validate_constants,
    Z95,
)
from .dynamics import ModelParams, State
from .field_space import Field, GridSpec, trapezoid
from .integrator import SchemeConfig, integrate, integrate_wong_zakai, stable_wz_substep
from .truncation import TruncationController, draw_increments
from .wiener import BrownianPath, NoiseSpec, make_noise_spec, path_streams

EXPERIMENTS = ("moments", "strong_order", "wong_zakai", "truncation_events")


@dataclass(frozen=True)
class EnsembleConfig:
    n_paths: int
    base_seed: int = 0
    workers: int = 1
    experiment: str = "moments"
    batch_size: int = 32

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.base_seed < 2**64:
            raise ValueError("base_seed must be a 64-bit unsigned integer")
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")

    def batches(self) -> list[tuple[int, int]]:
        b = self.batch_size
        return [(s, min(s + b, self.n_paths)) for s in range(0, self.n_paths, b)]


@dataclass(frozen=True, eq=False)
class ModelSetup:
    """Everything a path needs besides its seed."""

    grid: GridSpec
    params: ModelParams
    spec1: NoiseSpec
    spec2: NoiseSpec
    scheme: SchemeConfig
    u0: np.ndarray
    v0: np.ndarray
    convention: CorrectionConvention = CorrectionConvention.HALF_GAMMA
    lyapunov: LyapunovParams | None = None

    def effective(self, convention=None):
        conv = self.convention if convention is None else CorrectionConvention.parse(convention)
        return effective_params(self.params, self.spec1, self.spec2, conv)

    def initial_state(self, rows: int | None = None) -> State:
        u, v = np.asarray(self.u0, dtype=float), np.asarray(self.v0, dtype=float)
        if rows is not None:
            u, v = np.tile(u, (rows, 1)), np.tile(v, (rows, 1))
        return State(0.0, Field(self.grid, u), Field(self.grid, v))

    def with_scheme(self, **changes) -> "ModelSetup":
        return replace(self, scheme=replace(self.scheme, **changes))


def scalar_reduction_setup(dt: float = 2.0**-8, t_end: float = 1.0, amplitude: float = 1.0,
                           u0: float = 1.0, n_cells: int = 4, scheme: str = "semi_implicit_em",
                           convention="half") -> ModelSetup:
    """Spatially constant data, a single constant noise mode, no chemotaxis, reaction or coupling.

    ``u`` then solves the scalar equation ``du = u o lambda_0 dB`` whose
    Stratonovich solution is ``u0 exp(lambda_0 B(t))``.
    """
    grid = GridSpec(n_cells)
    params = ModelParams(r_u=1.0, r_v=1.0, chi=0.0, alpha=0.0, beta=0.0)
    spec = make_noise_spec(delta=0.0, K=0, amplitude=amplitude)
    return ModelSetup(grid, params, spec, spec, SchemeConfig(dt, scheme, t_end),
                      np.full(grid.n_nodes, float(u0)), np.ones(grid.n_nodes),
                      CorrectionConvention.parse(convention))


@dataclass(eq=False)
class StudyResult:
    """Per-configuration statistics, fitted slopes and raw per-path records."""

    kind: str
    levels: list
    statistics: dict
    records: dict = field(default_factory=dict)
    slope: float | None = None
    slope_stderr: float | None = None
    flags: list = field(default_factory=list)
    verdict: str | None = None
    failures: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self, with_records: bool = False) -> dict:
        out = {
            "kind": self.kind,
            "levels": _jsonable(self.levels),
            "statistics": _jsonable(self.statistics),
            "slope": self.slope,
            "slope_stderr": self.slope_stderr,
            "flags": list(self.flags),
            "verdict": self.verdict,
            "n_failed": len(self.failures),
            "failed_paths": list(self.failures),
            "meta": _jsonable(self.meta),
        }
        if with_records:
            out["records"] = _jsonable(self.records)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _mean_hw(x: np.ndarray) -> dict:
    n = x.size
    mean = float(np.mean(x)) if n else math.nan
    sd = float(np.std(x, ddof=1)) if n > 1 else math.nan
    return {"mean": mean, "std": sd, "half_width": Z95 * sd / math.sqrt(n) if n > 1 else math.nan, "n": n}


# ---------------------------------------------------------------------------
# batch execution


def _map_batches(fn, cfg: EnsembleConfig, *args) -> list:
    jobs = [(fn, start, stop, args) for start, stop in cfg.batches()]
    if cfg.workers == 1 or len(jobs) == 1:
        return [_run_job(j) for j in jobs]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs)), mp_context=ctx) as pool:
        # map() yields in submission order, i.e. by path index
        return list(pool.map(_run_job, jobs))


def _run_job(job):
    fn, start, stop, args = job
    return fn(start, stop, *args)


def _streams(base_seed, start, stop):
    pairs = [path_streams(base_seed, i) for i in range(start, stop)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _lean(cfg: SchemeConfig) -> SchemeConfig:
    # only the initial snapshot is kept; per-step scalars carry the statistics
    return replace(cfg, record_every=max(cfg.n_steps, 1) + 1)


# ---------------------------------------------------------------------------
# moments


def _moments_batch(start, stop, setup: ModelSetup, base_seed, p):
    r1, r2 = _streams(base_seed, start, stop)
    traj = integrate(setup.initial_state(stop - start), setup.params, setup.effective(), setup.spec1, setup.spec2,
                     _lean(setup.scheme), (r1, r2), lyapunov=setup.lyapunov, on_failure="mask")
    rep = moment_functionals(traj, p, index_offset=start)
    sup_w = None
    if setup.lyapunov is not None:
        w = traj.scalars["W"]
        sup_w = {start + i: float(np.max(w[:, i])) for i in range(stop - start) if not traj.failed[i]}
    return rep, sup_w


def run_moments(cfg: EnsembleConfig, setup: ModelSetup, p: float = 1.0) -> MomentReport:
    """Ensemble means, ``p``-th moments and 95% half-widths of the three functionals.

    Failed paths are listed in ``failures`` and excluded from the statistics.
    With Lyapunov parameters the report meta also carries ``sup_t W`` statistics
    and the constant-constraint verdict.
    """
    results = _map_batches(_moments_batch, cfg, setup, cfg.base_seed, p)
    report = MomentReport(p)
    sup_w = {}
    for rep, sw in results:
        report = report.merge(rep)
        if sw:
            sup_w.update(sw)
    meta = {"n_requested": cfg.n_paths}
    if setup.lyapunov is not None:
        vals = np.array([sup_w[i] for i in sorted(sup_w)])
        # W is undefined on paths that went below -tol_pos; they are counted, not averaged
        meta["sup_W"] = _mean_hw(vals[np.isfinite(vals)]) | {"n_nan": int(np.sum(~np.isfinite(vals)))}
        try:
            meta["constants"] = validate_constants(setup.lyapunov, setup.params).to_dict()
        except ConstraintInapplicable as exc:
            meta["constants"] = {"passed": None, "reason": str(exc)}
    return MomentReport(p, report.records, report.failures, meta)


# ---------------------------------------------------------------------------
# strong order on the scalar reduction


def _check_scalar_reduction(setup: ModelSetup):
    u0 = np.asarray(setup.u0, dtype=float)
    if np.ptp(u0) != 0.0 or setup.spec1.mode_cutoff != 0 or setup.params.chi != 0.0:
        raise ValueError("strong-order studies need constant u0, K=0 noise and chi=0 (scalar reduction)")


def _strong_batch(start, stop, setup: ModelSetup, base_seed, dts, conventions):
    r1, r2 = _streams(base_seed, start, stop)
    dt_f = min(dts)
    t_end = setup.scheme.t_end
    n_f = int(round(t_end / dt_f))
    inc1 = draw_increments(setup.spec1, dt_f, n_f, r1)
    inc2 = draw_increments(setup.spec2, dt_f, n_f, r2)
    p1 = BrownianPath(setup.spec1, setup.grid, dt_f, inc1)
    p2 = BrownianPath(setup.spec2, setup.grid, dt_f, inc2)
    lam0 = setup.spec1.lam(0)
    u0 = float(setup.u0[0])
    exact = u0 * np.exp(lam0 * p1.knot_values()[:, -1, 0])
    errs = {}
    state = setup.initial_state(stop - start)
    for conv in conventions:
        eff = setup.effective(conv)
        for dt in dts:
            f = int(round(dt / dt_f))
            cfg = SchemeConfig(dt, setup.scheme.scheme, t_end, n_f + 1)
            traj = integrate(state, setup.params, eff, setup.spec1, setup.spec2, cfg,
                             noise=(p1.coarse_increments(f), p2.coarse_increments(f)), on_failure="mask")
            err = np.max(np.abs(traj.final_u - exact[:, None]), axis=-1)
            err[traj.failed] = np.nan
            errs[(conv, dt)] = err
    return errs


def run_strong_order(cfg: EnsembleConfig, setup: ModelSetup, dts, conventions=None) -> StudyResult:
    """Endpoint strong error ``E|u_dt(T) - u0 exp(lambda_0 B(T))|`` on a coupled dt ladder.

    All levels reuse the Brownian increments of the finest level.  The slope is
    a least-squares fit of ``log error`` against ``log dt`` for the first
    convention; ``degenerate`` flags errors at the rounding floor and
    ``plateau`` a slope below 0.2.
    """
    _check_scalar_reduction(setup)
    dts = sorted((float(d) for d in dts), reverse=True)
    if len(dts) < 3:
        raise ValueError("need at least 3 step sizes")
    dt_f = dts[-1]
    for d in dts:
        f = d / dt_f
        if abs(f - round(f)) > 1e-9:
            raise ValueError("every dt must be an integer multiple of the finest one")
    if conventions is None:
        conventions = [setup.convention.value]
    conventions = [CorrectionConvention.parse(c).value for c in conventions]
    parts = _map_batches(_strong_batch, cfg, setup, cfg.base_seed, dts, conventions)
    records = {c: {dt: np.concatenate([p[(c, dt)] for p in parts]) for dt in dts} for c in conventions}
    failed = sorted({i for c in conventions for dt in dts for i in np.flatnonzero(~np.isfinite(records[c][dt]))})
    ok = np.ones(cfg.n_paths, dtype=bool)
    ok[failed] = False
    statistics, slopes = {}, {}
    for c in conventions:
        st = [_mean_hw(records[c][dt][ok]) for dt in dts]
        means = np.array([s["mean"] for s in st])
        statistics[c] = {"error": st, "ratio_finest_to_coarsest": float(means[-1] / means[0]) if means[0] > 0 else None}
        if np.all(means > 0):
            fit = stats.linregress(np.log(dts), np.log(means))
            slopes[c] = (float(fit.slope), float(fit.stderr))
        else:
            slopes[c] = (math.nan, math.nan)
        statistics[c]["slope"], statistics[c]["slope_stderr"] = slopes[c]
    main = conventions[0]
    flags = []
    means = np.array([s["mean"] for s in statistics[main]["error"]])
    if np.max(means) < 1e-12:
        flags.append("degenerate")
    elif slopes[main][0] < 0.2:
        flags.append("plateau")
    return StudyResult("strong_order", dts, statistics,
                       records={c: {str(dt): records[c][dt] for dt in dts} for c in conventions},
                       slope=slopes[main][0], slope_stderr=slopes[main][1], flags=flags, failures=failed,
                       meta={"n_paths": cfg.n_paths, "base_seed": cfg.base_seed})


# ---------------------------------------------------------------------------
# Wong-Zakai arbitration


def _l2_sup(a, b, n):
    d = a - b
    return np.max(np.sqrt(trapezoid(d * d, n)), axis=0)


def _wz_batch(start, stop, setup: ModelSetup, base_seed, meshes, dt_ito, substeps):
    r1, r2 = _streams(base_seed, start, stop)
    t_end = setup.scheme.t_end
    n_f = int(round(t_end / dt_ito))
    n = setup.grid.n_cells
    p1 = BrownianPath(setup.spec1, setup.grid, dt_ito, draw_increments(setup.spec1, dt_ito, n_f, r1))
    p2 = BrownianPath(setup.spec2, setup.grid, dt_ito, draw_increments(setup.spec2, dt_ito, n_f, r2))
    state = setup.initial_state(stop - start)
    ito = {}
    failed = np.zeros(stop - start, dtype=bool)
    for conv in ("half", "full"):
        cfg = SchemeConfig(dt_ito, setup.scheme.scheme, t_end, 1)
        traj = integrate(state, setup.params, setup.effective(conv), setup.spec1, setup.spec2, cfg,
                         noise=(p1.increments, p2.increments), on_failure="mask")
        ito[conv] = traj.u
        failed |= traj.failed
    gaps = {"half": [], "full": []}
    stable = stable_wz_substep(setup.grid, setup.params)
    for h in meshes:
        f = int(round(h / dt_ito))
        q1, q2 = p1.coarsened(f), p2.coarsened(f)
        _, u_wz, _, bad = integrate_wong_zakai(state, setup.params, q1, q2, dt_ito,
                                               max_substep=min(stable, h / substeps), on_failure="mask")
        failed |= bad
        for conv in ("half", "full"):
            gaps[conv].append(_l2_sup(u_wz, ito[conv], n))
    return {k: np.stack(v) for k, v in gaps.items()}, failed


def run_wong_zakai(cfg: EnsembleConfig, setup: ModelSetup, meshes, dt_ito: float | None = None,
                   substeps: int = 8) -> StudyResult:
    """Mean sup-in-time L2 gap between the smoothed-noise solution and both Ito schemes.

    ``meshes`` are the interpolation meshes of the Brownian path (coarse to fine);
    the Ito schemes run at ``dt_ito`` (default: the setup's dt) on the same path.
    Verdict ``half_gamma`` means the gap to the half-correction scheme decreases
    monotonically while the gap to the full-correction scheme has levelled off:
    its last refinement keeps at least three quarters of the previous value.
    """
    meshes = sorted((float(h) for h in meshes), reverse=True)
    if len(meshes) < 3:
        raise ValueError("need a ladder of at least 3 meshes")
    dt_ito = setup.scheme.dt if dt_ito is None else float(dt_ito)
    for h in meshes:
        f = h / dt_ito
        if f < 1 - 1e-9 or abs(f - round(f)) > 1e-9:
            raise ValueError("every mesh must be an integer multiple of the Ito step")
    parts = _map_batches(_wz_batch, cfg, setup, cfg.base_seed, meshes, dt_ito, substeps)
    gaps = {k: np.concatenate([p[0][k] for p in parts], axis=1) for k in ("half", "full")}
    failed_mask = np.concatenate([p[1] for p in parts])
    ok = ~failed_mask
    statistics = {f"gap_{k}": [_mean_hw(gaps[k][j][ok]) for j in range(len(meshes))] for k in gaps}
    mh = np.array([s["mean"] for s in statistics["gap_half"]])
    mf = np.array([s["mean"] for s in statistics["gap_full"]])
    half_dec = bool(np.all(np.diff(mh) < 0))
    full_dec = bool(np.all(np.diff(mf) < 0)) and mf[-1] < 0.75 * mf[-2]
    if half_dec and not full_dec:
        verdict = "half_gamma"
    elif full_dec and not half_dec:
        verdict = "full_gamma"
    else:
        verdict = "inconclusive"
    statistics["half_decreasing"] = half_dec
    statistics["full_decreasing"] = full_dec
    return StudyResult("wong_zakai", meshes, statistics,
                       records={f"gap_{k}": gaps[k] for k in gaps}, verdict=verdict,
                       failures=np.flatnonzero(failed_mask).tolist(),
                       meta={"dt_ito": dt_ito, "substeps": substeps, "n_paths": cfg.n_paths,
                             "base_seed": cfg.base_seed})


# ---------------------------------------------------------------------------
# truncation events


def _events_batch(start, stop, setup: ModelSetup, base_seed, level_max, multiplier):
    r1, r2 = _streams(base_seed, start, stop)
    sc = setup.scheme
    ctrl = TruncationController(level_max, multiplier, sc.dt, setup.grid.n_cells, sc.t_end, path_offset=start)
    traj = integrate(setup.initial_state(stop - start), setup.params, setup.effective(), setup.spec1,
                     setup.spec2, _lean(sc), (r1, r2), hooks=[ctrl], on_failure="mask")
    return ctrl.finalize(), traj.failed


def run_truncation_events(cfg: EnsembleConfig, setup: ModelSetup, level_max: int,
                          multiplier: float = 1.0) -> StudyResult:
    """Frequency of ``{tau_bar_m >= T}`` for ``m = 1..level_max`` along the level chain.

    Also reports ``m * P(tau_bar_m < T)``, the empirical counterpart of a
    ``C/m`` bound, and whether it trends upward (least-squares slope more than
    two standard errors above zero).
    """
    if level_max < 2:
        raise ValueError("level_max must be >= 2")
    parts = _map_batches(_events_batch, cfg, setup, cfg.base_seed, level_max, multiplier)
    events = [ev for p in parts for ev in p[0]]
    failed_mask = np.concatenate([p[1] for p in parts])
    ok = [ev for ev, bad in zip(events, failed_mask) if not bad]
    m = np.arange(1, level_max + 1)
    reached = np.array([[e[lvl - 1].reached_T for lvl in m] for e in ok], dtype=float).reshape(len(ok), level_max)
    freq = reached.mean(axis=0) if len(ok) else np.full(level_max, math.nan)
    early = 1.0 - freq
    scaled = m * early
    monotone = bool(np.all(np.diff(freq) >= 0))
    if np.ptp(scaled) == 0:
        trend, trend_se = 0.0, 0.0
    else:
        fit = stats.linregress(m, scaled)
        trend, trend_se = float(fit.slope), float(fit.stderr)
    upward = trend - 2.0 * trend_se > 0
    statistics = {
        "freq_reached_T": freq,
        "p_early_stop": early,
        "m_times_p_early_stop": scaled,
        "freq_monotone": monotone,
        "trend_slope": trend,
        "trend_stderr": trend_se,
        "upward_trend": bool(upward),
    }
    flags = [] if monotone else ["frequency_not_monotone"]
    if upward:
        flags.append("upward_trend")
    return StudyResult("truncation_events", m.tolist(), statistics, records={"events": events}, flags=flags,
                       failures=np.flatnonzero(failed_mask).tolist(),
                       meta={"level_max": level_max, "threshold_multiplier": multiplier,
                             "n_paths": cfg.n_paths, "base_seed": cfg.base_seed})
