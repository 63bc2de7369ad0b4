import math

import numpy as np
import numpy.testing as npt
import pytest

from stochks.conversion import effective_params
from stochks.dynamics import ModelParams, State
from stochks.field_space import Field, GridSpec, trapezoid
from stochks.integrator import (
    SCALAR_COLUMNS,
    NumericalFailure,
    SchemeConfig,
    integrate,
    integrate_wong_zakai,
    step_exponential,
    step_semi_implicit,
    wong_zakai_step,
    write_trajectory_csv,
)
from stochks.wiener import RngStream, make_noise_spec, path_streams, piecewise_linear_path

ZERO = make_noise_spec(1.5, 0, 0.0)
SCHEMES = ("semi_implicit_em", "exponential_em")


def run(s0, mp, scheme, dt, t_end, spec1=ZERO, spec2=ZERO, seed=0, conv="half", **kw):
    eff = effective_params(mp, spec1, spec2, conv)
    return integrate(s0, mp, eff, spec1, spec2, SchemeConfig(dt, scheme, t_end, kw.pop("record_every", 1)),
                     path_streams(seed, 0), **kw)


def cos_state(n, u=lambda x: 1 + 0.5 * np.cos(np.pi * x), v=lambda x: 0 * x):
    g = GridSpec(n)
    return State.from_arrays(g, 0.0, u(g.nodes), v(g.nodes))


def test_scheme_config_validation():
    with pytest.raises(ValueError):
        SchemeConfig(0.0)
    with pytest.raises(ValueError):
        SchemeConfig(0.1, "milstein")
    with pytest.raises(ValueError):
        SchemeConfig(0.3, t_end=0.1)
    with pytest.raises(ValueError):
        SchemeConfig(0.3, t_end=1.0).n_steps
    assert SchemeConfig(0.1, t_end=1.0).n_steps == 10


@pytest.mark.parametrize("scheme", SCHEMES)
def test_steady_state_is_fixed(scheme):
    mp = ModelParams(1.0, 1.0, 1.0, 2.0, 1.0)
    m = 1.5
    s0 = cos_state(32, lambda x: m + 0 * x, lambda x: mp.beta * m / mp.alpha + 0 * x)
    tr = run(s0, mp, scheme, 0.01, 1.0)
    npt.assert_allclose(tr.final_u, m, atol=1e-12)
    npt.assert_allclose(tr.final_v, mp.beta * m / mp.alpha, atol=1e-12)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_zero_noise_mass_conservation(scheme):
    tr = run(cos_state(64), ModelParams(1, 1, 1, 1, 1), scheme, 1e-3, 0.2)
    npt.assert_allclose(tr.scalars["mass_u"], 1.0, rtol=1e-12)


def test_exponential_pure_diffusion_exact():
    mp = ModelParams(0.8, 1, 0.0, 0, 0)
    s0 = cos_state(32, lambda x: np.cos(np.pi * x))
    tr = run(s0, mp, "exponential_em", 0.05, 0.5)
    x = s0.grid.nodes
    npt.assert_allclose(tr.final_u, np.exp(-0.8 * np.pi**2 * 0.5) * np.cos(np.pi * x), atol=1e-9)


def test_constant_data_v_closed_form():
    mp = ModelParams(1, 1, 1, 1, 1)
    s0 = cos_state(16, lambda x: 2 + 0 * x)
    tr = run(s0, mp, "exponential_em", 1e-3, 1.0)
    assert abs(tr.final_v[0] - 2 * (1 - math.exp(-1))) < 1e-12
    # backward Euler in the production term: first order
    errs = []
    for dt in (0.01, 0.005):
        errs.append(abs(run(s0, mp, "semi_implicit_em", dt, 1.0).final_v[0] - 2 * (1 - math.exp(-1))))
    assert 1.9 < errs[0] / errs[1] < 2.1


def test_single_step_schemes_agree_to_second_order():
    mp = ModelParams(1, 1, 1, 1, 1)
    g = GridSpec(512)
    x = g.nodes
    s0 = State.from_arrays(g, 0.0, 1 + 0.5 * np.cos(np.pi * x), 0.5 + 0.5 * np.cos(np.pi * x))
    eff = effective_params(mp, ZERO, ZERO)
    diffs = []
    for dt in (2e-3, 1e-3, 5e-4):
        a = step_semi_implicit(s0, mp, eff, None, None, dt)
        b = step_exponential(s0, mp, eff, None, None, dt)
        diffs.append(np.max(np.abs(a.u.values - b.u.values)))
    orders = np.log2(np.array(diffs[:-1]) / diffs[1:])
    assert np.all((orders > 1.8) & (orders < 2.2))


def test_zero_noise_cross_scheme_disagreement_first_order():
    mp = ModelParams(1, 1, 1, 1, 1)
    s0 = cos_state(256, v=lambda x: 0.5 + 0.5 * np.cos(np.pi * x))
    diffs = []
    for dt in (0.01, 0.005, 0.0025):
        a = run(s0, mp, "semi_implicit_em", dt, 0.2, record_every=1000)
        b = run(s0, mp, "exponential_em", dt, 0.2, record_every=1000)
        diffs.append(np.max(np.abs(a.final_u - b.final_u)))
    # approaches one from below; the spatial floor is O(h^2) and negligible here
    assert np.log2(diffs[-2] / diffs[-1]) > 0.95


def test_step_accepts_increment_fields():
    mp = ModelParams(1, 1, 1, 1, 1)
    s0 = cos_state(16)
    eff = effective_params(mp, ZERO, ZERO)
    dw = Field.constant(s0.grid, 0.1)
    a = step_semi_implicit(s0, mp, eff, dw, dw, 0.01)
    b = step_semi_implicit(s0, mp, eff, np.full(17, 0.1), np.full(17, 0.1), 0.01)
    assert np.array_equal(a.u.values, b.u.values)
    assert a.t == pytest.approx(0.01)
    with pytest.raises(ValueError):
        step_exponential(s0, mp, eff, None, None, 0.0)


def test_zero_steps_returns_initial_state():
    s0 = cos_state(8)
    tr = run(s0, ModelParams(1, 1, 1, 1, 1), "semi_implicit_em", 0.1, 0.0)
    assert tr.n_steps == 0
    assert len(tr.states) == 1
    assert np.array_equal(tr.final_u, s0.u.values)


def test_snapshot_count():
    tr = run(cos_state(8), ModelParams(1, 1, 1, 1, 1), "semi_implicit_em", 0.01, 1.0, record_every=10)
    assert len(tr.snapshot_steps) == 11
    npt.assert_allclose(tr.times, np.arange(11) / 10)
    tr = run(cos_state(8), ModelParams(1, 1, 1, 1, 1), "semi_implicit_em", 0.01, 0.25, record_every=10)
    assert list(tr.snapshot_steps) == [0, 10, 20]
    assert len(tr.scalars["t"]) == 26


@pytest.mark.parametrize("scheme", SCHEMES)
def test_identical_seeds_identical_trajectories(scheme):
    spec = make_noise_spec(1.5, 8, 0.5)
    mp = ModelParams(1, 1, 1, 1, 1)
    a = run(cos_state(16), mp, scheme, 0.01, 0.5, spec, spec, seed=7)
    b = run(cos_state(16), mp, scheme, 0.01, 0.5, spec, spec, seed=7)
    c = run(cos_state(16), mp, scheme, 0.01, 0.5, spec, spec, seed=8)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.scalars["l2_u"], b.scalars["l2_u"])
    assert not np.array_equal(a.final_u, c.final_u)


def test_batched_rows_match_single_runs():
    spec = make_noise_spec(2.5, 4, 0.5)
    mp = ModelParams(1, 1, 1, 1, 1)
    eff = effective_params(mp, spec, spec)
    s1 = cos_state(16)
    rows = State.from_arrays(s1.grid, 0.0, np.tile(s1.u.values, (3, 1)), np.tile(s1.v.values, (3, 1)))
    cfg = SchemeConfig(0.01, "semi_implicit_em", 0.3, 5)
    streams = [path_streams(3, i) for i in range(3)]
    batch = integrate(rows, mp, eff, spec, spec, cfg, ([s[0] for s in streams], [s[1] for s in streams]))
    for i in range(3):
        single = integrate(s1, mp, eff, spec, spec, cfg, path_streams(3, i))
        npt.assert_allclose(batch.path(i).final_u, single.final_u, rtol=1e-13)


def test_rng_and_predrawn_noise_agree():
    spec = make_noise_spec(1.5, 3, 0.5)
    mp = ModelParams(1, 1, 1, 1, 1)
    eff = effective_params(mp, spec, spec)
    cfg = SchemeConfig(0.02, "exponential_em", 0.4)
    a = integrate(cos_state(16), mp, eff, spec, spec, cfg, path_streams(1, 0))
    r1, r2 = path_streams(1, 0)
    noise = (r1.normals(20, spec.n_modes) * math.sqrt(0.02), r2.normals(20, spec.n_modes) * math.sqrt(0.02))
    b = integrate(cos_state(16), mp, eff, spec, spec, cfg, noise=noise)
    assert np.array_equal(a.final_u, b.final_u)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failure_raise_and_mask():
    spec = make_noise_spec(1.5, 0, 1.0)
    mp = ModelParams(1, 1, 1, 1, 1)
    eff = effective_params(mp, spec, spec)
    s1 = cos_state(8)
    rows = State.from_arrays(s1.grid, 0.0, np.tile(s1.u.values, (2, 1)), np.tile(s1.v.values, (2, 1)))
    inc = np.random.default_rng(0).normal(size=(2, 10, 1)) * 0.1
    inc[1, 4, 0] = np.inf
    cfg = SchemeConfig(0.01, "semi_implicit_em", 0.1)
    with pytest.raises(NumericalFailure) as err:
        integrate(rows, mp, eff, spec, spec, cfg, noise=(inc, inc))
    assert err.value.paths == [1] and err.value.step == 5
    tr = integrate(rows, mp, eff, spec, spec, cfg, noise=(inc, inc), on_failure="mask")
    assert list(tr.failed) == [False, True]
    assert tr.failure_step[1] == 5
    ok = integrate(s1, mp, eff, spec, spec, cfg, noise=(inc[0], inc[0]))
    npt.assert_allclose(tr.path(0).final_u, ok.final_u, rtol=1e-14)


def test_no_clipping_of_negative_values():
    spec = make_noise_spec(1.5, 0, 1.0)
    mp = ModelParams(1, 1, 0.0, 0, 0)
    eff = effective_params(mp, spec, spec)
    inc = np.full((1, 1), -3.0)
    tr = integrate(cos_state(8), mp, eff, spec, spec, SchemeConfig(0.01, t_end=0.01), noise=(inc, inc))
    assert tr.scalars["min_u"][-1] < 0


def test_scalar_records():
    mp = ModelParams(1, 1, 1, 1, 1)
    s0 = cos_state(64, v=lambda x: np.cos(np.pi * x))
    tr = run(s0, mp, "semi_implicit_em", 0.01, 0.05)
    assert set(tr.scalars) == set(SCALAR_COLUMNS)
    assert tr.scalars["l1_u"][0] == pytest.approx(trapezoid(np.abs(s0.u.values), 64))
    assert tr.scalars["gradv_l2"][0] == pytest.approx(np.pi / math.sqrt(2), rel=1e-3)
    assert tr.scalars["gradv_h1_running_integral"][0] == 0.0
    assert np.all(np.diff(tr.scalars["gradv_h1_running_integral"]) > 0)
    assert np.all(np.isnan(tr.scalars["W"]))
    assert np.all(tr.scalars["regime"] == 0)


def test_trajectory_csv(tmp_path):
    tr = run(cos_state(8), ModelParams(1, 1, 1, 1, 1), "semi_implicit_em", 0.1, 0.3)
    p = tmp_path / "t.csv"
    write_trajectory_csv(p, tr)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(SCALAR_COLUMNS)
    assert len(lines) == 5
    assert lines[1].split(",")[-2:] == ["keller_segel", "0"]


# ---------------------------------------------------------------------------
# smoothed-noise reference


def test_wz_zero_noise_matches_rk2():
    mp = ModelParams(1, 1, 1, 1, 1)
    g = GridSpec(8)
    s0 = cos_state(8, v=lambda x: np.cos(np.pi * x))
    p = piecewise_linear_path(ZERO, g, 0.01, 0.01, 1, RngStream(0, 0))
    out = wong_zakai_step(s0, mp, p, p, 1e-3)
    from stochks.dynamics import drift_u, drift_v

    h = 1e-3
    ku, kv = drift_u(s0, mp).values, drift_v(s0, mp).values
    mid = State.from_arrays(g, 0, s0.u.values + 0.5 * h * ku, s0.v.values + 0.5 * h * kv)
    npt.assert_allclose(out.u.values, s0.u.values + h * drift_u(mid, mp).values, rtol=1e-14)
    npt.assert_allclose(out.v.values, s0.v.values + h * drift_v(mid, mp).values, rtol=1e-14)


def test_wz_scalar_reduction_converges_to_geometric_solution():
    spec = make_noise_spec(0.0, 0, 1.0)
    mp = ModelParams(1, 1, 0.0, 0.0, 0.0)
    g = GridSpec(4)
    s0 = State.from_arrays(g, 0, np.ones(5), np.zeros(5))
    # along one fixed path the random ODE solution is exactly exp(B(t))
    p = piecewise_linear_path(spec, g, 1.0, 0.25, 16, RngStream(42, 0))
    exact = math.exp(p.knot_values()[-1, 0])
    errs = []
    for h in (1e-3, 5e-4, 2.5e-4):
        _, us, _, _ = integrate_wong_zakai(s0, mp, p, p, 1.0, max_substep=h)
        errs.append(abs(us[-1, 0, 0] - exact))
    assert 3.5 < errs[0] / errs[1] < 4.5
    assert errs[-1] < 1e-5 * exact


def test_wz_v_only_decay():
    mp = ModelParams(1, 1, 1, 0.7, 0.0)
    g = GridSpec(8)
    s0 = State.from_arrays(g, 0, np.zeros(9), np.full(9, 2.0))
    p = piecewise_linear_path(ZERO, g, 1.0, 0.1, 1, RngStream(0, 0))
    _, _, vs, _ = integrate_wong_zakai(s0, mp, p, p, 0.5, max_substep=1e-3)
    npt.assert_allclose(vs[-1, 0], 2 * math.exp(-0.7), rtol=1e-6)


def test_wz_reference_through_integrate():
    spec = make_noise_spec(1.5, 2, 0.3)
    mp = ModelParams(1, 1, 1, 1, 1)
    eff = effective_params(mp, spec, spec)
    cfg = SchemeConfig(0.01, "wong_zakai_reference", 0.05)
    a = integrate(cos_state(8), mp, eff, spec, spec, cfg, path_streams(2, 0))
    b = integrate(cos_state(8), mp, eff, spec, spec, cfg, path_streams(2, 0))
    assert a.n_steps == 5 and np.array_equal(a.final_u, b.final_u)
    with pytest.raises(ValueError):
        integrate(cos_state(8), mp, eff, spec, spec, cfg, path_streams(2, 0), hooks=[object()])
