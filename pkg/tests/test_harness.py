import json
import math

import numpy as np
import numpy.testing as npt
import pytest

from stochks.conversion import CorrectionConvention
from stochks.diagnostics import LyapunovParams, moment_functionals
from stochks.dynamics import ModelParams
from stochks.field_space import GridSpec
from stochks.harness import (
    EnsembleConfig,
    ModelSetup,
    _jsonable,
    run_moments,
    run_strong_order,
    run_truncation_events,
    run_wong_zakai,
    scalar_reduction_setup,
)
from stochks.integrator import SchemeConfig, integrate
from stochks.wiener import make_noise_spec, path_streams


def small_setup(amp=0.5, n=16, dt=0.01, t_end=0.5, lyap=None):
    g = GridSpec(n)
    x = g.nodes
    spec1 = make_noise_spec(1.5, 8, amp)
    spec2 = make_noise_spec(2.5, 8, amp)
    return ModelSetup(g, ModelParams(1, 1, 1, 1, 1), spec1, spec2, SchemeConfig(dt, "semi_implicit_em", t_end, 10),
                      1 + 0.5 * np.cos(np.pi * x), 0.2 * np.cos(np.pi * x), CorrectionConvention.HALF_GAMMA, lyap)


def test_ensemble_config():
    assert EnsembleConfig(70, batch_size=32).batches() == [(0, 32), (32, 64), (64, 70)]
    for bad in (dict(n_paths=0), dict(n_paths=1, workers=0), dict(n_paths=1, experiment="x"),
                dict(n_paths=1, base_seed=-1), dict(n_paths=1, batch_size=0)):
        with pytest.raises(ValueError):
            EnsembleConfig(**bad)


def test_zero_noise_moments_have_zero_variance():
    s = small_setup(amp=0.0)
    rep = run_moments(EnsembleConfig(8, batch_size=3), s)
    single = integrate(s.initial_state(), s.params, s.effective(), s.spec1, s.spec2, s.scheme, path_streams(0, 0))
    det = moment_functionals(single).records[0]
    st = rep.statistics()
    for name in ("sup_l1_u", "sup_gradv_l2_sq", "int_gradv_h1_sq"):
        assert st[name]["variance"] == pytest.approx(0.0, abs=1e-24)
        assert st[name]["mean"] == pytest.approx(getattr(det, name), rel=1e-12)
    assert [r.index for r in rep.records] == list(range(8))


def test_moments_match_individual_paths():
    s = small_setup()
    rep = run_moments(EnsembleConfig(5, base_seed=3, batch_size=2), s)
    for i in (0, 4):
        tr = integrate(s.initial_state(), s.params, s.effective(), s.spec1, s.spec2, s.scheme, path_streams(3, i))
        want = moment_functionals(tr, index_offset=i).records[0]
        got = rep.records[i]
        assert got.index == i
        npt.assert_allclose([got.sup_l1_u, got.sup_gradv_l2_sq, got.int_gradv_h1_sq],
                            [want.sup_l1_u, want.sup_gradv_l2_sq, want.int_gradv_h1_sq], rtol=1e-12)


def test_half_width_clt_scaling():
    s = small_setup(amp=0.5, n=8, dt=0.02, t_end=0.4)
    a = run_moments(EnsembleConfig(400, base_seed=1), s).statistics()
    b = run_moments(EnsembleConfig(800, base_seed=1), s).statistics()
    for name in a:
        ratio = b[name]["half_width"] / a[name]["half_width"]
        assert abs(ratio - 1 / math.sqrt(2)) < 0.2 / math.sqrt(2)


def test_lyapunov_meta():
    s = small_setup(lyap=LyapunovParams(5, 3, 1))
    rep = run_moments(EnsembleConfig(4), s)
    assert rep.meta["constants"]["passed"] is True
    assert rep.meta["sup_W"]["n"] == 4 and math.isfinite(rep.meta["sup_W"]["mean"])


def test_workers_do_not_change_results():
    s = small_setup()
    a = run_moments(EnsembleConfig(12, base_seed=5, workers=1, batch_size=4), s)
    b = run_moments(EnsembleConfig(12, base_seed=5, workers=2, batch_size=4), s)
    assert a.records == b.records
    assert json.dumps(_jsonable(a.to_dict()), sort_keys=True) == json.dumps(_jsonable(b.to_dict()), sort_keys=True)


def test_strong_order_small_ladder():
    dts = [2.0**-k for k in range(4, 8)]
    res = run_strong_order(EnsembleConfig(200, base_seed=11), scalar_reduction_setup(dt=dts[0]), dts, ["half", "full"])
    assert 0.35 <= res.slope <= 0.65
    assert res.statistics["full"]["slope"] < 0.2
    assert res.flags == []
    assert len(res.records["half"][str(dts[0])]) == 200


def test_strong_order_flags():
    dts = [2.0**-k for k in range(3, 6)]
    zero = run_strong_order(EnsembleConfig(8), scalar_reduction_setup(dt=dts[0], amplitude=0.0), dts)
    assert zero.flags == ["degenerate"]
    full = run_strong_order(EnsembleConfig(100), scalar_reduction_setup(dt=dts[0], convention="full"), dts)
    assert full.flags == ["plateau"]
    with pytest.raises(ValueError):
        run_strong_order(EnsembleConfig(2), small_setup(), dts)
    with pytest.raises(ValueError):
        run_strong_order(EnsembleConfig(2), scalar_reduction_setup(), dts[:2])


def test_wong_zakai_zero_noise_floor():
    s = scalar_reduction_setup(dt=2.0**-6, amplitude=0.0)
    res = run_wong_zakai(EnsembleConfig(4), s, [2.0**-2, 2.0**-3, 2.0**-4], dt_ito=2.0**-6)
    for key in ("gap_half", "gap_full"):
        assert max(st["mean"] for st in res.statistics[key]) < 1e-12


def test_wong_zakai_scalar_verdict():
    s = scalar_reduction_setup(dt=2.0**-8)
    res = run_wong_zakai(EnsembleConfig(100, base_seed=2), s, [2.0**-2, 2.0**-4, 2.0**-6], dt_ito=2.0**-8)
    assert res.verdict == "half_gamma"
    half = [st["mean"] for st in res.statistics["gap_half"]]
    assert half[0] > half[1] > half[2]


def test_wong_zakai_full_system_runs():
    s = small_setup(n=8, dt=1 / 64, t_end=0.25)
    res = run_wong_zakai(EnsembleConfig(3), s, [1 / 16, 1 / 32, 1 / 64])
    assert len(res.statistics["gap_half"]) == 3 and res.verdict in ("half_gamma", "full_gamma", "inconclusive")


def test_truncation_events_extremes():
    s = small_setup(amp=0.5, dt=0.02, t_end=0.4)
    huge = run_truncation_events(EnsembleConfig(6), s, 3, 1e6)
    npt.assert_array_equal(huge.statistics["freq_reached_T"], 1.0)
    tiny = run_truncation_events(EnsembleConfig(6), s, 3, 1e-3)
    assert tiny.statistics["freq_reached_T"][0] == 0.0
    assert tiny.statistics["freq_monotone"]
    assert len(tiny.records["events"]) == 6 and all(len(e) == 3 for e in tiny.records["events"])
    with pytest.raises(ValueError):
        run_truncation_events(EnsembleConfig(2), s, 1)


def test_jsonable_replaces_non_finite():
    out = _jsonable({"a": np.array([1.0, np.nan]), "b": np.int64(3), "c": (np.bool_(True), math.inf)})
    assert out == {"a": [1.0, None], "b": 3, "c": [True, None]}
