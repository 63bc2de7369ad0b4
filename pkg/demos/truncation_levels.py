"""
Truncation levels and stopping times
====================================

Level n runs the system with the nonlinearities switched off smoothly once
the running H1 / L2 / H^1 functionals pass n times the threshold multiplier.
The first time a trigger fires, the level is stopped, its state is handed on
to the heat flow, and the next level restarts from there.
"""

import numpy as np

import stochks as sk
from stochks.harness import EnsembleConfig, ModelSetup, run_truncation_events

g = sk.GridSpec(32)
x = g.nodes
params = sk.ModelParams(1, 1, 1, 1, 1)
spec1, spec2 = sk.make_noise_spec(1.5, 32, 1.0), sk.make_noise_spec(2.5, 32, 1.0)
eff = sk.effective_params(params, spec1, spec2)
s0 = sk.State.from_arrays(g, 0.0, 1 + 0.5 * np.cos(np.pi * x), np.zeros(33))

# a single path through four levels
cfg = sk.SchemeConfig(1e-3, t_end=1.0, record_every=50)
run = sk.run_concatenated(4, s0, params, eff, spec1, spec2, cfg, sk.path_streams(3, 0), multiplier=1.2)
for e in run.events[0]:
    if e.trigger_kind == "none":
        print(f"level {e.level}: no trigger, runs to T from {e.tau_bar - e.tau_star:.3f}")
    else:
        print(f"level {e.level}: stopped by {e.trigger_kind} after {e.tau_star:.3f}, at t = {e.tau_bar:.3f}")

# the level trajectories agree up to each stopping time
u1, u2 = run.level_trajectory(1), run.level_trajectory(2)
stop = run.events[0][0].step
if stop > 0:
    print("levels 1 and 2 agree before the first stop:",
          np.array_equal(u1.scalars["l2_u"][: stop + 1], u2.scalars["l2_u"][: stop + 1]))

# frequencies over an ensemble
setup = ModelSetup(g, params, spec1, spec2, sk.SchemeConfig(1e-3, t_end=1.0), s0.u.values, s0.v.values)
ev = run_truncation_events(EnsembleConfig(100, base_seed=12345), setup, level_max=5, multiplier=1.2)
st = ev.statistics
for m, (p, q) in enumerate(zip(st["freq_reached_T"], st["m_times_p_early_stop"]), start=1):
    print(f"level {m}: P(reach T) = {p:.2f}   m * P(early stop) = {q:.2f}")
print("monotone:", st["freq_monotone"], " upward trend:", st["upward_trend"])
