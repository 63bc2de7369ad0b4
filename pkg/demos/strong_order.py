"""
Strong order on the scalar reduction
====================================

For spatially constant data and noise on the constant mode alone the u
equation is geometric Brownian motion, so every path has a closed form.
The error of the Euler-Maruyama step against it decays like dt^(1/2) when
the Ito correction is gamma/2.  With gamma instead, a bias of size O(1)
stays and the error no longer shrinks.
"""

from stochks.harness import EnsembleConfig, run_strong_order, scalar_reduction_setup

dts = [2.0**-k for k in range(5, 10)]
res = run_strong_order(EnsembleConfig(300, base_seed=12345), scalar_reduction_setup(dt=dts[0]), dts,
                       ["half", "full"])

print(f"{'dt':>10s} {'half':>10s} {'full':>10s}")
for i, dt in enumerate(dts):
    h = res.statistics["half"]["error"][i]["mean"]
    f = res.statistics["full"]["error"][i]["mean"]
    print(f"{dt:10.5f} {h:10.5f} {f:10.5f}")

print("fitted slope (half):", round(res.slope, 3), "+-", round(res.slope_stderr, 3))
print("finest/coarsest error, half:", round(res.statistics["half"]["ratio_finest_to_coarsest"], 3),
      " full:", round(res.statistics["full"]["ratio_finest_to_coarsest"], 3))
print("flags:", res.flags or "none")
