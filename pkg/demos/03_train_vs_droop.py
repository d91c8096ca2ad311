"""Train a stacked-ReLU controller on the 3-bus case and compare it with
the best droop gains on widening initial-condition ranges.

Runs in well under a minute on one core.

    python3 demos/03_train_vs_droop.py
"""
from stablefreq.controller import droop_as_stack
from stablefreq.lyapunov import certify_controller
from stablefreq import bundled_case
from stablefreq.train import TrainConfig, fit_droop, sweep_losses, train

case = bundled_case("case3")
cfg = TrainConfig(episodes=60, batch=64, stages=200, seed=0)

droop = fit_droop(case, cfg)
print("droop gains:", droop.gains.round(3), "loss", round(droop.loss, 5))

# start from droop so training only has to improve on it
start = droop_as_stack(droop.gains, cfg.m, case.u_min, case.u_max, cfg.omega_span)
res = train(case, cfg, params=start)
curve = res.loss_curve()
print(f"training loss {curve[0]:.5f} -> {curve[-1]:.5f} in {res.elapsed:.1f}s")

table = sweep_losses(case, {"droop": droop.params, "trained": res.params}, batch=200)
print("omega_bar[Hz]   droop      trained")
for wb, d, t in zip((0.0, 0.025, 0.05, 0.075, 0.1, 0.125, 0.15), table["droop"], table["trained"]):
    print(f"{wb:10.3f}  {d:9.5f}  {t:9.5f}")

print("certificate:", certify_controller(case, res.params, samples=300).verdict)
