"""A controller that pushes the wrong way: u = -5 w on the 10-machine case.

The certificate refutes it on monotonicity before any simulation, and
rollouts confirm that the machines fall out of step.

    python3 demos/02_destabilizing_controller.py
"""
from stablefreq import TabulatedController, bundled_case
from stablefreq.lyapunov import certify_controller
from stablefreq.sim import rollout_batch, sample_initial_states

case = bundled_case("case39kron")
bad = TabulatedController.from_function(lambda w: -5.0 * w, case.n, label="u=-5w")

rep = certify_controller(case, bad, samples=200)
print("verdict:", rep.verdict, "| reason:", rep.reason)
print("counterexample:", rep.monotone_check)

th, w = sample_initial_states(case, 20, seed=4)
_, W, _, div = rollout_batch(case, th, w, bad, K=2000, dt=0.01)
print(f"{int(div.sum())}/20 rollouts diverged (|w| > 100 rad/s)")
