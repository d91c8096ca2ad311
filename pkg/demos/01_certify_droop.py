"""Certify a plain droop controller on the 3-bus case, then watch it settle.

    python3 demos/01_certify_droop.py
"""
import numpy as np

from stablefreq import bundled_case, droop_params
from stablefreq.lyapunov import certify_controller
from stablefreq.sim import rollout, sample_initial_states

case = bundled_case("case3")
ctl = droop_params(np.full(case.n, 2.0), case.u_min, case.u_max)

rep = certify_controller(case, ctl, samples=500, seed=0)
print("verdict:", rep.verdict)
print(f"eps* = {rep.epsilon_star:.4g}, eps used = {rep.epsilon_used:.4g}, "
      f"min eig Q = {rep.lambda_min_Q:.3g}")

# a disturbed start, 10 s of simulated time
th0, w0 = sample_initial_states(case, 1, seed=1, omega_range_hz=0.2)
traj = rollout(case, (th0[0], w0[0]), ctl, K=1000, dt=0.01)
for k in (0, 100, 300, 1000):
    print(f"t = {traj.t[k]:5.2f} s   max |w| = {np.abs(traj.omega[k]).max():.2e} rad/s")
