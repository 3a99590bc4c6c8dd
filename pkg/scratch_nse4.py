import numpy as np

from divshape.domain_geometry import Box
from divshape.mesh_fields import triangulate
from divshape.nse_solver import SolverConfig, BodyForce, solve_nse
from divshape.errors import SolverDivergence

mesh = triangulate(Box(0.0, 0.0, 1.0, 1.0), h=0.1)


def run(gamma, skew, amp, iters=80):
    f = BodyForce(func=lambda pts, a=amp: a * np.column_stack(
        [np.sin(6 * np.pi * pts[:, 1]), np.cos(6 * np.pi * pts[:, 0])]))
    try:
        s = solve_nse(mesh, f, SolverConfig(gamma=gamma, skew_form=skew,
                                            max_iters=iters))
        hist, out = s.residual_history, ("conv" if s.converged else "stall")
    except SolverDivergence as exc:
        hist, out = exc.history, "RAISED"
    runs, best = 0, 0
    for a, b in zip(hist, hist[1:]):
        runs = runs + 1 if b > a else 0
        best = max(best, runs)
    print(f"g={gamma:g} skew={int(skew)} amp={amp:g}: {out:6s} len={len(hist)} "
          f"rise_run={best} tail={['%.1e' % v for v in hist[-3:]]}")


for amp in (0.5, 1.0, 2.0, 3.0, 5.0, 8.0):
    run(0.01, False, amp)
print()
for amp in (2.0, 4.0, 8.0, 16.0, 32.0):
    run(0.01, True, amp)
print()
for amp in (0.05, 0.1, 0.2, 0.5):
    run(1e-3, False, amp)
