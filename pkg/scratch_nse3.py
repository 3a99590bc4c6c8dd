import numpy as np

from divshape.domain_geometry import Box
from divshape.mesh_fields import triangulate
from divshape.nse_solver import SolverConfig, BodyForce, solve_nse
from divshape.errors import SolverDivergence

box = Box(0.0, 0.0, 1.0, 1.0)
mesh = triangulate(box, h=0.1)


def run(gamma, skew, amp, iters=60):
    f = BodyForce(func=lambda pts, a=amp: a * np.column_stack(
        [np.sin(6 * np.pi * pts[:, 1]), np.cos(6 * np.pi * pts[:, 0])]))
    try:
        s = solve_nse(mesh, f, SolverConfig(gamma=gamma, skew_form=skew,
                                            max_iters=iters))
        hist = s.residual_history
        out = "no-raise"
    except SolverDivergence as exc:
        hist = exc.history
        out = "RAISED"
    runs, best = 0, 0
    for a, b in zip(hist, hist[1:]):
        runs = runs + 1 if b > a else 0
        best = max(best, runs)
    print(f"g={gamma:g} skew={skew} amp={amp:g}: {out} len={len(hist)} "
          f"max_rise_run={best} head={['%.2e' % v for v in hist[:6]]} "
          f"tail={['%.2e' % v for v in hist[-3:]]}")


run(1e-4, False, 50.0, iters=200)
run(1e-4, False, 500.0)
run(1e-5, False, 50.0)
run(1e-4, True, 1e4)
run(1e-3, False, 5000.0)
