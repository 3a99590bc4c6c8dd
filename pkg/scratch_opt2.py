import time

import numpy as np

from divshape.domain_geometry import AdmissibleFamily, Disk, RadialProfile, make_star_domain
from divshape.mesh_fields import l2_norm
from divshape.nse_solver import BodyForce, SolverConfig
from divshape.shape_optimizer import (
    CostFunctional,
    OptimizerConfig,
    minimize,
    run_diagnostics,
)

family = AdmissibleFamily(
    a=0.02, r=0.5, k=0.01, lip=3.0, sup=0.5,
    ball=(0.5, 0.5, 0.405), box=(0.0, 0.0, 1.0, 1.0),
)
f = BodyForce(func=lambda pts: 1.0 * np.column_stack(
    [np.sin(2 * np.pi * pts[:, 1]), np.cos(2 * np.pi * pts[:, 0])]))
cfg = SolverConfig(gamma=0.5)
drag = CostFunctional(kind="drag")

# 1-param run, then refined diagnostics
opt = OptimizerConfig(initial=np.array([0.28]), step=0.06, max_evals=40,
                      diam_tol=1e-3, mesh_h=0.07)
run = minimize(family, drag, f, cfg, opt)
probes = [Disk(0.5, 0.5, 0.05), Disk(0.08, 0.08, 0.04)]
for rh in (None, 0.04, 0.03):
    t0 = time.time()
    rep = run_diagnostics(run, probes, refine_h=rh, background_h=0.06)
    u_scale = l2_norm(run.sequence[run.best].solution.velocity)
    print(f"refine_h={rh}: vanishing L2={rep.vanishing_check:.3e} "
          f"nodal={rep.vanishing_nodal_max:.3e} vs 1e-6*|u|={1e-6 * u_scale:.3e} "
          f"fatou={rep.fatou_gap:.2e} "
          f"norm_conv_last2={rep.norm_convergence[-2:]} [{time.time()-t0:.1f}s]")

# 8-parameter family: c0 + 4 cos + 3 sin wiggles
t0 = time.time()
x0 = np.array([0.28, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
opt8 = OptimizerConfig(initial=x0, step=0.03, max_evals=60,
                       diam_tol=5e-4, mesh_h=0.09)
run8 = minimize(family, drag, f, cfg, opt8)
costs = [rec.cost for rec in run8.sequence]
print(f"8-param: accepted={len(costs)} best={run8.best_cost:.6f} "
      f"non-increasing={all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))} "
      f"params={np.round(run8.sequence[run8.best].params, 3)} "
      f"[{time.time()-t0:.1f}s]")
