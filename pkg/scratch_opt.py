import time

import numpy as np

from divshape.domain_geometry import (
    AdmissibleFamily,
    Disk,
    RadialProfile,
    make_star_domain,
)
from divshape.nse_solver import BodyForce, SolverConfig
from divshape.shape_optimizer import (
    CostFunctional,
    OptimizerConfig,
    evaluate_cost,
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

# A. feasibility of the radius range + cost landscape (coarse sweep)
t0 = time.time()
radii = np.linspace(0.1, 0.4, 7)
for r in radii:
    dom = make_star_domain((0.5, 0.5), RadialProfile(r), family=family)
    ok, msgs = family.admits(dom)
    c, sol = evaluate_cost(dom, drag, f, cfg, h=0.07)
    print(f"r={r:.3f} admits={ok} cost={c:.6f}")
print(f"[{time.time()-t0:.1f}s for 7 evals]")

# B. custom J = g(x) only, quadrature match
gfun = lambda x: 1.0 + x[:, 0] ** 2 + np.sin(x[:, 1])
custom = CostFunctional(kind="custom",
                        integrand=lambda x, xi, eta: gfun(x),
                        growth_constant=4.0,
                        growth_offset=gfun)
dom = make_star_domain((0.5, 0.5), RadialProfile(0.2), family=family)
c_custom, sol = evaluate_cost(dom, custom, f, cfg, h=0.07)
from divshape.mesh_fields import triangle_rule
mesh = sol.velocity.mesh
bary, w = triangle_rule(4)
pts = np.einsum("qk,nkc->nqc", np.atleast_2d(bary),
                mesh.vertices[mesh.triangles]).reshape(-1, 2)
direct = float(np.einsum("nq,q,n->", gfun(pts).reshape(len(mesh.triangles), -1),
                         w, mesh.areas))
print(f"custom J=g: cost={c_custom:.10f} direct={direct:.10f} "
      f"diff={abs(c_custom-direct):.2e}")

# C. 1-parameter minimize vs sweep
t0 = time.time()
opt = OptimizerConfig(initial=np.array([0.28]), step=0.06, max_evals=40,
                      diam_tol=1e-3, mesh_h=0.07)
run = minimize(family, drag, f, cfg, opt)
print(f"minimize: best r={run.sequence[run.best].params[0]:.4f} "
      f"cost={run.best_cost:.6f} evals<=40 accepted={len(run.sequence)} "
      f"gaps={['%.3f' % g for g in run.hausdorff_gaps]} [{time.time()-t0:.1f}s]")

# D. diagnostics on the run
t0 = time.time()
star = run.best_domain
probes = [Disk(0.5, 0.5, 0.05),
          Disk(0.08, 0.08, 0.04)]
rep = run_diagnostics(run, probes, background_h=0.06)
print(f"weak_limit={['%.2e' % v for v in rep.weak_limit_check]}")
print(f"vanishing: L2={rep.vanishing_check:.3e} nodal={rep.vanishing_nodal_max:.3e}")
print(f"norm_conv={['%.2e' % v for v in rep.norm_convergence]}")
print(f"fatou_gap={rep.fatou_gap:.3e} curve_tail={rep.fatou_curve[-3:]}")
for kind, g in rep.gamma_indices:
    print(f"probe {kind}: holds={g.holds} m={g.m_index}")
print(f"[diagnostics {time.time()-t0:.1f}s]")
