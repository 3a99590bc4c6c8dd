import numpy as np

from divshape.domain_geometry import Box, RadialProfile, make_star_domain
from divshape.mesh_fields import triangulate, weak_divergence_residual
from divshape.nse_solver import (
    SolverConfig,
    BodyForce,
    solve_nse,
    solve_interior,
    energy_identity_residual,
)
from divshape.errors import SolverDivergence

# A. divergence with naive convection at tiny viscosity
box = Box(0.0, 0.0, 1.0, 1.0)
mesh = triangulate(box, h=0.1)
big = BodyForce(func=lambda pts: 50.0 * np.column_stack(
    [np.sin(6 * np.pi * pts[:, 1]), np.cos(6 * np.pi * pts[:, 0])]))
for gamma, skew, amp in [(1e-4, False, 50.0), (1e-4, True, 2000.0),
                         (1e-3, False, 50.0)]:
    f = BodyForce(func=lambda pts, a=amp: a * np.column_stack(
        [np.sin(6 * np.pi * pts[:, 1]), np.cos(6 * np.pi * pts[:, 0])]))
    try:
        s = solve_nse(mesh, f, SolverConfig(gamma=gamma, skew_form=skew,
                                            max_iters=40))
        print(f"gamma={gamma} skew={skew} amp={amp}: converged={s.converged} "
              f"iters={len(s.residual_history)} tail={s.residual_history[-1]:.2e}")
    except SolverDivergence as exc:
        print(f"gamma={gamma} skew={skew} amp={amp}: DIVERGED after "
              f"{len(exc.history)} residuals, tail={exc.history[-3:]}")

# B. naive-vs-skew energy contrast on an unstructured holed mesh
omega = make_star_domain((0.5, 0.5), RadialProfile(0.18))
ring = triangulate(box, holes=[omega], h=0.1)
f = BodyForce(func=lambda pts: 8.0 * np.column_stack(
    [np.sin(2 * np.pi * pts[:, 1]), np.cos(2 * np.pi * pts[:, 0])]))
for skew in (True, False):
    cfg = SolverConfig(gamma=0.2, skew_form=skew)
    s = solve_nse(ring, f, cfg)
    e = energy_identity_residual(s, f, cfg)
    print(f"ring skew={skew}: conv={s.converged} iters={len(s.residual_history)} "
          f"energy={e:.3e} wres={weak_divergence_residual(s.velocity):.2e} "
          f"umax={np.abs(s.velocity.values).max():.3f}")

# C. solve_interior on the disk: f=0 and vigorous f
disk = make_star_domain((0.5, 0.5), RadialProfile(0.35))
dmesh = triangulate(disk, h=0.05)
s0 = solve_interior(dmesh, BodyForce.zero(), SolverConfig(gamma=1.0))
print("disk f=0: |u| =", np.abs(s0.velocity.values).max())
s1 = solve_interior(dmesh, f, SolverConfig(gamma=0.5))
print(f"disk forced: conv={s1.converged} "
      f"energy={energy_identity_residual(s1, f, SolverConfig(gamma=0.5)):.3e} "
      f"boundary max={np.abs(s1.velocity.values[dmesh.boundary_p2_nodes()]).max()}")
