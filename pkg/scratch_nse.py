import numpy as np

from divshape.domain_geometry import Box
from divshape.mesh_fields import triangulate, weak_divergence_residual


def unit_square_mesh(h):
    return triangulate(Box(0.0, 0.0, 1.0, 1.0), h=h)
from divshape.nse_solver import (
    SolverConfig,
    BodyForce,
    solve_nse,
    manufactured_case,
    velocity_h1_error,
    pressure_l2_error,
    energy_identity_residual,
    uniqueness_margin,
    random_solenoidal_fields,
    weak_residual_check,
    slab_width,
)
from divshape.errors import SolverDivergence

# 1. zero force -> zero solution
mesh = unit_square_mesh(0.1)
cfg = SolverConfig(gamma=1.0)
sol = solve_nse(mesh, BodyForce.zero(), cfg)
print("zero force: |u| =", np.abs(sol.velocity.values).max(),
      "|p| =", np.abs(sol.pressure.values).max(),
      "converged =", sol.converged, "iters =", len(sol.residual_history))

# 2. manufactured case: convergence rates
gamma = 1.0
force, uex, gex, pex = manufactured_case(gamma, convection_sign=-1)
errs_u, errs_p, hs = [], [], []
for h in (0.1, 0.05, 0.025):
    m = unit_square_mesh(h)
    s = solve_nse(m, force, SolverConfig(gamma=gamma))
    eu = velocity_h1_error(s, uex, gex)
    ep = pressure_l2_error(s, pex)
    wres = weak_divergence_residual(s.velocity)
    print(f"h={h}: it={len(s.residual_history)} conv={s.converged} "
          f"eu={eu:.4e} ep={ep:.4e} wres={wres:.2e} "
          f"res_tail={s.residual_history[-1]:.2e}")
    errs_u.append(eu)
    errs_p.append(ep)
    hs.append(m.h_max)
for k in range(1, 3):
    ru = np.log(errs_u[k-1] / errs_u[k]) / np.log(hs[k-1] / hs[k])
    rp = np.log(errs_p[k-1] / errs_p[k]) / np.log(hs[k-1] / hs[k])
    print(f"rates level {k}: velocity {ru:.2f} pressure {rp:.2f}")

# 3. energy identity: skew vs naive
m = unit_square_mesh(0.05)
s_skew = solve_nse(m, force, SolverConfig(gamma=gamma, skew_form=True))
e_skew = energy_identity_residual(s_skew, force, SolverConfig(gamma=gamma))
s_naive = solve_nse(m, force, SolverConfig(gamma=gamma, skew_form=False))
e_naive = energy_identity_residual(s_naive, force, SolverConfig(gamma=gamma, skew_form=False))
print(f"energy identity: skew {e_skew:.3e} naive {e_naive:.3e}")

# 4. weak residual against 50 random solenoidal fields
rng = np.random.default_rng(7)
fields = random_solenoidal_fields(m, rng, count=50)
wr = weak_residual_check(s_skew, force, SolverConfig(gamma=gamma), fields)
div_worst = max(weak_divergence_residual(phi) for phi in fields[:5])
print(f"weak residual vs 50 fields: {wr:.3e}; field div residual {div_worst:.2e}")

# 5. uniqueness margin scaling: C(2 gamma) = 4 C(gamma)
f0 = BodyForce.zero()
c1 = uniqueness_margin(f0, SolverConfig(gamma=1.0), m)
c2 = uniqueness_margin(f0, SolverConfig(gamma=2.0), m)
print(f"margin scaling: C(2g)/C(g) = {c2 / c1:.12f}, slab width = {slab_width(m):.4f}")

# 6. sign robustness
s_plus = solve_nse(m, manufactured_case(gamma, convection_sign=1)[0],
                   SolverConfig(gamma=gamma, convection_sign=1))
print("sign +1: converged =", s_plus.converged,
      "eu =", velocity_h1_error(s_plus, uex, gex))

# 7. divergence at tiny viscosity with large forcing
big = BodyForce(func=lambda pts: 50.0 * np.column_stack(
    [np.sin(6 * np.pi * pts[:, 1]), np.cos(6 * np.pi * pts[:, 0])]))
try:
    solve_nse(unit_square_mesh(0.1), big, SolverConfig(gamma=1e-4, max_iters=40))
    print("tiny viscosity: unexpectedly converged")
except SolverDivergence as exc:
    print(f"tiny viscosity: SolverDivergence after {len(exc.history)} residuals, "
          f"tail {exc.history[-3:]}")
