import numpy as np
from divshape.domain_geometry import Box, Disk, RadialProfile, make_star_domain
from divshape.mesh_fields import triangulate, ScalarField, l2_norm
from divshape.divfree_decomposition import (
    FormSum, GradientForm, WindingForm, periods_and_potential,
    curl_of_stream, StreamField, witness_space_identity, shift_convergence,
    shift_table, ring_regions, random_stream,
)

TWO_PI = 2 * np.pi

hole = make_star_domain((0.0, 0.0), RadialProfile(0.2))
mesh = triangulate(Disk(0.0, 0.0, 0.8), holes=[hole], h=0.04)
print("annulus mesh:", mesh.num_triangles, "tris, min angle", round(mesh.min_angle(), 1))

phis = np.linspace(0, TWO_PI, 129)[:-1]
loop = 0.5 * np.column_stack([np.cos(phis), np.sin(phis)])

# pure winding form: period 2*pi, zero corrected potential
tau1 = FormSum([(TWO_PI, WindingForm((0.0, 0.0)))])
pp1 = periods_and_potential(tau1, mesh, [loop])
print("c1:", pp1.periods, "expected", TWO_PI, "err", abs(pp1.periods[0] - TWO_PI))
print("cycle defect:", pp1.max_cycle_defect)
print("potential range:", np.ptp(pp1.potential.values))

# winding plus exact differential: potential recovers x1^2 + const
tau2 = FormSum([
    (TWO_PI, WindingForm((0.0, 0.0))),
    (1.0, GradientForm(lambda p: p[:, 0] ** 2,
                       lambda p: np.column_stack([2 * p[:, 0], np.zeros(len(p))]))),
])
pp2 = periods_and_potential(tau2, mesh, [loop])
print("c1 (mixed):", pp2.periods[0], "err", abs(pp2.periods[0] - TWO_PI))
target = mesh.p2_coords[:, 0] ** 2
diff = pp2.potential.values - target
print("h - x1^2 spread:", np.ptp(diff))
print("alt tree diff:", pp2.alternate_tree_difference())
print("grad consistency:", pp2.grad_consistency)
rows = pp2.check_loops([loop, 0.3 * np.column_stack([np.cos(phis), np.sin(phis)]) + [0.15, 0.0]])
print("loop checks:", [(r["integral"], round(r["length"], 3)) for r in rows])

ext = pp2.extend(hole)
print("strips:", len(ext.strips), "depth", round(ext.strips[0].depth, 4))
print("extension consistency:", ext.consistency_check())
s = np.linspace(-0.3 * ext.strips[0].halfwidth, 0.3 * ext.strips[0].halfwidth, 5)
inside_hole = ext.eval(0, s, np.full(5, 0.5 * ext.strips[0].depth))
pts = ext.point(0, s, np.full(5, 0.5 * ext.strips[0].depth))
print("hole-side h vs x1^2+const spread:",
      np.ptp(inside_hole - pts[:, 0] ** 2))

# witness pipeline on the unit square with a disk obstacle
box = Box(0.0, 0.0, 1.0, 1.0)
bmesh = triangulate(box, h=0.05)
omega = make_star_domain((0.5, 0.5), RadialProfile(0.15))
r = np.hypot(bmesh.p2_coords[:, 0] - 0.5, bmesh.p2_coords[:, 1] - 0.5)
x = np.clip((0.45 - r) / 0.2, 0.0, 1.0)
psi = 2.0 * x * x * (3 - 2 * x)
u = curl_of_stream(StreamField(ScalarField(bmesh, psi, degree=2)))

regions, _ = ring_regions(omega, n=10, radius=0.26)
rep = witness_space_identity(u, obstacle=omega, regions=regions)
print("witness rel H1 error:", rep.rel_h1_error)
print("support clearance:", rep.support_clearance)
print("weak residual of approximant:", rep.weak_residual)
print("shift ts:", [round(s_["t"], 4) for s_ in rep.shifts])

# shift convergence on one piece
piece = rep.decomposition.pieces[0]
d = rep.shifts[0]["direction"]
errs = shift_convergence(piece, d, [0.04, 0.02, 0.01, 0.005])
print("shift errors:", errs, "decreasing:", all(np.diff(errs) < 0))
tab = shift_table(piece, d, [0.04, 0.02, 0.01])
print("support ok:", tab.support_ok)

# no-obstacle witness
rng = np.random.default_rng(3)
s0 = random_stream(bmesh, rng)
vals = s0.psi.values * (np.clip((0.42 - np.hypot(bmesh.p2_coords[:,0]-0.5, bmesh.p2_coords[:,1]-0.5)) / 0.2, 0, 1))
u2 = curl_of_stream(StreamField(ScalarField(bmesh, vals, degree=2)))
rep2 = witness_space_identity(u2, obstacle=None)
print("no-obstacle rel error:", rep2.rel_h1_error, "clearance:", rep2.support_clearance)
