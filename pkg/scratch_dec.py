import numpy as np
from divshape.domain_geometry import Box, Disk, RadialProfile, make_star_domain
from divshape.mesh_fields import (
    triangulate, weak_divergence_residual, h1_norm, l2_norm,
)
from divshape.divfree_decomposition import (
    curl_of_stream, stream_function, decompose, decompose_covering,
    localized_decompose, random_stream, StreamField,
)
from divshape.mesh_fields import ScalarField

rng = np.random.default_rng(7)
box = Box(0.0, 0.0, 1.0, 1.0)
mesh = triangulate(box, h=0.05)
print("mesh:", mesh.num_triangles, "tris,", mesh.num_p2_nodes, "nodes, h_max", round(mesh.h_max, 4))

s = random_stream(mesh, rng)
u = curl_of_stream(s)
print("weak div (stream route):", weak_divergence_residual(u))
print("weak div (interp route):", weak_divergence_residual(u, use_stream=False))

# stream recovery round trips
u_plain = u.copy()
u_plain.stream = None
sp = stream_function(u_plain, method="poisson", div_tol=1e-4)
st = stream_function(u_plain, method="path", div_tol=1e-4)
print("poisson fit residual:", sp.fit_residual)
print("path fit residual:", st.fit_residual)
d = ScalarField(mesh, sp.psi.values - st.psi.values)
print("poisson-vs-path L2:", l2_norm(d), " / psi L2:", l2_norm(sp.psi))
back = curl_of_stream(sp)
print("curl(stream(u)) vs u max:", np.max(np.abs(back.values - u.values)))

# two-region split of the unit square
mesh2 = triangulate(box, h=0.025)
rng2 = np.random.default_rng(11)
u2 = curl_of_stream(random_stream(mesh2, rng2))
U1 = Box(0.0, 0.0, 0.6, 1.0)
U2 = Box(0.4, 0.0, 1.0, 1.0)
inner = Box(0.05, 0.05, 0.95, 0.95)
dec = decompose(u2, [U1, U2], inner)
print("sum_error:", dec.sum_error)
print("piece residuals:", dec.piece_residuals)
print("constant estimate:", dec.constant_estimate)
print("valid fraction:", dec.valid_nodes.mean())
for j, (p, r) in enumerate(zip(dec.pieces, dec.regions)):
    outside = ~np.asarray(r.contains(mesh2.p2_coords, closed=True))
    print(f"piece {j} max outside region:", np.max(np.abs(p.values[outside])))

# covering variant
cov = [Box(-0.1, -0.1, 0.6, 1.1), Box(0.4, -0.1, 1.1, 1.1)]
dc = decompose_covering(u2, cov, radius=2.0)
print("covering sum_error:", dc.sum_error, "valid fraction:", dc.valid_nodes.mean())

# localized: plateau stream around a disk obstacle
prof = RadialProfile(0.15)
omega = make_star_domain((0.5, 0.5), prof)
r = np.hypot(mesh.p2_coords[:, 0] - 0.5, mesh.p2_coords[:, 1] - 0.5)
x = np.clip((0.45 - r) / 0.2, 0.0, 1.0)
psi_vals = 2.0 * x * x * (3 - 2 * x)
su = StreamField(ScalarField(mesh, psi_vals, degree=2))
ul = curl_of_stream(su)
mask = np.asarray(omega.contains(mesh.p2_coords, closed=True))
print("u on obstacle max:", np.max(np.abs(ul.values[mask])))

from divshape.divfree_decomposition import ring_regions
regions, phis = ring_regions(omega, n=8)
print("ring radius:", regions[0].r)
ld = localized_decompose(ul, [omega], regions)
print("component constants:", ld.component_constants, "std:", ld.constant_stddevs)
print("localization errors:", ld.localization_errors)
print("localized sum_error:", ld.sum_error, "valid fraction:", ld.valid_nodes.mean())
print("piece residuals:", max(ld.piece_residuals))
