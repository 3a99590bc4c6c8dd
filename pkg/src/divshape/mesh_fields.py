"""Triangle meshes and finite element fields on them.

Velocity-grade fields are quadratic (values at vertices and edge midpoints),
pressure-grade fields are linear.  Meshing is done in two ways: plain boxes
get a deterministic staggered lattice, domains with curved boundaries or
obstacles get a force-equilibrium relaxation mesh driven by a signed
distance function, with points projected onto the zero level set.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from matplotlib.tri import Triangulation, TrapezoidMapTriFinder
from numpy.polynomial.legendre import leggauss
from scipy.sparse import coo_matrix
from scipy.spatial import Delaunay

from .domain_geometry import Box
from .errors import GeometryError, MeshQualityError

TAG_NONE = 0
TAG_OUTER = 1
TAG_OBSTACLE = 2  # tag of hole k is TAG_OBSTACLE + k


# ---------------------------------------------------------------------------
# quadrature on the reference triangle

_RULES = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: (
        np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
        np.array([1 / 3, 1 / 3, 1 / 3]),
    ),
}


def _dunavant(pairs):
    bary, w = [], []
    for a, wa in pairs:
        if a is None:
            bary.append([1 / 3, 1 / 3, 1 / 3])
            w.append(wa)
        else:
            b = 1.0 - 2.0 * a
            bary += [[b, a, a], [a, b, a], [a, a, b]]
            w += [wa, wa, wa]
    return np.array(bary), np.array(w)


_RULES[3] = _dunavant([(0.445948490915965, 0.223381589678011),
                       (0.091576213509771, 0.109951743655322)])
_RULES[4] = _RULES[3]
_RULES[5] = _dunavant([(None, 0.225),
                       (0.470142064105115, 0.132394152788506),
                       (0.101286507323456, 0.125939180544827)])


def triangle_rule(degree):
    """Barycentric points and unit weights integrating polynomials exactly.

    Low degrees use standard symmetric rules; higher degrees fall back to a
    collapsed-square Gauss product rule.
    """
    if degree in _RULES:
        return _RULES[degree]
    n = (degree + 3) // 2
    x, wx = leggauss(n)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * wx
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    l1 = U.ravel()
    l2 = (V * (1.0 - U)).ravel()
    w = (WU * WV * (1.0 - U)).ravel() * 2.0
    bary = np.column_stack([1.0 - l1 - l2, l1, l2])
    return bary, w


# P2 shape functions in barycentric coordinates; dof order is the three
# vertices followed by the midpoints opposite them.

_P2_NODE_BARY = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
        [0.5, 0.5, 0.0],
    ]
)


def p2_shape(bary):
    bary = np.atleast_2d(bary)
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack(
        [
            l0 * (2 * l0 - 1),
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            4 * l1 * l2,
            4 * l2 * l0,
            4 * l0 * l1,
        ]
    )


def p2_shape_ref_grad(bary):
    """Gradients with respect to the reference coordinates (l1, l2)."""
    bary = np.atleast_2d(bary)
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    z = np.zeros_like(l0)
    gx = np.column_stack(
        [1 - 4 * l0, 4 * l1 - 1, z, 4 * l2, -4 * l2, 4 * (l0 - l1)]
    )
    gy = np.column_stack(
        [1 - 4 * l0, z, 4 * l2 - 1, 4 * l1, 4 * (l0 - l2), -4 * l1]
    )
    return np.stack([gx, gy], axis=-1)  # (nq, 6, 2)


def p1_shape(bary):
    return np.atleast_2d(bary)


_P1_REF_GRAD = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


# ---------------------------------------------------------------------------
# the mesh


class TriangleMesh:
    """Conforming triangulation with quadratic node numbering on top.

    Nodes 0..nv-1 are the vertices; node nv+e is the midpoint of edge e.
    """

    def __init__(self, vertices, triangles, edge_tags=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self._orient()
        self._build_edges()
        self.edge_tags = (
            np.zeros(len(self.edges), dtype=np.int64) if edge_tags is None else edge_tags
        )
        self._geometry()
        self._finder = None

    def _orient(self):
        p = self.vertices[self.triangles]
        a = p[:, 1] - p[:, 0]
        b = p[:, 2] - p[:, 0]
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        flip = cross < 0
        self.triangles[flip] = self.triangles[flip][:, [0, 2, 1]]
        if np.any(np.abs(cross) < 1e-16):
            raise MeshQualityError("degenerate triangle with zero area")

    def _build_edges(self):
        t = self.triangles
        raw = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
        raw_sorted = np.sort(raw, axis=1)
        self.edges, inverse, counts = np.unique(
            raw_sorted, axis=0, return_inverse=True, return_counts=True
        )
        self.tri_edges = inverse.reshape(3, -1).T  # local edge l opposite vertex l
        self.edge_counts = counts
        self.boundary_edges = np.nonzero(counts == 1)[0]
        if np.any(counts > 2):
            raise MeshQualityError("non-conforming edge shared by >2 triangles")

    def _geometry(self):
        p = self.vertices[self.triangles]
        self.jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        self.det = self.jac[:, 0, 0] * self.jac[:, 1, 1] - self.jac[:, 0, 1] * self.jac[:, 1, 0]
        self.areas = 0.5 * self.det
        inv = np.empty_like(self.jac)
        inv[:, 0, 0] = self.jac[:, 1, 1]
        inv[:, 0, 1] = -self.jac[:, 0, 1]
        inv[:, 1, 0] = -self.jac[:, 1, 0]
        inv[:, 1, 1] = self.jac[:, 0, 0]
        self.jac_inv = inv / self.det[:, None, None]
        self.midpoints = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        self.p2_coords = np.vstack([self.vertices, self.midpoints])
        self.tri_dofs = np.hstack(
            [self.triangles, self.num_vertices + self.tri_edges]
        )
        lengths = np.linalg.norm(
            self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]], axis=1
        )
        self.edge_lengths = lengths
        self.h_max = float(lengths.max())
        self.h_min = float(lengths.min())

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def num_p2_nodes(self):
        return len(self.vertices) + len(self.edges)

    @property
    def num_triangles(self):
        return len(self.triangles)

    def min_angle(self):
        p = self.vertices[self.triangles]
        best = np.pi
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosang = np.sum(a * b, axis=1) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            )
            best = min(best, float(np.min(np.arccos(np.clip(cosang, -1, 1)))))
        return np.degrees(best)

    def boundary_p2_nodes(self, tags=None):
        """Node ids lying on boundary edges, optionally filtered by tag."""
        edges = self.boundary_edges
        if tags is not None:
            tags = np.atleast_1d(tags)
            edges = edges[np.isin(self.edge_tags[edges], tags)]
        verts = np.unique(self.edges[edges].ravel())
        mids = self.num_vertices + edges
        return np.concatenate([verts, mids])

    def node_triangle_counts(self):
        counts = np.zeros(self.num_p2_nodes, dtype=np.int64)
        np.add.at(counts, self.tri_dofs.ravel(), 1)
        return counts

    def finder(self):
        if self._finder is None:
            tri = Triangulation(
                self.vertices[:, 0], self.vertices[:, 1], self.triangles
            )
            self._finder = TrapezoidMapTriFinder(tri)
        return self._finder

    def locate(self, pts):
        """Element index per point, -1 outside; barycentric coordinates."""
        pts = np.atleast_2d(pts)
        idx = self.finder()(pts[:, 0], pts[:, 1])
        idx = np.asarray(idx, dtype=np.int64)
        bary = np.zeros((len(pts), 3))
        ok = idx >= 0
        if np.any(ok):
            t = idx[ok]
            rel = pts[ok] - self.vertices[self.triangles[t, 0]]
            ref = np.einsum("nij,nj->ni", self.jac_inv[t], rel)
            bary[ok, 1] = ref[:, 0]
            bary[ok, 2] = ref[:, 1]
            bary[ok, 0] = 1.0 - ref.sum(axis=1)
        return idx, bary

    # ------------------------------------------------------------------
    # plain text serialization

    def save(self, path):
        with open(path, "w") as f:
            f.write(f"VERTICES {self.num_vertices}\n")
            for x, y in self.vertices:
                f.write(f"{float(x)!r} {float(y)!r}\n")
            f.write(f"TRIANGLES {self.num_triangles}\n")
            for a, b, c in self.triangles:
                f.write(f"{int(a)} {int(b)} {int(c)}\n")
            tagged = np.nonzero(self.edge_tags != TAG_NONE)[0]
            f.write(f"BOUNDARY {len(tagged)}\n")
            for e in tagged:
                v0, v1 = self.edges[e]
                f.write(f"{v0} {v1} {self.edge_tags[e]}\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        pos = 0

        def expect(word):
            nonlocal pos
            tag, count = lines[pos].split()
            if tag != word:
                raise ValueError(f"expected {word} section, found {tag}")
            pos += 1
            return int(count)

        nv = expect("VERTICES")
        verts = np.array([list(map(float, lines[pos + i].split())) for i in range(nv)])
        pos += nv
        nt = expect("TRIANGLES")
        tris = np.array([list(map(int, lines[pos + i].split())) for i in range(nt)])
        pos += nt
        mesh = cls(verts, tris)
        if pos < len(lines):
            nb = expect("BOUNDARY")
            for i in range(nb):
                v0, v1, tag = map(int, lines[pos + i].split())
                key = (min(v0, v1), max(v0, v1))
                e = np.nonzero((mesh.edges[:, 0] == key[0]) & (mesh.edges[:, 1] == key[1]))[0]
                if len(e):
                    mesh.edge_tags[e[0]] = tag
        return mesh


# ---------------------------------------------------------------------------
# mesh generation


def _sdf_box(box):
    def fn(pts):
        pts = np.atleast_2d(pts)
        dx = np.maximum(box.x0 - pts[:, 0], pts[:, 0] - box.x1)
        dy = np.maximum(box.y0 - pts[:, 1], pts[:, 1] - box.y1)
        outside = np.hypot(np.maximum(dx, 0), np.maximum(dy, 0))
        inside = np.minimum(np.maximum(dx, dy), 0)
        return outside + inside
    return fn


def _sdf_of(shape):
    if isinstance(shape, Box):
        return _sdf_box(shape)
    if hasattr(shape, "signed_distance"):
        return shape.signed_distance
    if hasattr(shape, "r"):  # Disk
        return lambda pts: np.hypot(
            np.atleast_2d(pts)[:, 0] - shape.cx, np.atleast_2d(pts)[:, 1] - shape.cy
        ) - shape.r
    raise GeometryError(f"cannot build a distance function for {type(shape).__name__}")


def _staggered_points(bbox, a):
    x0, y0, x1, y1 = bbox
    nx = max(1, int(np.ceil((x1 - x0) / a)))
    ax = (x1 - x0) / nx
    b = ax * np.sqrt(3) / 2
    ny = max(1, int(np.ceil((y1 - y0) / b)))
    by = (y1 - y0) / ny
    rows = []
    for j in range(ny + 1):
        y = y0 + j * by
        if j % 2 == 0:
            xs = x0 + np.arange(nx + 1) * ax
        else:
            xs = np.concatenate([[x0], x0 + (np.arange(nx) + 0.5) * ax, [x1]])
        rows.append(np.column_stack([xs, np.full(len(xs), y)]))
    return np.vstack(rows), ax, by


def _structured_box_mesh(box, h):
    pts, ax, by = _staggered_points(box.bbox(), h)
    tri = Delaunay(pts)
    mesh = TriangleMesh(pts, tri.simplices)
    _tag_box_boundary(mesh, box)
    return mesh


def _tag_box_boundary(mesh, box, tol=1e-12):
    v = mesh.vertices
    on_wall = (
        (np.abs(v[:, 0] - box.x0) < tol) | (np.abs(v[:, 0] - box.x1) < tol)
        | (np.abs(v[:, 1] - box.y0) < tol) | (np.abs(v[:, 1] - box.y1) < tol)
    )
    for e in mesh.boundary_edges:
        if on_wall[mesh.edges[e]].all():
            mesh.edge_tags[e] = TAG_OUTER


def _project_to_level(pts, sdf, level=0.0, steps=3):
    eps = 1e-7
    for _ in range(steps):
        d = sdf(pts) - level
        gx = (sdf(pts + [eps, 0.0]) - (d + level)) / eps
        gy = (sdf(pts + [0.0, eps]) - (d + level)) / eps
        norm2 = gx**2 + gy**2
        norm2 = np.where(norm2 < 1e-14, 1.0, norm2)
        pts = pts - np.column_stack([d * gx / norm2, d * gy / norm2])
    return pts


def _box_wall_points(box, spacing):
    xs = np.linspace(box.x0, box.x1, max(2, int(np.ceil((box.x1 - box.x0) / spacing)) + 1))
    ys = np.linspace(box.y0, box.y1, max(2, int(np.ceil((box.y1 - box.y0) / spacing)) + 1))
    south = np.column_stack([xs, np.full(len(xs), box.y0)])
    north = np.column_stack([xs, np.full(len(xs), box.y1)])
    west = np.column_stack([np.full(len(ys) - 2, box.x0), ys[1:-1]])
    east = np.column_stack([np.full(len(ys) - 2, box.x1), ys[1:-1]])
    return np.vstack([south, north, west, east])


def _curve_points(domain, spacing):
    """Points on a star boundary at uniform arc spacing."""
    phi = np.linspace(0.0, 2 * np.pi, 4096, endpoint=False)
    poly = domain.boundary_point(phi)
    seg = np.linalg.norm(np.diff(np.vstack([poly, poly[:1]]), axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    n = max(8, int(np.round(total / spacing)))
    targets = np.arange(n) * total / n
    phi_ext = np.concatenate([phi, [2 * np.pi]])
    phis = np.interp(targets, arc, phi_ext)
    return domain.boundary_point(phis)


def _relaxation_mesh(outer, holes, h, max_iter=70):
    """Force-equilibrium mesh with pinned boundary seeds.

    Boundary curves are sampled at the target spacing and held fixed, so
    vertices lie on the true boundary; only interior points relax, and any
    that drift into the boundary layer are pulled back to a fixed depth.
    """
    sdf_outer = _sdf_of(outer)
    sdf_holes = [_sdf_of(hole) for hole in holes]

    def sdf(pts):
        d = sdf_outer(np.atleast_2d(pts))
        for s in sdf_holes:
            d = np.maximum(d, -s(np.atleast_2d(pts)))
        return d

    h0 = 0.72 * h
    geps = 1e-3 * h0

    if isinstance(outer, Box):
        bbox = outer.bbox()
        outer_seeds = _box_wall_points(outer, h0)
    else:
        bbox = outer.bbox()
        outer_seeds = _curve_points(outer, h0)
    hole_seeds = [_curve_points(hole, h0) for hole in holes]
    seed_groups = [outer_seeds] + hole_seeds
    seed_starts = np.cumsum([0] + [len(g) for g in seed_groups])
    fixed = np.vstack(seed_groups)
    nfix = len(fixed)

    lattice, _, _ = _staggered_points(bbox, h0)
    lattice = lattice[sdf(lattice) < -0.7 * h0]
    pts = np.vstack([fixed, lattice])

    deltat, fscale = 0.2, 1.2
    for _ in range(max_iter):
        tri = Delaunay(pts)
        cent = pts[tri.simplices].mean(axis=1)
        keep = tri.simplices[sdf(cent) < -geps]
        bars = np.unique(
            np.sort(
                np.concatenate([keep[:, [0, 1]], keep[:, [1, 2]], keep[:, [2, 0]]]),
                axis=1,
            ),
            axis=0,
        )
        vec = pts[bars[:, 0]] - pts[bars[:, 1]]
        L = np.hypot(vec[:, 0], vec[:, 1])
        F = np.maximum(fscale * h0 - L, 0.0) / np.maximum(L, 1e-12)
        fvec = F[:, None] * vec
        force = np.zeros_like(pts)
        np.add.at(force, bars[:, 0], fvec)
        np.add.at(force, bars[:, 1], -fvec)
        force[:nfix] = 0.0
        step = deltat * force
        pts = pts + step
        d = sdf(pts)
        strayed = d > -0.45 * h0
        strayed[:nfix] = False
        if np.any(strayed):
            pts[strayed] = _project_to_level(pts[strayed], sdf, level=-0.5 * h0, steps=2)
        if np.linalg.norm(step[nfix:], axis=1).max(initial=0.0) < 2e-3 * h0:
            break

    tri = Delaunay(pts)
    cent = pts[tri.simplices].mean(axis=1)
    keep = tri.simplices[sdf(cent) < -geps]
    used = np.unique(keep.ravel())
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh = TriangleMesh(pts[used], remap[keep])

    group_of = np.full(len(pts), -1, dtype=np.int64)
    for g in range(len(seed_groups)):
        group_of[seed_starts[g]: seed_starts[g + 1]] = g
    group_used = group_of[used]
    for e in mesh.boundary_edges:
        g0, g1 = group_used[mesh.edges[e]]
        if g0 == g1 and g0 >= 0:
            mesh.edge_tags[e] = TAG_OUTER if g0 == 0 else TAG_OBSTACLE + (g0 - 1)
    return mesh


def triangulate(outer, holes=(), h=0.05, min_angle=20.0):
    """Mesh outer minus the closed holes with edges no longer than h.

    Plain boxes without holes get the exact staggered lattice; everything
    else goes through the relaxation mesher.  Quality is verified and the
    spacing is tightened once if the first pass comes out too coarse.
    """
    holes = list(holes)
    if isinstance(outer, Box) and not holes:
        mesh = _structured_box_mesh(outer, h)
        if mesh.h_max > h * (1 + 1e-9):
            raise MeshQualityError(f"edge length {mesh.h_max} exceeds target {h}")
        return mesh

    last_err = None
    for scale in (1.0, 0.92, 0.84):
        mesh = _relaxation_mesh(outer, holes, scale * h)
        ang = mesh.min_angle()
        if mesh.h_max <= h and ang >= min_angle:
            return mesh
        last_err = f"h_max={mesh.h_max:.4g} (target {h}), min angle={ang:.2f}"
    raise MeshQualityError(f"mesh quality not reached: {last_err}")


# ---------------------------------------------------------------------------
# fields


@dataclass
class ScalarField:
    """Nodal scalar field; degree 2 uses vertex plus midpoint values."""

    mesh: TriangleMesh
    values: np.ndarray
    degree: int = 2

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = self.mesh.num_p2_nodes if self.degree == 2 else self.mesh.num_vertices
        if len(self.values) != expected:
            raise ValueError(
                f"degree {self.degree} field needs {expected} values, got {len(self.values)}"
            )

    def element_values(self, bary):
        """Values at fixed barycentric points in every element, (nt, nq)."""
        if self.degree == 2:
            N = p2_shape(bary)
            dofs = self.values[self.mesh.tri_dofs]
        else:
            N = p1_shape(bary)
            dofs = self.values[self.mesh.triangles]
        return dofs @ N.T

    def element_gradients(self, bary):
        """Gradients at fixed barycentric points, (nt, nq, 2)."""
        if self.degree == 2:
            G = p2_shape_ref_grad(bary)  # (nq, nd, 2)
            dofs = self.values[self.mesh.tri_dofs]
        else:
            nq = len(np.atleast_2d(bary))
            G = np.broadcast_to(_P1_REF_GRAD, (nq, 3, 2))
            dofs = self.values[self.mesh.triangles]
        ref = np.einsum("ni,qij->nqj", dofs, G)
        return np.einsum("nqj,njk->nqk", ref, self.mesh.jac_inv)

    def eval(self, pts, outside=0.0):
        idx, bary = self.mesh.locate(pts)
        out = np.full(len(np.atleast_2d(pts)), float(outside))
        ok = idx >= 0
        if np.any(ok):
            if self.degree == 2:
                N = p2_shape(bary[ok])
                dofs = self.values[self.mesh.tri_dofs[idx[ok]]]
            else:
                N = p1_shape(bary[ok])
                dofs = self.values[self.mesh.triangles[idx[ok]]]
            out[ok] = np.sum(dofs * N, axis=1)
        return out

    def copy(self):
        return ScalarField(self.mesh, self.values.copy(), self.degree)


@dataclass
class VectorField:
    """Quadratic vector field; may carry the stream function it came from."""

    mesh: TriangleMesh
    values: np.ndarray  # (num_p2_nodes, 2)
    stream: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.num_p2_nodes, 2):
            raise ValueError("vector field needs (num_p2_nodes, 2) values")

    def component(self, i):
        return ScalarField(self.mesh, self.values[:, i], degree=2)

    def element_values(self, bary):
        N = p2_shape(bary)
        dofs = self.values[self.mesh.tri_dofs]  # (nt, 6, 2)
        return np.einsum("nic,qi->nqc", dofs, N)

    def element_gradients(self, bary):
        G = p2_shape_ref_grad(bary)
        dofs = self.values[self.mesh.tri_dofs]
        ref = np.einsum("nic,qij->nqcj", dofs, G)
        return np.einsum("nqcj,njk->nqck", ref, self.mesh.jac_inv)

    def eval(self, pts, outside=0.0):
        idx, bary = self.mesh.locate(pts)
        out = np.full((len(np.atleast_2d(pts)), 2), float(outside))
        ok = idx >= 0
        if np.any(ok):
            N = p2_shape(bary[ok])
            dofs = self.values[self.mesh.tri_dofs[idx[ok]]]
            out[ok] = np.einsum("nic,ni->nc", dofs, N)
        return out

    def support_nodes(self, tol=0.0):
        return np.nonzero(np.max(np.abs(self.values), axis=1) > tol)[0]

    def copy(self):
        return VectorField(self.mesh, self.values.copy(), stream=self.stream)


def add_fields(a, b, alpha=1.0):
    if a.mesh is not b.mesh:
        raise ValueError("fields live on different meshes")
    stream = None
    if getattr(a, "stream", None) is not None and getattr(b, "stream", None) is not None:
        stream = a.stream.combine(b.stream, alpha)
    return VectorField(a.mesh, a.values + alpha * b.values, stream=stream)


# ---------------------------------------------------------------------------
# integrals and norms


def integrate(field, degree=4):
    bary, w = triangle_rule(degree)
    vals = field.element_values(bary)
    if vals.ndim == 3:
        return np.einsum("nqc,q,n->c", vals, w, field.mesh.areas)
    return float(np.einsum("nq,q,n->", vals, w, field.mesh.areas))


def l2_norm(field, degree=4):
    bary, w = triangle_rule(degree)
    vals = field.element_values(bary)
    sq = vals**2 if vals.ndim == 2 else np.sum(vals**2, axis=-1)
    return float(np.sqrt(np.einsum("nq,q,n->", sq, w, field.mesh.areas)))


def h1_seminorm(field, degree=4):
    bary, w = triangle_rule(degree)
    grads = field.element_gradients(bary)
    sq = np.sum(grads**2, axis=tuple(range(2, grads.ndim)))
    return float(np.sqrt(np.einsum("nq,q,n->", sq, w, field.mesh.areas)))


def h1_norm(field, degree=4):
    return float(np.hypot(l2_norm(field, degree), h1_seminorm(field, degree)))


# ---------------------------------------------------------------------------
# weak divergence


def assemble_divergence_tests(u, use_stream=None):
    """Vector of integrals of u . grad(phi) over all linear hat functions.

    For fields carrying their stream function the element gradients are the
    rotated stream gradients, which makes the pairing telescope to the
    boundary term; otherwise the interpolated values are used directly.
    """
    mesh = u.mesh
    bary, w = triangle_rule(4)
    if use_stream is None:
        use_stream = u.stream is not None
    if use_stream:
        g = u.stream.psi.element_gradients(bary)
        uvals = np.stack([g[:, :, 1], -g[:, :, 0]], axis=-1)
    else:
        uvals = u.element_values(bary)
    gradp1 = np.einsum("ij,njk->nik", _P1_REF_GRAD, mesh.jac_inv)  # (nt, 3, 2)
    contrib = np.einsum("nqc,nic,q,n->ni", uvals, gradp1, w, mesh.areas)
    b = np.zeros(mesh.num_vertices)
    np.add.at(b, mesh.triangles.ravel(), contrib.ravel())
    return b


def weak_divergence_residual(u, use_stream=None):
    """Worst relative weak-divergence pairing over linear test functions."""
    mesh = u.mesh
    b = assemble_divergence_tests(u, use_stream=use_stream)
    nu = h1_norm(u)
    if nu == 0.0:
        return 0.0
    best = 0.0
    bary, w = triangle_rule(2)
    areas = mesh.areas
    mass_diag = np.zeros(mesh.num_vertices)
    np.add.at(
        mass_diag,
        mesh.triangles.ravel(),
        np.broadcast_to((areas / 6.0)[:, None], (len(areas), 3)).ravel(),
    )
    stiff_diag = np.zeros(mesh.num_vertices)
    gradp1 = np.einsum("ij,njk->nik", _P1_REF_GRAD, mesh.jac_inv)
    sq = np.sum(gradp1**2, axis=2) * areas[:, None]
    np.add.at(stiff_diag, mesh.triangles.ravel(), sq.ravel())
    phi_h1 = np.sqrt(mass_diag + stiff_diag)
    best = float(np.max(np.abs(b) / (phi_h1 * nu)))
    return best


# ---------------------------------------------------------------------------
# partition of unity


def _smoothstep(x):
    # quintic ramp: two continuous derivatives, so translated cutoffs
    # converge at the full first-order rate in the shift length
    y = np.clip(x, 0.0, 1.0)
    return y * y * y * (10.0 + y * (-15.0 + 6.0 * y))


@dataclass
class CutoffFunction:
    """Quadratic nodal cutoff supported strictly inside its region."""

    mesh: TriangleMesh
    region: object
    values: np.ndarray
    delta0: float
    width: float
    tau: float
    plateau_nodes: np.ndarray = field(repr=False, default=None)

    def as_field(self):
        return ScalarField(self.mesh, self.values, degree=2)

    def support_nodes(self):
        return np.nonzero(self.values > 0.0)[0]


@dataclass
class PartitionOfUnity:
    """Cutoffs plus the bookkeeping of where their sum is exactly one."""

    cutoffs: list
    plateau_nodes: np.ndarray
    delta_min: float
    delta0: float
    width: float
    tau: float

    def __iter__(self):
        return iter(self.cutoffs)

    def __len__(self):
        return len(self.cutoffs)

    def __getitem__(self, j):
        return self.cutoffs[j]


def build_partition_of_unity(regions, inner, mesh, tau=0.5, delta0=None, width=None):
    """Cutoffs chi_j subordinate to the covering that sum to one on a plateau.

    Bumps rise with distance into each region, offset so supports stay
    strictly inside even after spreading by one element ring, then get a
    shared normalization wherever the raw sum exceeds tau.  The inner region
    must be covered to depth at least two mesh widths; the bump width is
    tied to that geometric margin rather than to the mesh size, so the
    construction is stable under refinement.  With inner=None (coverings of
    a boundary band rather than of a full subregion) no coverage check is
    made and the scales come from the shallowest region.
    """
    nodes = mesh.p2_coords
    depths = np.stack([np.asarray(r.depth(nodes), dtype=float) for r in regions])
    cover = np.max(depths, axis=0)

    inner_pts = None
    if inner is not None:
        inner_pts = np.asarray(inner.contains(nodes, closed=True))
        if not np.any(inner_pts):
            raise GeometryError("inner region contains no mesh nodes")
        worst = int(np.argmin(np.where(inner_pts, cover, np.inf)))
        delta_min = float(cover[worst])
        if delta_min < 2.0 * mesh.h_max * (1.0 - 1e-9):
            x, y = nodes[worst]
            raise GeometryError(
                f"covering margin {delta_min:.4g} is below two mesh widths "
                f"({2 * mesh.h_max:.4g}) at node {worst} = ({x:.5g}, {y:.5g})"
            )
    else:
        delta_min = float(min(depths[j].max() for j in range(len(regions))))

    if delta0 is None:
        frac = 0.25 if inner is not None else 0.2
        delta0 = max(1.15 * mesh.h_max, frac * delta_min)
    if width is None:
        if inner is not None:
            width = 1.5 * (delta_min - delta0)
        else:
            width = max(0.8 * (delta_min - delta0), 1.5 * mesh.h_max)
    if width <= 0 or delta_min <= delta0:
        raise GeometryError(
            f"covering margin {delta_min:.4g} too thin for offset {delta0:.4g} "
            f"and width {width:.4g}"
        )

    bumps = _smoothstep((depths - delta0) / width)
    total = bumps.sum(axis=0)
    plateau_nodes = total >= tau
    if inner is not None:
        gap = inner_pts & ~plateau_nodes
        if np.any(gap):
            worst = int(np.argmin(np.where(gap, total, np.inf)))
            x, y = nodes[worst]
            raise GeometryError(
                f"covering gap: node {worst} = ({x:.5g}, {y:.5g}) inside the "
                f"inner region has bump sum {total[worst]:.3g} < tau = {tau}"
            )
    # smooth floor: equals the bump sum at and above tau, stays >= tau/3
    # below it, and meets it with two continuous derivatives, so the
    # normalized cutoffs carry no gradient jump across the tau contour
    y = np.minimum(total / tau, 1.0)
    denom = np.where(total >= tau, total, tau * (y - (y - 1.0) ** 3 / 3.0))
    cutoffs = [
        CutoffFunction(
            mesh=mesh,
            region=r,
            values=bumps[j] / denom,
            delta0=float(delta0),
            width=float(width),
            tau=tau,
            plateau_nodes=plateau_nodes,
        )
        for j, r in enumerate(regions)
    ]
    return PartitionOfUnity(
        cutoffs=cutoffs,
        plateau_nodes=plateau_nodes,
        delta_min=float(delta_min),
        delta0=float(delta0),
        width=float(width),
        tau=float(tau),
    )


# ---------------------------------------------------------------------------
# transfer between meshes


def extend_by_zero(u, target_mesh):
    """Interpolate a field onto another mesh, zero where it is not defined."""
    pts = target_mesh.p2_coords
    if isinstance(u, VectorField):
        vals = u.eval(pts, outside=0.0)
        return VectorField(target_mesh, vals)
    vals = u.eval(pts, outside=0.0)
    return ScalarField(target_mesh, vals, degree=2)


def restrict(u, region):
    """Zero all nodal values outside the region; returns a new field."""
    mask = np.asarray(region.contains(u.mesh.p2_coords, closed=True))
    if isinstance(u, VectorField):
        vals = u.values * mask[:, None]
        return VectorField(u.mesh, vals)
    return ScalarField(u.mesh, u.values * mask, degree=u.degree)


# ---------------------------------------------------------------------------
# field I/O


def save_scalar_csv(field, path):
    with open(path, "w") as f:
        f.write("node,x,y,value\n")
        coords = field.mesh.p2_coords if field.degree == 2 else field.mesh.vertices
        for i, ((x, y), v) in enumerate(zip(coords, field.values)):
            f.write(f"{i},{float(x)!r},{float(y)!r},{float(v)!r}\n")


def save_vector_csv(field, path):
    with open(path, "w") as f:
        f.write("node,x,y,vx,vy\n")
        for i, ((x, y), (vx, vy)) in enumerate(zip(field.mesh.p2_coords, field.values)):
            f.write(f"{i},{float(x)!r},{float(y)!r},{float(vx)!r},{float(vy)!r}\n")


def load_vector_csv(mesh, path):
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    if len(data) != mesh.num_p2_nodes:
        raise ValueError("node count mismatch between mesh and field file")
    return VectorField(mesh, data[:, 3:5])


def load_scalar_csv(mesh, path, degree=2):
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    expected = mesh.num_p2_nodes if degree == 2 else mesh.num_vertices
    if len(data) != expected:
        raise ValueError("node count mismatch between mesh and field file")
    return ScalarField(mesh, data[:, 3], degree=degree)


# ---------------------------------------------------------------------------
# scalar assembly helpers shared by the stream and flow solvers


def assemble_p2_stiffness(mesh):
    bary, w = triangle_rule(2)
    G = p2_shape_ref_grad(bary)
    phys = np.einsum("qij,njk->nqik", G, mesh.jac_inv)
    local = np.einsum("nqik,nqjk,q,n->nij", phys, phys, w, mesh.areas)
    dofs = mesh.tri_dofs
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = mesh.num_p2_nodes
    return coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_p2_mass(mesh):
    bary, w = triangle_rule(4)
    N = p2_shape(bary)
    local = np.einsum("qi,qj,q,n->nij", N, N, w, mesh.areas)
    dofs = mesh.tri_dofs
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = mesh.num_p2_nodes
    return coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
