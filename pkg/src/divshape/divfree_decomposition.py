"""Divergence-free partitions through stream functions.

Every solenoidal velocity here is the rotated gradient of a quadratic
stream, projected to the nodal space by averaging element gradients.
Because that projection is linear and local, cutting a stream with a
partition of unity and re-differentiating gives pieces that sum back to
the original field exactly at nodes, vanish where the cutoffs vanish, and
stay weakly divergence-free to rounding.  On top of that sit the localized
variant (pieces vanishing on obstacle components, with per-component gauge
constants), the period/potential construction for multiply connected
regions, and the shifted-field machinery that witnesses the density of
compactly supported solenoidal fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import (
    breadth_first_order,
    connected_components,
    depth_first_order,
)
from scipy.sparse.linalg import splu, spsolve

from .domain_geometry import Box, Disk, boundary_strips
from .errors import GeometryError, InvariantViolation
from .mesh_fields import (
    ScalarField,
    VectorField,
    _P2_NODE_BARY,
    assemble_p2_stiffness,
    build_partition_of_unity,
    h1_norm,
    l2_norm,
    p2_shape_ref_grad,
    save_scalar_csv,
    save_vector_csv,
    triangle_rule,
    weak_divergence_residual,
)

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# streams and their curls


@dataclass
class StreamField:
    """Quadratic stream function with a pinned gauge.

    base_constant records any constant split off the raw stream (the gauge
    value subtracted before cutting), fit_residual the relative mismatch of
    the least-squares fit that produced psi, zero for streams carried along
    exactly.
    """

    psi: ScalarField
    base_constant: float = 0.0
    fit_residual: float = 0.0

    @property
    def mesh(self):
        return self.psi.mesh

    def combine(self, other, alpha=1.0):
        if other.mesh is not self.mesh:
            return None
        return StreamField(
            ScalarField(self.mesh, self.psi.values + alpha * other.psi.values),
            base_constant=self.base_constant + alpha * other.base_constant,
        )

    def shifted(self, constant):
        return StreamField(
            ScalarField(self.mesh, self.psi.values - constant),
            base_constant=self.base_constant + constant,
            fit_residual=self.fit_residual,
        )


def _element_node_grads(mesh, values):
    """Gradients of a quadratic nodal scalar at the six nodes of each element."""
    G = p2_shape_ref_grad(_P2_NODE_BARY)  # (6 positions, 6 basis, 2)
    dofs = values[mesh.tri_dofs]
    ref = np.einsum("ni,qij->nqj", dofs, G)
    return np.einsum("nqj,njk->nqk", ref, mesh.jac_inv)


def curl_of_stream(psi):
    """Rotated stream gradient (psi_y, -psi_x), averaged back to the nodes.

    Accepts a StreamField or a plain quadratic ScalarField; the returned
    velocity carries its stream, which the weak-divergence check exploits.
    """
    stream = psi if isinstance(psi, StreamField) else StreamField(psi)
    mesh = stream.mesh
    grads = _element_node_grads(mesh, stream.psi.values)
    rot = np.stack([grads[:, :, 1], -grads[:, :, 0]], axis=-1)
    acc = np.zeros((mesh.num_p2_nodes, 2))
    np.add.at(acc, mesh.tri_dofs.ravel(), rot.reshape(-1, 2))
    acc /= mesh.node_triangle_counts().astype(float)[:, None]
    return VectorField(mesh, acc, stream=stream)


def build_curl_matrix(mesh):
    """Sparse map from stream values to averaged-curl nodal values.

    Row 2g holds the first velocity component at node g, row 2g+1 the
    second.  The kernel consists of the constants only, so pinning one
    value makes least-squares fits against this map unique.
    """
    counts = mesh.node_triangle_counts().astype(float)
    G = p2_shape_ref_grad(_P2_NODE_BARY)
    phys = np.einsum("qij,njk->nqik", G, mesh.jac_inv)  # (nt, 6 pos, 6 basis, 2)
    dofs = mesh.tri_dofs
    node_ids = np.repeat(dofs[:, :, None], 6, axis=2)
    basis_ids = np.repeat(dofs[:, None, :], 6, axis=1)
    weight = 1.0 / counts[node_ids]
    rows = np.concatenate([(2 * node_ids).ravel(), (2 * node_ids + 1).ravel()])
    cols = np.concatenate([basis_ids.ravel(), basis_ids.ravel()])
    vals = np.concatenate(
        [(phys[:, :, :, 1] * weight).ravel(), (-phys[:, :, :, 0] * weight).ravel()]
    )
    n = mesh.num_p2_nodes
    return coo_matrix((vals, (rows, cols)), shape=(2 * n, n)).tocsr()


def _exactify_stream(mesh, psi0, u_values, base, sweeps=4):
    """Least-squares polish so the averaged curl of psi reproduces u.

    Gauge pinned at the base node; a few rounds of iterative refinement on
    the normal equations drive fields in the range of the curl map down to
    rounding.
    """
    C = build_curl_matrix(mesh)
    n = mesh.num_p2_nodes
    free = np.ones(n, dtype=bool)
    free[base] = False
    Cf = C[:, free].tocsc()
    lu = splu((Cf.T @ Cf).tocsc())
    target = u_values.ravel()
    psi = np.asarray(psi0, dtype=float).copy()
    psi -= psi[base]
    for _ in range(sweeps):
        r = target - C @ psi
        psi[free] += lu.solve(Cf.T @ r)
    resid = float(np.linalg.norm(target - C @ psi))
    scale = float(np.linalg.norm(target))
    return psi, (resid / scale if scale > 0 else resid)


def _boundary_vertex_components(mesh):
    """Connected components of the boundary edge graph, as vertex id lists."""
    bedges = mesh.edges[mesh.boundary_edges]
    if len(bedges) == 0:
        return []
    nv = mesh.num_vertices
    adj = coo_matrix(
        (np.ones(len(bedges)), (bedges[:, 0], bedges[:, 1])), shape=(nv, nv)
    )
    _, labels = connected_components(adj + adj.T, directed=False)
    touched = np.unique(bedges.ravel())
    comps = []
    for lab in np.unique(labels[touched]):
        comps.append(touched[labels[touched] == lab])
    return comps


def stream_function(u, method="poisson", base=None, div_tol=1e-8):
    """Recover a stream whose averaged curl reproduces the field.

    "poisson" solves the weak Laplace problem for psi with zero boundary
    values, "path" integrates u1*dx2 - u2*dx1 edge by edge along a spanning
    tree of the mesh.  Both initial guesses are then polished by the same
    pinned least-squares fit against the averaged-curl map, so either route
    reproduces a curl-generated field to rounding and the two agree up to
    the fit tolerance.  Requires a simply connected mesh.

    The solenoidality precondition is measured through the carried stream
    when the field has one; a field that lost its stream measures through
    its interpolant, which carries O(h^2) projection noise on top, so such
    callers may need to widen div_tol accordingly.
    """
    mesh = u.mesh
    if len(_boundary_vertex_components(mesh)) > 1:
        raise GeometryError(
            "mesh is multiply connected; use periods_and_potential to remove "
            "the periods first"
        )
    resid_in = weak_divergence_residual(u)
    if resid_in > div_tol:
        raise InvariantViolation(
            f"field is not weakly divergence-free (residual {resid_in:.3e} "
            f"> {div_tol:.1e})"
        )
    outer = mesh.boundary_p2_nodes()
    if base is None:
        base = int(outer[0]) if len(outer) else 0

    if method == "poisson":
        psi0 = _poisson_stream(u, outer)
    elif method == "path":
        psi0 = _path_stream(u, base)
    else:
        raise ValueError(f"unknown stream method {method!r}")

    psi, resid = _exactify_stream(mesh, psi0, u.values, base)
    return StreamField(ScalarField(mesh, psi, degree=2), fit_residual=resid)


def _poisson_stream(u, dirichlet_nodes):
    mesh = u.mesh
    K = assemble_p2_stiffness(mesh).tolil()
    bary, w = triangle_rule(4)
    uvals = u.element_values(bary)
    gpsi = np.stack([-uvals[:, :, 1], uvals[:, :, 0]], axis=-1)
    G = p2_shape_ref_grad(bary)
    phys = np.einsum("qij,njk->nqik", G, mesh.jac_inv)
    contrib = np.einsum("nqc,nqic,q,n->ni", gpsi, phys, w, mesh.areas)
    b = np.zeros(mesh.num_p2_nodes)
    np.add.at(b, mesh.tri_dofs.ravel(), contrib.ravel())
    for g in dirichlet_nodes:
        K.rows[g] = [g]
        K.data[g] = [1.0]
        b[g] = 0.0
    return spsolve(K.tocsr(), b)


def _quarter_point(q0, qm, q1):
    """Value of the edge-trace quadratic at s = 1/4 from its three nodes."""
    return (3.0 * q0 + 6.0 * qm - q1) / 8.0


def _simpson_edge_form_integrals(mesh, values):
    """Exact integrals of a nodal 1-form a*dx1 + b*dx2 along all mesh edges.

    The restriction of a quadratic to an edge is the quadratic through its
    three nodes, so Simpson is exact.  Returns (full, half): integrals over
    the whole edge and over its first half, oriented from edges[:, 0].
    """
    v0, v1 = mesh.edges[:, 0], mesh.edges[:, 1]
    q0 = values[v0]
    q1 = values[v1]
    qm = values[mesh.num_vertices + np.arange(mesh.num_edges)]
    delta = mesh.vertices[v1] - mesh.vertices[v0]
    s_full = (q0 + 4.0 * qm + q1) / 6.0
    qq = _quarter_point(q0, qm, q1)
    s_half = (q0 + 4.0 * qq + qm) / 6.0
    full = delta[:, 0] * s_full[:, 0] + delta[:, 1] * s_full[:, 1]
    half = 0.5 * (delta[:, 0] * s_half[:, 0] + delta[:, 1] * s_half[:, 1])
    return full, half


def _vertex_adjacency(mesh):
    e = mesh.edges
    nv = mesh.num_vertices
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(nv, nv))
    return (adj + adj.T).tocsr()


def _edge_lookup(mesh):
    return {(int(a), int(b)): e for e, (a, b) in enumerate(mesh.edges)}


def _integrate_over_tree(mesh, full, half, base_vertex, order_fn=breadth_first_order):
    """Potential from per-edge integrals, accumulated along a spanning tree."""
    adj = _vertex_adjacency(mesh)
    order, pred = order_fn(adj, base_vertex, directed=False, return_predecessors=True)
    lut = _edge_lookup(mesh)
    psi_v = np.zeros(mesh.num_vertices)
    edges = mesh.edges
    for v in order[1:]:
        p = int(pred[v])
        e = lut[(p, v) if p < v else (v, p)]
        psi_v[v] = psi_v[p] + (full[e] if edges[e, 0] == p else -full[e])
    psi_mid = psi_v[edges[:, 0]] + half
    return np.concatenate([psi_v, psi_mid])


def _path_stream(u, base):
    """Spanning-tree integration of the stream increments -u2*dx1 + u1*dx2."""
    mesh = u.mesh
    rotated = np.stack([-u.values[:, 1], u.values[:, 0]], axis=-1)
    full, half = _simpson_edge_form_integrals(mesh, rotated)
    base_vertex = int(base) if base < mesh.num_vertices else int(
        mesh.edges[base - mesh.num_vertices, 0]
    )
    return _integrate_over_tree(mesh, full, half, base_vertex)


# ---------------------------------------------------------------------------
# partitions of a divergence-free field


@dataclass
class DecompositionResult:
    """Pieces of a solenoidal field cut along a partition of unity.

    valid_nodes flags the nodes whose whole element patch lies on the
    plateau (and, for localized cuts, sees a single gauge constant); the
    nodal identity sum(pieces) = u holds there to rounding.
    """

    mesh: object
    regions: list
    pieces: list
    partition: object
    stream: StreamField
    constants: np.ndarray
    valid_nodes: np.ndarray
    sum_error: float
    piece_residuals: list
    constant_estimate: float
    stream_residual: float
    inner: object = None
    component_constants: list = dc_field(default_factory=list)
    constant_stddevs: list = dc_field(default_factory=list)
    constant_flags: list = dc_field(default_factory=list)
    component_of_region: list = dc_field(default_factory=list)
    localization_errors: list = dc_field(default_factory=list)

    def summed(self):
        out = self.pieces[0].copy()
        vals = out.values.copy()
        stream = self.pieces[0].stream
        for p in self.pieces[1:]:
            vals += p.values
            stream = stream.combine(p.stream) if stream is not None else None
        return VectorField(self.mesh, vals, stream=stream)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.mesh.save(d / "mesh.txt")
        save_scalar_csv(self.stream.psi, d / "stream.csv")
        for j, p in enumerate(self.pieces):
            save_vector_csv(p, d / f"piece_{j:02d}.csv")
        summary = {
            "num_pieces": len(self.pieces),
            "C": self.constant_estimate,
            "residuals": list(map(float, self.piece_residuals)),
            "validity_region": {
                "valid_fraction": float(np.mean(self.valid_nodes)),
                "num_valid": int(np.sum(self.valid_nodes)),
            },
            "sum_error": self.sum_error,
            "stream_residual": self.stream_residual,
            "constants": list(map(float, self.constants)),
            "component_constants": list(map(float, self.component_constants)),
        }
        with open(d / "summary.json", "w") as f:
            json.dump(summary, f, indent=1, sort_keys=True)
            f.write("\n")
        return d


def _pieces_from_stream(stream, pu, constants):
    mesh = stream.mesh
    pieces = []
    for chi, c in zip(pu, constants):
        vals = chi.values * (stream.psi.values - c)
        pieces.append(
            curl_of_stream(
                StreamField(ScalarField(mesh, vals, degree=2), base_constant=c)
            )
        )
    return pieces


def _validity_mask(mesh, pu, constants):
    plateau = pu.plateau_nodes
    elem_ok = plateau[mesh.tri_dofs].all(axis=1)
    constants = np.asarray(constants, dtype=float)
    if np.any(constants != 0.0):
        mixing = np.zeros(mesh.num_p2_nodes)
        for chi, c in zip(pu, constants):
            mixing += c * chi.values
        spread = np.ptp(mixing[mesh.tri_dofs], axis=1)
        elem_ok &= spread <= 1e-12 * (1.0 + np.max(np.abs(constants)))
    valid = np.zeros(mesh.num_p2_nodes, dtype=bool)
    valid[mesh.tri_dofs[elem_ok].ravel()] = True
    valid[mesh.tri_dofs[~elem_ok].ravel()] = False
    return valid


def _finish_decomposition(u, stream, pu, constants, regions, inner, **extra):
    mesh = u.mesh
    pieces = _pieces_from_stream(stream, pu, constants)
    valid = _validity_mask(mesh, pu, constants)
    if not np.any(valid):
        raise GeometryError("empty validity region; the covering is too tight")
    total = np.zeros_like(u.values)
    for p in pieces:
        total += p.values
    scale = float(np.max(np.abs(u.values))) or 1.0
    sum_error = float(np.max(np.abs(total[valid] - u.values[valid])) / scale)
    residuals = [weak_divergence_residual(p) for p in pieces]
    nu = h1_norm(u)
    est = max(h1_norm(p) for p in pieces) / nu if nu > 0 else 0.0
    return DecompositionResult(
        mesh=mesh,
        regions=list(regions),
        pieces=pieces,
        partition=pu,
        stream=stream,
        constants=np.asarray(constants, dtype=float),
        valid_nodes=valid,
        sum_error=sum_error,
        piece_residuals=residuals,
        constant_estimate=float(est),
        stream_residual=stream.fit_residual,
        inner=inner,
        **extra,
    )


def decompose(u, regions, inner, tau=0.5, delta0=None, width=None, method="poisson"):
    """Cut a solenoidal field into solenoidal pieces supported in the regions.

    The pieces are curls of the cutoff-multiplied stream, so each is weakly
    divergence-free to rounding, vanishes identically outside its region,
    and the sum reproduces u exactly at every node of the validity region
    (all nodes whose element patch lies on the cutoff plateau covering the
    inner region).
    """
    stream = u.stream if u.stream is not None else stream_function(u, method=method)
    pu = build_partition_of_unity(
        regions, inner, u.mesh, tau=tau, delta0=delta0, width=width
    )
    return _finish_decomposition(
        u, stream, pu, np.zeros(len(regions)), regions, inner
    )


def decompose_covering(u, covering, radius, tau=0.5, delta0=None, width=None,
                       method="poisson"):
    """Partition along a finite covering of the whole meshed closure.

    Every region must fit in the centered ball of the given radius, and the
    covering must reach depth two mesh widths at every node; the validity
    region is then the entire mesh.
    """
    mesh = u.mesh
    for j, r in enumerate(covering):
        x0, y0, x1, y1 = r.bbox()
        reach = max(np.hypot(x, y) for x in (x0, x1) for y in (y0, y1))
        if reach > radius:
            raise GeometryError(
                f"covering region {j} reaches {reach:.4g} > ball radius {radius:.4g}"
            )
    x0, y0 = mesh.vertices.min(axis=0)
    x1, y1 = mesh.vertices.max(axis=0)
    hull = Box(x0, y0, x1, y1)
    stream = u.stream if u.stream is not None else stream_function(u, method=method)
    pu = build_partition_of_unity(
        covering, hull, mesh, tau=tau, delta0=delta0, width=width
    )
    return _finish_decomposition(
        u, stream, pu, np.zeros(len(covering)), covering, hull
    )


def localized_decompose(u, obstacles, regions, tau=0.5, delta0=None, width=None,
                        method="poisson", zero_tol=1e-12):
    """Boundary-band partition whose pieces vanish on the obstacle components.

    u must vanish at every node on the closed obstacles; the stream is then
    constant on each obstacle component up to the fit residual, the mean
    value over its nodes is subtracted per component before cutting, and
    each piece vanishes on every component its region does not meet.
    """
    mesh = u.mesh
    nodes = mesh.p2_coords
    scale = float(np.max(np.abs(u.values))) or 1.0
    inside_masks = []
    for i, ob in enumerate(obstacles):
        mask = np.asarray(ob.contains(nodes, closed=True))
        if not np.any(mask):
            raise GeometryError(f"obstacle {i} contains no mesh nodes")
        worst = float(np.max(np.abs(u.values[mask])))
        if worst > zero_tol * scale:
            raise InvariantViolation(
                f"field does not vanish on obstacle {i}: max nodal value "
                f"{worst:.3e} exceeds {zero_tol:.1e} * {scale:.3e}"
            )
        inside_masks.append(mask)

    stream = u.stream if u.stream is not None else stream_function(u, method=method)
    psi = stream.psi.values
    psi_scale = l2_norm(stream.psi)
    comp_constants, stddevs, flags = [], [], []
    for mask in inside_masks:
        comp_constants.append(float(np.mean(psi[mask])))
        stddevs.append(float(np.std(psi[mask])))
        flags.append(stddevs[-1] <= 1e-6 * max(psi_scale, 1e-300))

    comp_of_region, constants = [], []
    for j, r in enumerate(regions):
        in_region = np.asarray(r.contains(nodes, closed=True))
        met = [i for i, m in enumerate(inside_masks) if np.any(in_region & m)]
        if len(met) > 1:
            raise GeometryError(
                f"region {j} meets obstacle components {met}; each region may "
                "meet at most one component closure"
            )
        comp_of_region.append(met[0] if met else None)
        constants.append(comp_constants[met[0]] if met else 0.0)

    pu = build_partition_of_unity(
        regions, None, mesh, tau=tau, delta0=delta0, width=width
    )
    result = _finish_decomposition(
        u, stream, pu, constants, regions, None,
        component_constants=comp_constants,
        constant_stddevs=stddevs,
        constant_flags=flags,
        component_of_region=comp_of_region,
    )
    loc = []
    for mask in inside_masks:
        worst = 0.0
        for p in result.pieces:
            worst = max(worst, float(np.max(np.abs(p.values[mask]))))
        loc.append(worst / scale)
    result.localization_errors = loc
    return result


# ---------------------------------------------------------------------------
# one-forms with exact line integrals

# Periods must cancel to rounding, which rules out quadrature on the
# singular reference forms; winding and gradient forms therefore carry
# closed-form segment integrals, and nodal forms are integrated exactly
# along mesh edges through their quadratic traces.


class WindingForm:
    """The closed form dtheta / 2pi around a center."""

    def __init__(self, center):
        self.center = np.asarray(center, dtype=float)

    def eval(self, pts):
        rel = np.atleast_2d(pts) - self.center
        r2 = np.sum(rel**2, axis=1)
        return np.column_stack([-rel[:, 1], rel[:, 0]]) / (TWO_PI * r2[:, None])

    def segment_integrals(self, p0, p1):
        d0 = np.atleast_2d(p0) - self.center
        d1 = np.atleast_2d(p1) - self.center
        cross = d0[:, 0] * d1[:, 1] - d0[:, 1] * d1[:, 0]
        dot = np.sum(d0 * d1, axis=1)
        return np.arctan2(cross, dot) / TWO_PI

    def line_integral(self, pts, closed=False):
        pts = np.atleast_2d(pts)
        ring = np.vstack([pts, pts[:1]]) if closed else pts
        return float(np.sum(self.segment_integrals(ring[:-1], ring[1:])))


class GradientForm:
    """The exact differential of a given potential."""

    def __init__(self, func, grad):
        self.func = func
        self.grad = grad

    def eval(self, pts):
        return np.asarray(self.grad(np.atleast_2d(pts)), dtype=float)

    def segment_integrals(self, p0, p1):
        return np.asarray(self.func(np.atleast_2d(p1)), dtype=float) - np.asarray(
            self.func(np.atleast_2d(p0)), dtype=float
        )

    def line_integral(self, pts, closed=False):
        if closed:
            return 0.0
        pts = np.atleast_2d(pts)
        return float(self.func(pts[-1:]) - self.func(pts[:1]))


class NodalForm:
    """A 1-form with quadratic nodal coefficients on a mesh."""

    def __init__(self, field):
        self.field = field

    @property
    def mesh(self):
        return self.field.mesh

    def eval(self, pts):
        return self.field.eval(pts, outside=np.nan)

    def segment_integrals(self, p0, p1, spacing=None):
        p0 = np.atleast_2d(p0)
        p1 = np.atleast_2d(p1)
        if spacing is None:
            spacing = 0.5 * self.mesh.h_max
        lengths = np.linalg.norm(p1 - p0, axis=1)
        nsub = max(1, int(np.ceil(np.max(lengths) / spacing)))
        gauss_x = np.array([0.5 - np.sqrt(0.15), 0.5, 0.5 + np.sqrt(0.15)])
        gauss_w = np.array([5.0, 8.0, 5.0]) / 18.0
        out = np.zeros(len(p0))
        delta = (p1 - p0) / nsub
        for k in range(nsub):
            a = p0 + k * delta
            for x, w in zip(gauss_x, gauss_w):
                vals = self.eval(a + x * delta)
                if np.any(np.isnan(vals)):
                    raise GeometryError(
                        "line integral leaves the meshed region"
                    )
                out += w * np.sum(vals * delta, axis=1)
        return out

    def line_integral(self, pts, closed=False):
        pts = np.atleast_2d(pts)
        ring = np.vstack([pts, pts[:1]]) if closed else pts
        return float(np.sum(self.segment_integrals(ring[:-1], ring[1:])))

    def edge_integrals(self, mesh):
        if mesh is not self.mesh:
            raise GeometryError("nodal form lives on a different mesh")
        return _simpson_edge_form_integrals(mesh, self.field.values)

    def element_curl_max(self):
        bary, _ = triangle_rule(2)
        g = self.field.element_gradients(bary)  # (nt, nq, comp, dim)
        return float(np.max(np.abs(g[:, :, 1, 0] - g[:, :, 0, 1])))


class FormSum:
    """Linear combination of forms, integrated term by term."""

    def __init__(self, terms):
        self.terms = [(float(c), f) for c, f in terms]

    def eval(self, pts):
        out = np.zeros_like(np.atleast_2d(pts), dtype=float)
        for c, f in self.terms:
            out = out + c * f.eval(pts)
        return out

    def segment_integrals(self, p0, p1):
        out = np.zeros(len(np.atleast_2d(p0)))
        for c, f in self.terms:
            out = out + c * f.segment_integrals(p0, p1)
        return out

    def line_integral(self, pts, closed=False):
        return float(
            sum(c * f.line_integral(pts, closed=closed) for c, f in self.terms)
        )

    def edge_integrals(self, mesh):
        full = np.zeros(mesh.num_edges)
        half = np.zeros(mesh.num_edges)
        p0 = mesh.vertices[mesh.edges[:, 0]]
        p1 = mesh.vertices[mesh.edges[:, 1]]
        mid = 0.5 * (p0 + p1)
        for c, f in self.terms:
            if isinstance(f, NodalForm):
                fe, he = f.edge_integrals(mesh)
            else:
                fe = f.segment_integrals(p0, p1)
                he = f.segment_integrals(p0, mid)
            full += c * fe
            half += c * he
        return full, half

    def nodal_terms(self):
        return [(c, f) for c, f in self.terms if isinstance(f, NodalForm)]

    def analytic_only(self):
        return not self.nodal_terms()


def as_form(tau):
    if isinstance(tau, (WindingForm, GradientForm, NodalForm, FormSum)):
        return tau if isinstance(tau, FormSum) else FormSum([(1.0, tau)])
    if isinstance(tau, VectorField):
        return FormSum([(1.0, NodalForm(tau))])
    raise TypeError(f"cannot interpret {type(tau).__name__} as a 1-form")


# ---------------------------------------------------------------------------
# periods and potentials on multiply connected regions


@dataclass
class PeriodPotential:
    """Period-corrected potential of a closed form on a holed region.

    periods holds one constant per hole (the coefficients against the
    reference winding forms); tau_hat is the input minus that combination;
    potential integrates tau_hat along a spanning tree from the base
    vertex, and max_cycle_defect is the worst closed-loop integral over all
    mesh cycles, the discrete path-independence certificate.  hull_domain
    is a region containing the meshed one with room for the strip
    extension.
    """

    mesh: object
    form: FormSum
    tau_hat: FormSum
    hole_centers: np.ndarray
    raw_periods: np.ndarray
    periods: np.ndarray
    period_matrix: np.ndarray
    reference_forms: list
    potential: ScalarField
    base_vertex: int
    max_cycle_defect: float
    grad_consistency: float
    hull_domain: object = None
    _edge_full: np.ndarray = dc_field(repr=False, default=None)
    _edge_half: np.ndarray = dc_field(repr=False, default=None)

    def reference_fields(self):
        """Nodal snapshots of the reference forms as coefficient pairs."""
        pts = self.mesh.p2_coords
        return [VectorField(self.mesh, r.eval(pts)) for r in self.reference_forms]

    def check_loops(self, loops):
        """Corrected-form integrals around the given closed polylines."""
        rows = []
        for loop in loops:
            loop = np.atleast_2d(loop)
            ring = np.vstack([loop, loop[:1]])
            length = float(np.sum(np.linalg.norm(np.diff(ring, axis=0), axis=1)))
            rows.append(
                {
                    "integral": self.tau_hat.line_integral(loop, closed=True),
                    "length": length,
                }
            )
        return rows

    def alternate_tree_difference(self):
        """Max potential difference against a depth-first spanning tree."""
        alt = _integrate_over_tree(
            self.mesh,
            self._edge_full,
            self._edge_half,
            self.base_vertex,
            order_fn=depth_first_order,
        )
        return float(np.max(np.abs(alt - self.potential.values)))

    def extend(self, hole_domain, depth=None):
        return PotentialExtension.build(self, hole_domain, depth=depth)


def periods_and_potential(tau, mesh, loops, base_vertex=0, curl_tol=1e-8):
    """Remove the periods of a closed form and integrate what remains.

    loops must encircle the holes one-to-one (any orientation); the
    reference forms are winding forms about the hole centroids.  The
    potential is exact along mesh edges because every term is integrated in
    closed form, so path independence holds to rounding for analytic
    inputs.
    """
    form = as_form(tau)
    comps = _boundary_vertex_components(mesh)
    if len(comps) < 2:
        raise GeometryError(
            "region is simply connected; stream_function handles this case"
        )
    spans = []
    for comp in comps:
        pts = mesh.vertices[comp]
        spans.append(float(np.prod(pts.max(axis=0) - pts.min(axis=0))))
    outer = int(np.argmax(spans))
    holes = [c for i, c in enumerate(comps) if i != outer]
    if len(loops) != len(holes):
        raise GeometryError(
            f"{len(holes)} holes need {len(holes)} loops, got {len(loops)}"
        )
    centers = np.array([mesh.vertices[c].mean(axis=0) for c in holes])

    scale = 1.0
    for c, f in form.nodal_terms():
        vals = f.field.values
        scale = max(scale, float(np.max(np.abs(vals))))
        worst = f.element_curl_max()
        if worst > curl_tol * scale:
            raise InvariantViolation(
                f"form is not closed: element curl {worst:.3e} exceeds "
                f"{curl_tol:.1e} * {scale:.3g}"
            )

    refs = [WindingForm(c) for c in centers]
    P = np.array(
        [[r.line_integral(loop, closed=True) for r in refs] for loop in loops]
    )
    if abs(np.linalg.det(P)) < 1e-6:
        raise GeometryError("loops do not span the holes independently")
    raw = np.array([form.line_integral(loop, closed=True) for loop in loops])
    consts = np.linalg.solve(P, raw)
    tau_hat = FormSum(form.terms + [(-c, r) for c, r in zip(consts, refs)])
    x0, y0 = mesh.vertices.min(axis=0)
    x1, y1 = mesh.vertices.max(axis=0)
    pad = 0.05 * max(x1 - x0, y1 - y0)
    hull = Box(x0 - pad, y0 - pad, x1 + pad, y1 + pad)

    full, half = tau_hat.edge_integrals(mesh)
    values = _integrate_over_tree(mesh, full, half, base_vertex)
    defect = float(
        np.max(
            np.abs(
                values[mesh.edges[:, 1]] - values[mesh.edges[:, 0]] - full
            )
        )
    )
    potential = ScalarField(mesh, values, degree=2)

    bary, w = triangle_rule(2)
    tris = mesh.vertices[mesh.triangles]
    qpts = np.einsum("qi,nij->nqj", bary, tris).reshape(-1, 2)
    target = tau_hat.eval(qpts).reshape(len(tris), len(bary), 2)
    got = potential.element_gradients(bary)
    num = np.einsum("nqc,q,n->", (got - target) ** 2, w, mesh.areas)
    den = np.einsum("nqc,q,n->", target**2, w, mesh.areas)
    grad_consistency = float(np.sqrt(num / den)) if den > 0 else 0.0

    return PeriodPotential(
        mesh=mesh,
        form=form,
        tau_hat=tau_hat,
        hole_centers=centers,
        raw_periods=raw,
        periods=consts,
        period_matrix=P,
        reference_forms=refs,
        potential=potential,
        base_vertex=int(base_vertex),
        max_cycle_defect=defect,
        grad_consistency=grad_consistency,
        hull_domain=hull,
        _edge_full=full,
        _edge_half=half,
    )


@dataclass
class PotentialExtension:
    """Potential continued across a hole boundary through its strips.

    Points are addressed in strip coordinates (s, t) with t measured along
    the outward normal of the surrounding region, so t < 0 is the fluid
    side and t > 0 pokes into the hole.  Each value integrates the
    corrected form along the segment from the strip's deep fluid cap, whose
    own value is anchored to the nearest mesh vertex.
    """

    parent: PeriodPotential
    hole: object
    strips: list
    anchor_values: list

    @classmethod
    def build(cls, parent, hole_domain, depth=None):
        strips = boundary_strips(hole_domain, depth=depth)
        mesh = parent.mesh
        from scipy.spatial import cKDTree

        tree = cKDTree(mesh.vertices)
        anchors = []
        for strip in strips:
            # deep fluid cap: the strip's exterior side relative to the hole
            cap = strip.point(np.array([0.0]), strip.depth)
            dist, v = tree.query(cap[0])
            seg = parent.tau_hat.segment_integrals(
                mesh.vertices[v][None, :], cap
            )
            anchors.append(float(parent.potential.values[v] + seg[0]))
        return cls(
            parent=parent, hole=hole_domain, strips=strips, anchor_values=anchors
        )

    def point(self, j, s, t):
        """Physical point of strip j; t > 0 is inside the hole."""
        # strip normals point out of the hole, so the hole side is -t there
        return self.strips[j].point(s, -np.asarray(t, dtype=float))

    def eval(self, j, s, t):
        strip = self.strips[j]
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), s.shape).astype(float)
        if np.any(np.abs(t) >= strip.depth) or np.any(np.abs(s) >= strip.halfwidth):
            raise GeometryError("extension point outside the strip")
        if np.any(t > 0) and not self.parent.tau_hat.analytic_only():
            raise GeometryError(
                "extension into the hole needs analytic forms; nodal parts "
                "are undefined there"
            )
        # first leg slides along the fluid cap from s = 0, chordwise so the
        # path stays clear of the hole; second leg walks the normal segment
        vals = np.empty(len(s))
        for i, si in enumerate(s):
            ss = np.linspace(0.0, si, 9)
            path = strip.point(ss, strip.depth)
            vals[i] = self.anchor_values[j] + float(
                np.sum(
                    self.parent.tau_hat.segment_integrals(path[:-1], path[1:])
                )
            )
        caps = strip.point(s, strip.depth)
        pts = strip.point(s, -t)
        vals += self.parent.tau_hat.segment_integrals(caps, pts)
        return vals

    def boundary_trace(self, j, s):
        return self.eval(j, s, np.zeros_like(np.atleast_1d(s)))

    def consistency_check(self, ns=25, nt=7):
        """Worst mismatch against the interpolated interior potential."""
        worst = 0.0
        for j, strip in enumerate(self.strips):
            s = np.linspace(-0.9 * strip.halfwidth, 0.9 * strip.halfwidth, ns)
            for tfrac in np.linspace(0.15, 0.9, nt):
                t = -tfrac * strip.depth
                vals = self.eval(j, s, np.full(ns, t))
                pts = strip.point(s, tfrac * strip.depth)
                interp = self.parent.potential.eval(pts, outside=np.nan)
                good = ~np.isnan(interp)
                if np.any(good):
                    worst = max(
                        worst, float(np.max(np.abs(vals[good] - interp[good])))
                    )
        return worst


# ---------------------------------------------------------------------------
# shifted fields


def shift_field(u, t, direction, max_shift=None):
    """Translate a field by t along a unit direction: w(x) = u(x - t*d).

    The support moves by +t*d and is taken as zero wherever the pullback
    leaves the mesh.  For pieces at an obstacle, d is the outward normal
    into the fluid; for pieces at the outer boundary, d points inward.
    A field carrying a stream is translated through it: the stream is
    resampled and the curl retaken, so the result is solenoidal in the
    same exact sense as the original.
    """
    if max_shift is not None and t > max_shift:
        raise InvariantViolation(
            f"shift {t:.4g} exceeds the safe radius {max_shift:.4g}"
        )
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    pulled = u.mesh.p2_coords - t * d
    if u.stream is not None:
        psi = u.stream.psi.eval(pulled, outside=0.0)
        return curl_of_stream(
            StreamField(ScalarField(u.mesh, psi, degree=2),
                        base_constant=u.stream.base_constant)
        )
    vals = u.eval(pulled, outside=0.0)
    return VectorField(u.mesh, vals)


def _carrier_depth_scale(carrier):
    if hasattr(carrier, "radius"):
        return float(carrier.radius)
    if hasattr(carrier, "halfwidth") and hasattr(carrier, "chart"):
        return float(carrier.depth)
    x0, y0, x1, y1 = carrier.bbox()
    return 0.5 * float(min(x1 - x0, y1 - y0))


def safe_shift_radius(u, carrier, tol_frac=1e-13):
    """Quarter of min(carrier depth scale, support distance to the enlarged carrier).

    A translated piece only needs to stay inside a set slightly larger than
    the one carrying it; here that enlargement is half the carrier's own
    depth scale (disk radius, band half-thickness, strip depth), so the
    returned radius is a fixed geometric quantity rather than something
    that shrinks with the mesh.  Configurations are expected to leave that
    much room around each carrier.
    """
    scale = float(np.max(np.abs(u.values))) or 1.0
    supp = u.support_nodes(tol=tol_frac * scale)
    if len(supp) == 0:
        return 0.0
    pts = u.mesh.p2_coords[supp]
    d = _carrier_depth_scale(carrier)
    if hasattr(carrier, "halfwidth") and hasattr(carrier, "chart"):
        s, t = carrier.local_coords(pts)
        margin = float(
            np.min(
                np.minimum(
                    carrier.halfwidth - np.abs(s), carrier.depth - np.abs(t)
                )
            )
        )
    else:
        margin = float(np.min(carrier.depth(pts)))
    return 0.25 * min(d, max(margin, 0.0) + 0.5 * d)


@dataclass
class ShiftTable:
    """Shift errors along a halving sequence of translation lengths."""

    ts: np.ndarray
    h1_errors: np.ndarray
    l2_errors: np.ndarray
    support_ok: list
    base_h1: float

    @property
    def rel_h1(self):
        return self.h1_errors / self.base_h1

    def strictly_decreasing(self):
        return bool(np.all(np.diff(self.h1_errors) < 0.0))


def shift_table(u, direction, t_list, max_shift=None):
    """Shift errors per translation length, with support containment flags."""
    from scipy.spatial import cKDTree

    mesh = u.mesh
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    scale = float(np.max(np.abs(u.values))) or 1.0
    supp = u.support_nodes(tol=1e-13 * scale)
    ts, h1s, l2s, oks = [], [], [], []
    for t in t_list:
        w = shift_field(u, t, d, max_shift=max_shift)
        diff = VectorField(mesh, w.values - u.values)
        ts.append(float(t))
        h1s.append(h1_norm(diff))
        l2s.append(l2_norm(diff))
        supp_w = w.support_nodes(tol=1e-13 * scale)
        if len(supp_w) == 0 or len(supp) == 0:
            oks.append(True)
        else:
            tree = cKDTree(mesh.p2_coords[supp] + t * d)
            dist, _ = tree.query(mesh.p2_coords[supp_w])
            oks.append(bool(np.max(dist) <= mesh.h_max * (1.0 + 1e-9)))
    return ShiftTable(
        ts=np.array(ts),
        h1_errors=np.array(h1s),
        l2_errors=np.array(l2s),
        support_ok=oks,
        base_h1=h1_norm(u),
    )


def shift_convergence(u, direction, t_list, max_shift=None):
    """H1 differences of the translated field for each t in the list."""
    return list(shift_table(u, direction, t_list, max_shift=max_shift).h1_errors)


# ---------------------------------------------------------------------------
# density witnesses


def ring_regions(domain, n=10, radius=None):
    """Disks centered along the boundary, covering it with generous overlap.

    The default radius leaves the cutoffs O(1) well away from the boundary,
    so pieces built from them capture the whole boundary layer of a field.
    """
    poly = domain.boundary_polyline(1024)
    arc = float(np.sum(np.linalg.norm(np.diff(np.vstack([poly, poly[:1]]), axis=0), axis=1)))
    if radius is None:
        radius = 2.2 * arc / n
    phis = np.linspace(0.0, TWO_PI, n, endpoint=False)
    centers = domain.boundary_point(phis)
    return [Disk(cx, cy, radius) for cx, cy in centers], phis


def wall_regions(box, thickness=None):
    """Four overlapping bands along the walls of a box."""
    x0, y0, x1, y1 = box.bbox() if hasattr(box, "bbox") else box
    th = thickness if thickness is not None else 0.25 * min(x1 - x0, y1 - y0)
    pad = 0.05 * th
    return [
        Box(x0 - pad, y0 - pad, x0 + th, y1 + pad),
        Box(x1 - th, y0 - pad, x1 + pad, y1 + pad),
        Box(x0 - pad, y0 - pad, x1 + pad, y0 + th),
        Box(x0 - pad, y1 - th, x1 + pad, y1 + pad),
    ], [np.array([1.0, 0.0]), np.array([-1.0, 0.0]),
        np.array([0.0, 1.0]), np.array([0.0, -1.0])]


@dataclass
class WitnessReport:
    """Compactly supported solenoidal approximant and its distance to u.

    The approximant is the unshifted remainder plus the boundary pieces
    translated off the boundary, so the error equals the sum of the shift
    errors alone; support_clearance is the distance from its support to the
    closed obstacle (or to the outer walls).
    """

    decomposition: DecompositionResult
    remainder: VectorField
    shifts: list
    approximant: VectorField
    h1_error: float
    rel_h1_error: float
    support_clearance: float
    weak_residual: float
    field_norm: float


def witness_space_identity(u, obstacle=None, regions=None, directions=None,
                           t_factor=0.03, tau=0.5, delta0=None, width=None):
    """Approximate u by a solenoidal field supported away from the boundary.

    With an obstacle, the boundary band of u is cut into localized pieces
    that are then translated into the fluid along the outward normals; with
    none, wall pieces are translated inward.  Since remainder plus
    unshifted pieces reproduce u identically, the approximation error is
    exactly the accumulated shift error, which vanishes linearly with the
    translation length.  The length is tied to the mesh as t_factor *
    h_max * sqrt(h_max / delta_min), capped by the safe radius: the extra
    square root keeps the total error strictly decreasing under refinement
    even while coarse meshes still under-resolve the cutoff curvature that
    sets the per-piece shift sensitivity.
    """
    mesh = u.mesh
    if obstacle is not None:
        if regions is None:
            regions, phis = ring_regions(obstacle)
        elif directions is None:
            phis = np.array(
                [
                    np.arctan2(r.cy - obstacle.center[1], r.cx - obstacle.center[0])
                    for r in regions
                ]
            )
        if directions is None:
            directions = [obstacle.outward_normal(p)[0] for p in np.atleast_1d(phis)]
        dec = localized_decompose(
            u, [obstacle], regions, tau=tau, delta0=delta0, width=width
        )
    else:
        if regions is None:
            x0, y0 = mesh.vertices.min(axis=0)
            x1, y1 = mesh.vertices.max(axis=0)
            regions, directions = wall_regions((x0, y0, x1, y1))
        elif directions is None:
            raise ValueError("explicit wall regions need explicit directions")
        stream = u.stream if u.stream is not None else stream_function(u)
        boundary = mesh.boundary_p2_nodes()
        c0 = float(np.mean(stream.psi.values[boundary]))
        pu = build_partition_of_unity(
            regions, None, mesh, tau=tau, delta0=delta0, width=width
        )
        dec = _finish_decomposition(
            u, stream, pu, np.full(len(regions), c0), regions, None,
            component_constants=[c0],
            constant_stddevs=[float(np.std(stream.psi.values[boundary]))],
        )

    rem_vals = u.values.copy()
    rem_stream = dec.stream.psi.values.copy()
    for p in dec.pieces:
        rem_vals -= p.values
        rem_stream -= p.stream.psi.values
    remainder = VectorField(
        mesh, rem_vals,
        stream=StreamField(ScalarField(mesh, rem_stream, degree=2)),
    )

    shifts = []
    approx = rem_vals.copy()
    approx_stream = rem_stream.copy()
    t_mesh = t_factor * mesh.h_max * np.sqrt(mesh.h_max / dec.partition.delta_min)
    for j, (piece, region, d) in enumerate(zip(dec.pieces, dec.regions, directions)):
        if len(piece.support_nodes(tol=0.0)) == 0:
            approx += piece.values
            approx_stream += piece.stream.psi.values
            shifts.append({"t": 0.0, "direction": np.asarray(d, dtype=float),
                           "safe_radius": 0.0})
            continue
        safe = safe_shift_radius(piece, region)
        t = min(t_mesh, safe) if safe > 0 else 0.0
        moved = shift_field(piece, t, d, max_shift=safe if safe > 0 else None)
        approx += moved.values
        approx_stream += moved.stream.psi.values
        shifts.append({"t": t, "direction": np.asarray(d, dtype=float),
                       "safe_radius": safe})
    w = VectorField(
        mesh, approx,
        stream=StreamField(ScalarField(mesh, approx_stream, degree=2)),
    )

    diff = VectorField(mesh, w.values - u.values)
    nu = h1_norm(u)
    err = h1_norm(diff)
    scale = float(np.max(np.abs(w.values))) or 1.0
    supp = w.support_nodes(tol=1e-13 * scale)
    pts = mesh.p2_coords[supp]
    if obstacle is not None:
        clearance = float(np.min(obstacle.signed_distance(pts)))
    else:
        x0, y0 = mesh.vertices.min(axis=0)
        x1, y1 = mesh.vertices.max(axis=0)
        clearance = float(np.min(Box(x0, y0, x1, y1).depth(pts)))
    return WitnessReport(
        decomposition=dec,
        remainder=remainder,
        shifts=shifts,
        approximant=w,
        h1_error=err,
        rel_h1_error=err / nu if nu > 0 else 0.0,
        support_clearance=clearance,
        weak_residual=weak_divergence_residual(w),
        field_norm=nu,
    )


# ---------------------------------------------------------------------------
# seeded smooth streams (reference inputs for experiments)


def random_stream(mesh, rng, n_modes=5, amplitude=1.0):
    """Smooth random stream vanishing on the bounding box walls."""
    x0, y0 = mesh.vertices.min(axis=0)
    x1, y1 = mesh.vertices.max(axis=0)
    pts = mesh.p2_coords
    sx = (pts[:, 0] - x0) / (x1 - x0)
    sy = (pts[:, 1] - y0) / (y1 - y0)
    vals = np.zeros(mesh.num_p2_nodes)
    for _ in range(n_modes):
        p, q = rng.integers(1, 4, size=2)
        a = rng.standard_normal() / (p * p + q * q)
        vals += a * np.sin(np.pi * p * sx) * np.sin(np.pi * q * sy)
    peak = float(np.max(np.abs(vals))) or 1.0
    vals *= amplitude / peak
    return StreamField(ScalarField(mesh, vals, degree=2))


def random_divfree_field(mesh, rng, n_modes=5, amplitude=1.0):
    return curl_of_stream(random_stream(mesh, rng, n_modes, amplitude))
