"""Stationary Navier-Stokes flow on triangulated planar domains.

Quadratic velocities paired with linear pressures, assembled sparsely and
solved by direct factorization inside a Picard-then-Newton loop.  The
convective term is skew-symmetrized by default, which makes the discrete
energy identity exact and keeps the nonlinear iteration sign-agnostic.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, bmat
from scipy.sparse.linalg import splu

from .errors import ConfigError, SolverDivergence
from .mesh_fields import (
    ScalarField,
    VectorField,
    triangle_rule,
    p2_shape,
    p2_shape_ref_grad,
    h1_norm,
)

ASSEMBLY_DEGREE = 5
FORCE_DEGREE = 6


# ---------------------------------------------------------------------------
# configuration and data carriers


@dataclass
class SolverConfig:
    """Viscosity, convection convention and iteration controls.

    convection_sign -1 keeps the transport term on the left with a minus
    sign, +1 is the standard convention; the energy identity holds for
    either because the skew form vanishes on the diagonal.
    """

    gamma: float
    convection_sign: int = -1
    picard_tol: float = 1e-8
    newton_tol: float = 1e-12
    max_iters: int = 60
    skew_form: bool = True

    def __post_init__(self):
        if not self.gamma > 0.0:
            raise ConfigError(f"viscosity must be positive, got {self.gamma}")
        if self.convection_sign not in (-1, 1):
            raise ConfigError("convection_sign must be -1 or +1")
        for name in ("picard_tol", "newton_tol"):
            tol = getattr(self, name)
            if not 0.0 < tol <= 1e-2:
                raise ConfigError(f"{name} must lie in (0, 1e-2], got {tol}")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be nonnegative")


class BodyForce:
    """Right-hand side sampled at quadrature points.

    Wraps either a finite-element field or a closed-form callable
    pts -> (n, 2); the L2 norm is computed on first use per mesh.
    """

    def __init__(self, func=None, field=None):
        if (func is None) == (field is None):
            raise ConfigError("body force needs exactly one of func or field")
        self.func = func
        self.field = field
        self._norms = {}

    @classmethod
    def zero(cls):
        return cls(func=lambda pts: np.zeros((len(np.atleast_2d(pts)), 2)))

    def sample(self, mesh, bary):
        """Values at barycentric points of every element, (nt, nq, 2)."""
        if self.field is not None:
            vals = self.field.element_values(bary)
        else:
            verts = mesh.vertices[mesh.triangles]
            pts = np.einsum("qk,nkc->nqc", np.atleast_2d(bary), verts)
            flat = self.func(pts.reshape(-1, 2))
            vals = np.asarray(flat, dtype=float).reshape(pts.shape)
        if not np.all(np.isfinite(vals)):
            raise ConfigError("body force evaluates to non-finite values")
        return vals

    def l2_norm(self, mesh):
        key = id(mesh)
        if key not in self._norms:
            bary, w = triangle_rule(FORCE_DEGREE)
            vals = self.sample(mesh, bary)
            sq = np.sum(vals**2, axis=2)
            self._norms[key] = float(
                np.sqrt(np.einsum("nq,q,n->", sq, w, mesh.areas))
            )
        return self._norms[key]


@dataclass
class WeakSolution:
    """Converged velocity/pressure pair with the iteration trace."""

    velocity: VectorField
    pressure: ScalarField
    residual_history: list
    converged: bool

    def __post_init__(self):
        from .errors import InvariantViolation
        from .mesh_fields import integrate, l2_norm

        if self.pressure.degree != 1:
            raise InvariantViolation("pressure must be a linear nodal field")
        mesh = self.velocity.mesh
        on_wall = np.abs(self.velocity.values[mesh.boundary_p2_nodes()])
        if on_wall.size and on_wall.max() != 0.0:
            raise InvariantViolation(
                f"velocity carries nonzero wall values up to {on_wall.max():.3e}"
            )
        mean = integrate(self.pressure, degree=2) / float(mesh.areas.sum())
        scale = max(1.0, l2_norm(self.pressure, degree=2))
        if abs(mean) > 1e-12 * scale:
            raise InvariantViolation(
                f"pressure mean {mean:.3e} exceeds the zero-mean tolerance"
            )


# ---------------------------------------------------------------------------
# sparse assembly


def _vector_dofs(nodes):
    """Interleaved velocity indices (node, component) -> 2*node + component."""
    return np.stack([2 * nodes, 2 * nodes + 1], axis=-1)


def assemble_vector_stiffness(mesh):
    """Gradient-gradient block for both velocity components, (2n x 2n)."""
    bary, w = triangle_rule(ASSEMBLY_DEGREE)
    G = p2_shape_ref_grad(bary)
    gphys = np.einsum("qij,njk->nqik", G, mesh.jac_inv)
    elem = np.einsum("q,nqik,nqjk,n->nij", w, gphys, gphys, mesh.areas)
    n2 = mesh.num_p2_nodes
    dofs = mesh.tri_dofs
    rows, cols, vals = [], [], []
    for c in (0, 1):
        rows.append(np.repeat(2 * dofs + c, 6, axis=1).ravel())
        cols.append(np.tile(2 * dofs + c, (1, 6)).ravel())
        vals.append(elem.ravel())
    return coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * n2, 2 * n2),
    ).tocsr()


def assemble_divergence_matrix(mesh):
    """Pressure-test pairing B[i, (j,c)] = integral of phi2_j d_c phi1_i.

    Rows match the weak-divergence checker exactly, so solver velocities
    null this matrix in the same sense that checker reports.
    """
    bary, w = triangle_rule(ASSEMBLY_DEGREE)
    N2 = p2_shape(bary)
    from .mesh_fields import _P1_REF_GRAD

    gp1 = np.einsum("ij,njk->nik", _P1_REF_GRAD, mesh.jac_inv)
    elem = np.einsum("q,qj,nic,n->nijc", w, N2, gp1, mesh.areas)
    nv, n2 = mesh.num_vertices, mesh.num_p2_nodes
    rows = np.repeat(mesh.triangles[:, :, None], 6 * 2, axis=2).reshape(-1)
    vd = _vector_dofs(mesh.tri_dofs)
    cols = np.repeat(vd.reshape(len(mesh.triangles), 1, 12), 3, axis=1).reshape(-1)
    return coo_matrix((elem.reshape(-1), (rows, cols)), shape=(nv, 2 * n2)).tocsr()


def assemble_pressure_integrals(mesh):
    """Integral of every linear hat function, the zero-mean gauge vector."""
    m = np.zeros(mesh.num_vertices)
    np.add.at(
        m,
        mesh.triangles.ravel(),
        np.broadcast_to((mesh.areas / 3.0)[:, None], (len(mesh.areas), 3)).ravel(),
    )
    return m


def assemble_body_force(mesh, f, degree=FORCE_DEGREE):
    bary, w = triangle_rule(degree)
    fvals = f.sample(mesh, bary)
    N = p2_shape(bary)
    elem = np.einsum("q,nqc,qi,n->nic", w, fvals, N, mesh.areas)
    b = np.zeros(2 * mesh.num_p2_nodes)
    np.add.at(b, _vector_dofs(mesh.tri_dofs).ravel(), elem.ravel())
    return b


def assemble_convection(mesh, wfield_vals, skew):
    """Transport operator N(w)[i,j] = c(w; phi_j, phi_i), block per component."""
    bary, w = triangle_rule(ASSEMBLY_DEGREE)
    N = p2_shape(bary)
    G = p2_shape_ref_grad(bary)
    gphys = np.einsum("qij,njk->nqik", G, mesh.jac_inv)
    dofs = wfield_vals[mesh.tri_dofs]
    wvals = np.einsum("nic,qi->nqc", dofs, N)
    conv = np.einsum("nqc,nqjc->nqj", wvals, gphys)
    elem = np.einsum("q,qi,nqj,n->nij", w, N, conv, mesh.areas)
    n2 = mesh.num_p2_nodes
    tdofs = mesh.tri_dofs
    rows, cols, vals = [], [], []
    for c in (0, 1):
        rows.append(np.repeat(2 * tdofs + c, 6, axis=1).ravel())
        cols.append(np.tile(2 * tdofs + c, (1, 6)).ravel())
        vals.append(elem.ravel())
    M = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * n2, 2 * n2),
    ).tocsr()
    if skew:
        M = 0.5 * (M - M.T)
    return M.tocsr()


def assemble_convection_jacobian(mesh, ufield_vals, skew):
    """Derivative of N(u)u with respect to the transporting slot."""
    bary, w = triangle_rule(ASSEMBLY_DEGREE)
    N = p2_shape(bary)
    G = p2_shape_ref_grad(bary)
    gphys = np.einsum("qij,njk->nqik", G, mesh.jac_inv)
    dofs = ufield_vals[mesh.tri_dofs]
    uvals = np.einsum("nic,qi->nqc", dofs, N)
    ugrad = np.einsum("nic,qij,njk->nqck", dofs, G, mesh.jac_inv)

    # rows (b, cp), cols (a, c): phi_a carries the direction component c
    D = np.einsum("q,qb,qa,nqck,n->nbakc", w, N, N, ugrad, mesh.areas)
    if skew:
        E = np.einsum("q,nqc,qa,nqbk,n->nbakc", w, uvals, N, gphys, mesh.areas)
        elem = 0.5 * (D - E)
    else:
        elem = D
    n2 = mesh.num_p2_nodes
    tdofs = mesh.tri_dofs
    nt = len(tdofs)
    rows = (2 * tdofs[:, :, None, None, None] + np.arange(2)[None, None, None, :, None])
    rows = np.broadcast_to(rows, (nt, 6, 6, 2, 2)).reshape(-1)
    cols = (2 * tdofs[:, None, :, None, None] + np.arange(2)[None, None, None, None, :])
    cols = np.broadcast_to(cols, (nt, 6, 6, 2, 2)).reshape(-1)
    # elem axes are (n, b, a, cp, c); swap to align with (rows=cp, cols=c)
    vals = elem.transpose(0, 1, 2, 4, 3).reshape(-1)
    return coo_matrix((vals, (rows, cols)), shape=(2 * n2, 2 * n2)).tocsr()


# ---------------------------------------------------------------------------
# the nonlinear solve


def _saddle_solve(K_ff, B_f, m, rhs_mom, rhs_div):
    nv = B_f.shape[0]
    m_col = csr_matrix(m.reshape(-1, 1))
    sys = bmat(
        [
            [K_ff, B_f.T, None],
            [B_f, None, m_col],
            [None, m_col.T, None],
        ],
        format="csc",
    )
    rhs = np.concatenate([rhs_mom, rhs_div, [0.0]])
    try:
        lu = splu(sys)
    except RuntimeError as exc:
        raise RuntimeError(f"saddle-point system is singular: {exc}") from exc
    sol = lu.solve(rhs)
    nf = K_ff.shape[0]
    return sol[:nf], sol[nf:nf + nv]


def solve_nse(mesh, f, cfg):
    """Weak solution with quadratic velocity, linear zero-mean pressure.

    Picard contraction down to picard_tol hands over to Newton, which
    polishes to newton_tol; the trace of nonlinear residuals is kept and
    five consecutive increases abort with the history attached.
    """
    n2 = mesh.num_p2_nodes
    A = assemble_vector_stiffness(mesh)
    B = assemble_divergence_matrix(mesh)
    m = assemble_pressure_integrals(mesh)
    b = assemble_body_force(mesh, f)

    fixed = np.zeros(2 * n2, dtype=bool)
    fixed[_vector_dofs(mesh.boundary_p2_nodes()).ravel()] = True
    free = np.nonzero(~fixed)[0]
    A_ff = A[free][:, free].tocsr()
    B_f = B[:, free].tocsr()
    b_f = b[free]
    scale = float(np.linalg.norm(b_f)) or 1.0

    gamma, sign = cfg.gamma, float(cfg.convection_sign)

    def residual(U_f, P):
        full = np.zeros(2 * n2)
        full[free] = U_f
        Nmat = assemble_convection(mesh, full.reshape(n2, 2), cfg.skew_form)
        r_mom = (
            gamma * (A_ff @ U_f)
            + sign * (Nmat[free][:, free] @ U_f)
            + B_f.T @ P
            - b_f
        )
        r_div = B_f @ U_f
        return np.concatenate([r_mom, r_div, [m @ P]]), Nmat

    history = []
    rising = 0

    U_f, P = _saddle_solve(gamma * A_ff, B_f, m, b_f, np.zeros(B.shape[0]))
    res_vec, Nmat = residual(U_f, P)
    res = float(np.linalg.norm(res_vec)) / scale
    history.append(res)

    stage = "picard"
    it = 0
    while res > cfg.newton_tol and it < cfg.max_iters:
        it += 1
        if stage == "picard" and res <= cfg.picard_tol:
            stage = "newton"
        if stage == "picard":
            K = (gamma * A + sign * Nmat)[free][:, free].tocsr()
            U_f, P = _saddle_solve(K, B_f, m, b_f, np.zeros(B.shape[0]))
        else:
            full = np.zeros(2 * n2)
            full[free] = U_f
            Gmat = assemble_convection_jacobian(
                mesh, full.reshape(n2, 2), cfg.skew_form
            )
            J = (gamma * A + sign * (Nmat + Gmat))[free][:, free].tocsr()
            r_mom = res_vec[: len(U_f)]
            r_div = res_vec[len(U_f):-1]
            dU, dP = _saddle_solve(J, B_f, m, -r_mom, -r_div)
            U_f = U_f + dU
            P = P + dP
        res_vec, Nmat = residual(U_f, P)
        new_res = float(np.linalg.norm(res_vec)) / scale
        if not np.isfinite(new_res):
            history.append(new_res)
            raise SolverDivergence(
                f"nonlinear iteration produced non-finite residual at step {it}",
                history,
            )
        rising = rising + 1 if new_res > res else 0
        res = new_res
        history.append(res)
        if rising >= 5:
            raise SolverDivergence(
                f"nonlinear residual grew over {rising} consecutive steps "
                f"(last {res:.3e})",
                history,
            )
        if stage == "picard" and res <= cfg.picard_tol:
            stage = "newton"

    P = P - (m @ P) / m.sum()
    U = np.zeros(2 * n2)
    U[free] = U_f
    velocity = VectorField(mesh, U.reshape(n2, 2))
    pressure = ScalarField(mesh, P, degree=1)
    return WeakSolution(
        velocity=velocity,
        pressure=pressure,
        residual_history=history,
        converged=bool(res <= cfg.newton_tol),
    )


def solve_interior(mesh, f, cfg):
    """Flow confined to a single closed region: every wall is a no-slip wall.

    The discretization already pins all tagged boundaries, so this is
    solve_nse on the region's own mesh; kept separate for call sites that
    distinguish the enclosed problem.
    """
    return solve_nse(mesh, f, cfg)


# ---------------------------------------------------------------------------
# diagnostics


def slab_width(mesh, n_angles=720):
    """Smallest thickness over all slab directions containing the mesh."""
    from scipy.spatial import ConvexHull

    pts = mesh.vertices
    hull = pts[ConvexHull(pts).vertices]
    th = np.linspace(0.0, np.pi, n_angles, endpoint=False)
    dirs = np.column_stack([np.cos(th), np.sin(th)])
    proj = hull @ dirs.T
    return float(np.min(proj.max(axis=0) - proj.min(axis=0)))


def uniqueness_margin(f, cfg, mesh):
    """Headroom of the forcing below the small-data threshold.

    The threshold gamma^2 / (C_b C_P^2) uses the slab width of the domain
    through the Poincare surrogate C_P = d/pi and a fixed continuity
    surrogate C_b = 2; it scales exactly fourfold when gamma doubles.
    """
    d = slab_width(mesh)
    c_p = d / np.pi
    c_b = 2.0
    threshold = cfg.gamma**2 / (c_b * c_p**2)
    return float(threshold - f.l2_norm(mesh))


def energy_identity_residual(sol, f, cfg):
    """Relative gap between gamma * |grad u|^2 and the work of the force."""
    mesh = sol.velocity.mesh
    A = assemble_vector_stiffness(mesh)
    b = assemble_body_force(mesh, f)
    U = sol.velocity.values.reshape(-1)
    lhs = cfg.gamma * float(U @ (A @ U))
    rhs = float(U @ b)
    return abs(lhs - rhs) / max(lhs, 1e-300)


def random_solenoidal_fields(mesh, rng, count=50):
    """Zero-trace quadratic fields exactly nulling the discrete divergence.

    Random interior vectors are projected onto the constraint kernel
    through a Stokes-type saddle solve, giving test fields in the precise
    sense the solver's continuity rows use.
    """
    n2 = mesh.num_p2_nodes
    A = assemble_vector_stiffness(mesh)
    B = assemble_divergence_matrix(mesh)
    m = assemble_pressure_integrals(mesh)
    fixed = np.zeros(2 * n2, dtype=bool)
    fixed[_vector_dofs(mesh.boundary_p2_nodes()).ravel()] = True
    free = np.nonzero(~fixed)[0]
    A_ff = A[free][:, free].tocsr()
    B_f = B[:, free].tocsr()
    m_col = csr_matrix(m.reshape(-1, 1))
    sys = bmat(
        [[A_ff, B_f.T, None], [B_f, None, m_col], [None, m_col.T, None]],
        format="csc",
    )
    lu = splu(sys)
    nf = len(free)
    nv = B.shape[0]
    fields = []
    for _ in range(count):
        v = rng.standard_normal(nf)
        sol = lu.solve(np.concatenate([A_ff @ v, np.zeros(nv), [0.0]]))
        full = np.zeros(2 * n2)
        full[free] = sol[:nf]
        fields.append(VectorField(mesh, full.reshape(n2, 2)))
    return fields


def weak_residual_check(sol, f, cfg, fields):
    """Largest relative weak residual of the solution over the test fields."""
    mesh = sol.velocity.mesh
    n2 = mesh.num_p2_nodes
    A = assemble_vector_stiffness(mesh)
    b = assemble_body_force(mesh, f)
    U = sol.velocity.values.reshape(-1)
    Nmat = assemble_convection(mesh, sol.velocity.values, cfg.skew_form)
    resid = cfg.gamma * (A @ U) + cfg.convection_sign * (Nmat @ U) - b
    scale = max(float(np.linalg.norm(b)), 1e-300)
    worst = 0.0
    for phi in fields:
        V = phi.values.reshape(-1)
        denom = scale * max(h1_norm(phi), 1e-300)
        worst = max(worst, abs(float(resid @ V)) / denom)
    return worst


# ---------------------------------------------------------------------------
# closed-form verification case


def manufactured_case(gamma, convection_sign=-1):
    """Forcing whose exact flow is a quartic vortex with a sinusoidal pressure.

    Returns (BodyForce, velocity(pts), velocity_gradient(pts), pressure(pts))
    with the force derived symbolically from the strong form, so solver
    output can be compared against machine-accurate reference callables.
    """
    import sympy as sp

    x, y = sp.symbols("x y")
    psi = x**2 * (1 - x) ** 2 * y**2 * (1 - y) ** 2
    u1 = sp.diff(psi, y)
    u2 = -sp.diff(psi, x)
    p = sp.sin(sp.pi * x) * sp.cos(sp.pi * y)

    s = sp.Integer(convection_sign)
    conv1 = u1 * sp.diff(u1, x) + u2 * sp.diff(u1, y)
    conv2 = u1 * sp.diff(u2, x) + u2 * sp.diff(u2, y)
    f1 = -gamma * (sp.diff(u1, x, 2) + sp.diff(u1, y, 2)) + s * conv1 + sp.diff(p, x)
    f2 = -gamma * (sp.diff(u2, x, 2) + sp.diff(u2, y, 2)) + s * conv2 + sp.diff(p, y)

    fl = sp.lambdify((x, y), (f1, f2), "numpy")
    ul = sp.lambdify((x, y), (u1, u2), "numpy")
    gl = sp.lambdify(
        (x, y),
        (sp.diff(u1, x), sp.diff(u1, y), sp.diff(u2, x), sp.diff(u2, y)),
        "numpy",
    )
    pl = sp.lambdify((x, y), p, "numpy")

    def force(pts):
        pts = np.atleast_2d(pts)
        fx, fy = fl(pts[:, 0], pts[:, 1])
        return np.column_stack([np.broadcast_to(fx, len(pts)),
                                np.broadcast_to(fy, len(pts))])

    def velocity(pts):
        pts = np.atleast_2d(pts)
        vx, vy = ul(pts[:, 0], pts[:, 1])
        return np.column_stack([np.broadcast_to(vx, len(pts)),
                                np.broadcast_to(vy, len(pts))])

    def velocity_gradient(pts):
        pts = np.atleast_2d(pts)
        gxx, gxy, gyx, gyy = gl(pts[:, 0], pts[:, 1])
        out = np.empty((len(pts), 2, 2))
        out[:, 0, 0] = gxx
        out[:, 0, 1] = gxy
        out[:, 1, 0] = gyx
        out[:, 1, 1] = gyy
        return out

    def pressure(pts):
        pts = np.atleast_2d(pts)
        return np.asarray(pl(pts[:, 0], pts[:, 1]), dtype=float)

    return BodyForce(func=force), velocity, velocity_gradient, pressure


def velocity_h1_error(sol, velocity, velocity_gradient, degree=FORCE_DEGREE):
    """H1 distance between the discrete velocity and reference callables."""
    mesh = sol.velocity.mesh
    bary, w = triangle_rule(degree)
    verts = mesh.vertices[mesh.triangles]
    pts = np.einsum("qk,nkc->nqc", np.atleast_2d(bary), verts)
    flat = pts.reshape(-1, 2)
    uh = sol.velocity.element_values(bary)
    gh = sol.velocity.element_gradients(bary)
    du = uh - velocity(flat).reshape(uh.shape)
    dg = gh - velocity_gradient(flat).reshape(gh.shape)
    sq = np.sum(du**2, axis=2) + np.sum(dg**2, axis=(2, 3))
    return float(np.sqrt(np.einsum("nq,q,n->", sq, w, mesh.areas)))


def pressure_l2_error(sol, pressure, degree=FORCE_DEGREE):
    mesh = sol.pressure.mesh
    bary, w = triangle_rule(degree)
    verts = mesh.vertices[mesh.triangles]
    pts = np.einsum("qk,nkc->nqc", np.atleast_2d(bary), verts).reshape(-1, 2)
    ph = sol.pressure.element_values(bary)
    pe = pressure(pts).reshape(ph.shape)
    pe = pe - np.einsum("nq,q,n->", pe, w, mesh.areas) / mesh.areas.sum()
    sq = (ph - pe) ** 2
    return float(np.sqrt(np.einsum("nq,q,n->", sq, w, mesh.areas)))
