"""Derivative-free shape search over star domains driven by the flow solver.

Each candidate obstacle is meshed against the hold-all box, the stationary
flow is solved, and a quadratic-growth cost is integrated over the flow
region.  A hand-rolled Nelder-Mead walks the radial coefficients, recording
every improving candidate; the diagnostics then replay the compactness,
vanishing, norm-convergence and Fatou steps of the existence argument on
the recorded tail.
"""

import math
from dataclasses import dataclass

import numpy as np

from .domain_geometry import (
    Box,
    RadialProfile,
    check_gamma,
    check_gamma_hat,
    hausdorff_pompeiu,
    make_star_domain,
    rasterize,
)
from .errors import (
    ConfigError,
    GeometryError,
    InvariantViolation,
    MeshQualityError,
    SolverDivergence,
)
from .mesh_fields import h1_norm, triangle_rule, triangulate
from .nse_solver import solve_nse

COST_DEGREE = 4


# ---------------------------------------------------------------------------
# cost functionals


@dataclass
class CostFunctional:
    """Nonnegative integrand in position, velocity and velocity gradient.

    The drag kind is |grad u|^2 + |(grad u)^T|^2; custom kinds supply a
    callable J(x, xi, eta) together with growth constants (C, g) bounding
    J <= C (g(x) + |xi|^2 + |eta|^2), checked at every quadrature point.
    """

    kind: str = "drag"
    integrand: object = None
    growth_constant: float = 2.0
    growth_offset: object = None  # callable g(x) -> (n,), or None for zero
    integration_region: str = "over_D_minus"

    def __post_init__(self):
        if self.kind not in ("drag", "custom"):
            raise ConfigError(f"unknown cost kind {self.kind!r}")
        if self.kind == "custom" and not callable(self.integrand):
            raise ConfigError("custom cost needs a callable integrand")
        if not self.growth_constant > 0.0:
            raise ConfigError("growth constant must be positive")
        if self.integration_region not in ("over_D_minus", "over_B_minus"):
            raise ConfigError(
                f"unknown integration region {self.integration_region!r}"
            )

    def evaluate(self, x, xi, eta):
        if self.kind == "drag":
            vals = 2.0 * np.sum(eta**2, axis=(1, 2))
        else:
            vals = np.asarray(self.integrand(x, xi, eta), dtype=float)
        if vals.size and vals.min() < 0.0:
            i = int(np.argmin(vals))
            raise InvariantViolation(
                f"cost integrand negative ({vals[i]:.3e}) at x={x[i]}"
            )
        g = self.growth_offset(x) if self.growth_offset is not None else 0.0
        bound = self.growth_constant * (
            g + np.sum(xi**2, axis=1) + np.sum(eta**2, axis=(1, 2))
        )
        slack = vals - bound
        if vals.size and slack.max() > 1e-12 * max(1.0, float(np.max(bound))):
            i = int(np.argmax(slack))
            raise InvariantViolation(
                f"growth bound violated at x={x[i]}: J={vals[i]:.6e} "
                f"exceeds C(g+|xi|^2+|eta|^2)={bound[i]:.6e}"
            )
        return vals


# ---------------------------------------------------------------------------
# single-candidate evaluation


def _hold_all(dom):
    fam = dom.family
    if fam is None:
        raise ConfigError("domain carries no family; hold-all box unknown")
    return fam


def evaluate_cost(dom, J, f, cfg, h):
    """Cost of one obstacle: mesh the flow region, solve, integrate J.

    Solver divergence is a rejected candidate and comes back as an
    infinite cost with no solution rather than an exception.
    """
    fam = _hold_all(dom)
    ok, msgs = fam.admits(dom)
    if not ok:
        raise GeometryError("candidate rejected: " + "; ".join(msgs))
    mesh = triangulate(Box(*fam.box), holes=[dom], h=h)
    try:
        sol = solve_nse(mesh, f, cfg)
    except SolverDivergence:
        return math.inf, None
    if not sol.converged:
        return math.inf, None
    return cost_integral(sol, J, fam), sol


def cost_integral(sol, J, fam):
    """Quadrature of the integrand over the configured region of the mesh."""
    mesh = sol.velocity.mesh
    bary, w = triangle_rule(COST_DEGREE)
    verts = mesh.vertices[mesh.triangles]
    pts = np.einsum("qk,nkc->nqc", np.atleast_2d(bary), verts)
    xi = sol.velocity.element_values(bary)
    eta = sol.velocity.element_gradients(bary)
    nt, nq = xi.shape[:2]
    flat = pts.reshape(-1, 2)
    vals = J.evaluate(flat, xi.reshape(-1, 2), eta.reshape(-1, 2, 2))
    vals = vals.reshape(nt, nq)
    if J.integration_region == "over_B_minus":
        cx, cy, R = fam.ball
        inside = (np.hypot(flat[:, 0] - cx, flat[:, 1] - cy) <= R)
        vals = vals * inside.reshape(nt, nq)
    return float(np.einsum("nq,q,n->", vals, w, mesh.areas))


# ---------------------------------------------------------------------------
# the optimizer


@dataclass
class OptimizerConfig:
    """Initial point, simplex spread and stopping rules for the search."""

    initial: np.ndarray
    step: float = 0.05
    max_evals: int = 100
    diam_tol: float = 1e-3
    spread_tol: float = 1e-10
    mesh_h: float = 0.06
    center: tuple = None
    gap_resolution: float = 1.0 / 512.0

    def __post_init__(self):
        self.initial = np.atleast_1d(np.asarray(self.initial, dtype=float))
        if self.max_evals < 0:
            raise ConfigError("max_evals must be nonnegative")


@dataclass
class CandidateRecord:
    params: np.ndarray
    domain: object
    cost: float
    solution: object


@dataclass
class OptimizationRun:
    """Recorded minimizing sequence with its best member and diagnostics."""

    family: object
    sequence: list
    best: int
    hausdorff_gaps: list
    cost_functional: object = None
    body_force: object = None
    solver_config: object = None
    mesh_h: float = None
    diagnostics: object = None

    def __post_init__(self):
        costs = [rec.cost for rec in self.sequence]
        if not all(np.isfinite(c) for c in costs):
            raise InvariantViolation("recorded candidate with non-finite cost")
        if costs and self.best != int(np.argmin(costs)):
            raise InvariantViolation("best index does not achieve the minimum")
        if any(b > a + 1e-12 for a, b in zip(costs, costs[1:])):
            raise InvariantViolation("accepted costs are not non-increasing")

    @property
    def best_domain(self):
        return self.sequence[self.best].domain

    @property
    def best_cost(self):
        return self.sequence[self.best].cost


def params_to_profile(params):
    """Radial coefficients [c0, a1, b1, a2, b2, ...] -> profile object."""
    params = np.atleast_1d(np.asarray(params, dtype=float))
    return RadialProfile(
        float(params[0]),
        cos_coeffs=tuple(params[1::2]),
        sin_coeffs=tuple(params[2::2]),
    )


def minimize(family, J, f, cfg, opt):
    """Nelder-Mead over radial coefficients with feasibility rejection.

    Infeasible or diverging candidates cost infinity and are never
    recorded; every strict improvement is appended to the minimizing
    sequence along with its consecutive Hausdorff-Pompeiu gap.
    """
    center = opt.center if opt.center is not None else tuple(family.ball[:2])
    sequence, gaps = [], []
    evals = 0
    budget = max(opt.max_evals, 1)
    cache = {}

    class _BudgetExhausted(Exception):
        pass

    def build(params):
        try:
            return make_star_domain(center, params_to_profile(params), family=family)
        except (GeometryError, ConfigError, ValueError):
            return None

    def cost_of(params):
        nonlocal evals
        key = tuple(np.round(params, 12))
        if key in cache:
            return cache[key]
        dom = build(params)
        if dom is None:
            cache[key] = math.inf
            return math.inf
        ok, _ = family.admits(dom)
        if not ok:
            cache[key] = math.inf
            return math.inf
        if evals >= budget:
            raise _BudgetExhausted
        evals += 1
        try:
            value, sol = evaluate_cost(dom, J, f, cfg, opt.mesh_h)
        except (GeometryError, MeshQualityError):
            value, sol = math.inf, None
        cache[key] = value
        if np.isfinite(value) and (
            not sequence or value < sequence[-1].cost - 1e-14
        ):
            if sequence:
                gaps.append(
                    hausdorff_pompeiu(
                        sequence[-1].domain, dom, resolution=opt.gap_resolution
                    )
                )
            sequence.append(CandidateRecord(np.array(params), dom, value, sol))
        return value

    x0 = opt.initial
    n = len(x0)
    if opt.max_evals == 0:
        cost_of(x0)
        if not sequence:
            raise GeometryError("initial candidate infeasible, nothing to return")
        return OptimizationRun(
            family, sequence, 0, gaps,
            cost_functional=J, body_force=f, solver_config=cfg, mesh_h=opt.mesh_h,
        )

    simplex = [x0]
    for i in range(n):
        v = x0.copy()
        v[i] += opt.step
        simplex.append(v)
    try:
        fvals = [cost_of(v) for v in simplex]
        if not any(np.isfinite(fv) for fv in fvals):
            raise GeometryError("no feasible initial simplex")

        while evals < budget:
            order = np.argsort(fvals)
            simplex = [simplex[i] for i in order]
            fvals = [fvals[i] for i in order]
            diam = max(float(np.linalg.norm(v - simplex[0])) for v in simplex[1:])
            finite = [fv for fv in fvals if np.isfinite(fv)]
            spread = (
                (max(finite) - min(finite)) if len(finite) == len(fvals) else np.inf
            )
            if diam < opt.diam_tol or spread < opt.spread_tol:
                break

            centroid = np.mean(simplex[:-1], axis=0)
            xr = centroid + (centroid - simplex[-1])
            fr = cost_of(xr)
            if fr < fvals[0]:
                xe = centroid + 2.0 * (centroid - simplex[-1])
                fe = cost_of(xe)
                if fe < fr:
                    simplex[-1], fvals[-1] = xe, fe
                else:
                    simplex[-1], fvals[-1] = xr, fr
            elif fr < fvals[-2]:
                simplex[-1], fvals[-1] = xr, fr
            else:
                if fr < fvals[-1]:
                    xc = centroid + 0.5 * (xr - centroid)
                else:
                    xc = centroid + 0.5 * (simplex[-1] - centroid)
                fc = cost_of(xc)
                if fc < min(fr, fvals[-1]):
                    simplex[-1], fvals[-1] = xc, fc
                else:
                    for i in range(1, len(simplex)):
                        simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
                        fvals[i] = cost_of(simplex[i])
    except _BudgetExhausted:
        pass

    if not sequence:
        raise GeometryError("no feasible candidate was ever accepted")
    best = int(np.argmin([rec.cost for rec in sequence]))
    return OptimizationRun(
        family, sequence, best, gaps,
        cost_functional=J, body_force=f, solver_config=cfg, mesh_h=opt.mesh_h,
    )


# ---------------------------------------------------------------------------
# existence-proof diagnostics


@dataclass
class Theorem51Report:
    """Numerical witnesses for the compactness argument on the recorded tail.

    vanishing_check measures the limit surrogate where the discrete
    geometry represents the obstacle faithfully (one chord sagitta deep);
    boundary_layer_l2 reports the remainder, the L2 mass trapped between
    the mesh chords and the true boundary, which shrinks like h^3.
    """

    weak_limit_check: list
    vanishing_check: float
    vanishing_nodal_max: float
    boundary_layer_l2: float
    norm_convergence: list
    fatou_gap: float
    fatou_curve: list
    gamma_indices: list

    def __post_init__(self):
        flat = (
            list(self.weak_limit_check)
            + [self.vanishing_check, self.vanishing_nodal_max,
               self.boundary_layer_l2, self.fatou_gap]
            + list(self.norm_convergence)
            + [v for _, v in self.fatou_curve]
        )
        if not all(np.isfinite(v) for v in flat):
            raise InvariantViolation("diagnostic report contains non-finite entries")


def _sample_extended(sol, pts):
    """Zero-extension values of a ring solution at arbitrary hold-all points."""
    return sol.velocity.eval(pts, outside=0.0)


def run_diagnostics(run, probes, tail=5, refine_h=None, background_h=0.05,
                    resolution=1.0 / 256.0):
    """Replays the existence proof's steps on the tail of a recorded run.

    The last tail solution stands in for the weak limit; its extension by
    zero is sampled directly from the flow mesh, so the vanishing checks
    on the final obstacle decay with the boundary chords.  refine_h
    re-solves the tail candidates on finer meshes first (the tail
    refinement study), sharpening every check.  The Fatou integral is
    taken over an erosion exhaustion of the final flow region, doubled in
    depth each level until it saturates the quadrature.
    """
    if len(run.sequence) < 3:
        raise GeometryError("diagnostics need at least 3 recorded candidates")
    tail_recs = run.sequence[-min(tail, len(run.sequence)):]
    tail_gaps = run.hausdorff_gaps[-(len(tail_recs) - 1):] if len(tail_recs) > 1 else []
    slack = 2.0 * resolution
    for a, b in zip(tail_gaps, tail_gaps[1:]):
        if b > a + slack:
            raise GeometryError(
                f"sequence not Cauchy in rho: gap grew {a:.4g} -> {b:.4g}"
            )

    fam = run.family
    if refine_h is not None:
        if run.body_force is None or run.solver_config is None:
            raise ConfigError("tail refinement needs the run's force and config")
        refined = []
        for rec in tail_recs:
            mesh = triangulate(Box(*fam.box), holes=[rec.domain], h=refine_h)
            sol = solve_nse(mesh, run.body_force, run.solver_config)
            cost = cost_integral(sol, run.cost_functional, fam)
            refined.append(CandidateRecord(rec.params, rec.domain, cost, sol))
        tail_recs = refined
    hat = tail_recs[-1]
    star = hat.domain

    # strong L2 convergence of the zero-extensions on one hold-all grid
    box_mesh = triangulate(Box(*fam.box), h=background_h)
    bary, w = triangle_rule(COST_DEGREE)
    verts = box_mesh.vertices[box_mesh.triangles]
    qpts = np.einsum("qk,nkc->nqc", np.atleast_2d(bary), verts)
    flat = qpts.reshape(-1, 2)
    u_hat_vals = _sample_extended(hat.solution, flat)
    weak_limit = []
    for rec in tail_recs:
        diff = _sample_extended(rec.solution, flat) - u_hat_vals
        sq = np.sum(diff**2, axis=1).reshape(len(verts), -1)
        weak_limit.append(float(np.sqrt(np.einsum("nq,q,n->", sq, w, box_mesh.areas))))

    # vanishing on the final obstacle, once by nodes and once in L2; the
    # chord collar (where the mesh boundary undercuts the true curve) is
    # measured separately
    mask, meta = rasterize(
        lambda p: star.contains(p), star.bbox(), resolution
    )
    ii, jj = np.nonzero(mask)
    cell = meta["dx"] * meta["dy"]
    inner = np.column_stack(
        [meta["x0"] + (ii + 0.5) * meta["dx"], meta["y0"] + (jj + 0.5) * meta["dy"]]
    )
    vals = _sample_extended(hat.solution, inner)
    h_flow = hat.solution.velocity.mesh.h_max
    collar = _chord_sagitta(star, h_flow)
    deep = -star.signed_distance(inner) > collar
    nodal_max = float(np.abs(vals[deep]).max()) if deep.any() else 0.0
    l2_omega = float(np.sqrt(np.sum(vals[deep] ** 2) * cell))
    layer_l2 = float(np.sqrt(np.sum(vals[~deep] ** 2) * cell))

    # norm convergence certifies the limit surrogate
    h1_hat = h1_norm(hat.solution.velocity)
    norm_conv = [abs(h1_norm(rec.solution.velocity) - h1_hat) for rec in tail_recs]

    # Fatou: nonnegative integrand over an increasing erosion exhaustion
    fatou_curve, fatou_gap = _fatou_exhaustion(
        hat, run.cost_functional, min(rec.cost for rec in tail_recs), fam
    )

    gamma_indices = []
    doms = [rec.domain for rec in tail_recs]
    for probe in probes:
        pts = _probe_sample(probe, resolution)
        if bool(np.all(star.contains(pts))):
            rep = check_gamma(doms, probe, resolution=resolution)
            gamma_indices.append(("gamma", rep))
        elif bool(np.all(star.outside_closure(pts))):
            rep = check_gamma_hat(doms, probe, resolution=resolution)
            gamma_indices.append(("gamma_hat", rep))
        else:
            raise ConfigError(
                "probe region straddles the final obstacle boundary"
            )

    return Theorem51Report(
        weak_limit_check=weak_limit,
        vanishing_check=l2_omega,
        vanishing_nodal_max=nodal_max,
        boundary_layer_l2=layer_l2,
        norm_convergence=norm_conv,
        fatou_gap=fatou_gap,
        fatou_curve=fatou_curve,
        gamma_indices=gamma_indices,
    )


def _chord_sagitta(dom, h):
    """Worst-case deviation of mesh boundary chords of length h from the curve."""
    poly = dom.boundary_polyline(2048)
    a, b, c = poly[:-2], poly[1:-1], poly[2:]
    ab = np.linalg.norm(b - a, axis=1)
    bc = np.linalg.norm(c - b, axis=1)
    ca = np.linalg.norm(a - c, axis=1)
    cross = np.abs(
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
        - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    )
    ok = cross > 1e-14
    radius = np.where(ok, ab * bc * ca / np.maximum(2.0 * cross, 1e-300), np.inf)
    r_min = float(np.min(radius))
    return h**2 / (4.0 * r_min) if np.isfinite(r_min) else 0.0


def _probe_sample(region, resolution):
    mask, meta = rasterize(
        lambda p: region.contains(p, closed=True), region.bbox(), resolution
    )
    ii, jj = np.nonzero(mask)
    return np.column_stack(
        [meta["x0"] + (ii + 0.5) * meta["dx"], meta["y0"] + (jj + 0.5) * meta["dy"]]
    )


def _fatou_exhaustion(hat, J, best_cost, fam, max_level=20):
    """Masked-quadrature integrals over erosions at depth 2^-j * diam.

    Returns the increasing (level, integral) curve and the gap between its
    terminal value and the smallest recorded cost.
    """
    mesh = hat.solution.velocity.mesh
    bary, w = triangle_rule(COST_DEGREE)
    verts = mesh.vertices[mesh.triangles]
    qpts = np.einsum("qk,nkc->nqc", np.atleast_2d(bary), verts)
    flat = qpts.reshape(-1, 2)
    xi = hat.solution.velocity.element_values(bary)
    eta = hat.solution.velocity.element_gradients(bary)
    nt, nq = xi.shape[:2]
    if J is None:
        J = CostFunctional(kind="drag")
    dens = J.evaluate(flat, xi.reshape(-1, 2), eta.reshape(-1, 2, 2)).reshape(nt, nq)
    if J.integration_region == "over_B_minus":
        cx, cy, R = fam.ball
        dens = dens * (
            np.hypot(flat[:, 0] - cx, flat[:, 1] - cy) <= R
        ).reshape(nt, nq)

    x0, y0, x1, y1 = fam.box
    diam = float(np.hypot(x1 - x0, y1 - y0))
    wall = np.minimum.reduce(
        [flat[:, 0] - x0, x1 - flat[:, 0], flat[:, 1] - y0, y1 - flat[:, 1]]
    )
    dist = np.minimum(wall, np.abs(hat.domain.signed_distance(flat)))
    dist = dist.reshape(nt, nq)

    curve = []
    for j in range(1, max_level + 1):
        depth = diam * 2.0**-j
        keep = np.all(dist > depth, axis=1)
        integral = float(np.einsum("nq,q,n->", dens[keep], w, mesh.areas[keep]))
        curve.append((j, integral))
        if int(keep.sum()) == nt:
            break
    terminal = curve[-1][1]
    return curve, terminal - best_cost
