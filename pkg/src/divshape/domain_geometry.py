"""Planar domains with locally-graph boundaries.

A domain is described by overlapping local charts: each chart has an origin
on the boundary, a rotation taking the reference vertical to the outward
direction y_g, and a graph function g over an interval, so that the boundary
is the union of the chart graphs.  Star-shaped domains with trigonometric
radial profiles are the concrete constructor; validation, boundary strips,
the complement Hausdorff distance and the compact-containment indices for
domain sequences all work through the chart/membership interface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import distance_transform_edt
from scipy.spatial import cKDTree

from .errors import GeometryError

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# simple regions (used as covering patches, probe compacts, cost windows)


@dataclass(frozen=True)
class Box:
    """Axis-aligned open box (x0, x1) x (y0, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, pts, closed=False):
        pts = np.atleast_2d(pts)
        if closed:
            return (
                (pts[:, 0] >= self.x0) & (pts[:, 0] <= self.x1)
                & (pts[:, 1] >= self.y0) & (pts[:, 1] <= self.y1)
            )
        return (
            (pts[:, 0] > self.x0) & (pts[:, 0] < self.x1)
            & (pts[:, 1] > self.y0) & (pts[:, 1] < self.y1)
        )

    def depth(self, pts):
        """Distance to the complement; zero outside."""
        pts = np.atleast_2d(pts)
        d = np.minimum(
            np.minimum(pts[:, 0] - self.x0, self.x1 - pts[:, 0]),
            np.minimum(pts[:, 1] - self.y0, self.y1 - pts[:, 1]),
        )
        return np.maximum(d, 0.0)

    def bbox(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class Disk:
    cx: float
    cy: float
    r: float

    def contains(self, pts, closed=False):
        pts = np.atleast_2d(pts)
        rr = np.hypot(pts[:, 0] - self.cx, pts[:, 1] - self.cy)
        return rr <= self.r if closed else rr < self.r

    def depth(self, pts):
        pts = np.atleast_2d(pts)
        rr = np.hypot(pts[:, 0] - self.cx, pts[:, 1] - self.cy)
        return np.maximum(self.r - rr, 0.0)

    def bbox(self):
        return (self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)

    def boundary_point(self, phi):
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        return np.column_stack(
            [self.cx + self.r * np.cos(phi), self.cy + self.r * np.sin(phi)]
        )


@dataclass(frozen=True)
class Annulus:
    cx: float
    cy: float
    r_in: float
    r_out: float

    def contains(self, pts, closed=False):
        pts = np.atleast_2d(pts)
        rr = np.hypot(pts[:, 0] - self.cx, pts[:, 1] - self.cy)
        if closed:
            return (rr >= self.r_in) & (rr <= self.r_out)
        return (rr > self.r_in) & (rr < self.r_out)

    def depth(self, pts):
        pts = np.atleast_2d(pts)
        rr = np.hypot(pts[:, 0] - self.cx, pts[:, 1] - self.cy)
        return np.maximum(np.minimum(rr - self.r_in, self.r_out - rr), 0.0)

    def bbox(self):
        return (
            self.cx - self.r_out,
            self.cy - self.r_out,
            self.cx + self.r_out,
            self.cy + self.r_out,
        )


# ---------------------------------------------------------------------------
# radial profiles and charts


class RadialProfile:
    """Trigonometric polynomial rho(phi) = c0 + sum a_m cos + b_m sin."""

    def __init__(self, c0, cos_coeffs=(), sin_coeffs=()):
        self.c0 = float(c0)
        self.cos_coeffs = np.asarray(cos_coeffs, dtype=float)
        self.sin_coeffs = np.asarray(sin_coeffs, dtype=float)
        n = max(len(self.cos_coeffs), len(self.sin_coeffs))
        self._a = np.zeros(n)
        self._b = np.zeros(n)
        self._a[: len(self.cos_coeffs)] = self.cos_coeffs
        self._b[: len(self.sin_coeffs)] = self.sin_coeffs
        self._m = np.arange(1, n + 1)

    def __call__(self, phi):
        phi = np.asarray(phi, dtype=float)
        arg = np.multiply.outer(phi, self._m)
        return self.c0 + np.cos(arg) @ self._a + np.sin(arg) @ self._b

    def deriv(self, phi):
        phi = np.asarray(phi, dtype=float)
        arg = np.multiply.outer(phi, self._m)
        return -np.sin(arg) @ (self._m * self._a) + np.cos(arg) @ (self._m * self._b)

    def deriv2(self, phi):
        phi = np.asarray(phi, dtype=float)
        arg = np.multiply.outer(phi, self._m)
        m2 = self._m**2
        return -np.cos(arg) @ (m2 * self._a) - np.sin(arg) @ (m2 * self._b)

    def to_dict(self):
        return {
            "c0": self.c0,
            "cos": list(map(float, self.cos_coeffs)),
            "sin": list(map(float, self.sin_coeffs)),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["c0"], d.get("cos", ()), d.get("sin", ()))


@dataclass
class ChartFunction:
    """Graph function g over [-halfwidth, halfwidth] with slope and value bounds."""

    spline: CubicSpline
    halfwidth: float
    sup_value: float
    lip_value: float

    def __call__(self, s):
        return self.spline(s)

    def slope(self, s):
        return self.spline(s, 1)


@dataclass
class LocalChart:
    """Boundary patch {origin + s*tangent + g(s)*y_g}, y_g the outward unit."""

    origin: np.ndarray
    tangent: np.ndarray
    y_g: np.ndarray
    g: ChartFunction
    phi_center: float = 0.0

    def points(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return (
            self.origin[None, :]
            + np.outer(s, self.tangent)
            + np.outer(self.g(s), self.y_g)
        )

    def local_coords(self, pts):
        pts = np.atleast_2d(pts)
        rel = pts - self.origin[None, :]
        return rel @ self.tangent, rel @ self.y_g

    @property
    def rotation(self):
        """Columns (tangent | y_g); maps the reference vertical to y_g."""
        return np.column_stack([self.tangent, self.y_g])


@dataclass
class DomainParams:
    k_omega: float
    a_omega: float
    r_omega: float
    lip: float
    sup: float


@dataclass(frozen=True)
class AdmissibleFamily:
    """Uniform chart bounds shared by a family of domains inside a fixed ball.

    Members must have chart radius at least k, restricted covering radius at
    most r, segment depth at least a, and graph families bounded by sup and
    Lipschitz-bounded by lip.  The ball (cx, cy, R) contains every member and
    the box (x0, y0, x1, y1) is the hold-all for the flow problems.
    """

    a: float
    r: float
    k: float
    lip: float
    sup: float
    ball: tuple
    box: tuple

    def admits(self, domain):
        p = domain.params
        msgs = []
        if p.k_omega < self.k:
            msgs.append(f"chart radius {p.k_omega:.4g} below family bound {self.k:.4g}")
        if p.r_omega > self.r:
            msgs.append(f"covering radius {p.r_omega:.4g} above family bound {self.r:.4g}")
        if p.a_omega < self.a:
            msgs.append(f"segment depth {p.a_omega:.4g} below family bound {self.a:.4g}")
        if p.lip > self.lip:
            msgs.append(f"graph slope {p.lip:.4g} above family bound {self.lip:.4g}")
        if p.sup > self.sup:
            msgs.append(f"graph height {p.sup:.4g} above family bound {self.sup:.4g}")
        cx, cy, R = self.ball
        far = np.max(np.hypot(*(domain.boundary_polyline() - [cx, cy]).T))
        if far > R:
            msgs.append(f"boundary reaches {far:.4g} outside family ball {R:.4g}")
        return len(msgs) == 0, msgs

    def to_dict(self):
        return {
            "a": self.a,
            "r": self.r,
            "k": self.k,
            "lip": self.lip,
            "sup": self.sup,
            "B": list(self.ball),
            "D": list(self.box),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["a"], d["r"], d["k"], d["lip"], d["sup"],
            tuple(d["B"]), tuple(d["D"]),
        )


class ClassCDomain:
    """Bounded open set whose boundary is covered by graph charts."""

    def __init__(self, center, profile, charts, params, family=None):
        self.center = np.asarray(center, dtype=float)
        self.profile = profile
        self.charts = list(charts)
        self.params = params
        self.family = family
        self._tree = None
        self._poly = None

    # membership is exact through the radial profile

    def contains(self, pts, closed=False):
        pts = np.atleast_2d(pts)
        rel = pts - self.center[None, :]
        rr = np.hypot(rel[:, 0], rel[:, 1])
        rho = self.profile(np.arctan2(rel[:, 1], rel[:, 0]))
        return rr <= rho if closed else rr < rho

    def outside_closure(self, pts):
        pts = np.atleast_2d(pts)
        rel = pts - self.center[None, :]
        rr = np.hypot(rel[:, 0], rel[:, 1])
        rho = self.profile(np.arctan2(rel[:, 1], rel[:, 0]))
        return rr > rho

    def boundary_point(self, phi):
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        rho = self.profile(phi)
        return self.center[None, :] + np.column_stack(
            [rho * np.cos(phi), rho * np.sin(phi)]
        )

    def boundary_polyline(self, n=2048):
        if self._poly is None or len(self._poly) != n:
            phi = np.linspace(0.0, TWO_PI, n, endpoint=False)
            self._poly = self.boundary_point(phi)
        return self._poly

    def outward_normal(self, phi):
        """Unit outward normal at the boundary point with polar angle phi."""
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        rho = self.profile(phi)
        drho = self.profile.deriv(phi)
        c, s = np.cos(phi), np.sin(phi)
        tx = drho * c - rho * s
        ty = drho * s + rho * c
        n = np.column_stack([ty, -tx])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def signed_distance(self, pts):
        """Approximate signed distance, negative inside."""
        if self._tree is None:
            self._tree = cKDTree(self.boundary_polyline(4096))
        pts = np.atleast_2d(pts)
        d, _ = self._tree.query(pts)
        sign = np.where(self.contains(pts), -1.0, 1.0)
        return sign * d

    def depth(self, pts):
        return np.maximum(-self.signed_distance(pts), 0.0)

    def bbox(self, pad=0.0):
        poly = self.boundary_polyline()
        x0, y0 = poly.min(axis=0) - pad
        x1, y1 = poly.max(axis=0) + pad
        return (x0, y0, x1, y1)

    def to_dict(self):
        d = {
            "center": list(map(float, self.center)),
            "radial_coeffs": self.profile.to_dict(),
        }
        if self.family is not None:
            d["family"] = self.family.to_dict()
        return d

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")


def load_domain(path):
    with open(path) as f:
        d = json.load(f)
    family = AdmissibleFamily.from_dict(d["family"]) if "family" in d else None
    return make_star_domain(
        d["center"], RadialProfile.from_dict(d["radial_coeffs"]), family=family
    )


# ---------------------------------------------------------------------------
# star-domain construction


def _build_chart(center, profile, phi_c, halfwindow, n=257):
    """Graph chart over the tangent line at boundary angle phi_c."""
    phi = np.linspace(phi_c - halfwindow, phi_c + halfwindow, n)
    rho = profile(phi)
    pts = np.asarray(center)[None, :] + np.column_stack(
        [rho * np.cos(phi), rho * np.sin(phi)]
    )
    drho = profile.deriv(phi_c)
    rho_c = profile(np.array([phi_c]))[0]
    tvec = np.array(
        [
            drho * np.cos(phi_c) - rho_c * np.sin(phi_c),
            drho * np.sin(phi_c) + rho_c * np.cos(phi_c),
        ]
    )
    tvec /= np.hypot(*tvec)
    nvec = np.array([tvec[1], -tvec[0]])  # outward for counterclockwise boundary

    origin = pts[n // 2]
    rel = pts - origin[None, :]
    s = rel @ tvec
    y = rel @ nvec
    if not np.all(np.diff(s) > 0):
        return None
    spline = CubicSpline(s, y)
    halfwidth = min(-s[0], s[-1])
    grid = np.linspace(-halfwidth, halfwidth, 401)
    gf = ChartFunction(
        spline,
        halfwidth,
        sup_value=float(np.max(np.abs(spline(grid)))),
        lip_value=float(np.max(np.abs(spline(grid, 1)))),
    )
    return LocalChart(origin, tvec, nvec, gf, phi_center=phi_c)


def _segment_property_holds(domain, a, n_s=33, n_t=12):
    ts = np.linspace(a / 24.0, a * (1.0 - 1.0 / 24.0), n_t)
    for chart in domain.charts:
        s = np.linspace(-chart.g.halfwidth, chart.g.halfwidth, n_s)
        base = chart.points(s)
        for t in ts:
            inner = base - t * chart.y_g[None, :]
            outer = base + t * chart.y_g[None, :]
            if not np.all(domain.contains(inner)):
                return False
            if not np.all(domain.outside_closure(outer)):
                return False
    return True


def _covering_radius(domain, n_phi=720):
    """Smallest chart restriction radius that still covers the boundary."""
    phi = np.linspace(0.0, TWO_PI, n_phi, endpoint=False)
    pts = domain.boundary_point(phi)
    need = np.full(n_phi, np.inf)
    for chart in domain.charts:
        s, y = chart.local_coords(pts)
        on_graph = np.abs(y - chart.g.spline(np.clip(s, -chart.g.halfwidth, chart.g.halfwidth))) < 1e-9
        ok = on_graph & (np.abs(s) <= chart.g.halfwidth)
        need[ok] = np.minimum(need[ok], np.abs(s[ok]))
    if not np.all(np.isfinite(need)):
        return None
    return float(np.max(need))


def make_star_domain(center, radial, family=None, n_charts=None):
    """Build a star-shaped domain with graph charts along its boundary.

    radial is a RadialProfile or a coefficient dict.  The chart count is
    raised until every chart window is an honest graph; the segment depth is
    found by shrinking a curvature-based candidate until the two-sided
    segment test passes on a dense sample.
    """
    if isinstance(radial, dict):
        radial = RadialProfile.from_dict(radial)
    center = np.asarray(center, dtype=float)

    phi_dense = np.linspace(0.0, TWO_PI, 1440, endpoint=False)
    rho = radial(phi_dense)
    if np.min(rho) <= 0.0:
        raise GeometryError("radial profile must stay positive")

    counts = [n_charts] if n_charts else [12, 16, 24, 32, 48, 64]
    domain = None
    for m in counts:
        halfwindow = 1.6 * np.pi / m
        charts = []
        for j in range(m):
            chart = _build_chart(center, radial, TWO_PI * j / m, halfwindow)
            if chart is None:
                charts = None
                break
            charts.append(chart)
        if charts is None:
            continue
        params = DomainParams(
            k_omega=min(c.g.halfwidth for c in charts),
            a_omega=0.0,
            r_omega=0.0,
            lip=max(c.g.lip_value for c in charts),
            sup=max(c.g.sup_value for c in charts),
        )
        domain = ClassCDomain(center, radial, charts, params, family=family)
        break
    if domain is None:
        raise GeometryError("boundary is not a graph over any tried chart window")

    r_cov = _covering_radius(domain)
    if r_cov is None or r_cov >= domain.params.k_omega:
        raise GeometryError("restricted charts fail to cover the boundary")
    domain.params.r_omega = min(1.10 * r_cov, 0.97 * domain.params.k_omega)

    drho = radial.deriv(phi_dense)
    ddrho = radial.deriv2(phi_dense)
    denom = (rho**2 + drho**2) ** 1.5
    kappa = (rho**2 + 2 * drho**2 - rho * ddrho) / denom
    with np.errstate(divide="ignore"):
        reach = np.min(1.0 / np.abs(kappa[np.abs(kappa) > 1e-12]))
    a = min(0.8 * reach, 0.5 * float(np.min(rho)))
    floor = 1e-3 * float(np.min(rho))
    while a > floor and not _segment_property_holds(domain, a):
        a *= 0.5
    if a <= floor:
        raise GeometryError("segment property fails down to the depth floor")
    domain.params.a_omega = a

    if family is not None:
        ok, msgs = family.admits(domain)
        if not ok:
            raise GeometryError("family bounds violated: " + "; ".join(msgs))
    return domain


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    ok: bool
    graph_ok: bool
    segment_ok: bool
    coverage_ok: bool
    family_ok: bool
    margins: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def validate_class_c(domain, n_samples=64, n_depths=16, tol=1e-9):
    """Independent check of the chart description of a domain.

    Verifies that chart graphs really lie on the boundary, that translating
    chart points by -t*y_g / +t*y_g lands inside / outside for t up to the
    stored segment depth, that restricted charts cover the boundary, and
    that any attached family bounds hold.
    """
    failures = []
    a = domain.params.a_omega

    graph_ok = True
    for idx, chart in enumerate(domain.charts):
        s = np.linspace(-chart.g.halfwidth, chart.g.halfwidth, n_samples)
        pts = chart.points(s)
        rel = pts - domain.center[None, :]
        rr = np.hypot(rel[:, 0], rel[:, 1])
        rho = domain.profile(np.arctan2(rel[:, 1], rel[:, 0]))
        err = float(np.max(np.abs(rr - rho)))
        if err > 1e-6 * max(1.0, float(np.max(rho))):
            graph_ok = False
            failures.append(f"chart {idx}: graph leaves the boundary by {err:.3e}")

    segment_ok = True
    worst_inner = np.inf
    worst_outer = np.inf
    ts = np.linspace(a / (2 * n_depths), a * (1 - 1.0 / (2 * n_depths)), n_depths)
    for idx, chart in enumerate(domain.charts):
        s = np.linspace(-chart.g.halfwidth, chart.g.halfwidth, n_samples)
        base = chart.points(s)
        for t in ts:
            inner = base - t * chart.y_g[None, :]
            outer = base + t * chart.y_g[None, :]
            rel_i = inner - domain.center[None, :]
            rel_o = outer - domain.center[None, :]
            mi = domain.profile(np.arctan2(rel_i[:, 1], rel_i[:, 0])) - np.hypot(
                rel_i[:, 0], rel_i[:, 1]
            )
            mo = np.hypot(rel_o[:, 0], rel_o[:, 1]) - domain.profile(
                np.arctan2(rel_o[:, 1], rel_o[:, 0])
            )
            worst_inner = min(worst_inner, float(np.min(mi)))
            worst_outer = min(worst_outer, float(np.min(mo)))
            if np.any(mi <= tol) or np.any(mo <= tol):
                segment_ok = False
                failures.append(
                    f"chart {idx}: segment test fails at depth {t:.4g}"
                )
                break

    r = domain.params.r_omega
    phi = np.linspace(0.0, TWO_PI, 720, endpoint=False)
    pts = domain.boundary_point(phi)
    covered = np.zeros(len(phi), dtype=bool)
    for chart in domain.charts:
        s, y = chart.local_coords(pts)
        inside = np.abs(s) <= r
        close = np.abs(
            y - chart.g.spline(np.clip(s, -chart.g.halfwidth, chart.g.halfwidth))
        ) < 1e-7
        covered |= inside & close
    coverage_ok = bool(np.all(covered))
    if not coverage_ok:
        failures.append("restricted charts do not cover the boundary")

    family_ok = True
    if domain.family is not None:
        family_ok, msgs = domain.family.admits(domain)
        failures.extend(msgs)

    return ValidationReport(
        ok=graph_ok and segment_ok and coverage_ok and family_ok,
        graph_ok=graph_ok,
        segment_ok=segment_ok,
        coverage_ok=coverage_ok,
        family_ok=family_ok,
        margins={"inner": worst_inner, "outer": worst_outer},
        failures=failures,
    )


# ---------------------------------------------------------------------------
# boundary strips


@dataclass
class BoundaryStrip:
    """Tubular patch {p(s) + t*v : |s| < halfwidth, |t| < depth} around a chart.

    v points outward, so t < 0 is the interior side, t > 0 the exterior side
    and t = 0 the boundary trace.  The bottom cap at t = -depth lies inside
    the domain.
    """

    chart: LocalChart
    depth: float
    halfwidth: float

    def point(self, s, t):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), s.shape)
        base = self.chart.points(s)
        return base + np.outer(t, self.chart.y_g)

    def local_coords(self, pts):
        """(s, t) with t measured from the graph along v."""
        s, y = self.chart.local_coords(pts)
        sc = np.clip(s, -self.chart.g.halfwidth, self.chart.g.halfwidth)
        return s, y - self.chart.g.spline(sc)

    def contains(self, pts):
        s, t = self.local_coords(pts)
        return (np.abs(s) < self.halfwidth) & (np.abs(t) < self.depth)

    def classify(self, pts):
        """-1 interior side, +1 exterior side, 0 on the graph, 2 outside."""
        s, t = self.local_coords(pts)
        out = (np.abs(s) >= self.halfwidth) | (np.abs(t) >= self.depth)
        side = np.sign(t).astype(int)
        side[out] = 2
        return side

    def cap_points(self, n=33):
        s = np.linspace(-self.halfwidth, self.halfwidth, n)
        return self.point(s, np.full(n, -self.depth))


def boundary_strips(domain, depth=None, verify=True):
    """Strips V_j around each chart, with verified one-sided splitting.

    The requested depth is shrunk until the interior sub-strip sits inside
    the domain, the exterior sub-strip outside, and the bottom cap inside.
    """
    a = domain.params.a_omega
    d = min(depth, 0.95 * a) if depth else 0.5 * a
    for _ in range(20):
        ok = True
        for chart in domain.charts:
            s = np.linspace(-chart.g.halfwidth, chart.g.halfwidth, 41)
            base = chart.points(s)
            for t in np.linspace(d / 16.0, d, 8):
                if not np.all(domain.contains(base - t * chart.y_g[None, :])):
                    ok = False
                    break
                if not np.all(domain.outside_closure(base + t * chart.y_g[None, :])):
                    ok = False
                    break
            if not ok:
                break
        if ok or not verify:
            break
        d *= 0.7
    else:
        raise GeometryError("no admissible strip depth found")
    return [
        BoundaryStrip(chart, depth=d, halfwidth=chart.g.halfwidth)
        for chart in domain.charts
    ]


# ---------------------------------------------------------------------------
# rasters and the complement Hausdorff distance


def rasterize(contains_fn, bbox, resolution):
    """Boolean grid of membership at cell centers; returns (mask, meta)."""
    x0, y0, x1, y1 = bbox
    nx = max(2, int(np.ceil((x1 - x0) / resolution)))
    ny = max(2, int(np.ceil((y1 - y0) / resolution)))
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    mask = np.asarray(contains_fn(pts)).reshape(nx, ny)
    meta = {"x0": x0, "y0": y0, "dx": (x1 - x0) / nx, "dy": (y1 - y0) / ny}
    return mask, meta


def write_pgm(mask, path):
    """Binary PGM dump of a boolean raster, 255 inside."""
    img = np.where(mask.T[::-1], 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    img = np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)
    return (img[::-1].T > 127)


def hausdorff_pompeiu(dom1, dom2, ball=None, resolution=1.0 / 512.0):
    """Hausdorff distance between the in-ball complements of two domains.

    The ball defaults to the attached family ball.  Both complements are
    rasterized on one grid and the two directed gaps are taken with a
    Euclidean distance transform, so the result is symmetric by
    construction and accurate to about one cell.
    """
    if ball is None:
        fam = dom1.family or dom2.family
        if fam is None:
            raise GeometryError("no ball given and no family attached")
        ball = fam.ball
    cx, cy, R = ball
    bbox = (cx - R, cy - R, cx + R, cy + R)

    def complement(dom):
        def fn(pts):
            in_ball = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) <= R
            return in_ball & ~dom.contains(pts)
        return fn

    k1, meta = rasterize(complement(dom1), bbox, resolution)
    k2, _ = rasterize(complement(dom2), bbox, resolution)
    sampling = (meta["dx"], meta["dy"])
    if not k1.any() or not k2.any():
        return 0.0 if (not k1.any() and not k2.any()) else np.inf
    d_to_2 = distance_transform_edt(~k2, sampling=sampling)
    d_to_1 = distance_transform_edt(~k1, sampling=sampling)
    return float(max(d_to_2[k1].max(), d_to_1[k2].max()))


# ---------------------------------------------------------------------------
# compact containment along domain sequences


@dataclass
class GammaIndexReport:
    holds: bool
    m_index: int | None
    per_index: list


def _probe_points(region, resolution):
    mask, meta = rasterize(
        lambda p: region.contains(p, closed=True), region.bbox(), resolution
    )
    ii, jj = np.nonzero(mask)
    xs = meta["x0"] + (ii + 0.5) * meta["dx"]
    ys = meta["y0"] + (jj + 0.5) * meta["dy"]
    return np.column_stack([xs, ys])


def check_gamma(domains, region, resolution=1.0 / 256.0):
    """First index from which a compact probe set sits inside every domain.

    Membership is tested exactly at the raster points of the probe region;
    m_index is None when no tail of the sequence contains the probe.
    """
    pts = _probe_points(region, resolution)
    if len(pts) == 0:
        raise GeometryError("probe region rasterizes to nothing; refine")
    per = [bool(np.all(dom.contains(pts))) for dom in domains]
    m_index = None
    for i in range(len(per)):
        if all(per[i:]):
            m_index = i
            break
    return GammaIndexReport(holds=m_index is not None, m_index=m_index, per_index=per)


def check_gamma_hat(domains, region, resolution=1.0 / 256.0):
    """Same as check_gamma for probes compactly outside the closures."""
    pts = _probe_points(region, resolution)
    if len(pts) == 0:
        raise GeometryError("probe region rasterizes to nothing; refine")
    per = [bool(np.all(dom.outside_closure(pts))) for dom in domains]
    m_index = None
    for i in range(len(per)):
        if all(per[i:]):
            m_index = i
            break
    return GammaIndexReport(holds=m_index is not None, m_index=m_index, per_index=per)
