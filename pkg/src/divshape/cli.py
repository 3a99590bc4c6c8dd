"""Experiment presets with deterministic reporting, and the console entry.

Each preset replays the property suite of one module at desk scale: it
runs the module pipeline on seeded inputs, evaluates every acceptance
check exactly once, and writes a report bundle (summary JSON, CSV tables,
artifact files).  Summaries are byte-identical across runs with the same
config and seed; wall-clock data lives in a separate meta file so the
summary stays comparable.
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass, field as dc_field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .domain_geometry import (
    AdmissibleFamily,
    Box,
    Disk,
    RadialProfile,
    hausdorff_pompeiu,
    load_domain,
    make_star_domain,
    validate_class_c,
)
from .divfree_decomposition import (
    FormSum,
    GradientForm,
    StreamField,
    WindingForm,
    curl_of_stream,
    decompose,
    decompose_covering,
    localized_decompose,
    periods_and_potential,
    random_divfree_field,
    ring_regions,
    shift_convergence,
    witness_space_identity,
)
from .errors import (
    ConfigError,
    GeometryError,
    InvariantViolation,
    MeshQualityError,
    SolverDivergence,
)
from .mesh_fields import (
    ScalarField,
    TriangleMesh,
    h1_norm,
    save_scalar_csv,
    save_vector_csv,
    triangulate,
    weak_divergence_residual,
)
from .nse_solver import (
    BodyForce,
    SolverConfig,
    energy_identity_residual,
    manufactured_case,
    pressure_l2_error,
    solve_nse,
    uniqueness_margin,
    velocity_h1_error,
)
from .shape_optimizer import (
    CandidateRecord,
    CostFunctional,
    OptimizationRun,
    OptimizerConfig,
    evaluate_cost,
    minimize,
    run_diagnostics,
)

PRESETS = (
    "decomposition",
    "localization",
    "periods",
    "identity-witness",
    "nse-verify",
    "optimize",
    "optimize-interior",
)

# subcommand -> presets it may run (first entry is the default)
_SUBCOMMAND_PRESETS = {
    "decompose": ("decomposition",),
    "localize": ("localization",),
    "periods": ("periods",),
    "witness": ("identity-witness",),
    "solve-nse": ("nse-verify",),
    "optimize": ("optimize", "optimize-interior"),
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """One preset run: seed, mesh size, output path, preset options."""

    preset: str
    seed: int = 0
    h: float = None
    out: str = None
    options: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(
                f"config field 'preset': unknown preset {self.preset!r}; "
                f"choose from {', '.join(PRESETS)}"
            )
        try:
            self.seed = int(self.seed)
        except (TypeError, ValueError):
            raise ConfigError(f"config field 'seed': not an integer: {self.seed!r}")
        if self.h is not None:
            self.h = float(self.h)
            if not self.h > 0.0:
                raise ConfigError(f"config field 'h': must be positive, got {self.h}")


def load_config(path=None, preset=None, seed=None, h=None, out=None,
                allowed_presets=None):
    """Read a JSON config and fold in command-line overrides.

    The file's own preset wins over the subcommand default but must be one
    the subcommand can run.  Parse failures name the line and column.
    """
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config parse error in {path} at line {exc.lineno} "
                f"column {exc.colno}: {exc.msg}"
            )
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a JSON object, got {type(data).__name__}")
    chosen = data.get("preset", preset)
    if chosen is None:
        raise ConfigError("config field 'preset': missing")
    if allowed_presets is not None and chosen not in allowed_presets:
        raise ConfigError(
            f"config field 'preset': {chosen!r} cannot run under this "
            f"subcommand (allowed: {', '.join(allowed_presets)})"
        )
    options = {
        k: v
        for k, v in data.items()
        if k not in ("preset", "seed", "h", "out")
    }
    return ExperimentConfig(
        preset=chosen,
        seed=seed if seed is not None else data.get("seed", 0),
        h=h if h is not None else data.get("h"),
        out=out if out is not None else data.get("out"),
        options=options,
    )


# ---------------------------------------------------------------------------
# report bundles


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _check(value, threshold, cmp="<="):
    value = float(value)
    threshold = float(threshold)
    if cmp == "<=":
        ok = value <= threshold
    elif cmp == "<":
        ok = value < threshold
    elif cmp == ">=":
        ok = value >= threshold
    elif cmp == "==":
        ok = value == threshold
    else:
        raise ValueError(f"unknown comparison {cmp!r}")
    return {"value": value, "threshold": threshold, "cmp": cmp, "pass": bool(ok)}


def _bool_check(ok):
    return {"value": bool(ok), "pass": bool(ok)}


@dataclass
class ReportBundle:
    """Summary JSON plus the CSV tables and artifact files of one run."""

    preset: str
    summary: dict
    tables: dict = dc_field(default_factory=dict)
    artifacts: list = dc_field(default_factory=list)
    out_dir: Path = None
    timestamp: str = None

    @property
    def passed(self):
        return bool(self.summary.get("pass", False))

    def save(self, out_dir=None):
        d = Path(out_dir) if out_dir is not None else Path(self.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "summary.json", "w") as fh:
            json.dump(_jsonable(self.summary), fh, indent=1, sort_keys=True)
            fh.write("\n")
        # wall-clock data stays out of the summary so reruns stay comparable
        with open(d / "meta.json", "w") as fh:
            json.dump({"created": self.timestamp}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        self.out_dir = d
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        try:
            with open(d / "summary.json") as fh:
                summary = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"no summary.json under {d}")
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"summary parse error in {d} at line {exc.lineno}: {exc.msg}"
            )
        timestamp = None
        meta = d / "meta.json"
        if meta.exists():
            with open(meta) as fh:
                timestamp = json.load(fh).get("created")
        tables = {p.stem: p for p in sorted(d.glob("*.csv"))}
        return cls(
            preset=summary.get("preset", "?"),
            summary=summary,
            tables=tables,
            artifacts=[],
            out_dir=d,
            timestamp=timestamp,
        )


def _write_table(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating))
                              else str(v) for v in row) + "\n")
    return path


def compare_reports(a, b, rel_tol=0.0):
    """Field-wise numeric diff of two summaries from the same preset.

    Returns a dict keyed by dotted field path; entries below rel_tol in
    relative difference are dropped, so identical bundles give {}.
    """
    if a.preset != b.preset:
        raise ConfigError(
            f"preset mismatch: {a.preset!r} vs {b.preset!r}"
        )
    diff = {}

    def walk(x, y, path):
        if isinstance(x, dict) and isinstance(y, dict):
            for k in sorted(set(x) | set(y)):
                if k not in x or k not in y:
                    diff[path + k] = {"a": x.get(k), "b": y.get(k)}
                else:
                    walk(x[k], y[k], path + k + ".")
            return
        if isinstance(x, list) and isinstance(y, list) and len(x) == len(y):
            for i, (xi, yi) in enumerate(zip(x, y)):
                walk(xi, yi, f"{path}{i}.")
            return
        if isinstance(x, (int, float)) and isinstance(y, (int, float)) \
                and not isinstance(x, bool) and not isinstance(y, bool):
            if x != y:
                scale = max(abs(x), abs(y))
                rel = abs(x - y) / scale if scale > 0 else 0.0
                if rel > rel_tol:
                    diff[path.rstrip(".")] = {
                        "a": x, "b": y, "abs": abs(x - y), "rel": rel,
                    }
            return
        if x != y:
            diff[path.rstrip(".")] = {"a": x, "b": y}

    walk(a.summary, b.summary, "")
    return diff


# ---------------------------------------------------------------------------
# shared input constructions


def _quintic(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


def _plateau_stream(mesh, center, r_in, r_out, value=1.0):
    """Stream equal to `value` inside r_in of center and 0 beyond r_out."""
    pts = mesh.p2_coords
    r = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
    psi = value * _quintic((r_out - r) / (r_out - r_in))
    return ScalarField(mesh, psi, degree=2)


def _force_from_dict(d):
    kind = d.get("kind", "zero")
    if kind == "zero":
        return BodyForce.zero()
    if kind == "swirl":
        amp = float(d.get("amplitude", 1.0))
        freq = float(d.get("frequency", 1.0))
        w = 2.0 * np.pi * freq
        return BodyForce(
            func=lambda pts: amp * np.column_stack(
                [np.sin(w * pts[:, 1]), np.cos(w * pts[:, 0])]
            )
        )
    if kind == "uniform":
        val = np.asarray(d.get("value", (0.0, 0.0)), dtype=float)
        if val.shape != (2,):
            raise ConfigError("config field 'force.value': expected two components")
        return BodyForce(func=lambda pts: np.tile(val, (len(np.atleast_2d(pts)), 1)))
    raise ConfigError(f"config field 'force.kind': unknown kind {kind!r}")


def _solver_from_dict(d):
    known = {"gamma", "convection_sign", "picard_tol", "newton_tol",
             "max_iters", "skew_form"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"config field 'solver': unknown keys {sorted(extra)}")
    return SolverConfig(**{k: d[k] for k in known & set(d)})


def _family_from_dict(d):
    try:
        return AdmissibleFamily.from_dict(d)
    except KeyError as exc:
        raise ConfigError(f"config field 'family': missing key {exc.args[0]!r}")


_DEFAULT_FAMILY = {
    "a": 0.02, "r": 0.5, "k": 0.01, "lip": 3.0, "sup": 0.5,
    "B": [0.5, 0.5, 0.405], "D": [0.0, 0.0, 1.0, 1.0],
}


# ---------------------------------------------------------------------------
# presets


def _run_decomposition(cfg, rng, out):
    h = cfg.h if cfg.h is not None else 0.05
    n_fields = int(cfg.options.get("n_fields", 20))
    stability_h = [float(v) for v in
                   cfg.options.get("stability_h", (0.05, 0.025, 0.0125))]

    box = Box(0.0, 0.0, 1.0, 1.0)
    mesh = triangulate(box, h=h)
    # overlaps leave more than two mesh widths of covering depth everywhere
    two_regions = [Box(0.0, 0.0, 0.62, 1.0), Box(0.38, 0.0, 1.0, 1.0)]
    inner = Box(0.12, 0.12, 0.88, 0.88)
    four_covering = [
        Box(-0.15, -0.15, 0.65, 0.65), Box(0.35, -0.15, 1.15, 0.65),
        Box(-0.15, 0.35, 0.65, 1.15), Box(0.35, 0.35, 1.15, 1.15),
    ]

    rows = []
    worst_sum = 0.0
    worst_res = 0.0
    support_ok = True
    pts = mesh.p2_coords
    for k in range(n_fields):
        u = random_divfree_field(mesh, rng)
        for label, dec in (
            ("two", decompose(u, two_regions, inner)),
            ("four", decompose_covering(u, four_covering, radius=2.0)),
        ):
            res = max(dec.piece_residuals)
            strict = True
            for piece, region in zip(dec.pieces, dec.regions):
                supp = np.abs(piece.values).max(axis=1) > 0.0
                if supp.any() and not np.all(region.contains(pts[supp])):
                    strict = False
            rows.append((k, label, dec.sum_error, res, strict))
            worst_sum = max(worst_sum, dec.sum_error)
            worst_res = max(worst_res, res)
            support_ok = support_ok and strict

    # the same smooth field across refinements, regenerated from one seed
    stab_seed = int(rng.integers(2**63))
    stab_rows = []
    estimates = []
    for hs in stability_h:
        m = triangulate(box, h=hs)
        u = random_divfree_field(m, np.random.default_rng(stab_seed))
        dec = decompose(u, [Box(0.0, 0.0, 0.6, 1.0), Box(0.4, 0.0, 1.0, 1.0)],
                        inner)
        estimates.append(dec.constant_estimate)
        stab_rows.append((hs, dec.constant_estimate, dec.sum_error))
    spread = (max(estimates) - min(estimates)) / min(estimates)

    checks = {
        "partition_sum_error": _check(worst_sum, 1e-12),
        "piece_divergence": _check(worst_res, 1e-10),
        "support_strict": _bool_check(support_ok),
        "constant_stability": _check(spread, 0.20, "<"),
    }
    details = {
        "n_fields": n_fields,
        "coverings": ["two", "four"],
        "constant_estimates": estimates,
        "stability_h": stability_h,
    }
    tables = {
        "fields": (("field", "covering", "sum_error", "max_piece_residual",
                    "support_strict"), rows),
        "stability": (("h", "constant_estimate", "sum_error"), stab_rows),
    }
    return checks, details, tables, []


def _run_localization(cfg, rng, out):
    h = cfg.h if cfg.h is not None else 0.05
    c_one = float(cfg.options.get("plateau_value", 2.0))
    c_pair = [float(v) for v in cfg.options.get("pair_values", (2.0, -1.5))]

    box = Box(0.0, 0.0, 1.0, 1.0)
    mesh = triangulate(box, h=h)
    pts = mesh.p2_coords

    def vanish_abs(dec, obstacles):
        worst = 0.0
        for ob in obstacles:
            mask = np.asarray(ob.contains(pts, closed=True))
            for p in dec.pieces:
                worst = max(worst, float(np.max(np.abs(p.values[mask]))))
        return worst

    rows = []

    # one disk: stream held at a known constant around the obstacle
    omega = make_star_domain((0.5, 0.5), RadialProfile(0.15))
    u1 = curl_of_stream(StreamField(
        _plateau_stream(mesh, (0.5, 0.5), 0.25, 0.45, value=c_one)))
    regions, _ = ring_regions(omega, n=8)
    dec1 = localized_decompose(u1, [omega], regions)
    err1 = abs(dec1.component_constants[0] - c_one)
    van1 = vanish_abs(dec1, [omega])
    norm1 = h1_norm(u1)
    rows.append(("one_disk", err1, van1, norm1))

    # two disjoint disks with distinct plateau constants; the plateaus
    # leave a full element patch of margin around each obstacle
    om_a = make_star_domain((0.25, 0.5), RadialProfile(0.08))
    om_b = make_star_domain((0.75, 0.5), RadialProfile(0.08))
    psi = (_plateau_stream(mesh, (0.25, 0.5), 0.20, 0.24, value=c_pair[0]).values
           + _plateau_stream(mesh, (0.75, 0.5), 0.20, 0.24, value=c_pair[1]).values)
    u2 = curl_of_stream(StreamField(ScalarField(mesh, psi, degree=2)))
    regs_a, _ = ring_regions(om_a, n=6)
    regs_b, _ = ring_regions(om_b, n=6)
    dec2 = localized_decompose(u2, [om_a, om_b], regs_a + regs_b)
    err2 = max(abs(got - want) for got, want
               in zip(dec2.component_constants, c_pair))
    van2 = vanish_abs(dec2, [om_a, om_b])
    norm2 = h1_norm(u2)
    rows.append(("two_disks", err2, van2, norm2))

    # compact boundary arc: only a few consecutive ring disks
    arc_regions, _ = ring_regions(omega, n=10)
    arc_regions = arc_regions[:4]
    dec3 = localized_decompose(u1, [omega], arc_regions)
    err3 = abs(dec3.component_constants[0] - c_one)
    van3 = vanish_abs(dec3, [omega])
    rows.append(("arc", err3, van3, norm1))

    checks = {
        "recovered_constants": _check(max(err1, err2), 1e-10),
        "obstacle_values": _check(max(van1 / norm1, van2 / norm2), 1e-8),
        "arc_recovered_constants": _check(err3, 1e-10),
        "arc_obstacle_values": _check(van3 / norm1, 1e-8),
    }
    details = {
        "plateau_value": c_one,
        "pair_values": c_pair,
        "component_constants_two_disks": list(dec2.component_constants),
    }
    tables = {
        "scenarios": (("scenario", "constant_error", "max_on_obstacle",
                       "field_h1_norm"), rows),
    }
    return checks, details, tables, []


def _run_periods(cfg, rng, out):
    h = cfg.h if cfg.h is not None else 0.04
    n_pairs = int(cfg.options.get("n_path_pairs", 10))
    TWO_PI = 2.0 * np.pi

    hole = make_star_domain((0.0, 0.0), RadialProfile(0.2))
    mesh = triangulate(Disk(0.0, 0.0, 0.8), holes=[hole], h=h)
    phis = np.linspace(0.0, TWO_PI, 129)[:-1]
    loop = 0.5 * np.column_stack([np.cos(phis), np.sin(phis)])

    # the winding form alone: its period around the hole
    tau_w = FormSum([(TWO_PI, WindingForm((0.0, 0.0)))])
    pp_w = periods_and_potential(tau_w, mesh, [loop])
    period_err = abs(pp_w.raw_periods[0] - TWO_PI)

    # winding plus an exact differential: subtraction and reconstruction
    tau = FormSum([
        (TWO_PI, WindingForm((0.0, 0.0))),
        (1.0, GradientForm(
            lambda p: p[:, 0] ** 2,
            lambda p: np.column_stack([2.0 * p[:, 0], np.zeros(len(p))]),
        )),
    ])
    pp = periods_and_potential(tau, mesh, [loop])
    extra_loops = [
        loop,
        0.3 * np.column_stack([np.cos(phis), np.sin(phis)]) + [0.15, 0.0],
        0.7 * np.column_stack([np.cos(phis), np.sin(phis)]),
    ]
    loop_rows = [(i, r["integral"], r["length"])
                 for i, r in enumerate(pp.check_loops(extra_loops))]
    post_period = max(abs(r[1]) for r in loop_rows)

    # two annular routes between random endpoints, clockwise vs counter
    path_rows = []
    worst_rel = 0.0
    for k in range(n_pairs):
        ra, rb = rng.uniform(0.3, 0.7, size=2)
        ta, tb = rng.uniform(0.0, TWO_PI, size=2)
        a = ra * np.array([np.cos(ta), np.sin(ta)])
        b = rb * np.array([np.cos(tb), np.sin(tb)])

        def route(sign, n=257):
            # radial leg to rb, then an arc of the chosen orientation
            span = (tb - ta) % TWO_PI
            if sign < 0:
                span = span - TWO_PI
            th = ta + span * np.linspace(0.0, 1.0, n)
            rr = np.concatenate([np.linspace(ra, rb, n), np.full(n, rb)])
            th = np.concatenate([np.full(n, ta), th])
            return np.column_stack([rr * np.cos(th), rr * np.sin(th)])

        ia = pp.tau_hat.line_integral(route(+1))
        ib = pp.tau_hat.line_integral(route(-1))
        rel = abs(ia - ib) / max(1.0, abs(ia))
        worst_rel = max(worst_rel, rel)
        path_rows.append((k, ia, ib, rel))

    # the corrected potential must reproduce x^2 up to one constant
    target = mesh.p2_coords[:, 0] ** 2
    recon = float(np.ptp(pp.potential.values - target))

    checks = {
        "winding_period": _check(period_err, 1e-8),
        "post_subtraction_periods": _check(post_period, 1e-8),
        "path_independence": _check(worst_rel, 1e-8),
        "potential_reconstruction": _check(recon, 1e-6),
    }
    details = {
        "periods": list(pp.periods),
        "max_cycle_defect": pp.max_cycle_defect,
        "grad_consistency": pp.grad_consistency,
        "alternate_tree_difference": pp.alternate_tree_difference(),
    }
    tables = {
        "loops": (("loop", "corrected_integral", "length"), loop_rows),
        "paths": (("pair", "route_ccw", "route_cw", "rel_difference"),
                  path_rows),
    }
    save_scalar_csv(pp.potential, out / "potential.csv")
    return checks, details, tables, [out / "potential.csv"]


def _run_identity_witness(cfg, rng, out):
    h = cfg.h if cfg.h is not None else 0.02
    h_coarse = float(cfg.options.get("h_coarse", 2.0 * h))
    t_list = [float(v) for v in cfg.options.get("t_list", (0.08, 0.04, 0.02, 0.01))]

    box = Box(0.0, 0.0, 1.0, 1.0)
    obstacle = make_star_domain((0.5, 0.5), RadialProfile(0.15))

    def witness_at(hh):
        mesh = triangulate(box, h=hh)
        u = curl_of_stream(StreamField(
            _plateau_stream(mesh, (0.5, 0.5), 0.25, 0.45)))
        regions, _ = ring_regions(obstacle, n=10, radius=0.30)
        return u, witness_space_identity(u, obstacle=obstacle, regions=regions)

    rows = []
    u_coarse, rep_coarse = witness_at(h_coarse)
    rows.append((h_coarse, rep_coarse.rel_h1_error, rep_coarse.support_clearance,
                 rep_coarse.weak_residual))
    u_fine, rep = witness_at(h)
    rows.append((h, rep.rel_h1_error, rep.support_clearance, rep.weak_residual))

    errs = shift_convergence(u_fine, np.array([1.0, 0.0]), t_list)
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))

    checks = {
        "witness_h1_error": _check(rep.rel_h1_error, 0.05),
        "refinement_improves": _bool_check(
            rep.rel_h1_error < rep_coarse.rel_h1_error),
        "shift_table_decreasing": _bool_check(decreasing),
    }
    details = {
        "support_clearance": rep.support_clearance,
        "weak_residual": rep.weak_residual,
        "shift_ts": sorted({round(s["t"], 8) for s in rep.shifts}),
    }
    tables = {
        "refinement": (("h", "rel_h1_error", "support_clearance",
                        "weak_residual"), rows),
        "shift_table": (("t", "h1_error"), list(zip(t_list, errs))),
    }
    save_vector_csv(rep.approximant, out / "approximant.csv")
    return checks, details, tables, [out / "approximant.csv"]


def _run_nse_verify(cfg, rng, out):
    gamma = float(cfg.options.get("gamma", 1.0))
    h_list = [float(v) for v in cfg.options.get("h_list", (0.1, 0.05, 0.025))]
    if cfg.h is not None:
        h_list = sorted({cfg.h, cfg.h / 2.0, cfg.h / 4.0}, reverse=True)

    force, velocity, velocity_gradient, pressure = manufactured_case(gamma)
    scfg = SolverConfig(gamma=gamma)
    box = Box(0.0, 0.0, 1.0, 1.0)

    rows = []
    vel_errs, pre_errs = [], []
    worst_energy = 0.0
    for hh in h_list:
        mesh = triangulate(box, h=hh)
        sol = solve_nse(mesh, force, scfg)
        ev = velocity_h1_error(sol, velocity, velocity_gradient)
        ep = pressure_l2_error(sol, pressure)
        en = energy_identity_residual(sol, force, scfg)
        rows.append((hh, ev, ep, en, len(sol.residual_history)))
        vel_errs.append(ev)
        pre_errs.append(ep)
        worst_energy = max(worst_energy, en)

    def rates(errs):
        return [float(np.log(errs[i] / errs[i + 1])
                      / np.log(h_list[i] / h_list[i + 1]))
                for i in range(len(errs) - 1)]

    vel_rates = rates(vel_errs)
    pre_rates = rates(pre_errs)

    # no forcing: the discrete solution must be identically zero
    mesh0 = triangulate(box, h=h_list[0])
    sol0 = solve_nse(mesh0, BodyForce.zero(), scfg)
    zero_max = max(float(np.max(np.abs(sol0.velocity.values))),
                   float(np.max(np.abs(sol0.pressure.values))))

    # the small-data threshold scales exactly fourfold with the viscosity
    zero_f = BodyForce.zero()
    m1 = uniqueness_margin(zero_f, SolverConfig(gamma=gamma), mesh0)
    m2 = uniqueness_margin(zero_f, SolverConfig(gamma=2.0 * gamma), mesh0)
    scaling_err = abs(m2 - 4.0 * m1)

    checks = {
        "velocity_rate": _check(min(vel_rates), 1.8, ">="),
        "pressure_rate": _check(min(pre_rates), 1.8, ">="),
        "energy_identity": _check(worst_energy, 1e-10),
        "zero_force_exact": _check(zero_max, 0.0, "=="),
        "margin_scaling": _check(scaling_err, 0.0, "=="),
    }
    details = {
        "gamma": gamma,
        "h_list": h_list,
        "velocity_rates": vel_rates,
        "pressure_rates": pre_rates,
        "threshold": m1,
    }
    tables = {
        "convergence": (("h", "velocity_h1_error", "pressure_l2_error",
                         "energy_residual", "iterations"), rows),
    }
    return checks, details, tables, []


def _default_optimize_options(interior):
    region = "over_B_minus" if interior else "over_D_minus"
    return {
        "family": dict(_DEFAULT_FAMILY),
        "force": {"kind": "swirl", "amplitude": 1.0, "frequency": 1.0},
        "solver": {"gamma": 0.5},
        "functional": {"kind": "drag", "growth_constant": 2.0,
                       "integration_region": region},
        "optimizer": {"initial": [0.28], "step": 0.06, "max_evals": 40,
                      "diam_tol": 1e-3, "mesh_h": 0.07},
        "sweep": {"points": 31, "lo": 0.1, "hi": 0.4},
        "eight_param": {"initial": [0.28, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                        "step": 0.03, "max_evals": 60, "diam_tol": 5e-4,
                        "mesh_h": 0.09, "solve_budget": 200},
        "diagnostics": {"tail_radii": [0.35 - 0.1 * 0.5**m for m in range(8)],
                        "mesh_h": 0.06, "background_h": 0.06,
                        "probes": [[0.5, 0.5, 0.05], [0.08, 0.08, 0.04]]},
    }


def _run_optimize(cfg, rng, out, interior=False):
    opts = _default_optimize_options(interior)
    for key, val in cfg.options.items():
        if key not in opts:
            raise ConfigError(f"config field {key!r}: unknown optimize section")
        if isinstance(val, dict):
            opts[key] = {**opts[key], **val}
        else:
            opts[key] = val

    family = _family_from_dict(opts["family"])
    force = _force_from_dict(opts["force"])
    scfg = _solver_from_dict(opts["solver"])
    fopts = opts["functional"]
    functional = CostFunctional(
        kind=fopts.get("kind", "drag"),
        growth_constant=float(fopts.get("growth_constant", 2.0)),
        integration_region=fopts.get("integration_region",
                                     "over_B_minus" if interior else "over_D_minus"),
    )
    mesh_h = cfg.h if cfg.h is not None else float(opts["optimizer"]["mesh_h"])

    # 31-point exhaustive sweep against the one-parameter search
    sw = opts["sweep"]
    radii = np.linspace(float(sw["lo"]), float(sw["hi"]), int(sw["points"]))
    step = float(radii[1] - radii[0])
    sweep_rows = []
    sweep_costs = []
    for r in radii:
        dom = make_star_domain((family.ball[0], family.ball[1]),
                               RadialProfile(float(r)), family=family)
        try:
            c, _ = evaluate_cost(dom, functional, force, scfg, h=mesh_h)
        except (GeometryError, MeshQualityError):
            c = float("inf")
        sweep_rows.append((float(r), c))
        sweep_costs.append(c)
    sweep_best = float(radii[int(np.argmin(sweep_costs))])

    oo = opts["optimizer"]
    opt1 = OptimizerConfig(
        initial=np.asarray(oo["initial"], dtype=float),
        step=float(oo["step"]), max_evals=int(oo["max_evals"]),
        diam_tol=float(oo["diam_tol"]), mesh_h=mesh_h,
    )
    run1 = minimize(family, functional, force, scfg, opt1)
    best_r = float(run1.best_domain.profile.c0)
    agreement = abs(best_r - sweep_best)

    # wiggly family: every cost evaluation is at most one flow solve
    eo = opts["eight_param"]
    opt8 = OptimizerConfig(
        initial=np.asarray(eo["initial"], dtype=float),
        step=float(eo["step"]), max_evals=int(eo["max_evals"]),
        diam_tol=float(eo["diam_tol"]), mesh_h=float(eo["mesh_h"]),
    )
    run8 = minimize(family, functional, force, scfg, opt8)
    costs8 = [rec.cost for rec in run8.sequence]
    monotone8 = all(b <= a + 1e-12 for a, b in zip(costs8, costs8[1:]))
    budget = int(eo["solve_budget"])

    seq_rows = [
        (i, *map(float, rec.params), rec.cost,
         run8.hausdorff_gaps[i - 1] if i >= 1 else "")
        for i, rec in enumerate(run8.sequence)
    ]

    # geometric disk tail for the existence-proof replay
    do = opts["diagnostics"]
    tail_h = float(do["mesh_h"])
    tail_records = []
    tail_gaps = []
    prev = None
    for r in [float(v) for v in do["tail_radii"]]:
        dom = make_star_domain((family.ball[0], family.ball[1]),
                               RadialProfile(r), family=family)
        c, sol = evaluate_cost(dom, functional, force, scfg, h=tail_h)
        tail_records.append(CandidateRecord(np.array([r]), dom, c, sol))
        if prev is not None:
            tail_gaps.append(hausdorff_pompeiu(prev, dom, ball=family.ball))
        prev = dom
    tail_run = OptimizationRun(
        family=family, sequence=tail_records,
        best=int(np.argmin([rec.cost for rec in tail_records])),
        hausdorff_gaps=tail_gaps, cost_functional=functional,
        body_force=force, solver_config=scfg, mesh_h=tail_h,
    )
    probes = [Disk(*p) for p in do["probes"]]
    report = run_diagnostics(tail_run, probes,
                             background_h=float(do["background_h"]))
    hat = tail_run.sequence[-1]
    hat_norm = h1_norm(hat.solution.velocity)
    norm_gap = report.norm_convergence[-2] / hat_norm
    gammas_finite = all(rep.holds and rep.m_index is not None
                        for _, rep in report.gamma_indices)

    checks = {
        "sweep_agreement": _check(agreement, step),
        "eight_param_budget": _check(int(opt8.max_evals), budget),
        "eight_param_monotone": _bool_check(monotone8),
        "vanishing_check": _check(report.vanishing_check, 1e-6 * hat_norm),
        "norm_convergence_gap": _check(norm_gap, 0.01),
        "fatou_gap": _check(report.fatou_gap, 1e-8),
        "gamma_indices_finite": _bool_check(gammas_finite),
    }
    details = {
        "integration_region": functional.integration_region,
        "sweep_best_radius": sweep_best,
        "search_best_radius": best_r,
        "sweep_step": step,
        "eight_param_accepted": len(run8.sequence),
        "eight_param_best_cost": run8.best_cost,
        "vanishing_nodal_max": report.vanishing_nodal_max,
        "boundary_layer_l2": report.boundary_layer_l2,
        "weak_limit_check": list(report.weak_limit_check),
        "norm_convergence": list(report.norm_convergence),
        "fatou_curve": [[lvl, val] for lvl, val in report.fatou_curve],
        "gamma_indices": [
            {"kind": kind, "holds": rep.holds, "m_index": rep.m_index}
            for kind, rep in report.gamma_indices
        ],
    }
    tables = {
        "sweep": (("radius", "cost"), sweep_rows),
        "sequence_1param": (
            ("index", "radius", "cost", "rho_gap"),
            [(i, float(rec.params[0]), rec.cost,
              run1.hausdorff_gaps[i - 1] if i >= 1 else "")
             for i, rec in enumerate(run1.sequence)]),
        "sequence": (
            ("index", *(f"p{j}" for j in range(len(opt8.initial))),
             "cost", "rho_gap"), seq_rows),
        "tail": (("radius", "cost", "rho_gap"),
                 [(float(rec.params[0]), rec.cost,
                   tail_gaps[i - 1] if i >= 1 else "")
                  for i, rec in enumerate(tail_records)]),
    }
    artifacts = []
    with open(out / "diagnostics.json", "w") as fh:
        json.dump(_jsonable({
            "weak_limit_check": list(report.weak_limit_check),
            "vanishing_check": report.vanishing_check,
            "vanishing_nodal_max": report.vanishing_nodal_max,
            "boundary_layer_l2": report.boundary_layer_l2,
            "norm_convergence": list(report.norm_convergence),
            "fatou_gap": report.fatou_gap,
            "fatou_curve": [[lvl, val] for lvl, val in report.fatou_curve],
            "gamma_indices": details["gamma_indices"],
        }), fh, indent=1, sort_keys=True)
        fh.write("\n")
    artifacts.append(out / "diagnostics.json")
    run8.best_domain.save(out / "best_domain.json")
    artifacts.append(out / "best_domain.json")
    return checks, details, tables, artifacts


_PRESET_RUNNERS = {
    "decomposition": _run_decomposition,
    "localization": _run_localization,
    "periods": _run_periods,
    "identity-witness": _run_identity_witness,
    "nse-verify": _run_nse_verify,
    "optimize": lambda cfg, rng, out: _run_optimize(cfg, rng, out, interior=False),
    "optimize-interior": lambda cfg, rng, out: _run_optimize(cfg, rng, out, interior=True),
}


def run_preset(cfg):
    """Execute one preset pipeline and save its report bundle."""
    out = Path(cfg.out) if cfg.out is not None else Path("runs") / cfg.preset
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    started = datetime.now(timezone.utc).isoformat()
    checks, details, tables, artifacts = _PRESET_RUNNERS[cfg.preset](cfg, rng, out)
    summary = {
        "preset": cfg.preset,
        "seed": cfg.seed,
        "h": cfg.h,
        "checks": checks,
        "pass": all(c["pass"] for c in checks.values()),
        "details": details,
    }
    table_paths = {}
    for name, (header, rows) in tables.items():
        table_paths[name] = _write_table(out / f"{name}.csv", header, rows)
    bundle = ReportBundle(
        preset=cfg.preset,
        summary=summary,
        tables=table_paths,
        artifacts=[Path(p) for p in artifacts],
        out_dir=out,
        timestamp=started,
    )
    bundle.save(out)
    return bundle


# ---------------------------------------------------------------------------
# extra subcommand pipelines


def _solve_single(mesh_path, config_path, out_dir):
    """One flow solve on a stored mesh, dumping fields and the trace."""
    mesh = TriangleMesh.load(mesh_path)
    data = {}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config parse error in {config_path} at line {exc.lineno} "
                f"column {exc.colno}: {exc.msg}"
            )
    force = _force_from_dict(data.get("force", {"kind": "zero"}))
    scfg = _solver_from_dict(data.get("solver", {"gamma": data.get("gamma", 1.0)}))
    out = Path(out_dir) if out_dir is not None else Path("runs") / "solve-nse"
    out.mkdir(parents=True, exist_ok=True)
    sol = solve_nse(mesh, force, scfg)
    save_vector_csv(sol.velocity, out / "velocity.csv")
    save_scalar_csv(sol.pressure, out / "pressure.csv")
    _write_table(out / "residual_history.csv", ("iteration", "residual"),
                 list(enumerate(sol.residual_history)))
    summary = {
        "h": float(mesh.h_max),
        "iters": len(sol.residual_history),
        "energy_residual": energy_identity_residual(sol, force, scfg),
        "margin": uniqueness_margin(force, scfg, mesh),
        "converged": bool(sol.converged),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary


def _check_family(config_path, out_dir):
    """Validate a stored domain against its family and chart description."""
    if config_path is None:
        raise ConfigError("check-family needs --config pointing at a domain file")
    try:
        dom = load_domain(config_path)
    except FileNotFoundError:
        raise ConfigError(f"domain file not found: {config_path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"domain parse error in {config_path} at line {exc.lineno}: {exc.msg}"
        )
    except KeyError as exc:
        raise ConfigError(f"domain file missing field {exc.args[0]!r}")
    except GeometryError as exc:
        # load-time rejection still deserves a structured verdict
        dom = None
        summary = {
            "admissible": False,
            "family_messages": [str(exc)],
            "chart_checks": {},
            "failures": [str(exc)],
        }
    if dom is not None:
        if dom.family is None:
            raise ConfigError("domain file carries no family block")
        ok, msgs = dom.family.admits(dom)
        report = validate_class_c(dom)
        summary = {
            "admissible": bool(ok and report.ok),
            "family_messages": list(msgs),
            "chart_checks": {
                "graph": report.graph_ok,
                "segment": report.segment_ok,
                "coverage": report.coverage_ok,
                "family": report.family_ok,
            },
            "failures": [str(f) for f in report.failures],
        }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.json", "w") as fh:
            json.dump(_jsonable(summary), fh, indent=1, sort_keys=True)
            fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="divshape",
        description="Solenoidal decompositions, flow solves and shape search "
                    "with reproducible experiment presets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
        p.add_argument("--h", type=float, default=None, help="target mesh size")

    for name, presets in _SUBCOMMAND_PRESETS.items():
        p = sub.add_parser(name, help=f"run the {presets[0]} preset")
        common(p)
        if name == "solve-nse":
            p.add_argument("--mesh", default=None,
                           help="stored mesh file; solves it once instead of "
                                "running the verification preset")

    p = sub.add_parser("check-family", help="validate a stored domain file")
    common(p)

    p = sub.add_parser("report-diff", help="numeric diff of two report bundles")
    p.add_argument("bundle_a", help="first bundle directory")
    p.add_argument("bundle_b", help="second bundle directory")
    common(p)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "check-family":
            summary = _check_family(args.config, args.out)
            print(json.dumps(_jsonable(summary), indent=1, sort_keys=True))
            return 0 if summary["admissible"] else 1

        if args.command == "report-diff":
            diff = compare_reports(ReportBundle.load(args.bundle_a),
                                   ReportBundle.load(args.bundle_b))
            print(json.dumps(_jsonable(diff), indent=1, sort_keys=True))
            if args.out is not None:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                with open(out / "diff.json", "w") as fh:
                    json.dump(_jsonable(diff), fh, indent=1, sort_keys=True)
                    fh.write("\n")
            return 0

        if args.command == "solve-nse" and args.mesh is not None:
            summary = _solve_single(args.mesh, args.config, args.out)
            print(json.dumps(_jsonable(summary), indent=1, sort_keys=True))
            return 0 if summary["converged"] else 1

        cfg = load_config(
            path=args.config,
            preset=_SUBCOMMAND_PRESETS[args.command][0],
            seed=args.seed,
            h=args.h,
            out=args.out,
            allowed_presets=_SUBCOMMAND_PRESETS[args.command],
        )
        bundle = run_preset(cfg)
        for name in sorted(bundle.summary["checks"]):
            c = bundle.summary["checks"][name]
            print(f"[{'pass' if c['pass'] else 'FAIL'}] {cfg.preset}: {name} "
                  + (f"= {c['value']:.6g} (vs {c['threshold']:.6g} {c['cmp']})"
                     if "threshold" in c else f"= {c['value']}"))
        print(f"bundle written to {bundle.out_dir}")
        return 0 if bundle.passed else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InvariantViolation, GeometryError, MeshQualityError,
            SolverDivergence) as exc:
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
