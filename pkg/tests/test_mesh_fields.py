"""Meshing, quadratic fields, quadrature, partitions of unity, text I/O."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divshape.domain_geometry import Box, Disk, RadialProfile, make_star_domain
from divshape.errors import GeometryError
from divshape.mesh_fields import (
    ScalarField,
    TriangleMesh,
    VectorField,
    build_partition_of_unity,
    extend_by_zero,
    h1_norm,
    h1_seminorm,
    integrate,
    l2_norm,
    load_scalar_csv,
    load_vector_csv,
    restrict,
    save_scalar_csv,
    save_vector_csv,
    triangle_rule,
    triangulate,
    weak_divergence_residual,
)


def ref_triangle_moment(a, b):
    # exact integral of x^a y^b over the unit reference triangle
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


@given(st.integers(0, 6), st.integers(0, 6))
@settings(max_examples=40, deadline=None)
def test_quadrature_exact_for_polynomials(a, b):
    degree = a + b
    bary, w = triangle_rule(max(degree, 1))
    x, y = bary[:, 1], bary[:, 2]
    approx = 0.5 * float(np.sum(w * x**a * y**b))
    assert approx == pytest.approx(ref_triangle_moment(a, b), abs=1e-14)


def test_quadrature_weights_sum_to_one():
    for degree in (1, 2, 4, 6):
        _, w = triangle_rule(degree)
        assert float(np.sum(w)) == pytest.approx(1.0, abs=1e-14)


def test_structured_mesh_covers_box(unit_square):
    assert float(unit_square.areas.sum()) == pytest.approx(1.0, abs=1e-12)
    pts = unit_square.p2_coords[unit_square.boundary_p2_nodes()]
    on_wall = (
        np.isclose(pts[:, 0], 0.0) | np.isclose(pts[:, 0], 1.0)
        | np.isclose(pts[:, 1], 0.0) | np.isclose(pts[:, 1], 1.0)
    )
    assert on_wall.all()
    assert unit_square.min_angle() >= 20.0


def test_holed_mesh_respects_obstacle():
    hole = make_star_domain((0.5, 0.5), RadialProfile(0.2))
    mesh = triangulate(Box(0.0, 0.0, 1.0, 1.0), holes=[hole], h=0.08)
    # vertices sit on or outside the curve; only edge midpoints may dip
    # inside, and no deeper than the sagitta of one boundary chord
    assert not hole.contains(mesh.vertices).any()
    sagitta = mesh.h_max**2 / (8.0 * 0.2)
    assert float(hole.depth(mesh.p2_coords).max()) <= 1.5 * sagitta
    assert float(mesh.areas.sum()) < 1.0
    assert mesh.min_angle() >= 20.0


def test_mesh_text_roundtrip(tmp_path):
    hole = Disk(0.5, 0.5, 0.2)
    mesh = triangulate(Box(0.0, 0.0, 1.0, 1.0), holes=[hole], h=0.1)
    path = tmp_path / "mesh.txt"
    mesh.save(path)
    text = path.read_text()
    assert "np." not in text  # plain reprs only
    back = TriangleMesh.load(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.edge_tags, mesh.edge_tags)


def test_field_csv_roundtrip(tmp_path, unit_square, seeded_field):
    vec_path = tmp_path / "u.csv"
    save_vector_csv(seeded_field, vec_path)
    assert "np." not in vec_path.read_text()
    back = load_vector_csv(unit_square, vec_path)
    np.testing.assert_array_equal(back.values, seeded_field.values)

    psi = ScalarField(unit_square, np.cos(unit_square.p2_coords[:, 0]))
    sca_path = tmp_path / "psi.csv"
    save_scalar_csv(psi, sca_path)
    back = load_scalar_csv(unit_square, sca_path)
    np.testing.assert_array_equal(back.values, psi.values)


def test_quadratic_fields_are_reproduced(unit_square):
    def f(p):
        return p[:, 0] ** 2 + 3.0 * p[:, 0] * p[:, 1] - 2.0 * p[:, 1] ** 2 + 0.5

    field = ScalarField(unit_square, f(unit_square.p2_coords))
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.05, 0.95, size=(200, 2))
    assert np.max(np.abs(field.eval(pts) - f(pts))) < 1e-12


def test_gradients_of_quadratic_exact(unit_square):
    coords = unit_square.p2_coords
    field = ScalarField(unit_square, coords[:, 0] ** 2 - coords[:, 0] * coords[:, 1])
    bary, _ = triangle_rule(2)
    grads = field.element_gradients(bary)
    verts = unit_square.vertices[unit_square.triangles]
    pts = np.einsum("qk,nkc->nqc", bary, verts)
    exact = np.stack(
        [2.0 * pts[..., 0] - pts[..., 1], -pts[..., 0]], axis=-1
    )
    assert np.max(np.abs(grads - exact)) < 1e-12


def test_norms_match_closed_forms(unit_square):
    x = unit_square.p2_coords[:, 0]
    field = ScalarField(unit_square, x)
    assert l2_norm(field) == pytest.approx(np.sqrt(1.0 / 3.0), abs=1e-12)
    assert h1_seminorm(field) == pytest.approx(1.0, abs=1e-12)
    assert h1_norm(field) == pytest.approx(np.sqrt(1.0 + 1.0 / 3.0), abs=1e-12)
    ones = ScalarField(unit_square, np.ones(unit_square.num_p2_nodes))
    assert integrate(ones) == pytest.approx(1.0, abs=1e-12)


def test_partition_of_unity_sums_to_one(unit_square):
    regions = [Box(0.0, 0.0, 0.62, 1.0), Box(0.38, 0.0, 1.0, 1.0)]
    inner = Box(0.15, 0.15, 0.85, 0.85)
    pu = build_partition_of_unity(regions, inner, unit_square)
    total = sum(chi.values for chi in pu)
    assert np.max(np.abs(total[pu.plateau_nodes] - 1.0)) < 1e-14
    for chi, region in zip(pu, regions):
        support = unit_square.p2_coords[chi.values > 0.0]
        assert region.contains(support).all()
        assert chi.values.min() >= 0.0
        assert chi.values.max() <= 1.0 + 1e-14
    # the inner region lies on the plateau
    inner_nodes = inner.contains(unit_square.p2_coords, closed=True)
    assert pu.plateau_nodes[inner_nodes].all()


def test_partition_rejects_thin_covering(unit_square):
    # overlap depth 0.1 is under two mesh widths at h ~ 0.07
    regions = [Box(0.0, 0.0, 0.55, 1.0), Box(0.45, 0.0, 1.0, 1.0)]
    inner = Box(0.2, 0.2, 0.8, 0.8)
    with pytest.raises(GeometryError, match="covering margin"):
        build_partition_of_unity(regions, inner, unit_square)


def test_random_divfree_field_properties(unit_square, seeded_field):
    wall = seeded_field.values[unit_square.boundary_p2_nodes()]
    assert np.max(np.abs(wall)) == 0.0
    assert weak_divergence_residual(seeded_field) < 1e-10


def test_extend_restrict_support(unit_square, seeded_field):
    half = Box(0.0, 0.0, 0.5, 1.0)
    cut = restrict(seeded_field, half)
    outside = ~half.contains(unit_square.p2_coords, closed=True)
    assert np.max(np.abs(cut.values[outside])) == 0.0

    fine = triangulate(Box(0.0, 0.0, 1.0, 1.0), h=0.055)
    lifted = extend_by_zero(seeded_field, fine)
    assert isinstance(lifted, VectorField)
    # interpolation reproduces nodal values at shared points
    sample = fine.p2_coords[::17]
    np.testing.assert_allclose(
        lifted.eval(sample), seeded_field.eval(sample), atol=1e-12
    )
