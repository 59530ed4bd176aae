"""
Test finite element spaces: dof maps, basis evaluation and interpolation.
"""
import numpy as np
import pytest

import quadrature
from fespace import (
    LAGRANGE1,
    NEDELEC2,
    P0,
    P0VEC,
    RT0,
    DofVector,
    SpaceError,
    build_space,
    differential,
    eval_basis,
    evaluate,
    interpolate,
    tabulate,
)
from mesh import build_structured_mesh, tag_boundary
from mms import AnalyticField, exact_fields
from study import compute_L2_error


def _random_bary(rng, count, dim):
    bary = rng.random((count, dim + 1))
    return bary / bary.sum(axis=1, keepdims=True)


def test_dof_counts_2d(mesh2):
    """Test dof counts of all 2D spaces."""
    assert build_space(mesh2, LAGRANGE1).n_dofs == 9
    assert build_space(mesh2, RT0).n_dofs == 16
    assert build_space(mesh2, P0).n_dofs == 8
    assert build_space(mesh2, P0VEC).n_dofs == 8


def test_dof_counts_3d(mesh3):
    """Test dof counts of all 3D spaces."""
    space = build_space(mesh3, NEDELEC2)
    assert space.n_dofs == 38
    assert space.n_local == 12
    assert build_space(mesh3, RT0).n_dofs == 18
    assert build_space(mesh3, P0).n_dofs == 6
    assert build_space(mesh3, P0VEC).n_dofs == 18


def test_unsupported_requests(mesh2, mesh3):
    """Test that vorticity spaces are tied to their dimension."""
    with pytest.raises(SpaceError):
        build_space(mesh2, NEDELEC2)
    with pytest.raises(SpaceError):
        build_space(mesh3, LAGRANGE1)
    with pytest.raises(SpaceError):
        build_space(mesh2, 'BDM1')


def test_nedelec_dofs_belong_to_edge_vertices(mesh3):
    """Test that dof 2e belongs to the lower and 2e+1 to the higher vertex of edge e."""
    space = build_space(mesh3, NEDELEC2)
    assert np.array_equal(space.dof_vertex[0::2], mesh3.edges[:, 0])
    assert np.array_equal(space.dof_vertex[1::2], mesh3.edges[:, 1])
    # Each local dof's first barycentric index is the vertex owning it
    owners = np.take_along_axis(mesh3.cells, space.local_pairs[..., 0], axis=1)
    assert np.array_equal(owners, space.dof_vertex[space.cell_dofs])


def test_lagrange_partition_of_unity(mesh2, rng):
    """Test that Lagrange basis functions sum to one."""
    values = tabulate(build_space(mesh2, LAGRANGE1), _random_bary(rng, 5, 2))
    assert np.allclose(values.sum(axis=2), 1.0)


@pytest.mark.parametrize('dim,n', [(2, 2), (3, 1)])
def test_rt0_unit_flux(dim, n):
    """Test that RT0 basis i has unit flux through facet i and none through the others."""
    mesh = build_structured_mesh(dim, n)
    space = build_space(mesh, RT0)
    rules = quadrature.facet_rule(dim, 2)
    for i, rule in enumerate(rules):
        values = tabulate(space, rule.points)
        facets = mesh.cell_facets[:, i]
        flux = np.einsum('q,cqkd,cd->ck', rule.weights, values, mesh.facet_normals[facets])
        flux *= mesh.facet_measures[facets][:, None]
        expected = np.zeros(dim + 1)
        expected[i] = 1.0
        assert np.allclose(flux, expected[None, :], atol=1e-13)


@pytest.mark.parametrize('kind,dim', [(LAGRANGE1, 2), (NEDELEC2, 3), (RT0, 2), (RT0, 3)])
def test_interpolation_reproduces_linear_fields(kind, dim, rng):
    """Test that interpolation reproduces fields inside the space."""
    mesh = build_structured_mesh(dim, 2)
    space = build_space(mesh, kind)
    a = rng.standard_normal(dim)
    B = rng.standard_normal((dim, dim))
    if kind == LAGRANGE1:
        field = AnalyticField(dim, lambda x: 1.5 + x @ a, 1)
    elif kind == NEDELEC2:
        field = AnalyticField(dim, lambda x: a + x @ B.T, 1, dim)
    else:
        # RT0 contains a + c x
        field = AnalyticField(dim, lambda x: a + 0.7 * x, 1, dim)
    coeffs = interpolate(space, field).coefficients
    bary = _random_bary(rng, 4, dim)
    discrete = evaluate(space, coeffs, bary)
    exact = field(mesh.cell_points(bary).reshape(-1, dim)).reshape(discrete.shape)
    assert np.allclose(discrete, exact, atol=1e-12)


def test_p0vec_interpolation_of_constant(mesh3):
    """Test that P0vec stores cell averages component by component."""
    space = build_space(mesh3, P0VEC)
    field = AnalyticField(3, lambda x: np.tile([1.0, -2.0, 3.0], (len(x), 1)), 0, 3)
    coeffs = interpolate(space, field).coefficients
    assert np.allclose(coeffs.reshape(-1, 3), [1.0, -2.0, 3.0])


def test_nedelec_gradient_has_zero_curl(rng):
    """Test that the interpolant of a gradient is curl-free."""
    mesh = build_structured_mesh(3, 2)
    space = build_space(mesh, NEDELEC2)
    # grad(x^2 + y z)
    field = AnalyticField(3, lambda x: np.column_stack([2 * x[:, 0], x[:, 2], x[:, 1]]), 1, 3)
    curl = differential(space, interpolate(space, field).coefficients)
    assert np.allclose(curl, 0.0, atol=1e-12)


def test_rt0_divergence_of_interpolant():
    """Test that the divergence of an interpolated field is its cell average."""
    mesh = build_structured_mesh(2, 3)
    space = build_space(mesh, RT0)
    field = AnalyticField(2, lambda x: np.column_stack([x[:, 0] ** 2, x[:, 1]]), 2, 2)
    div = differential(space, interpolate(space, field).coefficients)[:, 0]
    # div = 2x + 1, whose cell average is 2 x_center + 1
    assert np.allclose(div, 2 * mesh.cell_centers[:, 0] + 1, atol=1e-12)


def test_eval_basis(mesh2):
    """Test basis evaluation at a physical point."""
    space = build_space(mesh2, RT0)
    cell = 0
    center = mesh2.cell_centers[cell]
    values, divs = eval_basis(space, cell, center)
    assert values.shape == (3, 2)
    assert np.allclose(divs, mesh2.cell_facet_signs[cell] / mesh2.cell_volumes[cell])

    lagrange = build_space(mesh2, LAGRANGE1)
    values, curls = eval_basis(lagrange, cell, center)
    assert np.allclose(values, 1.0 / 3.0)
    assert curls.shape == (3, 2)

    values, diffs = eval_basis(build_space(mesh2, P0), cell, center)
    assert diffs is None
    assert np.allclose(values, 1.0)


def test_eval_basis_outside_cell(mesh2):
    """Test that points outside the cell are rejected."""
    space = build_space(mesh2, LAGRANGE1)
    with pytest.raises(SpaceError):
        eval_basis(space, 0, np.array([0.9, 0.9]))


def test_essential_flags_follow_tags(mesh2):
    """Test that q-boundary facets flag their velocity and vorticity dofs."""
    tagged = tag_boundary(mesh2, lambda x: x[:, 0] < 1e-12)
    assert build_space(tagged, RT0).essential.sum() == 2
    assert build_space(tagged, LAGRANGE1).essential.sum() == 3
    assert build_space(tagged, P0).essential.sum() == 0
    assert not build_space(mesh2, RT0).essential.any()


def test_nedelec_essential_flags(mesh3):
    """Test that both dofs of every edge on a q-boundary face are flagged."""
    tagged = tag_boundary(mesh3, lambda x: x[:, 2] < 1e-12)
    space = build_space(tagged, NEDELEC2)
    # Bottom face of the cube: 4 sides and 1 diagonal
    assert space.essential.sum() == 10


def test_dof_vector_length_check(mesh2):
    """Test that DofVector rejects coefficient arrays of the wrong length."""
    space = build_space(mesh2, P0)
    with pytest.raises(SpaceError):
        DofVector(space, np.zeros(3))


def test_nedelec_basis_at_vertices(mesh3):
    """Test that the dof (a, b) basis function is grad(lambda_b) at x_a and zero at the other vertices."""
    space = build_space(mesh3, NEDELEC2)
    cell = 3
    grads = mesh3.cell_gradients[cell]
    pairs = space.local_pairs[cell]
    for v in range(4):
        values, curls = eval_basis(space, cell, mesh3.vertices[mesh3.cells[cell, v]])
        assert values.shape == (12, 3)
        for k, (a, b) in enumerate(pairs):
            expected = grads[b] if a == v else np.zeros(3)
            assert np.allclose(values[k], expected, atol=1e-13)
    assert np.allclose(curls, np.cross(grads[pairs[:, 0]], grads[pairs[:, 1]]))


def _value_at(space, coefficients, cell, point):
    values, _ = eval_basis(space, cell, point)
    return coefficients[space.cell_dofs[cell]] @ values


@pytest.mark.parametrize('kind,dim,n', [(NEDELEC2, 3, 2), (RT0, 2, 3), (RT0, 3, 2)])
def test_interface_continuity(kind, dim, n, rng):
    """Test tangential (Nedelec2) or normal (RT0) continuity across interior facets."""
    mesh = build_structured_mesh(dim, n)
    space = build_space(mesh, kind)
    coefficients = rng.standard_normal(space.n_dofs)
    weights = _random_bary(rng, 3, dim - 1)
    for f in np.flatnonzero(mesh.facet_cells[:, 1] >= 0):
        left, right = mesh.facet_cells[f]
        normal = mesh.facet_normals[f]
        for x in weights @ mesh.vertices[mesh.facets[f]]:
            jump = _value_at(space, coefficients, left, x) - _value_at(space, coefficients, right, x)
            if kind == RT0:
                assert abs(jump @ normal) < 1e-12
            else:
                assert np.allclose(jump - (jump @ normal) * normal, 0.0, atol=1e-12)


def _piecewise_constant(mesh, values):
    """Field equal to values[c] on cell c (first containing cell on facets)."""
    def evaluator(x):
        out = np.full((len(x), values.shape[1]), np.nan)
        for c in range(mesh.n_cells):
            bary = (x - mesh.vertices[mesh.cells[c, 0]]) @ mesh.cell_gradients[c].T
            bary[:, 0] += 1.0
            inside = np.all(bary >= -1e-12, axis=1) & np.isnan(out[:, 0])
            out[inside] = values[c]
        return out
    return AnalyticField(mesh.dim, evaluator, 0, values.shape[1])


@pytest.mark.parametrize('dim,n', [(2, 2), (3, 1)])
def test_curl_of_vorticity_space_lies_in_rt0(dim, n, rng):
    """Test that the RT0 interpolant of a discrete curl reproduces it pointwise."""
    mesh = build_structured_mesh(dim, n)
    space_r = build_space(mesh, LAGRANGE1 if dim == 2 else NEDELEC2)
    space_q = build_space(mesh, RT0)
    curl = differential(space_r, rng.standard_normal(space_r.n_dofs))
    coefficients = interpolate(space_q, _piecewise_constant(mesh, curl)).coefficients
    discrete = evaluate(space_q, coefficients, _random_bary(rng, 5, dim))
    assert np.allclose(discrete, curl[:, None, :], atol=1e-11)
    assert np.allclose(differential(space_q, coefficients), 0.0, atol=1e-11)


@pytest.mark.parametrize('dim,kind,field,resolutions,expected', [
    (2, LAGRANGE1, 'r', (8, 16), 2.0),
    (2, RT0, 'q', (8, 16), 1.0),
    (2, P0, 'p', (8, 16), 1.0),
    (3, NEDELEC2, 'r', (3, 6), None),
    (3, RT0, 'q', (3, 6), None),
    (3, P0, 'p', (3, 6), None),
])
def test_interpolation_error_rates(dim, kind, field, resolutions, expected):
    """Test L2 interpolation rates: h^2 for the 2D vorticity, h for the others."""
    exact = dict(zip('qpr', exact_fields(dim)[:3]))[field]
    errors = []
    for n in resolutions:
        space = build_space(build_structured_mesh(dim, n), kind)
        errors.append(compute_L2_error(space, interpolate(space, exact).coefficients, exact).value)
    rate = np.log(errors[0] / errors[1]) / np.log(resolutions[1] / resolutions[0])
    if expected is None:
        assert rate > 0.85
    else:
        assert rate == pytest.approx(expected, abs=0.15)
