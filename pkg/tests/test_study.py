"""
Test error norms, convergence runs, invariant checks and the study CLI.
"""
import math
import os

import numpy as np
import pytest

import database as db
import study
from fespace import LAGRANGE1, P0, build_space, interpolate
from mesh import build_structured_mesh
from mms import AnalyticField
from solver import SolverError
from study import (
    MULTIPOINT,
    THREE_FIELD,
    StudyConfig,
    StudyError,
    cell_center_pressure_error,
    check_invariants,
    compute_L2_error,
    convergence_rate,
    discretize,
    norm_equivalence,
    run_convergence,
    solve_multipoint,
    solve_three_field,
)


@pytest.fixture(scope='module')
def report_2d():
    """2D run on n = 8, 16, 32, 64 with the gradient perturbation."""
    return run_convergence(StudyConfig(dim=2, base=8, levels=4, perturb_pressure=True))


@pytest.fixture(scope='module')
def report_3d():
    """3D run on n = 4, 6, 8."""
    return run_convergence(StudyConfig(dim=3, base=4, step=2, levels=3, perturb_pressure=True))


def _small_config(**overrides):
    values = dict(dim=2, base=2, levels=2)
    values.update(overrides)
    return StudyConfig(**values)


# ---------------------------------------------------------------------------
# Error norms
# ---------------------------------------------------------------------------

def test_l2_error_of_reproduced_field():
    """Test that a field inside the space has zero error."""
    mesh = build_structured_mesh(2, 3)
    space = build_space(mesh, LAGRANGE1)
    field = AnalyticField(2, lambda x: 2.0 + x[:, 0] - 3 * x[:, 1], 1)
    error = compute_L2_error(space, interpolate(space, field).coefficients, field)
    assert error.relative
    assert error.value < 1e-14


def test_l2_error_of_zero_approximation():
    """Test that the zero field has relative error one."""
    space = build_space(build_structured_mesh(2, 2), P0)
    one = AnalyticField(2, lambda x: np.ones(len(x)), 0)
    error = compute_L2_error(space, np.zeros(space.n_dofs), one)
    assert error.value == pytest.approx(1.0)
    assert error.relative


def test_l2_error_falls_back_to_absolute():
    """Test the absolute fallback for vanishing exact fields."""
    space = build_space(build_structured_mesh(2, 2), P0)
    zero = AnalyticField(2, lambda x: np.zeros(len(x)), 0)
    coefficients = np.full(space.n_dofs, 0.5)
    error = compute_L2_error(space, coefficients, zero)
    assert not error.relative
    assert error.value == pytest.approx(0.5)
    assert compute_L2_error(space, coefficients, None) == error


def test_cell_center_pressure_error():
    """Test that sampling p at the cell centers gives zero error."""
    space = build_space(build_structured_mesh(2, 2), P0)
    p = AnalyticField(2, lambda x: 1.0 + x[:, 0] * x[:, 1], 2)
    at_centers = p(space.mesh.cell_centers)
    assert cell_center_pressure_error(space, at_centers, p) == pytest.approx(0.0, abs=1e-15)
    assert cell_center_pressure_error(space, np.zeros(space.n_dofs), p) > 0.9


def test_error_norms_use_configured_quadrature(monkeypatch):
    """Test that every error and invariant norm of a run uses quad_degree."""
    degrees = []

    def spy(*args, **kwargs):
        degrees.append(kwargs.get('degree'))
        return compute_L2_error(*args, **kwargs)

    monkeypatch.setattr(study, 'compute_L2_error', spy)
    run_convergence(_small_config(quad_degree=9, perturb_pressure=True))
    assert degrees
    assert set(degrees) == {9}


def test_convergence_rate():
    """Test the log-ratio rate and its undefined cases."""
    assert convergence_rate(0.4, 0.1, 0.2, 0.1) == pytest.approx(2.0)
    assert convergence_rate(0.0, 0.1, 0.2, 0.1) is None
    assert convergence_rate(None, 0.1, 0.2, 0.1) is None


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('overrides', [
    dict(levels=1),
    dict(dim=4),
    dict(methods=('mv', 'bdm')),
    dict(methods=()),
    dict(mu=0.0),
    dict(quad_degree=4),
    dict(fmt='json'),
    dict(solver='gmres'),
    dict(workers=0),
])
def test_invalid_configuration(overrides):
    """Test that invalid configurations are rejected."""
    with pytest.raises(StudyError):
        _small_config(**overrides).validate()


def test_resolutions():
    """Test doubling in 2D and increments in 3D."""
    assert StudyConfig(dim=2, base=8, levels=4).resolutions() == [8, 16, 32, 64]
    assert StudyConfig(dim=3, base=4, step=2, levels=3).resolutions() == [4, 6, 8]


def test_check_invariants_requires_shared_spaces():
    """Test that solutions from different discretizations are not compared."""
    first, second = discretize(2, 2), discretize(2, 2)
    with pytest.raises(StudyError):
        check_invariants(solve_three_field(first), solve_multipoint(second))


# ---------------------------------------------------------------------------
# 2D convergence
# ---------------------------------------------------------------------------

def test_2d_rows(report_2d):
    """Test one row per level and method with consistent dof counts."""
    assert len(report_2d.rows) == 8
    mv, three_field = report_2d.rows_for(MULTIPOINT), report_2d.rows_for(THREE_FIELD)
    assert [row.n for row in mv] == [8, 16, 32, 64]
    for a, b in zip(mv, three_field):
        assert a.n_dof < b.n_dof
        # 3F adds one vorticity unknown per vertex in 2D
        assert b.n_dof - a.n_dof == (a.n + 1) ** 2


def test_2d_finest_level_solves_quickly(report_2d):
    """Test that the n = 64 solves stay within seconds."""
    mv, three_field = report_2d.rows_for(MULTIPOINT)[-1], report_2d.rows_for(THREE_FIELD)[-1]
    assert mv.n == 64
    assert mv.wall_time < 30.0
    assert three_field.wall_time < 30.0


def test_2d_multipoint_rates(report_2d):
    """Test the observed rates on the finest level."""
    finest = report_2d.rows_for(MULTIPOINT)[-1]
    assert finest.rate_r == pytest.approx(2.0, abs=0.15)
    assert finest.rate_q == pytest.approx(1.0, abs=0.1)
    assert finest.rate_p == pytest.approx(1.0, abs=0.1)
    assert finest.rate_energy == pytest.approx(1.0, abs=0.15)


def test_2d_invariants(report_2d):
    """Test matching pressures and vorticities, solenoidal velocities and pressure robustness."""
    assert report_2d.failures == []
    for row in report_2d.rows_for(MULTIPOINT):
        assert row.inv_p <= 1e-9
        assert row.inv_r2d <= 1e-9
        assert row.max_div <= 1e-10
        assert row.pert_dq <= 1e-9 and row.pert_dr <= 1e-9
        assert row.pert_dp > 1e-3
        assert row.q_gap is not None
    for row in report_2d.rows_for(THREE_FIELD):
        assert row.q_gap is None


def test_2d_velocity_gap_converges_quadratically(report_2d):
    """Test that the velocity difference between the methods shrinks like h^2."""
    finest = report_2d.rows_for(MULTIPOINT)[-1]
    assert finest.rate_q_gap == pytest.approx(2.0, abs=0.3)


def test_rates_match_reported_errors(report_2d):
    """Test that every rate is the log ratio of the reported errors."""
    for method in (MULTIPOINT, THREE_FIELD):
        rows = report_2d.rows_for(method)
        assert rows[0].rate_r is None
        for coarse, fine in zip(rows, rows[1:]):
            expected = math.log(coarse.err_q / fine.err_q) / math.log(coarse.h / fine.h)
            assert fine.rate_q == pytest.approx(expected, rel=1e-12)


def test_divergence_error_is_absolute(report_2d):
    """Test that the divergence error is reported as an absolute error."""
    for row in report_2d.rows:
        assert 'err_div_q' in row.absolute
        assert row.err_div_q < 1e-9


# ---------------------------------------------------------------------------
# 3D convergence
# ---------------------------------------------------------------------------

def test_3d_rates_and_invariants(report_3d):
    """Test loose 3D rates, matching pressures and smaller multipoint systems."""
    mv = report_3d.rows_for(MULTIPOINT)
    for row in mv[1:]:
        for rate in (row.rate_r, row.rate_q, row.rate_p, row.rate_energy):
            assert rate >= 0.8
    for a, b in zip(mv, report_3d.rows_for(THREE_FIELD)):
        assert a.n_dof < b.n_dof
        assert a.inv_r2d is None
    assert report_3d.failures == []


def test_3d_coarse_levels():
    """Test the n = 2, 3, 4 run: rates are pre-asymptotic but the invariants hold."""
    report = run_convergence(StudyConfig(dim=3, base=2, levels=3))
    assert report.failures == []
    mv, three_field = report.rows_for(MULTIPOINT), report.rows_for(THREE_FIELD)
    assert [row.n for row in mv] == [2, 3, 4]
    a, b = mv[-1], three_field[-1]
    # Rate_p is about 0.63 and the MV Rate_r about 0.65 on these meshes
    for rate in (a.rate_r, a.rate_q, a.rate_p, b.rate_q, b.rate_p):
        assert rate > 0.4
    assert a.rate_p == pytest.approx(b.rate_p, abs=1e-6)


# ---------------------------------------------------------------------------
# Norm equivalence
# ---------------------------------------------------------------------------

def test_2d_norm_equivalence_envelope(disc2):
    """Test the local eigenvalue envelope [1, 4] of lumped P1 mass."""
    bounds = norm_equivalence(disc2, samples=50, seed=3)
    assert bounds.lower == pytest.approx(1.0)
    assert bounds.upper == pytest.approx(4.0)
    assert bounds.lower <= bounds.ratio_min <= bounds.ratio_max <= bounds.upper


def test_3d_norm_equivalence_is_bounded(disc3):
    """Test that sampled 3D ratios stay inside the local envelope."""
    bounds = norm_equivalence(disc3, samples=50, seed=3)
    assert 0.0 < bounds.lower <= bounds.ratio_min <= bounds.ratio_max <= bounds.upper


def test_norm_interval_is_recorded_once(db_path):
    """Test that the first run records the interval and later runs are checked against it."""
    first = run_convergence(_small_config(database=db_path))
    assert first.run_id is not None
    stored = db.get_norm_bounds(2, db_path)
    assert stored['lower'] == pytest.approx(1.0)
    assert stored['upper'] == pytest.approx(4.0)
    second = run_convergence(_small_config(database=db_path))
    assert second.failures == []
    assert db.get_norm_bounds(2, db_path) == stored


def test_norm_interval_violation(db_path):
    """Test that ratios outside a recorded interval are reported."""
    db.record_norm_bounds(2, 2.0, 3.0, db_path)
    report = run_convergence(_small_config(database=db_path))
    assert any('recorded interval' in failure for failure in report.failures)


@pytest.mark.parametrize('dim, base', [(2, 2), (3, 2)])
def test_norm_interval_is_stable_over_three_levels(db_path, dim, base):
    """Test that three refinement levels share one norm-equivalence interval."""
    first = run_convergence(StudyConfig(dim=dim, base=base, levels=3, database=db_path))
    assert first.failures == []
    stored = db.get_norm_bounds(dim, db_path)
    for row in first.rows:
        assert row.norm_lower == pytest.approx(stored['lower'], rel=1e-8)
        assert row.norm_upper == pytest.approx(stored['upper'], rel=1e-8)
    second = run_convergence(StudyConfig(dim=dim, base=base, levels=3, database=db_path, seed=11))
    assert second.failures == []
    assert db.get_norm_bounds(dim, db_path) == stored
    for row in second.rows:
        assert stored['lower'] <= row.norm_ratio_min * (1 + 1e-10)
        assert row.norm_ratio_max <= stored['upper'] * (1 + 1e-10)


# ---------------------------------------------------------------------------
# Output and execution modes
# ---------------------------------------------------------------------------

def test_vtk_export(tmp_path):
    """Test that every level and method writes a VTK file."""
    run_convergence(_small_config(vtk_dir=str(tmp_path)))
    for method in (MULTIPOINT, THREE_FIELD):
        for n in (2, 4):
            assert os.path.exists(tmp_path / f"{method}_d2_n{n}.vtk")


def test_parallel_levels_match_sequential():
    """Test that worker processes produce the same rows."""
    sequential = run_convergence(_small_config())
    parallel = run_convergence(_small_config(workers=2))
    assert len(parallel.rows) == len(sequential.rows)
    for a, b in zip(sequential.rows, parallel.rows):
        assert (a.method, a.level, a.n_dof) == (b.method, b.level, b.n_dof)
        for name in ('err_r', 'err_q', 'err_p', 'inv_p'):
            assert getattr(a, name) == pytest.approx(getattr(b, name), rel=1e-12)


def test_main_writes_markdown(tmp_path, capsys):
    """Test a successful CLI run."""
    out = tmp_path / 'table.md'
    code = study.main(['--base', '2', '--levels', '2', '--format', 'md', '--out', str(out)])
    assert code == 0
    assert 'MV-MFEM' in out.read_text()
    assert 'Failures: 0' in capsys.readouterr().out


def test_main_rejects_unknown_methods(capsys):
    """Test that an invalid method list exits with code 1."""
    assert study.main(['--base', '2', '--levels', '2', '--methods', 'mv,bdm']) == 1
    assert 'Error' in capsys.readouterr().out


def test_main_reports_solver_failures(monkeypatch, capsys):
    """Test that a failed solve exits with code 2 and names the level."""
    def fail(*args, **kwargs):
        raise SolverError('singular factorization', residuals=[1.0], pivot=7)

    monkeypatch.setattr(study, 'solve_saddle', fail)
    assert study.main(['--base', '2', '--levels', '2']) == 2
    out = capsys.readouterr().out
    assert 'level 1 (n=2)' in out
    assert 'residual history' in out


def test_main_assert_flag(monkeypatch):
    """Test that --assert turns invariant failures into exit code 3."""
    monkeypatch.setattr(study, 'invariant_failures', lambda record, config: ['forced mismatch'])
    argv = ['--base', '2', '--levels', '2']
    assert study.main(argv) == 0
    assert study.main(argv + ['--assert']) == 3
