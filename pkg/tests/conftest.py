"""
Pytest configuration and shared fixtures.
"""
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

# Keep the viewer's import-time database out of the working tree
os.environ.setdefault('STUDY_DATABASE', os.path.join(tempfile.mkdtemp(), 'import.db'))

import app as app_module
import database as db
from fespace import P0, RT0, build_space, vorticity_kind
from mesh import build_structured_mesh
from study import ConvergenceReport, LevelResult, StudyConfig, discretize


@pytest.fixture
def mesh2():
    """2D structured mesh with n = 2."""
    return build_structured_mesh(2, 2)


@pytest.fixture
def mesh3():
    """3D structured mesh with n = 1."""
    return build_structured_mesh(3, 1)


@pytest.fixture
def spaces2(mesh2):
    return (build_space(mesh2, vorticity_kind(2)), build_space(mesh2, RT0), build_space(mesh2, P0))


@pytest.fixture
def spaces3(mesh3):
    return (build_space(mesh3, vorticity_kind(3)), build_space(mesh3, RT0), build_space(mesh3, P0))


@pytest.fixture(scope='session')
def disc2():
    """Assembled 2D problem on the n = 4 mesh."""
    return discretize(2, 4)


@pytest.fixture(scope='session')
def disc3():
    """Assembled 3D problem on the n = 2 mesh."""
    return discretize(3, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def db_path(tmp_path, monkeypatch):
    """Temporary sqlite database used as the default path."""
    path = str(tmp_path / 'studies.db')
    monkeypatch.setattr(db, 'DATABASE_PATH', path)
    db.init_db()
    return path


def make_row(method, level, h, err, **extra):
    values = dict(
        method=method, dim=2, level=level, n=4 * 2 ** level, h=h, n_dof=100 * 4 ** level,
        err_r=err ** 2, err_q=err, err_p=err, err_curl_r=err, err_div_q=0.0,
        err_energy=err, err_p_center=err ** 2, max_div=1e-15, residual=1e-14, wall_time=0.1,
    )
    values.update(extra)
    return LevelResult(**values)


@pytest.fixture
def sample_report():
    """Two-level report for both methods, rates filled in."""
    config = StudyConfig(dim=2, base=8, levels=2)
    rows = [
        make_row('mv', 1, 0.25, 0.1, inv_p=1e-13, inv_curl=2e-13, inv_r2d=3e-14),
        make_row('3f', 1, 0.25, 0.11, inv_p=1e-13, inv_curl=2e-13, inv_r2d=3e-14),
        make_row('mv', 2, 0.125, 0.05, rate_r=2.0, rate_q=1.0, rate_p=1.0,
                 inv_p=4e-14, inv_curl=5e-14, inv_r2d=6e-15),
        make_row('3f', 2, 0.125, 0.055, rate_r=2.0, rate_q=1.0, rate_p=1.0,
                 inv_p=4e-14, inv_curl=5e-14, inv_r2d=6e-15),
    ]
    return ConvergenceReport(config=config, rows=rows, wall_time=1.5)


@pytest.fixture
def app(db_path):
    """Create and configure a test Flask app."""
    test_app = app_module.app
    test_app.config.update({
        'TESTING': True,
    })
    yield test_app


@pytest.fixture
def client(app):
    """Create a test client for the app."""
    return app.test_client()
