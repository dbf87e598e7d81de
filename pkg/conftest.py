"""Shared fixtures: a small plate that meshes and solves in well under a second."""

import pytest

from db import reset_store
from elastoscan import fem, mesh, ntd, synthetic

SMALL_LX = SMALL_LY = 0.06
SMALL_T = 0.01
SMALL_CELL = 0.01


def small_geometry() -> mesh.PlateGeometry:
    """6x6x1 cells, clamped at the x edge midpoints, loaded at the y edge midpoints."""
    sensors = [(x / 100, y, z) for y in (0.0, SMALL_LY) for z in (0.0, SMALL_T) for x in range(1, 6)]
    return mesh.PlateGeometry(
        length_x=SMALL_LX,
        length_y=SMALL_LY,
        thickness=SMALL_T,
        dirichlet_patches=[
            mesh.DirichletPatch(center=(0.0, 0.03, 0.005), radius=0.01),
            mesh.DirichletPatch(center=(SMALL_LX, 0.03, 0.005), radius=0.01),
        ],
        neumann_patches=[
            mesh.NeumannPatch(face='y-', center=(0.03, 0.005), extent=(0.02, SMALL_T)),
            mesh.NeumannPatch(face='y+', center=(0.03, 0.005), extent=(0.02, SMALL_T)),
        ],
        sensor_points=sensors,
    )


@pytest.fixture
def geometry():
    return small_geometry()


@pytest.fixture
def plate(geometry):
    return mesh.tag_boundaries(mesh.build_plate_mesh(geometry, SMALL_CELL), geometry)


@pytest.fixture
def basis(plate):
    return ntd.build_load_basis(plate)


@pytest.fixture
def background(plate):
    return fem.MaterialField.uniform(plate.n_elements, *synthetic.MAKROLON)


@pytest.fixture
def freq():
    return fem.FrequencyConfig(value=21.0)


@pytest.fixture(autouse=True)
def isolated_store(tmp_path, monkeypatch):
    """Every test gets its own SQLite file and output directory."""
    monkeypatch.setenv('ELASTOSCAN_DB_PATH', str(tmp_path / 'store.db'))
    reset_store()
    yield
    reset_store()
