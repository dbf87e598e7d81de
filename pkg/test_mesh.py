"""
Tests for plate meshing, boundary tagging, the test-inclusion grid and
outer-support completion.
"""
import numpy as np
import pytest

from conftest import SMALL_CELL, small_geometry
from elastoscan import mesh
from elastoscan.errors import AlignmentError, DimensionError, EmptyPatchError, InvalidGeometryError


def _element(plate, i, j, k=0):
    nx, ny, _ = plate.counts
    return i + nx * (j + ny * k)


class TestBuildPlateMesh:

    def test_counts(self, plate):
        assert plate.counts == (6, 6, 1)
        assert plate.n_nodes == 7 * 7 * 2
        assert plate.n_elements == 36
        assert plate.n_dofs == 3 * 98
        # 12 facets on each of the four edges, 36 on top and bottom
        assert len(plate.facets) == 4 * 6 + 2 * 36

    def test_element_volumes_sum_to_plate(self, plate, geometry):
        assert plate.element_volumes.sum() == pytest.approx(geometry.volume, rel=1e-12)

    def test_normals_are_unit_and_outward(self, plate):
        np.testing.assert_allclose(np.linalg.norm(plate.facet_normals, axis=1), 1.0, atol=1e-12)
        centre = np.asarray(plate.lengths) / 2
        outward = np.einsum('ij,ij->i', plate.facet_centroids - centre, plate.facet_normals)
        assert np.all(outward > 0)

    def test_nonpositive_cell_size(self, geometry):
        with pytest.raises(InvalidGeometryError):
            mesh.build_plate_mesh(geometry, 0.0)

    def test_sensor_off_surface(self, geometry):
        bad = geometry.model_copy(update={'sensor_points': [(0.03, 0.03, 0.005)]})
        with pytest.raises(InvalidGeometryError):
            mesh.build_plate_mesh(bad, SMALL_CELL)

    def test_default_geometry_meshes(self):
        geometry = mesh.default_geometry()
        plate = mesh.tag_boundaries(mesh.build_plate_mesh(geometry, 0.01), geometry)
        assert plate.counts == (30, 30, 1)
        assert len(plate.facets_of_kind(mesh.NEUMANN)) == 4


class TestTagBoundaries:

    def test_patch_facets(self, plate):
        assert len(plate.facets_of_kind(mesh.DIRICHLET)) == 4
        assert len(plate.facets_of_kind(mesh.NEUMANN)) == 4
        assert len(plate.facets_of_kind(mesh.NEUMANN, patch=0)) == 2

    def test_patch_nodes(self, plate):
        assert len(plate.dirichlet_nodes) == 12
        assert len(plate.neumann_nodes) == 12
        assert len(plate.constrained_dofs) == 36
        assert not set(plate.dirichlet_nodes) & set(plate.neumann_nodes)

    def test_dirichlet_facets_stay_on_the_clamped_face(self, plate):
        clamped = plate.facets_of_kind(mesh.DIRICHLET)
        faces = {mesh.FACE_CODES[c] for c in plate.facet_faces[clamped]}
        assert faces == {'x-', 'x+'}

    def test_face_of(self, geometry):
        assert mesh.FACE_CODES[mesh.face_of((0.0, 0.03, 0.005), geometry.lengths)] == 'x-'
        assert mesh.FACE_CODES[mesh.face_of((0.03, 0.06, 0.005), geometry.lengths)] == 'y+'
        with pytest.raises(InvalidGeometryError):
            mesh.face_of((0.03, 0.03, 0.005), geometry.lengths)

    def test_neumann_patch_without_facets(self, geometry):
        tiny = mesh.NeumannPatch(face='y-', center=(0.03, 0.005), extent=(0.001, 0.001))
        bad = geometry.model_copy(update={'neumann_patches': [tiny]})
        with pytest.raises(EmptyPatchError):
            mesh.tag_boundaries(mesh.build_plate_mesh(bad, SMALL_CELL), bad)

    def test_no_neumann_patch(self, geometry):
        bad = geometry.model_copy(update={'neumann_patches': []})
        with pytest.raises(EmptyPatchError):
            mesh.tag_boundaries(mesh.build_plate_mesh(bad, SMALL_CELL), bad)

    def test_geometry_mismatch(self, plate):
        other = mesh.default_geometry()
        with pytest.raises(DimensionError):
            mesh.tag_boundaries(plate, other)


class TestInclusionGrid:

    def test_boxes_tile_the_plate(self, plate, geometry):
        grid = mesh.test_inclusion_grid(geometry, 3, 3)
        assert len(grid) == 9
        assert grid.index(2, 1) == 5
        cover = np.zeros(plate.n_elements, dtype=int)
        for box in grid.boxes:
            region = plate.aligned_box_mask(box)
            assert region.count == 4
            cover += region.flags
        assert np.all(cover == 1)

    def test_bad_counts(self, geometry):
        with pytest.raises(InvalidGeometryError):
            mesh.test_inclusion_grid(geometry, 0, 3)

    def test_misaligned_box(self, plate):
        with pytest.raises(AlignmentError):
            plate.aligned_box_mask(mesh.Box((0.0, 0.0, 0.0), (0.015, 0.02, 0.01)))

    def test_box_is_half_open(self):
        box = mesh.Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        hits = box.contains(np.array([[0.0, 0.5, 0.5], [1.0, 0.5, 0.5]]))
        assert hits.tolist() == [True, False]


class TestOuterSupportCompletion:

    def test_enclosed_hole_is_filled(self, plate):
        flags = np.zeros(plate.n_elements, dtype=bool)
        for i in range(1, 5):
            for j in range(1, 5):
                if i in (1, 4) or j in (1, 4):
                    flags[_element(plate, i, j)] = True
        completed = mesh.outer_support_completion(mesh.RegionMask(flags), plate)
        assert completed.count == 16
        assert mesh.RegionMask(flags).issubset(completed)
        assert completed.flags[_element(plate, 2, 2)]

    def test_components_reaching_the_edge_stay_out(self, plate):
        flags = np.zeros(plate.n_elements, dtype=bool)
        for j in range(6):
            flags[_element(plate, 2, j)] = True
        region = mesh.RegionMask(flags)
        assert mesh.outer_support_completion(region, plate).equals(region)

    def test_empty_and_full(self, plate):
        empty = mesh.RegionMask.empty(plate)
        assert mesh.outer_support_completion(empty, plate).count == 0
        full = mesh.RegionMask(np.ones(plate.n_elements, dtype=bool))
        assert mesh.outer_support_completion(full, plate).count == plate.n_elements

    def test_idempotent(self, plate):
        rng = np.random.default_rng(3)
        for _ in range(20):
            region = mesh.RegionMask(rng.random(plate.n_elements) < 0.4)
            once = mesh.outer_support_completion(region, plate)
            assert mesh.outer_support_completion(once, plate).equals(once)

    def test_monotone(self, plate):
        rng = np.random.default_rng(4)
        for _ in range(20):
            small = rng.random(plate.n_elements) < 0.3
            large = small | (rng.random(plate.n_elements) < 0.3)
            completed_small = mesh.outer_support_completion(mesh.RegionMask(small), plate)
            completed_large = mesh.outer_support_completion(mesh.RegionMask(large), plate)
            assert completed_small.issubset(completed_large)

    def test_wrong_length(self, plate):
        with pytest.raises(DimensionError):
            mesh.outer_support_completion(mesh.RegionMask(np.zeros(3, dtype=bool)), plate)


def test_small_geometry_is_valid():
    mesh.validate_geometry(small_geometry())
