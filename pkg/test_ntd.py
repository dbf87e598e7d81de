"""
Tests for the load basis, discrete NtD matrices, the Fréchet derivative and
the NtD text format.
"""
import numpy as np
import pytest

from elastoscan import fem, mesh, ntd
from elastoscan.errors import DimensionError, SchemaError


@pytest.fixture
def centre_box(geometry):
    grid = mesh.test_inclusion_grid(geometry, 3, 3)
    return grid.boxes[grid.index(1, 1)]


class TestLoadBasis:

    def test_one_load_per_patch_and_axis(self, basis):
        assert len(basis) == 6
        assert basis.description[:3] == ('p0g0_x', 'p0g0_y', 'p0g0_z')
        assert basis.index('p1g0_z') == 5
        assert basis.patch_ids == (0, 0, 0, 1, 1, 1)

    def test_unknown_label(self, basis):
        with pytest.raises(DimensionError):
            basis.index('p7g0_x')

    def test_gram_is_diagonal_area(self, plate, basis):
        G = basis.gram(plate)
        np.testing.assert_allclose(G, np.diag([basis.area(plate, k) for k in range(len(basis))]), atol=1e-18)

    def test_split_groups(self, plate):
        assert len(ntd.build_load_basis(plate, split=2)) == 12


class TestNtDMatrix:

    def test_symmetric_and_positive_at_low_frequency(self, plate, background, basis):
        L = ntd.ntd_matrix(plate, background, fem.FrequencyConfig(value=21.0), basis)
        assert L.size == 6
        assert L.symmetry_defect < 1e-10
        # far below the first resonance the map is positive definite
        assert np.linalg.eigvalsh(L.entries).min() > 0

    def test_pairing_is_symmetric_before_averaging(self, plate, background, freq, basis):
        L, solutions = ntd.ntd_matrix_with_solutions(plate, background, freq, basis)
        raw = ntd.boundary_pairing(plate, basis, solutions)
        assert np.linalg.norm(raw - raw.T) < 1e-10 * np.linalg.norm(raw)
        np.testing.assert_array_equal(L.entries, 0.5 * (raw + raw.T))

    def test_matches_energy_form(self, plate, background, freq, basis):
        L, solutions = ntd.ntd_matrix_with_solutions(plate, background, freq, basis)
        energy = np.array([[fem.energy_form(u, v, background, freq) for v in solutions] for u in solutions])
        np.testing.assert_allclose(L.entries, energy, rtol=1e-8, atol=1e-8 * L.norm)

    def test_stiffer_material_reduces_displacements(self, plate, background, freq, basis):
        L_soft = ntd.ntd_matrix(plate, background, freq, basis)
        L_stiff = ntd.ntd_matrix(plate, background.scaled(lam=2.0, mu=2.0), freq, basis)
        assert np.linalg.eigvalsh(L_soft.entries - L_stiff.entries).min() > 0

    def test_retagged(self, plate, background, freq, basis):
        L = ntd.ntd_matrix(plate, background, freq, basis)
        assert L.retagged('measured').material_tag == 'measured'


class TestFrechet:

    def test_density_direction_sign(self, plate, background, freq, basis, centre_box):
        _, solutions = ntd.ntd_matrix_with_solutions(plate, background, freq, basis)
        alpha3 = 100.0
        F = ntd.frechet_matrix(solutions, centre_box, (0.0, 0.0, alpha3), -1, freq)
        kernel = ntd.FrechetKernel(solutions)
        _, _, P_rho = kernel.region_sums(plate.aligned_box_mask(centre_box))
        np.testing.assert_allclose(F.entries, -freq.omega ** 2 * alpha3 * P_rho)
        assert F.direction == (0.0, 0.0, -alpha3)
        assert np.linalg.eigvalsh(F.entries).max() <= 1e-12 * np.abs(F.entries).max()

    def test_stiffening_direction_is_negative(self, plate, background, freq, basis, centre_box):
        _, solutions = ntd.ntd_matrix_with_solutions(plate, background, freq, basis)
        F = ntd.frechet_matrix(solutions, centre_box, (1e9, 1e9, 0.0), 1, freq)
        assert np.linalg.eigvalsh(F.entries).max() < 0

    def test_additive_in_direction_and_region(self, plate, background, freq, basis, geometry):
        _, solutions = ntd.ntd_matrix_with_solutions(plate, background, freq, basis)
        kernel = ntd.FrechetKernel(solutions)
        grid = mesh.test_inclusion_grid(geometry, 3, 3)
        left = plate.aligned_box_mask(grid.boxes[3])
        right = plate.aligned_box_mask(grid.boxes[5])
        h1, h2 = (1e9, 2e9, 300.0), (-4e8, 5e8, -100.0)
        both = tuple(a + b for a, b in zip(h1, h2))
        F1 = kernel.directional(left, *h1, freq.omega)
        F2 = kernel.directional(left, *h2, freq.omega)
        scale = np.abs(F1).max()
        np.testing.assert_allclose(kernel.directional(left, *both, freq.omega), F1 + F2, rtol=0, atol=1e-12 * scale)
        union = kernel.directional(left | right, *h1, freq.omega)
        np.testing.assert_allclose(union, F1 + kernel.directional(right, *h1, freq.omega),
                                   rtol=0, atol=1e-12 * scale)

    def test_argument_checks(self, plate, background, freq, basis, centre_box):
        _, solutions = ntd.ntd_matrix_with_solutions(plate, background, freq, basis)
        with pytest.raises(ValueError):
            ntd.frechet_matrix(solutions, centre_box, (1.0, 1.0, 1.0), 0, freq)
        with pytest.raises(ValueError):
            ntd.frechet_matrix(solutions, centre_box, (-1.0, 1.0, 1.0), 1, freq)

    def test_empty_kernel(self):
        with pytest.raises(DimensionError):
            ntd.FrechetKernel([])

    def test_second_order_remainder(self, plate, background, freq, basis, centre_box):
        h = ntd.Perturbation(plate.aligned_box_mask(centre_box), background.lam[0], background.mu[0],
                             background.rho[0])
        report = ntd.frechet_convergence_report(plate, background, freq, basis, h, [1e-2, 1e-3, 1e-4])
        assert list(report.columns) == ['t', 'remainder']
        assert 1.8 <= ntd.fitted_slope(report) <= 2.2

    def test_t_values_must_decrease(self, plate, background, freq, basis, centre_box):
        h = ntd.Perturbation(plate.aligned_box_mask(centre_box), 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            ntd.frechet_convergence_report(plate, background, freq, basis, h, [1e-3, 1e-2])


class TestNtDFormat:

    def test_write_then_read(self, tmp_path, plate, background, freq, basis):
        L = ntd.ntd_matrix(plate, background, freq, basis)
        path = tmp_path / 'L0.ntd'
        ntd.write_ntd(L, path)
        back = ntd.read_ntd(path)
        np.testing.assert_array_equal(back.entries, L.entries)
        assert back.omega == L.omega
        assert back.material_tag == 'background'

    def test_bad_header(self):
        with pytest.raises(SchemaError) as info:
            ntd.parse_ntd('not-ntd\nomega 1.0\ntag x\nsize 1\n1.0\n')
        assert info.value.line == 1

    def test_short_row(self):
        text = 'elastoscan-ntd v1\nomega 1.0\ntag x\nsize 2\n1.0 0.0\n0.0\n'
        with pytest.raises(SchemaError) as info:
            ntd.parse_ntd(text)
        assert info.value.line == 6

    def test_asymmetric(self):
        text = 'elastoscan-ntd v1\nomega 1.0\ntag x\nsize 2\n1.0 0.5\n0.0 1.0\n'
        with pytest.raises(SchemaError):
            ntd.parse_ntd(text)
