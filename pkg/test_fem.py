"""
Tests for the time-harmonic elasticity solver: element matrices, assembly,
forward solves, the energy form and the resonance guard.
"""
import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.sparse import linalg as spla

from elastoscan import fem, mesh, synthetic
from elastoscan.errors import DimensionError, InvalidMaterialError, ResonanceError


def _random_field(plate, seed):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((plate.n_nodes, 3))
    values[plate.dirichlet_nodes] = 0.0
    return fem.DisplacementField(plate, values)


class TestMaterialParameters:

    def test_hooke(self):
        A = np.diag([1.0, 2.0, 3.0])
        np.testing.assert_allclose(fem.apply_hooke(A, lam=2.0, mu=1.0), 2 * A + 12.0 * np.eye(3))

    def test_frequency_units(self):
        assert fem.FrequencyConfig(value=21.0).omega == pytest.approx(2 * math.pi * 21.0)
        assert fem.FrequencyConfig.rad_s(21.0).hz == pytest.approx(21.0 / (2 * math.pi))

    def test_zero_frequency_rejected(self):
        with pytest.raises(ValidationError):
            fem.FrequencyConfig(value=0.0)

    def test_material_validation(self, plate, background):
        background.validate(plate.n_elements)
        with pytest.raises(DimensionError):
            background.validate(plate.n_elements + 1)
        bad = fem.MaterialField(background.lam, background.mu, -background.rho)
        with pytest.raises(InvalidMaterialError):
            bad.validate(plate.n_elements)


class TestAssembly:

    def test_symmetric(self, plate, background, freq):
        system = fem.assemble(plate, background, freq)
        assert abs(system.K - system.K.T).max() == 0.0
        assert abs(system.M - system.M.T).max() == 0.0

    def test_total_mass(self, plate, background, freq, geometry):
        system = fem.assemble(plate, background, freq)
        ex = np.zeros(plate.n_dofs)
        ex[0::3] = 1.0
        assert ex @ (system.M @ ex) == pytest.approx(background.rho[0] * geometry.volume, rel=1e-12)

    def test_rigid_motions_have_no_energy(self, plate, background, freq):
        K = fem.assemble(plate, background, freq).K
        x, y, z = plate.nodes.T
        translation = np.column_stack([np.ones_like(x), np.zeros_like(x), np.zeros_like(x)]).ravel()
        rotation = np.column_stack([-y, x, np.zeros_like(x)]).ravel()
        scale = abs(K).max()
        assert np.abs(K @ translation).max() < 1e-9 * scale
        assert np.abs(K @ rotation).max() < 1e-9 * scale

    def test_energy_form_matches_matrices(self, plate, background, freq):
        system = fem.assemble(plate, background, freq)
        u, v = _random_field(plate, 1), _random_field(plate, 2)
        expected = v.flat @ (system.operator() @ u.flat)
        assert fem.energy_form(u, v, background, freq) == pytest.approx(expected, rel=1e-10)

    def test_energy_form_rejects_mixed_meshes(self, plate, background, freq, geometry):
        other = mesh.tag_boundaries(mesh.build_plate_mesh(geometry, 0.01), geometry)
        u = fem.DisplacementField(plate, np.zeros((plate.n_nodes, 3)))
        v = fem.DisplacementField(other, np.zeros((other.n_nodes, 3)))
        with pytest.raises(DimensionError):
            fem.energy_form(u, v, background, freq)


class TestForwardSolve:

    def test_load_vector_resultant(self, plate, basis):
        b = basis.loads[0].load_vector(plate).reshape(-1, 3)
        area = basis.area(plate, 0)
        np.testing.assert_allclose(b.sum(axis=0), [area, 0.0, 0.0], atol=1e-15)

    def test_load_outside_neumann_rejected(self, plate):
        free_facet = plate.facets_of_kind(mesh.FREE)[:1]
        with pytest.raises(DimensionError):
            fem.BoundaryLoad(free_facet, np.ones((1, 3))).load_vector(plate)

    def test_zero_load_zero_response(self, plate, background, freq, basis):
        solver = fem.ForwardSolver(fem.assemble(plate, background, freq))
        u = solver.solve(basis.loads[0].scaled(0.0))
        assert np.all(u.values == 0.0)

    def test_solution_satisfies_system(self, plate, background, freq, basis):
        system = fem.assemble(plate, background, freq)
        u = fem.solve_forward(system, basis.loads[1])
        b = basis.loads[1].load_vector(plate)
        free = system.free_dofs
        residual = (system.operator() @ u.flat - b)[free]
        assert np.linalg.norm(residual) < 1e-9 * np.linalg.norm(b)
        assert np.all(u.values[plate.dirichlet_nodes] == 0.0)

    def test_reciprocity(self, plate, background, freq, basis):
        solver = fem.ForwardSolver(fem.assemble(plate, background, freq))
        u = solver.solve_many(list(basis.loads))
        b = [g.load_vector(plate) for g in basis.loads]
        pairing = np.array([[b[i] @ u[j].flat for j in range(len(u))] for i in range(len(u))])
        assert np.abs(pairing - pairing.T).max() < 1e-9 * np.abs(pairing).max()

    def test_solve_many_keeps_order(self, plate, background, freq, basis):
        solver = fem.ForwardSolver(fem.assemble(plate, background, freq))
        many = solver.solve_many(list(basis.loads), workers=3)
        for g, u in zip(basis.loads, many):
            np.testing.assert_array_equal(u.values, solver.solve(g).values)

    def test_resonance_detected(self, plate, background, freq):
        system = fem.assemble(plate, background, freq)
        omega1 = fem.modal_frequencies(system, k=1)[0]
        with pytest.raises(ResonanceError) as info:
            fem.ForwardSolver(system.with_omega(float(omega1)))
        assert info.value.omega == pytest.approx(omega1)


class TestSourceProblem:

    def test_body_force_rhs(self, plate, background, freq, geometry):
        system = fem.assemble(plate, background, freq)
        F = np.tile([2.0, 0.0, 0.0], (plate.n_elements, 1))
        A = np.zeros((plate.n_elements, 3, 3))
        b = fem.source_load_vector(system, fem.SourceData(F, A)).reshape(-1, 3)
        assert b[:, 0].sum() == pytest.approx(-2.0 * geometry.volume, rel=1e-12)

    def test_zero_source(self, plate, background, freq):
        system = fem.assemble(plate, background, freq)
        src = fem.SourceData(np.zeros((plate.n_elements, 3)), np.zeros((plate.n_elements, 3, 3)))
        assert np.all(fem.solve_source(system, src).values == 0.0)

    def test_linear_in_the_source(self, plate, background, freq):
        system = fem.assemble(plate, background, freq)
        rng = np.random.default_rng(5)
        src = fem.SourceData(rng.standard_normal((plate.n_elements, 3)),
                             rng.standard_normal((plate.n_elements, 3, 3)))
        u = fem.solve_source(system, src)
        u3 = fem.solve_source(system, fem.SourceData(3.0 * src.body_force, 3.0 * src.stress_source))
        np.testing.assert_allclose(u3.values, 3.0 * u.values, rtol=1e-12, atol=1e-12 * np.abs(u.values).max())

    def test_natural_neumann_data_is_the_default(self, plate, background, freq):
        system = fem.assemble(plate, background, freq)
        rng = np.random.default_rng(6)
        A = rng.standard_normal((plate.n_elements, 3, 3))
        src = fem.SourceData(np.zeros((plate.n_elements, 3)), A)
        natural = fem.stress_traction(plate, A)
        np.testing.assert_allclose(fem.solve_source(system, src, natural).values,
                                   fem.solve_source(system, src).values, rtol=0, atol=1e-12 * np.abs(A).max())

    def test_neumann_data_enters_as_a_load(self, plate, background, freq, basis):
        system = fem.assemble(plate, background, freq)
        zero = fem.SourceData(np.zeros((plate.n_elements, 3)), np.zeros((plate.n_elements, 3, 3)))
        u = fem.solve_source(system, zero, basis.loads[0])
        expected = fem.solve_forward(system, basis.loads[0])
        np.testing.assert_allclose(u.values, expected.values, rtol=1e-12, atol=0)

    def test_a_priori_bound(self, plate, background, freq):
        """H1 norm over source norm stays below the solution operator norm."""
        system = fem.assemble(plate, background, freq)
        solver = fem.ForwardSolver(system)
        G = fem.h1_gram(plate).toarray()
        E = plate.n_elements
        weights = np.sqrt(np.repeat(plate.element_volumes, 12))

        def solve(x):
            F, A = x[:3 * E].reshape(E, 3), x[3 * E:].reshape(E, 3, 3)
            return solver.solve_vector(fem.source_load_vector(system, fem.SourceData(F, A)))

        # columns of the solution operator in L2-normalized source coordinates
        order = np.concatenate([np.arange(3 * E).reshape(E, 3), 3 * E + np.arange(9 * E).reshape(E, 9)], axis=1)
        U = np.empty((plate.n_dofs, 12 * E))
        for col in range(12 * E):
            x = np.zeros(12 * E)
            x[col] = 1.0
            U[:, col] = solve(x)
        scale = np.empty(12 * E)
        scale[order.ravel()] = weights
        U = U / scale
        H = U.T @ G @ U

        v = np.ones(12 * E)
        for _ in range(300):
            v = H @ v
            v /= np.linalg.norm(v)
        bound = math.sqrt(v @ H @ v)

        rng = np.random.default_rng(8)
        for _ in range(20):
            F = rng.standard_normal((E, 3))
            A = rng.standard_normal((E, 3, 3))
            norm_F = math.sqrt(plate.element_volumes @ np.sum(F ** 2, axis=1))
            norm_A = math.sqrt(plate.element_volumes @ np.sum(A ** 2, axis=(1, 2)))
            F, A = F / (norm_F + norm_A), A / (norm_F + norm_A)
            u = fem.DisplacementField.from_dofs(plate, solver.solve_vector(
                fem.source_load_vector(system, fem.SourceData(F, A))))
            assert fem.h1_norm(u) <= bound * (1 + 1e-9)

    def test_shape_mismatch(self, plate, background, freq):
        system = fem.assemble(plate, background, freq)
        with pytest.raises(DimensionError):
            fem.source_load_vector(system, fem.SourceData(np.zeros((2, 3)), np.zeros((2, 3, 3))))


class TestFieldQuantities:

    def test_linear_field_strain(self, plate):
        values = np.column_stack([plate.nodes[:, 0], np.zeros(plate.n_nodes), np.zeros(plate.n_nodes)])
        strain, div = fem.element_strain_div(fem.DisplacementField(plate, values), 0)
        np.testing.assert_allclose(strain[:, 0, 0], 1.0, atol=1e-12)
        np.testing.assert_allclose(div, 1.0, atol=1e-12)
        np.testing.assert_allclose(strain[:, 1:, 1:], 0.0, atol=1e-12)

    def test_h1_norm_of_constant(self, plate, geometry):
        values = np.zeros((plate.n_nodes, 3))
        values[:, 2] = 1.0
        assert fem.h1_norm(fem.DisplacementField(plate, values)) == pytest.approx(math.sqrt(geometry.volume))

    def test_modal_frequencies_ascending(self, plate, background, freq):
        omegas = fem.modal_frequencies(fem.assemble(plate, background, freq), k=4)
        assert len(omegas) == 4
        assert np.all(omegas > 0)
        assert np.all(np.diff(omegas) >= 0)


class TestLimits:

    def test_patch_test(self, geometry):
        """Affine boundary values reproduce the affine field inside."""
        fine = mesh.tag_boundaries(mesh.build_plate_mesh(geometry, 0.005), geometry)
        materials = fem.MaterialField.uniform(fine.n_elements, *synthetic.MAKROLON)
        K = fem.assemble(fine, materials, fem.FrequencyConfig.rad_s(1.0)).K.tocsr()
        G = np.array([[1.0, 0.3, -0.2], [0.1, -0.5, 0.4], [0.2, 0.0, 0.7]]) * 1e-3
        u = (fine.nodes @ G.T + np.array([1e-4, -2e-4, 3e-4])).ravel()

        lo, hi = np.zeros(3), np.asarray(fine.lengths)
        inner = np.all((fine.nodes > lo + 1e-12) & (fine.nodes < hi - 1e-12), axis=1)
        assert inner.any()
        interior = (3 * np.flatnonzero(inner)[:, None] + np.arange(3)).ravel()
        boundary = np.setdiff1d(np.arange(fine.n_dofs), interior)
        K_ii = K[interior][:, interior].tocsc()
        K_ib = K[interior][:, boundary]
        solved = spla.spsolve(K_ii, -(K_ib @ u[boundary]))
        assert np.abs(solved - u[interior]).max() < 1e-10 * np.abs(u).max()

    def test_static_limit(self, plate, background, basis):
        K = fem.assemble(plate, background, fem.FrequencyConfig.rad_s(1.0))
        static = np.zeros(plate.n_dofs)
        free = K.free_dofs
        b = basis.loads[0].load_vector(plate)
        static[free] = spla.spsolve(K.reduced(K.K), b[free])

        gaps = []
        for omega in (1000.0, 100.0, 10.0):
            u = fem.solve_forward(K.with_omega(omega), basis.loads[0])
            gaps.append(np.linalg.norm(u.flat - static))
        assert gaps[0] > gaps[1] > gaps[2]
        # leading term of u(ω) - u(0) is ω² K⁻¹ M u(0)
        assert 95.0 < gaps[1] / gaps[2] < 105.0
