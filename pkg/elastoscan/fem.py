"""
Time-harmonic linear elasticity on trilinear hexahedra.

The bilinear form is
    a(u, v) = ∫ 2μ ε(u):ε(v) + λ (∇·u)(∇·v) - ω² ρ u·v dx
with 2x2x2 Gauss quadrature; Dirichlet DOFs are removed by row/column
elimination so the reduced operator stays exactly symmetric.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator
from scipy import linalg, sparse
from scipy.sparse import linalg as spla

from . import settings
from .errors import DimensionError, InvalidGeometryError, InvalidMaterialError, ResonanceError
from .mesh import HEX_CORNERS, Mesh, NEUMANN, RegionMask

logger = logging.getLogger(__name__)

_G = 1.0 / math.sqrt(3.0)
GAUSS_POINTS = np.array(list(itertools.product((-_G, _G), repeat=3)))
GAUSS_WEIGHTS = np.ones(len(GAUSS_POINTS))

# Voigt weights turning engineering-strain products into 2 ε:ε'
SHEAR_WEIGHTS = np.array([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])

RESIDUAL_TOL = 1e-9


def apply_hooke(strain: np.ndarray, lam: float, mu: float) -> np.ndarray:
    """(C A)_ij = 2 mu A_ij + lam tr(A) delta_ij."""
    A = np.asarray(strain, dtype=float)
    return 2.0 * mu * A + lam * np.trace(A) * np.eye(3)


class FrequencyConfig(BaseModel):
    """Excitation frequency; value is Hz when interpret_hz, else rad/s."""
    value: float
    interpret_hz: bool = True

    @field_validator('value')
    @classmethod
    def _nonzero(cls, v):
        if v == 0 or not math.isfinite(v):
            raise ValueError('frequency must be finite and non-zero')
        return v

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.value if self.interpret_hz else self.value

    @property
    def hz(self) -> float:
        return self.omega / (2.0 * math.pi)

    @classmethod
    def rad_s(cls, omega: float) -> 'FrequencyConfig':
        return cls(value=omega, interpret_hz=False)


@dataclass(frozen=True, eq=False)
class MaterialField:
    """Element-wise Lamé parameters (Pa) and density (kg/m³)."""
    lam: np.ndarray
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for name in ('lam', 'mu', 'rho'):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @classmethod
    def uniform(cls, n_elements: int, lam: float, mu: float, rho: float) -> 'MaterialField':
        return cls(np.full(n_elements, lam), np.full(n_elements, mu), np.full(n_elements, rho))

    def __len__(self):
        return len(self.lam)

    def validate(self, n_elements: Optional[int] = None):
        for name in ('lam', 'mu', 'rho'):
            values = getattr(self, name)
            if n_elements is not None and len(values) != n_elements:
                raise DimensionError(f"material field '{name}' has {len(values)} entries, mesh has {n_elements} elements")
            if not np.all(np.isfinite(values)) or np.any(values <= 0):
                raise InvalidMaterialError(f"material field '{name}' must be finite and strictly positive")

    def scaled(self, lam: float = 1.0, mu: float = 1.0, rho: float = 1.0) -> 'MaterialField':
        return MaterialField(self.lam * lam, self.mu * mu, self.rho * rho)

    def perturbed(self, region: RegionMask, d_lam: float, d_mu: float, d_rho: float) -> 'MaterialField':
        flags = region.flags
        return MaterialField(self.lam + d_lam * flags, self.mu + d_mu * flags, self.rho + d_rho * flags)


@dataclass(frozen=True, eq=False)
class BoundaryLoad:
    """Piecewise-constant traction (Pa) on a set of Neumann facets."""
    facet_ids: np.ndarray
    traction: np.ndarray

    def load_vector(self, mesh: Mesh) -> np.ndarray:
        """Consistent nodal load b with b·v = ∫ g·v dS for every FE field v."""
        ids = np.asarray(self.facet_ids, dtype=int)
        if np.any(mesh.facet_kind[ids] != NEUMANN):
            raise DimensionError('boundary load has traction outside the Neumann boundary')
        b = np.zeros((mesh.n_nodes, 3))
        # Bilinear facet shape functions integrate to area/4 on rectangles
        share = (mesh.facet_areas[ids] / 4.0)[:, None] * np.asarray(self.traction, dtype=float)
        for corner in range(4):
            np.add.at(b, mesh.facets[ids, corner], share)
        return b.ravel()

    def scaled(self, s: float) -> 'BoundaryLoad':
        return BoundaryLoad(self.facet_ids, self.traction * s)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    mesh: Mesh
    values: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    @classmethod
    def from_dofs(cls, mesh: Mesh, dofs: np.ndarray) -> 'DisplacementField':
        return cls(mesh, np.asarray(dofs, dtype=float).reshape(-1, 3))


@dataclass(frozen=True, eq=False)
class SourceData:
    """Element-wise body force F (N/m³) and stress source A (Pa)."""
    body_force: np.ndarray
    stress_source: np.ndarray


@dataclass(frozen=True, eq=False)
class ElementGeometry:
    N: np.ndarray          # (Q, 8) shape values at Gauss points
    Ngrad: np.ndarray      # (E, Q, 8, 3) physical shape gradients
    wdet: np.ndarray       # (E, Q) weight * det J
    B: np.ndarray          # (E, Q, 6, 24) engineering strain operator
    dofs: np.ndarray       # (E, 24) global DOF indices, node-major


def _reference_shapes():
    signs = 2 * HEX_CORNERS - 1
    factors = 1.0 + GAUSS_POINTS[:, None, :] * signs[None, :, :]      # (Q, 8, 3)
    N = 0.125 * np.prod(factors, axis=2)
    dN = np.empty((len(GAUSS_POINTS), 8, 3))
    for i in range(3):
        others = [j for j in range(3) if j != i]
        dN[:, :, i] = 0.125 * signs[None, :, i] * np.prod(factors[:, :, others], axis=2)
    return N, dN


def strain_operator(Ngrad: np.ndarray) -> np.ndarray:
    E, Q = Ngrad.shape[:2]
    B = np.zeros((E, Q, 6, 24))
    Nx, Ny, Nz = Ngrad[..., 0], Ngrad[..., 1], Ngrad[..., 2]
    B[:, :, 0, 0::3] = Nx
    B[:, :, 1, 1::3] = Ny
    B[:, :, 2, 2::3] = Nz
    B[:, :, 3, 0::3] = Ny
    B[:, :, 3, 1::3] = Nx
    B[:, :, 4, 1::3] = Nz
    B[:, :, 4, 2::3] = Ny
    B[:, :, 5, 0::3] = Nz
    B[:, :, 5, 2::3] = Nx
    return B


@lru_cache(maxsize=8)
def element_geometry(mesh: Mesh) -> ElementGeometry:
    N, dN = _reference_shapes()
    X = mesh.nodes[mesh.elements]                                  # (E, 8, 3)
    J = np.einsum('qai,eaj->eqij', dN, X)
    detJ = np.linalg.det(J)
    if np.any(detJ <= 0):
        raise InvalidGeometryError('element with non-positive Jacobian determinant')
    Ngrad = np.einsum('eqij,qaj->eqai', np.linalg.inv(J), dN)
    dofs = (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(len(mesh.elements), 24)
    return ElementGeometry(
        N=N,
        Ngrad=Ngrad,
        wdet=detJ * GAUSS_WEIGHTS[None, :],
        B=strain_operator(Ngrad),
        dofs=dofs,
    )


@lru_cache(maxsize=8)
def element_matrices(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit-coefficient element matrices (K_lambda, K_mu, M), each (E, 24, 24)."""
    geo = element_geometry(mesh)
    divB = geo.B[:, :, 0] + geo.B[:, :, 1] + geo.B[:, :, 2]
    K_lam = np.einsum('eq,eqa,eqb->eab', geo.wdet, divB, divB)
    K_mu = np.einsum('eq,eqka,k,eqkb->eab', geo.wdet, geo.B, SHEAR_WEIGHTS, geo.B)
    M_scalar = np.einsum('eq,qa,qb->eab', geo.wdet, geo.N, geo.N)
    M = np.einsum('eab,ij->eaibj', M_scalar, np.eye(3)).reshape(len(mesh.elements), 24, 24)
    # Exact element symmetry
    K_lam = 0.5 * (K_lam + K_lam.transpose(0, 2, 1))
    K_mu = 0.5 * (K_mu + K_mu.transpose(0, 2, 1))
    M = 0.5 * (M + M.transpose(0, 2, 1))
    return K_lam, K_mu, M


def _assemble_global(mesh: Mesh, Ke: np.ndarray) -> sparse.csr_matrix:
    dofs = element_geometry(mesh).dofs
    rows = np.repeat(dofs, 24, axis=1).ravel()
    cols = np.tile(dofs, (1, 24)).ravel()
    A = sparse.coo_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()
    # duplicate summation order differs between (i, j) and (j, i)
    A = (0.5 * (A + A.T)).tocsr()
    A.sum_duplicates()
    return A


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    mesh: Mesh
    materials: MaterialField
    K: sparse.csr_matrix
    M: sparse.csr_matrix
    constrained_dofs: np.ndarray
    free_dofs: np.ndarray
    omega: float

    def operator(self, omega: Optional[float] = None) -> sparse.csr_matrix:
        w = self.omega if omega is None else omega
        return (self.K - w * w * self.M).tocsr()

    def reduced(self, matrix: sparse.spmatrix) -> sparse.csc_matrix:
        free = self.free_dofs
        return matrix.tocsr()[free][:, free].tocsc()

    def with_omega(self, omega: float) -> 'AssembledSystem':
        return AssembledSystem(self.mesh, self.materials, self.K, self.M,
                               self.constrained_dofs, self.free_dofs, omega)


def assemble(mesh: Mesh, materials: MaterialField, freq: FrequencyConfig) -> AssembledSystem:
    materials.validate(mesh.n_elements)
    K_lam, K_mu, M_ref = element_matrices(mesh)
    Ke = materials.lam[:, None, None] * K_lam + materials.mu[:, None, None] * K_mu
    Me = materials.rho[:, None, None] * M_ref
    K = _assemble_global(mesh, Ke)
    M = _assemble_global(mesh, Me)
    constrained = mesh.constrained_dofs
    free = np.setdiff1d(np.arange(mesh.n_dofs), constrained)
    logger.info(f"assemble dofs={mesh.n_dofs} free={len(free)} nnz={K.nnz} omega={freq.omega:.6g}")
    return AssembledSystem(mesh, materials, K, M, constrained, free, freq.omega)


class ForwardSolver:
    """
    One factorization of the reduced (K - ω²M); solves for many loads may run
    concurrently against it.
    """

    def __init__(self, system: AssembledSystem, threshold: Optional[float] = None):
        self.system = system
        self.threshold = settings.RESONANCE_THRESHOLD if threshold is None else threshold
        A = system.reduced(system.operator())
        self.A = A
        try:
            self.lu = spla.splu(A, permc_spec='MMD_AT_PLUS_A')
        except RuntimeError as e:
            raise ResonanceError(system.omega, f"factorization failed: {e}")
        self.condition = self._condition_estimate()
        logger.info(f"factorize omega={system.omega:.6g} free_dofs={A.shape[0]} cond_est={self.condition:.3e}")
        if not math.isfinite(self.condition) or self.condition > self.threshold:
            raise ResonanceError(system.omega, f"condition estimate {self.condition:.3e} above {self.threshold:.1e}")

    def _condition_estimate(self) -> float:
        n = self.A.shape[0]
        inverse = spla.LinearOperator(
            (n, n),
            matvec=self.lu.solve,
            rmatvec=lambda x: self.lu.solve(x, trans='T'),
            dtype=float,
        )
        with np.errstate(all='ignore'):
            inv_norm = spla.onenormest(inverse)
        return float(spla.norm(self.A, 1) * inv_norm)

    def solve_vector(self, b: np.ndarray) -> np.ndarray:
        """Full-length DOF vector u with u = 0 on constrained DOFs."""
        free = self.system.free_dofs
        b_free = b[free]
        u_free = self.lu.solve(b_free)
        scale = np.linalg.norm(b_free)
        residual = np.linalg.norm(self.A @ u_free - b_free)
        if scale > 0 and residual > RESIDUAL_TOL * scale:
            u_free = u_free + self.lu.solve(b_free - self.A @ u_free)
            residual = np.linalg.norm(self.A @ u_free - b_free)
            if residual > RESIDUAL_TOL * scale:
                logger.warning(f"solve omega={self.system.omega:.6g} residual={residual / scale:.3e} above {RESIDUAL_TOL:g}")
        u = np.zeros(self.system.mesh.n_dofs)
        u[free] = u_free
        return u

    def solve(self, g: BoundaryLoad) -> DisplacementField:
        mesh = self.system.mesh
        return DisplacementField.from_dofs(mesh, self.solve_vector(g.load_vector(mesh)))

    def solve_many(self, loads: Sequence[BoundaryLoad], workers: Optional[int] = None) -> List[DisplacementField]:
        """Solutions in load order."""
        workers = settings.WORKERS if workers is None else workers
        if workers <= 1 or len(loads) <= 1:
            return [self.solve(g) for g in loads]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.solve, loads))


def solve_forward(system: AssembledSystem, g: BoundaryLoad) -> DisplacementField:
    return ForwardSolver(system).solve(g)


def source_load_vector(system: AssembledSystem, src: SourceData) -> np.ndarray:
    """
    Right-hand side of the source problem with traction A·ν on the Neumann
    part: a(u, v) = ∫ A:∇v dx - ∫ F·v dx (the boundary terms cancel).
    """
    mesh = system.mesh
    geo = element_geometry(mesh)
    F = np.asarray(src.body_force, dtype=float)
    A = np.asarray(src.stress_source, dtype=float)
    if F.shape != (mesh.n_elements, 3) or A.shape != (mesh.n_elements, 3, 3):
        raise DimensionError('source data must be per element: F (E, 3), A (E, 3, 3)')
    # dof (a, i): ∫ A_ij ∂_j N_a - F_i N_a
    stress_part = np.einsum('eq,eij,eqaj->eai', geo.wdet, A, geo.Ngrad)
    force_part = np.einsum('eq,qa,ei->eai', geo.wdet, geo.N, F)
    be = (stress_part - force_part).reshape(mesh.n_elements, 24)
    b = np.zeros(mesh.n_dofs)
    np.add.at(b, geo.dofs, be)
    return b


def stress_traction(mesh: Mesh, stress_source: np.ndarray) -> BoundaryLoad:
    """Traction A·ν on every Neumann facet, A taken from the owning element."""
    ids = mesh.facets_of_kind(NEUMANN)
    A = np.asarray(stress_source, dtype=float)[mesh.facet_elements[ids]]
    return BoundaryLoad(ids, np.einsum('fij,fj->fi', A, mesh.facet_normals[ids]))


def solve_source(system: AssembledSystem, src: SourceData,
                 g_from_A: Optional[BoundaryLoad] = None) -> DisplacementField:
    """
    Source problem with Neumann data g_from_A in place of the natural A·ν.
    Leaving it unset keeps A·ν, whose boundary terms cancel.
    """
    mesh = system.mesh
    b = source_load_vector(system, src)
    if g_from_A is not None:
        b = b + g_from_A.load_vector(mesh) - stress_traction(mesh, src.stress_source).load_vector(mesh)
    return DisplacementField.from_dofs(mesh, ForwardSolver(system).solve_vector(b))


@dataclass(frozen=True, eq=False)
class QuadratureFields:
    """Engineering strain (E,Q,6), divergence (E,Q) and values (E,Q,3) of a field."""
    strain: np.ndarray
    div: np.ndarray
    values: np.ndarray


def quadrature_fields(u: DisplacementField) -> QuadratureFields:
    geo = element_geometry(u.mesh)
    ue = u.flat[geo.dofs]                                          # (E, 24)
    strain = np.einsum('eqka,ea->eqk', geo.B, ue)
    values = np.einsum('qa,eai->eqi', geo.N, u.values[u.mesh.elements])
    return QuadratureFields(strain=strain, div=strain[..., :3].sum(axis=-1), values=values)


def _check_same_mesh(*fields: DisplacementField):
    mesh = fields[0].mesh
    for f in fields[1:]:
        if f.mesh is not mesh:
            raise DimensionError('displacement fields live on different meshes')


def energy_form(u: DisplacementField, v: DisplacementField, materials: MaterialField,
                freq: FrequencyConfig) -> float:
    """∫ 2μ ε(u):ε(v) + λ ∇·u ∇·v - ω² ρ u·v dx, equal to vᵀ(K - ω²M)u."""
    _check_same_mesh(u, v)
    materials.validate(u.mesh.n_elements)
    geo = element_geometry(u.mesh)
    fu, fv = quadrature_fields(u), quadrature_fields(v)
    shear = np.einsum('eqk,k,eqk->eq', fu.strain, SHEAR_WEIGHTS, fv.strain)
    dil = fu.div * fv.div
    mass = np.einsum('eqi,eqi->eq', fu.values, fv.values)
    omega2 = freq.omega ** 2
    density = (materials.mu[:, None] * shear + materials.lam[:, None] * dil
               - omega2 * materials.rho[:, None] * mass)
    return float(np.sum(geo.wdet * density))


def voigt_to_tensor(strain: np.ndarray) -> np.ndarray:
    """Engineering Voigt [xx, yy, zz, xy, yz, xz] to symmetric 3x3 tensors."""
    s = np.asarray(strain)
    T = np.empty(s.shape[:-1] + (3, 3))
    T[..., 0, 0], T[..., 1, 1], T[..., 2, 2] = s[..., 0], s[..., 1], s[..., 2]
    T[..., 0, 1] = T[..., 1, 0] = 0.5 * s[..., 3]
    T[..., 1, 2] = T[..., 2, 1] = 0.5 * s[..., 4]
    T[..., 0, 2] = T[..., 2, 0] = 0.5 * s[..., 5]
    return T


def element_strain_div(u: DisplacementField, element: int) -> Tuple[np.ndarray, np.ndarray]:
    """Strain tensors (Q, 3, 3) and divergence (Q,) at the Gauss points of one element."""
    if not 0 <= element < u.mesh.n_elements:
        raise DimensionError(f"element {element} out of range")
    geo = element_geometry(u.mesh)
    ue = u.flat[geo.dofs[element]]
    strain = geo.B[element] @ ue
    return voigt_to_tensor(strain), strain[:, :3].sum(axis=1)


def h1_gram(mesh: Mesh) -> sparse.csr_matrix:
    """G with uᵀGu = ∫ |u|² + |∇u|² dx."""
    geo = element_geometry(mesh)
    scalar = (np.einsum('eq,qa,qb->eab', geo.wdet, geo.N, geo.N)
              + np.einsum('eq,eqai,eqbi->eab', geo.wdet, geo.Ngrad, geo.Ngrad))
    Ge = np.einsum('eab,ij->eaibj', scalar, np.eye(3)).reshape(mesh.n_elements, 24, 24)
    return _assemble_global(mesh, Ge)


def h1_norm(u: DisplacementField) -> float:
    G = h1_gram(u.mesh)
    return float(math.sqrt(max(u.flat @ (G @ u.flat), 0.0)))


def modal_frequencies(system: AssembledSystem, k: int = 6) -> np.ndarray:
    """Smallest k angular eigenfrequencies (rad/s) of (K, M) on free DOFs."""
    K_ff = system.reduced(system.K)
    M_ff = system.reduced(system.M)
    n = K_ff.shape[0]
    k = min(k, n)
    if n <= 1500:
        eigvals = linalg.eigh(K_ff.toarray(), M_ff.toarray(), eigvals_only=True, subset_by_index=[0, k - 1])
    else:
        eigvals = np.sort(spla.eigsh(K_ff, k=k, M=M_ff, sigma=0.0, which='LM', return_eigenvectors=False))
    return np.sqrt(np.clip(eigvals, 0.0, None))
