"""
Discrete Neumann-to-Dirichlet matrices and the Fréchet derivative of the
NtD map with respect to (λ, μ, ρ).

Over a load basis g_1..g_m the NtD map is represented by its boundary
pairing L_ij = ∫_ΓN g_i · u_j dS. The Fréchet derivative in direction
h = (h_λ, h_μ, h_ρ) supported on a region B is
    F_ij = -∫_B 2h_μ ε(u_i):ε(u_j) + h_λ ∇·u_i ∇·u_j - ω² h_ρ u_i·u_j dx.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from . import fem
from .errors import DimensionError, EmptyPatchError, SchemaError
from .fem import BoundaryLoad, DisplacementField, FrequencyConfig, MaterialField
from .mesh import IN_FACE_AXES, NEUMANN, Box, Mesh, RegionMask

logger = logging.getLogger(__name__)

NTD_HEADER = 'elastoscan-ntd v1'
CONSISTENCY_TOL = 1e-8
AXES = 'xyz'


@dataclass(frozen=True, eq=False)
class LoadBasis:
    loads: Tuple[BoundaryLoad, ...]
    description: Tuple[str, ...]
    patch_ids: Tuple[int, ...]

    def __len__(self):
        return len(self.loads)

    def index(self, label: str) -> int:
        try:
            return self.description.index(label)
        except ValueError:
            raise DimensionError(f"no basis load labelled '{label}'")

    def area(self, mesh: Mesh, k: int) -> float:
        """Total facet area carrying load k."""
        return float(mesh.facet_areas[self.loads[k].facet_ids].sum())

    def load_matrix(self, mesh: Mesh) -> np.ndarray:
        """Consistent nodal load vectors as columns, (n_dofs, m)."""
        return np.column_stack([g.load_vector(mesh) for g in self.loads])

    def gram(self, mesh: Mesh) -> np.ndarray:
        """L²(Γ_N) inner products ∫ g_i · g_j dS."""
        m = len(self.loads)
        G = np.zeros((m, m))
        areas = mesh.facet_areas
        for i, gi in enumerate(self.loads):
            ti = dict(zip(gi.facet_ids.tolist(), gi.traction))
            for j, gj in enumerate(self.loads):
                G[i, j] = sum(areas[f] * float(ti[f] @ t) for f, t in zip(gj.facet_ids.tolist(), gj.traction) if f in ti)
        return G


def _split_groups(mesh: Mesh, facet_ids: np.ndarray, split: int) -> List[np.ndarray]:
    """Partition a patch's facets into `split` strips along its first in-face axis."""
    if split <= 1:
        return [facet_ids]
    axis = mesh.facet_faces[facet_ids[0]] // 2
    u_axis = IN_FACE_AXES[axis][0]
    u = mesh.facet_centroids[facet_ids, u_axis]
    order = np.argsort(u, kind='stable')
    return [facet_ids[chunk] for chunk in np.array_split(order, split)]


def build_load_basis(mesh: Mesh, split: int = 1) -> LoadBasis:
    """
    Unit traction in each coordinate direction on each facet group; every
    Neumann patch is split into `split` groups.
    """
    neumann = mesh.facets_of_kind(NEUMANN)
    if len(neumann) == 0:
        raise EmptyPatchError('mesh has no Neumann facets; tag boundaries first')
    loads, description, patch_ids = [], [], []
    for patch in np.unique(mesh.facet_patch[neumann]):
        facets = mesh.facets_of_kind(NEUMANN, int(patch))
        for n, group in enumerate(_split_groups(mesh, facets, split)):
            if len(group) == 0 or mesh.facet_areas[group].sum() <= 0:
                continue
            for d in range(3):
                traction = np.zeros((len(group), 3))
                traction[:, d] = 1.0
                loads.append(BoundaryLoad(group, traction))
                description.append(f"p{int(patch)}g{n}_{AXES[d]}")
                patch_ids.append(int(patch))

    basis = LoadBasis(tuple(loads), tuple(description), tuple(patch_ids))
    G = basis.gram(mesh)
    rank = np.linalg.matrix_rank(G)
    if rank < len(loads):
        # Greedy pruning keeps the first independent loads in order
        keep = []
        for i in range(len(loads)):
            trial = keep + [i]
            if np.linalg.matrix_rank(G[np.ix_(trial, trial)]) == len(trial):
                keep = trial
        basis = LoadBasis(tuple(loads[i] for i in keep), tuple(description[i] for i in keep),
                          tuple(patch_ids[i] for i in keep))
    logger.info(f"load basis size={len(basis)} split={split}")
    return basis


@dataclass(frozen=True, eq=False)
class NtDMatrix:
    entries: np.ndarray
    omega: float
    material_tag: str = 'background'
    imag_norm: float = 0.0

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.entries, 2))

    @property
    def symmetry_defect(self) -> float:
        scale = np.linalg.norm(self.entries)
        if scale == 0:
            return 0.0
        return float(np.linalg.norm(self.entries - self.entries.T) / scale)

    def retagged(self, tag: str) -> 'NtDMatrix':
        return NtDMatrix(self.entries, self.omega, tag, self.imag_norm)


@dataclass(frozen=True, eq=False)
class FrechetOperator:
    entries: np.ndarray
    region: RegionMask
    direction: Tuple[float, float, float]


class FrechetKernel:
    """
    Per-element pairings of a set of solutions:
        P_mu[e]  = ∫_e 2 ε(u_i):ε(u_j),  P_lam[e] = ∫_e ∇·u_i ∇·u_j,
        P_rho[e] = ∫_e u_i·u_j,
    each (E, m, m). Fréchet matrices over any element set are sums of these.
    """

    def __init__(self, solutions: Sequence[DisplacementField]):
        if not solutions:
            raise DimensionError('Fréchet kernel needs at least one solution')
        self.mesh = solutions[0].mesh
        for u in solutions:
            if u.mesh is not self.mesh:
                raise DimensionError('solutions live on different meshes')
        geo = fem.element_geometry(self.mesh)
        fields = [fem.quadrature_fields(u) for u in solutions]
        strain = np.stack([f.strain for f in fields])          # (m, E, Q, 6)
        div = np.stack([f.div for f in fields])                # (m, E, Q)
        vals = np.stack([f.values for f in fields])            # (m, E, Q, 3)
        self.P_mu = np.einsum('eq,ieqk,k,jeqk->eij', geo.wdet, strain, fem.SHEAR_WEIGHTS, strain)
        self.P_lam = np.einsum('eq,ieq,jeq->eij', geo.wdet, div, div)
        self.P_rho = np.einsum('eq,ieqd,jeqd->eij', geo.wdet, vals, vals)

    @property
    def size(self) -> int:
        return self.P_mu.shape[1]

    def region_sums(self, region: RegionMask) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        flags = region.flags
        if len(flags) != self.mesh.n_elements:
            raise DimensionError(f"region has {len(flags)} flags, mesh has {self.mesh.n_elements} elements")
        return self.P_lam[flags].sum(axis=0), self.P_mu[flags].sum(axis=0), self.P_rho[flags].sum(axis=0)

    def directional(self, region: RegionMask, h_lam: float, h_mu: float, h_rho: float,
                    omega: float) -> np.ndarray:
        """Derivative of the NtD pairing in direction (h_λ, h_μ, h_ρ)·χ_region."""
        P_lam, P_mu, P_rho = self.region_sums(region)
        return -(h_lam * P_lam + h_mu * P_mu - omega ** 2 * h_rho * P_rho)

    def energy(self, materials: MaterialField, omega: float) -> np.ndarray:
        """Matrix of energy_form(u_i, u_j) for element-wise materials."""
        return (np.einsum('e,eij->ij', materials.lam, self.P_lam)
                + np.einsum('e,eij->ij', materials.mu, self.P_mu)
                - omega ** 2 * np.einsum('e,eij->ij', materials.rho, self.P_rho))


def _resolve_region(mesh: Mesh, region: Union[RegionMask, Box]) -> RegionMask:
    if isinstance(region, Box):
        return mesh.aligned_box_mask(region)
    return region


def boundary_pairing(mesh: Mesh, basis: LoadBasis, solutions: Sequence[DisplacementField]) -> np.ndarray:
    """Unsymmetrized L_ij = b_iᵀ u_j."""
    B = basis.load_matrix(mesh)
    U = np.column_stack([u.flat for u in solutions])
    return B.T @ U


def ntd_matrix_with_solutions(mesh: Mesh, materials: MaterialField, freq: FrequencyConfig,
                              basis: LoadBasis, tag: str = 'background',
                              workers: Optional[int] = None
                              ) -> Tuple[NtDMatrix, List[DisplacementField]]:
    system = fem.assemble(mesh, materials, freq)
    solver = fem.ForwardSolver(system)
    solutions = solver.solve_many(list(basis.loads), workers)
    L = boundary_pairing(mesh, basis, solutions)

    energy = FrechetKernel(solutions).energy(materials, freq.omega)
    scale = max(np.linalg.norm(L, 2), np.finfo(float).tiny)
    defect = np.abs(L - energy.T).max() / scale
    asym = np.linalg.norm(L - L.T) / max(np.linalg.norm(L), np.finfo(float).tiny)
    logger.info(f"ntd tag={tag} omega={freq.omega:.6g} size={len(basis)} "
                f"symmetry_defect={asym:.2e} energy_defect={defect:.2e}")
    if defect > CONSISTENCY_TOL:
        logger.warning(f"ntd tag={tag} boundary pairing differs from energy form by {defect:.2e} (relative)")
    return NtDMatrix(0.5 * (L + L.T), freq.omega, tag), solutions


def ntd_matrix(mesh: Mesh, materials: MaterialField, freq: FrequencyConfig, basis: LoadBasis,
               tag: str = 'background', workers: Optional[int] = None) -> NtDMatrix:
    return ntd_matrix_with_solutions(mesh, materials, freq, basis, tag, workers)[0]


def frechet_matrix(background_solutions: Sequence[DisplacementField],
                   region: Union[RegionMask, Box],
                   alphas: Tuple[float, float, float],
                   sign_rho: int,
                   freq: FrequencyConfig,
                   kernel: Optional[FrechetKernel] = None) -> FrechetOperator:
    """
    Λ'[α₁χ_B, α₂χ_B, sign_rho·α₃χ_B] over the basis of the background solutions.
    A precomputed kernel of the same solutions may be passed to skip the
    quadrature.
    """
    if sign_rho not in (-1, 1):
        raise ValueError(f"sign_rho must be +1 or -1, got {sign_rho}")
    if any(a < 0 for a in alphas):
        raise ValueError(f"alphas must be non-negative, got {alphas}")
    kernel = kernel or FrechetKernel(background_solutions)
    mask = _resolve_region(kernel.mesh, region)
    a1, a2, a3 = alphas
    entries = kernel.directional(mask, a1, a2, sign_rho * a3, freq.omega)
    return FrechetOperator(entries, mask, (a1, a2, sign_rho * a3))


@dataclass(frozen=True)
class Perturbation:
    """Coefficient perturbation (h_λ, h_μ, h_ρ) constant on region."""
    region: RegionMask = field(compare=False)
    lam: float
    mu: float
    rho: float


def frechet_convergence_report(mesh: Mesh, materials: MaterialField, freq: FrequencyConfig,
                               basis: LoadBasis, h: Perturbation,
                               t_values: Sequence[float]) -> pd.DataFrame:
    """Spectral-norm remainders ‖Λ(p + t h) - Λ(p) - t Λ'(p)[h]‖ per t."""
    t_values = [float(t) for t in t_values]
    if any(t <= 0 for t in t_values) or any(b >= a for a, b in zip(t_values, t_values[1:])):
        raise ValueError('t_values must be positive and strictly decreasing')
    L0, solutions = ntd_matrix_with_solutions(mesh, materials, freq, basis)
    kernel = FrechetKernel(solutions)
    derivative = kernel.directional(h.region, h.lam, h.mu, h.rho, freq.omega)

    rows = []
    for t in t_values:
        perturbed = materials.perturbed(h.region, t * h.lam, t * h.mu, t * h.rho)
        Lt = ntd_matrix(mesh, perturbed, freq, basis, tag='perturbed')
        remainder = np.linalg.norm(Lt.entries - L0.entries - t * derivative, 2)
        rows.append({'t': t, 'remainder': float(remainder)})
        logger.info(f"frechet t={t:.3e} remainder={remainder:.3e}")
    return pd.DataFrame(rows, columns=['t', 'remainder'])


def fitted_slope(report: pd.DataFrame) -> float:
    """Least-squares slope of log(remainder) against log(t)."""
    valid = report[report['remainder'] > 0]
    if len(valid) < 2:
        return float('nan')
    slope, _ = np.polyfit(np.log(valid['t']), np.log(valid['remainder']), 1)
    return float(slope)


def write_ntd(matrix: NtDMatrix, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_ntd(matrix))


def format_ntd(matrix: NtDMatrix) -> str:
    lines = [NTD_HEADER, f"omega {matrix.omega!r}", f"tag {matrix.material_tag}", f"size {matrix.size}"]
    lines += [' '.join(repr(float(x)) for x in row) for row in matrix.entries]
    return '\n'.join(lines) + '\n'


def parse_ntd(text: str, source: str = '<ntd>') -> NtDMatrix:
    lines = text.splitlines()
    if not lines or lines[0].strip() != NTD_HEADER:
        raise SchemaError(f"expected header '{NTD_HEADER}'", line=1, path=source)
    meta = {}
    for n, key in enumerate(('omega', 'tag', 'size'), start=2):
        if len(lines) < n:
            raise SchemaError(f"missing '{key}' line", line=n, path=source)
        parts = lines[n - 1].split(maxsplit=1)
        if len(parts) != 2 or parts[0] != key:
            raise SchemaError(f"expected '{key} <value>'", line=n, path=source)
        meta[key] = parts[1].strip()
    try:
        omega = float(meta['omega'])
        size = int(meta['size'])
    except ValueError:
        raise SchemaError('omega must be a float and size an integer', line=2, path=source)

    rows = []
    for n, raw in enumerate(lines[4:4 + size], start=5):
        try:
            row = [float(x) for x in raw.split()]
        except ValueError:
            raise SchemaError('non-numeric matrix entry', line=n, path=source)
        if len(row) != size:
            raise SchemaError(f"expected {size} entries, found {len(row)}", line=n, path=source)
        rows.append(row)
    if len(rows) != size:
        raise SchemaError(f"expected {size} matrix rows, found {len(rows)}", line=len(lines), path=source)
    matrix = NtDMatrix(np.array(rows, dtype=float).reshape(size, size), omega, meta['tag'])
    if matrix.symmetry_defect > 1e-10:
        raise SchemaError(f"matrix is not symmetric (defect {matrix.symmetry_defect:.2e})", path=source)
    return matrix


def read_ntd(path: Union[str, Path]) -> NtDMatrix:
    path = Path(path)
    return parse_ntd(path.read_text(), source=str(path))
