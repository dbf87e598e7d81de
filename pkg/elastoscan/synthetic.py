"""
Synthetic phantoms (Makrolon plates with aluminum inserts), noise injection
and closed-loop measurement records.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from . import fem
from .errors import ContainmentError, InvalidMaterialError, OverlapError
from .fem import FrequencyConfig, MaterialField
from .mesh import Box, Mesh, PlateGeometry, TestInclusionGrid, default_geometry
from .ntd import LoadBasis, NtDMatrix

logger = logging.getLogger(__name__)

# (λ Pa, μ Pa, ρ kg/m³)
MAKROLON = (2.8910e9, 1.1808e9, 1171.0)
ALUMINUM = (5.1084e10, 2.6316e10, 2700.0)

# Tabulated noise levels of the lab runs, keyed by frequency
CENTER_DISC_RUNS = {21.0: 9.775038e-7, 41.0: 9.72834585e-7, 55.4: 7.929299e-7}
TWO_DISC_RUN = (20.2, 1.53598375e-6)

Triple = Tuple[float, float, float]


class DiscShape(BaseModel):
    """Cylinder through the full plate thickness."""
    center: Tuple[float, float]
    diameter: float

    @property
    def radius(self) -> float:
        return self.diameter / 2

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1]) <= self.radius

    def inside_plate(self, lx: float, ly: float, margin: float = 0.0) -> bool:
        r = self.radius + margin
        cx, cy = self.center
        return cx - r >= 0 and cy - r >= 0 and cx + r <= lx and cy + r <= ly

    def covers_rect(self, lo, hi) -> bool:
        corners = [(x, y) for x in (lo[0], hi[0]) for y in (lo[1], hi[1])]
        return bool(np.all(self.contains(np.array(corners))))

    def misses_rect(self, lo, hi) -> bool:
        nearest_x = min(max(self.center[0], lo[0]), hi[0])
        nearest_y = min(max(self.center[1], lo[1]), hi[1])
        return math.hypot(nearest_x - self.center[0], nearest_y - self.center[1]) >= self.radius


class BoxShape(BaseModel):
    lo: Triple
    hi: Triple

    def contains(self, points: np.ndarray) -> np.ndarray:
        return Box(self.lo, self.hi).contains(points)

    def inside_plate(self, lx: float, ly: float, margin: float = 0.0) -> bool:
        return (self.lo[0] - margin >= 0 and self.lo[1] - margin >= 0
                and self.hi[0] + margin <= lx and self.hi[1] + margin <= ly)

    def covers_rect(self, lo, hi) -> bool:
        return self.lo[0] <= lo[0] and self.lo[1] <= lo[1] and hi[0] <= self.hi[0] and hi[1] <= self.hi[1]

    def misses_rect(self, lo, hi) -> bool:
        return hi[0] <= self.lo[0] or lo[0] >= self.hi[0] or hi[1] <= self.lo[1] or lo[1] >= self.hi[1]


Shape = Union[DiscShape, BoxShape]


class Inclusion(BaseModel):
    shape: Shape
    psi: Triple

    @field_validator('psi')
    @classmethod
    def _psi_nonnegative(cls, v):
        if any(p < 0 for p in v):
            raise ValueError(f"perturbations must be >= 0, got {v}")
        return v


class Phantom(BaseModel):
    """
    Background (λ₀, μ₀, ρ₀) plus inclusions adding (ψ_λ, ψ_μ, ψ_ρ).
    rho_sign -1 subtracts ψ_ρ (lighter inclusions).
    """
    background: Triple = MAKROLON
    inclusion: Optional[Triple] = None
    inclusions: List[Inclusion] = Field(default_factory=list)
    rho_sign: int = 1

    @field_validator('background')
    @classmethod
    def _positive(cls, v):
        if any(not (x > 0) for x in v):
            raise ValueError(f"background parameters must be > 0, got {v}")
        return v

    @field_validator('rho_sign')
    @classmethod
    def _sign(cls, v):
        if v not in (-1, 1):
            raise ValueError(f"rho_sign must be +1 or -1, got {v}")
        return v

    @property
    def inclusion_material(self) -> Optional[Triple]:
        """Declared inclusion material, else background plus the first perturbation."""
        if self.inclusion is not None:
            return self.inclusion
        if not self.inclusions:
            return None
        lam, mu, rho = self.inclusions[0].psi
        b = self.background
        return (b[0] + lam, b[1] + mu, b[2] + self.rho_sign * rho)


def perturbation(background: Triple, inclusion: Triple) -> Triple:
    return tuple(abs(i - b) for i, b in zip(inclusion, background))


def _check_inside(shape: Shape, geometry: PlateGeometry):
    if not shape.inside_plate(geometry.length_x, geometry.length_y):
        raise ContainmentError(f"inclusion {shape} does not fit inside the {geometry.length_x}x{geometry.length_y} m plate")


def phantom_center_disc(diameter: float = 0.12, background: Triple = MAKROLON, inclusion: Triple = ALUMINUM,
                        geometry: Optional[PlateGeometry] = None) -> Phantom:
    geometry = geometry or default_geometry()
    if diameter < 0:
        raise ContainmentError(f"diameter must be >= 0, got {diameter}")
    if diameter == 0:
        return Phantom(background=background, inclusion=inclusion)
    if diameter >= min(geometry.length_x, geometry.length_y):
        raise ContainmentError(f"a {diameter} m disc does not fit strictly inside the plate")
    disc = DiscShape(center=(geometry.length_x / 2, geometry.length_y / 2), diameter=diameter)
    _check_inside(disc, geometry)
    return Phantom(background=background, inclusion=inclusion,
                   inclusions=[Inclusion(shape=disc, psi=perturbation(background, inclusion))])


def phantom_two_discs(diameter: float = 0.10,
                      centers: Sequence[Tuple[float, float]] = ((0.09, 0.09), (0.21, 0.21)),
                      background: Triple = MAKROLON, inclusion: Triple = ALUMINUM,
                      geometry: Optional[PlateGeometry] = None) -> Phantom:
    """Two discs in opposite corners."""
    geometry = geometry or default_geometry()
    discs = [DiscShape(center=tuple(c), diameter=diameter) for c in centers]
    for disc in discs:
        _check_inside(disc, geometry)
    (ax, ay), (bx, by) = discs[0].center, discs[1].center
    if math.hypot(ax - bx, ay - by) < diameter:
        raise OverlapError(f"discs at {discs[0].center} and {discs[1].center} overlap")
    psi = perturbation(background, inclusion)
    return Phantom(background=background, inclusion=inclusion,
                   inclusions=[Inclusion(shape=d, psi=psi) for d in discs])


def check_containment(phantom: Phantom, mesh: Mesh):
    """Every inclusion dilated by one cell must stay inside the plate."""
    margin = max(mesh.spacing[0], mesh.spacing[1])
    lx, ly, _ = mesh.lengths
    for inc in phantom.inclusions:
        if not inc.shape.inside_plate(lx, ly, margin):
            raise ContainmentError(f"inclusion {inc.shape} dilated by {margin:g} m leaves the plate")


def inclusion_mask(phantom: Phantom, mesh: Mesh) -> np.ndarray:
    flags = np.zeros(mesh.n_elements, dtype=bool)
    for inc in phantom.inclusions:
        flags |= inc.shape.contains(mesh.element_centroids)
    return flags


def materialize(phantom: Phantom, mesh: Mesh) -> MaterialField:
    """Element-wise fields; an element is perturbed when its centroid lies in a shape."""
    lam0, mu0, rho0 = phantom.background
    field = MaterialField.uniform(mesh.n_elements, lam0, mu0, rho0)
    lam, mu, rho = field.lam.copy(), field.mu.copy(), field.rho.copy()
    centroids = mesh.element_centroids
    taken = np.zeros(mesh.n_elements, dtype=bool)
    for inc in phantom.inclusions:
        # Later inclusions do not stack on earlier ones
        hit = inc.shape.contains(centroids) & ~taken
        taken |= hit
        lam[hit] += inc.psi[0]
        mu[hit] += inc.psi[1]
        rho[hit] += phantom.rho_sign * inc.psi[2]
    if np.any(rho <= 0):
        raise InvalidMaterialError('subtractive density perturbation makes rho non-positive')
    logger.info(f"materialize inclusions={len(phantom.inclusions)} perturbed_elements={int(taken.sum())}")
    return MaterialField(lam, mu, rho)


def fully_inside_boxes(phantom: Phantom, grid: TestInclusionGrid) -> List[int]:
    return [k for k, box in enumerate(grid.boxes)
            if any(inc.shape.covers_rect(box.lo, box.hi) for inc in phantom.inclusions)]


def fully_outside_boxes(phantom: Phantom, grid: TestInclusionGrid) -> List[int]:
    return [k for k, box in enumerate(grid.boxes)
            if all(inc.shape.misses_rect(box.lo, box.hi) for inc in phantom.inclusions)]


class NoiseModel(BaseModel):
    delta_target: float = 0.0
    seed: int = 0

    @field_validator('delta_target')
    @classmethod
    def _nonnegative(cls, v):
        if v < 0:
            raise ValueError(f"delta_target must be >= 0, got {v}")
        return v


def add_noise(L: NtDMatrix, model: NoiseModel) -> NtDMatrix:
    """L + E with E symmetric and ‖E‖₂ = 0.99·delta_target."""
    if model.delta_target == 0:
        return NtDMatrix(L.entries.copy(), L.omega, 'measured', L.imag_norm)
    rng = np.random.default_rng(model.seed)
    A = rng.standard_normal(L.entries.shape)
    E = (A + A.T) / 2
    E *= 0.99 * model.delta_target / np.linalg.norm(E, 2)
    return NtDMatrix(L.entries + E, L.omega, 'measured', L.imag_norm)


def scale_table_delta(delta_table: float, L0: NtDMatrix) -> float:
    """Tabulated noise levels are read as relative to ‖Λ₀‖₂."""
    return delta_table * L0.norm


def synthesize_sweep(mesh: Mesh, materials: MaterialField, basis: LoadBasis, load_index: int,
                     layout, frequencies_hz: Sequence[float], duration: float = 5.0,
                     rate: float = 1000.0, force_amplitude: float = 400.0,
                     padding: float = 1.0) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Multi-tone excitation of one basis load and the matching sensor
    displacements, padded with silence; returns (force, displacement) frames
    with a time_s column. Sensors must sit on mesh nodes.
    """
    n_pad = int(round(padding * rate))
    n_active = int(round(duration * rate))
    t = np.arange(2 * n_pad + n_active) / rate
    active = np.zeros_like(t, dtype=bool)
    active[n_pad:n_pad + n_active] = True
    tau = t - n_pad / rate

    area = basis.area(mesh, load_index)
    nodes = layout.node_indices(mesh)
    axes = layout.axis_indices()
    force = np.zeros_like(t)
    disp = np.zeros((len(t), len(layout)))
    for f_hz in frequencies_hz:
        freq = FrequencyConfig(value=f_hz, interpret_hz=True)
        system = fem.assemble(mesh, materials, freq)
        u = fem.ForwardSolver(system).solve(basis.loads[load_index])
        tone = np.where(active, np.cos(freq.omega * tau), 0.0)
        force += force_amplitude * tone
        response = u.values[nodes, axes] * (force_amplitude / area)
        disp += tone[:, None] * response[None, :]

    label = basis.description[load_index]
    force_df = pd.DataFrame({'time_s': t, f"force_{label}": force})
    disp_df = pd.DataFrame({'time_s': t, **{f"disp_{name}": disp[:, n] for n, name in enumerate(layout.names)}})
    return force_df, disp_df
