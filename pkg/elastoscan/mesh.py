"""
Plate geometry, structured hexahedral meshing and boundary tagging.
Also builds the test-inclusion grid and completes decision masks to their
outer support.
"""

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage

from .errors import DimensionError, EmptyPatchError, InvalidGeometryError, AlignmentError

logger = logging.getLogger(__name__)

FACE_CODES = ('x-', 'x+', 'y-', 'y+', 'z-', 'z+')
# In-face coordinate axes (u, v) for faces normal to x, y, z
IN_FACE_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}

FREE, NEUMANN, DIRICHLET = 0, 1, 2
_TOL = 1e-9

# Local node order of a hexahedron, matching the trilinear shape functions in fem
HEX_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
])


class DirichletPatch(BaseModel):
    """Mounting disc: facets with centroid within radius of center are clamped."""
    center: Tuple[float, float, float]
    radius: float


class NeumannPatch(BaseModel):
    """Axis-aligned rectangle on one plate face, in that face's (u, v) coordinates."""
    face: str
    center: Tuple[float, float]
    extent: Tuple[float, float]


class PlateGeometry(BaseModel):
    length_x: float
    length_y: float
    thickness: float
    dirichlet_patches: List[DirichletPatch] = Field(default_factory=list)
    neumann_patches: List[NeumannPatch] = Field(default_factory=list)
    sensor_points: List[Tuple[float, float, float]] = Field(default_factory=list)

    @property
    def lengths(self) -> Tuple[float, float, float]:
        return (self.length_x, self.length_y, self.thickness)

    @property
    def volume(self) -> float:
        return self.length_x * self.length_y * self.thickness


def default_geometry() -> PlateGeometry:
    """
    0.30 x 0.30 x 0.01 m plate clamped at the midpoints of the x- and x+ edges,
    excited on two 2 cm edge rectangles at the middle of the y- and y+ edges.
    """
    lx, ly, t = 0.30, 0.30, 0.01
    sensors = [
        (round(x, 10), y, z)
        for y in (0.0, ly)
        for z in (0.0, t)
        for x in np.arange(0.10, 0.20 + 1e-9, 0.01)
    ]
    return PlateGeometry(
        length_x=lx,
        length_y=ly,
        thickness=t,
        dirichlet_patches=[
            DirichletPatch(center=(0.0, ly / 2, t / 2), radius=0.01),
            DirichletPatch(center=(lx, ly / 2, t / 2), radius=0.01),
        ],
        neumann_patches=[
            NeumannPatch(face='y-', center=(lx / 2, t / 2), extent=(0.02, t)),
            NeumannPatch(face='y+', center=(lx / 2, t / 2), extent=(0.02, t)),
        ],
        sensor_points=sensors,
    )


def on_boundary(point, lengths) -> bool:
    p = np.asarray(point, dtype=float)
    ext = np.asarray(lengths, dtype=float)
    if np.any(p < -_TOL) or np.any(p > ext + _TOL):
        return False
    return bool(np.any(np.abs(p) <= _TOL) or np.any(np.abs(p - ext) <= _TOL))


def face_of(point, lengths) -> int:
    """Code of the first face in FACE_CODES order that contains point."""
    p = np.asarray(point, dtype=float)
    for code in range(len(FACE_CODES)):
        axis = code // 2
        plane = lengths[axis] if code % 2 else 0.0
        if abs(p[axis] - plane) <= _TOL:
            return code
    raise InvalidGeometryError(f"point {tuple(p)} not on the plate surface")


def validate_geometry(geometry: PlateGeometry):
    """Check dimensions and that every patch and sensor sits on the plate surface."""
    lengths = geometry.lengths
    if min(lengths) <= 0 or not np.all(np.isfinite(lengths)):
        raise InvalidGeometryError(f"plate dimensions must be positive, got {lengths}")
    for n, patch in enumerate(geometry.dirichlet_patches):
        if patch.radius <= 0:
            raise InvalidGeometryError(f"dirichlet patch {n}: radius must be positive")
        if not on_boundary(patch.center, lengths):
            raise InvalidGeometryError(f"dirichlet patch {n}: center {patch.center} not on the plate surface")
    for n, patch in enumerate(geometry.neumann_patches):
        if patch.face not in FACE_CODES:
            raise InvalidGeometryError(f"neumann patch {n}: unknown face '{patch.face}'")
        if min(patch.extent) <= 0:
            raise InvalidGeometryError(f"neumann patch {n}: extent must be positive")
    for point in geometry.sensor_points:
        if not on_boundary(point, lengths):
            raise InvalidGeometryError(f"sensor {point} not on the plate surface")


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Structured hexahedral plate mesh.

    Node (i, j, k) has index i + (nx+1)*(j + (ny+1)*k); element (i, j, k) has
    index i + nx*(j + ny*k). Boundary facets carry a kind (FREE, NEUMANN,
    DIRICHLET) and the id of the patch that captured them (-1 when free).
    """
    nodes: np.ndarray
    elements: np.ndarray
    facets: np.ndarray
    facet_normals: np.ndarray
    facet_faces: np.ndarray
    facet_elements: np.ndarray
    facet_kind: np.ndarray
    facet_patch: np.ndarray
    counts: Tuple[int, int, int]
    lengths: Tuple[float, float, float]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return tuple(L / n for L, n in zip(self.lengths, self.counts))

    @cached_property
    def element_centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def element_volumes(self) -> np.ndarray:
        hx, hy, hz = self.spacing
        return np.full(self.n_elements, hx * hy * hz)

    @cached_property
    def facet_centroids(self) -> np.ndarray:
        return self.nodes[self.facets].mean(axis=1)

    @cached_property
    def facet_areas(self) -> np.ndarray:
        corners = self.nodes[self.facets]
        # Axis-aligned rectangles: product of the two side lengths
        side_a = np.linalg.norm(corners[:, 1] - corners[:, 0], axis=1)
        side_b = np.linalg.norm(corners[:, 3] - corners[:, 0], axis=1)
        return side_a * side_b

    @cached_property
    def lateral_element_flags(self) -> np.ndarray:
        """Elements with a face on the plate edges (x- x+ y- y+)."""
        nx, ny, nz = self.counts
        grid = np.zeros((nz, ny, nx), dtype=bool)
        grid[:, 0, :] = grid[:, -1, :] = True
        grid[:, :, 0] = grid[:, :, -1] = True
        return grid.ravel()

    def facets_of_kind(self, kind: int, patch: Optional[int] = None) -> np.ndarray:
        hits = self.facet_kind == kind
        if patch is not None:
            hits &= self.facet_patch == patch
        return np.flatnonzero(hits)

    @cached_property
    def dirichlet_nodes(self) -> np.ndarray:
        return np.unique(self.facets[self.facets_of_kind(DIRICHLET)])

    @cached_property
    def neumann_nodes(self) -> np.ndarray:
        return np.unique(self.facets[self.facets_of_kind(NEUMANN)])

    @cached_property
    def constrained_dofs(self) -> np.ndarray:
        nodes = self.dirichlet_nodes
        return np.sort((3 * nodes[:, None] + np.arange(3)).ravel())

    def box_mask(self, box: 'Box') -> 'RegionMask':
        return RegionMask(box.contains(self.element_centroids))

    def aligned_box_mask(self, box: 'Box') -> 'RegionMask':
        """Element mask of a box that must be an exact union of elements."""
        mask = self.box_mask(box)
        covered = float(self.element_volumes[mask.flags].sum())
        if abs(covered - box.volume) > 1e-9 * max(box.volume, 1e-30):
            raise AlignmentError(
                f"box {box.lo}-{box.hi} is not a union of elements "
                f"(covered volume {covered:.6e} vs box volume {box.volume:.6e})"
            )
        return mask


def _node_id(counts, i, j, k):
    nx, ny, _ = counts
    return i + (nx + 1) * (j + (ny + 1) * k)


def _element_id(counts, i, j, k):
    nx, ny, _ = counts
    return i + nx * (j + ny * k)


def _face_facets(counts, axis: int, side: int):
    b, c = IN_FACE_AXES[axis]
    ub, uc = np.meshgrid(np.arange(counts[b]), np.arange(counts[c]), indexing='ij')
    ub, uc = ub.ravel(), uc.ravel()
    fixed_node = 0 if side < 0 else counts[axis]
    fixed_elem = 0 if side < 0 else counts[axis] - 1

    corners = []
    for db, dc in ((0, 0), (1, 0), (1, 1), (0, 1)):
        idx = [None, None, None]
        idx[axis] = np.full_like(ub, fixed_node)
        idx[b] = ub + db
        idx[c] = uc + dc
        corners.append(_node_id(counts, *idx))

    idx = [None, None, None]
    idx[axis] = np.full_like(ub, fixed_elem)
    idx[b] = ub
    idx[c] = uc
    owners = _element_id(counts, *idx)
    return np.column_stack(corners), owners


def build_plate_mesh(geometry: PlateGeometry, cell_size: float) -> Mesh:
    """
    Structured mesh with cells of (about) cell_size; each dimension is split
    into round(L / cell_size) cells, at least one.
    """
    if not cell_size > 0:
        raise InvalidGeometryError(f"cell_size must be positive, got {cell_size}")
    validate_geometry(geometry)

    counts = []
    for length in geometry.lengths:
        n = max(1, int(round(length / cell_size)))
        snapped = length / n
        if abs(snapped - cell_size) > 0.01 * cell_size and n > 1:
            logger.warning(f"cell_size {cell_size:g} does not divide {length:g}; snapped to {snapped:g}")
        counts.append(n)
    counts = tuple(counts)
    nx, ny, nz = counts

    axes = [np.linspace(0.0, L, n + 1) for L, n in zip(geometry.lengths, counts)]
    Z, Y, X = np.meshgrid(axes[2], axes[1], axes[0], indexing='ij')
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    K, J, I = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing='ij')
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    elements = np.column_stack([
        _node_id(counts, I + di, J + dj, K + dk) for di, dj, dk in HEX_CORNERS
    ])

    facets, normals, faces, owners = [], [], [], []
    for code, name in enumerate(FACE_CODES):
        axis, side = code // 2, (1 if code % 2 else -1)
        quads, elems = _face_facets(counts, axis, side)
        normal = np.zeros(3)
        normal[axis] = side
        facets.append(quads)
        owners.append(elems)
        normals.append(np.tile(normal, (len(quads), 1)))
        faces.append(np.full(len(quads), code))

    facets = np.vstack(facets)
    mesh = Mesh(
        nodes=nodes,
        elements=elements,
        facets=facets,
        facet_normals=np.vstack(normals),
        facet_faces=np.concatenate(faces),
        facet_elements=np.concatenate(owners),
        facet_kind=np.zeros(len(facets), dtype=np.int8),
        facet_patch=np.full(len(facets), -1),
        counts=counts,
        lengths=tuple(float(L) for L in geometry.lengths),
    )
    logger.info(f"mesh counts={counts} nodes={mesh.n_nodes} elements={mesh.n_elements} facets={len(facets)}")
    return mesh


def _in_face_coords(points: np.ndarray, face_code: int) -> np.ndarray:
    b, c = IN_FACE_AXES[face_code // 2]
    return points[:, [b, c]]


def tag_boundaries(mesh: Mesh, geometry: PlateGeometry) -> Mesh:
    """Return a copy of mesh with Dirichlet / Neumann facet tags from geometry."""
    validate_geometry(geometry)
    if not np.allclose(mesh.lengths, geometry.lengths, rtol=1e-12, atol=0):
        raise DimensionError(f"mesh lengths {mesh.lengths} do not match geometry {geometry.lengths}")
    if not geometry.neumann_patches:
        raise EmptyPatchError("geometry declares no Neumann patch; the Neumann boundary must not be empty")

    centroids = mesh.facet_centroids
    kind = np.zeros(len(mesh.facets), dtype=np.int8)
    patch_ids = np.full(len(mesh.facets), -1)

    for n, patch in enumerate(geometry.dirichlet_patches):
        # disc on the face holding its centre only
        on_face = mesh.facet_faces == face_of(patch.center, mesh.lengths)
        hits = on_face & (np.linalg.norm(centroids - np.asarray(patch.center), axis=1) <= patch.radius + _TOL)
        if not hits.any():
            raise EmptyPatchError(f"dirichlet patch {n} captures no facet; refine the mesh or enlarge the disc")
        kind[hits] = DIRICHLET
        patch_ids[hits] = n

    for n, patch in enumerate(geometry.neumann_patches):
        code = FACE_CODES.index(patch.face)
        uv = _in_face_coords(centroids, code)
        half = np.asarray(patch.extent) / 2
        hits = (mesh.facet_faces == code) & np.all(np.abs(uv - np.asarray(patch.center)) <= half + _TOL, axis=1)
        if not hits.any():
            raise EmptyPatchError(f"neumann patch {n} captures no facet; refine the mesh or enlarge the patch")
        if np.any(kind[hits] == DIRICHLET):
            raise InvalidGeometryError(f"neumann patch {n} overlaps a dirichlet patch")
        kind[hits] = NEUMANN
        patch_ids[hits] = n

    logger.info(
        f"tagged dirichlet_facets={int((kind == DIRICHLET).sum())} "
        f"neumann_facets={int((kind == NEUMANN).sum())}"
    )
    return replace(mesh, facet_kind=kind, facet_patch=patch_ids)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; membership is half-open [lo, hi) per axis."""
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    @property
    def center(self) -> Tuple[float, float, float]:
        return tuple((np.add(self.lo, self.hi) / 2).tolist())

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.all((pts >= np.asarray(self.lo)) & (pts < np.asarray(self.hi)), axis=1)


@dataclass(frozen=True)
class TestInclusionGrid:
    __test__ = False

    boxes: Tuple[Box, ...]
    nx: int
    ny: int

    def __len__(self):
        return len(self.boxes)

    def index(self, ix: int, iy: int) -> int:
        return ix + self.nx * iy


def test_inclusion_grid(geometry: PlateGeometry, nx: int, ny: int) -> TestInclusionGrid:
    """nx*ny full-thickness boxes tiling the plate; box (ix, iy) has id ix + nx*iy."""
    if nx < 1 or ny < 1:
        raise InvalidGeometryError(f"grid counts must be >= 1, got {nx}x{ny}")
    xs = np.linspace(0.0, geometry.length_x, nx + 1)
    ys = np.linspace(0.0, geometry.length_y, ny + 1)
    boxes = tuple(
        Box(lo=(float(xs[ix]), float(ys[iy]), 0.0),
            hi=(float(xs[ix + 1]), float(ys[iy + 1]), float(geometry.thickness)))
        for iy in range(ny) for ix in range(nx)
    )
    return TestInclusionGrid(boxes=boxes, nx=nx, ny=ny)


test_inclusion_grid.__test__ = False


@dataclass(frozen=True, eq=False)
class RegionMask:
    flags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'flags', np.asarray(self.flags, dtype=bool))

    def __or__(self, other: 'RegionMask') -> 'RegionMask':
        return RegionMask(self.flags | other.flags)

    def __len__(self):
        return len(self.flags)

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    def equals(self, other: 'RegionMask') -> bool:
        return bool(np.array_equal(self.flags, other.flags))

    def issubset(self, other: 'RegionMask') -> bool:
        return bool(np.all(~self.flags | other.flags))

    @classmethod
    def empty(cls, mesh: Mesh) -> 'RegionMask':
        return cls(np.zeros(mesh.n_elements, dtype=bool))


def outer_support_completion(mask: RegionMask, mesh: Mesh) -> RegionMask:
    """
    Add to mask every face-connected component of its complement that does not
    reach the plate edges (x-, x+, y-, y+). Top and bottom faces are not
    boundary here.
    """
    if len(mask) != mesh.n_elements:
        raise DimensionError(f"mask has {len(mask)} flags, mesh has {mesh.n_elements} elements")
    nx, ny, nz = mesh.counts
    complement = ~mask.flags.reshape(nz, ny, nx)
    labels, n_components = ndimage.label(complement)
    if n_components == 0:
        return RegionMask(mask.flags.copy())

    edge_labels = np.unique(labels.ravel()[mesh.lateral_element_flags])
    enclosed = complement & ~np.isin(labels, edge_labels[edge_labels > 0])
    return RegionMask(mask.flags | enclosed.ravel())
