"""
Measurement pipeline: sweep records -> fixed-frequency amplitudes ->
measured NtD matrix.

Records are CSV files with a `time_s` column followed by `force_<load>` (N)
and `disp_<sensor>` (m) channels; a JSON sidecar places each sensor on the
plate boundary and names the displacement component it reads.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import signal
from scipy.interpolate import CubicSpline

from . import settings
from .errors import AlignmentError, CoverageError, InsufficientDataError, SchemaError
from .mesh import FACE_CODES, IN_FACE_AXES, NEUMANN, Mesh, PlateGeometry
from .ntd import AXES, LoadBasis, NtDMatrix

logger = logging.getLogger(__name__)

TRIM_FRACTION = 0.01
NOISE_SAFETY = 1.5
MIN_KNOTS = 4
_TOL = 1e-9


@dataclass
class SweepRecord:
    """Trimmed, uniformly sampled channels on a common time grid."""
    time: np.ndarray
    force: pd.DataFrame
    displacement: pd.DataFrame

    @property
    def rate(self) -> float:
        return 1.0 / float(np.median(np.diff(self.time)))

    def __len__(self):
        return len(self.time)


@dataclass
class SpectralSample:
    """Complex amplitudes at one frequency; x(t) = Re(amp·e^{iωt}), t from record start."""
    frequency: float
    bin_frequency: float
    bin_width: float
    force_amp: Dict[str, complex]
    disp_amp: Dict[str, complex]
    in_band: bool = True
    window: str = 'hann'


@dataclass
class NoiseEstimate:
    delta: float
    method: str
    repeats_used: int


@dataclass
class SensorLayout:
    names: Tuple[str, ...]
    positions: np.ndarray
    axes: Tuple[str, ...]

    def __len__(self):
        return len(self.names)

    def axis_indices(self) -> np.ndarray:
        return np.array([AXES.index(a) for a in self.axes])

    def node_indices(self, mesh: Mesh) -> np.ndarray:
        """Mesh node under each sensor; sensors off the node lattice are rejected."""
        spacing = np.asarray(mesh.spacing)
        ijk = np.rint(self.positions / spacing).astype(int)
        snapped = ijk * spacing
        off = np.abs(snapped - self.positions).max(axis=1) > _TOL * max(mesh.lengths)
        if off.any():
            bad = [self.names[i] for i in np.flatnonzero(off)]
            raise CoverageError(f"sensors not on mesh nodes: {bad}")
        nx, ny, _ = mesh.counts
        return ijk[:, 0] + (nx + 1) * (ijk[:, 1] + (ny + 1) * ijk[:, 2])

    def faces(self, lengths) -> List[int]:
        return [boundary_face(p, lengths) for p in self.positions]


def boundary_face(point, lengths) -> int:
    """Face code of a boundary point; plate edges (x, y faces) take precedence."""
    for code in range(len(FACE_CODES)):
        axis, side = code // 2, code % 2
        target = 0.0 if side == 0 else lengths[axis]
        if abs(point[axis] - target) <= _TOL * max(lengths):
            return code
    raise CoverageError(f"point {tuple(point)} is not on the plate boundary")


def default_layout(geometry: PlateGeometry) -> SensorLayout:
    """Three channels (x, y, z) at every sensor point of the geometry."""
    names, positions, axes = [], [], []
    for n, point in enumerate(geometry.sensor_points):
        for axis in AXES:
            names.append(f"s{n:02d}{axis}")
            positions.append(point)
            axes.append(axis)
    return SensorLayout(tuple(names), np.array(positions, dtype=float).reshape(-1, 3), tuple(axes))


def read_sensor_sidecar(path: Union[str, Path]) -> SensorLayout:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e.msg}", line=e.lineno, path=str(path))
    sensors = data.get('sensors') if isinstance(data, dict) else None
    if not isinstance(sensors, dict) or not sensors:
        raise SchemaError("sidecar needs a non-empty 'sensors' object", path=str(path))
    names, positions, axes = [], [], []
    for name, entry in sensors.items():
        try:
            position = [float(x) for x in entry['position']]
            axis = str(entry['axis'])
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"sensor '{name}' needs position [x, y, z] and axis", path=str(path))
        if len(position) != 3 or axis not in AXES:
            raise SchemaError(f"sensor '{name}' has a bad position or axis '{axis}'", path=str(path))
        names.append(name)
        positions.append(position)
        axes.append(axis)
    return SensorLayout(tuple(names), np.array(positions), tuple(axes))


def write_sensor_sidecar(layout: SensorLayout, path: Union[str, Path]):
    sensors = {
        name: {'position': [float(x) for x in pos], 'axis': axis}
        for name, pos, axis in zip(layout.names, layout.positions, layout.axes)
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({'sensors': sensors}, indent=2, sort_keys=True) + '\n')


def read_sweep_csv(path: Union[str, Path]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """(force, displacement) frames, each with the time_s column."""
    path = Path(path)
    with open(path) as f:
        header = f.readline().strip().split(',')
    if not header or header[0] != 'time_s':
        raise SchemaError("first column must be 'time_s'", line=1, path=str(path))
    channels = header[1:]
    if len(set(channels)) != len(channels):
        raise SchemaError('duplicate channel names', line=1, path=str(path))
    bad = [c for c in channels if not (c.startswith('force_') or c.startswith('disp_'))]
    if bad:
        raise SchemaError(f"channels must start with force_ or disp_: {bad}", line=1, path=str(path))
    force_cols = [c for c in channels if c.startswith('force_')]
    disp_cols = [c for c in channels if c.startswith('disp_')]
    if not force_cols or not disp_cols:
        raise SchemaError('need at least one force_ and one disp_ channel', line=1, path=str(path))

    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(raw.columns) != header:
        raise SchemaError('header could not be parsed', line=1, path=str(path))
    data = raw.apply(pd.to_numeric, errors='coerce')
    invalid = data.isna().any(axis=1).to_numpy()
    if invalid.any():
        row = int(np.argmax(invalid))
        raise SchemaError('non-numeric or missing value', line=row + 2, path=str(path))
    steps = np.diff(data['time_s'].to_numpy())
    if np.any(steps <= 0):
        row = int(np.argmax(steps <= 0)) + 1
        raise SchemaError('time_s must be strictly increasing', line=row + 2, path=str(path))
    # to_numeric may be off by an ulp; reread with the exact parser
    data = pd.read_csv(path, float_precision='round_trip').astype(float)
    return data[['time_s'] + force_cols], data[['time_s'] + disp_cols]


def write_sweep_csv(path: Union[str, Path], force: pd.DataFrame, displacement: pd.DataFrame):
    if not np.array_equal(force['time_s'].to_numpy(), displacement['time_s'].to_numpy()):
        raise AlignmentError('force and displacement frames must share time stamps')
    frame = pd.concat([force, displacement.drop(columns='time_s')], axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.17g')


def _active_window(time: np.ndarray, values: np.ndarray, fraction: float) -> Tuple[float, float]:
    magnitude = np.abs(values).max(axis=1) if values.ndim == 2 else np.abs(values)
    peak = magnitude.max() if len(magnitude) else 0.0
    if peak == 0:
        raise AlignmentError('force record is silent')
    active = np.flatnonzero(magnitude >= fraction * peak)
    return float(time[active[0]]), float(time[active[-1]])


def trim_and_align(force_raw: pd.DataFrame, disp_raw: pd.DataFrame,
                   fraction: float = TRIM_FRACTION) -> SweepRecord:
    """
    Cut the record to where the force exceeds `fraction` of its peak and
    resample every channel onto the force sampling grid over that window.
    """
    t_force = force_raw['time_s'].to_numpy(dtype=float)
    t_disp = disp_raw['time_s'].to_numpy(dtype=float)
    force_cols = [c for c in force_raw.columns if c != 'time_s']
    disp_cols = [c for c in disp_raw.columns if c != 'time_s']

    start, stop = _active_window(t_force, force_raw[force_cols].to_numpy(dtype=float), fraction)
    lo, hi = max(start, t_disp[0]), min(stop, t_disp[-1])
    if hi <= lo:
        raise AlignmentError(f"force window [{start:g}, {stop:g}] s and displacement range "
                             f"[{t_disp[0]:g}, {t_disp[-1]:g}] s do not overlap")

    dt = float(np.median(np.diff(t_force)))
    n = int(math.floor((hi - lo) / dt + 1e-6)) + 1
    grid = lo + dt * np.arange(n)
    force = pd.DataFrame({c: np.interp(grid, t_force, force_raw[c].to_numpy(dtype=float)) for c in force_cols})
    disp = pd.DataFrame({c: np.interp(grid, t_disp, disp_raw[c].to_numpy(dtype=float)) for c in disp_cols})
    logger.info(f"trim window=[{lo:.6g}, {grid[-1]:.6g}] s samples={n}")
    return SweepRecord(grid, force, disp)


def _window(name: str, n: int) -> np.ndarray:
    if name in ('rect', 'rectangular', 'boxcar'):
        return np.ones(n)
    return signal.get_window(name, n)


def fourier_extract(record: SweepRecord, frequency: float, window: str = 'hann') -> SpectralSample:
    """Nearest-bin windowed DFT amplitude of every channel at `frequency` Hz."""
    n = len(record)
    rate = record.rate
    if frequency >= rate / 2:
        raise InsufficientDataError(f"{frequency:g} Hz is above the Nyquist limit {rate / 2:g} Hz")
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    k = int(np.argmin(np.abs(freqs - frequency)))
    w = _window(window, n)
    scale = (1.0 if k == 0 else 2.0) / w.sum()

    def amplitudes(frame: pd.DataFrame, prefix: str) -> Dict[str, complex]:
        spectrum = np.fft.rfft(frame.to_numpy(dtype=float) * w[:, None], axis=0)[k] * scale
        return {c[len(prefix):]: complex(v) for c, v in zip(frame.columns, spectrum)}

    in_band = settings.in_analysis_band(frequency)
    if not in_band:
        logger.warning(f"{frequency:g} Hz is outside the measurement bands ({settings.describe_bands()})")
    return SpectralSample(
        frequency=float(frequency),
        bin_frequency=float(freqs[k]),
        bin_width=float(rate / n),
        force_amp=amplitudes(record.force, 'force_'),
        disp_amp=amplitudes(record.displacement, 'disp_'),
        in_band=in_band,
        window=window,
    )


def interpolate_missing(positions: Sequence[float], values: Sequence[complex], missing: Sequence[float],
                        bc_type: str = 'natural') -> np.ndarray:
    """
    Cubic-spline values at `missing` arc-length positions from knots along
    one boundary line; real and imaginary parts are splined separately.
    """
    x = np.asarray(positions, dtype=float)
    y = np.asarray(values, dtype=complex)
    order = np.argsort(x)
    x, y = x[order], y[order]
    if len(np.unique(x)) < MIN_KNOTS:
        raise InsufficientDataError(f"spline needs at least {MIN_KNOTS} knots, got {len(np.unique(x))}")
    query = np.atleast_1d(np.asarray(missing, dtype=float))
    real = CubicSpline(x, y.real, bc_type=bc_type)(query)
    imag = CubicSpline(x, y.imag, bc_type=bc_type)(query)
    out = real + 1j * imag
    # Knots are returned as given
    idx = np.searchsorted(x, query).clip(0, len(x) - 1)
    for n, (q, i) in enumerate(zip(query, idx)):
        for j in (i - 1, i):
            if 0 <= j < len(x) and abs(x[j] - q) <= _TOL:
                out[n] = y[j]
    return out


def _line_coords(point, face: int) -> Tuple[float, float]:
    a, b = IN_FACE_AXES[face // 2]
    return float(point[a]), round(float(point[b]), 9)


def _neumann_node_faces(mesh: Mesh) -> Dict[int, int]:
    faces = {}
    for f in mesh.facets_of_kind(NEUMANN):
        for node in mesh.facets[f]:
            faces.setdefault(int(node), int(mesh.facet_faces[f]))
    return faces


def _match_samples(samples: Sequence[SpectralSample], basis: LoadBasis) -> List[SpectralSample]:
    by_load: Dict[int, SpectralSample] = {}
    for sample in samples:
        known = {label: amp for label, amp in sample.force_amp.items() if label in basis.description}
        if not known:
            raise CoverageError(f"sample has no force channel matching a basis load: {list(sample.force_amp)}")
        label = max(known, key=lambda k: abs(known[k]))
        j = basis.index(label)
        if j in by_load:
            raise CoverageError(f"two records excite basis load '{label}'")
        by_load[j] = sample
    missing = [basis.description[j] for j in range(len(basis)) if j not in by_load]
    if missing:
        raise CoverageError(f"no record excites basis loads {missing}")
    return [by_load[j] for j in range(len(basis))]


def measured_displacements(sample: SpectralSample, load_index: int, basis: LoadBasis,
                           layout: SensorLayout, mesh: Mesh, bc_type: str = 'natural') -> np.ndarray:
    """Complex DOF vector of the unit-traction response, filled on Neumann nodes."""
    label = basis.description[load_index]
    force = sample.force_amp.get(label, 0j)
    if force == 0:
        raise CoverageError(f"record for load '{label}' carries no excitation at {sample.frequency:g} Hz")
    scale = basis.area(mesh, load_index) / force

    lines: Dict[Tuple[int, int, float], Tuple[List[float], List[complex]]] = {}
    for name, pos, axis, face in zip(layout.names, layout.positions, layout.axes, layout.faces(mesh.lengths)):
        if name not in sample.disp_amp:
            continue
        arc, level = _line_coords(pos, face)
        arcs, vals = lines.setdefault((face, AXES.index(axis), level), ([], []))
        arcs.append(arc)
        vals.append(sample.disp_amp[name] * scale)

    u = np.zeros(mesh.n_dofs, dtype=complex)
    for node, face in sorted(_neumann_node_faces(mesh).items()):
        arc, level = _line_coords(mesh.nodes[node], face)
        for d in range(3):
            key = (face, d, level)
            if key not in lines:
                raise CoverageError(
                    f"no {AXES[d]} sensor on face {FACE_CODES[face]} at level {level:g} m "
                    f"covers Neumann node {node}"
                )
            u[3 * node + d] = interpolate_missing(*lines[key], [arc], bc_type=bc_type)[0]
    return u


def assemble_measured_ntd(samples: Sequence[SpectralSample], basis: LoadBasis, layout: SensorLayout,
                          mesh: Mesh, bc_type: str = 'natural') -> NtDMatrix:
    """
    L̂_ij = Re b_iᵀ û_j with û_j the measured response normalized to unit
    traction; imag_norm records ‖Im‖₂/‖Re‖₂.
    """
    ordered = _match_samples(samples, basis)
    B = basis.load_matrix(mesh)
    U = np.column_stack([
        measured_displacements(s, j, basis, layout, mesh, bc_type) for j, s in enumerate(ordered)
    ])
    pairing = B.T @ U
    real = 0.5 * (pairing.real + pairing.real.T)
    real_norm = np.linalg.norm(real, 2)
    imag_norm = float(np.linalg.norm(pairing.imag, 2) / real_norm) if real_norm > 0 else 0.0
    omega = 2.0 * math.pi * ordered[0].frequency
    logger.info(f"measured ntd f={ordered[0].frequency:g} Hz size={len(basis)} imag_norm={imag_norm:.3e}")
    return NtDMatrix(real, omega, 'measured', imag_norm)


def estimate_noise(repeats: Sequence[NtDMatrix], safety: float = NOISE_SAFETY) -> NoiseEstimate:
    """safety × the largest spectral deviation of a repeat from the entrywise mean."""
    if len(repeats) < 2:
        raise InsufficientDataError('noise estimation needs at least two repeated measurements')
    stack = np.stack([r.entries for r in repeats])
    mean = stack.mean(axis=0)
    deviation = max(np.linalg.norm(m - mean, 2) for m in stack)
    return NoiseEstimate(delta=float(safety * deviation), method=f"{safety:g}*max spectral deviation from mean",
                         repeats_used=len(repeats))


def spectral_sample_dict(sample: SpectralSample) -> dict:
    pack = lambda amps: {k: [v.real, v.imag] for k, v in sorted(amps.items())}
    return {
        'schema': 'elastoscan-spectral v1',
        'frequency_hz': sample.frequency,
        'bin_frequency_hz': sample.bin_frequency,
        'bin_width_hz': sample.bin_width,
        'window': sample.window,
        'in_band': sample.in_band,
        'force_amp': pack(sample.force_amp),
        'disp_amp': pack(sample.disp_amp),
    }


def write_spectral_sample(sample: SpectralSample, path: Union[str, Path]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(spectral_sample_dict(sample), indent=2, sort_keys=True) + '\n')
