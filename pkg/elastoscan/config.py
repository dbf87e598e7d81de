"""
Text configuration files.

Every file starts with `elastoscan-<kind> v1`; then `key = value` lines,
`#` comments, repeated keys collect into lists. Units are SI.
"""

import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field

from . import settings
from .errors import ConfigError, SchemaError
from .mesh import FACE_CODES, DirichletPatch, NeumannPatch, PlateGeometry, default_geometry
from .synthetic import BoxShape, DiscShape, Inclusion, Phantom, perturbation

logger = logging.getLogger(__name__)

VERSION = 'v1'
Entries = Dict[str, List[Tuple[int, List[str]]]]


def header(kind: str) -> str:
    return f"elastoscan-{kind} {VERSION}"


def parse_entries(text: str, kind: str, source: str = '<config>') -> Entries:
    lines = text.splitlines()
    if not lines or lines[0].strip() != header(kind):
        raise SchemaError(f"expected header '{header(kind)}'", line=1, path=source)
    entries: Entries = OrderedDict()
    for n, raw in enumerate(lines[1:], start=2):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise SchemaError(f"expected 'key = value', got '{line}'", line=n, path=source)
        key, value = (part.strip() for part in line.split('=', 1))
        if not key or not value:
            raise SchemaError('empty key or value', line=n, path=source)
        entries.setdefault(key, []).append((n, value.split()))
    return entries


class _Reader:
    """Typed access to parsed entries with line-numbered errors."""

    def __init__(self, entries: Entries, source: str, allowed: Tuple[str, ...]):
        self.entries = entries
        self.source = source
        for key, occurrences in entries.items():
            if key not in allowed:
                raise SchemaError(f"unknown key '{key}'", line=occurrences[0][0], path=source)

    def _fail(self, line: int, message: str):
        raise SchemaError(message, line=line, path=self.source)

    def floats(self, key: str, count: Optional[int] = None) -> List[Tuple[int, List[float]]]:
        out = []
        for line, tokens in self.entries.get(key, []):
            if count is not None and len(tokens) != count:
                self._fail(line, f"'{key}' takes {count} numbers, got {len(tokens)}")
            try:
                out.append((line, [float(t) for t in tokens]))
            except ValueError:
                self._fail(line, f"'{key}' values must be numbers")
        return out

    def one(self, key: str, default=None, required: bool = False) -> Optional[Tuple[int, List[str]]]:
        occurrences = self.entries.get(key, [])
        if not occurrences:
            if required:
                raise SchemaError(f"missing required key '{key}'", path=self.source)
            return default
        if len(occurrences) > 1:
            self._fail(occurrences[1][0], f"'{key}' given more than once")
        return occurrences[0]

    def scalar(self, key: str, cast, default=None, required: bool = False):
        entry = self.one(key, required=required)
        if entry is None:
            return default
        line, tokens = entry
        if len(tokens) != 1:
            self._fail(line, f"'{key}' takes one value")
        try:
            return cast(tokens[0])
        except ValueError:
            self._fail(line, f"bad value '{tokens[0]}' for '{key}'")

    def triple(self, key: str, required: bool = False):
        entry = self.floats(key, 3)
        if not entry:
            if required:
                raise SchemaError(f"missing required key '{key}'", path=self.source)
            return None
        if len(entry) > 1:
            self._fail(entry[1][0], f"'{key}' given more than once")
        return tuple(entry[0][1])


def _bool(token: str) -> bool:
    lowered = token.lower()
    if lowered in ('true', 'yes', '1'):
        return True
    if lowered in ('false', 'no', '0'):
        return False
    raise ValueError(token)


def _read_text(path: Union[str, Path]) -> str:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return path.read_text()


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- geometry

class GeometryConfig(BaseModel):
    geometry: PlateGeometry
    cell_size: float = 0.01


def parse_geometry(text: str, source: str = '<geometry>') -> GeometryConfig:
    r = _Reader(parse_entries(text, 'geometry', source), source,
                ('length_x', 'length_y', 'thickness', 'cell_size', 'dirichlet', 'neumann', 'sensor'))
    dirichlet = [DirichletPatch(center=tuple(v[:3]), radius=v[3]) for _, v in r.floats('dirichlet', 4)]
    neumann = []
    for line, tokens in r.entries.get('neumann', []):
        if len(tokens) != 5 or tokens[0] not in FACE_CODES:
            raise SchemaError(f"'neumann' takes 'face cu cv eu ev' with face in {FACE_CODES}", line=line, path=source)
        try:
            cu, cv, eu, ev = (float(t) for t in tokens[1:])
        except ValueError:
            raise SchemaError("'neumann' values must be numbers", line=line, path=source)
        neumann.append(NeumannPatch(face=tokens[0], center=(cu, cv), extent=(eu, ev)))
    geometry = PlateGeometry(
        length_x=r.scalar('length_x', float, required=True),
        length_y=r.scalar('length_y', float, required=True),
        thickness=r.scalar('thickness', float, required=True),
        dirichlet_patches=dirichlet,
        neumann_patches=neumann,
        sensor_points=[tuple(v) for _, v in r.floats('sensor', 3)],
    )
    return GeometryConfig(geometry=geometry, cell_size=r.scalar('cell_size', float, default=0.01))


def format_geometry(config: GeometryConfig) -> str:
    g = config.geometry
    lines = [header('geometry'), '# plate dimensions and mesh cell size (m)',
             f"length_x = {_fmt(g.length_x)}", f"length_y = {_fmt(g.length_y)}",
             f"thickness = {_fmt(g.thickness)}", f"cell_size = {_fmt(config.cell_size)}",
             '# clamped discs: cx cy cz radius']
    lines += [f"dirichlet = {' '.join(_fmt(x) for x in (*p.center, p.radius))}" for p in g.dirichlet_patches]
    lines.append('# loaded rectangles: face cu cv eu ev')
    lines += [f"neumann = {p.face} {' '.join(_fmt(x) for x in (*p.center, *p.extent))}" for p in g.neumann_patches]
    lines.append('# sensor points: x y z')
    lines += [f"sensor = {' '.join(_fmt(x) for x in s)}" for s in g.sensor_points]
    return '\n'.join(lines) + '\n'


def read_geometry(path: Union[str, Path]) -> GeometryConfig:
    return parse_geometry(_read_text(path), str(path))


def write_geometry(config: GeometryConfig, path: Union[str, Path]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_geometry(config))


# ----------------------------------------------------------------- phantom

def parse_phantom(text: str, source: str = '<phantom>') -> Phantom:
    r = _Reader(parse_entries(text, 'phantom', source), source,
                ('background', 'inclusion', 'disc', 'box', 'rho_sign'))
    background = r.triple('background', required=True)
    inclusion = r.triple('inclusion')
    shapes = [DiscShape(center=(v[0], v[1]), diameter=v[2]) for _, v in r.floats('disc', 3)]
    shapes += [BoxShape(lo=tuple(v[:3]), hi=tuple(v[3:])) for _, v in r.floats('box', 6)]
    if shapes and inclusion is None:
        raise SchemaError("shapes given without an 'inclusion = λ μ ρ' line", path=source)
    rho_sign = r.scalar('rho_sign', int, default=1)
    if rho_sign not in (-1, 1):
        raise SchemaError('rho_sign must be 1 or -1', line=r.one('rho_sign')[0], path=source)
    if any(x <= 0 for x in background):
        raise SchemaError('background parameters must be positive', line=r.entries['background'][0][0], path=source)
    psi = perturbation(background, inclusion) if inclusion else (0.0, 0.0, 0.0)
    return Phantom(background=background, inclusion=inclusion,
                   inclusions=[Inclusion(shape=s, psi=psi) for s in shapes], rho_sign=rho_sign)


def format_phantom(phantom: Phantom) -> str:
    lines = [header('phantom'), '# lambda (Pa) mu (Pa) rho (kg/m3)',
             f"background = {' '.join(_fmt(x) for x in phantom.background)}"]
    material = phantom.inclusion_material
    if material is not None:
        lines.append(f"inclusion = {' '.join(_fmt(x) for x in material)}")
    lines.append(f"rho_sign = {phantom.rho_sign}")
    for inc in phantom.inclusions:
        if isinstance(inc.shape, DiscShape):
            lines.append(f"disc = {' '.join(_fmt(x) for x in (*inc.shape.center, inc.shape.diameter))}")
        else:
            lines.append(f"box = {' '.join(_fmt(x) for x in (*inc.shape.lo, *inc.shape.hi))}")
    return '\n'.join(lines) + '\n'


def read_phantom(path: Union[str, Path]) -> Phantom:
    return parse_phantom(_read_text(path), str(path))


def write_phantom(phantom: Phantom, path: Union[str, Path]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_phantom(phantom))


# --------------------------------------------------------------------- run

class RunConfig(BaseModel):
    """
    One experiment. delta and noise_delta are relative to the spectral norm of
    the background NtD matrix; relative paths resolve against base_dir.
    """
    base_dir: str = '.'
    geometry: str
    phantom: Optional[str] = None
    frequencies: List[float] = Field(default_factory=list)
    interpret_hz: bool = True
    alpha_factors: List[float] = Field(default_factory=lambda: [1e-3, 1e-2, 1e-1])
    delta: float = 0.0
    noise_delta: float = 0.0
    ml: Optional[int] = None
    rho_sign: int = -1
    basis_split: int = 1
    grid: Tuple[int, int] = (5, 5)
    seed: int = 0
    output: str = settings.OUTPUT_DIR
    sensors: Optional[str] = None
    records: List[str] = Field(default_factory=list)
    measured: Dict[float, str] = Field(default_factory=dict)

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def check_files(self):
        refs = [self.geometry] + ([self.phantom] if self.phantom else []) + \
               ([self.sensors] if self.sensors else []) + self.records + list(self.measured.values())
        missing = [str(self.resolve(p)) for p in refs if not self.resolve(p).exists()]
        if missing:
            raise ConfigError(f"referenced files not found: {missing}")

    def load_geometry(self) -> GeometryConfig:
        return read_geometry(self.resolve(self.geometry))

    def load_phantom(self) -> Optional[Phantom]:
        return read_phantom(self.resolve(self.phantom)) if self.phantom else None


RUN_KEYS = ('geometry', 'phantom', 'frequency', 'interpret_hz', 'alpha_factors', 'delta', 'noise_delta',
            'ml', 'rho_sign', 'basis_split', 'grid', 'seed', 'output', 'sensors', 'record', 'measured')


def parse_run(text: str, source: str = '<run>', base_dir: str = '.') -> RunConfig:
    r = _Reader(parse_entries(text, 'run', source), source, RUN_KEYS)
    frequencies = [f for _, values in r.floats('frequency') for f in values]
    factors = [f for _, values in r.floats('alpha_factors') for f in values]
    ml_token = r.scalar('ml', str, default='auto')
    if ml_token == 'auto':
        ml = None
    else:
        try:
            ml = int(ml_token)
        except ValueError:
            raise SchemaError("ml must be 'auto' or an integer", line=r.one('ml')[0], path=source)
    grid = r.floats('grid', 2)
    measured = {}
    for line, tokens in r.entries.get('measured', []):
        if len(tokens) != 2:
            raise SchemaError("'measured' takes 'frequency path'", line=line, path=source)
        try:
            measured[float(tokens[0])] = tokens[1]
        except ValueError:
            raise SchemaError('measured frequency must be a number', line=line, path=source)

    fields = dict(
        base_dir=base_dir,
        geometry=r.scalar('geometry', str, required=True),
        phantom=r.scalar('phantom', str),
        frequencies=frequencies,
        interpret_hz=r.scalar('interpret_hz', _bool, default=True),
        delta=r.scalar('delta', float, default=0.0),
        noise_delta=r.scalar('noise_delta', float, default=0.0),
        ml=ml,
        rho_sign=r.scalar('rho_sign', int, default=-1),
        basis_split=r.scalar('basis_split', int, default=1),
        seed=r.scalar('seed', int, default=0),
        output=r.scalar('output', str, default=settings.OUTPUT_DIR),
        sensors=r.scalar('sensors', str),
        records=[tokens[0] for _, tokens in r.entries.get('record', [])],
        measured=measured,
    )
    if factors:
        fields['alpha_factors'] = factors
    if grid:
        fields['grid'] = (int(grid[0][1][0]), int(grid[0][1][1]))
    return RunConfig(**fields)


def format_run(run: RunConfig) -> str:
    lines = [header('run'),
             f"geometry = {run.geometry}"]
    if run.phantom:
        lines.append(f"phantom = {run.phantom}")
    if run.frequencies:
        lines.append(f"frequency = {' '.join(_fmt(f) for f in run.frequencies)}")
    lines += [
        f"interpret_hz = {'true' if run.interpret_hz else 'false'}",
        f"alpha_factors = {' '.join(_fmt(f) for f in run.alpha_factors)}",
        '# delta and noise_delta are fractions of the background NtD spectral norm',
        f"delta = {_fmt(run.delta)}",
        f"noise_delta = {_fmt(run.noise_delta)}",
        f"ml = {'auto' if run.ml is None else run.ml}",
        f"rho_sign = {run.rho_sign}",
        f"basis_split = {run.basis_split}",
        f"grid = {run.grid[0]} {run.grid[1]}",
        f"seed = {run.seed}",
        f"output = {run.output}",
    ]
    if run.sensors:
        lines.append(f"sensors = {run.sensors}")
    lines += [f"record = {p}" for p in run.records]
    lines += [f"measured = {_fmt(f)} {p}" for f, p in sorted(run.measured.items())]
    return '\n'.join(lines) + '\n'


def read_run(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    return parse_run(_read_text(path), str(path), base_dir=str(path.parent))


def write_run(run: RunConfig, path: Union[str, Path]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_run(run))


def default_geometry_config() -> GeometryConfig:
    return GeometryConfig(geometry=default_geometry(), cell_size=0.01)
