"""
Reconstruction reports: versioned JSON plus an SVG rendering of the test grid
(red = inclusion detected, green = no inclusion).
"""

import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .errors import SchemaError
from .mesh import PlateGeometry, TestInclusionGrid
from .monotonicity import INSIDE, AssumptionReport, ReconstructionResult
from .synthetic import DiscShape, Phantom

SCHEMA = 'elastoscan-report v1'

INSIDE_FILL = '#d62728'
OUTSIDE_FILL = '#2ca02c'


def assumption_dict(report: Optional[AssumptionReport]) -> Optional[dict]:
    if report is None:
        return None
    ratio = report.ratio
    return {
        'lhs': report.lhs,
        'rhs': report.rhs,
        'holds': report.holds,
        'ratio': ratio if math.isfinite(ratio) else None,
    }


def result_dict(result: ReconstructionResult, grid: TestInclusionGrid, frequency_hz: float,
                delta_relative: float, ntd_norm: float,
                expected: Optional[Dict[str, List[int]]] = None) -> dict:
    outcomes = []
    for o in result.outcomes:
        ix, iy = o.box_id % grid.nx, o.box_id // grid.nx
        outcomes.append({
            'box_id': o.box_id,
            'ix': ix,
            'iy': iy,
            'negative_count': o.negative_count,
            'eigenvalues': o.eigenvalues,
            'decision': o.decision,
            'alpha': list(o.alpha),
        })
    entry = {
        'frequency_hz': frequency_hz,
        'omega': result.omega,
        'M_l': result.parameters.M_l,
        'threshold_strict': result.threshold,
        'delta': result.parameters.delta,
        'delta_relative': delta_relative,
        'rho_sign': result.parameters.rho_sign,
        'alpha_sweep': [list(a) for a in result.alpha_sweep],
        'alpha_used': list(result.parameters.alpha),
        'sweep_counts': [list(c) for c in result.sweep_counts],
        'no_gap': result.no_gap,
        'ntd_norm': ntd_norm,
        'outcomes': outcomes,
        'accepted': list(result.accepted),
        'completed_elements': result.completed_mask.count,
        'null_data': result.null_data,
        'assumption': assumption_dict(result.assumption),
    }
    if expected is not None:
        entry['expected'] = expected
    return entry


def scene_dict(geometry: PlateGeometry, grid: TestInclusionGrid, phantom: Optional[Phantom] = None) -> dict:
    """Everything the SVG needs besides decisions."""
    discs, boxes = [], []
    for inc in (phantom.inclusions if phantom else []):
        if isinstance(inc.shape, DiscShape):
            discs.append({'center': list(inc.shape.center), 'diameter': inc.shape.diameter})
        else:
            boxes.append({'lo': list(inc.shape.lo), 'hi': list(inc.shape.hi)})
    return {
        'plate': [geometry.length_x, geometry.length_y, geometry.thickness],
        'grid': [grid.nx, grid.ny],
        'boxes': [[list(b.lo), list(b.hi)] for b in grid.boxes],
        'dirichlet': [{'center': list(p.center), 'radius': p.radius} for p in geometry.dirichlet_patches],
        'neumann': [{'face': p.face, 'center': list(p.center), 'extent': list(p.extent)}
                    for p in geometry.neumann_patches],
        'sensors': [list(s) for s in geometry.sensor_points],
        'inclusion_discs': discs,
        'inclusion_boxes': boxes,
    }


def build_report(command: str, config: dict, scene: dict, entries: Sequence[dict],
                 reproducible: bool = False, warnings: Sequence[str] = ()) -> dict:
    report = {
        'schema': SCHEMA,
        'command': command,
        'config': config,
        'scene': scene,
        'results': list(entries),
        'warnings': list(warnings),
    }
    if not reproducible:
        report['generated_at'] = datetime.now(timezone.utc).isoformat(timespec='seconds')
    return report


def write_report(report: dict, path: Union[str, Path]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + '\n')


def load_report(path: Union[str, Path]) -> dict:
    path = Path(path)
    try:
        report = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e.msg}", line=e.lineno, path=str(path))
    if not isinstance(report, dict) or report.get('schema') != SCHEMA:
        raise SchemaError(f"expected schema '{SCHEMA}'", path=str(path))
    return report


class SvgCanvas:
    """Plate coordinates in metres, y up; rendered in px with y down."""

    def __init__(self, width_m: float, height_m: float, px_per_m: float = 1500.0, margin: float = 30.0,
                 legend_height: float = 70.0):
        self.width_m = width_m
        self.height_m = height_m
        self.scale = px_per_m
        self.margin = margin
        self.legend_height = legend_height
        self.commands: List[str] = []

    @property
    def width(self) -> float:
        return self.width_m * self.scale + 2 * self.margin

    @property
    def height(self) -> float:
        return self.height_m * self.scale + 2 * self.margin + self.legend_height

    def xy(self, x: float, y: float):
        return self.margin + x * self.scale, self.margin + (self.height_m - y) * self.scale

    def rect(self, lo, hi, fill='none', stroke='#000000', width=1.0, opacity=1.0):
        x0, y1 = self.xy(lo[0], lo[1])
        x1, y0 = self.xy(hi[0], hi[1])
        self.commands.append(
            '<rect x="%.2f" y="%.2f" width="%.2f" height="%.2f" style="fill:%s;fill-opacity:%.2f;stroke:%s;stroke-width:%.2f"/>'
            % (x0, y0, x1 - x0, y1 - y0, fill, opacity, stroke, width)
        )

    def circle(self, x, y, radius, stroke='#000000', fill='none', dash=False):
        cx, cy = self.xy(x, y)
        style = 'fill:%s;stroke:%s;stroke-width:1.5' % (fill, stroke)
        if dash:
            style += ';stroke-dasharray:6,4'
        self.commands.append('<circle cx="%.2f" cy="%.2f" r="%.2f" style="%s"/>' % (cx, cy, radius * self.scale, style))

    def text(self, px, py, text, color='#333333', size=12):
        self.commands.append(
            '<text x="%.2f" y="%.2f" fill="%s" font-size="%d" font-family="monospace">%s</text>'
            % (px, py, color, size, text)
        )

    def swatch(self, px, py, fill, label):
        self.commands.append('<rect x="%.2f" y="%.2f" width="14" height="14" style="fill:%s;stroke:#000000"/>'
                             % (px, py - 11, fill))
        self.text(px + 20, py, label)

    def render(self) -> str:
        head = ('<?xml version="1.0" standalone="no"?>\n'
                '<svg width="%.0f" height="%.0f" viewBox="0 0 %.0f %.0f" version="1.1" '
                'xmlns="http://www.w3.org/2000/svg">\n'
                '<rect x="0" y="0" width="%.0f" height="%.0f" style="fill:#ffffff"/>\n'
                % (self.width, self.height, self.width, self.height, self.width, self.height))
        return head + '\n'.join(self.commands) + '\n</svg>\n'


def _neumann_marker(canvas: SvgCanvas, patch: dict, plate):
    """Project a Neumann rectangle onto the top view as a strip on its edge."""
    face, (cu, _), (eu, _) = patch['face'], patch['center'], patch['extent']
    lx, ly, _ = plate
    pad = 0.004
    if face in ('y-', 'y+'):
        y = 0.0 if face == 'y-' else ly
        canvas.rect((cu - eu / 2, y - pad), (cu + eu / 2, y + pad), fill='#ffffff', stroke='#1f77b4', width=2)
    elif face in ('x-', 'x+'):
        x = 0.0 if face == 'x-' else lx
        canvas.rect((x - pad, cu - eu / 2), (x + pad, cu + eu / 2), fill='#ffffff', stroke='#1f77b4', width=2)


def render_svg(scene: dict, entry: dict) -> str:
    lx, ly, _ = scene['plate']
    canvas = SvgCanvas(lx, ly)
    decisions = {o['box_id']: o['decision'] for o in entry['outcomes']}
    for k, (lo, hi) in enumerate(scene['boxes']):
        fill = INSIDE_FILL if decisions.get(k) == INSIDE else OUTSIDE_FILL
        canvas.rect(lo, hi, fill=fill, stroke='#ffffff', width=1.0, opacity=0.85)
    canvas.rect((0, 0), (lx, ly), stroke='#000000', width=2.0)
    for disc in scene['inclusion_discs']:
        canvas.circle(disc['center'][0], disc['center'][1], disc['diameter'] / 2, stroke='#000000', dash=True)
    for box in scene['inclusion_boxes']:
        canvas.rect(box['lo'], box['hi'], stroke='#000000', width=1.5)
    for patch in scene['dirichlet']:
        canvas.circle(patch['center'][0], patch['center'][1], max(patch['radius'], 0.004),
                      stroke='#1f77b4', fill='#1f77b4')
    for patch in scene['neumann']:
        _neumann_marker(canvas, patch, scene['plate'])
    for x, y, _ in scene['sensors']:
        canvas.circle(x, y, 0.0015, stroke='#555555', fill='#555555')

    base = canvas.margin + ly * canvas.scale + 28
    canvas.swatch(canvas.margin, base, INSIDE_FILL, 'inclusion detected')
    canvas.swatch(canvas.margin + 190, base, OUTSIDE_FILL, 'no inclusion')
    canvas.text(canvas.margin, base + 24,
                'f=%g Hz  omega=%.4g rad/s  M=%s  delta=%.4g' % (entry['frequency_hz'], entry['omega'],
                                                                 entry['M_l'], entry['delta']))
    return canvas.render()


def write_svg(scene: dict, entry: dict, path: Union[str, Path]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(render_svg(scene, entry))


def svg_name(entry: dict) -> str:
    return f"grid_{entry['frequency_hz']:g}Hz.svg"
