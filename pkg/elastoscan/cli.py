"""
Command-line entry point.

    python -m elastoscan <command> --config <file> [options]

Commands: mesh, forward, ntd, reconstruct, ingest, check, report.
"""

import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from db import get_store
from . import config, fem, monotonicity, ntd, pipeline, report, settings, synthetic
from .errors import BandRefusal, ConfigError, ElastoscanError, ResonanceError, SchemaError
from .mesh import Mesh, TestInclusionGrid, build_plate_mesh, tag_boundaries, test_inclusion_grid

logger = logging.getLogger(__name__)

CHECK_SCHEMA = 'elastoscan-check v1'
FRECHET_STEPS = (1e-2, 1e-3, 1e-4)


@dataclass
class Experiment:
    run: config.RunConfig
    geometry: config.GeometryConfig
    mesh: Mesh
    basis: ntd.LoadBasis
    phantom: Optional[synthetic.Phantom]
    grid: TestInclusionGrid
    digest: str


# ---------------------------------------------------------------- helpers

def _config_kind(path: Path) -> str:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    first = path.read_text().split('\n', 1)[0].strip()
    for kind in ('run', 'geometry'):
        if first == config.header(kind):
            return kind
    raise SchemaError(f"expected a run or geometry header, got '{first}'", line=1, path=str(path))


def _apply_overrides(run: config.RunConfig, args) -> config.RunConfig:
    update = {}
    if getattr(args, 'delta', None) is not None:
        update['delta'] = args.delta
    if getattr(args, 'ml', None) is not None:
        update['ml'] = None if args.ml == 'auto' else int(args.ml)
    if getattr(args, 'seed', None) is not None:
        update['seed'] = args.seed
    if getattr(args, 'out', None) is not None:
        update['output'] = str(Path(args.out).resolve())
    return run.model_copy(update=update) if update else run


def _digest(geometry: config.GeometryConfig, phantom: Optional[synthetic.Phantom], basis_split: int) -> str:
    text = config.format_geometry(geometry)
    text += config.format_phantom(phantom) if phantom else ''
    text += f"basis_split = {basis_split}\n"
    return hashlib.sha256(text.encode()).hexdigest()


def load_experiment(args) -> Experiment:
    if not args.config:
        raise ConfigError('--config is required')
    path = Path(args.config)
    if _config_kind(path) != 'run':
        raise ConfigError(f"{path} is not a run file")
    run = _apply_overrides(config.read_run(path), args)
    run.check_files()
    geometry = run.load_geometry()
    mesh = tag_boundaries(build_plate_mesh(geometry.geometry, geometry.cell_size), geometry.geometry)
    basis = ntd.build_load_basis(mesh, run.basis_split)
    phantom = run.load_phantom()
    grid = test_inclusion_grid(geometry.geometry, *run.grid)
    return Experiment(run, geometry, mesh, basis, phantom, grid,
                      _digest(geometry, phantom, run.basis_split))


def frequencies(run: config.RunConfig, args) -> List[fem.FrequencyConfig]:
    """Frequencies of the run (or --omega), refused outside the bands unless --force."""
    values = [args.omega] if getattr(args, 'omega', None) is not None else run.frequencies
    if not values:
        raise ConfigError('no frequency given (run file `frequency` or --omega)')
    interpret_hz = run.interpret_hz and not getattr(args, 'rad_s', False)
    freqs = [fem.FrequencyConfig(value=v, interpret_hz=interpret_hz) for v in values]
    outside = [f for f in freqs if not settings.in_analysis_band(f.hz)]
    if outside and not getattr(args, 'force', False):
        listed = ', '.join(f"{f.hz:.4g} Hz" for f in outside)
        raise BandRefusal(f"{listed} outside the measurement bands {settings.describe_bands()}; "
                          f"pass --force to run anyway")
    for f in outside:
        print(f"⚠️  {f.hz:.4g} Hz is outside the measurement bands, forced")
    return freqs


def _label(freq: fem.FrequencyConfig) -> str:
    return f"{freq.value:g}{'Hz' if freq.interpret_hz else 'rad'}"


def _require_phantom(exp: Experiment) -> synthetic.Phantom:
    if exp.phantom is None:
        raise ConfigError('this command needs a phantom file (run key `phantom`)')
    return exp.phantom


def _background(exp: Experiment) -> fem.MaterialField:
    return fem.MaterialField.uniform(exp.mesh.n_elements, *_require_phantom(exp).background)


def cached_ntd(exp: Experiment, materials: fem.MaterialField, freq: fem.FrequencyConfig, tag: str,
               use_cache: bool) -> ntd.NtDMatrix:
    store = get_store() if use_cache else None
    if store is not None:
        payload = store.get_ntd(exp.digest, freq.omega, tag)
        if payload is not None:
            logger.info(f"ntd cache hit tag={tag} omega={freq.omega:.6g}")
            return ntd.parse_ntd(payload, f"cache:{tag}")
    matrix = ntd.ntd_matrix(exp.mesh, materials, freq, exp.basis, tag=tag)
    if store is not None:
        store.put_ntd(exp.digest, freq.omega, tag, matrix.size, ntd.format_ntd(matrix))
    return matrix


def _out_dir(exp: Experiment) -> Path:
    out = exp.run.resolve(exp.run.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_dict(exp: Experiment) -> dict:
    return exp.run.model_dump(mode='json', exclude={'base_dir', 'output'})


# --------------------------------------------------------------- commands

def cmd_mesh(args) -> List[Path]:
    if args.write_defaults:
        return write_defaults(Path(args.write_defaults))
    if not args.config:
        raise ConfigError('--config is required (or --write-defaults DIR)')
    path = Path(args.config)
    if _config_kind(path) == 'run':
        gc = config.read_run(path).load_geometry()
    else:
        gc = config.read_geometry(path)
    mesh = tag_boundaries(build_plate_mesh(gc.geometry, gc.cell_size), gc.geometry)
    basis = ntd.build_load_basis(mesh)
    print(f"✅ Mesh: {mesh.counts[0]}x{mesh.counts[1]}x{mesh.counts[2]} cells, "
          f"{mesh.n_nodes} nodes, {mesh.n_dofs} dofs")
    print(f"   Dirichlet nodes: {len(mesh.dirichlet_nodes)}, Neumann nodes: {len(mesh.neumann_nodes)}, "
          f"basis loads: {len(basis)}")
    if args.modes:
        materials = fem.MaterialField.uniform(mesh.n_elements, *synthetic.MAKROLON)
        system = fem.assemble(mesh, materials, fem.FrequencyConfig.rad_s(1.0))
        hz = fem.modal_frequencies(system, args.modes) / (2 * np.pi)
        print(f"📊 Lowest modes (background): {', '.join(f'{f:.2f}' for f in hz)} Hz")
    return []


def write_defaults(directory: Path) -> List[Path]:
    """The default plate, both lab phantoms, their run files and the sensor sidecar."""
    gc = config.default_geometry_config()
    paths = [directory / 'plate.geometry', directory / 'center12.phantom', directory / 'two_discs10.phantom',
             directory / 'center12.run', directory / 'two_discs10.run', directory / 'sensors.json']
    config.write_geometry(gc, paths[0])
    config.write_phantom(synthetic.phantom_center_disc(0.12, geometry=gc.geometry), paths[1])
    config.write_phantom(synthetic.phantom_two_discs(0.10, geometry=gc.geometry), paths[2])
    config.write_run(config.RunConfig(
        geometry='plate.geometry', phantom='center12.phantom',
        frequencies=sorted(synthetic.CENTER_DISC_RUNS),
        output='out/center12', sensors='sensors.json',
    ), paths[3])
    config.write_run(config.RunConfig(
        geometry='plate.geometry', phantom='two_discs10.phantom',
        frequencies=[synthetic.TWO_DISC_RUN[0]],
        output='out/two_discs10', sensors='sensors.json',
    ), paths[4])
    pipeline.write_sensor_sidecar(pipeline.default_layout(gc.geometry), paths[5])
    for p in paths:
        print(f"💾 Wrote {p}")
    return paths


def cmd_forward(args) -> List[Path]:
    exp = load_experiment(args)
    materials = synthetic.materialize(_require_phantom(exp), exp.mesh)
    freqs = frequencies(exp.run, args)
    out = _out_dir(exp) / 'forward'
    out.mkdir(parents=True, exist_ok=True)
    nodes = np.unique(np.concatenate([exp.mesh.neumann_nodes, _sensor_nodes(exp)]))
    coords = exp.mesh.nodes[nodes]

    written = []
    for freq in freqs:
        print(f"🚀 Forward solve at {_label(freq)} (omega={freq.omega:.6g} rad/s)")
        solver = fem.ForwardSolver(fem.assemble(exp.mesh, materials, freq))
        loads = [g.scaled(args.amplitude) for g in exp.basis.loads]
        for label, u in zip(exp.basis.description, solver.solve_many(loads)):
            values = u.values[nodes]
            frame = pd.DataFrame({'node': nodes, 'x': coords[:, 0], 'y': coords[:, 1], 'z': coords[:, 2],
                                  'ux': values[:, 0], 'uy': values[:, 1], 'uz': values[:, 2]})
            path = out / f"u_{_label(freq)}_{label}.csv"
            frame.to_csv(path, index=False, float_format='%.17g')
            written.append(path)
        print(f"💾 {len(exp.basis)} displacement traces for {_label(freq)}")
    return written


def _sensor_nodes(exp: Experiment) -> np.ndarray:
    layout = _layout(exp)
    try:
        return layout.node_indices(exp.mesh)
    except ElastoscanError as e:
        logger.warning(f"sensor traces skipped: {e}")
        return np.zeros(0, dtype=int)


def _layout(exp: Experiment) -> pipeline.SensorLayout:
    if exp.run.sensors:
        return pipeline.read_sensor_sidecar(exp.run.resolve(exp.run.sensors))
    return pipeline.default_layout(exp.geometry.geometry)


def _noisy(exp: Experiment, freq: fem.FrequencyConfig, L0: ntd.NtDMatrix, use_cache: bool) -> ntd.NtDMatrix:
    """Synthetic measurement: the phantom's NtD matrix plus seeded noise."""
    phantom = _require_phantom(exp)
    synthetic.check_containment(phantom, exp.mesh)
    L_true = cached_ntd(exp, synthetic.materialize(phantom, exp.mesh), freq, 'true', use_cache)
    noise = synthetic.NoiseModel(delta_target=synthetic.scale_table_delta(exp.run.noise_delta, L0),
                                 seed=exp.run.seed)
    return synthetic.add_noise(L_true, noise)


def cmd_ntd(args) -> List[Path]:
    exp = load_experiment(args)
    background = _background(exp)
    out = _out_dir(exp) / 'ntd'
    written = []
    for freq in frequencies(exp.run, args):
        print(f"🚀 NtD matrices at {_label(freq)}")
        L0 = cached_ntd(exp, background, freq, 'background', not args.no_cache)
        matrices = [('L0', L0)]
        if exp.phantom.inclusions or exp.run.noise_delta > 0:
            matrices.append(('Lmeas', _noisy(exp, freq, L0, not args.no_cache)))
        for name, matrix in matrices:
            path = out / f"{name}_{_label(freq)}.ntd"
            ntd.write_ntd(matrix, path)
            written.append(path)
            print(f"💾 {path.name}: size={matrix.size} norm={matrix.norm:.4e}")
    return written


def _measured(exp: Experiment, freq: fem.FrequencyConfig, L0: ntd.NtDMatrix, use_cache: bool):
    path = exp.run.measured.get(freq.value)
    if path is None:
        return _noisy(exp, freq, L0, use_cache), 'synthetic'
    Lmeas = ntd.read_ntd(exp.run.resolve(path))
    if Lmeas.size != L0.size:
        raise ConfigError(f"measured matrix {path} has size {Lmeas.size}, basis has {L0.size}")
    if not np.isclose(Lmeas.omega, freq.omega, rtol=1e-9):
        logger.warning(f"measured matrix {path} was taken at omega={Lmeas.omega:.6g}, run uses {freq.omega:.6g}")
    return Lmeas, str(path)


def cmd_reconstruct(args) -> List[Path]:
    exp = load_experiment(args)
    phantom = _require_phantom(exp)
    background = _background(exp)
    inclusion = phantom.inclusion_material or synthetic.ALUMINUM
    sweep = [tuple(args.alpha)] if args.alpha else \
        monotonicity.default_alpha_sweep(phantom.background, inclusion, exp.run.alpha_factors)
    truth = synthetic.materialize(phantom, exp.mesh) if phantom.inclusions else None
    out = _out_dir(exp)
    scene = report.scene_dict(exp.geometry.geometry, exp.grid, phantom)
    entries, warnings, written = [], [], []

    for freq in frequencies(exp.run, args):
        print(f"🔍 Reconstructing at {_label(freq)} (omega={freq.omega:.6g} rad/s)")
        L0, solutions = ntd.ntd_matrix_with_solutions(exp.mesh, background, freq, exp.basis)
        Lmeas, source = _measured(exp, freq, L0, not args.no_cache)
        delta = synthetic.scale_table_delta(exp.run.delta, L0)
        params = monotonicity.TestParameters(alpha=sweep[0], delta=delta, M_l=exp.run.ml,
                                             rho_sign=exp.run.rho_sign)
        assumption = None
        if truth is not None:
            assumption = monotonicity.check_assumption(solutions, truth, background, freq)
            if not assumption.holds:
                warnings.append(f"{_label(freq)}: assumption lhs > rhs does not hold")
                print(f"⚠️  Assumption fails at {_label(freq)}; decisions may be wrong")
        result = monotonicity.reconstruct(exp.grid, L0, Lmeas, solutions, params, freq, sweep, assumption)
        if result.no_gap:
            warnings.append(f"{_label(freq)}: no gap in the eigenvalue counts for any alpha; no box accepted")
            print(f"⚠️  No count gap at {_label(freq)}; supply --ml to decide")
        if result.null_data:
            warnings.append(f"{_label(freq)}: measured data equals background within delta (null data)")
        expected = None
        if phantom.inclusions:
            expected = {'inside': synthetic.fully_inside_boxes(phantom, exp.grid),
                        'outside': synthetic.fully_outside_boxes(phantom, exp.grid)}
        entry = report.result_dict(result, exp.grid, freq.hz, exp.run.delta, L0.norm, expected)
        entry['measurement'] = source
        entries.append(entry)
        svg = out / report.svg_name(entry)
        report.write_svg(scene, entry, svg)
        written.append(svg)
        print(f"✅ {_label(freq)}: accepted boxes {result.accepted} (M_l={result.parameters.M_l})")

    path = out / 'report.json'
    report.write_report(report.build_report('reconstruct', _config_dict(exp), scene, entries,
                                            args.reproducible, warnings), path)
    print(f"💾 Report written to {path}")
    return [path] + written


def cmd_ingest(args) -> List[Path]:
    exp = load_experiment(args)
    freqs = frequencies(exp.run, args)
    paths = [Path(p) for p in args.records] or [exp.run.resolve(p) for p in exp.run.records]
    if not paths:
        raise ConfigError('no CSV records given (positional paths or run key `record`)')
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"CSV records not found: {missing}")
    layout = _layout(exp)
    out = _out_dir(exp) / 'ingest'

    records = []
    for p in paths:
        force, disp = pipeline.read_sweep_csv(p)
        records.append((p, pipeline.trim_and_align(force, disp)))
        print(f"📥 Read {p.name}: {len(records[-1][1])} samples after trimming")

    written = []
    for freq in freqs:
        samples = []
        for p, record in records:
            sample = pipeline.fourier_extract(record, freq.hz, args.window)
            path = out / f"spectral_{_label(freq)}_{p.stem}.json"
            pipeline.write_spectral_sample(sample, path)
            written.append(path)
            samples.append(sample)
        L = pipeline.assemble_measured_ntd(samples, exp.basis, layout, exp.mesh)
        path = out / f"Lmeas_{_label(freq)}.ntd"
        ntd.write_ntd(L, path)
        written.append(path)
        print(f"💾 {path.name}: norm={L.norm:.4e} imag/real={L.imag_norm:.2e}")
    return written


def cmd_check(args) -> List[Path]:
    exp = load_experiment(args)
    phantom = _require_phantom(exp)
    background = _background(exp)
    truth = synthetic.materialize(phantom, exp.mesh)
    centre = exp.grid.boxes[exp.grid.index(exp.grid.nx // 2, exp.grid.ny // 2)]
    h = ntd.Perturbation(exp.mesh.aligned_box_mask(centre), *phantom.background)
    checks, status = [], 'pass'

    for freq in frequencies(exp.run, args):
        print(f"🔍 Checking {_label(freq)}")
        _, solutions = ntd.ntd_matrix_with_solutions(exp.mesh, background, freq, exp.basis)
        assumption = monotonicity.check_assumption(solutions, truth, background, freq)
        lower = monotonicity.verify_monotonicity_lower(exp.mesh, truth, background, freq, exp.basis)
        upper = monotonicity.verify_monotonicity_upper(exp.mesh, truth, background, freq, exp.basis)
        convergence = ntd.frechet_convergence_report(exp.mesh, background, freq, exp.basis, h, FRECHET_STEPS)
        slope = ntd.fitted_slope(convergence)
        entry = {
            'frequency_hz': freq.hz,
            'omega': freq.omega,
            'assumption': report.assumption_dict(assumption),
            'lower_violations': lower.violations,
            'upper_violations': upper.violations,
            'lower_slack_min': float(lower.slack.min()),
            'upper_slack_min': float(upper.slack.min()),
            'frechet': convergence.to_dict(orient='records'),
            'frechet_slope': slope if np.isfinite(slope) else None,
        }
        checks.append(entry)
        ok = assumption.holds or not phantom.inclusions
        marker = '✅' if ok and not lower.violations and not upper.violations else '⚠️ '
        if marker != '✅':
            status = 'warn'
        print(f"{marker} {_label(freq)}: assumption lhs={assumption.lhs:.3e} rhs={assumption.rhs:.3e}, "
              f"lower violations={len(lower.violations)}, upper violations={len(upper.violations)}, "
              f"Frechet slope={slope:.2f}")

    modes = fem.modal_frequencies(fem.assemble(exp.mesh, background, fem.FrequencyConfig.rad_s(1.0)), args.modes)
    failure = None
    if args.scan and phantom.inclusions:
        failure = monotonicity.assumption_failure_frequency(exp.mesh, truth, background, exp.basis)
        print(f"📊 Assumption failure frequency: {'none up to 1000 Hz' if failure is None else f'{failure:.1f} Hz'}")

    result = {
        'schema': CHECK_SCHEMA,
        'config': _config_dict(exp),
        'status': status,
        'checks': checks,
        'modal_frequencies_hz': [float(w / (2 * np.pi)) for w in modes],
        'assumption_failure_hz': failure,
    }
    if not args.reproducible:
        result['generated_at'] = datetime.now(timezone.utc).isoformat(timespec='seconds')
    path = _out_dir(exp) / 'check.json'
    report.write_report(result, path)
    print(f"💾 Check report written to {path}")
    return [path]


def cmd_report(args) -> List[Path]:
    data = report.load_report(args.report)
    out = Path(args.out) if args.out else Path(args.report).parent
    written = []
    for entry in data['results']:
        path = out / report.svg_name(entry)
        report.write_svg(data['scene'], entry, path)
        written.append(path)
        print(f"💾 Rendered {path}")
    return written


COMMANDS = {
    'mesh': cmd_mesh,
    'forward': cmd_forward,
    'ntd': cmd_ntd,
    'reconstruct': cmd_reconstruct,
    'ingest': cmd_ingest,
    'check': cmd_check,
    'report': cmd_report,
}


# ----------------------------------------------------------------- parser

def _ml(value: str) -> str:
    if value != 'auto':
        try:
            if int(value) < 0:
                raise ValueError
        except ValueError:
            raise argparse.ArgumentTypeError("--ml takes 'auto' or a non-negative integer")
    return value


def _run_options(p: argparse.ArgumentParser):
    p.add_argument('--config', help='run file')
    p.add_argument('--omega', type=float, help='single frequency replacing the run list')
    p.add_argument('--rad-s', action='store_true', help='read frequencies as rad/s')
    p.add_argument('--force', action='store_true', help='allow frequencies outside the measurement bands')
    p.add_argument('--out', help='output directory')
    p.add_argument('--seed', type=int)
    p.add_argument('--no-cache', action='store_true', help='bypass the NtD matrix cache')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='elastoscan',
                                     description='Linearized monotonicity detection of plate inclusions')
    parser.add_argument('--log-level', default=None)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('mesh', help='build and summarize the mesh')
    p.add_argument('--config', help='geometry or run file')
    p.add_argument('--write-defaults', metavar='DIR', help='write the default configuration files')
    p.add_argument('--modes', type=int, default=0, help='also list the lowest k modal frequencies')

    p = sub.add_parser('forward', help='per-load boundary displacement traces')
    _run_options(p)
    p.add_argument('--amplitude', type=float, default=1.0, help='traction scale')

    p = sub.add_parser('ntd', help='background and measured NtD matrices')
    _run_options(p)
    p.add_argument('--delta', type=float, help='noise threshold relative to the background norm')

    p = sub.add_parser('reconstruct', help='run the monotonicity tests')
    _run_options(p)
    p.add_argument('--alpha', type=float, nargs=3, metavar=('A1', 'A2', 'A3'))
    p.add_argument('--delta', type=float, help='noise threshold relative to the background norm')
    p.add_argument('--ml', type=_ml, help="'auto' or the largest count still inside")
    p.add_argument('--reproducible', action='store_true', help='omit timestamps')

    p = sub.add_parser('ingest', help='CSV sweep records to measured NtD matrices')
    _run_options(p)
    p.add_argument('records', nargs='*', help='CSV files, one per basis load')
    p.add_argument('--window', default='hann')

    p = sub.add_parser('check', help='assumption, monotonicity and derivative checks')
    _run_options(p)
    p.add_argument('--modes', type=int, default=6)
    p.add_argument('--no-scan', dest='scan', action='store_false', help='skip the failure-frequency scan')
    p.add_argument('--reproducible', action='store_true', help='omit timestamps')

    p = sub.add_parser('report', help='re-render SVG grids from a JSON report')
    p.add_argument('report')
    p.add_argument('--out')
    return parser


def _source_digest(args) -> str:
    source = getattr(args, 'config', None) or getattr(args, 'report', None)
    if source and Path(source).is_file():
        return hashlib.sha256(Path(source).read_bytes()).hexdigest()
    return ''


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings.configure_logging(args.log_level)
    store = get_store()
    run_id = store.start_run(args.command, _source_digest(args))
    try:
        written = COMMANDS[args.command](args)
    except ResonanceError as e:
        print(f"❌ Resonance: {e}")
        store.finish_run(run_id, 'resonance')
        return e.exit_code
    except ElastoscanError as e:
        print(f"❌ Error: {e}")
        store.finish_run(run_id, 'failed')
        return e.exit_code
    except ValidationError as e:
        print(f"❌ Invalid configuration: {e}")
        store.finish_run(run_id, 'failed')
        return SchemaError.exit_code
    store.finish_run(run_id, 'ok', str(written[0]) if written else None)
    logger.info(f"run {run_id} finished: {args.command}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
