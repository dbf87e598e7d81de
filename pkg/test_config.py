"""
Tests for the text configuration files and the shipped defaults.
"""
from pathlib import Path

import pytest

from elastoscan import config, synthetic
from elastoscan.errors import ConfigError, SchemaError

CONFIGS = Path(__file__).parent / 'configs'

RUN_TEXT = """elastoscan-run v1
geometry = plate.geometry
phantom = center12.phantom   # lab phantom
frequency = 21.0 41.0
frequency = 55.4
delta = 1e-6
ml = 3
grid = 4 6
record = a.csv
record = b.csv
measured = 21 L21.ntd
"""


class TestEntries:

    def test_comments_and_repeats(self):
        entries = config.parse_entries('elastoscan-run v1\n# note\nrecord = a\n\nrecord = b  # c\n', 'run')
        assert entries['record'] == [(3, ['a']), (5, ['b'])]

    def test_wrong_header(self):
        with pytest.raises(SchemaError) as info:
            config.parse_entries('elastoscan-geometry v1\n', 'run')
        assert info.value.line == 1

    def test_missing_equals(self):
        with pytest.raises(SchemaError) as info:
            config.parse_entries('elastoscan-run v1\ngeometry plate\n', 'run')
        assert info.value.line == 2


class TestGeometry:

    def test_shipped_plate(self):
        gc = config.read_geometry(CONFIGS / 'plate.geometry')
        default = config.default_geometry_config()
        assert gc.cell_size == default.cell_size
        assert gc.geometry.lengths == pytest.approx(default.geometry.lengths)
        assert len(gc.geometry.sensor_points) == 44
        assert [p.face for p in gc.geometry.neumann_patches] == ['y-', 'y+']

    def test_formatted_text_parses_back(self):
        gc = config.default_geometry_config()
        assert config.parse_geometry(config.format_geometry(gc)) == gc

    def test_bad_neumann_face(self):
        text = 'elastoscan-geometry v1\nlength_x = 1\nlength_y = 1\nthickness = 0.1\nneumann = q+ 0 0 1 1\n'
        with pytest.raises(SchemaError) as info:
            config.parse_geometry(text)
        assert info.value.line == 5

    def test_wrong_arity(self):
        text = 'elastoscan-geometry v1\nlength_x = 1\nlength_y = 1\nthickness = 0.1\ndirichlet = 0 0 0\n'
        with pytest.raises(SchemaError) as info:
            config.parse_geometry(text)
        assert info.value.line == 5

    def test_missing_required(self):
        with pytest.raises(SchemaError):
            config.parse_geometry('elastoscan-geometry v1\nlength_x = 1\nlength_y = 1\n')

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            config.read_geometry(tmp_path / 'none.geometry')


class TestPhantom:

    def test_shipped_center_disc(self):
        phantom = config.read_phantom(CONFIGS / 'center12.phantom')
        reference = synthetic.phantom_center_disc(0.12)
        assert phantom.background == pytest.approx(reference.background)
        assert phantom.inclusion_material == pytest.approx(synthetic.ALUMINUM)
        assert phantom.inclusions[0].shape.diameter == pytest.approx(0.12)

    def test_background_only(self):
        phantom = config.parse_phantom('elastoscan-phantom v1\nbackground = 1 2 3\n')
        assert phantom.inclusions == []
        assert phantom.inclusion_material is None

    def test_shapes_need_material(self):
        with pytest.raises(SchemaError):
            config.parse_phantom('elastoscan-phantom v1\nbackground = 1 2 3\ndisc = 0.1 0.1 0.05\n')

    def test_box_and_sign(self):
        text = ('elastoscan-phantom v1\nbackground = 1 1 1\ninclusion = 2 2 2\nrho_sign = -1\n'
                'box = 0 0 0 0.1 0.1 0.01\n')
        phantom = config.parse_phantom(text)
        assert phantom.rho_sign == -1
        assert phantom.inclusions[0].psi == (1.0, 1.0, 1.0)

    def test_bad_rho_sign(self):
        with pytest.raises(SchemaError) as info:
            config.parse_phantom('elastoscan-phantom v1\nbackground = 1 1 1\nrho_sign = 2\n')
        assert info.value.line == 3


class TestRun:

    def test_parse(self):
        run = config.parse_run(RUN_TEXT, base_dir='/data/exp')
        assert run.frequencies == [21.0, 41.0, 55.4]
        assert run.delta == 1e-6
        assert run.ml == 3
        assert run.grid == (4, 6)
        assert run.records == ['a.csv', 'b.csv']
        assert run.measured == {21.0: 'L21.ntd'}
        assert run.rho_sign == -1
        assert run.resolve(run.geometry) == Path('/data/exp/plate.geometry')
        assert run.resolve('/abs/x') == Path('/abs/x')

    def test_ml_auto_default(self):
        run = config.parse_run('elastoscan-run v1\ngeometry = g\n')
        assert run.ml is None
        assert run.alpha_factors == [1e-3, 1e-2, 1e-1]

    def test_bad_ml(self):
        with pytest.raises(SchemaError) as info:
            config.parse_run('elastoscan-run v1\ngeometry = g\nml = many\n')
        assert info.value.line == 3

    def test_unknown_key(self):
        with pytest.raises(SchemaError) as info:
            config.parse_run('elastoscan-run v1\ngeometry = g\ncolour = red\n')
        assert info.value.line == 3

    def test_duplicate_scalar(self):
        with pytest.raises(SchemaError) as info:
            config.parse_run('elastoscan-run v1\ngeometry = g\ndelta = 1\ndelta = 2\n')
        assert info.value.line == 4

    def test_shipped_runs_reference_existing_files(self):
        for name in ('center12.run', 'two_discs10.run'):
            run = config.read_run(CONFIGS / name)
            run.check_files()
            assert run.ml is None
            assert run.load_phantom() is not None

    def test_missing_reference(self, tmp_path):
        path = tmp_path / 'x.run'
        path.write_text('elastoscan-run v1\ngeometry = nowhere.geometry\n')
        with pytest.raises(ConfigError):
            config.read_run(path).check_files()

    def test_write_keeps_fields(self, tmp_path):
        run = config.parse_run(RUN_TEXT)
        path = tmp_path / 'copy.run'
        config.write_run(run, path)
        again = config.read_run(path)
        assert again.model_dump(exclude={'base_dir'}) == run.model_dump(exclude={'base_dir'})
