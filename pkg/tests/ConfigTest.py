import pytest

from _errors import ConfigError
from config import PipelineConfig, load_config


def _write(tmp_path, text):
    path = tmp_path / 'config.toml'
    path.write_text(text)
    return path


def test_defaults_without_file():
    config = load_config(None)
    assert config.deformable_enabled
    assert config.matcher == 'builtin'
    cfg = config.to_registration_config()
    assert [level.downsample for level in cfg.levels] == [4, 2, 1]
    assert cfg.resolutions == (100, 200, 300, 400, 500)


def test_flat_document(tmp_path):
    path = _write(tmp_path, '\n'.join([
        'angles = [0.0, 90.0]',
        'resolutions = [128]',
        'scale_tolerance = 0.2',
        'direction = "shg_to_he"',
        'select_by = "matches"',
        'deformable_enabled = false',
        'matcher = "external:python matcher.py --fast"',
        'level_theta = [0.5, 0.25]',
        'level_iterations = [10, 5]',
        'level_downsample = [2, 1]',
        'level_smoothing = [1.0, 0.0]',
        'min_inliers = 12',
    ]))
    config = load_config(path)
    cfg = config.to_registration_config()
    assert cfg.angles == (0.0, 90.0)
    assert cfg.scale_tolerance == 0.2
    assert cfg.direction == 'shg_to_he'
    assert cfg.select_by == 'matches'
    assert not config.deformable_enabled
    assert [(level.theta, level.iterations, level.downsample) for level in cfg.levels] == [(0.5, 10, 2), (0.25, 5, 1)]
    assert [level.smoothing for level in cfg.levels] == [1.0, 0.0]
    assert cfg.min_inliers == 12


def test_level_downsample_defaults_follow_level_count():
    cfg = PipelineConfig(level_iterations=[1, 1]).to_registration_config()
    assert [level.downsample for level in cfg.levels] == [2, 1]


def test_unknown_key_is_named(tmp_path):
    with pytest.raises(ConfigError, match="unknown key 'angels'"):
        load_config(_write(tmp_path, 'angels = [0.0]\n'))


def test_invalid_value_names_key(tmp_path):
    with pytest.raises(ConfigError, match='resolutions'):
        load_config(_write(tmp_path, 'resolutions = [16]\n'))
    with pytest.raises(ConfigError, match='level_mi_bins'):
        load_config(_write(tmp_path, 'level_mi_bins = [1, 16, 16]\n'))
    with pytest.raises(ConfigError, match='matcher'):
        load_config(_write(tmp_path, 'matcher = "superpoint"\n'))


def test_level_lists_must_agree(tmp_path):
    with pytest.raises(ConfigError, match='differ in length'):
        load_config(_write(tmp_path, 'level_theta = [0.1, 0.1]\nlevel_iterations = [5]\n'))


def test_coarse_to_fine_order_enforced(tmp_path):
    with pytest.raises(ConfigError, match='level_downsample'):
        load_config(_write(tmp_path, 'level_downsample = [1, 2]\n'))


def test_bad_toml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match='invalid TOML'):
        load_config(_write(tmp_path, 'angles = [0.0,\n'))
    with pytest.raises(ConfigError, match='file not found'):
        load_config(tmp_path / 'absent.toml')
