import math

import pytest

import transpillars
from transpillars.config import RunConfig


###############################################################################
# Test loading
###############################################################################


def test_load(config):
    """The tiny configuration overrides the defaults it names"""
    assert config.grid.grid_shape == (32, 32)
    assert config.model.layers == 2
    assert config.frames.n_frames == 4
    assert config.optim.base_lr == RunConfig().optim.base_lr
    assert config.evaluation.bands[-1][1] == math.inf
    assert config.model.widths == (16, 16, 16)
    assert RunConfig().model.widths == (64, 128, 256)
    assert RunConfig().grid.grid_shape == (64, 64)


def test_save_load(config, tmp_path):
    """Configurations survive a save and load"""
    transpillars.config.save(config, tmp_path / 'config.yaml')
    loaded = transpillars.config.load(tmp_path / 'config.yaml')
    assert loaded == config
    assert transpillars.config.dumps(loaded) == transpillars.config.dumps(config)


def test_hash(config, config_file):
    """The hash depends on the values only"""
    again = transpillars.config.load(config_file)
    assert transpillars.config.config_hash(again) == \
        transpillars.config.config_hash(config)
    changed = transpillars.config.override(config, ['seed=1'])
    assert transpillars.config.config_hash(changed) != \
        transpillars.config.config_hash(config)
    assert len(transpillars.config.config_hash(config)) == 64


def test_bad_files(tmp_path):
    """Only well-formed YAML files are configuration files"""
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.config.load(tmp_path / 'config.json')

    file = tmp_path / 'config.yaml'
    file.write_text('model: {layers: 2\n')
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.config.load(file)


###############################################################################
# Test overrides
###############################################################################


def test_override(config):
    """Dotted assignments replace single values"""
    updated = transpillars.config.override(
        config, ['model.layers=3', 'ablation.attention=baseline-deform',
                 'grid.range_min=[-6.4, -6.4, -3.0]'])
    assert updated.model.layers == 3
    assert updated.ablation.attention == 'baseline-deform'
    assert updated.grid.range_min == (-6.4, -6.4, -3.)
    assert config.model.layers == 2


@pytest.mark.parametrize('assignment', [
    'model.depth=3',
    'layers=3',
    'model.layers',
    'seed.value=1',
    'ablation.frames=all',
    'model.widths=[16, 16'])
def test_override_errors(config, assignment):
    """Unknown keys and invalid values are configuration errors"""
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.config.override(config, [assignment])


###############################################################################
# Test validation
###############################################################################


def test_unknown_keys():
    """Unknown sections and keys are rejected"""
    with pytest.raises(transpillars.errors.ConfigurationError):
        RunConfig.from_dict({'models': {}})
    with pytest.raises(transpillars.errors.ConfigurationError):
        RunConfig.from_dict({'model': {'depth': 2}})
    with pytest.raises(transpillars.errors.ConfigurationError):
        RunConfig.from_dict({'model': 3})


def test_consistency():
    """Sections must agree with each other"""
    with pytest.raises(transpillars.errors.ConfigurationError):
        RunConfig.from_dict({'model': {'num_classes': 2}})
    with pytest.raises(transpillars.errors.ConfigurationError):
        RunConfig.from_dict({'scene': {'n_frames': 2}})
    with pytest.raises(transpillars.errors.ConfigurationError):
        RunConfig.from_dict({'precision': 'float16'})
    assert RunConfig.from_dict(None) == RunConfig()
