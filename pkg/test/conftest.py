from pathlib import Path

import numpy as np
import pytest

import transpillars


###############################################################################
# Slow tests
###############################################################################


def pytest_addoption(parser):
    parser.addoption(
        '--slow',
        action='store_true',
        help='Run the desk-scale acceptance tests')


def pytest_configure(config):
    config.addinivalue_line(
        'markers', 'slow: desk-scale acceptance test, run with --slow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--slow'):
        return
    skip = pytest.mark.skip(reason='needs --slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


###############################################################################
# Test fixtures
###############################################################################


@pytest.fixture(scope='session')
def config_file():
    """Retrieve the path of the tiny run configuration"""
    return path('tiny.yaml')


@pytest.fixture(scope='session')
def config(config_file):
    """Retrieve the tiny run configuration used for testing"""
    return transpillars.config.load(config_file)


@pytest.fixture(scope='session')
def grid(config):
    """Retrieve the 32x32 pillar grid"""
    return config.grid


@pytest.fixture(scope='session')
def sequence(config):
    """Retrieve a synthetic sequence as (frames, world boxes)"""
    return transpillars.synth.generate_sequence(config.scene)


@pytest.fixture(scope='session')
def sample(config, sequence):
    """Retrieve the sequence as a model input with sensor-frame boxes"""
    frames, boxes = sequence
    return transpillars.train.make_sample(frames, boxes, config.frames.n_frames)


@pytest.fixture(scope='session')
def desk(tmp_path_factory):
    """Retrieve the desk-scale configuration with train and val samples"""
    config = transpillars.config.override(
        transpillars.config.RunConfig(),
        ['data.train_sequences=200', 'data.val_sequences=64'])
    directory = tmp_path_factory.mktemp('desk')
    splits = []
    for split, count in enumerate(
            (config.data.train_sequences, config.data.val_sequences)):
        transpillars.synth.generate_split(
            directory / str(split), config.scene, count, config.seed, split)
        splits.append(transpillars.train.load_samples(
            directory / str(split), config.frames.n_frames))
    return config, *splits


@pytest.fixture
def model(config):
    """Retrieve a freshly initialized tiny network"""
    return transpillars.train.build_model(config)


@pytest.fixture
def rng():
    """Retrieve a seeded random generator"""
    return np.random.default_rng(0)


@pytest.fixture
def double():
    """Run a test under 64-bit precision"""
    with transpillars.tensor.precision(np.float64):
        yield
    transpillars.tensor.clear_tape()


###############################################################################
# Utilities
###############################################################################


def path(file):
    """Resolve the file path of a test asset"""
    return Path(__file__).parent / 'assets' / file
