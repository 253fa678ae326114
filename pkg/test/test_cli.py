import csv

import pytest

import transpillars
from transpillars.__main__ import main


###############################################################################
# Utilities
###############################################################################


def run(command, config_file, out, *extra):
    """Run a command on the tiny configuration"""
    return main([
        command,
        '--config', str(config_file),
        '--out', str(out),
        '--set', 'data.train_sequences=1',
        '--set', 'data.val_sequences=1',
        '--quiet',
        *extra])


###############################################################################
# Test commands
###############################################################################


def test_pipeline(config_file, tmp_path):
    """Generate, train, evaluate and dump attention"""
    assert run('gen', config_file, tmp_path) == 0
    assert (tmp_path / 'data' / 'train' / 'seq_0000' / 'gt.csv').exists()
    assert (tmp_path / 'data' / 'val' / 'seq_0000' / 'frame_0003.bin').exists()
    saved = transpillars.config.load(tmp_path / 'data' / 'config.yaml')
    assert saved.data.train_sequences == 1

    assert run('train', config_file, tmp_path) == 0
    assert (tmp_path / 'checkpoint_full' / 'manifest.txt').exists()
    assert (tmp_path / 'config.yaml').exists()

    assert run('eval', config_file, tmp_path) == 0
    with open(tmp_path / 'report.csv', newline='') as file:
        rows = list(csv.DictReader(file))
    assert rows[0]['subset'] == 'all' and rows[0]['metric'] == 'mAP'
    assert 0. <= float(rows[0]['value']) <= 1.

    sequence = tmp_path / 'data' / 'val' / 'seq_0000'
    assert run('attn-dump', config_file, tmp_path, '--sequence', str(sequence)) == 0
    assert (tmp_path / 'attention' / 'attention.csv').exists()
    assert (tmp_path / 'attention' / 'attention_scale2.ppm').exists()


def test_train_single_stage(config_file, tmp_path):
    """A base-stage checkpoint evaluates the base model"""
    assert run('gen', config_file, tmp_path) == 0
    assert run('train', config_file, tmp_path, '--stage', 'base') == 0
    assert (tmp_path / 'checkpoint_base' / 'manifest.txt').exists()
    assert not (tmp_path / 'checkpoint_full').exists()
    assert run('eval', config_file, tmp_path) == 0

    # A single-frame model has no cross-frame attention to dump
    sequence = tmp_path / 'data' / 'val' / 'seq_0000'
    assert run(
        'attn-dump', config_file, tmp_path,
        '--sequence', str(sequence),
        '--set', 'ablation.frames=1') == 4


###############################################################################
# Test errors
###############################################################################


@pytest.mark.parametrize('command,extra', [
    ('gen', ['--set', 'model.depth=2']),
    ('gen', ['--set', 'model.layers']),
    ('eval', []),
    ('attn-dump', [])])
def test_configuration_errors(config_file, tmp_path, command, extra):
    """Configuration problems exit with status two"""
    assert run(command, config_file, tmp_path, *extra) == 2


@pytest.mark.parametrize('name,text', [
    ('config.json', '{}'),
    ('config.yaml', 'model: [1,'),
    ('config.yaml', '- 1\n- 2\n')])
def test_bad_config_files(tmp_path, name, text):
    """Unreadable configuration files exit with status two"""
    file = tmp_path / name
    file.write_text(text)
    assert run('gen', file, tmp_path / 'out') == 2
    assert not (tmp_path / 'out').exists()


def test_unknown_command():
    """Unknown commands are usage errors"""
    with pytest.raises(SystemExit):
        main(['fit'])
