import csv
import dataclasses

import numpy as np
import pytest

import transpillars
from transpillars.pillars import Pose
from transpillars.synth import GroundTruthBox


###############################################################################
# Utilities
###############################################################################


def samples(config, count, seed):
    """Generate training samples from derived scene seeds"""
    return [
        transpillars.train.make_sample(
            *transpillars.synth.generate_sequence(
                dataclasses.replace(config.scene, seed=seed + index)),
            config.frames.n_frames)
        for index in range(count)]


def metrics(directory):
    """Read the metrics log"""
    with open(directory / 'metrics.csv', newline='') as file:
        return list(csv.reader(file))


###############################################################################
# Test samples
###############################################################################


def test_to_sensor():
    """Centers, headings and velocities rotate into the sensor frame"""
    box = GroundTruthBox(0, 0, 0, (1., 2.), (4., 2.), np.pi / 2, (0., 3.), 5)
    converted, = transpillars.train.to_sensor([box], Pose(np.pi / 2, 1., 0.))
    np.testing.assert_allclose(converted.center, (2., 0.), atol=1e-12)
    assert converted.yaw == pytest.approx(0.)
    np.testing.assert_allclose(converted.velocity, (3., 0.), atol=1e-12)
    assert converted.dims == box.dims
    assert converted.num_points_in_box == 5


def test_make_sample(config, sequence):
    """The last frame of a sequence is the current frame"""
    frames, boxes = sequence
    sample = transpillars.train.make_sample(frames, boxes, 2)
    assert sample.sequence.frames[0] is frames[-1]
    assert sample.sequence.frames[1] is frames[-2]
    assert len(sample.boxes) == 2
    assert [box.object_id for box in sample.truth] == \
        [box.object_id for box in boxes[-1]]

    # The ego moves along x without turning
    offset = frames[-1].ego_pose.x
    np.testing.assert_allclose(
        sample.truth[0].center,
        np.subtract(boxes[-1][0].center, (offset, 0.)), atol=1e-9)
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.train.make_sample(frames[:1], boxes[:1], 2)


def test_sample_targets(model, sample):
    """Targets are built for each window"""
    targets = transpillars.train.sample_targets(model, sample)
    assert len(targets) == 4
    assert targets[0].anchors.labels.shape == (len(model.anchors),)
    assert len(targets[0].centers) == 3
    assert targets[0].anchors.num_positive >= min(len(sample.truth), 1)


def test_load_samples(config, tmp_path):
    """Split directories load as samples"""
    transpillars.synth.generate_split(tmp_path, config.scene, 2, config.seed)
    loaded = transpillars.train.load_samples(tmp_path, config.frames.n_frames)
    assert len(loaded) == 2
    assert len(loaded[0].sequence.frames) == config.frames.n_frames


###############################################################################
# Test schedule
###############################################################################


def test_cosine_lr():
    """The learning rate anneals from its maximum to its minimum"""
    assert transpillars.optim.cosine_lr(0, 10, 1.) == pytest.approx(1.)
    assert transpillars.optim.cosine_lr(5, 10, 1.) == pytest.approx(.5)
    assert transpillars.optim.cosine_lr(10, 10, 1., .1) == pytest.approx(.1)


def test_clip_grad_norm():
    """Gradients are rescaled to the maximum norm"""
    tensor = transpillars.tensor.Tensor(np.zeros(2), requires_grad=True)
    tensor.grad = np.array([3., 4.])
    assert transpillars.optim.clip_grad_norm([tensor], 1.) == pytest.approx(5.)
    assert np.linalg.norm(tensor.grad) == pytest.approx(1., rel=1e-5)


###############################################################################
# Test training
###############################################################################


def test_train(config, tmp_path):
    """Both stages log metrics and write checkpoints"""
    train, val = samples(config, 2, 10), samples(config, 1, 20)
    model = transpillars.train.train(config, train, val, tmp_path)
    rows = metrics(tmp_path)
    assert tuple(rows[0]) == transpillars.train.METRIC_COLUMNS
    assert [row[:2] for row in rows[1:]] == [['base', '0'], ['full', '0']]
    assert all(0. <= float(row[5]) <= 1. for row in rows[1:])
    assert float(rows[1][3]) == 0.
    assert float(rows[2][3]) > 0.

    for name in ('checkpoint', 'checkpoint_base', 'checkpoint_full'):
        assert (tmp_path / name / 'manifest.txt').exists()
    checkpoint = transpillars.checkpoint.load(tmp_path / 'checkpoint_full')
    assert checkpoint.config_hash == transpillars.config.config_hash(config)
    for name, array in model.state_dict().items():
        np.testing.assert_array_equal(checkpoint.parameters[name], array)


def test_resume(config, tmp_path):
    """Resuming after the first stage reproduces an uninterrupted run"""
    train = samples(config, 2, 10)
    transpillars.train.train(config, train, None, tmp_path / 'whole')
    transpillars.train.train(
        config, train, None, tmp_path / 'split', stages=('base',))
    assert len(metrics(tmp_path / 'split')) == 2
    transpillars.train.train(config, train, None, tmp_path / 'split', resume=True)
    assert metrics(tmp_path / 'split') == metrics(tmp_path / 'whole')

    changed = dataclasses.replace(config, seed=1)
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.train.train(
            changed, train, None, tmp_path / 'split', resume=True)


def test_divergence(config, tmp_path, monkeypatch):
    """A non-finite loss stops training"""
    losses = transpillars.model.TransPillars.losses

    def diverge(self, *args, **kwargs):
        bundle = losses(self, *args, **kwargs)
        return dataclasses.replace(
            bundle, l_total=bundle.l_total * float('nan'))

    monkeypatch.setattr(transpillars.model.TransPillars, 'losses', diverge)
    with pytest.raises(transpillars.errors.DivergenceError) as error:
        transpillars.train.train(config, samples(config, 1, 10), None, tmp_path)
    assert error.value.stage == 'base'
    assert error.value.epoch == 0
    assert error.value.step == 0
    transpillars.tensor.clear_tape()


def test_train_errors(config, sample, tmp_path):
    """Unknown stages and empty datasets are configuration errors"""
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.train.train(config, [sample], None, tmp_path, stages=('fine',))
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.train.train(config, [], None, tmp_path)


###############################################################################
# Test ablation
###############################################################################


def test_ablate(config, tmp_path):
    """The sweep writes one row per variant and seed plus medians"""
    quick = dataclasses.replace(
        config, optim=dataclasses.replace(config.optim, full_epochs=0))
    train, val = samples(quick, 1, 10), samples(quick, 1, 20)
    path = transpillars.train.ablate(
        quick, train, val, [0, 1], tmp_path, axes=['attention'])
    with open(path, newline='') as file:
        rows = list(csv.DictReader(file))
    assert [(row['variant'], row['seed']) for row in rows] == [
        ('qk', '0'), ('qk', '1'), ('baseline-deform', '0'), ('baseline-deform', '1')]
    assert int(rows[0]['parameters']) != int(rows[2]['parameters'])
    with open(tmp_path / 'ablation_summary.csv', newline='') as file:
        summary = list(csv.DictReader(file))
    assert [row['variant'] for row in summary] == ['qk', 'baseline-deform']


@pytest.mark.slow
def test_ablation_trends(desk, tmp_path):
    """Median mAP over three seeds follows the ablation orderings"""
    config, train, val = desk
    transpillars.train.ablate(
        config, train, val, [0, 1, 2], tmp_path,
        axes=['frames', 'attention', 'aggregation'])
    with open(tmp_path / 'ablation_summary.csv', newline='') as file:
        summary = {
            (row['axis'], row['variant']):
                (float(row['median_mAP']), float(row['median_mAP_moving']))
            for row in csv.DictReader(file)}

    single, concat, full = (
        summary['frames', variant] for variant in ('1', 'concat-only', 'full'))
    assert single[0] < concat[0] < full[0]
    assert full[1] - single[1] >= .05

    assert summary['attention', 'qk'][1] >= \
        summary['attention', 'baseline-deform'][1]

    # Ties within half a point are allowed
    hierarchical, separate, one = (
        summary['aggregation', variant][0]
        for variant in ('hierarchical', 'separate', 'single-scale'))
    assert hierarchical >= separate - .005
    assert separate >= one - .005
