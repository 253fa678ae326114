import dataclasses

import numpy as np
import pytest

import transpillars
from transpillars.tensor import Tensor


###############################################################################
# Utilities
###############################################################################


def variant(config, **ablation):
    """Build the tiny model with some ablation switches changed"""
    return transpillars.train.build_model(dataclasses.replace(
        config, ablation=dataclasses.replace(config.ablation, **ablation)))


def losses(model, sample, config, base_only=False):
    transpillars.tensor.clear_tape()
    output = model(sample.sequence, base_only=base_only)
    targets = transpillars.train.sample_targets(model, sample)
    return output, model.losses(output, targets, config.loss)


###############################################################################
# Test forward pass
###############################################################################


def test_forward_shapes(model, sample, config):
    """The full model predicts one row per anchor after every layer"""
    with transpillars.tensor.no_grad():
        output = model(sample.sequence)
    anchors = 16 * 16 * config.model.num_classes
    assert output.prediction.cls.shape == (anchors, config.model.num_classes)
    assert output.prediction.box.shape == (anchors, 6)
    assert output.prediction.direction.shape == (anchors, 2)
    assert len(output.base) == 4
    assert len(output.layers) == config.model.layers
    assert output.aggregation.order == [0, 1, 2]
    assert output.layers[-1] is output.prediction
    assert model.anchors.shape == (anchors, 5)


def test_head_channels(model, config):
    """The head concatenates three upsampled maps"""
    assert model.head.channels == 3 * config.model.upsample_channels


def test_single_window_is_base_model(model, sample):
    """One input window bypasses aggregation"""
    current = transpillars.model.SequenceInput(sample.sequence.frames[:1])
    with transpillars.tensor.no_grad():
        single = model(current)
        base = model(sample.sequence, base_only=True)
    assert single.aggregation is None
    assert not single.layers
    np.testing.assert_array_equal(single.prediction.cls.data, base.prediction.cls.data)
    np.testing.assert_array_equal(single.prediction.box.data, base.prediction.box.data)


@pytest.mark.parametrize('frames,windows', [('1', 1), ('concat-only', 1), ('full', 4)])
def test_frame_modes(config, sample, frames, windows):
    """Frame modes select the number of windows and whether to aggregate"""
    model = variant(config, frames=frames)
    plan = model.plan(sample.sequence)
    assert len(plan.windows()) == windows
    assert bool(model.fams) == (frames == 'full')
    if frames == 'concat-only':
        merged = plan.windows()[0]
        assert len(merged) == sum(len(frame) for frame in sample.sequence.frames)


@pytest.mark.parametrize('aggregation', transpillars.model.AGGREGATIONS)
@pytest.mark.parametrize('attention', transpillars.model.ATTENTIONS)
def test_ablation_variants_run(config, sample, aggregation, attention):
    """Every aggregation and attention variant produces finite losses"""
    model = variant(config, aggregation=aggregation, attention=attention)
    output, bundle = losses(model, sample, config)
    assert all(np.isfinite(value) for value in bundle.values().values())
    assert len(output.layers) == config.model.layers
    if aggregation == 'single-scale':
        assert len(model.fams) == 1
        assert model.fams[0].d == model.head.channels
    else:
        assert len(model.fams) == 3
        assert (model.fams[1].fusion is None) == (aggregation == 'separate')
    transpillars.tensor.clear_tape()


###############################################################################
# Test losses
###############################################################################


def test_total_loss(model, sample, config):
    """The total loss is exactly the base loss plus the aggregation loss"""
    _, bundle = losses(model, sample, config)
    assert bundle.l_total.data == bundle.l_base.data + bundle.l_aggr.data
    assert bundle.l_aggr.item() > 0.
    assert set(bundle.components) == {
        'base/0', 'base/1', 'base/2', 'base/3', 'layer/0', 'layer/1'}
    transpillars.tensor.clear_tape()


def test_base_only_loss(model, sample, config):
    """Stage one trains the base model on the current window only"""
    output, bundle = losses(model, sample, config, base_only=True)
    assert len(output.base) == 1
    assert bundle.l_aggr.item() == 0.
    assert bundle.l_total.item() == bundle.l_base.item()
    transpillars.tensor.clear_tape()


def test_gradients_reach_every_parameter(model, sample, config):
    """Every parameter of the full model receives a gradient"""
    model.zero_grad()
    _, bundle = losses(model, sample, config)
    bundle.l_total.backward()
    missing = [name for name, p in model.named_parameters() if p.grad is None]
    assert not missing
    transpillars.tensor.clear_tape()


def test_attention_gradients(config, sample, double):
    """End-to-end gradients of attention parameters agree with differences"""
    config = dataclasses.replace(config, precision='float64')
    model = variant(config, attention='qk')
    targets = transpillars.train.sample_targets(model, sample)
    fam = model.fams[-1]

    def loss(_):
        output = model(sample.sequence)
        return model.losses(output, targets, config.loss).l_total

    for tensor in (fam.cross_attention[0].value.weight, fam.self_attention[-1].key.bias):
        assert transpillars.gradcheck.finite_diff_check(
            loss, tensor, indices=range(0, tensor.size, max(1, tensor.size // 6)),
            floor=1e-4) < 1e-3


def test_no_positives(model, sample, config):
    """Samples without objects normalize by one and are flagged"""
    empty = transpillars.train.Sample(sample.sequence, [[] for _ in sample.boxes])
    _, bundle = losses(model, empty, config)
    assert bundle.no_positives
    assert np.isfinite(bundle.l_total.item())
    transpillars.tensor.clear_tape()


###############################################################################
# Test targets
###############################################################################


def test_assign_targets():
    """Thresholds split anchors and each box keeps its best anchor"""
    anchors = np.array([
        [0., 0., 4., 2., 0.],
        [.5, 0., 4., 2., 0.],
        [2., 0., 4., 2., 0.],
        [20., 0., 4., 2., 0.]])
    boxes = np.array([[0., 0., 4., 2., 0.], [30., 0., 2., 1., np.pi]])
    targets = transpillars.model.assign_targets(
        anchors, np.zeros(4, dtype=int), boxes, np.zeros(2, dtype=int))

    # IoUs with the first box: 1, 7/9, 1/3, 0
    np.testing.assert_array_equal(targets.labels, [1, 1, 0, 0])
    assert targets.num_positive == 2
    np.testing.assert_allclose(targets.residuals[0], 0., atol=1e-12)
    np.testing.assert_array_equal(targets.directions[:2], [0, 0])


def test_assign_targets_forced_match():
    """A box below the positive threshold still gets its best anchor"""
    anchors = np.array([[0., 0., 4., 2., 0.], [10., 0., 4., 2., 0.]])
    boxes = np.array([[.8, .4, 3., 1.5, 0.]])
    targets = transpillars.model.assign_targets(
        anchors, np.zeros(2, dtype=int), boxes, np.zeros(1, dtype=int))
    np.testing.assert_array_equal(targets.labels, [1, 0])


def test_center_targets(grid):
    """Each center marks its cell at every scale"""
    boxes = np.array([[0.1, 0.1, 4., 2., 0.], [-12.7, 12.7, 4., 2., 0.]])
    maps = transpillars.model.center_targets(
        boxes, np.zeros(2, dtype=int), grid, 1, [(4, 4), (16, 16)])
    assert maps[0][0, 2, 2] == 1. and maps[0][0, 3, 0] == 1.
    assert maps[0].sum() == 2.
    assert maps[1][0, 8, 8] == 1. and maps[1][0, 15, 0] == 1.


###############################################################################
# Test decoding
###############################################################################


def test_decode_and_nms():
    """Confident anchors decode to boxes and duplicates are suppressed"""
    anchors = np.array([
        [0., 0., 4., 2., 0.],
        [.2, 0., 4., 2., 0.],
        [8., 0., 4., 2., 0.]])
    logits = np.array([[3.], [2.], [-4.]])
    direction = np.array([[0., 1.], [1., 0.], [1., 0.]])
    head = transpillars.model.HeadOutput(
        None, None, None,
        Tensor(logits), Tensor(np.zeros((3, 6))), Tensor(direction))
    detections = transpillars.model.decode_and_nms(head, anchors, .3, .5)
    assert len(detections) == 1
    box = detections[0]
    assert box.score == pytest.approx(1. / (1. + np.exp(-3.)))
    np.testing.assert_allclose(box.center, (0., 0.))

    # The direction classifier flips the heading into the other half-plane
    assert box.yaw == pytest.approx(np.pi)
    assert box.direction_bin == 1
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.model.decode_and_nms(head, anchors, 0., .5)


def test_predict(model, sample):
    """Prediction yields sorted boxes without touching the tape"""
    transpillars.tensor.clear_tape()
    detections = model.predict(sample.sequence)
    assert len(transpillars.tensor.tape()) == 0
    scores = [box.score for box in detections]
    assert scores == sorted(scores, reverse=True)
    assert len(detections) <= model.config.max_detections


###############################################################################
# Test configuration
###############################################################################


def test_model_configuration():
    """Invalid dimensions are configuration errors"""
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.model.ModelConfig(widths=(12, 16, 16), heads=8)
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.model.ModelConfig(ratio=1.5)
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.model.FrameConfig(n_frames=4, window_size=3)
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.model.AblationConfig(attention='dense')
    assert transpillars.model.AblationConfig(frames=1).frames == '1'
