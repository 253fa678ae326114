import dataclasses

import numpy as np
import pytest

import transpillars
from transpillars.synth import SceneConfig


###############################################################################
# Test generation
###############################################################################


def test_deterministic(config):
    """The scene seed determines every point and box"""
    frames, boxes = transpillars.synth.generate_sequence(config.scene)
    again, again_boxes = transpillars.synth.generate_sequence(config.scene)
    for frame, other in zip(frames, again):
        np.testing.assert_array_equal(frame.points, other.points)
    assert boxes == again_boxes

    other, _ = transpillars.synth.generate_sequence(
        dataclasses.replace(config.scene, seed=config.scene.seed + 1))
    assert not all(
        a.points.shape == b.points.shape and np.array_equal(a.points, b.points)
        for a, b in zip(frames, other))


def test_frames_and_poses(config, sequence):
    """Frames are spaced dt apart and the ego moves at constant velocity"""
    frames, boxes = sequence
    scene = config.scene
    assert len(frames) == len(boxes) == scene.n_frames
    for index, frame in enumerate(frames):
        assert frame.timestamp == pytest.approx(index * scene.dt)
        assert frame.ego_pose.yaw == 0.
        assert frame.ego_pose.x == pytest.approx(
            scene.ego_velocity[0] * index * scene.dt)
        assert frame.points.shape[1] == 4
        assert all(box.frame == index for box in boxes[index])


def test_boxes_move_with_velocity(config, sequence):
    """Object tracks follow their constant velocity"""
    _, boxes = sequence
    first = {box.object_id: box for box in boxes[0]}
    assert 0 < len(first) <= config.scene.n_objects
    for box in boxes[-1]:
        start = first[box.object_id]
        elapsed = (box.frame - start.frame) * config.scene.dt
        np.testing.assert_allclose(
            box.center, np.add(start.center, np.multiply(start.velocity, elapsed)))
        assert box.dims == start.dims
        assert box.speed == pytest.approx(np.hypot(*box.velocity))


def test_points_in_sensor_frame(sequence):
    """Point counts of a box are returns inside its footprint"""
    frames, boxes = sequence
    for frame, frame_boxes in zip(frames, boxes):
        world = frame.ego_pose.apply(frame.points[:, :2])
        total = 0
        for box in frame_boxes:
            local = transpillars.pillars.Pose(box.yaw, *box.center).inverse().apply(world)
            inside = np.all(np.abs(local) <= np.array(box.dims) / 2. + 1e-3, axis=1)
            assert inside.sum() >= box.num_points_in_box
            total += box.num_points_in_box
        assert total <= len(frame.points)
        assert (frame.points[:, 2] >= -transpillars.synth.SENSOR_HEIGHT - 1e-6).all()
        assert ((frame.points[:, 3] >= .1) & (frame.points[:, 3] <= 1.)).all()


def test_sample_box_faces_sensor():
    """Only sides facing the sensor return points"""
    scene = SceneConfig(density=200.)
    box = np.array([10., 0., 4., 2., 0.])
    points = transpillars.synth.sample_box(
        box, 1.6, np.zeros(2), scene, np.random.default_rng(0))
    top = np.isclose(points[:, 2], 1.6 - transpillars.synth.SENSOR_HEIGHT)
    sides = points[~top]
    assert len(sides) > 0
    np.testing.assert_allclose(sides[:, 0], 8.)
    assert (np.abs(points[top, 1]) <= 1.).all()


def test_scene_configuration():
    """Invalid scene parameters are configuration errors"""
    with pytest.raises(transpillars.errors.ConfigurationError):
        SceneConfig(dt=0.)
    with pytest.raises(transpillars.errors.ConfigurationError):
        SceneConfig(num_classes=3)
    with pytest.raises(transpillars.errors.ConfigurationError):
        SceneConfig(static_fraction=1.5)


###############################################################################
# Test occlusion
###############################################################################


def test_shadowed():
    """Points behind a footprint are hidden and points in front are not"""
    occluder = np.array([[5., 0., 2., 2., 0.]])
    points = np.array([[10., 0.], [3., 0.], [5., 5.], [5., 0.], [10., .5]])
    np.testing.assert_array_equal(
        transpillars.synth.shadowed(points, occluder, np.zeros(2)),
        [True, False, False, True, True])

    # A footprint never hides its own returns
    np.testing.assert_array_equal(
        transpillars.synth.shadowed(
            points, occluder, np.zeros(2), owners=np.zeros(5, dtype=int)),
        [False] * 5)


def test_shadowed_rotated():
    """A rotated footprint hides the rays that cross it"""
    occluder = np.array([[0., 5., 4., .5, np.pi / 2]])
    points = np.array([[0., 10.], [3., 10.], [10., 0.]])
    np.testing.assert_array_equal(
        transpillars.synth.shadowed(points, occluder, np.zeros(2)),
        [True, False, False])


def test_occlusion_mask():
    """The mask keeps visible points with all their columns"""
    points = np.array([[10., 0., 0., 1.], [3., 0., 0., .5]])
    visible = transpillars.synth.occlusion_mask(
        points, np.array([[5., 0., 2., 2., 0.]]), np.zeros(2))
    np.testing.assert_array_equal(visible, points[1:])
    assert len(transpillars.synth.occlusion_mask(
        points, np.zeros((0, 5)), np.zeros(2))) == 2


###############################################################################
# Test sequence files
###############################################################################


def test_write_read_sequence(sequence, tmp_path):
    """Sequences survive a save and load"""
    frames, boxes = sequence
    directory = transpillars.synth.write_sequence(tmp_path / 'seq', frames, boxes)
    assert (directory / 'gt.csv').exists()
    assert (directory / 'frame_0000.bin').exists()

    loaded, loaded_boxes = transpillars.synth.read_sequence(directory)
    assert len(loaded) == len(frames)
    for frame, other in zip(frames, loaded):
        np.testing.assert_array_equal(other.points, frame.points.astype(np.float32))
        assert other.timestamp == frame.timestamp
        assert other.ego_pose.x == frame.ego_pose.x
    assert loaded_boxes == boxes


def test_generate_split(config, tmp_path):
    """Splits hold one directory per sequence with derived seeds"""
    paths = transpillars.synth.generate_split(tmp_path, config.scene, 2, seed=5)
    assert [path.name for path in paths] == ['seq_0000', 'seq_0001']
    split = transpillars.synth.read_split(tmp_path)
    assert len(split) == 2
    first, second = (frames[0].points for frames, _ in split)
    assert first.shape != second.shape or not np.array_equal(first, second)

    transpillars.synth.generate_split(tmp_path / 'again', config.scene, 1, seed=5)
    again, _ = transpillars.synth.read_split(tmp_path / 'again')[0]
    np.testing.assert_array_equal(again[0].points, first)
