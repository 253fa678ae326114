import numpy as np
import pytest

import transpillars
from transpillars.pillars import GridConfig, PointCloudFrame, Pose


###############################################################################
# Test grid and poses
###############################################################################


def test_grid_shape(grid):
    """The tiny grid is 32 x 32"""
    assert grid.grid_shape == (32, 32)
    assert GridConfig().grid_shape == (64, 64)


def test_grid_not_integral():
    """Extents that are not multiples of the voxel size are rejected"""
    with pytest.raises(transpillars.errors.ConfigurationError):
        GridConfig(range_min=(-10., -10., -3.), range_max=(10., 10., 2.),
                   voxel_size=.3)


def test_pose_inverse():
    """A pose composed with its inverse is the identity"""
    pose = Pose(.7, 3., -2.)
    identity = pose.compose(pose.inverse())
    assert identity.yaw == pytest.approx(0.)
    assert identity.x == pytest.approx(0.)
    assert identity.y == pytest.approx(0.)
    points = np.array([[1., 2.], [-4., .5]])
    np.testing.assert_allclose(pose.inverse().apply(pose.apply(points)), points)


def test_ego_compensate():
    """A world point observed from two poses compensates to one location"""
    world = np.array([[5., 1.]])
    current, past = Pose(.3, 2., 0.), Pose(0., 0., 0.)
    observed = np.column_stack([past.inverse().apply(world), [[0., 1.]]])
    compensated = transpillars.pillars.ego_compensate(
        PointCloudFrame(observed, 0., past), current)
    np.testing.assert_allclose(
        compensated.points[:, :2], current.inverse().apply(world))
    assert compensated.ego_pose == current


def test_frame_validation():
    """Frames hold rows of four values with intensities in [0, 1]"""
    assert len(PointCloudFrame(np.zeros(8))) == 2
    with pytest.raises(transpillars.errors.DimensionError):
        PointCloudFrame(np.zeros((2, 3)))
    for intensity in (-.1, 1.5, np.nan):
        with pytest.raises(transpillars.errors.DimensionError):
            PointCloudFrame([[0., 0., 0., intensity]])


###############################################################################
# Test voxelization
###############################################################################


def test_voxelize_cells(grid):
    """Points land in half-open cells of the grid"""
    points = np.array([
        [-12.8, -12.8, 0., 1.],
        [-12.0, -12.8, 0., 1.],
        [12.79, 12.79, 0., 1.],
        [12.8, 0., 0., 1.],
        [0., 0., 5., 1.]])
    pillars = transpillars.pillars.voxelize(PointCloudFrame(points), grid)
    np.testing.assert_array_equal(pillars.indices, [[0, 0], [0, 1], [31, 31]])
    np.testing.assert_array_equal(pillars.counts, [1, 1, 1])


def test_voxelize_capacity(grid):
    """Pillars keep at most max_points_per_pillar points"""
    points = np.tile([[.1, .1, 0., 1.]], (20, 1))
    points[:, 3] = np.arange(20) / 20.
    pillars = transpillars.pillars.voxelize(PointCloudFrame(points), grid)
    assert pillars.counts.tolist() == [grid.max_points_per_pillar]
    np.testing.assert_array_equal(
        pillars.points[0, :, 3], np.arange(grid.max_points_per_pillar) / 20.)

    shuffled = transpillars.pillars.voxelize(PointCloudFrame(points), grid, seed=1)
    again = transpillars.pillars.voxelize(PointCloudFrame(points), grid, seed=1)
    np.testing.assert_array_equal(shuffled.points, again.points)


def test_voxelize_augmentation(grid):
    """Augmented features hold offsets to the mean and to the pillar center"""
    points = np.array([[.1, .2, 0., 1.], [.3, .6, 1., 1.]])
    pillars = transpillars.pillars.voxelize(PointCloudFrame(points), grid)
    features = pillars.points[0, :2]
    np.testing.assert_allclose(features[:, 4:7], points[:, :3] - points[:, :3].mean(0))
    np.testing.assert_allclose(features[:, 7:9], points[:, :2] - [.4, .4])


def test_voxelize_empty(grid):
    """An empty frame yields no pillars and a zero pseudo-image"""
    pillars = transpillars.pillars.voxelize(PointCloudFrame(np.zeros((0, 4))), grid)
    assert len(pillars) == 0
    encoder = transpillars.pillars.PillarEncoder(grid, np.random.default_rng(0))
    image = encoder(pillars)
    assert image.shape == (grid.feature_dim, 32, 32)
    assert not image.data.any()


###############################################################################
# Test encoder and backbone
###############################################################################


def test_pseudo_image(grid, rng):
    """Only occupied cells are non-zero"""
    points = np.array([[.1, .1, 0., 1.], [-5., 7., -1., .5]])
    pillars = transpillars.pillars.voxelize(PointCloudFrame(points), grid)
    encoder = transpillars.pillars.PillarEncoder(grid, rng)
    image = encoder(pillars).data
    occupied = np.abs(image).sum(axis=0) > 0
    assert set(zip(*np.nonzero(occupied))) <= {tuple(i) for i in pillars.indices}


def test_backbone_scales(grid, rng):
    """The pyramid has strides 2, 4 and 8"""
    backbone = transpillars.pillars.Backbone(grid.feature_dim, (8, 12, 16), 2, rng)
    image = transpillars.tensor.Tensor(rng.standard_normal((grid.feature_dim, 32, 32)))
    features = backbone(image)
    assert [f.shape for f in features.maps()] == [(16, 4, 4), (12, 8, 8), (8, 16, 16)]
    assert [s.shape for s in features.scores()] == [(2, 4, 4), (2, 8, 8), (2, 16, 16)]
    with pytest.raises(transpillars.errors.DimensionError):
        backbone(transpillars.tensor.Tensor(np.zeros((grid.feature_dim, 12, 12))))


def test_point_order_invariance(grid, rng):
    """Shuffling points leaves the pseudo-image unchanged"""
    points = np.column_stack([
        rng.uniform(-12., 12., (200, 2)),
        rng.uniform(-2., 1., 200),
        rng.uniform(0., 1., 200)])
    encoder = transpillars.pillars.PillarEncoder(grid, rng)
    image = encoder(transpillars.pillars.voxelize(PointCloudFrame(points), grid))
    shuffled = encoder(transpillars.pillars.voxelize(
        PointCloudFrame(points[rng.permutation(200)]), grid))
    np.testing.assert_allclose(shuffled.data, image.data, rtol=1e-5, atol=1e-6)
