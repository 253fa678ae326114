import dataclasses
import logging
from typing import List, Optional, Tuple

import numpy as np

import transpillars


logger = logging.getLogger(__name__)


###############################################################################
# Frames and poses
###############################################################################


@dataclasses.dataclass(frozen=True)
class Pose:
    """Rigid BEV transform from sensor to world coordinates"""

    yaw: float = 0.
    x: float = 0.
    y: float = 0.

    def __post_init__(self):
        object.__setattr__(self, 'yaw', transpillars.box.wrap_angle(self.yaw))

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Map [N, 2] sensor coordinates to world coordinates"""
        return np.asarray(xy) @ self.rotation().T + np.array([self.x, self.y])

    def compose(self, other: 'Pose') -> 'Pose':
        """Retrieve the transform that applies other, then this pose"""
        x, y = self.apply(np.array([[other.x, other.y]]))[0]
        return Pose(self.yaw + other.yaw, x, y)

    def inverse(self) -> 'Pose':
        """Retrieve the world-to-sensor transform"""
        x, y = -(self.rotation().T @ np.array([self.x, self.y]))
        return Pose(-self.yaw, x, y)

    def rotation(self) -> np.ndarray:
        """Retrieve the 2x2 rotation matrix"""
        cos, sin = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[cos, -sin], [sin, cos]])


@dataclasses.dataclass
class PointCloudFrame:
    """Timestamped LiDAR sweep in its own sensor coordinates

    Points are rows of (x, y, z, intensity).
    """

    points: np.ndarray
    timestamp: float = 0.
    ego_pose: Pose = dataclasses.field(default_factory=Pose)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.size % 4:
            raise transpillars.errors.DimensionError(
                f'Points of shape {points.shape} are not rows of '
                '(x, y, z, intensity)')
        self.points = points.reshape(-1, 4)
        intensity = self.points[:, 3]
        if not ((intensity >= 0.) & (intensity <= 1.)).all():
            raise transpillars.errors.DimensionError(
                'Intensities must lie in [0, 1], got range '
                f'[{intensity.min()}, {intensity.max()}]')

    def __len__(self) -> int:
        return len(self.points)


def ego_compensate(frame: PointCloudFrame, target_pose: Pose) -> PointCloudFrame:
    """Re-express a frame's points in the target pose's sensor coordinates

    Arguments
        frame
            The frame to compensate
        target_pose
            Pose of the sensor whose coordinates are used

    Returns
        The frame with points mapped by inv(target_pose) * ego_pose
    """
    transform = target_pose.inverse().compose(frame.ego_pose)
    points = frame.points.copy()
    points[:, :2] = transform.apply(points[:, :2])
    return PointCloudFrame(points, frame.timestamp, target_pose)


###############################################################################
# Pillar grid
###############################################################################


@dataclasses.dataclass(frozen=True)
class GridConfig:
    """Pillar grid over the BEV plane"""

    range_min: Tuple[float, float, float] = (-25.6, -25.6, -3.)
    range_max: Tuple[float, float, float] = (25.6, 25.6, 2.)
    voxel_size: float = .8
    max_points_per_pillar: int = 32
    feature_dim: int = 32

    def __post_init__(self):
        for axis, extent in zip('xy', self.extent[:2]):
            cells = extent / self.voxel_size
            if extent <= 0 or abs(cells - round(cells)) > 1e-6 or round(cells) < 1:
                raise transpillars.errors.ConfigurationError(
                    f'{axis} extent {extent} is not a positive multiple of '
                    f'voxel size {self.voxel_size}')
        if self.extent[2] <= 0:
            raise transpillars.errors.ConfigurationError(
                f'Empty z range {self.range_min[2]}..{self.range_max[2]}')
        if self.max_points_per_pillar < 1 or self.feature_dim < 1:
            raise transpillars.errors.ConfigurationError(
                'max_points_per_pillar and feature_dim must be positive')

    @property
    def extent(self) -> Tuple[float, float, float]:
        return tuple(
            high - low for low, high in zip(self.range_min, self.range_max))

    @property
    def grid_shape(self) -> Tuple[int, int]:
        """(rows, cols) of the pseudo-image"""
        return (
            int(round(self.extent[1] / self.voxel_size)),
            int(round(self.extent[0] / self.voxel_size)))


@dataclasses.dataclass
class PillarSet:
    """Non-empty pillars with their augmented points

    Points are padded to max_points_per_pillar; counts gives the valid prefix.
    """

    indices: np.ndarray
    points: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def mask(self) -> np.ndarray:
        """Retrieve the [P, T] validity mask of the padded points"""
        return np.arange(self.points.shape[1])[None, :] < self.counts[:, None]


# Augmented point layout: x, y, z, intensity, offsets to pillar mean (3),
# offsets to pillar center (2)
POINT_FEATURES = 9


def voxelize(
    frame: PointCloudFrame,
    cfg: GridConfig,
    seed: Optional[int] = None) -> PillarSet:
    """Group points into pillars and augment them

    Cells are half-open: row = floor((y - y_min) / voxel),
    col = floor((x - x_min) / voxel). Pillars beyond capacity keep the first
    points of a seeded shuffle, or of the input order without a seed.

    Arguments
        frame
            The point cloud
        cfg
            The grid
        seed
            Seed of the overflow shuffle

    Returns
        The non-empty pillars in ascending flat-index order
    """
    rows, cols = cfg.grid_shape
    capacity = cfg.max_points_per_pillar
    points = frame.points
    low, high = np.array(cfg.range_min), np.array(cfg.range_max)
    keep = np.all((points[:, :3] >= low) & (points[:, :3] < high), axis=1)
    points = points[keep]

    col = np.floor((points[:, 0] - low[0]) / cfg.voxel_size).astype(np.int64)
    row = np.floor((points[:, 1] - low[1]) / cfg.voxel_size).astype(np.int64)
    valid = (col >= 0) & (col < cols) & (row >= 0) & (row < rows)
    points, row, col = points[valid], row[valid], col[valid]

    if not len(points):
        return PillarSet(
            np.zeros((0, 2), dtype=np.int64),
            np.zeros((0, capacity, POINT_FEATURES)),
            np.zeros(0, dtype=np.int64))

    # Stable grouping after an optional seeded shuffle
    flat = row * cols + col
    order = np.arange(len(points))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(points))
    order = order[np.argsort(flat[order], kind='stable')]
    flat, points = flat[order], points[order]

    unique, starts, inverse = np.unique(
        flat, return_index=True, return_inverse=True)
    rank = np.arange(len(flat)) - starts[inverse]
    kept = rank < capacity
    points, inverse, rank = points[kept], inverse[kept], rank[kept]
    counts = np.bincount(inverse, minlength=len(unique))

    # Pillar means over kept points
    sums = np.zeros((len(unique), 3))
    np.add.at(sums, inverse, points[:, :3])
    means = sums / counts[:, None]

    indices = np.stack([unique // cols, unique % cols], axis=1)
    centers = np.stack([
        low[0] + (indices[:, 1] + .5) * cfg.voxel_size,
        low[1] + (indices[:, 0] + .5) * cfg.voxel_size], axis=1)

    augmented = np.concatenate([
        points,
        points[:, :3] - means[inverse],
        points[:, :2] - centers[inverse]], axis=1)
    padded = np.zeros((len(unique), capacity, POINT_FEATURES))
    padded[inverse, rank] = augmented
    return PillarSet(indices, padded, counts)


###############################################################################
# Pillar encoder and backbone
###############################################################################


@dataclasses.dataclass
class MultiScaleFeatures:
    """Backbone outputs; f1 is the smallest (coarsest) scale"""

    f1: 'transpillars.tensor.Tensor'
    f2: 'transpillars.tensor.Tensor'
    f3: 'transpillars.tensor.Tensor'
    cls1: 'transpillars.tensor.Tensor'
    cls2: 'transpillars.tensor.Tensor'
    cls3: 'transpillars.tensor.Tensor'

    def maps(self) -> List['transpillars.tensor.Tensor']:
        """Feature maps ordered coarse to fine"""
        return [self.f1, self.f2, self.f3]

    def scores(self) -> List['transpillars.tensor.Tensor']:
        """Classification maps ordered coarse to fine"""
        return [self.cls1, self.cls2, self.cls3]


class PillarEncoder(transpillars.nn.Module):
    """Shared per-point linear layer, ReLU and max over each pillar"""

    def __init__(self, cfg: GridConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.linear = transpillars.nn.Linear(POINT_FEATURES, cfg.feature_dim, rng)

    def forward(self, pillars: PillarSet) -> 'transpillars.tensor.Tensor':
        return encode_pillars(pillars, self.cfg, self)


def encode_pillars(
    pillars: PillarSet,
    cfg: GridConfig,
    params: PillarEncoder) -> 'transpillars.tensor.Tensor':
    """Encode pillars and scatter them into a pseudo-image

    Arguments
        pillars
            Output of voxelize
        cfg
            The grid
        params
            The pillar encoder

    Returns
        Pseudo-image of shape [C, H, W]; empty cells are zero
    """
    rows, cols = cfg.grid_shape
    channels = cfg.feature_dim
    canvas = transpillars.tensor.Tensor(np.zeros((rows * cols, channels)))
    if len(pillars):
        count, capacity, _ = pillars.points.shape
        points = transpillars.tensor.Tensor(
            pillars.points.reshape(-1, POINT_FEATURES))
        features = params.linear(points).relu()

        # Padding rows contribute zero, which never exceeds a ReLU output
        features = features * pillars.mask().reshape(-1, 1)
        features = features.reshape(count, capacity, channels).max(axis=1)
        flat = pillars.indices[:, 0] * cols + pillars.indices[:, 1]
        canvas = transpillars.tensor.scatter(canvas, flat, features)
    return canvas.transpose(1, 0).reshape(channels, rows, cols)


class Backbone(transpillars.nn.Module):
    """Three stride-2 convolution stages with per-scale classification maps"""

    def __init__(
        self,
        in_channels: int,
        widths: Tuple[int, int, int],
        num_classes: int,
        rng: np.random.Generator) -> None:
        """Create backbone

        Arguments
            in_channels
                Pseudo-image channels
            widths
                Channels of f3, f2, f1 (fine to coarse)
            num_classes
                Channels of each classification map
            rng
                Random generator for initialization
        """
        self.widths = tuple(widths)
        self.stages = []
        previous = in_channels
        for width in self.widths:
            self.stages.append(Stage(previous, width, rng))
            previous = width
        self.heads = [
            transpillars.nn.Conv2d(width, num_classes, 1, rng)
            for width in self.widths]

    def forward(self, pseudo_image) -> MultiScaleFeatures:
        return backbone_fpn(pseudo_image, self)


class Stage(transpillars.nn.Module):
    """Stride-2 convolution followed by two stride-1 convolutions"""

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator):
        self.convs = [
            transpillars.nn.Conv2d(in_channels, width, 3, rng, 2, 1),
            transpillars.nn.Conv2d(width, width, 3, rng, 1, 1),
            transpillars.nn.Conv2d(width, width, 3, rng, 1, 1)]

    def forward(self, x):
        for conv in self.convs:
            x = conv(x).relu()
        return x


def backbone_fpn(pseudo_image, params: Backbone) -> MultiScaleFeatures:
    """Produce the three-scale feature pyramid

    Arguments
        pseudo_image
            Tensor of shape [C, H, W] with H and W divisible by 8
        params
            The backbone

    Returns
        f3 at H/2, f2 at H/4, f1 at H/8, with classification maps
    """
    _, height, width = pseudo_image.shape
    if height % 8 or width % 8:
        raise transpillars.errors.DimensionError(
            f'backbone_fpn: pseudo-image {pseudo_image.shape} is not divisible '
            'by 8')
    features = []
    x = pseudo_image
    for stage in params.stages:
        x = stage(x)
        features.append(x)
    scores = [head(f) for head, f in zip(params.heads, features)]
    f3, f2, f1 = features
    cls3, cls2, cls1 = scores
    return MultiScaleFeatures(f1, f2, f3, cls1, cls2, cls3)
