import csv
import dataclasses
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import tqdm

import transpillars


logger = logging.getLogger(__name__)


# Sensor height above the ground plane in meters
SENSOR_HEIGHT = 1.6

# Box heights in meters
HEIGHTS = (1.6, 1.7)
OCCLUDER_HEIGHT = 2.5

# Ground-truth file columns
GT_COLUMNS = (
    'frame', 'object_id', 'class', 'x', 'y', 'l', 'w', 'yaw', 'speed', 'vx',
    'vy', 'num_points')


###############################################################################
# Scene types
###############################################################################


@dataclasses.dataclass
class SceneConfig:
    """Synthetic scene parameters"""

    n_objects: int = 8
    num_classes: int = 1

    # ((l_min, l_max), (w_min, w_max)) per class: vehicle, cyclist
    class_dims: Tuple = (((3.5, 4.8), (1.6, 2.)), ((1.5, 2.), (.5, .8)))
    speed_range: Tuple[float, float] = (2., 8.)
    static_fraction: float = .3
    dt: float = .4
    n_frames: int = 4

    # Points per square meter at 10 meters, falling off as (10 / r) ** falloff
    density: float = 40.
    falloff: float = 2.
    top_fraction: float = .3
    occluder_probability: float = .5
    max_occluders: int = 3
    ego_velocity: Tuple[float, float] = (2., 0.)
    spawn_radius: Tuple[float, float] = (4., 20.)
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise transpillars.errors.ConfigurationError(
                f'Frame interval must be positive, got {self.dt}')
        if self.density <= 0 or self.falloff < 0 or self.top_fraction < 0:
            raise transpillars.errors.ConfigurationError(
                'Point densities must be positive')
        if self.n_frames < 1 or self.n_objects < 0:
            raise transpillars.errors.ConfigurationError(
                'Need at least one frame and a nonnegative object count')
        if not 1 <= self.num_classes <= len(self.class_dims):
            raise transpillars.errors.ConfigurationError(
                f'{self.num_classes} classes but {len(self.class_dims)} '
                'dimension ranges')
        if not 0. <= self.static_fraction <= 1. or not (
                0. <= self.occluder_probability <= 1.):
            raise transpillars.errors.ConfigurationError(
                'static_fraction and occluder_probability must lie in [0, 1]')


@dataclasses.dataclass
class GroundTruthBox:
    """Annotated object in world coordinates"""

    frame: int
    object_id: int
    class_id: int
    center: Tuple[float, float]
    dims: Tuple[float, float]
    yaw: float
    velocity: Tuple[float, float] = (0., 0.)
    num_points_in_box: int = 0

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))

    def array(self) -> np.ndarray:
        """Retrieve the box as (x, y, l, w, yaw)"""
        return np.array([*self.center, *self.dims, self.yaw])


@dataclasses.dataclass
class SceneObject:
    """Constant-velocity box"""

    object_id: int
    class_id: int
    center: np.ndarray
    dims: Tuple[float, float]
    yaw: float
    velocity: np.ndarray
    height: float

    def box(self, time: float) -> np.ndarray:
        """Retrieve (x, y, l, w, yaw) at a time"""
        x, y = self.center + self.velocity * time
        return np.array([x, y, *self.dims, self.yaw])


###############################################################################
# Generation
###############################################################################


def generate_sequence(
    cfg: SceneConfig) -> Tuple[
        List['transpillars.pillars.PointCloudFrame'],
        List[List[GroundTruthBox]]]:
    """Simulate a LiDAR sequence of moving boxes

    Arguments
        cfg
            Scene parameters; the seed determines the output

    Returns
        frames
            Point clouds in sensor coordinates, oldest first
        boxes
            Ground truth of each frame in world coordinates
    """
    rng = np.random.default_rng(cfg.seed)
    objects, occluders = _layout(cfg, rng)

    frames, boxes = [], []
    for index in range(cfg.n_frames):
        time = index * cfg.dt
        ego = np.array(cfg.ego_velocity) * time
        pose = transpillars.pillars.Pose(0., *ego)
        scene = [o.box(time) for o in objects] + [o.box(time) for o in occluders]
        heights = [o.height for o in objects] + [o.height for o in occluders]

        points, owners = [], []
        for owner, (box, height) in enumerate(zip(scene, heights)):
            sampled = sample_box(box, height, ego, cfg, rng)
            points.append(sampled)
            owners.append(np.full(len(sampled), owner))
        points = np.concatenate(points) if points else np.zeros((0, 4))
        owners = np.concatenate(owners) if owners else np.zeros(0, dtype=int)

        visible = ~shadowed(points, np.array(scene).reshape(-1, 5), ego, owners)
        points, owners = points[visible], owners[visible]
        counts = np.bincount(owners, minlength=len(scene))

        points[:, :2] = pose.inverse().apply(points[:, :2])
        frames.append(transpillars.pillars.PointCloudFrame(points, time, pose))
        boxes.append([
            GroundTruthBox(
                index,
                o.object_id,
                o.class_id,
                tuple(scene[i][:2]),
                o.dims,
                o.yaw,
                tuple(o.velocity),
                int(counts[i]))
            for i, o in enumerate(objects)])
    return frames, boxes


def sample_box(
    box: np.ndarray,
    height: float,
    sensor: np.ndarray,
    cfg: SceneConfig,
    rng: np.random.Generator) -> np.ndarray:
    """Sample returns from the sensor-facing sides and the top of a box

    Arguments
        box
            (x, y, l, w, yaw) in world coordinates
        height
            Box height in meters
        sensor
            Sensor (x, y) in world coordinates
        cfg
            Scene parameters
        rng
            Random generator

    Returns
        World-coordinate points of shape [N, 4]
    """
    corners = transpillars.box.corners(box)[0]
    distance = max(np.hypot(*(box[:2] - sensor)), 1.)
    density = cfg.density * (10. / distance) ** cfg.falloff
    ground = -SENSOR_HEIGHT

    points = []
    for k in range(4):
        start, end = corners[k], corners[(k + 1) % 4]
        edge = end - start

        # Outward normal of a counter-clockwise polygon
        normal = np.array([edge[1], -edge[0]])
        if np.dot(normal, sensor - (start + end) / 2.) <= 0:
            continue
        count = rng.poisson(density * np.hypot(*edge) * height)
        t = rng.random(count)
        xy = start + t[:, None] * edge
        z = ground + rng.random(count) * height
        points.append(np.column_stack([xy, z, rng.uniform(.1, 1., count)]))

    count = rng.poisson(density * box[2] * box[3] * cfg.top_fraction)
    local = (rng.random((count, 2)) - .5) * box[2:4]
    cos, sin = np.cos(box[4]), np.sin(box[4])
    xy = local @ np.array([[cos, sin], [-sin, cos]]) + box[:2]
    points.append(np.column_stack([
        xy, np.full(count, ground + height), rng.uniform(.1, 1., count)]))
    return np.concatenate(points)


def occlusion_mask(
    points: np.ndarray,
    occluders: np.ndarray,
    ego_position: np.ndarray) -> np.ndarray:
    """Drop points whose ray from the ego crosses an occluder footprint

    Arguments
        points
            Points of shape [N, >= 2] in the occluders' coordinates
        occluders
            Footprints (x, y, l, w, yaw) of shape [K, 5]
        ego_position
            Ray origin (x, y)

    Returns
        The visible points
    """
    points = np.asarray(points)
    return points[~shadowed(points, occluders, ego_position)]


def shadowed(
    points: np.ndarray,
    occluders: np.ndarray,
    ego_position: np.ndarray,
    owners: Optional[np.ndarray] = None,
    tolerance: float = 1e-6) -> np.ndarray:
    """Flag points whose ray enters a footprint strictly before the point

    Arguments
        points
            Points of shape [N, >= 2]
        occluders
            Footprints of shape [K, 5]
        ego_position
            Ray origin (x, y)
        owners
            Optional footprint index of each point; a footprint never
            shadows its own points
        tolerance
            Ray-parameter margin below the point

    Returns
        Boolean mask of shape [N]
    """
    points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    occluders = np.asarray(occluders, dtype=np.float64).reshape(-1, 5)
    origin = np.asarray(ego_position, dtype=np.float64)[:2]
    result = np.zeros(len(points), dtype=bool)
    for index, (x, y, length, width, yaw) in enumerate(occluders):
        cos, sin = np.cos(yaw), np.sin(yaw)
        rotation = np.array([[cos, -sin], [sin, cos]])
        start = (origin - [x, y]) @ rotation
        direction = (points[:, :2] - [x, y]) @ rotation - start

        # Liang-Barsky clipping of each segment against the footprint
        enter = np.zeros(len(points))
        leave = np.ones(len(points))
        hit = np.ones(len(points), dtype=bool)
        for axis, half in enumerate((length / 2., width / 2.)):
            delta = direction[:, axis]
            parallel = np.abs(delta) < 1e-12
            hit &= ~parallel | (np.abs(start[axis]) <= half)
            with np.errstate(divide='ignore', invalid='ignore'):
                low = (-half - start[axis]) / delta
                high = (half - start[axis]) / delta
            enter = np.where(parallel, enter, np.maximum(enter, np.minimum(low, high)))
            leave = np.where(parallel, leave, np.minimum(leave, np.maximum(low, high)))
        hit &= enter <= leave
        blocked = hit & (enter < 1. - tolerance)
        if owners is not None:
            blocked &= owners != index
        result |= blocked
    return result


###############################################################################
# Sequence files
###############################################################################


def write_sequence(
    directory,
    frames: List['transpillars.pillars.PointCloudFrame'],
    boxes: List[List[GroundTruthBox]]) -> Path:
    """Save a sequence as point files, headers and a ground-truth table

    Arguments
        directory
            The sequence directory to create
        frames
            Point clouds, oldest first
        boxes
            Ground truth of each frame

    Returns
        The sequence directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, frame in enumerate(frames):
        stem = directory / f'frame_{index:04d}'
        frame.points.astype('<f4').tofile(stem.with_suffix('.bin'))
        pose = frame.ego_pose
        with open(stem.with_suffix('.txt'), 'w') as file:
            file.write(f'timestamp {float(frame.timestamp)!r}\n')
            file.write(
                f'ego_pose {float(pose.yaw)!r} {float(pose.x)!r} '
                f'{float(pose.y)!r}\n')

    with open(directory / 'gt.csv', 'w', newline='') as file:
        writer = csv.writer(file)
        writer.writerow(GT_COLUMNS)
        for frame_boxes in boxes:
            for box in frame_boxes:
                writer.writerow([
                    box.frame, box.object_id, box.class_id,
                    *(repr(float(v)) for v in box.center),
                    *(repr(float(v)) for v in box.dims),
                    repr(float(box.yaw)),
                    repr(box.speed),
                    *(repr(float(v)) for v in box.velocity),
                    box.num_points_in_box])
    return directory


def read_sequence(directory) -> Tuple[
        List['transpillars.pillars.PointCloudFrame'],
        List[List[GroundTruthBox]]]:
    """Load a sequence saved by write_sequence"""
    directory = Path(directory)
    frames = []
    for path in sorted(directory.glob('frame_*.bin')):
        header = {}
        with open(path.with_suffix('.txt')) as file:
            for line in file:
                key, *values = line.split()
                header[key] = [float(value) for value in values]
        points = np.fromfile(path, dtype='<f4').reshape(-1, 4)
        frames.append(transpillars.pillars.PointCloudFrame(
            points,
            header['timestamp'][0],
            transpillars.pillars.Pose(*header['ego_pose'])))

    boxes = [[] for _ in frames]
    with open(directory / 'gt.csv', newline='') as file:
        for row in csv.DictReader(file):
            frame = int(row['frame'])
            boxes[frame].append(GroundTruthBox(
                frame,
                int(row['object_id']),
                int(row['class']),
                (float(row['x']), float(row['y'])),
                (float(row['l']), float(row['w'])),
                float(row['yaw']),
                (float(row['vx']), float(row['vy'])),
                int(row['num_points'])))
    return frames, boxes


def generate_split(
    directory,
    cfg: SceneConfig,
    count: int,
    seed: int,
    split: int = 0) -> List[Path]:
    """Generate and save sequences with seeds derived from (seed, split, index)

    Arguments
        directory
            Output directory; sequences go to seq_XXXX subdirectories
        cfg
            Scene parameters; the seed field is replaced per sequence
        count
            Number of sequences
        seed
            Run seed
        split
            Split identifier mixed into the sequence seeds

    Returns
        The sequence directories
    """
    paths = []
    for index in tqdm.tqdm(range(count), desc='generating', disable=count < 2):
        scene_seed = int(np.random.SeedSequence(
            [seed, split, index]).generate_state(1)[0])
        frames, boxes = generate_sequence(
            dataclasses.replace(cfg, seed=scene_seed))
        paths.append(write_sequence(
            Path(directory) / f'seq_{index:04d}', frames, boxes))
    logger.info('wrote %d sequences to %s', count, directory)
    return paths


def read_split(directory) -> List[Tuple[list, list]]:
    """Load every sequence of a split directory"""
    return [
        read_sequence(path)
        for path in sorted(Path(directory).glob('seq_*'))]


###############################################################################
# Utilities
###############################################################################


def _layout(cfg: SceneConfig, rng: np.random.Generator):
    """Place objects and occluders without overlap at time zero"""
    inner, outer = cfg.spawn_radius
    placed = []

    def place(length, width):
        radius = np.hypot(length, width) / 2.
        for _ in range(100):
            distance = np.sqrt(rng.uniform(inner ** 2, outer ** 2))
            angle = rng.uniform(-np.pi, np.pi)
            center = distance * np.array([np.cos(angle), np.sin(angle)])
            if all(np.hypot(*(center - c)) > radius + r + .5 for c, r in placed):
                placed.append((center, radius))
                return center
        return None

    objects = []
    for object_id in range(cfg.n_objects):
        class_id = int(rng.integers(cfg.num_classes))
        (l_min, l_max), (w_min, w_max) = cfg.class_dims[class_id]
        dims = (rng.uniform(l_min, l_max), rng.uniform(w_min, w_max))
        yaw = rng.uniform(-np.pi, np.pi)
        speed = 0. if rng.random() < cfg.static_fraction else rng.uniform(
            *cfg.speed_range)
        center = place(*dims)
        if center is None:
            continue
        objects.append(SceneObject(
            object_id,
            class_id,
            center,
            dims,
            transpillars.box.wrap_angle(yaw),
            speed * np.array([np.cos(yaw), np.sin(yaw)]),
            HEIGHTS[class_id]))

    occluders = []
    for _ in range(cfg.max_occluders):
        if rng.random() >= cfg.occluder_probability:
            continue
        dims = (rng.uniform(2., 6.), rng.uniform(.5, 1.))
        yaw = rng.uniform(-np.pi, np.pi)
        center = place(*dims)
        if center is not None:
            occluders.append(SceneObject(
                -1, -1, center, dims, yaw, np.zeros(2), OCCLUDER_HEIGHT))
    return objects, occluders
