import csv
import dataclasses
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

import transpillars


logger = logging.getLogger(__name__)


COLUMNS = (
    'scale',
    'layer',
    'query',
    'qx',
    'qy',
    'head',
    'frame_age',
    'sample_x',
    'sample_y',
    'weight')


###############################################################################
# Attention records
###############################################################################


@dataclasses.dataclass
class AttentionDump:
    """Cross-frame sampling locations and weights of one forward pass

    Locations are in grid units of their scale, (x, y) = (column, row).
    """

    # Scale index of each entry, coarsest first
    scales: List[int]

    # Map shape (rows, cols) per entry
    shapes: List[Tuple[int, int]]

    # Query positions [M, 2] per entry
    positions: List[np.ndarray]

    # Per entry, per layer: locations [M, heads, n_past, K, 2]
    locations: List[List[np.ndarray]]

    # Per entry, per layer: weights [M, heads, n_past, K]
    weights: List[List[np.ndarray]]

    def __len__(self) -> int:
        return sum(weights.size for entry in self.weights for weights in entry)

    def rows(self):
        """Iterate over CSV rows in (scale, layer, query, head, age, sample) order"""
        for index, scale in enumerate(self.scales):
            positions = self.positions[index]
            for layer, (locations, weights) in enumerate(
                    zip(self.locations[index], self.weights[index])):
                for query, head, frame, point in np.ndindex(weights.shape):
                    x, y = locations[query, head, frame, point]
                    yield (
                        scale,
                        layer,
                        query,
                        float(positions[query, 0]),
                        float(positions[query, 1]),
                        head,
                        frame + 1,
                        float(x),
                        float(y),
                        float(weights[query, head, frame, point]))


def attention_dump(
    model: 'transpillars.model.TransPillars',
    sequence: 'transpillars.model.SequenceInput') -> AttentionDump:
    """Run the model and collect every cross-attention layer's samples

    Arguments
        model
            A model with past windows to aggregate
        sequence
            Input frames, current first

    Returns
        The sampling locations and weights per scale and layer
    """
    with transpillars.tensor.no_grad():
        output = model(sequence)
    result = output.aggregation
    if result is None:
        raise transpillars.errors.ContractError(
            'Attention dump needs a model that aggregates past windows')

    dump = AttentionDump([], [], [], [], [])
    for index, scale in enumerate(result.order):
        fam = model.fams[index]
        dump.scales.append(scale)
        dump.shapes.append(tuple(result.fused[index].shape[1:]))
        dump.positions.append(np.asarray(result.layers[index][-1].positions))
        dump.locations.append([
            np.asarray(attention.last_locations)
            for attention in fam.cross_attention])
        dump.weights.append([
            np.asarray(attention.last_weights, dtype=np.float64)
            for attention in fam.cross_attention])
    logger.debug('collected %d attention samples', len(dump))
    return dump


def write_csv(dump: AttentionDump, file) -> Path:
    """Save attention records as CSV"""
    with open(file, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(COLUMNS)
        for row in dump.rows():
            writer.writerow(tuple(
                repr(value) if isinstance(value, float) else value
                for value in row))
    return Path(file)


###############################################################################
# Heatmaps
###############################################################################


def heatmap(dump: AttentionDump, entry: int) -> np.ndarray:
    """Accumulate attention weight mass on the grid of one scale

    Arguments
        dump
            The attention records
        entry
            Index of the scale entry

    Returns
        Weight mass of shape [rows, cols], summed over layers, heads, past
        frames and samples, each sample splatted to its nearest cell
    """
    rows, cols = dump.shapes[entry]
    mass = np.zeros((rows, cols))
    for locations, weights in zip(dump.locations[entry], dump.weights[entry]):
        x = np.clip(np.rint(locations[..., 0]), 0, cols - 1).astype(np.int64)
        y = np.clip(np.rint(locations[..., 1]), 0, rows - 1).astype(np.int64)
        np.add.at(mass, (y.ravel(), x.ravel()), weights.ravel())
    return mass


def write_ppm(dump: AttentionDump, entry: int, file, upscale: int = 4) -> Path:
    """Render one scale as a binary portable pixmap

    Red is normalized attention mass and green marks query cells. The image
    is flipped so that +y points up.
    """
    mass = heatmap(dump, entry)
    peak = mass.max()
    red = mass / peak if peak > 0 else mass
    green = np.zeros_like(mass)
    positions = np.rint(dump.positions[entry]).astype(np.int64)
    green[positions[:, 1], positions[:, 0]] = 1.

    image = np.stack([red, green, np.zeros_like(mass)], axis=-1)
    image = np.flipud(np.rint(image * 255.).astype(np.uint8))
    image = image.repeat(upscale, axis=0).repeat(upscale, axis=1)
    height, width = image.shape[:2]
    with open(file, 'wb') as handle:
        handle.write(f'P6\n{width} {height}\n255\n'.encode('ascii'))
        handle.write(image.tobytes())
    return Path(file)


def from_file(
    model: 'transpillars.model.TransPillars',
    sequence: 'transpillars.model.SequenceInput',
    output_directory) -> List[Path]:
    """Dump the attention of a sequence to CSV and one PPM per scale"""
    directory = Path(output_directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump = attention_dump(model, sequence)
    paths = [write_csv(dump, directory / 'attention.csv')]
    for entry, scale in enumerate(dump.scales):
        paths.append(write_ppm(dump, entry, directory / f'attention_scale{scale}.ppm'))
    logger.info('wrote %d attention records to %s', len(dump), directory)
    return paths


###############################################################################
# Motion analysis
###############################################################################


def motion_centroids(dump: AttentionDump, entry: int, layer: int = -1) -> np.ndarray:
    """Weight-mass centroid displacement of each query per past frame

    Arguments
        dump
            The attention records
        entry
            Index of the scale entry
        layer
            Transformer layer

    Returns
        Displacements from the query position in grid units, of shape
        [M, n_past, 2]
    """
    locations = dump.locations[entry][layer]
    weights = dump.weights[entry][layer]

    # Sum over heads and samples
    mass = weights.sum(axis=(1, 3))
    centroid = (
        (weights[..., None] * locations).sum(axis=(1, 3)) /
        np.maximum(mass, 1e-12)[..., None])
    return centroid - dump.positions[entry][:, None, :]


def motion_pairs(
    dump: AttentionDump,
    boxes: List['transpillars.synth.GroundTruthBox'],
    grid: 'transpillars.pillars.GridConfig',
    frame_interval: float,
    min_speed: float = 3.,
    entry: int = -1,
    layer: int = -1) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Pair fast objects with the attention displacement of their query

    For each sufficiently fast object, the query nearest its center (within
    one cell) is paired with the displacement expected from its velocity:
    a past window of age a sees the object at -velocity * a * frame_interval.

    Arguments
        dump
            The attention records
        boxes
            Current-frame ground truth in sensor coordinates
        grid
            The pillar grid
        frame_interval
            Seconds between consecutive windows
        min_speed
            Slowest object considered, in meters per second
        entry
            Index of the scale entry
        layer
            Transformer layer

    Returns
        observed
            Flattened centroid displacements in grid units, one per object
        expected
            Flattened motion-implied displacements, one per object
    """
    rows, cols = dump.shapes[entry]
    cell = np.array([grid.extent[0] / cols, grid.extent[1] / rows])
    low = np.array(grid.range_min[:2])
    positions = dump.positions[entry]
    displacement = motion_centroids(dump, entry, layer)
    ages = np.arange(1, displacement.shape[1] + 1)

    observed, expected = [], []
    for box in boxes:
        if box.speed < min_speed or not len(positions):
            continue
        center = (np.array(box.center) - low) / cell - .5
        distance = np.abs(positions - center).max(axis=1)
        if distance.min() > 1.:
            continue
        query = int(np.argmin(distance))
        motion = -np.array(box.velocity) / cell * frame_interval
        observed.append(displacement[query].ravel())
        expected.append((ages[:, None] * motion[None, :]).ravel())
    return observed, expected


def motion_correlation(
    dump: AttentionDump,
    boxes: List['transpillars.synth.GroundTruthBox'],
    grid: 'transpillars.pillars.GridConfig',
    frame_interval: float,
    min_speed: float = 3.,
    entry: int = -1,
    layer: int = -1) -> Tuple[float, int]:
    """Correlate centroid displacements with the objects' motion

    Arguments are those of motion_pairs.

    Returns
        pearson
            Correlation over the x and y components, or nan when fewer than
            two pairs are found
        objects
            Number of objects paired with a query
    """
    observed, expected = motion_pairs(
        dump, boxes, grid, frame_interval, min_speed, entry, layer)
    return pearson(observed, expected), len(observed)


def pooled_motion_correlation(
    model: 'transpillars.model.TransPillars',
    samples: List['transpillars.train.Sample'],
    grid: 'transpillars.pillars.GridConfig',
    dt: float,
    min_speed: float = 3.) -> Tuple[float, int]:
    """Correlate attention with motion over the objects of many sequences

    Arguments
        model
            A model with past windows to aggregate
        samples
            Sequences with their current-frame ground truth
        grid
            The pillar grid
        dt
            Seconds between consecutive frames
        min_speed
            Slowest object considered, in meters per second

    Returns
        pearson
            Correlation over every paired object
        objects
            Number of paired objects
    """
    observed, expected = [], []
    for sample in samples:
        dump = attention_dump(model, sample.sequence)
        pairs = motion_pairs(
            dump,
            sample.truth,
            grid,
            frame_interval(model, dt, sample.sequence),
            min_speed)
        observed.extend(pairs[0])
        expected.extend(pairs[1])
    r = pearson(observed, expected)
    logger.info('motion correlation %.3f over %d objects', r, len(observed))
    return r, len(observed)


def frame_interval(
    model: 'transpillars.model.TransPillars',
    dt: float,
    sequence: Optional['transpillars.model.SequenceInput'] = None) -> float:
    """Seconds between consecutive windows of a model's frame plan"""
    window = model.frames.window_size
    if sequence is not None:
        window = model.plan(sequence).window_size
    return window * dt


###############################################################################
# Utilities
###############################################################################


def pearson(observed: List[np.ndarray], expected: List[np.ndarray]) -> float:
    """Pearson correlation of paired displacements, nan if undefined"""
    if len(observed) < 2:
        return float('nan')
    observed, expected = np.concatenate(observed), np.concatenate(expected)
    if observed.std() == 0 or expected.std() == 0:
        return float('nan')
    return float(np.corrcoef(observed, expected)[0, 1])
