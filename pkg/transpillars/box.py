from typing import List, Tuple

import numpy as np


###############################################################################
# Box representation
###############################################################################


# BEV boxes are arrays of (x, y, l, w, yaw); l is along the heading


def corners(boxes: np.ndarray) -> np.ndarray:
    """Retrieve the four BEV corners of each box

    Arguments
        boxes
            Boxes of shape [N, 5]

    Returns
        Counter-clockwise corners of shape [N, 4, 2]
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    half_l, half_w = boxes[:, 2] / 2., boxes[:, 3] / 2.
    local = np.stack([
        np.stack([half_l, half_w], axis=1),
        np.stack([-half_l, half_w], axis=1),
        np.stack([-half_l, -half_w], axis=1),
        np.stack([half_l, -half_w], axis=1)], axis=1)
    cos, sin = np.cos(boxes[:, 4]), np.sin(boxes[:, 4])
    rotation = np.stack([
        np.stack([cos, -sin], axis=1),
        np.stack([sin, cos], axis=1)], axis=1)
    return np.einsum('nij,nkj->nki', rotation, local) + boxes[:, None, :2]


def direction_bin(yaw: np.ndarray) -> np.ndarray:
    """Two-way heading bin: 0 for yaw in [0, pi), 1 otherwise"""
    return (np.mod(yaw, 2 * np.pi) >= np.pi).astype(np.int64)


def wrap_angle(angle):
    """Normalize angles to (-pi, pi]"""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2 * np.pi, wrapped)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


###############################################################################
# Anchor residual coding
###############################################################################


def decode(residuals: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Recover boxes from residuals (inverse of encode)

    Arguments
        residuals
            (dx, dy, dl, dw, dsin, dcos) of shape [N, 6]
        anchors
            Anchor boxes of shape [N, 5]

    Returns
        Boxes of shape [N, 5]
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    diagonal = np.hypot(anchors[:, 2], anchors[:, 3])
    x = residuals[:, 0] * diagonal + anchors[:, 0]
    y = residuals[:, 1] * diagonal + anchors[:, 1]
    length = np.exp(residuals[:, 2]) * anchors[:, 2]
    width = np.exp(residuals[:, 3]) * anchors[:, 3]
    yaw = np.arctan2(
        residuals[:, 4] + np.sin(anchors[:, 4]),
        residuals[:, 5] + np.cos(anchors[:, 4]))
    return np.stack([x, y, length, width, wrap_angle(yaw)], axis=1)


def encode(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Express boxes as residuals relative to anchors

    Arguments
        boxes
            Target boxes of shape [N, 5]
        anchors
            Anchor boxes of shape [N, 5]

    Returns
        (dx, dy, dl, dw, dsin, dcos) of shape [N, 6]
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    diagonal = np.hypot(anchors[:, 2], anchors[:, 3])
    return np.stack([
        (boxes[:, 0] - anchors[:, 0]) / diagonal,
        (boxes[:, 1] - anchors[:, 1]) / diagonal,
        np.log(boxes[:, 2] / anchors[:, 2]),
        np.log(boxes[:, 3] / anchors[:, 3]),
        np.sin(boxes[:, 4]) - np.sin(anchors[:, 4]),
        np.cos(boxes[:, 4]) - np.cos(anchors[:, 4])], axis=1)


def make_anchors(
    range_min: Tuple[float, float],
    cell_size: float,
    shape: Tuple[int, int],
    sizes: List[Tuple[float, float]]) -> np.ndarray:
    """Create one zero-yaw anchor per cell per class

    Arguments
        range_min
            (x, y) of the grid corner in meters
        cell_size
            Edge length of a head cell in meters
        shape
            (rows, cols) of the head map
        sizes
            (l, w) per class

    Returns
        Anchors of shape [A * rows * cols, 5] ordered (anchor, row, col)
    """
    rows, cols = shape
    ys = range_min[1] + (np.arange(rows) + .5) * cell_size
    xs = range_min[0] + (np.arange(cols) + .5) * cell_size
    grid_y, grid_x = np.meshgrid(ys, xs, indexing='ij')
    anchors = []
    for length, width in sizes:
        anchors.append(np.stack([
            grid_x.reshape(-1),
            grid_y.reshape(-1),
            np.full(rows * cols, length),
            np.full(rows * cols, width),
            np.zeros(rows * cols)], axis=1))
    return np.concatenate(anchors, axis=0)


###############################################################################
# Overlap
###############################################################################


def iou_nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Axis-aligned BEV IoU after rotating each box to its nearest axis

    Arguments
        a
            Boxes of shape [N, 5]
        b
            Boxes of shape [M, 5]

    Returns
        IoU matrix of shape [N, M]
    """
    a, b = _standing(a), _standing(b)
    low = np.maximum(a[:, None, :2], b[None, :, :2])
    high = np.minimum(a[:, None, 2:], b[None, :, 2:])
    intersection = np.clip(high - low, 0, None).prod(axis=-1)
    area_a = (a[:, 2:] - a[:, :2]).prod(axis=-1)
    area_b = (b[:, 2:] - b[:, :2]).prod(axis=-1)
    union = area_a[:, None] + area_b[None, :] - intersection
    return intersection / np.maximum(union, 1e-12)


def iou_rotated(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact BEV IoU of rotated boxes

    Arguments
        a
            Boxes of shape [N, 5]
        b
            Boxes of shape [M, 5]

    Returns
        IoU matrix of shape [N, M]
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    corners_a, corners_b = corners(a), corners(b)
    area_a, area_b = a[:, 2] * a[:, 3], b[:, 2] * b[:, 3]
    result = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            if np.hypot(*(a[i, :2] - b[j, :2])) > (
                    np.hypot(a[i, 2], a[i, 3]) + np.hypot(b[j, 2], b[j, 3])) / 2:
                continue
            intersection = _polygon_area(_clip(corners_a[i], corners_b[j]))
            union = area_a[i] + area_b[j] - intersection
            result[i, j] = intersection / max(union, 1e-12)
    return result


def nms(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    max_output: int = 100) -> np.ndarray:
    """Greedy non-maximum suppression by rotated BEV IoU

    Candidates are visited by descending score, ties by ascending index.

    Arguments
        boxes
            Boxes of shape [N, 5]
        scores
            Scores of shape [N]
        iou_threshold
            Boxes overlapping a kept box above this IoU are suppressed
        max_output
            Maximum number of kept boxes

    Returns
        Indices of the kept boxes in visiting order
    """
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for position, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        if len(keep) == max_output:
            break
        rest = order[position + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest):
            overlap = iou_rotated(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[overlap > iou_threshold]] = True
    return np.array(keep, dtype=np.int64)


###############################################################################
# Utilities
###############################################################################


def _clip(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Intersect two convex counter-clockwise polygons (Sutherland-Hodgman)"""
    output = list(subject)
    for k in range(len(clipper)):
        if not output:
            break
        edge_start, edge_end = clipper[k], clipper[(k + 1) % len(clipper)]
        edge = edge_end - edge_start
        polygon, output = output, []

        def inside(point):
            return edge[0] * (point[1] - edge_start[1]) - \
                edge[1] * (point[0] - edge_start[0]) >= 0

        def crossing(p, q):
            direction = q - p
            denominator = edge[0] * direction[1] - edge[1] * direction[0]
            t = (edge[1] * (p[0] - edge_start[0]) -
                 edge[0] * (p[1] - edge_start[1])) / denominator
            return p + t * direction

        for i, current in enumerate(polygon):
            previous = polygon[i - 1]
            if inside(current):
                if not inside(previous):
                    output.append(crossing(previous, current))
                output.append(current)
            elif inside(previous):
                output.append(crossing(previous, current))
    return np.array(output).reshape(-1, 2)


def _polygon_area(polygon: np.ndarray) -> float:
    """Shoelace area of a simple polygon"""
    if len(polygon) < 3:
        return 0.
    x, y = polygon[:, 0], polygon[:, 1]
    return .5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _standing(boxes: np.ndarray) -> np.ndarray:
    """Convert boxes to (x_min, y_min, x_max, y_max) at the nearest axis"""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    folded = np.abs(wrap_angle(boxes[:, 4] * 2.) / 2.)
    swap = folded > np.pi / 4
    length = np.where(swap, boxes[:, 3], boxes[:, 2])
    width = np.where(swap, boxes[:, 2], boxes[:, 3])
    return np.stack([
        boxes[:, 0] - length / 2.,
        boxes[:, 1] - width / 2.,
        boxes[:, 0] + length / 2.,
        boxes[:, 1] + width / 2.], axis=1)
