import dataclasses
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

import transpillars


logger = logging.getLogger(__name__)


###############################################################################
# Configuration
###############################################################################


ATTENTIONS = ('qk', 'baseline-deform')
AGGREGATIONS = ('hierarchical', 'separate', 'single-scale')
FRAME_MODES = ('1', 'concat-only', 'full')


@dataclasses.dataclass
class ModelConfig:
    """Network dimensions and detection settings"""

    # Channels of f3, f2, f1 (fine to coarse)
    widths: Tuple[int, int, int] = (64, 128, 256)
    upsample_channels: int = 32
    layers: int = 6
    heads: int = 8
    points: int = 8
    ratio: float = .05
    num_classes: int = 1

    # (l, w) anchor per class
    anchor_sizes: Tuple[Tuple[float, float], ...] = ((4.2, 1.8), (1.8, .6))
    offset_init: str = 'zero'
    positive_iou: float = .6
    negative_iou: float = .45
    score_threshold: float = .3
    nms_iou: float = .5
    max_detections: int = 100

    def __post_init__(self):
        if len(self.widths) != 3:
            raise transpillars.errors.ConfigurationError(
                f'Need three backbone widths, got {self.widths}')
        if self.num_classes < 1 or self.num_classes > len(self.anchor_sizes):
            raise transpillars.errors.ConfigurationError(
                f'{self.num_classes} classes but {len(self.anchor_sizes)} '
                'anchor sizes')
        if not 0. < self.ratio <= 1.:
            raise transpillars.errors.ConfigurationError(
                f'Query ratio {self.ratio} is outside (0, 1]')
        if self.layers < 1:
            raise transpillars.errors.ConfigurationError(
                f'Need at least one transformer layer, got {self.layers}')
        for width in self.widths:
            if width % self.heads or width % 4:
                raise transpillars.errors.ConfigurationError(
                    f'Width {width} must be divisible by 4 and by '
                    f'{self.heads} heads')
        if not 0. < self.negative_iou <= self.positive_iou < 1.:
            raise transpillars.errors.ConfigurationError(
                'Anchor matching thresholds must satisfy '
                '0 < negative_iou <= positive_iou < 1')

    @property
    def sizes(self) -> List[Tuple[float, float]]:
        """Anchor sizes of the configured classes"""
        return [tuple(size) for size in self.anchor_sizes[:self.num_classes]]


@dataclasses.dataclass
class FrameConfig:
    """Number of input frames and frames per window"""

    n_frames: int = 4
    window_size: int = 1

    def __post_init__(self):
        if self.n_frames < 1 or self.window_size < 1:
            raise transpillars.errors.ConfigurationError(
                'n_frames and window_size must be positive')
        if self.n_frames % self.window_size:
            raise transpillars.errors.ConfigurationError(
                f'{self.n_frames} frames do not divide into windows of '
                f'{self.window_size}')


@dataclasses.dataclass
class LossConfig:
    """Loss coefficients"""

    beta_cls: float = 1.
    beta_loc: float = 2.
    beta_dir: float = .2
    alpha: float = .25
    gamma: float = 2.


@dataclasses.dataclass
class AblationConfig:
    """Switches selecting model variants"""

    attention: str = 'qk'
    aggregation: str = 'hierarchical'
    encodings: str = 'both'
    frames: str = 'full'

    def __post_init__(self):
        # YAML reads the frame mode 1 as an integer
        self.frames = str(self.frames)
        for name, allowed in [
            ('attention', ATTENTIONS),
            ('aggregation', AGGREGATIONS),
            ('encodings', transpillars.fam.ENCODINGS),
            ('frames', FRAME_MODES)]:
            if getattr(self, name) not in allowed:
                raise transpillars.errors.ConfigurationError(
                    f'Unknown {name} variant {getattr(self, name)}; expected '
                    f'one of {allowed}')


###############################################################################
# Inputs and outputs
###############################################################################


@dataclasses.dataclass
class SequenceInput:
    """Input frames, current frame first, ascending age"""

    frames: List['transpillars.pillars.PointCloudFrame']
    window_size: int = 1

    def __post_init__(self):
        if not self.frames:
            raise transpillars.errors.ConfigurationError('Empty sequence input')
        if self.window_size < 1:
            raise transpillars.errors.ConfigurationError(
                f'Window size must be positive, got {self.window_size}')

    def windows(self) -> List['transpillars.pillars.PointCloudFrame']:
        """Merge consecutive frames, compensated to the current frame"""
        target = self.frames[0].ego_pose
        merged = []
        for start in range(0, len(self.frames), self.window_size):
            frames = [
                transpillars.pillars.ego_compensate(frame, target)
                for frame in self.frames[start:start + self.window_size]]
            merged.append(transpillars.pillars.PointCloudFrame(
                np.concatenate([frame.points for frame in frames]),
                frames[0].timestamp,
                target))
        return merged


@dataclasses.dataclass
class BoxPrediction:
    """Detected BEV box in current-frame sensor coordinates"""

    center: Tuple[float, float]
    dims: Tuple[float, float]
    yaw: float
    class_id: int
    score: float
    direction_bin: int

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise ValueError(f'Box dimensions must be positive, got {self.dims}')
        self.yaw = transpillars.box.wrap_angle(self.yaw)

    def array(self) -> np.ndarray:
        """Retrieve the box as (x, y, l, w, yaw)"""
        return np.array([*self.center, *self.dims, self.yaw])


@dataclasses.dataclass
class HeadOutput:
    """Dense head maps and their per-anchor views

    Per-anchor rows are ordered (anchor, row, col), matching make_anchors.
    """

    cls_map: 'transpillars.tensor.Tensor'
    box_map: 'transpillars.tensor.Tensor'
    dir_map: 'transpillars.tensor.Tensor'
    cls: 'transpillars.tensor.Tensor'
    box: 'transpillars.tensor.Tensor'
    direction: 'transpillars.tensor.Tensor'


@dataclasses.dataclass
class LossBundle:
    """Loss terms of one training sample"""

    l_base: 'transpillars.tensor.Tensor'
    l_aggr: 'transpillars.tensor.Tensor'
    l_total: 'transpillars.tensor.Tensor'

    # Prediction source to (l_cls, l_loc, l_dir)
    components: Dict[str, Tuple[float, float, float]]
    betas: Tuple[float, float, float]
    no_positives: bool = False

    def values(self) -> Dict[str, float]:
        """Retrieve the summed losses as floats"""
        return {
            'l_base': self.l_base.item(),
            'l_aggr': self.l_aggr.item(),
            'l_total': self.l_total.item()}


@dataclasses.dataclass
class AggregationResult:
    """Outputs of the coarse-to-fine aggregation for the current frame

    Lists are ordered coarse to fine; single-scale aggregation holds one entry.
    """

    aggregated: List['transpillars.tensor.Tensor']
    fused: List['transpillars.tensor.Tensor']
    layers: List[List['transpillars.attention.QueryTokens']]
    order: List[int]

    def layer_maps(self, layer: int) -> List['transpillars.tensor.Tensor']:
        """Maps holding the query features after one transformer layer"""
        return [
            transpillars.fam.scatter_back(fused, tokens[layer])
            for fused, tokens in zip(self.fused, self.layers)]


@dataclasses.dataclass
class ModelOutput:
    """Predictions of one forward pass"""

    prediction: HeadOutput
    base: List[HeadOutput]
    features: List['transpillars.pillars.MultiScaleFeatures']
    aggregation: Optional[AggregationResult] = None
    layers: List[HeadOutput] = dataclasses.field(default_factory=list)


###############################################################################
# Detection head
###############################################################################


# Focal-loss prior probability of the classification bias
PRIOR = .01


class DetectionHead(transpillars.nn.Module):
    """Upsample, concatenate and predict per-anchor outputs"""

    def __init__(
        self,
        widths: Tuple[int, int, int],
        channels: int,
        num_classes: int,
        rng: np.random.Generator) -> None:
        """Create detection head

        Arguments
            widths
                Channels of f3, f2, f1 (fine to coarse)
            channels
                Channels of each upsampled map
            num_classes
                Number of classes; one anchor per class
            rng
                Random generator for initialization
        """
        self.num_classes = num_classes
        self.deblocks = [
            transpillars.nn.ConvTranspose2d(width, channels, factor, rng, factor)
            for width, factor in zip(widths, (1, 2, 4))]
        anchors = num_classes
        self.cls = transpillars.nn.Conv2d(
            3 * channels, num_classes * anchors, 1, rng)
        self.cls.bias.data[:] = -np.log((1. - PRIOR) / PRIOR)
        self.box = transpillars.nn.Conv2d(3 * channels, 6 * anchors, 1, rng)
        self.direction = transpillars.nn.Conv2d(3 * channels, 2 * anchors, 1, rng)

    @property
    def channels(self) -> int:
        """Channels of the concatenated map"""
        return 3 * self.deblocks[0].weight.shape[1]

    def combine(self, maps: List['transpillars.tensor.Tensor']):
        """Upsample coarse-to-fine maps to the finest scale and concatenate"""
        upsampled = [
            deblock(x).relu()
            for deblock, x in zip(self.deblocks, reversed(maps))]
        return transpillars.tensor.concat(upsampled, axis=0)

    def forward(self, features) -> HeadOutput:
        return detect_head(features, self)

    def predict(self, combined) -> HeadOutput:
        """Apply the 1x1 prediction layers to a combined map"""
        classes, anchors = self.num_classes, self.num_classes
        _, height, width = combined.shape
        cls_map = self.cls(combined)
        box_map = self.box(combined)
        dir_map = self.direction(combined)

        def per_anchor(x, values):
            return x.reshape(anchors, values, height, width).transpose(
                0, 2, 3, 1).reshape(-1, values)

        return HeadOutput(
            cls_map,
            box_map,
            dir_map,
            per_anchor(cls_map, classes),
            per_anchor(box_map, 6),
            per_anchor(dir_map, 2))


def detect_head(aggregated, params: DetectionHead) -> HeadOutput:
    """Predict anchor outputs from multi-scale features

    Arguments
        aggregated
            MultiScaleFeatures, or a list of maps ordered coarse to fine
        params
            The detection head

    Returns
        The head outputs at the finest scale
    """
    if isinstance(aggregated, transpillars.pillars.MultiScaleFeatures):
        aggregated = aggregated.maps()
    return params.predict(params.combine(aggregated))


def decode_and_nms(
    head: HeadOutput,
    anchors: np.ndarray,
    score_thresh: float,
    iou_thresh: float,
    max_output: int = 100) -> List[BoxPrediction]:
    """Decode anchor predictions and suppress duplicates per class

    Arguments
        head
            Head outputs
        anchors
            Anchors of shape [N, 5]
        score_thresh
            Minimum sigmoid score
        iou_thresh
            Rotated BEV IoU above which lower-scoring boxes are suppressed
        max_output
            Maximum number of detections

    Returns
        Detections by descending score
    """
    if not 0. < score_thresh < 1. or not 0. < iou_thresh < 1.:
        raise transpillars.errors.ConfigurationError(
            f'Thresholds must lie in (0, 1), got {score_thresh} and {iou_thresh}')
    logits = head.cls.data.astype(np.float64)
    scores = np.exp(-np.logaddexp(0., -logits))
    boxes = transpillars.box.decode(head.box.data, anchors)
    directions = np.argmax(head.direction.data, axis=1)

    # The direction classifier resolves the heading half-plane
    flip = transpillars.box.direction_bin(boxes[:, 4]) != directions
    boxes[flip, 4] = transpillars.box.wrap_angle(boxes[flip, 4] + np.pi)

    detections = []
    for class_id in range(scores.shape[1]):
        candidates = np.flatnonzero(scores[:, class_id] > score_thresh)
        if not len(candidates):
            continue
        keep = candidates[transpillars.box.nms(
            boxes[candidates],
            scores[candidates, class_id],
            iou_thresh,
            max_output)]
        detections.extend(
            (scores[i, class_id], i, class_id) for i in keep)

    detections.sort(key=lambda item: (-item[0], item[1], item[2]))
    return [
        BoxPrediction(
            (boxes[i, 0], boxes[i, 1]),
            (boxes[i, 2], boxes[i, 3]),
            boxes[i, 4],
            class_id,
            float(score),
            int(transpillars.box.direction_bin(boxes[i, 4])))
        for score, i, class_id in detections[:max_output]]


###############################################################################
# Targets
###############################################################################


@dataclasses.dataclass
class AnchorTargets:
    """Per-anchor training targets

    Labels are 1 for positive, 0 for negative and -1 for ignored anchors.
    """

    labels: np.ndarray
    classes: np.ndarray
    residuals: np.ndarray
    directions: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels == 1).sum())


@dataclasses.dataclass
class WindowTargets:
    """Anchor targets and per-scale center maps of one input window"""

    anchors: AnchorTargets
    centers: List[np.ndarray]


def assign_targets(
    anchors: np.ndarray,
    anchor_classes: np.ndarray,
    boxes: np.ndarray,
    box_classes: np.ndarray,
    positive_iou: float = .6,
    negative_iou: float = .45) -> AnchorTargets:
    """Match anchors of each class to ground-truth boxes of that class

    Arguments
        anchors
            Anchors of shape [N, 5]
        anchor_classes
            Class of each anchor
        boxes
            Ground-truth boxes of shape [G, 5]
        box_classes
            Class of each box
        positive_iou
            Anchors at or above this IoU are positive
        negative_iou
            Anchors at or below this IoU are negative

    Returns
        The targets; the best anchor of every box is positive
    """
    count = len(anchors)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    box_classes = np.asarray(box_classes, dtype=np.int64)
    labels = np.zeros(count, dtype=np.int64)
    matched = np.full(count, -1, dtype=np.int64)
    for class_id in np.unique(anchor_classes):
        members = np.flatnonzero(anchor_classes == class_id)
        targets = np.flatnonzero(box_classes == class_id)
        if not len(targets):
            continue
        overlap = transpillars.box.iou_nearest(anchors[members], boxes[targets])
        best = overlap.argmax(axis=1)
        best_iou = overlap[np.arange(len(members)), best]
        labels[members[(best_iou > negative_iou) & (best_iou < positive_iou)]] = -1
        positive = best_iou >= positive_iou

        # Force the best anchor of each box
        for column, iou in enumerate(overlap.max(axis=0)):
            if iou > 0:
                row = overlap[:, column].argmax()
                positive[row] = True
                best[row] = column
        labels[members[positive]] = 1
        matched[members[positive]] = targets[best[positive]]

    residuals = np.zeros((count, 6))
    directions = np.zeros(count, dtype=np.int64)
    classes = np.array(anchor_classes, dtype=np.int64)
    positive = np.flatnonzero(labels == 1)
    if len(positive):
        gt = boxes[matched[positive]]
        residuals[positive] = transpillars.box.encode(gt, anchors[positive])
        directions[positive] = transpillars.box.direction_bin(gt[:, 4])
        classes[positive] = box_classes[matched[positive]]
    return AnchorTargets(labels, classes, residuals, directions)


def center_targets(
    boxes: np.ndarray,
    box_classes: np.ndarray,
    grid: 'transpillars.pillars.GridConfig',
    num_classes: int,
    shapes: List[Tuple[int, int]]) -> List[np.ndarray]:
    """Mark the cell containing each box center at each scale

    Arguments
        boxes
            Boxes of shape [G, 5]
        box_classes
            Class of each box
        grid
            The pillar grid
        num_classes
            Number of classes
        shapes
            (rows, cols) of each scale

    Returns
        Binary maps of shape [num_classes, rows, cols] per scale
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    maps = []
    for rows, cols in shapes:
        cell_x, cell_y = grid.extent[0] / cols, grid.extent[1] / rows
        target = np.zeros((num_classes, rows, cols))
        col = np.floor((boxes[:, 0] - grid.range_min[0]) / cell_x).astype(np.int64)
        row = np.floor((boxes[:, 1] - grid.range_min[1]) / cell_y).astype(np.int64)
        inside = (col >= 0) & (col < cols) & (row >= 0) & (row < rows)
        target[np.asarray(box_classes)[inside], row[inside], col[inside]] = 1.
        maps.append(target)
    return maps


###############################################################################
# Losses
###############################################################################


def head_loss(
    head: HeadOutput,
    targets: AnchorTargets,
    coeffs: LossConfig) -> Dict[str, 'transpillars.tensor.Tensor']:
    """Focal, smooth-L1 and direction losses normalized by positives

    Returns
        Dictionary with 'cls', 'loc', 'dir' and the weighted sum 'total'
    """
    Tensor = transpillars.tensor.Tensor
    labels = targets.labels
    positive = np.flatnonzero(labels == 1)
    normalizer = max(1, len(positive))

    one_hot = np.zeros(head.cls.shape)
    one_hot[positive, targets.classes[positive]] = 1.
    focal = transpillars.tensor.sigmoid_focal_loss(
        head.cls, one_hot, coeffs.alpha, coeffs.gamma)
    cls = (focal * (labels >= 0)[:, None]).sum() / normalizer

    if len(positive):
        dtype = head.box.data.dtype
        loc = transpillars.tensor.smooth_l1(
            head.box[positive],
            Tensor(targets.residuals[positive], dtype=dtype)).sum() / normalizer
        direction = transpillars.tensor.cross_entropy(
            head.direction[positive],
            targets.directions[positive]).sum() / normalizer
    else:
        loc, direction = Tensor(0.), Tensor(0.)

    total = (
        coeffs.beta_cls * cls +
        coeffs.beta_loc * loc +
        coeffs.beta_dir * direction)
    return {'cls': cls, 'loc': loc, 'dir': direction, 'total': total}


def center_loss(
    scores: List['transpillars.tensor.Tensor'],
    centers: List[np.ndarray],
    coeffs: LossConfig) -> 'transpillars.tensor.Tensor':
    """Mean over scales of the focal loss of the classification maps"""
    losses = []
    for logits, target in zip(scores, centers):
        focal = transpillars.tensor.sigmoid_focal_loss(
            logits, target, coeffs.alpha, coeffs.gamma)
        losses.append(focal.sum() / max(1., target.sum()))
    return transpillars.tensor.stack(losses).mean()


def compute_losses(
    per_layer_outputs: List[HeadOutput],
    base_outputs: List[HeadOutput],
    base_scores: List[List['transpillars.tensor.Tensor']],
    targets: List[WindowTargets],
    coeffs: LossConfig) -> LossBundle:
    """Sum the base-model loss and the layer-averaged aggregation loss

    Arguments
        per_layer_outputs
            Head outputs after each transformer layer; may be empty
        base_outputs
            Head outputs of the base model for each input window
        base_scores
            Per-scale classification maps for each input window
        targets
            Targets of each window; the first is the current frame
        coeffs
            Loss coefficients

    Returns
        The loss terms
    """
    if len(base_outputs) != len(targets):
        raise transpillars.errors.DimensionError(
            f'{len(base_outputs)} windows but {len(targets)} targets')
    components = {}
    no_positives = False

    base = []
    for window, (head, scores, target) in enumerate(
            zip(base_outputs, base_scores, targets)):
        losses = head_loss(head, target.anchors, coeffs)
        components[f'base/{window}'] = _floats(losses)
        no_positives |= not target.anchors.num_positive
        base.append(losses['total'] + center_loss(scores, target.centers, coeffs))
    l_base = transpillars.tensor.stack(base).mean()

    if per_layer_outputs:
        aggregation = []
        for layer, head in enumerate(per_layer_outputs):
            losses = head_loss(head, targets[0].anchors, coeffs)
            components[f'layer/{layer}'] = _floats(losses)
            aggregation.append(losses['total'])
        l_aggr = transpillars.tensor.stack(aggregation).mean()
    else:
        l_aggr = transpillars.tensor.Tensor(0., dtype=l_base.data.dtype)

    if no_positives:
        logger.warning('sample without positive anchors')
    return LossBundle(
        l_base,
        l_aggr,
        l_base + l_aggr,
        components,
        (coeffs.beta_cls, coeffs.beta_loc, coeffs.beta_dir),
        no_positives)


###############################################################################
# Network
###############################################################################


class TransPillars(transpillars.nn.Module):
    """Pillar detector with coarse-to-fine multi-frame aggregation"""

    def __init__(
        self,
        grid: 'transpillars.pillars.GridConfig',
        model: ModelConfig,
        frames: FrameConfig,
        ablation: AblationConfig,
        rng: np.random.Generator) -> None:
        """Create network

        Arguments
            grid
                The pillar grid
            model
                Network dimensions
            frames
                Input frame plan
            ablation
                Variant switches
            rng
                Random generator for initialization
        """
        rows, cols = grid.grid_shape
        if rows % 8 or cols % 8:
            raise transpillars.errors.ConfigurationError(
                f'Grid {grid.grid_shape} is not divisible by 8')
        self.grid = grid
        self.config = model
        self.frames = frames
        self.ablation = ablation

        self.encoder = transpillars.pillars.PillarEncoder(grid, rng)
        self.backbone = transpillars.pillars.Backbone(
            grid.feature_dim, model.widths, model.num_classes, rng)
        self.head = DetectionHead(
            model.widths, model.upsample_channels, model.num_classes, rng)

        windows = frames.n_frames // frames.window_size
        self.n_past = windows - 1 if ablation.frames == 'full' else 0
        self.fams = self._build_fams(rng) if self.n_past else []

        self.anchors = transpillars.box.make_anchors(
            grid.range_min[:2],
            2 * grid.voxel_size,
            (rows // 2, cols // 2),
            model.sizes)
        self.anchor_classes = np.repeat(
            np.arange(model.num_classes), rows * cols // 4)

    def _build_fams(self, rng):
        config, ablation = self.config, self.ablation
        settings = dict(
            layers=config.layers,
            heads=config.heads,
            points=config.points,
            n_past=self.n_past,
            ratio=config.ratio,
            rng=rng,
            attention=ablation.attention,
            encodings=ablation.encodings,
            offset_init=config.offset_init)
        if ablation.aggregation == 'single-scale':
            return [transpillars.fam.FAM(self.head.channels, None, **settings)]
        f3, f2, f1 = config.widths
        hierarchical = ablation.aggregation == 'hierarchical'
        return [
            transpillars.fam.FAM(f1, None, **settings),
            transpillars.fam.FAM(f2, f1 if hierarchical else None, **settings),
            transpillars.fam.FAM(f3, f2 if hierarchical else None, **settings)]

    def detect(self, maps: List['transpillars.tensor.Tensor']) -> HeadOutput:
        """Run the head on aggregated maps"""
        if self.ablation.aggregation == 'single-scale' and self.fams:
            return self.head.predict(maps[0])
        return detect_head(maps, self.head)

    def forward(self, sequence: SequenceInput, base_only: bool = False):
        """Predict boxes for the current frame

        Arguments
            sequence
                Input frames, current first
            base_only
                Run only the base model on the current window

        Returns
            ModelOutput
        """
        sequence = self.plan(sequence)
        if base_only:
            sequence = SequenceInput(
                sequence.frames[:sequence.window_size], sequence.window_size)
        features = extract_features(sequence, self)
        base = [self.head(f) for f in features]

        # A single window is the base model
        if len(features) == 1 or not self.fams:
            return ModelOutput(base[0], base, features)

        result = coarse_to_fine(features, self)
        layers = [
            self.detect(result.layer_maps(layer))
            for layer in range(self.config.layers - 1)]
        layers.append(self.detect(result.aggregated))
        return ModelOutput(layers[-1], base, features, result, layers)

    def losses(
        self,
        output: ModelOutput,
        targets: List[WindowTargets],
        coeffs: LossConfig) -> LossBundle:
        """Compute the losses of a forward pass"""
        return compute_losses(
            output.layers,
            output.base,
            [f.scores() for f in output.features],
            targets[:len(output.base)],
            coeffs)

    def plan(self, sequence: SequenceInput) -> SequenceInput:
        """Arrange input frames according to the frame mode"""
        frames = sequence.frames[:self.frames.n_frames]
        if self.ablation.frames == '1':
            return SequenceInput(frames[:1], 1)
        if self.ablation.frames == 'concat-only':
            return SequenceInput(frames, len(frames))
        return SequenceInput(frames, self.frames.window_size)

    def predict(
        self,
        sequence: SequenceInput,
        base_only: bool = False) -> List[BoxPrediction]:
        """Detect boxes without recording gradients"""
        with transpillars.tensor.no_grad():
            output = self(sequence, base_only)
        config = self.config
        return decode_and_nms(
            output.prediction,
            self.anchors,
            config.score_threshold,
            config.nms_iou,
            config.max_detections)

    def targets(
        self,
        boxes: List[np.ndarray],
        classes: List[np.ndarray]) -> List[WindowTargets]:
        """Build targets for each window from boxes in current-frame coordinates"""
        rows, cols = self.grid.grid_shape
        shapes = [(rows // 8, cols // 8), (rows // 4, cols // 4), (rows // 2, cols // 2)]
        return [
            WindowTargets(
                assign_targets(
                    self.anchors,
                    self.anchor_classes,
                    window_boxes,
                    window_classes,
                    self.config.positive_iou,
                    self.config.negative_iou),
                center_targets(
                    window_boxes,
                    window_classes,
                    self.grid,
                    self.config.num_classes,
                    shapes))
            for window_boxes, window_classes in zip(boxes, classes)]


def extract_features(
    input: SequenceInput,
    params: TransPillars) -> List['transpillars.pillars.MultiScaleFeatures']:
    """Encode each window with the shared base model

    Arguments
        input
            Input frames and window size
        params
            The network

    Returns
        One MultiScaleFeatures per window, current window first
    """
    features = []
    for window in input.windows():
        pillars = transpillars.pillars.voxelize(window, params.grid)
        pseudo_image = params.encoder(pillars)
        features.append(params.backbone(pseudo_image))
    return features


def coarse_to_fine(
    features: List['transpillars.pillars.MultiScaleFeatures'],
    params: TransPillars) -> AggregationResult:
    """Aggregate past windows into the current one, coarsest scale first

    Arguments
        features
            Features of each window, current first
        params
            The network

    Returns
        The aggregation result
    """
    current, past = features[0], features[1:]
    if params.ablation.aggregation == 'single-scale':
        maps = [params.head.combine(f.maps()) for f in features]
        scores = [params.head.cls(m) for m in maps]
        aggregated, layers = transpillars.fam.aggregate(
            maps[0], scores[0], maps[1:], scores[1:], params.fams[0])
        return AggregationResult([aggregated], [maps[0]], [layers], [0])

    result = AggregationResult([], [], [], [])
    previous = None
    for scale, fam in enumerate(params.fams):
        fused = transpillars.fam.fuse(
            previous if fam.fusion is not None else None,
            current.maps()[scale],
            fam.fusion)
        aggregated, layers = transpillars.fam.aggregate(
            fused,
            current.scores()[scale],
            [f.maps()[scale] for f in past],
            [f.scores()[scale] for f in past],
            fam)
        result.aggregated.append(aggregated)
        result.fused.append(fused)
        result.layers.append(layers)
        result.order.append(scale)
        previous = aggregated
    return result


###############################################################################
# Utilities
###############################################################################


def _floats(losses) -> Tuple[float, float, float]:
    """Retrieve (cls, loc, dir) as floats"""
    return tuple(losses[key].item() for key in ('cls', 'loc', 'dir'))
