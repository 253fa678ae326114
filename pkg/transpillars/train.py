import csv
import dataclasses
import logging
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import tqdm

import transpillars


logger = logging.getLogger(__name__)


STAGES = ('base', 'full')

METRIC_COLUMNS = ('stage', 'epoch', 'l_base', 'l_aggr', 'l_total', 'mAP')

ABLATION_AXES = {
    'frames': transpillars.model.FRAME_MODES,
    'attention': transpillars.model.ATTENTIONS,
    'aggregation': transpillars.model.AGGREGATIONS,
    'encodings': transpillars.fam.ENCODINGS}


###############################################################################
# Samples
###############################################################################


@dataclasses.dataclass
class Sample:
    """One training or evaluation example

    Boxes are per input frame (current first) in current-frame sensor
    coordinates.
    """

    sequence: 'transpillars.model.SequenceInput'
    boxes: List[List['transpillars.synth.GroundTruthBox']]

    @property
    def truth(self) -> List['transpillars.synth.GroundTruthBox']:
        """Ground truth of the current frame"""
        return self.boxes[0]


def make_sample(
    frames: List['transpillars.pillars.PointCloudFrame'],
    boxes: List[List['transpillars.synth.GroundTruthBox']],
    n_frames: int) -> Sample:
    """Use the last frame of a sequence as the current frame

    Arguments
        frames
            Point clouds, oldest first
        boxes
            World-coordinate ground truth of each frame
        n_frames
            Number of input frames

    Returns
        The sample
    """
    if len(frames) < n_frames:
        raise transpillars.errors.ConfigurationError(
            f'Sequence of {len(frames)} frames is shorter than {n_frames}')
    frames = frames[::-1][:n_frames]
    boxes = boxes[::-1][:n_frames]
    pose = frames[0].ego_pose
    return Sample(
        transpillars.model.SequenceInput(frames),
        [to_sensor(frame_boxes, pose) for frame_boxes in boxes])


def to_sensor(
    boxes: List['transpillars.synth.GroundTruthBox'],
    pose: 'transpillars.pillars.Pose') -> List['transpillars.synth.GroundTruthBox']:
    """Express world-coordinate boxes in a sensor's coordinates"""
    inverse = pose.inverse()
    rotation = inverse.rotation()
    converted = []
    for box in boxes:
        center = inverse.apply(np.array([box.center]))[0]
        converted.append(dataclasses.replace(
            box,
            center=tuple(center),
            yaw=transpillars.box.wrap_angle(box.yaw + inverse.yaw),
            velocity=tuple(rotation @ np.array(box.velocity))))
    return converted


def sample_targets(
    model: 'transpillars.model.TransPillars',
    sample: Sample) -> List['transpillars.model.WindowTargets']:
    """Targets of each window the model forms from a sample"""
    plan = model.plan(sample.sequence)
    starts = range(0, len(plan.frames), plan.window_size)
    boxes = [
        np.array([box.array() for box in sample.boxes[start]]).reshape(-1, 5)
        for start in starts]
    classes = [
        np.array([box.class_id for box in sample.boxes[start]], dtype=np.int64)
        for start in starts]
    return model.targets(boxes, classes)


def load_samples(directory, n_frames: int) -> List[Sample]:
    """Load a split directory as samples"""
    return [
        make_sample(frames, boxes, n_frames)
        for frames, boxes in transpillars.synth.read_split(directory)]


###############################################################################
# Training
###############################################################################


def train(
    config: 'transpillars.config.RunConfig',
    train_samples: List[Sample],
    val_samples: Optional[List[Sample]] = None,
    output_directory=None,
    stages: Sequence[str] = STAGES,
    resume: bool = False) -> 'transpillars.model.TransPillars':
    """Train the base model, then the whole model end to end

    Arguments
        config
            The run configuration
        train_samples
            Training samples
        val_samples
            Optional validation samples evaluated after every epoch
        output_directory
            Where the metrics log and checkpoints are written
        stages
            Stages to run, a subset of ('base', 'full')
        resume
            Continue from the latest checkpoint in the output directory

    Returns
        The trained network
    """
    for stage in stages:
        if stage not in STAGES:
            raise transpillars.errors.ConfigurationError(f'Unknown stage {stage}')
    if not train_samples:
        raise transpillars.errors.ConfigurationError('No training samples')
    directory = Path(output_directory or config.out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    digest = transpillars.config.config_hash(config)

    with transpillars.tensor.precision(np.dtype(config.precision).type):
        model = build_model(config)
        return _run(
            model, config, train_samples, val_samples, directory, stages,
            resume, digest)


def _run(model, config, train_samples, val_samples, directory, stages, resume,
         digest):
    """Run the stages of train"""
    position = None
    metrics = directory / 'metrics.csv'
    if resume and (directory / 'checkpoint' / 'manifest.txt').exists():
        position = transpillars.checkpoint.load(directory / 'checkpoint')
        if position.config_hash != digest:
            raise transpillars.errors.ConfigurationError(
                'Checkpoint was written with a different configuration')
        _truncate_metrics(metrics, position.stage, position.epoch)
    else:
        with open(metrics, 'w', newline='') as file:
            csv.writer(file).writerow(METRIC_COLUMNS)
        if 'base' not in stages and (
                directory / 'checkpoint_base' / 'manifest.txt').exists():
            transpillars.checkpoint.restore(directory / 'checkpoint_base', model)

    for stage in stages:
        optim = config.optim
        epochs = optim.base_epochs if stage == 'base' else optim.full_epochs
        lr = optim.base_lr if stage == 'base' else optim.full_lr
        optimizer = transpillars.optim.AdamW(
            model.named_parameters(), lr, weight_decay=optim.weight_decay)

        start = 0
        if position is not None:
            if STAGES.index(stage) < STAGES.index(position.stage):
                continue
            if stage == position.stage:
                transpillars.checkpoint.restore(
                    directory / 'checkpoint', model, optimizer)
                start = position.epoch + 1
            else:
                transpillars.checkpoint.restore(directory / 'checkpoint', model)

        logger.info('stage %s: epochs %d..%d', stage, start, epochs - 1)
        for epoch in tqdm.tqdm(
                range(start, epochs), desc=stage, disable=epochs - start < 2):
            losses = train_epoch(model, optimizer, train_samples, config, stage, epoch)
            mAP = ''
            if val_samples:
                mAP = evaluate_model(
                    model, val_samples, config.evaluation, stage == 'base').mAP
            _append_metrics(metrics, stage, epoch, losses, mAP)
            logger.info(
                'stage %s epoch %d: l_base %.4f l_aggr %.4f l_total %.4f mAP %s',
                stage, epoch, *losses, mAP)
            transpillars.checkpoint.save(
                directory / 'checkpoint', model, optimizer, digest, stage, epoch)

        transpillars.checkpoint.save(
            directory / f'checkpoint_{stage}',
            model,
            None,
            digest,
            stage,
            max(epochs - 1, 0))
    return model


def train_epoch(
    model: 'transpillars.model.TransPillars',
    optimizer: 'transpillars.optim.AdamW',
    samples: List[Sample],
    config: 'transpillars.config.RunConfig',
    stage: str,
    epoch: int) -> Tuple[float, float, float]:
    """Run one epoch of minibatch updates

    Returns
        Mean l_base, l_aggr and l_total over the epoch
    """
    optim = config.optim
    lr_max = optim.base_lr if stage == 'base' else optim.full_lr
    epochs = optim.base_epochs if stage == 'base' else optim.full_epochs
    batches = math.ceil(len(samples) / optim.batch_size)
    total_steps = epochs * batches

    # Shuffle depends only on (seed, stage, epoch)
    rng = np.random.default_rng([config.seed, STAGES.index(stage), epoch])
    order = rng.permutation(len(samples))

    totals = np.zeros(3)
    for batch in range(batches):
        indices = order[batch * optim.batch_size:(batch + 1) * optim.batch_size]
        optimizer.lr = transpillars.optim.cosine_lr(
            epoch * batches + batch, total_steps, lr_max, optim.lr_min)
        model.zero_grad()
        for index in indices:
            sample = samples[index]
            transpillars.tensor.clear_tape()
            output = model(sample.sequence, base_only=stage == 'base')
            losses = model.losses(output, sample_targets(model, sample), config.loss)
            values = losses.values()
            if not all(np.isfinite(value) for value in values.values()):
                logger.warning('non-finite loss %s', values)
                raise transpillars.errors.DivergenceError(
                    stage, epoch, optimizer.steps, values)
            (losses.l_total / len(indices)).backward()
            totals += [values['l_base'], values['l_aggr'], values['l_total']]
        transpillars.tensor.clear_tape()
        norm = transpillars.optim.clip_grad_norm(model.parameters(), optim.grad_clip)
        optimizer.step()
        logger.debug(
            'step %d lr %.3e grad norm %.3e', optimizer.steps, optimizer.lr, norm)
    return tuple(totals / len(samples))


def build_model(
    config: 'transpillars.config.RunConfig') -> 'transpillars.model.TransPillars':
    """Initialize the network from the run seed"""
    with transpillars.tensor.precision(np.dtype(config.precision).type):
        return transpillars.model.TransPillars(
            config.grid,
            config.model,
            config.frames,
            config.ablation,
            np.random.default_rng(config.seed))


###############################################################################
# Evaluation
###############################################################################


def evaluate_model(
    model: 'transpillars.model.TransPillars',
    samples: Iterable[Sample],
    cfg: 'transpillars.evaluate.EvaluationConfig',
    base_only: bool = False) -> 'transpillars.evaluate.EvaluationReport':
    """Detect on every sample and evaluate against its current-frame truth"""
    frames = [
        (model.predict(sample.sequence, base_only), sample.truth)
        for sample in samples]
    return transpillars.evaluate.evaluate_frames(frames, cfg)


###############################################################################
# Ablation
###############################################################################


def ablate(
    config: 'transpillars.config.RunConfig',
    train_samples: List[Sample],
    val_samples: List[Sample],
    seeds: Sequence[int],
    output_directory,
    axes: Optional[Sequence[str]] = None) -> Path:
    """Train and evaluate every variant of each ablation axis over seeds

    Arguments
        config
            The reference configuration
        train_samples
            Training samples
        val_samples
            Validation samples
        seeds
            Training seeds
        output_directory
            Where runs and the combined tables are written
        axes
            Axes to sweep; defaults to all

    Returns
        Path of the combined CSV
    """
    directory = Path(output_directory)
    directory.mkdir(parents=True, exist_ok=True)
    axes = list(axes or ABLATION_AXES)
    rows = []
    runs = [
        (axis, variant, seed)
        for axis in axes
        for variant in ABLATION_AXES[axis]
        for seed in seeds]
    for axis, variant, seed in tqdm.tqdm(runs, desc='ablation'):
        ablation = dataclasses.replace(config.ablation, **{axis: variant})
        variant_config = dataclasses.replace(config, ablation=ablation, seed=seed)
        run = directory / axis / variant / f'seed{seed}'
        model = train(variant_config, train_samples, None, run)
        report = evaluate_model(model, val_samples, config.evaluation)
        rows.append((
            axis, variant, seed, report.mAP, report.moving, model.num_parameters()))
        logger.info(
            '%s=%s seed %d: mAP %.4f moving %.4f', axis, variant, seed,
            report.mAP, report.moving)

    path = directory / 'ablation.csv'
    with open(path, 'w', newline='') as file:
        writer = csv.writer(file)
        writer.writerow(('axis', 'variant', 'seed', 'mAP', 'mAP_moving', 'parameters'))
        for axis, variant, seed, mAP, moving, parameters in rows:
            writer.writerow((
                axis, variant, seed, repr(float(mAP)), repr(float(moving)),
                parameters))

    with open(directory / 'ablation_summary.csv', 'w', newline='') as file:
        writer = csv.writer(file)
        writer.writerow(('axis', 'variant', 'median_mAP', 'median_mAP_moving'))
        for axis in axes:
            for variant in ABLATION_AXES[axis]:
                selected = [
                    row for row in rows if row[0] == axis and row[1] == variant]
                writer.writerow((
                    axis,
                    variant,
                    repr(float(np.median([row[3] for row in selected]))),
                    repr(float(np.median([row[4] for row in selected])))))
    return path


###############################################################################
# Utilities
###############################################################################


def _append_metrics(path: Path, stage, epoch, losses, mAP) -> None:
    """Append one row to the metrics log"""
    with open(path, 'a', newline='') as file:
        csv.writer(file).writerow((
            stage,
            epoch,
            *(repr(float(value)) for value in losses),
            '' if mAP == '' else repr(float(mAP))))


def _truncate_metrics(path: Path, stage: str, epoch: int) -> None:
    """Keep metrics rows up to and including a checkpoint position"""
    with open(path, newline='') as file:
        rows = list(csv.reader(file))
    kept = [rows[0]]
    for row in rows[1:]:
        position = (STAGES.index(row[0]), int(row[1]))
        if position <= (STAGES.index(stage), epoch):
            kept.append(row)
    with open(path, 'w', newline='') as file:
        csv.writer(file).writerows(kept)
