import dataclasses
import hashlib
import logging
import typing
from pathlib import Path
from typing import Any, Dict, List

import yaml

import transpillars


logger = logging.getLogger(__name__)


###############################################################################
# Run configuration
###############################################################################


@dataclasses.dataclass
class DataConfig:
    """Dataset sizes"""

    train_sequences: int = 64
    val_sequences: int = 16


@dataclasses.dataclass
class OptimConfig:
    """Two-stage optimization schedule"""

    base_epochs: int = 4
    full_epochs: int = 4
    base_lr: float = 3e-3
    full_lr: float = 1.6e-3
    lr_min: float = 0.
    weight_decay: float = .01
    batch_size: int = 4
    grad_clip: float = 10.

    def __post_init__(self):
        if self.base_epochs < 0 or self.full_epochs < 0 or self.batch_size < 1:
            raise transpillars.errors.ConfigurationError(
                'Epoch counts must be nonnegative and batch_size positive')
        if self.base_lr <= 0 or self.full_lr <= 0:
            raise transpillars.errors.ConfigurationError(
                'Learning rates must be positive')


@dataclasses.dataclass
class RunConfig:
    """Everything a command needs"""

    scene: 'transpillars.synth.SceneConfig' = dataclasses.field(
        default_factory=lambda: transpillars.synth.SceneConfig())
    grid: 'transpillars.pillars.GridConfig' = dataclasses.field(
        default_factory=lambda: transpillars.pillars.GridConfig())
    model: 'transpillars.model.ModelConfig' = dataclasses.field(
        default_factory=lambda: transpillars.model.ModelConfig())
    frames: 'transpillars.model.FrameConfig' = dataclasses.field(
        default_factory=lambda: transpillars.model.FrameConfig())
    loss: 'transpillars.model.LossConfig' = dataclasses.field(
        default_factory=lambda: transpillars.model.LossConfig())
    optim: OptimConfig = dataclasses.field(default_factory=OptimConfig)
    ablation: 'transpillars.model.AblationConfig' = dataclasses.field(
        default_factory=lambda: transpillars.model.AblationConfig())
    evaluation: 'transpillars.evaluate.EvaluationConfig' = dataclasses.field(
        default_factory=lambda: transpillars.evaluate.EvaluationConfig())
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = 'runs'
    precision: str = 'float32'

    def __post_init__(self):
        if self.precision not in ('float32', 'float64'):
            raise transpillars.errors.ConfigurationError(
                f'Unknown precision {self.precision}')
        if self.model.num_classes != self.scene.num_classes:
            raise transpillars.errors.ConfigurationError(
                f'Model has {self.model.num_classes} classes but the scene '
                f'has {self.scene.num_classes}')
        if self.scene.n_frames < self.frames.n_frames:
            raise transpillars.errors.ConfigurationError(
                f'Sequences of {self.scene.n_frames} frames cannot feed '
                f'{self.frames.n_frames} input frames')

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'RunConfig':
        """Create configuration from nested plain values

        Arguments
            values
                Mapping of section name to section values; missing keys take
                their defaults

        Returns
            The configuration
        """
        return _build(cls, values or {}, '')

    def to_dict(self) -> Dict[str, Any]:
        """Convert to nested plain values (lists in place of tuples)"""
        return _plain(dataclasses.asdict(self))


def load(file) -> RunConfig:
    """Load configuration from a YAML file"""
    path = Path(file)
    if path.suffix not in ('.yaml', '.yml'):
        raise transpillars.errors.ConfigurationError(
            f'No config loader for file extension {path.suffix}')
    with open(path) as handle:
        try:
            values = yaml.safe_load(handle)
        except yaml.YAMLError as error:
            raise transpillars.errors.ConfigurationError(
                f'Malformed configuration {path}: {error}') from error
    return RunConfig.from_dict(values)


def save(config: RunConfig, file) -> None:
    """Save configuration as YAML"""
    with open(file, 'w') as handle:
        yaml.safe_dump(config.to_dict(), handle, sort_keys=True)


def dumps(config: RunConfig) -> str:
    """Canonical YAML text of a configuration"""
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical YAML text"""
    return hashlib.sha256(dumps(config).encode('utf-8')).hexdigest()


def override(config: RunConfig, assignments: List[str]) -> RunConfig:
    """Apply dotted key=value assignments

    Arguments
        config
            The configuration to update
        assignments
            Strings such as 'model.layers=2'; values are parsed as YAML

    Returns
        The updated configuration
    """
    values = config.to_dict()
    for assignment in assignments:
        key, separator, text = assignment.partition('=')
        if not separator:
            raise transpillars.errors.ConfigurationError(
                f'Override {assignment} is not of the form key=value')
        *sections, name = key.strip().split('.')
        target = values
        for section in sections:
            if not isinstance(target.get(section), dict):
                raise transpillars.errors.ConfigurationError(
                    f'Unknown configuration section {key}')
            target = target[section]
        if name not in target:
            raise transpillars.errors.ConfigurationError(
                f'Unknown configuration key {key}')
        try:
            target[name] = yaml.safe_load(text)
        except yaml.YAMLError as error:
            raise transpillars.errors.ConfigurationError(
                f'Malformed value in override {assignment}: {error}') from error
    return RunConfig.from_dict(values)


###############################################################################
# Utilities
###############################################################################


def _build(cls, values: Dict[str, Any], prefix: str):
    """Recursively create a dataclass from plain values"""
    if not isinstance(values, dict):
        raise transpillars.errors.ConfigurationError(
            f'Section {prefix or "root"} must be a mapping')
    fields = {field.name: field for field in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise transpillars.errors.ConfigurationError(
            f'Unknown configuration keys {[prefix + key for key in unknown]}')
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in values.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f'{prefix}{name}.')
        else:
            kwargs[name] = _tuples(value) if _is_tuple(hint) else value
    try:
        return cls(**kwargs)
    except TypeError as error:
        raise transpillars.errors.ConfigurationError(str(error))


def _is_tuple(hint) -> bool:
    """Whether a type hint is a (possibly bare) tuple"""
    return hint is tuple or typing.get_origin(hint) is tuple


def _plain(value):
    """Replace tuples with lists for YAML safe_dump"""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def _tuples(value):
    """Replace lists with tuples, recursively"""
    if isinstance(value, (list, tuple)):
        return tuple(_tuples(item) for item in value)
    return value
