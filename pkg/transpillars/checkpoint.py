import dataclasses
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np

import transpillars


logger = logging.getLogger(__name__)


###############################################################################
# Checkpoint
###############################################################################


@dataclasses.dataclass
class Checkpoint:
    """Parameters, optimizer state and training position"""

    parameters: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray]
    precision: str = 'float32'
    config_hash: str = ''
    stage: str = 'base'
    epoch: int = 0


def save(
    directory,
    model: 'transpillars.nn.Module',
    optimizer: Optional['transpillars.optim.AdamW'] = None,
    config_hash: str = '',
    stage: str = 'base',
    epoch: int = 0) -> Path:
    """Write a manifest and one little-endian blob per array

    Arguments
        directory
            The checkpoint directory
        model
            The network
        optimizer
            Optional optimizer whose moments are saved
        config_hash
            Hash of the run configuration
        stage
            Training stage of the checkpoint
        epoch
            Last completed epoch of the stage

    Returns
        The checkpoint directory
    """
    directory = Path(directory)
    (directory / 'arrays').mkdir(parents=True, exist_ok=True)
    parameters = model.state_dict()
    dtypes = {array.dtype for array in parameters.values()}
    if len(dtypes) > 1:
        raise ValueError(f'Mixed parameter precisions {sorted(map(str, dtypes))}')
    precision = str(dtypes.pop()) if dtypes else 'float32'

    lines = [
        f'precision {precision}',
        f'config_hash {config_hash}',
        f'stage {stage}',
        f'epoch {epoch}']
    for name, array in parameters.items():
        lines.append(_write(directory, 'param', name, array, precision))
    if optimizer is not None:
        state = optimizer.state_dict()
        lines.append(f'steps {int(state.pop("steps"))}')
        for name, array in state.items():
            lines.append(_write(directory, 'optim', name, array, precision))

    with open(directory / 'manifest.txt', 'w') as file:
        file.write('\n'.join(lines) + '\n')
    logger.info('saved checkpoint %s (stage %s, epoch %d)', directory, stage, epoch)
    return directory


def load(directory) -> Checkpoint:
    """Read a checkpoint written by save"""
    directory = Path(directory)
    manifest = directory / 'manifest.txt'
    if not manifest.exists():
        raise FileNotFoundError(f'No checkpoint manifest at {manifest}')

    header, parameters, optimizer = {}, {}, {}
    with open(manifest) as file:
        for line in file:
            kind, *fields = line.split()
            if kind in ('param', 'optim'):
                name, shape, relative = fields
                dtype = np.dtype(header['precision']).newbyteorder('<')
                array = np.fromfile(directory / relative, dtype=dtype)
                shape = () if shape == '-' else tuple(
                    int(size) for size in shape.split(','))
                array = array.reshape(shape).astype(header['precision'])
                (parameters if kind == 'param' else optimizer)[name] = array
            else:
                header[kind] = fields[0] if fields else ''
    if 'steps' in header:
        optimizer['steps'] = np.array(int(header['steps']))
    return Checkpoint(
        parameters,
        optimizer,
        header['precision'],
        header.get('config_hash', ''),
        header.get('stage', 'base'),
        int(header.get('epoch', 0)))


def restore(
    directory,
    model: 'transpillars.nn.Module',
    optimizer: Optional['transpillars.optim.AdamW'] = None,
    strict: bool = True) -> Checkpoint:
    """Load a checkpoint into a model and optionally an optimizer"""
    checkpoint = load(directory)
    model.load_state_dict(checkpoint.parameters, strict)
    if optimizer is not None and checkpoint.optimizer:
        optimizer.load_state_dict(checkpoint.optimizer)
    return checkpoint


###############################################################################
# Utilities
###############################################################################


def _write(directory: Path, kind: str, name: str, array, precision) -> str:
    """Write one array and retrieve its manifest line"""
    relative = f'arrays/{kind}.{name.replace("/", ".")}.bin'
    array = np.asarray(array, dtype=np.dtype(precision).newbyteorder('<'))
    array.tofile(directory / relative)
    shape = ','.join(str(size) for size in array.shape) or '-'
    return f'{kind} {name} {shape} {relative}'
