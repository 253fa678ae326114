import dataclasses
import logging
import math
from typing import List, Optional, Tuple

import numpy as np

import transpillars


logger = logging.getLogger(__name__)


# Which terms enter the combined positional-objectiveness encoding
ENCODINGS = ('both', 'no-pos', 'no-obj')


###############################################################################
# Encodings
###############################################################################


@dataclasses.dataclass
class EncodingMap:
    """Positional and objectiveness encodings of one feature map"""

    pe: 'transpillars.tensor.Tensor'
    e_obj: 'transpillars.tensor.Tensor'
    combined: 'transpillars.tensor.Tensor'


def positional_encoding(height: int, width: int, d: int):
    """Parameter-free sinusoidal encoding of (x, y) grid positions

    The first d / 2 channels encode x and the last d / 2 encode y, as
    interleaved (sin, cos) pairs over d / 4 frequencies.

    Arguments
        height
            Rows of the map
        width
            Columns of the map
        d
            Number of channels; must be divisible by 4

    Returns
        Encoding of shape [d, H, W]
    """
    if d % 4:
        raise transpillars.errors.ConfigurationError(
            f'Positional encoding width {d} is not divisible by 4')
    quarter = d // 4
    frequencies = 1. / 10000. ** (np.arange(quarter) / quarter)

    def encode(positions):
        angles = positions[:, None] * frequencies[None, :]
        pairs = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
        return pairs.reshape(len(positions), 2 * quarter)

    x = encode(np.arange(width, dtype=np.float64))
    y = encode(np.arange(height, dtype=np.float64))
    encoding = np.concatenate([
        np.broadcast_to(x.T[:, None, :], (2 * quarter, height, width)),
        np.broadcast_to(y.T[:, :, None], (2 * quarter, height, width))])
    return transpillars.tensor.Tensor(encoding)


class ObjectivenessEncoder(transpillars.nn.Module):
    """1x1 convolution lifting the objectiveness score to d channels"""

    def __init__(self, d: int, rng: np.random.Generator) -> None:
        self.conv = transpillars.nn.Conv2d(1, d, 1, rng)

    def forward(self, cls_map):
        return objectiveness_encoding(cls_map, self)


def objectiveness_encoding(cls_map, params: ObjectivenessEncoder):
    """Encode the per-location objectiveness of a classification map

    Arguments
        cls_map
            Classification logits of shape [C, H, W]
        params
            The objectiveness encoder

    Returns
        Encoding of shape [d, H, W]
    """
    _, height, width = cls_map.shape
    score = cls_map.max(axis=0).sigmoid().reshape(1, height, width)
    return params.conv(score)


def encoding_map(
    cls_map,
    params: ObjectivenessEncoder,
    d: int,
    mode: str = 'both') -> EncodingMap:
    """Build the encodings of a map from its classification logits

    Arguments
        cls_map
            Classification logits of shape [C, H, W]
        params
            The objectiveness encoder
        d
            Number of channels
        mode
            One of 'both', 'no-pos' or 'no-obj'

    Returns
        The encodings
    """
    if mode not in ENCODINGS:
        raise transpillars.errors.ConfigurationError(
            f'Unknown encoding mode {mode}; expected one of {ENCODINGS}')
    _, height, width = cls_map.shape
    pe = positional_encoding(height, width, d)
    e_obj = objectiveness_encoding(cls_map, params)
    if mode == 'both':
        combined = pe + e_obj
    elif mode == 'no-pos':
        combined = e_obj
    else:
        combined = pe
    return EncodingMap(pe, e_obj, combined)


###############################################################################
# Query selection
###############################################################################


def select_queries(
    fused,
    cls_map,
    ratio: float,
    encoding=None) -> 'transpillars.attention.QueryTokens':
    """Select the highest-scoring locations as query tokens

    Arguments
        fused
            Feature map of shape [d, H, W]
        cls_map
            Classification logits of shape [C, H, W]
        ratio
            Fraction of locations to select, in (0, 1]
        encoding
            Optional combined encoding of shape [d, H, W]

    Returns
        The ceil(ratio * H * W) selected tokens, by descending score with
        ties broken by ascending flat index
    """
    if not 0. < ratio <= 1.:
        raise transpillars.errors.ConfigurationError(
            f'Query ratio {ratio} is outside (0, 1]')
    d, height, width = fused.shape
    if cls_map.shape[1:] != (height, width):
        raise transpillars.errors.DimensionError(
            f'Classification map {cls_map.shape} does not match features '
            f'{fused.shape}')
    logits = cls_map.data.max(axis=0).reshape(-1).astype(np.float64)
    scores = np.exp(-np.logaddexp(0., -logits))
    count = math.ceil(ratio * height * width - 1e-9)
    indices = np.lexsort((np.arange(scores.size), -scores))[:count]

    tokens = fused.reshape(d, -1).transpose(1, 0)
    if encoding is None:
        encodings = transpillars.tensor.Tensor(np.zeros((count, d)))
    else:
        encodings = encoding.reshape(d, -1).transpose(1, 0)[indices]
    positions = np.stack([indices % width, indices // width], axis=1)
    return transpillars.attention.QueryTokens(
        tokens[indices],
        positions.astype(np.float64),
        encodings,
        indices,
        scores[indices])


###############################################################################
# Fusion
###############################################################################


class Fusion(transpillars.nn.Module):
    """Upsample the previous aggregate and fuse it with the current map"""

    def __init__(self, d_prev: int, d: int, rng: np.random.Generator) -> None:
        self.upsample = transpillars.nn.ConvTranspose2d(d_prev, d, 2, rng, 2)
        self.conv = transpillars.nn.Conv2d(2 * d, d, 3, rng, 1, 1)

    def forward(self, prev_agg, current):
        return fuse(prev_agg, current, self)


def fuse(prev_agg, current, params: Optional[Fusion]):
    """Fuse the previous scale's aggregate into the current feature map

    Arguments
        prev_agg
            Aggregated map of shape [d', H / 2, W / 2], or None at the
            smallest scale
        current
            Current-frame map of shape [d, H, W]
        params
            The fusion layers

    Returns
        The fused map of shape [d, H, W]; the current map itself when
        prev_agg is None
    """
    if prev_agg is None:
        return current
    upsampled = params.upsample(prev_agg)
    if upsampled.shape != current.shape:
        raise transpillars.errors.DimensionError(
            f'Upsampled aggregate {upsampled.shape} does not match current '
            f'map {current.shape}')
    return params.conv(transpillars.tensor.concat([upsampled, current], axis=0))


###############################################################################
# Fusion aggregation module
###############################################################################


class FAM(transpillars.nn.Module):
    """Fusion, query selection and L layers of cross-frame aggregation"""

    def __init__(
        self,
        d: int,
        d_prev: Optional[int],
        layers: int,
        heads: int,
        points: int,
        n_past: int,
        ratio: float,
        rng: np.random.Generator,
        attention: str = 'qk',
        encodings: str = 'both',
        offset_init: str = 'zero') -> None:
        """Create fusion aggregation module

        Arguments
            d
                Channels at this scale
            d_prev
                Channels of the previous (coarser) aggregate; None disables
                fusion
            layers
                Number of transformer layers
            heads
                Attention heads
            points
                Sampling points per head and past frame
            n_past
                Number of past feature maps
            ratio
                Fraction of locations selected as queries
            rng
                Random generator for initialization
            attention
                'qk' or 'baseline-deform'
            encodings
                'both', 'no-pos' or 'no-obj'
            offset_init
                'zero' or 'ring'
        """
        if layers < 1:
            raise transpillars.errors.ConfigurationError(
                f'Need at least one transformer layer, got {layers}')
        if not 0. < ratio <= 1.:
            raise transpillars.errors.ConfigurationError(
                f'Query ratio {ratio} is outside (0, 1]')
        if d % 4:
            raise transpillars.errors.ConfigurationError(
                f'FAM width {d} is not divisible by 4')
        if encodings not in ENCODINGS:
            raise transpillars.errors.ConfigurationError(
                f'Unknown encoding mode {encodings}')
        try:
            variant = {
                'qk': transpillars.attention.QKDeformableAttention,
                'baseline-deform': transpillars.attention.BaselineDeformableAttention
            }[attention]
        except KeyError:
            raise transpillars.errors.ConfigurationError(
                f'Unknown attention variant {attention}')

        self.d = d
        self.ratio = ratio
        self.encodings = encodings
        self.fusion = None if d_prev is None else Fusion(d_prev, d, rng)
        self.objectiveness = ObjectivenessEncoder(d, rng)
        config = transpillars.attention.AttentionConfig(d, heads, points, n_past)
        hidden = 2 * d
        self.self_attention = [
            transpillars.attention.MultiHeadSelfAttention(d, heads, hidden, rng)
            for _ in range(layers)]
        self.cross_attention = [
            variant(config, hidden, rng, offset_init)
            for _ in range(layers)] if n_past else []

    @property
    def layers(self) -> int:
        return len(self.self_attention)

    def forward(self, fused, current_cls, past_feats, past_cls):
        return aggregate(fused, current_cls, past_feats, past_cls, self)


def aggregate(
    fused,
    current_cls,
    past_feats: List['transpillars.tensor.Tensor'],
    past_cls: List['transpillars.tensor.Tensor'],
    params: FAM) -> Tuple[
        'transpillars.tensor.Tensor',
        List['transpillars.attention.QueryTokens']]:
    """Aggregate past-frame features into the selected current locations

    Arguments
        fused
            Fused current-frame map of shape [d, H, W]
        current_cls
            Current-frame classification logits of shape [C, H, W]
        past_feats
            Past-frame maps of shape [d, H, W], ascending age
        past_cls
            Past-frame classification logits
        params
            The fusion aggregation module

    Returns
        aggregated
            Copy of fused with the final query features at their locations
        layers
            The query tokens after each transformer layer
    """
    for past in past_feats:
        if past.shape != fused.shape:
            raise transpillars.errors.DimensionError(
                f'Past map {past.shape} does not match current map '
                f'{fused.shape}')
    if len(past_feats) != len(past_cls):
        raise transpillars.errors.DimensionError(
            f'{len(past_feats)} past maps but {len(past_cls)} '
            'classification maps')

    d, height, width = fused.shape
    current = encoding_map(current_cls, params.objectiveness, d, params.encodings)
    past_encodings = [
        encoding_map(cls, params.objectiveness, d, params.encodings).combined
        for cls in past_cls]
    queries = select_queries(fused, current_cls, params.ratio, current.combined)
    logger.debug('aggregating %d of %d locations', len(queries), height * width)

    layers = []
    for index, self_attention in enumerate(params.self_attention):
        queries = queries.replace(self_attention(queries))
        if past_feats:
            cross_attention = params.cross_attention[index]
            queries = queries.replace(
                cross_attention(queries, past_feats, past_encodings))
        layers.append(queries)

    return scatter_back(fused, queries), layers


def scatter_back(fused, queries: 'transpillars.attention.QueryTokens'):
    """Write query features into a copy of a [d, H, W] map"""
    d, height, width = fused.shape
    tokens = fused.reshape(d, -1).transpose(1, 0)
    tokens = transpillars.tensor.scatter(tokens, queries.indices, queries.features)
    return tokens.transpose(1, 0).reshape(d, height, width)
