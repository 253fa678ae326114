import dataclasses
import math
from typing import List, Optional

import numpy as np

import transpillars


###############################################################################
# Configuration and tokens
###############################################################################


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    """Shape of one attention block"""

    d: int
    heads: int = 8
    points: int = 8
    n_past: int = 1

    def __post_init__(self):
        if self.d % self.heads:
            raise transpillars.errors.ConfigurationError(
                f'Model dimension {self.d} is not divisible by {self.heads} heads')
        if self.points < 1:
            raise transpillars.errors.ConfigurationError(
                f'Need at least one sampling point, got {self.points}')
        if self.n_past < 0:
            raise transpillars.errors.ConfigurationError(
                f'Negative number of past frames {self.n_past}')

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclasses.dataclass
class QueryTokens:
    """Selected current-frame tokens

    Positions are continuous (x, y) grid coordinates at the token's scale,
    with integers at cell centers.
    """

    features: 'transpillars.tensor.Tensor'
    positions: np.ndarray
    encodings: 'transpillars.tensor.Tensor'
    indices: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def replace(self, features: 'transpillars.tensor.Tensor') -> 'QueryTokens':
        """Retrieve the same tokens carrying new features"""
        return dataclasses.replace(self, features=features)


###############################################################################
# Self-attention
###############################################################################


class MultiHeadSelfAttention(transpillars.nn.Module):
    """Scaled dot-product self-attention among query tokens"""

    def __init__(
        self,
        d: int,
        heads: int,
        hidden: int,
        rng: np.random.Generator) -> None:
        """Create self-attention block

        Arguments
            d
                Token width
            heads
                Number of heads
            hidden
                Feed-forward width
            rng
                Random generator for initialization
        """
        self.config = AttentionConfig(d, heads, 1, 0)
        self.query = transpillars.nn.Linear(d, d, rng)
        self.key = transpillars.nn.Linear(d, d, rng)
        self.value = transpillars.nn.Linear(d, d, rng)
        self.output = transpillars.nn.Linear(d, d, rng)
        self.sublayers = Sublayers(d, hidden, rng)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, tokens: QueryTokens) -> 'transpillars.tensor.Tensor':
        return multi_head_self_attention(tokens, self)


def multi_head_self_attention(
    tokens: QueryTokens,
    params: MultiHeadSelfAttention) -> 'transpillars.tensor.Tensor':
    """Self-attention with encodings on queries and keys, then sublayers

    Arguments
        tokens
            The query tokens
        params
            The self-attention block

    Returns
        Updated token features of shape [M, d]
    """
    heads, head_dim = params.config.heads, params.config.head_dim
    x = tokens.features
    with_encoding = x + tokens.encodings
    q = split_heads(params.query(with_encoding), heads)
    k = split_heads(params.key(with_encoding), heads)
    v = split_heads(params.value(x), heads)
    scores = (q @ k.transpose(0, 2, 1)) / math.sqrt(head_dim)
    weights = scores.softmax(axis=-1)
    params.last_weights = weights.data
    out = params.output(merge_heads(weights @ v))
    return params.sublayers(x, out)


###############################################################################
# Deformable cross-attention
###############################################################################


class DeformableAttention(transpillars.nn.Module):
    """Sampling, value aggregation and sublayers shared by both variants"""

    def __init__(
        self,
        config: AttentionConfig,
        hidden: int,
        rng: np.random.Generator,
        offset_init: str = 'zero') -> None:
        """Create deformable attention block

        Arguments
            config
                Attention shape
            hidden
                Feed-forward width
            rng
                Random generator for initialization
            offset_init
                'zero' places all samples on the query location; 'ring'
                spreads the K points of each head along a ray
        """
        self.config = config
        d, heads, points, frames = (
            config.d, config.heads, config.points, max(config.n_past, 1))
        self.offsets = transpillars.nn.Linear(
            d, heads * frames * points * 2, rng, zero=True)
        if offset_init == 'ring':
            self.offsets.bias.data[:] = ring_offsets(heads, frames, points)
        elif offset_init != 'zero':
            raise transpillars.errors.ConfigurationError(
                f'Unknown offset initialization {offset_init}')
        self.value = transpillars.nn.Linear(d, d, rng)
        self.output = transpillars.nn.Linear(d, d, rng)
        self.sublayers = Sublayers(d, hidden, rng)
        self.last_locations: Optional[np.ndarray] = None
        self.last_weights: Optional[np.ndarray] = None

    def attend(
        self,
        queries: QueryTokens,
        past_maps: List['transpillars.tensor.Tensor'],
        past_encodings: Optional[List['transpillars.tensor.Tensor']] = None,
        locations: Optional[np.ndarray] = None) -> 'transpillars.tensor.Tensor':
        """Compute the attention output before residual and normalization

        Arguments
            queries
                The query tokens
            past_maps
                Past-frame feature maps of shape [d, H, W]
            past_encodings
                Positional-objectiveness encodings of the past maps
            locations
                Optional pinned sampling locations [M, heads, n_past, K, 2]

        Returns
            Attention output of shape [M, d]
        """
        config = self.config
        check_maps(past_maps, config)
        if past_encodings is None:
            past_encodings = [
                transpillars.tensor.Tensor(np.zeros(m.shape)) for m in past_maps]
        query_input = queries.features + queries.encodings

        if locations is None:
            offsets = sample_offsets(query_input, self)
            positions = queries.positions.astype(offsets.dtype)
            locations = offsets + positions[:, None, None, None, :]
        else:
            locations = transpillars.tensor.Tensor(locations)

        # Per-frame sampling keeps each frame's motion offsets separate
        count, heads = len(queries), config.heads
        values, keys = [], []
        for frame, (past, encoding) in enumerate(zip(past_maps, past_encodings)):
            frame_locations = locations[:, :, frame].reshape(-1, 2)
            sampled = transpillars.tensor.bilinear_sample(past, frame_locations)
            values.append(self.project(sampled, self.value))
            if self.needs_keys:
                encoded = transpillars.tensor.bilinear_sample(
                    encoding, frame_locations)
                keys.append(self.project(sampled + encoded, self.key))
        values = transpillars.tensor.concat(values, axis=2)
        keys = transpillars.tensor.concat(keys, axis=2) if keys else None

        # [heads, M, n_past * K]
        weights = self.weights(query_input, keys)
        self.last_weights = weights.data.transpose(1, 0, 2).reshape(
            count, heads, config.n_past, config.points)
        self.last_locations = np.array(locations.data)

        heads_out = (weights.reshape(heads, count, -1, 1) * values).sum(axis=2)
        return self.output(merge_heads(heads_out))

    def forward(
        self,
        queries: QueryTokens,
        past_maps: List['transpillars.tensor.Tensor'],
        past_encodings: Optional[List['transpillars.tensor.Tensor']] = None):
        out = self.attend(queries, past_maps, past_encodings)
        return self.sublayers(queries.features, out)

    def project(self, sampled, linear) -> 'transpillars.tensor.Tensor':
        """Apply each head's slice of a projection to that head's samples

        Arguments
            sampled
                Samples of shape [M * heads * K, d] ordered (query, head, point)
            linear
                A d-to-d projection

        Returns
            Projected samples of shape [heads, M, K, head_dim]
        """
        config = self.config
        heads, points, head_dim = config.heads, config.points, config.head_dim
        count = sampled.shape[0] // (heads * points)
        per_head = sampled.reshape(count, heads, points, config.d).transpose(
            1, 0, 2, 3).reshape(heads, count * points, config.d)
        weight = linear.weight.reshape(config.d, heads, head_dim).transpose(1, 0, 2)
        bias = linear.bias.reshape(heads, 1, head_dim)
        return (per_head @ weight + bias).reshape(
            heads, count, points, head_dim)

    needs_keys = False

    def weights(self, query_input, keys) -> 'transpillars.tensor.Tensor':
        raise NotImplementedError


class QKDeformableAttention(DeformableAttention):
    """Deformable attention whose weights come from query-key matching"""

    needs_keys = True

    def __init__(
        self,
        config: AttentionConfig,
        hidden: int,
        rng: np.random.Generator,
        offset_init: str = 'zero') -> None:
        super().__init__(config, hidden, rng, offset_init)
        self.query = transpillars.nn.Linear(config.d, config.d, rng)
        self.key = transpillars.nn.Linear(config.d, config.d, rng)

    def weights(self, query_input, keys):
        heads, head_dim = self.config.heads, self.config.head_dim
        q = split_heads(self.query(query_input), heads)
        q = q.reshape(heads, q.shape[1], 1, head_dim)

        # Joint normalization over all n_past * K samples of a head
        scores = (q * keys).sum(axis=-1) / math.sqrt(head_dim)
        return scores.softmax(axis=-1)


class BaselineDeformableAttention(DeformableAttention):
    """Deformable attention whose weights are projected from the query"""

    def __init__(
        self,
        config: AttentionConfig,
        hidden: int,
        rng: np.random.Generator,
        offset_init: str = 'zero') -> None:
        super().__init__(config, hidden, rng, offset_init)
        slots = config.heads * max(config.n_past, 1) * config.points
        self.attention = transpillars.nn.Linear(config.d, slots, rng, zero=True)

    def weights(self, query_input, keys):
        heads = self.config.heads
        logits = self.attention(query_input)
        logits = logits.reshape(logits.shape[0], heads, -1).transpose(1, 0, 2)
        return logits.softmax(axis=-1)


def sample_offsets(
    query_feat: 'transpillars.tensor.Tensor',
    params: DeformableAttention) -> 'transpillars.tensor.Tensor':
    """Project query features to sampling offsets in grid cells

    Arguments
        query_feat
            Query features of shape [M, d]
        params
            The deformable attention block

    Returns
        Offsets of shape [M, heads, n_past, K, 2]
    """
    config = params.config
    offsets = params.offsets(query_feat)
    return offsets.reshape(
        query_feat.shape[0], config.heads, max(config.n_past, 1),
        config.points, 2)


def qk_deformable_attention(
    queries: QueryTokens,
    past_maps: List['transpillars.tensor.Tensor'],
    cfg: AttentionConfig,
    params: QKDeformableAttention,
    past_encodings=None) -> 'transpillars.tensor.Tensor':
    """Query-key deformable cross-attention with sublayers

    Arguments
        queries
            The query tokens
        past_maps
            Past-frame maps of shape [d, H, W]
        cfg
            Attention shape
        params
            The attention block
        past_encodings
            Encodings of the past maps

    Returns
        Updated token features of shape [M, d]
    """
    if cfg != params.config:
        raise transpillars.errors.ConfigurationError(
            f'Attention config {cfg} does not match parameters {params.config}')
    return params(queries, past_maps, past_encodings)


def deformable_attention_baseline(
    queries: QueryTokens,
    past_maps: List['transpillars.tensor.Tensor'],
    cfg: AttentionConfig,
    params: BaselineDeformableAttention,
    past_encodings=None) -> 'transpillars.tensor.Tensor':
    """Deformable cross-attention with projected weights, with sublayers"""
    if cfg != params.config:
        raise transpillars.errors.ConfigurationError(
            f'Attention config {cfg} does not match parameters {params.config}')
    return params(queries, past_maps, past_encodings)


###############################################################################
# Utilities
###############################################################################


class Sublayers(transpillars.nn.Module):
    """Residual, normalization, feed-forward, residual, normalization"""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator) -> None:
        self.norm1 = transpillars.nn.LayerNorm(d)
        self.feedforward = transpillars.nn.FeedForward(d, hidden, rng)
        self.norm2 = transpillars.nn.LayerNorm(d)

    def forward(self, x, attended):
        x = self.norm1(x + attended)
        return self.norm2(x + self.feedforward(x))


def check_maps(maps: List['transpillars.tensor.Tensor'], config: AttentionConfig):
    """Require past maps to agree in shape, count and width"""
    shapes = {m.shape for m in maps}
    if len(shapes) > 1:
        raise transpillars.errors.DimensionError(
            f'Past maps differ in shape: {sorted(shapes)}')
    if len(maps) != config.n_past:
        raise transpillars.errors.DimensionError(
            f'Expected {config.n_past} past maps, got {len(maps)}')
    if maps and maps[0].shape[0] != config.d:
        raise transpillars.errors.DimensionError(
            f'Past maps {maps[0].shape} do not have {config.d} channels')


def merge_heads(x) -> 'transpillars.tensor.Tensor':
    """[heads, M, head_dim] -> [M, heads * head_dim]"""
    heads, count, head_dim = x.shape
    return x.transpose(1, 0, 2).reshape(count, heads * head_dim)


def ring_offsets(heads: int, frames: int, points: int) -> np.ndarray:
    """Offset bias placing point k of head h at distance k + 1 along ray h"""
    angles = np.arange(heads) * 2. * np.pi / heads
    rays = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    rays /= np.abs(rays).max(axis=1, keepdims=True)
    scale = np.arange(1, points + 1)[None, None, :, None]
    bias = np.broadcast_to(
        rays[:, None, None, :] * scale, (heads, frames, points, 2))
    return bias.reshape(-1)


def split_heads(x, heads: int) -> 'transpillars.tensor.Tensor':
    """[M, heads * head_dim] -> [heads, M, head_dim]"""
    count, width = x.shape
    return x.reshape(count, heads, width // heads).transpose(1, 0, 2)
