import numpy as np
import pytest

import transpillars
from transpillars.tensor import Tensor


###############################################################################
# Test encodings
###############################################################################


def test_positional_encoding():
    """x channels vary along columns and y channels along rows"""
    pe = transpillars.fam.positional_encoding(3, 5, 8).data
    assert pe.shape == (8, 3, 5)

    # Lowest frequency is one radian per cell
    np.testing.assert_allclose(pe[0, 0], np.sin(np.arange(5)), atol=1e-6)
    np.testing.assert_allclose(pe[1, 0], np.cos(np.arange(5)), atol=1e-6)
    np.testing.assert_allclose(pe[4, :, 0], np.sin(np.arange(3)), atol=1e-6)
    assert np.ptp(pe[:4], axis=1).max() == 0.
    assert np.ptp(pe[4:], axis=2).max() == 0.
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.fam.positional_encoding(3, 5, 6)


def test_encoding_modes(rng):
    """Ablation modes drop the corresponding encoding term"""
    encoder = transpillars.fam.ObjectivenessEncoder(8, rng)
    cls_map = Tensor(rng.standard_normal((2, 4, 4)))
    both = transpillars.fam.encoding_map(cls_map, encoder, 8, 'both')
    np.testing.assert_allclose(both.combined.data, both.pe.data + both.e_obj.data)
    no_pos = transpillars.fam.encoding_map(cls_map, encoder, 8, 'no-pos')
    np.testing.assert_array_equal(no_pos.combined.data, no_pos.e_obj.data)
    no_obj = transpillars.fam.encoding_map(cls_map, encoder, 8, 'no-obj')
    np.testing.assert_array_equal(no_obj.combined.data, no_obj.pe.data)
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.fam.encoding_map(cls_map, encoder, 8, 'none')


def test_objectiveness_uses_max_class(rng):
    """The objectiveness encoding depends only on the best class logit"""
    encoder = transpillars.fam.ObjectivenessEncoder(4, rng)
    a = Tensor(np.array([[[1., -2.]], [[0., 3.]]]))
    b = Tensor(np.array([[[1., 3.]], [[-5., 0.]]]))
    np.testing.assert_allclose(
        transpillars.fam.objectiveness_encoding(a, encoder).data,
        transpillars.fam.objectiveness_encoding(b, encoder).data)


###############################################################################
# Test query selection
###############################################################################


def test_select_queries(rng):
    """The top ceil(ratio * H * W) locations are selected"""
    fused = Tensor(rng.standard_normal((4, 8, 8)))
    logits = np.full((1, 8, 8), -5.)
    logits[0, 2, 3] = 4.
    logits[0, 7, 0] = 3.
    logits[0, 0, 5] = 2.
    logits[0, 5, 5] = 2.
    queries = transpillars.fam.select_queries(fused, Tensor(logits), .05)
    assert len(queries) == 4
    np.testing.assert_array_equal(queries.indices, [19, 56, 5, 45])
    np.testing.assert_array_equal(queries.positions[0], [3., 2.])
    np.testing.assert_array_equal(queries.features.data[0], fused.data[:, 2, 3])
    assert not queries.encodings.data.any()


def test_select_queries_ties(rng):
    """Equal scores are selected in ascending flat index"""
    fused = Tensor(rng.standard_normal((4, 4, 4)))
    queries = transpillars.fam.select_queries(fused, Tensor(np.zeros((1, 4, 4))), .25)
    np.testing.assert_array_equal(queries.indices, [0, 1, 2, 3])


def test_select_queries_all(rng):
    """A ratio of one selects every location"""
    fused = Tensor(rng.standard_normal((4, 3, 3)))
    queries = transpillars.fam.select_queries(
        fused, Tensor(rng.standard_normal((1, 3, 3))), 1.)
    assert sorted(queries.indices.tolist()) == list(range(9))
    with pytest.raises(transpillars.errors.ConfigurationError):
        transpillars.fam.select_queries(fused, Tensor(np.zeros((1, 3, 3))), 0.)
    with pytest.raises(transpillars.errors.DimensionError):
        transpillars.fam.select_queries(fused, Tensor(np.zeros((1, 2, 3))), .5)


###############################################################################
# Test fusion and aggregation
###############################################################################


def test_fuse(rng):
    """Fusion doubles the previous scale and keeps the current shape"""
    fusion = transpillars.fam.Fusion(12, 8, rng)
    current = Tensor(rng.standard_normal((8, 6, 6)))
    assert transpillars.fam.fuse(None, current, fusion) is current
    fused = transpillars.fam.fuse(Tensor(rng.standard_normal((12, 3, 3))), current, fusion)
    assert fused.shape == (8, 6, 6)
    with pytest.raises(transpillars.errors.DimensionError):
        transpillars.fam.fuse(Tensor(np.zeros((12, 2, 2))), current, fusion)


def make_fam(rng, n_past, **kwargs):
    settings = dict(
        layers=2, heads=2, points=2, n_past=n_past, ratio=.1, rng=rng)
    settings.update(kwargs)
    return transpillars.fam.FAM(8, None, **settings)


def test_aggregate_scatters_queries(rng):
    """Only the selected locations change"""
    fam = make_fam(rng, 2)
    fused = Tensor(rng.standard_normal((8, 6, 6)))
    cls = Tensor(rng.standard_normal((1, 6, 6)))
    past = [Tensor(rng.standard_normal((8, 6, 6))) for _ in range(2)]
    past_cls = [Tensor(rng.standard_normal((1, 6, 6))) for _ in range(2)]
    aggregated, layers = transpillars.fam.aggregate(fused, cls, past, past_cls, fam)
    assert aggregated.shape == fused.shape
    assert len(layers) == 2
    queries = layers[-1]
    assert len(queries) == 4

    flat = aggregated.data.reshape(8, -1)
    untouched = np.setdiff1d(np.arange(36), queries.indices)
    np.testing.assert_array_equal(flat[:, untouched], fused.data.reshape(8, -1)[:, untouched])
    np.testing.assert_array_equal(flat[:, queries.indices].T, queries.features.data)


def test_aggregate_without_past(rng):
    """Without past maps the module runs self-attention only"""
    fam = make_fam(rng, 0)
    assert not fam.cross_attention
    fused = Tensor(rng.standard_normal((8, 4, 4)))
    aggregated, layers = transpillars.fam.aggregate(
        fused, Tensor(rng.standard_normal((1, 4, 4))), [], [], fam)
    assert aggregated.shape == fused.shape
    assert len(layers) == 2


def test_aggregate_errors(rng):
    """Past maps must match the current map"""
    fam = make_fam(rng, 1)
    fused = Tensor(np.zeros((8, 4, 4)))
    cls = Tensor(np.zeros((1, 4, 4)))
    with pytest.raises(transpillars.errors.DimensionError):
        transpillars.fam.aggregate(
            fused, cls, [Tensor(np.zeros((8, 2, 2)))], [cls], fam)
    with pytest.raises(transpillars.errors.DimensionError):
        transpillars.fam.aggregate(fused, cls, [fused], [], fam)


@pytest.mark.parametrize('kwargs', [
    dict(ratio=0.),
    dict(layers=0),
    dict(attention='dense'),
    dict(encodings='all')])
def test_fam_configuration(rng, kwargs):
    """Invalid settings are configuration errors"""
    with pytest.raises(transpillars.errors.ConfigurationError):
        make_fam(rng, 1, **kwargs)
