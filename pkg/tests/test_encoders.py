import numpy as np
import pytest

from epcformer import autograd as ag
from epcformer.data import PHONEMES, TEXT_VOCAB
from epcformer.encoders import EncoderParams, FeatureMap, encode_audio, encode_text, encode_visual

C, L = 8, 16


def params(stride=3, seed=0):
    return EncoderParams.init(np.random.default_rng(seed), C, L, 4, 24, 24, stride)


def test_visual_shape_and_zero_frame():
    p = params()
    fm = encode_visual(np.zeros((24, 24, 3), np.uint8), p)
    assert fm.data.shape == (36, C) and fm.spatial_dims == (6, 6) and not fm.pad_mask.any()
    p.zero_positions()
    assert not encode_visual(np.zeros((24, 24, 3), np.uint8), p).data.data.any()
    with pytest.raises(ValueError):
        encode_visual(np.zeros((22, 24, 3), np.uint8), p)


def test_visual_locality():
    p = params()
    p.zero_positions()
    rng = np.random.default_rng(1)
    a = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
    b = a.copy()
    b[9, 14] ^= 0x55  # patch row 2, col 3
    diff = np.any(encode_visual(a, p).data.data != encode_visual(b, p).data.data, axis=1)
    assert np.flatnonzero(diff).tolist() == [2 * 6 + 3]


def test_text_padding_rules():
    p = params()
    empty = encode_text([], p)
    assert empty.pad_mask.all() and not empty.data.data.any()
    fm = encode_text([1, 2, 3], p)
    assert fm.data.shape == (L, C)
    assert fm.pad_mask.tolist() == [False] * 3 + [True] * (L - 3)
    assert not fm.data.data[3:].any()
    with pytest.raises(ValueError):
        encode_text([len(TEXT_VOCAB)], p)


def test_text_permutation_equivariance():
    p = params()
    p.zero_positions()
    toks = [4, 7, 1, 9]
    perm = [2, 0, 3, 1]
    a = encode_text(toks, p).data.data
    b = encode_text([toks[i] for i in perm], p).data.data
    np.testing.assert_array_equal(b[:4], a[perm])


def test_audio_stride_one_matches_lookup():
    p = params(stride=1)
    p.zero_positions()
    toks = [3, 0, 5, 5, 2]
    fm = encode_audio(toks, p)
    np.testing.assert_array_equal(fm.data.data[:5], p.audio_embedding.data[toks])
    assert fm.pad_mask.tolist() == [False] * 5 + [True] * (L - 5)


def test_audio_pooling_shape_and_constant_sequence():
    fm = encode_audio(list(range(8)), params(stride=2))
    assert (~fm.pad_mask).sum() == 4 and fm.data.shape == (L, C)
    p = params(stride=3)
    p.zero_positions()
    rows = encode_audio([6] * 10, p).data.data[:4]
    for r in rows:
        np.testing.assert_allclose(r, p.audio_embedding.data[6], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        encode_audio([len(PHONEMES)], p)


def test_long_sequences_truncate_to_length():
    p = params(stride=1)
    assert encode_text([1] * 40, p).data.shape == (L, C)
    assert not encode_audio([1] * 40, p).pad_mask.any()


def test_batched_encoding_matches_single():
    p = params()
    seqs = [(1, 2), (), (3, 4, 5, 6)]
    batch = encode_text(list(seqs), p)
    for i, s in enumerate(seqs):
        np.testing.assert_array_equal(batch.data.data[i], encode_text(list(s), p).data.data)
    abatch = encode_audio([(1, 2, 3, 4), (5,)], p)
    np.testing.assert_array_equal(abatch.data.data[1], encode_audio([5], p).data.data)


def test_padded_rows_zero_and_gradients():
    rng = np.random.default_rng(2)
    p = params(stride=2)
    w = rng.normal(size=(2, L, C))
    fn = lambda: ag.sum_(ag.mul(encode_audio([(1, 2, 3), (4, 4, 7, 8, 9)], p).data, w))
    errors = ag.check_gradients(fn, {"emb": p.audio_embedding}, max_entries=30, rng=rng)
    assert errors["emb"] < 1e-6


def test_feature_map_validation():
    with pytest.raises(ValueError):
        FeatureMap(ag.Tensor(np.zeros((2, C))), "pictures", np.zeros(2, bool))
    with pytest.raises(ag.ShapeError):
        FeatureMap(ag.Tensor(np.zeros((2, C))), "text", np.zeros(3, bool))
