import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icflow.latentseq import (
    ChannelStats,
    CodecError,
    TokenGrid,
    build_sequence,
    decode,
    encode,
    read_dataset,
    reconstruction_metrics,
    ssim,
    write_dataset,
)


def test_encode_shape():
    g = encode(np.random.default_rng(0).random((3, 8, 8), dtype=np.float32), 4)
    assert g.shape == (2, 2, 48)


def test_encode_rejects_indivisible():
    with pytest.raises(CodecError):
        encode(np.zeros((3, 8, 6), dtype=np.float32), 4)


def test_decode_rejects_bad_channels():
    with pytest.raises(CodecError):
        decode(TokenGrid(np.zeros((4, 10), dtype=np.float32), 2, 2), 2)


def test_constant_image_identical_tokens():
    g = encode(np.full((3, 8, 12), 0.3, dtype=np.float32), 4)
    assert np.all(g.tokens == g.tokens[0])


@settings(max_examples=50, deadline=None)
@given(c=st.integers(1, 4), gh=st.integers(1, 5), gw=st.integers(1, 5), p=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_roundtrip_exact(c, gh, gw, p, seed):
    img = np.random.default_rng(seed).random((c, gh * p, gw * p), dtype=np.float32)
    assert np.array_equal(decode(encode(img, p), p, c), img)


def test_patch_is_spatially_local():
    img = np.zeros((3, 8, 8), dtype=np.float32)
    img[:, 4:8, 0:4] = 1.0
    g = encode(img, 4)
    assert np.all(g.tokens[2] == 1.0) and np.all(np.delete(g.tokens, 2, axis=0) == 0.0)


def test_build_sequence_no_context():
    tgt = TokenGrid(np.arange(8, dtype=np.float32).reshape(4, 2), 2, 2)
    seq = build_sequence(tgt)
    assert np.array_equal(seq.tokens, tgt.tokens)
    assert all(p.t == 0 for p in seq.positions) and seq.target_len == 4


def test_build_sequence_mixed_sizes():
    rng = np.random.default_rng(0)
    tgt = TokenGrid(rng.random((4, 3)), 2, 2)
    ctx = TokenGrid(rng.random((9, 3)), 3, 3)
    ctx2 = TokenGrid(rng.random((2, 3)), 1, 2)
    seq = build_sequence(tgt, [ctx, ctx2])
    assert len(seq.tokens) == 15 and seq.target_len == 4
    assert max(p.t for p in seq.positions) == 2
    assert all((p.t == 0) == (i < 4) for i, p in enumerate(seq.positions))
    assert np.array_equal(seq.tokens[4:13], ctx.tokens)


def test_metrics_identical():
    img = np.random.default_rng(0).random((3, 16, 16))
    p, s = reconstruction_metrics(img, img)
    assert p == math.inf and s == pytest.approx(1.0, abs=1e-12)


def test_metrics_zero_vs_one():
    p, _ = reconstruction_metrics(np.zeros((3, 16, 16)), np.ones((3, 16, 16)))
    assert p == pytest.approx(0.0, abs=1e-12)


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(1)
    a, b = rng.random((3, 20, 20)), rng.random((3, 20, 20))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) < 1


def test_ssim_matches_skimage():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(2)
    a = rng.random((32, 32))
    b = np.clip(a + 0.1 * rng.standard_normal((32, 32)), 0, 1)
    ref = skm.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
    # skimage averages over a reflect-padded full image; the valid-region mean is close but not equal
    assert ssim(a, b) == pytest.approx(ref, abs=0.02)


def test_metrics_shape_mismatch():
    with pytest.raises(CodecError):
        reconstruction_metrics(np.zeros((3, 4, 4)), np.zeros((3, 4, 8)))


def test_channel_stats_roundtrip():
    x = np.random.default_rng(0).random((10, 4, 6)).astype(np.float32)
    s = ChannelStats.fit(x)
    np.testing.assert_allclose(s.denormalize(s.normalize(x)), x, atol=1e-6)


@pytest.mark.parametrize("fmt", ["raw", "png"])
def test_dataset_file_roundtrip(tmp_path, fmt):
    imgs = (np.random.default_rng(0).integers(0, 256, (3, 3, 8, 8)) / 255.0).astype(np.float32)
    stats = ChannelStats(np.zeros(48, np.float32), np.ones(48, np.float32))
    path = write_dataset(tmp_path / "d.icft", {"patch": 4, "vocab": ["a", "b"]}, {"x": imgs}, [{"i": 0}, {"i": 1}, {"i": 2}], stats, fmt)
    meta, images, records, stats2 = read_dataset(path)
    assert meta["patch"] == 4 and meta["vocab"] == ["a", "b"] and records[1] == {"i": 1}
    np.testing.assert_allclose(images["x"], imgs, atol=1e-6 if fmt == "png" else 0)
    assert np.array_equal(stats2.std, stats.std)
