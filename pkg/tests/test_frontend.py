import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyramid_asr.errors import DimensionError, WavParseError
from pyramid_asr.frontend import (ConvSubsample, Embedding, Waveform, frame_count, hz_to_mel, log_mel_filterbank,
                                  mel_filters, mel_to_hz, positional_encoding, read_features, read_wav,
                                  subsampled_length, write_features, write_wav)
from pyramid_asr.module import Context
from pyramid_asr.tensor import Tensor


def wav_bytes(pcm, rate=16000, channels=1, bits=16, code=1):
    fmt = struct.pack("<IHHIIHH", 16, code, channels, rate, rate * 2, 2, bits)
    return b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE" + b"fmt " + fmt + b"data" + struct.pack(
        "<I", len(pcm)) + pcm


# -- WAV -----------------------------------------------------------------------

def test_minimal_wav_four_zeros():
    w = read_wav(wav_bytes(b"\x00" * 8))
    assert w.sample_rate == 16000
    assert np.array_equal(w.samples, np.zeros(4))


def test_full_scale_sample():
    w = read_wav(wav_bytes(struct.pack("<h", 32767)))
    assert w.samples[0] == 32767 / 32768


def test_truncated_data_chunk_reports_offset():
    raw = wav_bytes(b"\x01\x00" * 10)[:-6]
    with pytest.raises(WavParseError) as exc:
        read_wav(raw)
    assert exc.value.offset == 44
    assert "offset 44" in str(exc.value)


@pytest.mark.parametrize("raw,offset", [
    (b"RIFX" + b"\x00" * 40, 0),
    (b"RIFF\x00\x00\x00\x00WAVX" + b"\x00" * 32, 8),
    (wav_bytes(b"", channels=2), 22),
    (wav_bytes(b"", bits=8), 34),
    (wav_bytes(b"", code=3), 20),
    (b"RIFF", 4),
])
def test_malformed_headers(raw, offset):
    with pytest.raises(WavParseError) as exc:
        read_wav(raw)
    assert exc.value.offset == offset


def test_skips_unknown_chunks():
    base = wav_bytes(struct.pack("<2h", 100, -100))
    raw = base[:12] + b"LIST" + struct.pack("<I", 3) + b"abc\x00" + base[12:]
    assert np.allclose(read_wav(raw).samples, [100 / 32768, -100 / 32768])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-32768, 32767), min_size=0, max_size=200))
def test_wav_roundtrip_lossless(ints):
    w = Waveform(np.array(ints, dtype=np.float64) / 32768.0)
    back = read_wav(write_wav(w))
    assert np.array_equal(back.samples, w.samples)
    assert write_wav(back) == write_wav(w)


# -- filterbank ------------------------------------------------------------------

def test_mel_scale_roundtrip():
    f = np.array([0.0, 440.0, 1000.0, 8000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f)
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))


def test_mel_filters_shape_and_span():
    fb = mel_filters(80, 512, 16000)
    assert fb.shape == (257, 80)
    assert (fb >= 0).all() and (fb.max(axis=0) > 0).all()
    # each band peaks once and bands are ordered in frequency
    assert np.all(np.diff(fb.argmax(axis=0)) >= 0)


def test_one_second_gives_98_frames():
    w = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, 16000))
    assert log_mel_filterbank(w).shape == (98, 80)
    assert frame_count(16000, 400, 160) == 98


def test_silence():
    w = Waveform(np.zeros(4000))
    raw = log_mel_filterbank(w, normalize=False)
    assert np.all(raw == raw[0, 0])
    assert raw[0, 0] == pytest.approx(np.log(1e-10))
    assert np.array_equal(log_mel_filterbank(w), np.zeros_like(raw))


def test_sine_peak_band_matches_direct_dft():
    sr = 16000
    t = np.arange(sr // 2) / sr
    w = Waveform(0.5 * np.sin(2 * np.pi * 440 * t))
    feats = log_mel_filterbank(w, normalize=False)
    bands = feats.argmax(axis=1)
    assert np.all(bands == bands[0])
    # independent oracle: direct O(N^2) DFT of one windowed frame, no FFT
    frame = w.samples[:400] * (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400))
    n = np.arange(512)
    k = np.arange(257)[:, None]
    padded = np.concatenate([frame, np.zeros(112)])
    spec = np.abs((padded * np.exp(-2j * np.pi * k * n / 512)).sum(axis=1)) ** 2
    energies = spec @ mel_filters(80, 512, sr)
    assert int(np.argmax(energies)) == bands[0]


def test_rejects_wrong_rate_and_short_audio():
    with pytest.raises(ValueError):
        log_mel_filterbank(Waveform(np.zeros(16000), 8000))
    with pytest.raises(ValueError):
        log_mel_filterbank(Waveform(np.zeros(399)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(400, 3000))
def test_polarity_invariance(seed, n):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    assert np.array_equal(log_mel_filterbank(Waveform(x)), log_mel_filterbank(Waveform(-x)))


def test_normalized_features_are_standardized():
    x = np.random.default_rng(5).normal(0, 0.2, 8000).clip(-1, 1)
    f = log_mel_filterbank(Waveform(x))
    assert np.allclose(f.mean(axis=0), 0, atol=1e-9)
    assert np.allclose(f.std(axis=0), 1, atol=1e-6)


def test_feature_cache_roundtrip(tmp_path):
    f = np.random.default_rng(0).normal(size=(7, 80)).astype(np.float32)
    write_features(tmp_path / "a.pyrf", f)
    raw = (tmp_path / "a.pyrf").read_bytes()
    assert raw[:4] == b"PYRF" and struct.unpack("<III", raw[4:16]) == (1, 7, 80)
    assert np.array_equal(read_features(tmp_path / "a.pyrf"), f.astype(np.float64))
    (tmp_path / "b.pyrf").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_features(tmp_path / "b.pyrf")


# -- positional encoding ---------------------------------------------------------

def test_pe_examples():
    pe = positional_encoding(4, 8)
    assert np.array_equal(pe[0], [0, 1] * 4)
    assert pe[1, 0] == pytest.approx(0.841471, abs=1e-6)
    with pytest.raises(ValueError):
        positional_encoding(4, 7)


def test_pe_range():
    pe = positional_encoding(500, 64)
    assert np.abs(pe).max() <= 1.0


def pe_rotation_error(pos, k, d_model=256):
    pe = positional_encoding(pos + k + 1, d_model)
    omega = 10000.0 ** (-np.arange(0, d_model, 2) / d_model)
    c, s = np.cos(k * omega), np.sin(k * omega)
    sin_p, cos_p = pe[pos, 0::2], pe[pos, 1::2]
    rebuilt = np.empty(d_model)
    rebuilt[0::2] = c * sin_p + s * cos_p
    rebuilt[1::2] = -s * sin_p + c * cos_p
    return np.abs(rebuilt - pe[pos + k]).max()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2000), st.integers(0, 500))
def test_pe_offset_is_rotation(pos, k):
    assert pe_rotation_error(pos, k) < 1e-9


# -- subsampling and embedding ---------------------------------------------------

def test_subsampled_lengths():
    assert subsampled_length(100) == 25
    assert subsampled_length(4) == 1
    assert list(subsampled_length(np.array([5, 6, 9]))) == [2, 2, 3]


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 60))
def test_embed_length_law(T):
    emb = Embedding(np.random.default_rng(0), 80, 8)
    out = emb(np.zeros((T, 80)))
    assert out.shape == (-(-(-(-T // 2)) // 2), 8)
    assert out.shape[0] <= T


def test_embed_shape_and_too_short():
    emb = Embedding(np.random.default_rng(0), 80, 16)
    assert emb(np.random.default_rng(1).normal(size=(100, 80))).shape == (25, 16)
    with pytest.raises(DimensionError):
        ConvSubsample(np.random.default_rng(0), 80, 16)(Tensor(np.zeros((3, 80))))


def test_embed_zero_weights_is_positional_encoding():
    emb = Embedding(np.random.default_rng(0), 80, 16)
    for p in emb.parameters():
        p.data[:] = 0
    out = emb(np.zeros((40, 80))).numpy()
    assert np.array_equal(out, positional_encoding(10, 16))


def test_embed_infer_deterministic_train_random():
    emb = Embedding(np.random.default_rng(0), 80, 16)
    x = np.random.default_rng(1).normal(size=(20, 80))
    assert np.array_equal(emb(x).numpy(), emb(x).numpy())
    a = emb(x, ctx=Context(train=True, rng=np.random.default_rng(2))).numpy()
    assert not np.array_equal(a, emb(x).numpy())


def test_embed_padding_does_not_leak():
    emb = Embedding(np.random.default_rng(0), 80, 8)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(17, 80))
    padded = np.concatenate([x, rng.normal(size=(6, 80)) * 50])
    alone = emb(x[None]).numpy()[0]
    batch = emb(padded[None], np.array([17])).numpy()[0]
    T = int(subsampled_length(17))
    assert np.allclose(alone[:T], batch[:T]) and np.all(batch[T:] == 0)
