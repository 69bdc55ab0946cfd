import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmvt import audio as A
from oracles import dft_peak_hz, htk_mel, mel_bin_for, mel_centers_hz

SR = A.SAMPLE_RATE


def tone(f, seconds, rate=SR, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * f * t)


# ------------------------------------------------------------------ ingest


def test_identical_stereo_channels_average_to_mono(rng):
    x = rng.uniform(-0.5, 0.5, 800)
    stereo = A.ingest_audio(A.write_wav(np.stack([x, x], axis=1), SR))
    mono = A.ingest_audio(A.write_wav(x, SR))
    np.testing.assert_array_equal(stereo.samples, mono.samples)
    np.testing.assert_allclose(mono.samples, x, atol=1 / 32767)


@pytest.mark.parametrize("n", [1000, 1001, 4097])
def test_downsampling_halves_length(n):
    clip = A.ingest_audio(A.write_wav(np.zeros(n), 32000))
    assert clip.sample_rate == SR
    assert abs(len(clip.samples) - n // 2) <= 1


def test_resampled_tone_keeps_its_frequency():
    clip = A.ingest_audio(A.write_wav(tone(440, 0.5, 48000), 48000))
    assert dft_peak_hz(clip.samples, SR) == pytest.approx(440, abs=2)


def _wav(fmt, bits, channels, payload, rate=SR):
    block = channels * bits // 8
    f = struct.pack("<HHIIHH", fmt, channels, rate, rate * block, block, bits)
    return b"RIFF" + struct.pack("<I", 4 + 8 + 16 + 8 + len(payload)) + b"WAVE" + b"fmt " + struct.pack("<I", 16) + f \
        + b"data" + struct.pack("<I", len(payload)) + payload


@pytest.mark.parametrize(
    "fmt,bits,payload,want",
    [
        (1, 8, bytes([0, 128, 255]), [-1.0, 0.0, 127 / 128]),
        (1, 16, struct.pack("<3h", -32768, 0, 16384), [-1.0, 0.0, 0.5]),
        (1, 24, bytes([0, 0, 0x80, 0, 0, 0, 0, 0, 0x40]), [-1.0, 0.0, 0.5]),
        (3, 32, struct.pack("<3f", -0.25, 0.0, 2.0), [-0.25, 0.0, 1.0]),
    ],
    ids=["pcm8", "pcm16", "pcm24", "float32"],
)
def test_encodings_scale_to_unit_range(fmt, bits, payload, want):
    np.testing.assert_allclose(A.ingest_audio(_wav(fmt, bits, 1, payload)).samples, want)


@pytest.mark.parametrize(
    "data",
    [b"", b"RIFF\0\0\0\0WAVX", _wav(2, 16, 1, b"\0\0"), _wav(1, 12, 1, b"\0\0\0"),
     b"RIFF" + struct.pack("<I", 4) + b"WAVE"],
    ids=["empty", "not-wave", "adpcm", "12-bit", "no-chunks"],
)
def test_bad_wav_raises(data):
    with pytest.raises(A.WavError):
        A.ingest_audio(data)


# -------------------------------------------------------------------- STFT


def test_zero_audio_has_zero_power():
    assert not A.stft_power(A.AudioClip(np.zeros(2000), SR)).any()


def test_1khz_tone_peaks_at_bin_32():
    power = A.stft_power(A.AudioClip(tone(1000, 0.2, amp=1.0), SR))
    assert set(np.argmax(power, axis=1)) == {round(1000 * 512 / 16000)}


def test_parseval(rng):
    x = rng.normal(size=400)
    windowed = x * A.hann(400)
    p = A.stft_power(A.AudioClip(x, SR))[0]
    spectrum_energy = (p[0] + 2 * p[1:-1].sum() + p[-1]) / 512
    assert spectrum_energy == pytest.approx(np.sum(windowed ** 2), rel=1e-3)


def test_stft_rejects_short_clip():
    with pytest.raises(ValueError):
        A.stft_power(A.AudioClip(np.zeros(399), SR))


# ------------------------------------------------------------- filterbank


def test_filterbank_support_and_shape():
    fb = A.build_mel_filterbank()
    assert fb.matrix.shape == (64, 257)
    hz = np.arange(257) * SR / 512
    outside = (hz <= 125) | (hz >= 7500)
    assert not fb.matrix[:, outside].any()
    assert (fb.matrix >= 0).all()
    assert (fb.matrix.max(axis=1) > 0).all()


def test_filterbank_centres_equally_spaced_in_mel():
    fb = A.build_mel_filterbank()
    mels = np.array([htk_mel(f) for f in fb.edges_hz])
    np.testing.assert_allclose(np.diff(mels), np.diff(mels)[0], atol=1e-9)
    assert mels[0] == pytest.approx(htk_mel(125)) and mels[-1] == pytest.approx(htk_mel(7500))
    np.testing.assert_allclose(fb.edges_hz[1:-1], mel_centers_hz(), rtol=1e-9)


def test_1khz_tone_lands_in_mel_bin_20():
    want = mel_bin_for(1000.0)
    assert abs(want - 20) <= 1
    mel = A.stft_power(A.AudioClip(tone(1000, 0.2), SR)) @ A.build_mel_filterbank().matrix.T
    assert abs(int(np.argmax(mel.mean(axis=0))) - want) <= 1


def test_filterbank_rejects_bad_edges():
    with pytest.raises(ValueError):
        A.build_mel_filterbank(f_lo=7500, f_hi=125)
    with pytest.raises(ValueError):
        A.build_mel_filterbank(f_hi=9000)


def test_tone_sweep_is_monotone():
    fb = A.build_mel_filterbank().matrix
    bins = []
    for f in np.linspace(200, 7000, 40):
        p = A.stft_power(A.AudioClip(tone(f, 0.1), SR))
        bins.append(int(np.argmax((p @ fb.T).mean(axis=0))))
    assert bins == sorted(bins)


# ----------------------------------------------------------------- stream


def test_64_frames_of_audio_give_64_images():
    s = A.extract_stream(A.AudioClip(tone(1000, 2.56), SR), 64)
    assert s.frames.shape == (64, 96, 64)
    assert not s.normalized


def test_silence_gives_constant_stream():
    s = A.extract_stream(A.AudioClip(np.zeros(SR), SR), 8)
    np.testing.assert_array_equal(s.frames, np.log(A.LOG_OFFSET))
    assert not A.normalize_stream(s).frames.any()


def test_short_audio_is_zero_padded():
    s = A.extract_stream(A.AudioClip(tone(500, 0.3), SR), 16)
    assert s.n_frames == 16
    # the last image starts at 600 ms, after the audio ends
    np.testing.assert_array_equal(s.frames[-1], np.log(A.LOG_OFFSET))


def test_frame_i_starts_at_i_times_40ms(rng):
    x = rng.normal(size=3 * SR)
    s = A.extract_stream(A.AudioClip(x, SR), 10)
    shifted = A.extract_stream(A.AudioClip(x[640 * 3 :], SR), 4)
    np.testing.assert_allclose(s.frames[3:7], shifted.frames, atol=1e-9)


def test_stream_rejects_no_frames():
    with pytest.raises(ValueError):
        A.extract_stream(A.AudioClip(np.zeros(100), SR), 0)


# ---------------------------------------------------------- normalization


def stream(x):
    return A.SpectrogramStream(np.asarray(x, dtype=np.float64))


def test_normalize_example():
    out = A.normalize_stream(stream(np.arange(11.0).reshape(1, 1, 11))).frames.ravel()
    np.testing.assert_allclose(out, np.linspace(-1, 1, 11), atol=1e-15)
    assert out[0] == -1.0 and out[-1] == 1.0


def test_constant_stream_normalizes_to_zero():
    assert not A.normalize_stream(stream(np.full((2, 3, 4), 7.0))).frames.any()


nonconstant = arrays(np.float64, (2, 3, 4), elements=st.floats(-100, 100)).filter(lambda x: np.ptp(x) > 1e-3)


@given(nonconstant)
def test_normalized_range_is_exact(x):
    y = A.normalize_stream(stream(x)).frames
    assert y.min() == -1.0 and y.max() == 1.0


@given(nonconstant, st.floats(0.01, 100), st.floats(-100, 100))
def test_normalize_is_affine_invariant_and_idempotent(x, a, b):
    y = A.normalize_stream(stream(x)).frames
    np.testing.assert_allclose(A.normalize_stream(stream(a * x + b)).frames, y, atol=1e-9)
    np.testing.assert_allclose(A.normalize_stream(stream(y)).frames, y, atol=1e-12)


# ------------------------------------------------------------ SpecAugment


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_masked_cell_count(seed):
    x = stream(np.random.default_rng(seed).uniform(0.1, 1.0, (3, 96, 64)))
    out = A.spec_augment(x, np.random.default_rng(seed)).frames
    m = A.sample_mask(np.random.default_rng(seed))
    zeros = (out == 0).sum(axis=(1, 2))
    assert (zeros == 64 * m.t + 96 * m.f - m.t * m.f).all()
    assert (zeros == m.masked_cells()).all()
    # identical mask on every image; unmasked cells untouched
    assert ((out == 0) == (out[0] == 0)).all()
    np.testing.assert_array_equal(out[out != 0], x.frames[out != 0])


def test_empty_mask_is_identity(rng):
    x = stream(rng.uniform(size=(2, 96, 64)))
    np.testing.assert_array_equal(A.apply_mask(x, A.SpecAugmentMask(5, 0, 3, 0)).frames, x.frames)


def test_spec_augment_is_deterministic(rng):
    x = stream(rng.uniform(size=(2, 96, 64)))
    a = A.spec_augment(x, np.random.default_rng(3)).frames
    b = A.spec_augment(x, np.random.default_rng(3)).frames
    assert a.tobytes() == b.tobytes()


def test_mask_lengths_respect_bounds():
    r = np.random.default_rng(0)
    masks = [A.sample_mask(r) for _ in range(500)]
    assert max(m.t for m in masks) <= 96 and max(m.f for m in masks) <= 16
    assert all(m.t0 + m.t <= 96 and m.f0 + m.f <= 64 for m in masks)
