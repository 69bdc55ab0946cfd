"""Log-mel spectrogram streams aligned to 25 fps video, plus SpecAugment.

Each video frame ``i`` gets a 96x64 image built from audio starting at
``i * 40 ms``: 96 STFT frames (25 ms Hann window, 10 ms hop, 512-point FFT)
integrated into 64 HTK-mel bands between 125 Hz and 7500 Hz, then
``log(mel + 1e-6)``. The whole stream is min-max mapped onto [-1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

SAMPLE_RATE = 16000
N_FFT = 512
WINDOW_MS = 25
HOP_MS = 10
N_MELS = 64
F_LO = 125.0
F_HI = 7500.0
FRAMES_PER_IMAGE = 96
LOG_OFFSET = 1e-6


class WavError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass(frozen=True)
class MelFilterbank:
    matrix: np.ndarray  # [n_mels, n_fft // 2 + 1]
    edges_hz: np.ndarray  # [n_mels + 2]


@dataclass(frozen=True)
class SpectrogramStream:
    frames: np.ndarray  # [F, 96, 64]
    normalized: bool = False

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ------------------------------------------------------------------ ingestion

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def _decode(raw: bytes, fmt: int, bits: int, channels: int) -> np.ndarray:
    if fmt == _PCM:
        if bits == 8:
            x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
        elif bits == 16:
            x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        elif bits == 24:
            b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
            v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            x = v.astype(np.float64) / float(1 << 23)
        elif bits == 32:
            x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
        else:
            raise WavError(f"unsupported PCM bit depth {bits}")
    elif fmt == _FLOAT:
        if bits == 32:
            x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        elif bits == 64:
            x = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        else:
            raise WavError(f"unsupported float bit depth {bits}")
        x = np.clip(x, -1.0, 1.0)
    else:
        raise WavError(f"unsupported WAV encoding (format tag {fmt:#x})")
    return x.reshape(-1, channels)


def parse_wav(data: bytes) -> tuple[np.ndarray, int]:
    """Return ([samples, channels] in [-1, 1], sample_rate)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError("fmt chunk too short")
            tag, channels, rate, _, block, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _EXTENSIBLE:
                if len(body) < 26:
                    raise WavError("extensible fmt chunk too short")
                (tag,) = struct.unpack("<H", body[24:26])
            fmt = (tag, channels, rate, block, bits)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError("missing fmt chunk")
    if payload is None:
        raise WavError("missing data chunk")
    tag, channels, rate, block, bits = fmt
    if channels == 0 or rate == 0 or bits == 0:
        raise WavError("malformed fmt chunk")
    if block != channels * bits // 8:
        raise WavError(f"block align {block} inconsistent with {channels}ch x {bits} bits")
    usable = len(payload) - len(payload) % block
    return _decode(payload[:usable], tag, bits, channels), rate


def write_wav(samples: np.ndarray, sample_rate: int) -> bytes:
    """16-bit PCM WAV bytes from [n] or [n, channels] float samples."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    ch = x.shape[1]
    body = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", _PCM, ch, sample_rate, sample_rate * ch * 2, ch * 2, 16)
    return (
        b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(body)) + b"WAVE"
        + b"fmt " + struct.pack("<I", len(fmt)) + fmt
        + b"data" + struct.pack("<I", len(body)) + body
    )


def resample_linear(x: np.ndarray, src_rate: int, dst_rate: int = SAMPLE_RATE) -> np.ndarray:
    if src_rate == dst_rate:
        return x.copy()
    n_out = (len(x) * dst_rate) // src_rate
    t = np.arange(n_out, dtype=np.float64) * (src_rate / dst_rate)
    return np.interp(t, np.arange(len(x), dtype=np.float64), x)


def ingest_audio(data: bytes) -> AudioClip:
    """Decode WAV bytes to a mono 16 kHz clip."""
    x, rate = parse_wav(data)
    mono = x.mean(axis=1)
    return AudioClip(resample_linear(mono, rate), SAMPLE_RATE)


# ------------------------------------------------------------------------ DSP


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(clip: AudioClip, window_ms: float = WINDOW_MS, hop_ms: float = HOP_MS, n_fft: int = N_FFT) -> np.ndarray:
    """[frames, n_fft // 2 + 1] squared magnitudes of Hann-windowed frames."""
    win = int(round(clip.sample_rate * window_ms / 1000))
    hop = int(round(clip.sample_rate * hop_ms / 1000))
    if win > n_fft:
        raise ValueError(f"window of {win} samples exceeds n_fft={n_fft}")
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < win:
        raise ValueError(f"clip of {len(x)} samples is shorter than one {win}-sample window")
    n = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    frames = x[idx] * hann(win)
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(
    n_mels: int = N_MELS, f_lo: float = F_LO, f_hi: float = F_HI, n_fft: int = N_FFT, sr: int = SAMPLE_RATE
) -> MelFilterbank:
    """Triangles in mel space, n_mels + 2 edges evenly spaced from f_lo to f_hi."""
    if not 0 <= f_lo < f_hi <= sr / 2:
        raise ValueError(f"need 0 <= f_lo < f_hi <= sr/2, got {f_lo}, {f_hi}, sr={sr}")
    edges_mel = np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sr / n_fft)
    lower, center, upper = edges_mel[:-2, None], edges_mel[1:-1, None], edges_mel[2:, None]
    rising = (bin_mel[None, :] - lower) / (center - lower)
    falling = (upper - bin_mel[None, :]) / (upper - center)
    w = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(matrix=w, edges_hz=mel_to_hz(edges_mel))


_DEFAULT_BANK: MelFilterbank | None = None


def default_filterbank() -> MelFilterbank:
    global _DEFAULT_BANK
    if _DEFAULT_BANK is None:
        _DEFAULT_BANK = build_mel_filterbank()
    return _DEFAULT_BANK


def extract_stream(clip: AudioClip, n_frames: int, fps: int = 25) -> SpectrogramStream:
    """One unnormalized 96x64 log-mel image per video frame."""
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    if clip.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    hop = SAMPLE_RATE * HOP_MS // 1000
    win = SAMPLE_RATE * WINDOW_MS // 1000
    frame_step = SAMPLE_RATE // fps
    if frame_step % hop:
        raise ValueError(f"video frame step {frame_step} is not a multiple of the STFT hop {hop}")
    stride = frame_step // hop
    n_stft = (n_frames - 1) * stride + FRAMES_PER_IMAGE
    need = (n_stft - 1) * hop + win
    x = np.zeros(need, dtype=np.float64)
    src = np.asarray(clip.samples, dtype=np.float64)[:need]
    x[: len(src)] = src
    power = stft_power(AudioClip(x, SAMPLE_RATE))
    logmel = np.log(power @ default_filterbank().matrix.T + LOG_OFFSET)
    idx = np.arange(FRAMES_PER_IMAGE)[None, :] + stride * np.arange(n_frames)[:, None]
    return SpectrogramStream(logmel[idx], normalized=False)


def normalize_stream(s: SpectrogramStream) -> SpectrogramStream:
    """Min-max over the whole clip onto [-1, 1]; a constant stream maps to zeros."""
    x = s.frames
    lo, hi = x.min(), x.max()
    if hi == lo:
        return replace(s, frames=np.zeros_like(x), normalized=True)
    out = (x - lo) / (hi - lo) * 2.0 - 1.0
    return replace(s, frames=np.clip(out, -1.0, 1.0), normalized=True)


@dataclass(frozen=True)
class SpecAugmentMask:
    t0: int
    t: int
    f0: int
    f: int

    def masked_cells(self, n_time: int = FRAMES_PER_IMAGE, n_freq: int = N_MELS) -> int:
        return n_freq * self.t + n_time * self.f - self.t * self.f


def sample_mask(rng: np.random.Generator, max_time: int = 96, max_freq: int = 16,
                n_time: int = FRAMES_PER_IMAGE, n_freq: int = N_MELS) -> SpecAugmentMask:
    t = int(rng.integers(0, min(max_time, n_time) + 1))
    f = int(rng.integers(0, min(max_freq, n_freq) + 1))
    t0 = int(rng.integers(0, n_time - t + 1))
    f0 = int(rng.integers(0, n_freq - f + 1))
    return SpecAugmentMask(t0, t, f0, f)


def apply_mask(s: SpectrogramStream, mask: SpecAugmentMask) -> SpectrogramStream:
    out = s.frames.copy()
    out[:, mask.t0 : mask.t0 + mask.t, :] = 0
    out[:, :, mask.f0 : mask.f0 + mask.f] = 0
    return replace(s, frames=out)


def spec_augment(s: SpectrogramStream, rng: np.random.Generator, max_time: int = 96, max_freq: int = 16) -> SpectrogramStream:
    """One time mask and one frequency mask, shared by every image in the stream."""
    _, n_time, n_freq = s.frames.shape
    return apply_mask(s, sample_mask(rng, max_time, max_freq, n_time, n_freq))


def wav_to_stream(data: bytes, n_frames: int, rng: np.random.Generator | None = None) -> SpectrogramStream:
    """WAV bytes to a normalized (optionally SpecAugmented) stream."""
    s = normalize_stream(extract_stream(ingest_audio(data), n_frames))
    if rng is not None:
        s = spec_augment(s, rng)
    return s
