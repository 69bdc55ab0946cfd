"""RGB / optical-flow clip loading, temporal sampling and spatial augmentation.

Flow is never estimated here: it arrives as precomputed ``[F, H, W, 2]``
tensors (horizontal, vertical displacement in pixels) paired with the RGB clip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mmt
from .audio import AudioClip, SpectrogramStream, ingest_audio
from .model_spec import SPEC_HEIGHT, SPEC_WIDTH

CLIP_FRAMES = 64


class ManifestError(ValueError):
    pass


@dataclass
class VideoClip:
    frames: np.ndarray  # [F, H, W, 3]
    fps: int = 25

    def __post_init__(self):
        _check_clip(self.frames, 3, "video")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FlowClip:
    frames: np.ndarray  # [F, H, W, 2]

    def __post_init__(self):
        _check_clip(self.frames, 2, "flow")


def _check_clip(frames: np.ndarray, channels: int, what: str) -> None:
    if frames.ndim != 4 or frames.shape[-1] != channels:
        raise ManifestError(f"{what} tensor must be [F, H, W, {channels}], got dims {list(frames.shape)}")
    if frames.shape[0] < 1:
        raise ManifestError(f"{what} clip has no frames")


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    video: Path
    verb: int
    noun: int
    flow: Path | None = None
    audio: Path | None = None


def read_manifest(path: str | Path, n_verbs: int | None = None, n_nouns: int | None = None) -> list[ManifestEntry]:
    """Parse a JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, list):
        raise ManifestError(f"{path}: manifest must be a JSON array")
    base = path.parent
    out = []
    seen = set()
    for i, item in enumerate(raw):
        try:
            cid = str(item["clip_id"])
            entry = ManifestEntry(
                clip_id=cid,
                video=base / item["video"],
                verb=int(item["verb"]),
                noun=int(item["noun"]),
                flow=base / item["flow"] if item.get("flow") else None,
                audio=base / item["audio"] if item.get("audio") else None,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{path}: entry {i} is malformed ({e})") from None
        if cid in seen:
            raise ManifestError(f"{path}: duplicate clip_id {cid!r}")
        seen.add(cid)
        _check_labels(entry, n_verbs, n_nouns)
        out.append(entry)
    return out


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    base = Path(path).resolve().parent

    def rel(p):
        # stored relative to the manifest when possible, else absolute
        if p is None:
            return None
        p = Path(p).resolve()
        return str(p.relative_to(base)) if p.is_relative_to(base) else str(p)

    items = []
    for e in entries:
        d = {"clip_id": e.clip_id, "video": rel(e.video), "verb": e.verb, "noun": e.noun}
        if e.flow is not None:
            d["flow"] = rel(e.flow)
        if e.audio is not None:
            d["audio"] = rel(e.audio)
        items.append(d)
    Path(path).write_text(json.dumps(items, indent=1) + "\n")


def _check_labels(e: ManifestEntry, n_verbs, n_nouns) -> None:
    if e.verb < 0 or (n_verbs is not None and e.verb >= n_verbs):
        raise ManifestError(f"clip {e.clip_id}: verb label {e.verb} out of range")
    if e.noun < 0 or (n_nouns is not None and e.noun >= n_nouns):
        raise ManifestError(f"clip {e.clip_id}: noun label {e.noun} out of range")


def _load_mmt(path: Path, what: str) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return mmt.load(path)


def load_clip(entry: ManifestEntry, n_verbs: int | None = None, n_nouns: int | None = None):
    """Load (VideoClip, FlowClip | None, AudioClip | SpectrogramStream | None).

    Audio may be a ``.wav`` file (decoded to a 16 kHz clip) or a precomputed
    ``[F, 96, 64]`` ``.mmt`` spectrogram stream.
    """
    _check_labels(entry, n_verbs, n_nouns)
    video = VideoClip(_load_mmt(entry.video, "video"))
    flow = None
    if entry.flow is not None:
        flow = FlowClip(_load_mmt(entry.flow, "flow"))
        if flow.frames.shape[:3] != video.frames.shape[:3]:
            raise ManifestError(
                f"clip {entry.clip_id}: flow dims {list(flow.frames.shape)} do not pair with video {list(video.frames.shape)}"
            )
    audio = None
    if entry.audio is not None:
        if not entry.audio.exists():
            raise FileNotFoundError(f"audio file not found: {entry.audio}")
        if entry.audio.suffix == ".mmt":
            spec = mmt.load(entry.audio)
            if spec.ndim != 3 or spec.shape[1:] != (SPEC_HEIGHT, SPEC_WIDTH):
                raise ManifestError(f"clip {entry.clip_id}: spectrogram must be [F, 96, 64], got {list(spec.shape)}")
            if spec.shape[0] != video.n_frames:
                raise ManifestError(f"clip {entry.clip_id}: spectrogram has {spec.shape[0]} frames, video {video.n_frames}")
            audio = SpectrogramStream(spec, normalized=True)
        else:
            audio = ingest_audio(entry.audio.read_bytes())
    return video, flow, audio


# ------------------------------------------------------------------ temporal


def loop_frames(frames: np.ndarray, length: int) -> np.ndarray:
    """Extend a clip to ``length`` frames by cyclic repetition (no-op if long enough)."""
    n = frames.shape[0]
    if n >= length:
        return frames
    return frames[np.arange(length) % n]


def temporal_sample(n: int, target: int = CLIP_FRAMES, stride: int = 1, mode: str = "train",
                    rng: np.random.Generator | None = None) -> list[int]:
    """Start indices into a clip of ``n`` frames, looped first if shorter than the span.

    Train mode draws one uniform start; eval mode returns the four fixed
    crop starts.
    """
    if n < 1:
        raise ValueError("clip must have at least one frame")
    span = (target - 1) * stride + 1
    n = max(n, span)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        return [int(rng.integers(0, n - span + 1))]
    if mode == "eval":
        return four_crop_starts(n, span)
    raise ValueError(f"unknown mode {mode!r}")


def four_crop_starts(n: int, length: int = CLIP_FRAMES) -> list[int]:
    if n < length:
        raise ValueError(f"clip of {n} frames is shorter than crop length {length}")
    return [int(round(i * (n - length) / 3)) for i in range(4)]


def take_window(frames: np.ndarray, start: int, target: int = CLIP_FRAMES, stride: int = 1) -> np.ndarray:
    span = (target - 1) * stride + 1
    frames = loop_frames(frames, span)
    return frames[start : start + span : stride]


# ------------------------------------------------------------------- spatial


@dataclass(frozen=True)
class AugmentConfig:
    target: tuple[int, int] = (224, 224)
    min_scale: float = 0.9
    max_scale: float = 1.33
    crop_prob: float = 1.0
    flip_prob: float = 0.5

    def __post_init__(self):
        if not 0.9 <= self.min_scale <= self.max_scale <= 1.33:
            raise ValueError("scale range must lie within [0.9, 1.33]")


@dataclass(frozen=True)
class SpatialParams:
    scale: float
    top: int
    left: int
    flip: bool


def resize_bilinear(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [F, H, W, C] with half-pixel centres and edge clamping."""
    _, h, w, _ = frames.shape
    if (out_h, out_w) == (h, w):
        return frames.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(frames.dtype)

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    rows = frames[:, y0] * (1 - wy)[None, :, None, None] + frames[:, y1] * wy[None, :, None, None]
    return rows[:, :, x0] * (1 - wx)[None, None, :, None] + rows[:, :, x1] * wx[None, None, :, None]


def sample_spatial_params(rng: np.random.Generator, src_hw: tuple[int, int], cfg: AugmentConfig) -> SpatialParams:
    """Scale relative to the source frame; the lower bound rises when needed so the crop fits."""
    th, tw = cfg.target
    lo = max(cfg.min_scale, th / src_hw[0], tw / src_hw[1])
    scale = float(rng.uniform(lo, max(lo, cfg.max_scale)))
    h, w = (max(int(round(d * scale)), t) for d, t in zip(src_hw, cfg.target))
    if rng.uniform() < cfg.crop_prob:
        top = int(rng.integers(0, h - th + 1))
        left = int(rng.integers(0, w - tw + 1))
    else:
        top, left = (h - th) // 2, (w - tw) // 2
    flip = bool(rng.uniform() < cfg.flip_prob)
    return SpatialParams(scale, top, left, flip)


def apply_spatial(video: VideoClip, flow: FlowClip | None, p: SpatialParams, target: tuple[int, int]):
    """Resize by ``p.scale``, crop to ``target``, optionally mirror; flow gets the same geometry."""
    _, h, w, _ = video.frames.shape
    sh, sw = int(round(h * p.scale)), int(round(w * p.scale))
    th, tw = target
    if p.top < 0 or p.left < 0 or p.top + th > sh or p.left + tw > sw:
        raise ValueError(f"crop {th}x{tw} at ({p.top},{p.left}) exceeds scaled frame {sh}x{sw}")

    def geo(frames):
        out = resize_bilinear(frames, sh, sw)[:, p.top : p.top + th, p.left : p.left + tw]
        return out[:, :, ::-1] if p.flip else out

    v = VideoClip(np.ascontiguousarray(geo(video.frames)), video.fps)
    if flow is None:
        return v, None
    f = geo(flow.frames)
    # displacements are in pixels, so they follow the resize and the mirror
    f = f * np.array([sw / w, sh / h], dtype=f.dtype)
    if p.flip:
        f = f * np.array([-1.0, 1.0], dtype=f.dtype)
    return v, FlowClip(np.ascontiguousarray(f))


def augment_spatial(video: VideoClip, flow: FlowClip | None, rng: np.random.Generator, cfg: AugmentConfig):
    p = sample_spatial_params(rng, video.frames.shape[1:3], cfg)
    return apply_spatial(video, flow, p, cfg.target)


def center_crop(video: VideoClip, flow: FlowClip | None, target: tuple[int, int]):
    """Deterministic eval-path crop (no resize, no flip)."""
    _, h, w, _ = video.frames.shape
    th, tw = target
    if th > h or tw > w:
        raise ValueError(f"crop {th}x{tw} larger than frame {h}x{w}")
    return apply_spatial(video, flow, SpatialParams(1.0, (h - th) // 2, (w - tw) // 2, False), target)
