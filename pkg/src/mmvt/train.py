"""Two-head training: cosine-with-warmup SGD + momentum, label smoothing,
stochastic depth, spatial jitter / flips and SpecAugment.

Every random draw comes from a named stream of the run seed: sample
``(epoch, index)`` owns its augmentation stream, so assembling a batch on
several threads gives the same bytes as assembling it on one.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import mmt
from . import tensor as T
from .audio import SpectrogramStream, normalize_stream, extract_stream, spec_augment
from .model import INIT_STD, N_NOUNS, N_VERBS, MMModel, ModelConfig, forward, tiny_config, view_inputs
from .model_spec import SPEC_HEIGHT, SPEC_WIDTH, Modality, ModelSpec, parse_model_spec
from .seeding import stream
from .visual import (
    AugmentConfig,
    FlowClip,
    ManifestEntry,
    VideoClip,
    augment_spatial,
    center_crop,
    load_clip,
    take_window,
    temporal_sample,
    write_manifest,
)

MOMENTUM = 0.9


# ------------------------------------------------------------ optimisation


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.4
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})")


def lr_at(s: Schedule, step: int) -> float:
    """Linear warmup from 0 to base_lr, then half-cosine down to 0 at total_steps."""
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return 0.5 * s.base_lr * (1.0 + math.cos(math.pi * progress))


def two_head_loss(verb_logits: T.Tensor, noun_logits: T.Tensor, verb_target, noun_target,
                  smoothing: float = 0.1, reduction: str = "mean") -> T.Tensor:
    """Verb CE + noun CE, equally weighted. Accepts single-clip ``[C]`` logits too."""
    if verb_logits.ndim == 1:
        verb_logits = verb_logits.reshape(1, -1)
        noun_logits = noun_logits.reshape(1, -1)
    vt = [verb_target] if np.ndim(verb_target) == 0 else list(verb_target)
    nt = [noun_target] if np.ndim(noun_target) == 0 else list(noun_target)
    return T.add(
        T.cross_entropy_smoothed(verb_logits, vt, smoothing, reduction),
        T.cross_entropy_smoothed(noun_logits, nt, smoothing, reduction),
    )


@dataclass
class OptState:
    momentum: float = MOMENTUM
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def sgd_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], opt: OptState, lr: float) -> dict[str, T.Tensor]:
    """v <- mu * v + g;  p <- p - lr * v.  Returns fresh parameter tensors."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad dims {list(g.shape)} != param dims {p.dims}")
        v = opt.buffers.get(name)
        v = g.copy() if v is None else opt.momentum * v + g
        if v.shape != p.shape:
            raise ValueError(f"{name}: momentum buffer dims {list(v.shape)} != param dims {p.dims}")
        opt.buffers[name] = v.astype(p.dtype, copy=False)
        out[name] = T.Tensor((p.data - p.dtype.type(lr) * opt.buffers[name]).astype(p.dtype), requires_grad=True)
    opt.step += 1
    return out


# ------------------------------------------------------------------- data


@dataclass
class Sample:
    clip_id: str
    verb: int
    noun: int
    video: np.ndarray  # [F, H, W, 3]
    flow: np.ndarray | None = None  # [F, H, W, 2]
    spectrogram: np.ndarray | None = None  # [F, 96, 64], normalized


@dataclass
class SyntheticDataset:
    samples: list[Sample]
    n_verbs: int
    n_nouns: int
    seed: int


def _verb_wave(k: int, n_verbs: int, frames: int) -> np.ndarray:
    # class k oscillates at (k + 1) / (2 * n_verbs) cycles per frame
    f = np.arange(frames)
    return np.cos(2.0 * np.pi * f * (k + 1) / (2.0 * n_verbs))


def _noun_ramp(k: int, n_nouns: int, h: int, w: int) -> np.ndarray:
    """Linear brightness ramp whose direction encodes the class.

    Local slopes survive random crops exactly and scale jitter only rescales
    them. A horizontal flip negates the x-slope, so classes differ in
    (|x-slope|, y-slope): the angle sweeps [0, pi] from +y through x to -y.
    """
    theta = np.pi * k / (n_nouns - 1)
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    half = 0.5 * max(h, w)
    return (np.sin(theta) * (x - 0.5 * (w - 1)) + np.cos(theta) * (y - 0.5 * (h - 1))) / half


def _noun_band(k: int, n_nouns: int) -> np.ndarray:
    centre = (k + 0.5) * SPEC_WIDTH / n_nouns
    width = max(SPEC_WIDTH / (2.0 * n_nouns), 1.0)
    return np.exp(-0.5 * ((np.arange(SPEC_WIDTH) - centre) / width) ** 2)


def make_synthetic(n_clips: int, n_verbs: int, n_nouns: int, frames: int, resolution: tuple[int, int],
                   modalities: Iterable[Modality | str] = (Modality.RGB,), seed: int = 0,
                   noise: float = 0.1) -> SyntheticDataset:
    """Clips with the verb planted as a temporal oscillation and the noun as a spatial pattern.

    The verb signal is spatially uniform and the noun signal is constant in
    time, so neither label can be read off the other's pattern. Labels cycle
    through the classes in a seeded shuffle, keeping each histogram within
    one of uniform.
    """
    if n_verbs < 2 or n_nouns < 2:
        raise ValueError("class counts must be at least 2")
    mods = {Modality.from_code(m) if isinstance(m, str) else m for m in modalities}
    h, w = resolution
    rng = stream(seed, "synthetic", "labels")
    verbs = rng.permutation(np.arange(n_clips) % n_verbs)
    nouns = rng.permutation(np.arange(n_clips) % n_nouns)
    samples = []
    for i in range(n_clips):
        r = stream(seed, "synthetic", i)
        v, n = int(verbs[i]), int(nouns[i])
        wave = _verb_wave(v, n_verbs, frames)
        ramp = _noun_ramp(n, n_nouns, h, w)
        video = 0.5 + 0.2 * wave[:, None, None, None] + 0.3 * ramp[None, :, :, None]
        video = video + noise * r.standard_normal((frames, h, w, 3))
        flow = spec = None
        if Modality.FLOW in mods:
            flow = np.stack([
                np.broadcast_to(wave[:, None, None], (frames, h, w)),
                np.broadcast_to(ramp[None], (frames, h, w)),
            ], axis=-1) + noise * r.standard_normal((frames, h, w, 2))
        if Modality.SPECTROGRAM in mods:
            raw = 0.5 * wave[:, None, None] + _noun_band(n, n_nouns)[None, None, :]
            raw = raw + noise * r.standard_normal((frames, SPEC_HEIGHT, SPEC_WIDTH))
            spec = normalize_stream(SpectrogramStream(raw)).frames
        samples.append(Sample(
            f"syn{i:05d}", v, n,
            np.clip(video, 0.0, 1.0).astype(np.float32),
            None if flow is None else flow.astype(np.float32),
            None if spec is None else spec.astype(np.float32),
        ))
    return SyntheticDataset(samples, n_verbs, n_nouns, seed)


def write_synthetic(ds: SyntheticDataset, out_dir: str | Path) -> Path:
    """Write a synthetic dataset as ``.mmt`` tensors plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        paths = {}
        for kind, arr in (("video", s.video), ("flow", s.flow), ("audio", s.spectrogram)):
            if arr is not None:
                paths[kind] = out / f"{s.clip_id}.{kind}.mmt"
                mmt.save(paths[kind], arr)
        entries.append(ManifestEntry(s.clip_id, paths["video"], s.verb, s.noun, paths.get("flow"), paths.get("audio")))
    write_manifest(out / "manifest.json", entries)
    return out / "manifest.json"


def load_sample(entry: ManifestEntry, cfg: ModelConfig) -> Sample:
    """Materialise a manifest entry; WAV audio becomes a normalized spectrogram stream."""
    video, flow, audio = load_clip(entry, cfg.n_verbs, cfg.n_nouns)
    spec = None
    if isinstance(audio, SpectrogramStream):
        spec = audio.frames
    elif audio is not None:
        spec = normalize_stream(extract_stream(audio, video.n_frames)).frames
    return Sample(entry.clip_id, entry.verb, entry.noun, video.frames,
                  None if flow is None else flow.frames, spec)


def _window(s: Sample, start: int, frames: int) -> Sample:
    return Sample(
        s.clip_id, s.verb, s.noun,
        take_window(s.video, start, frames),
        None if s.flow is None else take_window(s.flow, start, frames),
        None if s.spectrogram is None else take_window(s.spectrogram, start, frames),
    )


def prepare_train(s: Sample, cfg: ModelConfig, rng: np.random.Generator, augment: bool = True) -> list[np.ndarray]:
    """Random temporal window, scale jitter + crop + flip, SpecAugment; returns per-view inputs."""
    start = temporal_sample(s.video.shape[0], cfg.frames, mode="train", rng=rng)[0]
    s = _window(s, start, cfg.frames)
    video, flow = VideoClip(s.video), None if s.flow is None else FlowClip(s.flow)
    spec = s.spectrogram
    if augment:
        video, flow = augment_spatial(video, flow, rng, AugmentConfig(target=cfg.resolution))
        if spec is not None:
            spec = spec_augment(SpectrogramStream(spec, normalized=True), rng).frames
    else:
        video, flow = center_crop(video, flow, cfg.resolution)
    return view_inputs(cfg, video.frames, None if flow is None else flow.frames, spec)


def prepare_eval(s: Sample, cfg: ModelConfig, start: int = 0) -> list[np.ndarray]:
    """Deterministic window at ``start`` with a centre crop."""
    s = _window(s, start, cfg.frames)
    video, flow = center_crop(VideoClip(s.video), None if s.flow is None else FlowClip(s.flow), cfg.resolution)
    return view_inputs(cfg, video.frames, None if flow is None else flow.frames, s.spectrogram)


def stack_inputs(per_sample: list[list[np.ndarray]], dtype) -> list[np.ndarray]:
    return [np.stack([x[i] for x in per_sample]).astype(dtype) for i in range(len(per_sample[0]))]


# ------------------------------------------------------------------ train


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    batch_size: int = 8
    epochs: int = 1
    warmup_frac: float = 0.05
    droplayer: float = 0.1
    smoothing: float = 0.1
    seed: int = 0
    resolution: tuple[int, int] = (224, 224)
    frames: int = 64
    augment: bool = True
    threads: int = 1
    n_verbs: int = N_VERBS
    n_nouns: int = N_NOUNS
    # desk-scale overrides: when ``hidden`` is set every view and the global
    # encoder shrink to one (hidden, layers, heads) size
    hidden: int | None = None
    layers: int = 2
    heads: int = 2
    init_scale: float = INIT_STD

    def model_config(self, spec: ModelSpec | str) -> ModelConfig:
        kw = dict(frames=self.frames, resolution=self.resolution, n_verbs=self.n_verbs,
                  n_nouns=self.n_nouns, droplayer=self.droplayer)
        if self.hidden is not None:
            return tiny_config(spec, hidden=self.hidden, layers=self.layers, heads=self.heads, **kw)
        if isinstance(spec, str):
            spec = parse_model_spec(spec)
        return ModelConfig(spec=spec, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "resolution" in known:
            r = known["resolution"]
            known["resolution"] = (r, r) if isinstance(r, int) else tuple(r)
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d


def batch_accuracy(logits: T.Tensor, targets) -> float:
    pred = np.argmax(logits.data, axis=-1)
    return float(np.mean(pred == np.asarray(targets)))


def evaluate_train_set(m: MMModel, samples: list[Sample], batch_size: int = 16) -> tuple[float, float]:
    """Clean (no augmentation, eval mode) verb and noun accuracy on the first window of each clip."""
    verb_hits = noun_hits = 0
    with T.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            inputs = stack_inputs([prepare_eval(s, m.config) for s in chunk], m.dtype)
            v, n = forward(m, inputs)
            verb_hits += int(np.sum(np.argmax(v.data, -1) == [s.verb for s in chunk]))
            noun_hits += int(np.sum(np.argmax(n.data, -1) == [s.noun for s in chunk]))
    return verb_hits / len(samples), noun_hits / len(samples)


@dataclass
class TrainResult:
    model: MMModel
    steps: list[dict]
    epochs: list[dict]


def train(model: MMModel, samples: list[Sample], tc: TrainConfig,
          on_step: Callable[[dict], None] | None = None, stop_at_perfect: bool = False) -> TrainResult:
    """Run ``tc.epochs`` epochs of SGD; logs one record per step and one per epoch."""
    if not samples:
        raise ValueError("training set is empty")
    n = len(samples)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    sched = Schedule(tc.base_lr, min(int(round(tc.warmup_frac * total)), total - 1), total)
    opt = OptState()
    m = model
    step_log, epoch_log = [], []
    pool = ThreadPoolExecutor(tc.threads) if tc.threads > 1 else None
    try:
        step = 0
        for epoch in range(tc.epochs):
            order = stream(tc.seed, "shuffle", epoch).permutation(n)
            for lo in range(0, n, tc.batch_size):
                idx = [int(i) for i in order[lo : lo + tc.batch_size]]

                def assemble(i, epoch=epoch):
                    return prepare_train(samples[i], m.config, stream(tc.seed, "sample", epoch, i), tc.augment)

                per = list(pool.map(assemble, idx)) if pool else [assemble(i) for i in idx]
                inputs = stack_inputs(per, m.dtype)
                verbs = [samples[i].verb for i in idx]
                nouns = [samples[i].noun for i in idx]
                lr = lr_at(sched, step)
                v, u = forward(m, inputs, train=True, rng=stream(tc.seed, "droplayer", step))
                loss = two_head_loss(v, u, verbs, nouns, tc.smoothing)
                names = list(m.params)
                grads = dict(zip(names, T.grad(loss, [m.params[k] for k in names])))
                m = MMModel(m.config, type(m.params)(sgd_step(m.params, grads, opt, lr)))
                rec = {
                    "step": step, "lr": lr, "loss": loss.item(),
                    "verb_acc": batch_accuracy(v, verbs), "noun_acc": batch_accuracy(u, nouns),
                }
                step_log.append(rec)
                if on_step is not None:
                    on_step(rec)
                step += 1
            va, na = evaluate_train_set(m, samples)
            epoch_log.append({"epoch": epoch, "step": step, "train_verb_acc": va, "train_noun_acc": na})
            if stop_at_perfect and va == 1.0 and na == 1.0:
                break
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(m, step_log, epoch_log)


def write_jsonl(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
