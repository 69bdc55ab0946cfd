"""Multimodal multiview transformer: tubelet embedding, factorised per-view
encoders, cross-view fusion, a global encoder and verb/noun heads.

Tokens inside a view are kept as ``[B, T, 1 + S, d]``: batch, temporal index,
CLS slot plus spatial tokens, hidden width. Self-attention in a view encoder
mixes only the ``1 + S`` tokens of one temporal index. Views talk to each
other only through cross-view attention (earlier view in the written order
receives from the next one) and through the global encoder, which sees every
view's per-index CLS outputs.
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import mmt
from . import tensor as T
from .model_spec import (
    GLOBAL_ENCODER,
    SPATIAL_PATCH,
    SPEC_HEIGHT,
    SPEC_WIDTH,
    BackboneSize,
    Modality,
    ModelSpec,
    ViewSpec,
    format_model_spec,
    parse_model_spec,
    token_geometry,
)
from .tensor import Tensor

N_VERBS = 97
N_NOUNS = 300
INIT_STD = 0.02
LN_EPS = 1e-6


class GeometryError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Everything that fixes the parameter shapes of a model."""

    spec: ModelSpec
    frames: int = 64
    resolution: tuple[int, int] = (224, 224)
    n_verbs: int = N_VERBS
    n_nouns: int = N_NOUNS
    droplayer: float = 0.1
    patch: int = SPATIAL_PATCH
    view_sizes: tuple[BackboneSize, ...] = ()
    global_size: BackboneSize = GLOBAL_ENCODER
    fusion_layer: int | None = None

    def __post_init__(self):
        if not self.view_sizes:
            object.__setattr__(self, "view_sizes", tuple(v.backbone for v in self.spec.views))
        if len(self.view_sizes) != len(self.spec.views):
            raise ValueError("one backbone size per view is required")
        for v in self.spec.views:
            self.geometry(v)
        if not 0.0 <= self.droplayer < 1.0:
            raise ValueError("droplayer rate must be in [0, 1)")

    def geometry(self, v: ViewSpec) -> tuple[int, int]:
        try:
            return token_geometry(v, self.frames, *self.resolution, patch=self.patch)
        except ValueError as e:
            raise GeometryError(str(e)) from None

    def input_dims(self, i: int) -> tuple[int, int, int, int]:
        v = self.spec.views[i]
        if v.modality is Modality.SPECTROGRAM:
            return (self.frames, SPEC_HEIGHT, SPEC_WIDTH, 1)
        return (self.frames, *self.resolution, v.modality.channels)

    def fusion_at(self, i: int) -> int:
        """Layer index before which view i receives from view i + 1."""
        if self.fusion_layer is not None:
            return self.fusion_layer
        return min(self.view_sizes[i].layers, self.view_sizes[i + 1].layers) // 2

    def to_json(self) -> dict:
        def size(b):
            return [b.name, b.layers, b.heads, b.hidden, b.mlp_dim]

        return {
            "spec": format_model_spec(self.spec),
            "frames": self.frames,
            "resolution": list(self.resolution),
            "n_verbs": self.n_verbs,
            "n_nouns": self.n_nouns,
            "droplayer": self.droplayer,
            "patch": self.patch,
            "view_sizes": [size(b) for b in self.view_sizes],
            "global_size": size(self.global_size),
            "fusion_layer": self.fusion_layer,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(
            spec=parse_model_spec(d["spec"], strict_tubelets=False),
            frames=int(d["frames"]),
            resolution=tuple(d["resolution"]),
            n_verbs=int(d["n_verbs"]),
            n_nouns=int(d["n_nouns"]),
            droplayer=float(d["droplayer"]),
            patch=int(d["patch"]),
            view_sizes=tuple(BackboneSize(*s) for s in d["view_sizes"]),
            global_size=BackboneSize(*d["global_size"]),
            fusion_layer=d.get("fusion_layer"),
        )


def tiny_config(spec: ModelSpec | str, hidden: int = 16, layers: int = 2, heads: int = 2, mlp_dim: int | None = None,
                **kw) -> ModelConfig:
    """Shrink every view and the global encoder to one small size (tests, desk-scale runs)."""
    if isinstance(spec, str):
        spec = parse_model_spec(spec, strict_tubelets=False)
    size = BackboneSize("tiny", layers, heads, hidden, mlp_dim or 2 * hidden)
    return ModelConfig(spec=spec, view_sizes=(size,) * len(spec.views), global_size=size, **kw)


# ------------------------------------------------------------------- params


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) in canonical order."""
    out: list[tuple[str, tuple[int, ...], str]] = []

    def block(prefix, d, mlp):
        out.extend([
            (f"{prefix}/ln1/gamma", (d,), "one"), (f"{prefix}/ln1/beta", (d,), "zero"),
            (f"{prefix}/attn/qkv/w", (3 * d, d), "normal"), (f"{prefix}/attn/qkv/b", (3 * d,), "zero"),
            (f"{prefix}/attn/out/w", (d, d), "normal"), (f"{prefix}/attn/out/b", (d,), "zero"),
            (f"{prefix}/ln2/gamma", (d,), "one"), (f"{prefix}/ln2/beta", (d,), "zero"),
            (f"{prefix}/mlp/fc1/w", (mlp, d), "normal"), (f"{prefix}/mlp/fc1/b", (mlp,), "zero"),
            (f"{prefix}/mlp/fc2/w", (d, mlp), "normal"), (f"{prefix}/mlp/fc2/b", (d,), "zero"),
        ])

    for i, (v, size) in enumerate(zip(cfg.spec.views, cfg.view_sizes)):
        d = size.hidden
        n_t, n_s = cfg.geometry(v)
        width = v.tubelet_t * cfg.patch * cfg.patch * v.modality.channels
        p = f"view{i}"
        out.extend([
            (f"{p}/embed/kernel", (d, width), "normal"), (f"{p}/embed/bias", (d,), "zero"),
            (f"{p}/pos", (n_t, n_s, d), "zero"), (f"{p}/cls", (d,), "normal"),
        ])
        for l in range(size.layers):
            block(f"{p}/block{l}", d, size.mlp_dim)
        out.extend([(f"{p}/norm/gamma", (d,), "one"), (f"{p}/norm/beta", (d,), "zero")])
    for i in range(len(cfg.spec.views) - 1):
        d, dd = cfg.view_sizes[i].hidden, cfg.view_sizes[i + 1].hidden
        p = f"fusion{i}"
        out.extend([
            (f"{p}/ln_q/gamma", (d,), "one"), (f"{p}/ln_q/beta", (d,), "zero"),
            (f"{p}/ln_kv/gamma", (dd,), "one"), (f"{p}/ln_kv/beta", (dd,), "zero"),
            (f"{p}/proj_in/w", (d, dd), "normal"), (f"{p}/proj_in/b", (d,), "zero"),
            (f"{p}/q/w", (d, d), "normal"), (f"{p}/q/b", (d,), "zero"),
            (f"{p}/kv/w", (2 * d, d), "normal"), (f"{p}/kv/b", (2 * d,), "zero"),
            (f"{p}/out/w", (d, d), "normal"), (f"{p}/out/b", (d,), "zero"),
        ])
    g = cfg.global_size
    for i, size in enumerate(cfg.view_sizes):
        out.extend([(f"global/in{i}/w", (g.hidden, size.hidden), "normal"), (f"global/in{i}/b", (g.hidden,), "zero")])
    out.append(("global/cls", (g.hidden,), "normal"))
    for l in range(g.layers):
        block(f"global/block{l}", g.hidden, g.mlp_dim)
    out.extend([
        ("global/norm/gamma", (g.hidden,), "one"), ("global/norm/beta", (g.hidden,), "zero"),
        ("head_verb/w", (cfg.n_verbs, g.hidden), "normal"), ("head_verb/b", (cfg.n_verbs,), "zero"),
        ("head_noun/w", (cfg.n_nouns, g.hidden), "normal"), ("head_noun/b", (cfg.n_nouns,), "zero"),
    ])
    return out


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape, _ in _param_shapes(cfg))


@dataclass
class MMModel:
    config: ModelConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    # When set, the forward pass evaluates P single-coordinate variants of one
    # parameter at once; activations carry batch P * B, variant-major.
    vmap: "Perturbation | None" = None

    @property
    def spec(self) -> ModelSpec:
        return self.config.spec

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "MMModel":
        return MMModel(self.config, OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in self.params.items()))

    def copy(self) -> "MMModel":
        return self.astype(self.dtype)


def init_params(cfg: ModelConfig, seed: int = 0, init_scale: float = INIT_STD, dtype=np.float32) -> MMModel:
    """Truncated-normal weights, zero biases and position embeddings, unit LayerNorm gains.

    Each parameter draws from its own stream keyed by (seed, name), so
    initialisation does not depend on creation order.
    """
    from .seeding import stream

    params = OrderedDict()
    for name, shape, kind in _param_shapes(cfg):
        if kind == "normal":
            arr = _trunc_normal(stream(seed, "init", name), shape, init_scale)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return MMModel(cfg, params)


# ----------------------------------------------------------------- layers


def extract_tubelets(x: Tensor, tubelet_t: int, patch: int = SPATIAL_PATCH) -> Tensor:
    """``x[B, F, H, W, C]`` to flattened tubelets ``[B, F/t, (H/p)(W/p), t*p*p*C]``.

    Each tubelet is flattened in (time, row, column, channel) order.
    """
    b, f, h, w, c = x.shape
    if f % tubelet_t or h % patch or w % patch:
        raise GeometryError(f"input dims {x.dims} not divisible by tubelet {tubelet_t}x{patch}x{patch}")
    nt, nh, nw = f // tubelet_t, h // patch, w // patch
    t = x.reshape(b, nt, tubelet_t, nh, patch, nw, patch, c)
    t = t.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return t.reshape(b, nt, nh * nw, tubelet_t * patch * patch * c)


def tubelet_tokenize(x: Tensor, kernel: Tensor, bias: Tensor | None, tubelet_t: int, patch: int = SPATIAL_PATCH) -> Tensor:
    """Linearly project non-overlapping tubelets: ``[B, F/t, (H/p)(W/p), hidden]``."""
    width = tubelet_t * patch * patch * x.shape[-1]
    if kernel.shape[1] != width:
        raise GeometryError(f"kernel width {kernel.shape[1]} does not match tubelet width {width}")
    return T.linear(extract_tubelets(x, tubelet_t, patch), kernel, bias)


def adapt_rgb_kernel(rgb_kernel: np.ndarray, target_channels: int) -> np.ndarray:
    """Average an RGB embedding kernel over its colour axis and tile it to ``target_channels``."""
    hidden, width = rgb_kernel.shape
    if width % 3:
        raise ValueError(f"kernel width {width} is not a multiple of 3 input channels")
    taps = rgb_kernel.reshape(hidden, width // 3, 3)
    mean = taps.mean(axis=-1, keepdims=True)
    return np.repeat(mean, target_channels, axis=-1).reshape(hidden, -1)


def _p(m: MMModel, name: str) -> Tensor:
    return m.params[name]


@dataclass(frozen=True)
class Perturbation:
    """Variant p of parameter ``name`` adds ``delta[p]`` at flat coordinate ``index[p]``."""

    name: str
    index: np.ndarray
    delta: np.ndarray

    @property
    def n(self) -> int:
        return len(self.index)


def _perturbed(m: MMModel, name: str | None) -> Perturbation | None:
    if m.vmap is not None and name is not None and m.vmap.name == name:
        return m.vmap
    return None


def replicate(x: Tensor, n: int) -> Tensor:
    """[B, ...] to [n * B, ...], variant-major."""
    return T.broadcast_to(x.reshape(1, *x.shape), (n, *x.shape)).reshape(n * x.shape[0], *x.shape[1:])


def _bump(y: Tensor, channel: np.ndarray, amount: np.ndarray) -> Tensor:
    """Add ``amount[p, m]`` to last-axis ``channel[p]`` of variant p (``y`` viewed as [P, M, C])."""
    n = len(channel)
    corr = np.zeros((n, y.data.size // (n * y.shape[-1]), y.shape[-1]), dtype=y.dtype)
    corr[np.arange(n), :, channel] = amount
    return y + Tensor(corr.reshape(y.shape))


def _ln(m: MMModel, prefix: str, x: Tensor) -> Tensor:
    g, b = f"{prefix}/gamma", f"{prefix}/beta"
    y = T.layer_norm(x, _p(m, g), _p(m, b), LN_EPS)
    pg, pb = _perturbed(m, g), _perturbed(m, b)
    if pg is not None:
        d = x.shape[-1]
        xhat = T.layer_norm(x, Tensor(np.ones(d, x.dtype)), Tensor(np.zeros(d, x.dtype)), LN_EPS).data
        xhat = xhat.reshape(pg.n, -1, d)[np.arange(pg.n), :, pg.index]
        y = _bump(y, pg.index, pg.delta[:, None] * xhat)
    if pb is not None:
        y = _bump(y, pb.index, pb.delta[:, None])
    return y


def _linear(m: MMModel, wname: str, bname: str | None, x: Tensor) -> Tensor:
    w = _p(m, wname)
    y = T.linear(x, w, None if bname is None else _p(m, bname))
    pw, pb = _perturbed(m, wname), _perturbed(m, bname)
    if pw is not None:
        fan_in = w.shape[1]
        out_ch, col = np.divmod(pw.index, fan_in)
        cols = x.data.reshape(pw.n, -1, fan_in)[np.arange(pw.n), :, col]
        y = _bump(y, out_ch, pw.delta[:, None] * cols)
    if pb is not None:
        y = _bump(y, pb.index, pb.delta[:, None])
    return y


def _lin(m: MMModel, prefix: str, x: Tensor) -> Tensor:
    return _linear(m, f"{prefix}/w", f"{prefix}/b", x)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    ``q[..., Nq, d]``, ``k`` and ``v`` ``[..., Nk, d]`` with identical leading
    axes; returns ``[..., Nq, d]``.
    """
    *lead, nq, d = q.shape
    nk = k.shape[-2]
    if d % heads:
        raise GeometryError(f"hidden {d} not divisible by {heads} heads")
    dh = d // heads
    r = len(lead)
    perm = tuple(range(r)) + (r + 1, r, r + 2)

    def split(x, n):
        return x.reshape(*lead, n, heads, dh).transpose(perm)

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    kt = kh.transpose(tuple(range(r + 1)) + (r + 2, r + 1))
    att = T.softmax(T.scale(qh @ kt, 1.0 / math.sqrt(dh)), axis=-1)
    out = (att @ vh).transpose(perm)
    return out.reshape(*lead, nq, d)


def self_attention(m: MMModel, prefix: str, x: Tensor, heads: int) -> Tensor:
    d = x.shape[-1]
    qkv = _lin(m, f"{prefix}/qkv", x)
    q = qkv[..., :d]
    k = qkv[..., d : 2 * d]
    v = qkv[..., 2 * d :]
    return _lin(m, f"{prefix}/out", multihead_attention(q, k, v, heads))


def _residual(x: Tensor, branch: Tensor, gate) -> Tensor:
    if gate is None:
        return x + branch
    if isinstance(gate, float):
        return x + T.scale(branch, gate)
    mask = T.broadcast_to(Tensor(gate.reshape((-1,) + (1,) * (x.ndim - 1)).astype(x.dtype)), x.shape)
    return x + T.mul(branch, mask)


def factorised_block(m: MMModel, prefix: str, x: Tensor, heads: int, gate=None) -> Tensor:
    """Pre-norm attention + GELU MLP over ``x[B, T, N, d]``, attending within each temporal index.

    ``gate`` scales both residual branches: ``None`` for plain residuals, a
    float survival probability at eval time, or a per-sample 0/1 array when
    training with stochastic depth.
    """
    if x.shape[-1] % heads:
        raise GeometryError(f"hidden {x.shape[-1]} not divisible by {heads} heads")
    x = _residual(x, self_attention(m, f"{prefix}/attn", _ln(m, f"{prefix}/ln1", x), heads), gate)
    h = T.gelu(_lin(m, f"{prefix}/mlp/fc1", _ln(m, f"{prefix}/ln2", x)))
    return _residual(x, _lin(m, f"{prefix}/mlp/fc2", h), gate)


def cross_view_attend(m: MMModel, prefix: str, receiver: Tensor, donor: Tensor, heads: int) -> Tensor:
    """Receiver tokens ``[B, T, N, d]`` attend to every donor token, projected to width d."""
    b, nt, n, d = receiver.shape
    bd, ntd, nd, dd = donor.shape
    if bd != b:
        raise GeometryError(f"batch mismatch between receiver {receiver.dims} and donor {donor.dims}")
    kv_src = _lin(m, f"{prefix}/proj_in", _ln(m, f"{prefix}/ln_kv", donor.reshape(b, ntd * nd, dd)))
    q = _lin(m, f"{prefix}/q", _ln(m, f"{prefix}/ln_q", receiver.reshape(b, nt * n, d)))
    kv = _lin(m, f"{prefix}/kv", kv_src)
    att = multihead_attention(q, kv[..., :d], kv[..., d:], heads)
    return receiver + _lin(m, f"{prefix}/out", att).reshape(b, nt, n, d)


# ---------------------------------------------------------------- forward


def embed_view(m: MMModel, i: int, x: Tensor) -> Tensor:
    """Tokenize view i and prepend its CLS token at every temporal index: ``[B, T, 1 + S, d]``."""
    cfg = m.config
    v = cfg.spec.views[i]
    want = cfg.input_dims(i)
    if tuple(x.shape[1:]) != want:
        raise GeometryError(f"view {i} ({v}) expects input [B, {', '.join(map(str, want))}], got {x.dims}")
    p = f"view{i}"
    pert = m.vmap
    kname, bname = f"{p}/embed/kernel", f"{p}/embed/bias"
    if _perturbed(m, kname) or _perturbed(m, bname):
        patches = extract_tubelets(x, v.tubelet_t, cfg.patch)
        base = T.linear(patches, _p(m, kname), _p(m, bname))
        tok = replicate(base, pert.n)
        pk, pb = _perturbed(m, kname), _perturbed(m, bname)
        if pk is not None:
            out_ch, col = np.divmod(pk.index, patches.shape[-1])
            tok = _bump(tok, out_ch, pk.delta[:, None] * patches.data.reshape(-1, patches.shape[-1])[:, col].T)
        if pb is not None:
            tok = _bump(tok, pb.index, pb.delta[:, None])
    else:
        tok = tubelet_tokenize(x, _p(m, kname), _p(m, bname), v.tubelet_t, cfg.patch)
        if pert is not None:
            tok = replicate(tok, pert.n)
    b, nt, ns, d = tok.shape
    tok = tok + T.broadcast_to(_p(m, f"{p}/pos").reshape(1, nt, ns, d), tok.shape)
    pp = _perturbed(m, f"{p}/pos")
    if pp is not None:
        corr = np.zeros((pp.n, b // pp.n, nt, ns, d), dtype=tok.dtype)
        ti, si, ci = np.unravel_index(pp.index, (nt, ns, d))
        corr[np.arange(pp.n), :, ti, si, ci] = pp.delta[:, None]
        tok = tok + Tensor(corr.reshape(tok.shape))
    cls = T.broadcast_to(_p(m, f"{p}/cls").reshape(1, 1, 1, d), (b, nt, 1, d))
    pc = _perturbed(m, f"{p}/cls")
    if pc is not None:
        cls = _bump(cls, pc.index, pc.delta[:, None])
    return T.concat([cls, tok], axis=2)


def _gate(cfg: ModelConfig, depth: int, l: int, batch: int, train: bool, rng):
    if cfg.droplayer == 0.0:
        return None
    survival = 1.0 - cfg.droplayer * (l + 1) / depth
    if not train:
        return survival
    keep = (rng.uniform(size=batch) < survival).astype(np.float64)
    if keep.all():
        return None
    return keep


def encode_views(m: MMModel, tokens: list[Tensor], train: bool = False, rng=None, fuse: bool = True) -> list[Tensor]:
    """Run every view's factorised stack in lockstep, fusing adjacent views at their fusion layer."""
    cfg = m.config
    sizes = cfg.view_sizes
    tokens = list(tokens)
    depth = max(s.layers for s in sizes)
    for l in range(depth):
        if fuse:
            fused = list(tokens)
            for i in range(len(tokens) - 1):
                if cfg.fusion_at(i) == l:
                    fused[i] = cross_view_attend(m, f"fusion{i}", tokens[i], tokens[i + 1], sizes[i].heads)
            tokens = fused
        for i, size in enumerate(sizes):
            if l >= size.layers:
                continue
            gate = _gate(cfg, size.layers, l, tokens[i].shape[0], train, rng)
            if isinstance(gate, np.ndarray) and not gate.any():
                continue
            tokens[i] = factorised_block(m, f"view{i}/block{l}", tokens[i], size.heads, gate)
    return tokens


def aggregate(m: MMModel, tokens: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Global encoder over every view's per-index CLS outputs, then the two heads."""
    cfg = m.config
    g = cfg.global_size
    seq = []
    for i, tok in enumerate(tokens):
        b, nt, _, d = tok.shape
        cls = _ln(m, f"view{i}/norm", tok[:, :, 0, :].reshape(b, nt, d))
        seq.append(_lin(m, f"global/in{i}", cls))
    b = seq[0].shape[0]
    gcls = T.broadcast_to(_p(m, "global/cls").reshape(1, 1, g.hidden), (b, 1, g.hidden))
    pc = _perturbed(m, "global/cls")
    if pc is not None:
        gcls = _bump(gcls, pc.index, pc.delta[:, None])
    x = T.concat([gcls] + seq, axis=1)
    x = x.reshape(b, 1, x.shape[1], g.hidden)
    for l in range(g.layers):
        x = factorised_block(m, f"global/block{l}", x, g.heads)
    rep = _ln(m, "global/norm", x[:, 0, 0, :].reshape(b, g.hidden))
    return _lin(m, "head_verb", rep), _lin(m, "head_noun", rep)


def _as_batch(x, dtype, n_dims: int) -> tuple[Tensor, bool]:
    if isinstance(x, Tensor):
        arr = x
    else:
        arr = Tensor(np.asarray(x, dtype=dtype))
    if arr.dtype != dtype:
        arr = Tensor(arr.data.astype(dtype))
    if arr.ndim == n_dims:
        return arr.reshape(1, *arr.shape), True
    return arr, False


def forward(m: MMModel, inputs: list, train: bool = False, rng: np.random.Generator | None = None,
            fuse: bool = True) -> tuple[Tensor, Tensor]:
    """Verb and noun logits for one clip (``[F, H, W, C]`` per view) or a batch (``[B, F, H, W, C]``).

    ``rng`` drives stochastic depth and is required in train mode.
    """
    cfg = m.config
    if len(inputs) != len(cfg.spec.views):
        raise GeometryError(f"model has {len(cfg.spec.views)} views, got {len(inputs)} inputs")
    if train and cfg.droplayer > 0 and rng is None:
        raise ValueError("train mode needs an rng for stochastic depth")
    batched = [_as_batch(x, m.dtype, 4) for x in inputs]
    single = batched[0][1]
    if any(s != single for _, s in batched) or len({x.shape[0] for x, _ in batched}) != 1:
        raise GeometryError("all view inputs must share the same batch layout")
    tokens = [embed_view(m, i, x) for i, (x, _) in enumerate(batched)]
    verb, noun = aggregate(m, encode_views(m, tokens, train, rng, fuse))
    if single:
        return verb.reshape(cfg.n_verbs), noun.reshape(cfg.n_nouns)
    return verb, noun


def view_inputs(cfg: ModelConfig, video=None, flow=None, spectrogram=None) -> list[np.ndarray]:
    """Pick each view's modality array: video ``[.., 3]``, flow ``[.., 2]``, spectrogram ``[.., 96, 64]``."""
    out = []
    for v in cfg.spec.views:
        if v.modality is Modality.RGB:
            x = video
        elif v.modality is Modality.FLOW:
            x = flow
        else:
            x = None if spectrogram is None else np.asarray(spectrogram)[..., None]
        if x is None:
            raise GeometryError(f"view {v} needs {v.modality.name.lower()} input")
        out.append(x)
    return out


# ------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"MMVTCKPT"
CKPT_VERSION = 1


def save_checkpoint(m: MMModel) -> bytes:
    """Magic, u64 header length, JSON header, then one ``.mmt`` blob per parameter."""
    header = {
        "format_version": CKPT_VERSION,
        "config": m.config.to_json(),
        "params": [[k, list(v.shape)] for k, v in m.params.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<Q", len(hb)))
    buf.write(hb)
    for v in m.params.values():
        mmt.write(buf, v.data)
    return buf.getvalue()


def load_checkpoint(data: bytes, expected_spec: ModelSpec | str | None = None) -> MMModel:
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    buf = io.BytesIO(data)
    buf.seek(len(CKPT_MAGIC))
    raw = buf.read(8)
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", raw)
    hb = buf.read(hlen)
    if len(hb) < hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(hb)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header ({e})") from None
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('format_version')} != {CKPT_VERSION}")
    cfg = ModelConfig.from_json(header["config"])
    if expected_spec is not None:
        want = expected_spec if isinstance(expected_spec, str) else format_model_spec(expected_spec)
        want = format_model_spec(parse_model_spec(want, strict_tubelets=False))
        if want != format_model_spec(cfg.spec):
            raise CheckpointError(f"checkpoint holds {format_model_spec(cfg.spec)}, expected {want}")
    expected = [(n, list(s)) for n, s, _ in _param_shapes(cfg)]
    if [(n, list(s)) for n, s in header["params"]] != expected:
        raise CheckpointError("checkpoint parameters disagree with its model spec")
    params = OrderedDict()
    for name, shape in expected:
        try:
            arr = mmt.read(buf)
        except mmt.FormatError as e:
            raise CheckpointError(f"parameter {name}: {e}") from None
        if list(arr.shape) != shape:
            raise CheckpointError(f"parameter {name}: dims {list(arr.shape)} != {shape}")
        params[name] = Tensor(arr, requires_grad=True)
    if buf.read(1):
        raise CheckpointError("trailing bytes after last parameter")
    return MMModel(cfg, params)


def with_droplayer(cfg: ModelConfig, rate: float) -> ModelConfig:
    return replace(cfg, droplayer=rate)
