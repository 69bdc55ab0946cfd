"""``mmvt`` command line: one subcommand per workflow.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures also emit
one JSON line on stderr, ``{"error": <kind>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import mmt
from .audio import WavError, wav_to_stream
from .ensemble import EnsembleConfig, EnsembleError, dump_logits, evaluate, infer_records, read_records
from .gradcheck import TOLERANCE, gradcheck, tiny_setup
from .model import CheckpointError, GeometryError, init_params, load_checkpoint, save_checkpoint
from .model_spec import Modality, SpecParseError, parse_model_spec, token_geometry
from .seeding import stream
from .train import TrainConfig, load_sample, make_synthetic, train, write_jsonl, write_synthetic
from .visual import ManifestError, read_manifest


class UsageError(Exception):
    pass


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.exit(_fail("usage", message, 2))


def _threads(args) -> int:
    n = args.threads
    if n is None:
        env = os.environ.get("MMVT_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"MMVT_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be at least 1")
    return n


def _resolution(text: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in text.lower().replace("p", "").split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use N or HxW") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use N or HxW")
    return parts[0], parts[1]


def _load_model(path: str):
    return load_checkpoint(Path(path).read_bytes())


def _samples(manifest: str, cfg):
    entries = read_manifest(manifest, cfg.n_verbs, cfg.n_nouns)
    return [load_sample(e, cfg) for e in entries]


# ----------------------------------------------------------------- commands


def cmd_extract_spec(args) -> int:
    rng = stream(args.seed, "specaugment") if args.specaugment else None
    s = wav_to_stream(Path(args.wav).read_bytes(), args.frames, rng)
    mmt.save(args.out, s.frames.astype(np.float32))
    print(f"wrote {args.out} dims {list(s.frames.shape)}")
    return 0


def cmd_synth(args) -> int:
    mods = [m.strip() for m in args.modalities.split(",") if m.strip()]
    for m in mods:
        try:
            Modality.from_code(m)
        except ValueError as e:
            raise UsageError(str(e)) from None
    ds = make_synthetic(args.clips, args.verbs, args.nouns, args.frames, (args.size, args.size), mods,
                        seed=args.seed, noise=args.noise)
    path = write_synthetic(ds, args.out)
    print(f"wrote {len(ds.samples)} clips to {path}")
    return 0


_CONFIG_FLAGS = {
    "base_lr": float, "batch_size": int, "epochs": int, "warmup_frac": float, "droplayer": float,
    "smoothing": float, "seed": int, "frames": int, "n_verbs": int, "n_nouns": int,
    "hidden": int, "layers": int, "heads": int, "init_scale": float,
}


def resolve_train_config(config_path: str | None, args) -> TrainConfig:
    """File values first, then any flag the user actually passed."""
    d = {}
    if config_path:
        d = json.loads(Path(config_path).read_text())
        if not isinstance(d, dict):
            raise UsageError(f"{config_path}: config must be a JSON object")
    for key in _CONFIG_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if args.resolution is not None:
        d["resolution"] = list(args.resolution)
    if args.no_augment:
        d["augment"] = False
    d.pop("threads", None)
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    tc = resolve_train_config(args.config, args)
    cfg = tc.model_config(args.model)
    threads = _threads(args)
    samples = _samples(args.manifest, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"model": args.model, "manifest": args.manifest, "train": tc.to_dict(), "model_config": cfg.to_json()}
    (out / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")
    m = init_params(cfg, tc.seed, init_scale=tc.init_scale)
    tc.threads = threads
    result = train(m, samples, tc)
    write_jsonl(out / "metrics.jsonl", result.steps)
    write_jsonl(out / "epochs.jsonl", result.epochs)
    (out / "model.ckpt").write_bytes(save_checkpoint(result.model))
    last = result.epochs[-1]
    print(f"trained {len(result.steps)} steps; train verb acc {last['train_verb_acc']:.4f}, "
          f"noun acc {last['train_noun_acc']:.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    m = _load_model(args.ckpt)
    recs = infer_records(m, "model", _samples(args.manifest, m.config), _threads(args))
    for r in recs:
        print(json.dumps({"clip_id": r.clip_id, "verb": int(np.argmax(r.verb_logits)),
                          "noun": int(np.argmax(r.noun_logits))}))
    return 0


def cmd_dump_logits(args) -> int:
    m = _load_model(args.ckpt)
    model_id = args.model_id or Path(args.ckpt).stem
    n = dump_logits(m, model_id, _samples(args.manifest, m.config), args.out, _threads(args))
    print(f"wrote {n} records to {args.out}")
    return 0


def cmd_eval(args) -> int:
    labels = {e.clip_id: (e.verb, e.noun) for e in read_manifest(args.manifest)}
    report = evaluate(read_records(args.logits), EnsembleConfig.load(args.ensemble), labels)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    print(f"top1 action {report.top1_action:.4f}  noun {report.top1_noun:.4f}  verb {report.top1_verb:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    rep = gradcheck(*tiny_setup(args.seed))
    print(f"max relative error {rep.max_rel_err:.3e} (worst: {rep.worst}) over {rep.n_coords} coordinates "
          f"in {rep.seconds:.1f}s")
    if not rep.passed():
        return _fail("gradcheck", f"max relative error {rep.max_rel_err:.3e} >= {TOLERANCE:g}", 1)
    return 0


def cmd_shapes(args) -> int:
    spec = parse_model_spec(args.model, strict_tubelets=False)
    h, w = args.res
    print("view\tbackbone\ttubelet\tmodality\ttemporal_indices\tspatial_tokens\ttokens")
    for i, v in enumerate(spec.views):
        try:
            t, s = token_geometry(v, args.frames, h, w)
        except ValueError as e:
            raise UsageError(str(e)) from None
        print(f"{i}\t{v.backbone.name}\t{v.tubelet_t}\t{v.modality.code}\t{t}\t{s}\t{t * (s + 1)}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmvt", description="Multiview multimodal video transformer toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $MMVT_THREADS, else 1); never changes results")

    sp = sub.add_parser("extract-spec", help="WAV to a [F,96,64] log-mel spectrogram stream (.mmt)")
    sp.add_argument("--wav", required=True, help="input PCM WAV file")
    sp.add_argument("--frames", type=int, required=True, help="number of video frames (one image per frame)")
    sp.add_argument("--out", required=True, help="output .mmt path")
    sp.add_argument("--seed", type=int, default=0, help="seed for SpecAugment (default 0)")
    sp.add_argument("--specaugment", action="store_true", help="apply one time and one frequency mask")
    threads(sp)
    sp.set_defaults(func=cmd_extract_spec)

    sp = sub.add_parser("synth", help="write a synthetic dataset (manifest + .mmt tensors)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--clips", type=int, default=32, help="number of clips (default 32)")
    sp.add_argument("--verbs", type=int, default=4, help="verb classes (default 4)")
    sp.add_argument("--nouns", type=int, default=4, help="noun classes (default 4)")
    sp.add_argument("--frames", type=int, default=8, help="frames per clip (default 8)")
    sp.add_argument("--size", type=int, default=40, help="square frame size in pixels (default 40)")
    sp.add_argument("--modalities", default="R,F", help="comma-separated subset of R,F,S (default R,F)")
    sp.add_argument("--noise", type=float, default=0.1, help="Gaussian noise std (default 0.1)")
    sp.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model; writes config.json, metrics.jsonl, epochs.jsonl, model.ckpt")
    sp.add_argument("--model", required=True, help='variant string, e.g. "B/2:R+S/4:S+Ti/8:F"')
    sp.add_argument("--manifest", required=True, help="training manifest (JSON)")
    sp.add_argument("--config", help="JSON config with flat keys; flags override it")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--base-lr", dest="base_lr", type=float, help="peak learning rate")
    sp.add_argument("--batch-size", dest="batch_size", type=int, help="clips per step")
    sp.add_argument("--epochs", type=int, help="passes over the manifest")
    sp.add_argument("--warmup-frac", dest="warmup_frac", type=float, help="fraction of steps in linear warmup")
    sp.add_argument("--droplayer", type=float, help="stochastic depth rate")
    sp.add_argument("--smoothing", type=float, help="label smoothing")
    sp.add_argument("--seed", type=int, help="run seed")
    sp.add_argument("--frames", type=int, help="frames per input clip")
    sp.add_argument("--resolution", type=_resolution, help="crop size, N or HxW")
    sp.add_argument("--n-verbs", dest="n_verbs", type=int, help="verb classes")
    sp.add_argument("--n-nouns", dest="n_nouns", type=int, help="noun classes")
    sp.add_argument("--hidden", type=int, help="shrink every encoder to this width (desk scale)")
    sp.add_argument("--layers", type=int, help="layers per encoder when --hidden is set")
    sp.add_argument("--heads", type=int, help="attention heads when --hidden is set")
    sp.add_argument("--init-scale", dest="init_scale", type=float, help="init std for weights and tokens")
    sp.add_argument("--no-augment", action="store_true", help="disable spatial jitter, flips and SpecAugment")
    threads(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="print four-crop verb/noun predictions per clip (JSON lines)")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--manifest", required=True, help="clips to score")
    threads(sp)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("dump-logits", help="write four-crop logits per clip as JSON lines")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--manifest", required=True, help="clips to score")
    sp.add_argument("--out", required=True, help="output .jsonl path")
    sp.add_argument("--model-id", dest="model_id", help="id stored in each record (default: checkpoint stem)")
    threads(sp)
    sp.set_defaults(func=cmd_dump_logits)

    sp = sub.add_parser("eval", help="ensemble stored logits and report top-1 action/noun/verb")
    sp.add_argument("--logits", required=True, help="a .jsonl file or a directory of them")
    sp.add_argument("--ensemble", required=True, help='JSON {"verb_models": [...], "noun_models": [...]}')
    sp.add_argument("--manifest", required=True, help="manifest with ground-truth labels")
    sp.add_argument("--report", help="write the full report (with per-clip predictions) here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every parameter of a tiny model")
    sp.add_argument("--seed", type=int, default=0, help="seed for parameters, inputs and labels (default 0)")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("shapes", help="per-view token geometry table")
    sp.add_argument("--model", required=True, help="variant string")
    sp.add_argument("--frames", type=int, default=64, help="input frames (default 64)")
    sp.add_argument("--res", type=_resolution, default=(224, 224), help="resolution, N or HxW (default 224)")
    sp.set_defaults(func=cmd_shapes)
    return p


_USAGE_ERRORS = (UsageError, SpecParseError, GeometryError)
_RUNTIME_ERRORS = (OSError, ValueError, WavError, ManifestError, CheckpointError, EnsembleError, mmt.FormatError,
                   KeyError, json.JSONDecodeError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        # BLAS stays single-threaded so --threads only changes scheduling, never bytes
        with threadpool_limits(1):
            return args.func(args)
    except _USAGE_ERRORS as e:
        return _fail("usage", str(e), 2)
    except _RUNTIME_ERRORS as e:
        return _fail(type(e).__name__, str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
