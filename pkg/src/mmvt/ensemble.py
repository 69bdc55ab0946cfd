"""Four-crop inference, logit-averaging ensembles and top-1 verb/noun/action metrics.

Averaging happens in logit space at both levels: over the four temporal crops
of one model, then over the models chosen for each task. Verbs and nouns may
be predicted by different model subsets.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .model import MMModel, forward
from .train import Sample, stack_inputs, prepare_eval
from .visual import four_crop_starts


class EnsembleError(ValueError):
    pass


@dataclass
class LogitsRecord:
    model_id: str
    clip_id: str
    verb_logits: np.ndarray
    noun_logits: np.ndarray

    def to_json(self) -> str:
        return json.dumps({
            "model_id": self.model_id,
            "clip_id": self.clip_id,
            "verb_logits": [float(x) for x in self.verb_logits],
            "noun_logits": [float(x) for x in self.noun_logits],
        })

    @classmethod
    def from_dict(cls, d: dict) -> "LogitsRecord":
        rec = cls(str(d["model_id"]), str(d["clip_id"]),
                  np.asarray(d["verb_logits"], dtype=np.float64), np.asarray(d["noun_logits"], dtype=np.float64))
        if not (np.all(np.isfinite(rec.verb_logits)) and np.all(np.isfinite(rec.noun_logits))):
            raise EnsembleError(f"non-finite logits for model {rec.model_id}, clip {rec.clip_id}")
        return rec


@dataclass(frozen=True)
class EnsembleConfig:
    verb_models: frozenset[str]
    noun_models: frozenset[str]

    def __post_init__(self):
        if not self.verb_models or not self.noun_models:
            raise EnsembleError("verb_models and noun_models must both be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        try:
            return cls(frozenset(str(x) for x in d["verb_models"]), frozenset(str(x) for x in d["noun_models"]))
        except KeyError as e:
            raise EnsembleError(f"ensemble config missing {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def single(cls, model_id: str) -> "EnsembleConfig":
        return cls(frozenset([model_id]), frozenset([model_id]))


@dataclass
class EvalReport:
    top1_action: float
    top1_noun: float
    top1_verb: float
    predictions: dict[str, tuple[int, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "top1_action": self.top1_action,
            "top1_noun": self.top1_noun,
            "top1_verb": self.top1_verb,
            "predictions": {k: {"verb": v, "noun": n} for k, (v, n) in sorted(self.predictions.items())},
        }


# -------------------------------------------------------------- inference


def infer_clip(m: MMModel, s: Sample) -> tuple[np.ndarray, np.ndarray]:
    """Mean logits over the four evenly spaced temporal crops (centre-cropped spatially)."""
    frames = m.config.frames
    starts = four_crop_starts(max(s.video.shape[0], frames), frames)
    inputs = stack_inputs([prepare_eval(s, m.config, st) for st in starts], m.dtype)
    with T.no_grad():
        v, n = forward(m, inputs)
    return v.data.astype(np.float64).mean(axis=0), n.data.astype(np.float64).mean(axis=0)


def infer_records(m: MMModel, model_id: str, samples: list[Sample], threads: int = 1) -> list[LogitsRecord]:
    """One record per clip, sorted by clip id."""
    def one(s):
        v, n = infer_clip(m, s)
        return LogitsRecord(model_id, s.clip_id, v, n)

    ordered = sorted(samples, key=lambda s: s.clip_id)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, ordered))
    return [one(s) for s in ordered]


def write_records(path: str | Path, records: Iterable[LogitsRecord]) -> None:
    recs = sorted(records, key=lambda r: (r.clip_id, r.model_id))
    with open(path, "w") as fh:
        for r in recs:
            fh.write(r.to_json() + "\n")


def dump_logits(m: MMModel, model_id: str, samples: list[Sample], out_path: str | Path, threads: int = 1) -> int:
    recs = infer_records(m, model_id, samples, threads)
    write_records(out_path, recs)
    return len(recs)


def read_records(path: str | Path) -> list[LogitsRecord]:
    """Records from one ``.jsonl`` file or every ``*.jsonl`` file in a directory."""
    path = Path(path)
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    out = []
    for f in files:
        with open(f) as fh:
            for line in fh:
                if line.strip():
                    out.append(LogitsRecord.from_dict(json.loads(line)))
    return out


# ------------------------------------------------------------- ensembling


def ensemble_logits(records: dict[str, LogitsRecord], subset: Iterable[str], head: str) -> np.ndarray:
    """Unweighted mean of one head's logits over ``subset`` (records keyed by model id)."""
    subset = sorted(subset)
    missing = [mid for mid in subset if mid not in records]
    if missing:
        raise EnsembleError(f"no record for model(s) {missing}")
    rows = [getattr(records[mid], f"{head}_logits") for mid in subset]
    if len({r.shape for r in rows}) != 1:
        raise EnsembleError(f"{head} class counts differ across models: {sorted({r.shape[0] for r in rows})}")
    return np.mean(np.stack(rows), axis=0)


def _index(records: Iterable[LogitsRecord]) -> dict[str, dict[str, LogitsRecord]]:
    by_clip: dict[str, dict[str, LogitsRecord]] = {}
    for r in records:
        clip = by_clip.setdefault(r.clip_id, {})
        if r.model_id in clip:
            raise EnsembleError(f"duplicate record for model {r.model_id}, clip {r.clip_id}")
        clip[r.model_id] = r
    return by_clip


def evaluate(records: Iterable[LogitsRecord], cfg: EnsembleConfig, labels: dict[str, tuple[int, int]]) -> EvalReport:
    """Top-1 accuracies; an action is correct only when verb and noun both are.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class index.
    """
    by_clip = _index(records)
    missing = sorted(set(labels) - set(by_clip))
    if missing:
        raise EnsembleError(f"no logits for clip(s) {missing[:5]}{'...' if len(missing) > 5 else ''}")
    if not labels:
        raise EnsembleError("no labelled clips to evaluate")
    hits_v = hits_n = hits_a = 0
    preds = {}
    for clip_id, (verb, noun) in sorted(labels.items()):
        recs = by_clip[clip_id]
        pv = int(np.argmax(ensemble_logits(recs, cfg.verb_models, "verb")))
        pn = int(np.argmax(ensemble_logits(recs, cfg.noun_models, "noun")))
        preds[clip_id] = (pv, pn)
        hits_v += pv == verb
        hits_n += pn == noun
        hits_a += pv == verb and pn == noun
    n = len(labels)
    return EvalReport(hits_a / n, hits_n / n, hits_v / n, preds)


def greedy_subset(records: Iterable[LogitsRecord], labels: dict[str, tuple[int, int]], head: str,
                  candidates: Iterable[str] | None = None) -> list[str]:
    """Forward selection: repeatedly add the model that most improves top-1 on ``head``."""
    records = list(records)
    by_clip = _index(records)
    pool = sorted(set(candidates) if candidates is not None else {r.model_id for r in records})
    col = 0 if head == "verb" else 1
    chosen: list[str] = []
    best = -1.0
    while pool:
        scores = []
        for mid in pool:
            subset = chosen + [mid]
            hits = sum(
                int(np.argmax(ensemble_logits(by_clip[c], subset, head))) == lab[col] for c, lab in labels.items()
            )
            scores.append((hits / len(labels), mid))
        score, mid = max(scores, key=lambda t: t[0])
        if score <= best:
            break
        best = score
        chosen.append(mid)
        pool.remove(mid)
    return chosen
