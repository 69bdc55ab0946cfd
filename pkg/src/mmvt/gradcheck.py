"""Finite-difference check of every model parameter against backprop.

Single-coordinate perturbations of one parameter are evaluated as variants
stacked along the batch axis of one forward pass, so each central difference
``(L(p + h e_i) - L(p - h e_i)) / 2h`` costs a slice of a batch rather than
two full forward passes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .model import MMModel, Perturbation, forward, init_params, tiny_config
from .seeding import stream
from .train import two_head_loss

TOLERANCE = 1e-4


@dataclass
class GradcheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0
    seconds: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def worst(self) -> str:
        return max(self.per_param, key=self.per_param.get)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_err < tol


def _loss_per_variant(m: MMModel, inputs, verbs, nouns, smoothing, n: int) -> np.ndarray:
    with T.no_grad():
        v, u = forward(m, inputs)
        per = two_head_loss(v, u, list(verbs) * n, list(nouns) * n, smoothing, reduction="none")
    return per.data.reshape(n, len(verbs)).mean(axis=1)


def numeric_grad(m: MMModel, name: str, inputs, verbs, nouns, smoothing: float = 0.1,
                 h: float = 1e-5, chunk: int = 256) -> np.ndarray:
    """Central-difference gradient of the mean two-head loss w.r.t. one parameter."""
    base = m.params[name].data
    flat = base.reshape(-1)
    out = np.empty(flat.size, dtype=np.float64)
    for lo in range(0, flat.size, chunk):
        idx = np.arange(lo, min(lo + chunk, flat.size))
        k = idx.size
        delta = np.concatenate([np.full(k, h), np.full(k, -h)])
        probe = MMModel(m.config, m.params, vmap=Perturbation(name, np.concatenate([idx, idx]), delta))
        f = _loss_per_variant(probe, inputs, verbs, nouns, smoothing, 2 * k)
        out[idx] = (f[:k] - f[k:]) / (2.0 * h)
    return out.reshape(base.shape)


def analytic_grads(m: MMModel, inputs, verbs, nouns, smoothing: float = 0.1) -> dict[str, np.ndarray]:
    v, u = forward(m, inputs)
    loss = two_head_loss(v, u, verbs, nouns, smoothing)
    names = list(m.params)
    return dict(zip(names, T.grad(loss, [m.params[k] for k in names])))


def gradcheck(m: MMModel, inputs, verbs, nouns, smoothing: float = 0.1, h: float = 1e-5,
              chunk: int = 256) -> GradcheckReport:
    """Compare backprop to central differences for every coordinate of every parameter."""
    if m.dtype != np.float64:
        raise TypeError("gradcheck needs a float64 model")
    t0 = time.perf_counter()
    report = GradcheckReport()
    grads = analytic_grads(m, inputs, verbs, nouns, smoothing)
    for name in m.params:
        num = numeric_grad(m, name, inputs, verbs, nouns, smoothing, h, chunk)
        report.per_param[name] = T.max_relative_error(grads[name], num)
        report.n_coords += num.size
    report.seconds = time.perf_counter() - t0
    return report


def tiny_setup(seed: int = 0, spec: str = "Ti/2:R+Ti/4:F", batch: int = 1):
    """Two-view hidden-16 model, 2 layers per view, 4 frames at 32x32, one fusion."""
    cfg = tiny_config(spec, hidden=16, layers=2, heads=2, frames=4, resolution=(32, 32),
                      n_verbs=5, n_nouns=7, droplayer=0.0)
    m = init_params(cfg, seed, dtype=np.float64)
    rng = stream(seed, "gradcheck")
    # random non-trivial values everywhere so no gradient is structurally zero
    params = {k: T.Tensor(v.data + rng.normal(0.0, 0.05, v.shape), requires_grad=True) for k, v in m.params.items()}
    m = replace(m, params=type(m.params)(params))
    inputs = [rng.uniform(-1.0, 1.0, (batch, *cfg.input_dims(i))) for i in range(len(cfg.spec.views))]
    verbs = [int(x) for x in rng.integers(0, cfg.n_verbs, batch)]
    nouns = [int(x) for x in rng.integers(0, cfg.n_nouns, batch)]
    return m, inputs, verbs, nouns
