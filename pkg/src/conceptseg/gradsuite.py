"""Gradient-integrity suites: taped gradients vs central differences on
small random instances of the pieces that carry the training signal.

Shared by the CLI `grad-check` subcommand and the acceptance tests. Each
suite builds a tiny instance per seed and reports the max relative error
over all parameters; inputs are nudged away from ReLU kinks so the finite
differences stay meaningful.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .adapters import make_adapter, make_estimator
from .concepts import TaskProfile, make_projection, project_concepts, concept_similarity, synth_concepts
from .objectives import bce_loss, dice_loss
from .routing import make_site


def _kink_safe(arr: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push entries away from 0 so ReLU kinks stay outside fd stencils."""
    return np.where(np.abs(arr) < margin, arr + 2 * margin, arr)


def suite_adapter_forward(seed: int) -> float:
    rng = nm.Rng(seed, 1)
    d, r, n = 6, 3, 4
    adapter = make_adapter(d, r, birth_task=1, rng=rng.child(0))
    adapter.w_up.data = rng.normal((r, d), std=0.5)  # move off the zero init
    adapter.w_down.data = rng.normal((d, r), std=0.5)
    x = nm.Tensor(_kink_safe(rng.normal((n, d))))
    w = nm.Tensor(rng.normal((n, d)))

    def f():
        return nm.tsum(adapter(x) * w)

    return nm.grad_check(f, adapter.parameters())


def suite_routing(seed: int) -> float:
    """Both routers, the fusion, and the weighted expert sum together."""
    rng = nm.Rng(seed, 2)
    d, d_t, m, r, n, k = 6, 5, 4, 2, 3, 3
    profiles = [TaskProfile("p", {f"c{i}": 1.0 for i in range(m)})]
    cm = synth_concepts(profiles, d_t=d_t, seed=seed)
    site = make_site((0, "ffn"), d, d_t, m, rank=r, lam=0.6, expandable=True,
                     rng=rng.child(1))
    for j in range(k):
        site.grow(rng.child(2 + j), birth_task=j + 1)
        site.adapters[-1].w_up.data = rng.normal((r, d), std=0.4)
        site.ac_cols[-1].data = rng.normal((m, 1), std=0.6)
        site.r_cols[-1].data = rng.normal((d, 1), std=0.6)
    x = nm.Tensor(_kink_safe(rng.normal((2, n, d))))
    base = nm.Tensor(rng.normal((2, n, d)))
    w = nm.Tensor(rng.normal((2, n, d)))
    params = [site.projection.weight]
    for j in range(k):
        params += site.adapters[j].parameters()
        params += [site.ac_cols[j], site.r_cols[j]]

    def f():
        out, _ = site.forward(x, base, cm)
        return nm.tsum(out * w)

    return nm.grad_check(f, params)


def suite_seg_losses(seed: int) -> float:
    rng = nm.Rng(seed, 3)
    shape = (2, 5, 5)
    logits = nm.Tensor(rng.normal(shape, std=1.5), requires_grad=True)
    target = (rng.uniform(0.0, 1.0, shape) > 0.6).astype(np.float64)

    def f():
        probs = nm.sigmoid(logits)
        return dice_loss(probs, target) * 0.8 + bce_loss(probs, target) * 0.2

    return nm.grad_check(f, [logits])


def suite_estimator(seed: int) -> float:
    rng = nm.Rng(seed, 4)
    d, r_e, n = 6, 3, 4
    est = make_estimator(d, r_e, rng.child(0))
    x = nm.Tensor(_kink_safe(rng.normal((n, d))))

    def f():
        return est.loss(x) * (1.0 / (n * d))

    return nm.grad_check(f, est.parameters())


def suite_concept_projection(seed: int) -> float:
    rng = nm.Rng(seed, 5)
    d, d_t, m, n = 6, 5, 3, 4
    profiles = [TaskProfile("p", {f"c{i}": 1.0 for i in range(m)})]
    cm = synth_concepts(profiles, d_t=d_t, seed=seed)
    proj = make_projection((0, "attn"), d_t, d, rng.child(1))
    x = nm.Tensor(rng.normal((n, d)), requires_grad=True)
    w = nm.Tensor(rng.normal((m,)))

    def f():
        _, s_bar = concept_similarity(x, project_concepts(cm, proj))
        return nm.tsum(s_bar * w)

    return nm.grad_check(f, [proj.weight, x])


SUITES = {
    "adapter_forward": suite_adapter_forward,
    "routing_fusion": suite_routing,
    "dice_bce": suite_seg_losses,
    "estimator_loss": suite_estimator,
    "concept_projection": suite_concept_projection,
}


def run_gradient_suites(seeds: int = 20) -> dict[str, float]:
    """Max relative error per suite across `seeds` random instances."""
    results = {}
    for name, suite in SUITES.items():
        results[name] = max(suite(1000 + s) for s in range(seeds))
    return results
