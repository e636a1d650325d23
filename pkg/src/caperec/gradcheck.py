"""Finite-difference verification of every parameter gradient, per backbone x PE variant."""

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbones import BACKBONES, ModelConfig, build_model
from .data import ContextBatch
from .position import VARIANTS, PEConfig
from .seeding import rng_for

COMBOS = [f"{b}+{v}" for b, v in itertools.product(BACKBONES, VARIANTS)]


@dataclass
class GradCheckResult:
    combo: str
    max_rel_error: float
    worst_param: str
    n_checked: int
    seconds: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def tiny_config(backbone, variant, n_max=6):
    return ModelConfig(
        backbone=backbone,
        pe=PEConfig(variant=variant, d_pos=4, n_max=n_max),
        n_items=12,
        n_cats=5,
        emb_dim=4,
        attn_hidden=[6],
        head_hidden=[6],
        n_heads=2,
        n_blocks=1,
    )


def tiny_batch(seed=0, lengths=(4, 4), n_items=12, n_cats=5, width=None):
    rng = rng_for(seed, "data")
    lengths = np.asarray(lengths, dtype=np.int64)
    width = int(lengths.max()) if width is None else width
    b = len(lengths)
    items = rng.integers(2, n_items, size=(b, width))
    cats = rng.integers(2, n_cats, size=(b, width))
    pad = np.arange(width)[None, :] >= lengths[:, None]
    items[pad] = 0
    cats[pad] = 0
    return ContextBatch(
        items=items,
        cats=cats,
        lengths=lengths,
        target_items=rng.integers(2, n_items, size=b),
        target_cats=rng.integers(2, n_cats, size=b),
        labels=np.array([1.0, 0.0] * (b // 2) + [1.0] * (b % 2)),
        user_ids=np.arange(b),
    )


def randomize(model, seed, scale=0.5):
    """Perturb every parameter so no gradient is trivially zero (e.g. zero-initialized rows)."""
    rng = rng_for(seed, "init")
    for _, t in model.named_parameters():
        t.data = t.data + scale * rng.uniform(-1.0, 1.0, size=t.shape)


def check_model(model, batch, h=1e-5, tolerance=1e-4, combo=""):
    """Compare backprop gradients of the mean BCE loss against central differences."""
    start = time.perf_counter()
    model.zero_grad()
    model.loss(batch).backward()
    worst, worst_name, n = 0.0, "", 0
    for name, t in model.named_parameters():
        analytic = t.grad.copy()

        def f():
            with ad.no_grad():
                return float(model.loss(batch).data)

        numeric = ad.numerical_gradient(f, t.data, h)
        err = float(ad.relative_error(analytic, numeric).max(initial=0.0))
        n += t.data.size
        if err >= worst:
            worst, worst_name = err, name
    return GradCheckResult(combo, worst, worst_name, n, time.perf_counter() - start, tolerance)


def run(combos=None, tolerance=1e-4, h=1e-5, seed=0):
    results = []
    for combo in combos or COMBOS:
        backbone, variant = combo.split("+")
        model = build_model(tiny_config(backbone, variant), seed)
        randomize(model, seed)
        results.append(check_model(model, tiny_batch(seed), h, tolerance, combo))
    return results
