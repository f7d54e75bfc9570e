"""Finite-difference verification of the loss family on random instances."""
from __future__ import annotations

import numpy as np

from .autodiff import grad_check
from .losses import ClassifierHead, LossSpec

MIN_NORM = 0.1


def random_instance(rng: np.random.Generator, m: int = 8, d: int = 16, c: int = 5, low=-2.0, high=2.0):
    """Features, head weights and labels with entries in [low, high].

    Feature rows and weight columns with norm below ``MIN_NORM`` are redrawn.
    """
    x = rng.uniform(low, high, (m, d))
    while np.any(small := np.linalg.norm(x, axis=1) < MIN_NORM):
        x[small] = rng.uniform(low, high, (int(small.sum()), d))
    w = rng.uniform(low, high, (d, c))
    while np.any(small := np.linalg.norm(w, axis=0) < MIN_NORM):
        w[:, small] = rng.uniform(low, high, (d, int(small.sum())))
    y = rng.integers(0, c, m)
    return x, w, y


def loss_grad_error(
    spec: LossSpec, trials: int = 20, m: int = 8, d: int = 16, c: int = 5, seed: int = 0, h: float = 1e-5
) -> float:
    """Worst relative gradient error (features and head weights) over ``trials`` instances."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if min(m, d, c) < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x, w, y = random_instance(rng, m, d, c)
        err = grad_check(lambda xn, wn: spec(xn, ClassifierHead(wn), y).loss, [x, w], h)
        worst = max(worst, err)
    return worst
