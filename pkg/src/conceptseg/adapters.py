"""Bottleneck adapter experts and their paired reconstruction estimators.

Each expert is a rank-r bottleneck, zero-initialized on the up-projection
so a newborn contributes exactly nothing until trained. Its estimator is a
bias-free one-hidden-layer autoencoder over the same token features; the
running mean/variance of its per-sample reconstruction error (Welford,
sample variance) turn later errors into z-scores for novelty scoring.

An adapter and its estimator freeze together; frozen state is enforced
down in the optimizer (bitwise immutability) and here for stats updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import FrozenParameterError, InsufficientStatsError, ShapeError

ZSCORE_EPS = 1e-8


class RunningStats:
    """Welford online mean/variance over a stream of scalars."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self._m2 = 0.0

    def update(self, values) -> None:
        for x in np.asarray(values, dtype=np.float64).reshape(-1):
            self.n += 1
            delta = x - self.mean
            self.mean += delta / self.n
            self._m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        """Sample variance (n-1 denominator); 0.0 until two samples exist."""
        if self.n < 2:
            return 0.0
        return self._m2 / (self.n - 1)

    def state(self) -> tuple[int, float, float]:
        return (self.n, self.mean, self._m2)

    @classmethod
    def from_state(cls, n: int, mean: float, m2: float) -> "RunningStats":
        rs = cls()
        rs.n, rs.mean, rs._m2 = int(n), float(mean), float(m2)
        return rs


@dataclass
class AdapterExpert:
    """One rank-r expert: ReLU(x W_down) W_up, parallel to a sublayer."""

    w_down: nm.Tensor  # (d, r)
    w_up: nm.Tensor    # (r, d)
    rank: int
    birth_task: int
    frozen: bool = False

    @property
    def width(self) -> int:
        return self.w_down.shape[0]

    def forward(self, x: nm.Tensor) -> nm.Tensor:
        if x.shape[-1] != self.width:
            raise ShapeError(
                f"adapter width {self.width} does not match tokens {x.shape}")
        return nm.matmul(nm.relu(nm.matmul(x, self.w_down)), self.w_up)

    __call__ = forward

    def parameters(self) -> list[nm.Tensor]:
        return [self.w_down, self.w_up]

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.freeze()


def make_adapter(d: int, rank: int, birth_task: int, rng: nm.Rng) -> AdapterExpert:
    if not (0 < rank < d):
        raise ShapeError(f"adapter rank must satisfy 0 < r < d, got r={rank}, d={d}")
    w_down = nm.Tensor(rng.normal((d, rank), std=0.02), requires_grad=True)
    w_up = nm.Tensor(np.zeros((rank, d)), requires_grad=True)  # birth identity
    return AdapterExpert(w_down=w_down, w_up=w_up, rank=rank, birth_task=birth_task)


@dataclass
class Estimator:
    """Bias-free autoencoder d -> r_e -> d plus running error statistics."""

    enc: nm.Tensor  # (d, r_e)
    dec: nm.Tensor  # (r_e, d)
    stats: RunningStats = field(default_factory=RunningStats)
    frozen: bool = False

    @property
    def width(self) -> int:
        return self.enc.shape[0]

    def reconstruct(self, x: nm.Tensor) -> nm.Tensor:
        return nm.matmul(nm.relu(nm.matmul(x, self.enc)), self.dec)

    def loss(self, x: nm.Tensor) -> nm.Tensor:
        """Sum of squared reconstruction errors over all tokens.

        The input is detached: only estimator weights receive gradient.
        """
        if x.shape[-1] != self.width:
            raise ShapeError(
                f"estimator width {self.width} does not match tokens {x.shape}")
        xd = x.detach()
        diff = nm.sub(self.reconstruct(xd), xd)
        return nm.tsum(nm.mul(diff, diff))

    def sample_errors(self, x: np.ndarray) -> np.ndarray:
        """Per-sample token-mean squared error, pure numpy (no tape)."""
        if x.shape[-1] != self.width:
            raise ShapeError(
                f"estimator width {self.width} does not match tokens {x.shape}")
        with nm.no_grad():
            rec = self.reconstruct(nm.Tensor(x)).data
        diff = rec - x
        per_token = (diff * diff).sum(axis=-1)
        if x.ndim == 2:
            return np.array([per_token.mean()])
        return per_token.mean(axis=-1)

    def zscore(self, errs) -> float:
        """Mean z of the given per-sample errors against the running stats.

        Pure read; raises until at least two samples were recorded.
        """
        if self.stats.n < 2:
            raise InsufficientStatsError(
                f"estimator has n={self.stats.n} < 2 recorded errors")
        errs = np.asarray(errs, dtype=np.float64).reshape(-1)
        denom = math.sqrt(self.stats.variance + ZSCORE_EPS)
        return float(np.mean((errs - self.stats.mean) / denom))

    def update_stats(self, errs) -> None:
        if self.frozen:
            raise FrozenParameterError("stats update on a frozen estimator")
        self.stats.update(errs)

    def parameters(self) -> list[nm.Tensor]:
        return [self.enc, self.dec]

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.freeze()


def make_estimator(d: int, r_e: int, rng: nm.Rng) -> Estimator:
    enc = nm.Tensor(rng.normal((d, r_e), std=0.2), requires_grad=True)
    dec = nm.Tensor(rng.normal((r_e, d), std=0.2), requires_grad=True)
    return Estimator(enc=enc, dec=dec)


def freeze_pair(adapter: AdapterExpert, estimator: Estimator) -> None:
    """Lock an expert and its estimator together; idempotent."""
    adapter.freeze()
    estimator.freeze()
