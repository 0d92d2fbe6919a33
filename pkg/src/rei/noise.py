"""Measurement noise models and counter-keyed random streams."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

SKEW_P = 0.1

PURPOSES = ("meas-noise", "probe-b", "probe-c", "req-noise", "group", "shuffle", "init")


def _tag(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Random stream identified by value: (seed, item index, epoch, purpose).

    The same key always yields the same draws, regardless of which other streams
    were consumed before, so batch items can be evaluated in any order.
    """

    seed: int
    index: int = 0
    epoch: int = 0
    purpose: str = "meas-noise"

    def generator(self, component: str = "") -> np.random.Generator:
        key = (self.index, self.epoch, _tag(self.purpose), _tag(component))
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=key)))

    def normal(self, shape, component: str = "") -> np.ndarray:
        return self.generator(component).standard_normal(shape)

    def rademacher(self, shape, component: str = "") -> np.ndarray:
        return self.generator(component).integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0

    def skewed(self, shape, p: float = SKEW_P, component: str = "") -> np.ndarray:
        return skewed_probe(self.generator(component), shape, p)



def skewed_probe(gen: np.random.Generator, shape, p: float = SKEW_P) -> np.ndarray:
    """Standardized Bernoulli(p): zero mean, unit variance, third moment (1-2p)/sqrt(p(1-p))."""
    if not 0 < p < 0.5:
        raise ValueError("p must lie in (0, 0.5)")
    hit = (gen.random(shape) < p).astype(np.float64)
    return (hit - p) / math.sqrt(p * (1 - p))


def skew_moment(p: float = SKEW_P) -> float:
    return (1 - 2 * p) / math.sqrt(p * (1 - p))


def sample_gaussian(u, sigma: float, rng) -> np.ndarray:
    """y = u + sigma * eps with eps standard normal."""
    u = np.asarray(u, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return u.copy()
    g = rng if isinstance(rng, np.random.Generator) else rng.generator("gaussian")
    return u + sigma * g.standard_normal(u.shape)


def sample_poisson(u, gamma: float, rng) -> np.ndarray:
    """y = gamma * z with z ~ Poisson(u / gamma)."""
    u = np.asarray(u, dtype=np.float64)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if np.any(u < 0):
        raise ValueError("Poisson mean must be nonnegative")
    g = rng if isinstance(rng, np.random.Generator) else rng.generator("poisson")
    return gamma * g.poisson(u / gamma).astype(np.float64)


def sample_mpg(u, gamma: float, sigma: float, rng) -> np.ndarray:
    """y = gamma * Poisson(u / gamma) + N(0, sigma^2).

    With an :class:`RngStream` the Poisson and Gaussian parts come from separate
    sub-streams, so ``sigma=0`` reproduces :func:`sample_poisson` and ``u=0``
    reproduces :func:`sample_gaussian` draw for draw.
    """
    y = sample_poisson(u, gamma, rng)
    if sigma == 0:
        return y
    return sample_gaussian(y, sigma, rng)


@dataclass(frozen=True)
class NoiseParams:
    kind: str = "gaussian"
    sigma: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson", "mpg"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0 or self.gamma < 0:
            raise ValueError("noise parameters must be nonnegative")
        if self.kind == "gaussian" and self.gamma != 0:
            raise ValueError("gaussian noise takes gamma = 0")
        if self.kind == "poisson" and (self.gamma <= 0 or self.sigma != 0):
            raise ValueError("poisson noise needs gamma > 0 and sigma = 0")
        if self.kind == "mpg" and (self.gamma <= 0 or self.sigma <= 0):
            raise ValueError("mpg noise needs gamma > 0 and sigma > 0")

    @property
    def noiseless(self) -> bool:
        return self.sigma == 0 and self.gamma == 0

    def sample(self, u, rng) -> np.ndarray:
        if self.noiseless:
            return np.array(u, dtype=np.float64)
        if self.kind == "gaussian":
            return sample_gaussian(u, self.sigma, rng)
        # Poisson means must be nonnegative; estimates fed back in may dip below 0.
        # Non-finite means pass through as NaN so the caller's divergence check fires.
        u = np.asarray(u, dtype=np.float64)
        bad = ~np.isfinite(u)
        u = np.where(bad, 0.0, np.maximum(u, 0.0))
        if self.kind == "poisson":
            y = sample_poisson(u, self.gamma, rng)
        else:
            y = sample_mpg(u, self.gamma, self.sigma, rng)
        return np.where(bad, np.nan, y)

    def variance(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        return self.gamma * u + self.sigma ** 2

    def to_dict(self) -> dict:
        return asdict(self)
