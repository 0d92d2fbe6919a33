"""Training objectives: measurement consistency, (robust) equivariance, SURE.

Every loss takes a batch with a leading item axis and returns the mean over
items of the per-item value. ``f`` maps measurements to images and ``A`` is an
:class:`~rei.operators.Operator`; both must accept batched ``Var`` inputs.
Per-item measurement counts come from ``A.m``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .diffcore import ops
from .diffcore.tape import value_of
from .noise import NoiseParams, RngStream, skew_moment
from .transforms import TransformGroup, apply_transform, sample_group_element

VARIANTS = {
    # name: (consistency term, equivariance term)
    "MC": ("mc", None),
    "SURE": ("sure", None),
    "EI": ("mc", "eq"),
    "EI1": ("mc", "req"),
    "EI2": ("sure", "eq"),
    "EI_oracle": ("oracle_mc", "eq"),
    "REI_oracle": ("oracle_mc", "req"),
    "REI": ("sure", "req"),
    "Sup": ("sup", None),
}


class MissingDataError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    variant: str = "REI"
    alpha: float = 1.0
    tau: float = 1e-2
    sure_scale: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.tau <= 0 or self.sure_scale <= 0:
            raise ValueError("tau and sure_scale must be positive")

    @property
    def terms(self) -> tuple[str, str | None]:
        return VARIANTS[self.variant]

    def to_dict(self) -> dict:
        return asdict(self)


def _n_items(y) -> int:
    return value_of(y).shape[0]


def _mean_sq(a, b, per_item: int):
    r = ops.sub(a, b)
    return ops.mul(ops.sum(ops.square(r)), 1.0 / (per_item * _n_items(a)))


def _many(fn: Callable, inputs: Sequence):
    """Evaluate ``fn`` once on the concatenation of equally sized batches."""
    if len(inputs) == 1:
        return [fn(inputs[0])]
    n = _n_items(inputs[0])
    out = fn(ops.concat(list(inputs), axis=0))
    return ops.split(out, [n] * len(inputs))


def _h(f, A):
    return lambda v: A.apply(f(v))


# ---- consistency terms ---------------------------------------------------

def mc_loss(y, f, A):
    """(1/m) ‖y - A f(y)‖²."""
    return _mean_sq(y, A.apply(f(y)), A.m)


def oracle_mc_loss(u, f, A, y):
    """(1/m) ‖u - A f(y)‖² with oracle access to clean measurements ``u``."""
    return _mean_sq(u, A.apply(f(y)), A.m)


def sup_loss(x, f, y):
    """(1/n) ‖x - f(y)‖²."""
    xv = value_of(x)
    return _mean_sq(x, f(y), int(np.prod(xv.shape[1:])))


def mc_divergence(h, y, b, tau: float):
    """(1/τ) bᵀ(h(y + τb) - h(y)); a batch is treated as one long vector."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    hy, hb = _many(h, [y, ops.add(y, ops.mul(b, tau))])
    return ops.mul(ops.dot(b, ops.sub(hb, hy)), 1.0 / tau)


def sure_gaussian(y, f, A, sigma: float, tau: float, b):
    """Unbiased estimate of (1/m)‖u - A f(y)‖² for y ~ N(u, σ²I); b ~ N(0, I)."""
    if sigma == 0:
        return mc_loss(y, f, A)
    m, n = A.m, _n_items(y)
    hy, hb = _many(_h(f, A), [y, ops.add(y, ops.mul(b, tau))])
    fit = _mean_sq(y, hy, m)
    div = ops.dot(b, ops.sub(hb, hy))
    return ops.add(ops.sub(fit, sigma ** 2), ops.mul(div, 2.0 * sigma ** 2 / (m * tau * n)))


def sure_poisson(y, f, A, gamma: float, tau: float, b):
    """Unbiased estimate for y = γ Poisson(u/γ); ``b`` has ±1 entries."""
    m, n = A.m, _n_items(y)
    yv = value_of(y)
    hy, hb = _many(_h(f, A), [y, ops.add(y, ops.mul(b, tau))])
    fit = _mean_sq(y, hy, m)
    offset = gamma * float(np.sum(yv)) / (m * n)
    div = ops.dot(value_of(b) * yv, ops.sub(hb, hy))
    return ops.add(ops.sub(fit, offset), ops.mul(div, 2.0 * gamma / (m * tau * n)))


def sure_mpg(y, f, A, gamma: float, sigma: float, tau: float, b, c, skew: float | None = None):
    """Unbiased estimate for y = γ Poisson(u/γ) + N(0, σ²).

    ``b`` is Gaussian and drives the first-order (divergence) term weighted by
    γy + σ². The γσ² correction needs Σ_j ∂²h_j/∂y_j², the diagonal second
    derivatives only. With a second difference D along ``c``,
    E[cᵀD] = τ² E[c³] Σ_j ∂²h_j/∂y_j², so ``c`` must be zero-mean, unit-variance
    and skewed; ``skew`` is its third moment (default: :func:`skew_moment`).
    """
    m, n = A.m, _n_items(y)
    yv = value_of(y)
    bv, cv = value_of(b), value_of(c)
    inputs = [y, ops.add(y, ops.mul(bv, tau))]
    second = gamma > 0 and sigma > 0
    if second:
        inputs += [ops.add(y, ops.mul(cv, tau)), ops.sub(y, ops.mul(cv, tau))]
    hs = _many(_h(f, A), inputs)
    hy, hb = hs[0], hs[1]
    fit = _mean_sq(y, hy, m)
    offset = gamma * float(np.sum(yv)) / (m * n) + sigma ** 2
    first = ops.dot(bv * (gamma * yv + sigma ** 2), ops.sub(hb, hy))
    loss = ops.add(ops.sub(fit, offset), ops.mul(first, 2.0 / (m * tau * n)))
    if second:
        mu3 = skew_moment() if skew is None else skew
        d2 = ops.sub(ops.add(hs[2], hs[3]), ops.mul(hy, 2.0))
        loss = ops.sub(loss, ops.mul(ops.dot(cv, d2), 2.0 * gamma * sigma ** 2 / (m * tau ** 2 * mu3 * n)))
    return loss


def sure_loss(y, f, A, noise: NoiseParams, tau: float, b, c=None):
    if noise.kind == "gaussian":
        return sure_gaussian(y, f, A, noise.sigma, tau, b)
    if noise.kind == "poisson":
        return sure_poisson(y, f, A, noise.gamma, tau, b)
    return sure_mpg(y, f, A, noise.gamma, noise.sigma, tau, b, c)


# ---- equivariance terms --------------------------------------------------

def _equivariance(y, f, A, group, g, remeasure):
    x1 = f(y)
    x2 = apply_transform(group, g, x1)
    x3 = f(remeasure(A.apply(x2)))
    n = int(np.prod(value_of(x2).shape[1:]))
    return _mean_sq(x2, x3, n)


def eq_loss(y, f, A, group: TransformGroup, g):
    """(1/n) ‖T_g f(y) - f(A T_g f(y))‖²."""
    return _equivariance(y, f, A, group, g, lambda u: u)


def req_loss(y, f, A, group: TransformGroup, g, noise: NoiseParams, rng):
    """Equivariance with the virtual measurement re-corrupted by fresh noise.

    The noise realization enters as a constant offset added to A T_g f(y), so
    gradients flow through the clean virtual measurement and not through the
    sampler. ``rng`` is one :class:`RngStream` per batch item (or one shared).
    With noiseless ``noise`` this is exactly :func:`eq_loss`.
    """
    if noise.noiseless:
        return eq_loss(y, f, A, group, g)

    def remeasure(u):
        uv = value_of(u)
        streams = rng if isinstance(rng, (list, tuple)) else [rng] * uv.shape[0]
        noisy = np.stack([noise.sample(ui, s) for ui, s in zip(uv, streams)])
        if A.meas_mask is not None:
            noisy = noisy * A.meas_mask
        return ops.add(u, noisy - uv)

    return _equivariance(y, f, A, group, g, remeasure)


# ---- variant assembly ----------------------------------------------------

@dataclass
class Batch:
    y: np.ndarray
    index: Sequence[int]
    x: np.ndarray | None = None
    u: np.ndarray | None = None


@dataclass(frozen=True)
class StepKeys:
    """Random-stream factory for one training step."""

    seed: int
    epoch: int

    def stream(self, index: int, purpose: str) -> RngStream:
        return RngStream(self.seed, int(index), self.epoch, purpose)


def draw_probes(noise: NoiseParams, shape, index: Sequence[int], keys: StepKeys, mask=None):
    """Per-item probes: b Gaussian (Gaussian/MPG) or ±1 (Poisson); c skewed two-point (MPG)."""
    item = tuple(shape[1:])
    if noise.kind == "poisson":
        b = np.stack([keys.stream(i, "probe-b").rademacher(item) for i in index])
    else:
        b = np.stack([keys.stream(i, "probe-b").normal(item) for i in index])
    c = np.stack([keys.stream(i, "probe-c").skewed(item) for i in index])
    if mask is not None:
        b, c = b * mask, c * mask
    return b, c


def variant_loss(cfg: LossConfig, batch: Batch, f, A, group: TransformGroup | None,
                 noise: NoiseParams, keys: StepKeys):
    """Assemble the configured objective; returns (loss, {term: float})."""
    fit_kind, eq_kind = cfg.terms
    y = batch.y
    terms = {}

    if fit_kind == "sup":
        if batch.x is None:
            raise MissingDataError("Sup needs ground-truth images")
        fit = sup_loss(batch.x, f, y)
    elif fit_kind == "oracle_mc":
        if batch.u is None:
            raise MissingDataError(f"{cfg.variant} needs clean measurements u")
        fit = oracle_mc_loss(batch.u, f, A, y)
    elif fit_kind == "mc":
        fit = mc_loss(y, f, A)
    else:
        b, c = draw_probes(noise, value_of(y).shape, batch.index, keys, A.meas_mask)
        fit = sure_loss(y, f, A, noise, cfg.tau, b, c)
    terms[fit_kind] = float(value_of(fit))
    if fit_kind == "sure":
        fit = ops.mul(fit, cfg.sure_scale)
    total = fit

    if eq_kind is not None:
        if group is None:
            raise MissingDataError(f"{cfg.variant} needs a transformation group")
        g = [sample_group_element(group, keys.stream(i, "group")) for i in batch.index]
        if eq_kind == "eq":
            eq = eq_loss(y, f, A, group, g)
        else:
            streams = [keys.stream(i, "req-noise") for i in batch.index]
            eq = req_loss(y, f, A, group, g, noise, streams)
        terms[eq_kind] = float(value_of(eq))
        total = ops.add(total, ops.mul(eq, cfg.alpha))

    terms["total"] = float(value_of(total))
    return total, terms
