"""Finite transformation groups acting on (…, H, W) images."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .diffcore import ops
from .diffcore.tape import value_of
from .operators import rotation_matrix


@lru_cache(maxsize=512)
def _rotation(side: int, degrees: int):
    # negative angle so that +90 matches np.rot90 (counter-clockwise on screen)
    return rotation_matrix(side, -math.radians(degrees), disk=True).tocsr()


@dataclass(frozen=True)
class TransformGroup:
    """Cyclic 2-D shifts (order H*W) or rotations by multiples of 360/order degrees."""

    kind: str
    side: int
    order: int | None = None

    def __post_init__(self):
        if self.kind not in ("shift2d", "rotate"):
            raise ValueError(f"unknown group kind {self.kind!r}")
        if self.order is None:
            object.__setattr__(self, "order", self.side * self.side if self.kind == "shift2d" else 360)
        if self.kind == "shift2d" and self.order != self.side * self.side:
            raise ValueError("shift2d group has order H*W")
        if self.kind == "rotate" and 360 % self.order:
            raise ValueError("rotation group order must divide 360")

    @property
    def interpolation(self) -> str:
        if self.kind == "shift2d" or self.order in (1, 2, 4):
            return "exact"
        return "bilinear"

    def shift_of(self, g: int) -> tuple[int, int]:
        return divmod(int(g), self.side)

    def degrees_of(self, g: int) -> int:
        return int(g) * (360 // self.order)

    def compose(self, g1: int, g2: int) -> int:
        if self.kind == "shift2d":
            (a, b), (c, d) = self.shift_of(g1), self.shift_of(g2)
            return ((a + c) % self.side) * self.side + (b + d) % self.side
        return (int(g1) + int(g2)) % self.order

    def config(self) -> dict:
        return {"kind": self.kind, "side": self.side, "order": self.order}


def _check(group: TransformGroup, g: int):
    if not 0 <= int(g) < group.order:
        raise IndexError(f"group element {g} outside 0..{group.order - 1}")


def _apply_one(group: TransformGroup, g: int, x):
    _check(group, g)
    if int(g) == 0:
        return x
    if group.kind == "shift2d":
        dy, dx = group.shift_of(g)
        return ops.linear(x, lambda v: np.roll(v, (dy, dx), axis=(-2, -1)),
                          lambda v: np.roll(v, (-dy, -dx), axis=(-2, -1)))
    deg = group.degrees_of(g)
    if deg % 90 == 0:
        k = deg // 90
        return ops.linear(x, lambda v: np.ascontiguousarray(np.rot90(v, k, axes=(-2, -1))),
                          lambda v: np.ascontiguousarray(np.rot90(v, -k, axes=(-2, -1))))
    M = _rotation(group.side, deg)
    n = group.side

    def fwd(v):
        flat = v.reshape(-1, n * n)
        return (M @ flat.T).T.reshape(v.shape)

    def adj(v):
        flat = v.reshape(-1, n * n)
        return (M.T @ flat.T).T.reshape(v.shape)

    return ops.linear(x, fwd, adj)


def apply_transform(group: TransformGroup, g, x):
    """T_g x. ``g`` is one element for the whole batch or one per leading item."""
    if np.ndim(g) == 0:
        return _apply_one(group, int(g), x)
    g = list(g)
    if len(g) != value_of(x).shape[0]:
        raise ValueError("need one group element per batch item")
    if len(set(g)) == 1:
        return _apply_one(group, g[0], x)
    items = ops.split(x, [1] * len(g))
    return ops.concat([_apply_one(group, gi, xi) for gi, xi in zip(g, items)], axis=0)


def sample_group_element(group: TransformGroup, rng) -> int:
    """Uniform over the non-identity elements (identity only when the group is trivial)."""
    if group.order == 1:
        return 0
    gen = rng if isinstance(rng, np.random.Generator) else rng.generator()
    return int(gen.integers(1, group.order))


def disk_mask(side: int) -> np.ndarray:
    c = (side - 1) / 2.0
    ii, jj = np.mgrid[:side, :side]
    return (((ii - c) ** 2 + (jj - c) ** 2) <= (side / 2.0) ** 2).astype(np.float64)


def unitarity_defect(group: TransformGroup, g: int, probes: int = 8, seed: int = 0) -> float:
    """max |‖T_g x‖ - ‖x‖| / ‖x‖ over smooth random probe images.

    Probes are Gaussian-smoothed noise; for rotations they are restricted to the
    inscribed disk on which the group acts.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        x = gaussian_filter(rng.standard_normal((group.side, group.side)), 3.0, mode="wrap")
        if group.kind == "rotate":
            x = x * disk_mask(group.side)
        nx = np.linalg.norm(x)
        worst = max(worst, abs(np.linalg.norm(apply_transform(group, g, x)) - nx) / nx)
    return float(worst)
