"""Forward measurement operators and their backprojections.

All operators act on batched arrays (leading item axis) or on ``Var`` values
recorded on a tape. Images are channels-first (N, C, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .diffcore import ops
from .diffcore.tape import value_of


class OperatorShapeError(ValueError):
    pass


class Operator:
    """Common surface: ``apply`` (A), ``pinv`` (A†) and, if linear, ``adjoint``."""

    linear = True
    #: number of noisy scalar measurements per item
    m: int
    #: 0/1 array broadcastable to one item's measurement, None when all entries are measured
    meas_mask: np.ndarray | None = None

    def __call__(self, x):
        return self.apply(x)

    def apply(self, x):
        raise NotImplementedError

    def pinv(self, y):
        raise NotImplementedError

    def adjoint(self, y):
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError


class IdentityOp(Operator):
    def __init__(self, m: int):
        self.m = m

    def apply(self, x):
        return x

    pinv = adjoint = apply

    def config(self):
        return {"kind": "identity", "m": self.m}


class MatrixOp(Operator):
    """Dense linear map acting on flat item vectors (N, n) -> (N, m)."""

    def __init__(self, M, P=None):
        self.M = np.asarray(M, dtype=np.float64)
        self.P = np.linalg.pinv(self.M) if P is None else np.asarray(P, dtype=np.float64)
        self.m = self.M.shape[0]

    def apply(self, x):
        return ops.matvec(self.M, x)

    def adjoint(self, y):
        return ops.matvec(self.M.T, y)

    def pinv(self, y):
        return ops.matvec(self.P, y)

    def config(self):
        return {"kind": "matrix", "shape": list(self.M.shape)}


# ---- inpainting ------------------------------------------------------------

def inpaint_mask(shape: tuple[int, int], kept_fraction: float, seed: int) -> np.ndarray:
    """Binary mask keeping ``round(kept_fraction * H * W)`` uniformly chosen pixels."""
    if not 0 < kept_fraction <= 1:
        raise ValueError("kept_fraction must be in (0, 1]")
    h, w = shape
    n_keep = int(round(kept_fraction * h * w))
    rng = np.random.default_rng(seed)
    mask = np.zeros(h * w)
    mask[rng.permutation(h * w)[:n_keep]] = 1.0
    return mask.reshape(h, w)


@dataclass
class InpaintOp(Operator):
    mask: np.ndarray
    channels: int = 1

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("inpainting mask must be binary")
        self.m = int(self.mask.sum()) * self.channels
        self.meas_mask = self.mask

    @classmethod
    def random(cls, side: int, kept_fraction: float = 0.7, seed: int = 0, channels: int = 1):
        return cls(inpaint_mask((side, side), kept_fraction, seed), channels)

    @property
    def kept_fraction(self) -> float:
        return float(self.mask.mean())

    def _check(self, x):
        if value_of(x).shape[-2:] != self.mask.shape:
            raise OperatorShapeError(f"image extents {value_of(x).shape[-2:]} != mask {self.mask.shape}")

    def apply(self, x):
        self._check(x)
        return ops.mul(x, self.mask)

    pinv = adjoint = apply

    def config(self):
        return {"kind": "inpaint", "side": self.mask.shape[0], "channels": self.channels}


def inpaint_apply(op: InpaintOp, x):
    return op.apply(x)


def inpaint_pinv(op: InpaintOp, y):
    return op.pinv(y)


# ---- single-coil Cartesian MRI ---------------------------------------------

def mri_row_mask(side: int, acceleration: float, center_fraction: float = 0.08,
                 seed: int = 0) -> np.ndarray:
    """Cartesian phase-encode row mask in unshifted (DC at index 0) order.

    ``ceil(center_fraction * side)`` rows around DC are always kept; further rows
    are drawn uniformly without replacement until ``ceil(side / acceleration)``
    rows are sampled.
    """
    if acceleration < 1:
        raise ValueError("acceleration must be >= 1")
    n_lines = max(math.ceil(side / acceleration), math.ceil(center_fraction * side))
    n_center = math.ceil(center_fraction * side)
    centered = np.zeros(side, dtype=bool)
    lo = side // 2 - n_center // 2
    centered[lo:lo + n_center] = True
    rng = np.random.default_rng(seed)
    rest = np.flatnonzero(~centered)
    centered[rng.choice(rest, n_lines - n_center, replace=False)] = True
    return np.fft.ifftshift(centered).astype(np.float64)


@dataclass
class MriOp(Operator):
    """A = S∘F with the unitary 2-D DFT; complex data held as two real channels."""

    rows: np.ndarray
    acceleration: float = 4.0
    center_fraction: float = 0.08

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        side = self.rows.size
        self.meas_mask = np.broadcast_to(self.rows[:, None], (side, side)).copy()
        self.m = 2 * int(self.meas_mask.sum())

    @classmethod
    def random(cls, side: int, acceleration: float = 4.0, center_fraction: float = 0.08, seed: int = 0):
        return cls(mri_row_mask(side, acceleration, center_fraction, seed), acceleration, center_fraction)

    @property
    def sampled_lines(self) -> int:
        return int(self.rows.sum())

    def _fwd(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-3] != 2:
            raise OperatorShapeError(f"MRI data needs 2 channels (real, imag), got {x.shape}")
        k = np.fft.fft2(x[..., 0, :, :] + 1j * x[..., 1, :, :], norm="ortho") * self.meas_mask
        return np.stack([k.real, k.imag], axis=-3)

    def _adj(self, y: np.ndarray) -> np.ndarray:
        if y.shape[-3] != 2:
            raise OperatorShapeError(f"MRI data needs 2 channels (real, imag), got {y.shape}")
        z = np.fft.ifft2((y[..., 0, :, :] + 1j * y[..., 1, :, :]) * self.meas_mask, norm="ortho")
        return np.stack([z.real, z.imag], axis=-3)

    def apply(self, x):
        return ops.linear(x, self._fwd, self._adj)

    def adjoint(self, y):
        return ops.linear(y, self._adj, self._fwd)

    pinv = adjoint

    def config(self):
        return {"kind": "mri", "side": self.rows.size, "acceleration": self.acceleration,
                "center_fraction": self.center_fraction}


def mri_apply(op: MriOp, x):
    return op.apply(x)


def mri_pinv(op: MriOp, y):
    return op.pinv(y)


# ---- rotations and the Radon transform ---------------------------------------

def rotation_matrix(side: int, angle: float, disk: bool = False) -> sp.csr_matrix:
    """Sparse bilinear rotation of a ``side``x``side`` image by ``angle`` radians.

    Output pixel q samples the input at ``c + R(-angle)(q - c)`` with ``c`` the
    image centre; samples falling outside the grid read zero. With ``disk`` the
    output (and every sample) is restricted to the inscribed disk.
    """
    c = (side - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dy, dx = ii.ravel() - c, jj.ravel() - c
    cos, sin = math.cos(angle), math.sin(angle)
    py = c + cos * dy - sin * dx
    px = c + sin * dy + cos * dx
    out_idx = np.arange(side * side)
    if disk:
        r = side / 2.0
        keep = (dy ** 2 + dx ** 2 <= r ** 2) & ((py - c) ** 2 + (px - c) ** 2 <= r ** 2)
        py, px, out_idx = py[keep], px[keep], out_idx[keep]
    i0, j0 = np.floor(py).astype(int), np.floor(px).astype(int)
    wy, wx = py - i0, px - j0
    rows, cols, vals = [], [], []
    for di, dj, w in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                      (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        si, sj = i0 + di, j0 + dj
        ok = (si >= 0) & (si < side) & (sj >= 0) & (sj < side) & (w != 0)
        rows.append(out_idx[ok])
        cols.append(si[ok] * side + sj[ok])
        vals.append(w[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(side * side, side * side))


@lru_cache(maxsize=16)
def _sum_rows(side: int) -> sp.csr_matrix:
    # (side, side*side): out[j] = sum_i img[i, j]
    return sp.kron(np.ones((1, side)), sp.eye(side)).tocsr()


@lru_cache(maxsize=16)
def _radon_matrix(views: int, side: int) -> sp.csr_matrix:
    # view v: rotate by -theta_v, then sum along columns (detector bin = column)
    S = _sum_rows(side)
    blocks = [S @ rotation_matrix(side, -v * math.pi / views) for v in range(views)]
    return sp.vstack(blocks).tocsr()


@dataclass(frozen=True)
class RadonSpec:
    """Parallel-beam geometry: ``views`` angles uniformly spaced in [0, pi)."""

    views: int
    size: int

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.views) * (math.pi / self.views)

    @property
    def matrix(self) -> sp.csr_matrix:
        return _radon_matrix(self.views, self.size)

    @property
    def padded_length(self) -> int:
        return 1 << max(6, (2 * self.size - 1).bit_length())

    @property
    def ramp(self) -> np.ndarray:
        return _ramp_response(self.padded_length)


@lru_cache(maxsize=16)
def _ramp_response(length: int) -> np.ndarray:
    """Frequency response of the band-limited ramp, sampled from its spatial kernel.

    Sampling |f| directly on the DFT grid leaves a DC deficit (cupping); taking
    the transform of the discrete kernel h(0) = 1/4, h(odd n) = -1/(pi n)^2
    avoids it. The response approximates 2|f| (cycles/sample) and vanishes at
    DC up to kernel truncation.
    """
    n = np.concatenate([np.arange(1, length // 2 + 1, 2), np.arange(length // 2 - 1, 0, -2)])
    h = np.zeros(length)
    h[0] = 0.25
    h[1::2] = -1.0 / (np.pi * n) ** 2
    return 2.0 * np.real(np.fft.rfft(h))


def _flat_images(x: np.ndarray, size: int) -> tuple[np.ndarray, tuple]:
    if x.shape[-2:] != (size, size):
        raise OperatorShapeError(f"expected {size}x{size} images, got {x.shape}")
    lead = x.shape[:-2]
    return x.reshape(-1, size * size), lead


def _radon_fwd(spec: RadonSpec, x: np.ndarray) -> np.ndarray:
    flat, lead = _flat_images(x, spec.size)
    return (spec.matrix @ flat.T).T.reshape(lead + (spec.views, spec.size))


def _radon_adj(spec: RadonSpec, s: np.ndarray) -> np.ndarray:
    if s.shape[-2:] != (spec.views, spec.size):
        raise OperatorShapeError(f"expected ({spec.views}, {spec.size}) sinograms, got {s.shape}")
    lead = s.shape[:-2]
    flat = s.reshape(-1, spec.views * spec.size)
    return (spec.matrix.T @ flat.T).T.reshape(lead + (spec.size, spec.size))


def _ramp_filter(spec: RadonSpec, s: np.ndarray) -> np.ndarray:
    # zero-padded so the circular convolution does not wrap; the filter is real
    # and even, hence self-adjoint
    spec_s = np.fft.rfft(s, n=spec.padded_length, axis=-1) * spec.ramp
    return np.fft.irfft(spec_s, n=spec.padded_length, axis=-1)[..., :spec.size]


def _fbp_fwd(spec: RadonSpec, s: np.ndarray) -> np.ndarray:
    return _radon_adj(spec, _ramp_filter(spec, s)) * (math.pi / (2 * spec.views))


def _fbp_adj(spec: RadonSpec, x: np.ndarray) -> np.ndarray:
    return _ramp_filter(spec, _radon_fwd(spec, x)) * (math.pi / (2 * spec.views))


def radon(spec: RadonSpec, x):
    """Sinogram (…, views, size) of images (…, size, size)."""
    return ops.linear(x, lambda v: _radon_fwd(spec, v), lambda g: _radon_adj(spec, g))


def radon_adjoint(spec: RadonSpec, s):
    return ops.linear(s, lambda v: _radon_adj(spec, v), lambda g: _radon_fwd(spec, g))


def iradon_fbp(spec: RadonSpec, sino):
    """Ramp-filtered backprojection scaled by pi / (2 * views)."""
    return ops.linear(sino, lambda v: _fbp_fwd(spec, v), lambda g: _fbp_adj(spec, g))


@dataclass
class CtOp(Operator):
    """Nonlinear transmission CT: A(x) = I0 exp(-mu * radon(x)).

    ``mu`` converts image intensity to attenuation per pixel so that line
    integrals stay in a physically sensible range; the backprojection divides it
    back out.
    """

    radon: RadonSpec
    I0: float = 1e5
    mu: float = 1.0
    min_count: float = 1.0
    linear = False
    meas_mask = None

    def __post_init__(self):
        self.m = self.radon.views * self.radon.size

    def apply(self, x):
        return ops.mul(ops.exp(ops.mul(radon(self.radon, x), -self.mu)), self.I0)

    def pinv(self, y):
        yv = value_of(y)
        if np.any(~np.isfinite(yv)):
            raise FloatingPointError("non-finite CT measurements")
        logs = ops.sub(math.log(self.I0), ops.log(ops.clamp_min(y, self.min_count)))
        return ops.mul(iradon_fbp(self.radon, logs), 1.0 / self.mu)

    def config(self):
        return {"kind": "ct", "views": self.radon.views, "side": self.radon.size,
                "I0": self.I0, "mu": self.mu}


def ct_apply(op: CtOp, x):
    if np.any(value_of(x) < 0):
        raise ValueError("ct_apply needs a nonnegative image")
    return op.apply(x)


def ct_backproject(op: CtOp, y, clamp: bool = False):
    """FBP of log(I0 / y). Nonpositive counts are a domain error unless ``clamp``."""
    if not clamp and np.any(value_of(y) <= 0):
        raise ValueError("ct_backproject needs positive counts (pass clamp=True to clip at min_count)")
    return op.pinv(y)


# ---- self-check --------------------------------------------------------------

def op_selfcheck(op: Operator, in_shape: tuple[int, ...], seed: int = 0, probes: int = 3) -> dict:
    """Adjoint and pseudo-inverse residuals on random probes.

    Residuals are normalized: ``|<Ax, y> - <x, A^T y>| / (|Ax| |y|)`` and
    ``|A A† A x - A x| / |A x|``, maximized over probes.
    """
    rng = np.random.default_rng(seed)
    report = {"operator": op.config()}
    if not op.linear:
        report["adjoint"] = "skipped (nonlinear)"
        report["pinv"] = "skipped (nonlinear)"
        if isinstance(op, CtOp):
            x = rng.random((probes,) + tuple(in_shape))
            s = rng.standard_normal((probes, op.radon.views, op.radon.size))
            lhs = np.sum(_radon_fwd(op.radon, x) * s)
            rhs = np.sum(x * _radon_adj(op.radon, s))
            report["radon_adjoint"] = float(abs(lhs - rhs) / (np.linalg.norm(_radon_fwd(op.radon, x)) * np.linalg.norm(s)))
            cancel = op.pinv(op.apply(x)) - _fbp_fwd(op.radon, _radon_fwd(op.radon, x))
            report["log_cancel"] = float(np.max(np.abs(cancel)))
        return report
    adj, pinv = 0.0, 0.0
    for _ in range(probes):
        x = rng.standard_normal((1,) + tuple(in_shape))
        Ax = op.apply(x)
        y = rng.standard_normal(Ax.shape)
        if op.meas_mask is not None:
            y = y * op.meas_mask
        num = abs(np.sum(Ax * y) - np.sum(x * op.adjoint(y)))
        adj = max(adj, float(num / max(np.linalg.norm(Ax) * np.linalg.norm(y), 1e-300)))
        r = op.apply(op.pinv(Ax)) - Ax
        pinv = max(pinv, float(np.linalg.norm(r) / max(np.linalg.norm(Ax), 1e-300)))
    report["adjoint"] = adj
    report["pinv"] = pinv
    return report
