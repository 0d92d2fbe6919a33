"""Small residual encoder-decoder used as the trainable image-to-image map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tape import Tape, Var, value_of


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int = 3

    @property
    def n_weights(self) -> int:
        return self.c_out * self.c_in * self.k * self.k

    @property
    def size(self) -> int:
        return self.n_weights + self.c_out


@dataclass
class ReconModel:
    """Encoder-decoder with skip concatenation and a residual connection.

    Inputs and outputs are channels-first; internally activations are
    channels-last and each convolution weight is stored as (k, k, C_in, C_out).
    Level ``l`` of the encoder has ``width * 2**l`` channels; each block is
    ``convs_per_block`` 3x3 convolutions followed by ReLU. Downsampling is a
    stride-2 average pool, upsampling is nearest neighbour followed by
    concatenation with the matching encoder output. A final 3x3 convolution
    maps back to ``in_channels`` and its result is added to the input.
    """

    in_channels: int
    width: int = 8
    depth: int = 2
    convs_per_block: int = 1
    residual: bool = True
    seed: int = 0
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.in_channels not in (1, 2, 3):
            raise ValueError(f"in_channels must be 1, 2 or 3, got {self.in_channels}")
        if self.width * 2 ** self.depth > 32:
            raise ValueError("widest level exceeds 32 channels")
        if self.params is None:
            self.params = init_params(self.layer_spec(), np.random.default_rng(self.seed))
        else:
            self.params = np.asarray(self.params, dtype=np.float64)
            if self.params.size != self.n_params:
                raise ShapeError(f"expected {self.n_params} parameters, got {self.params.size}")

    def layer_spec(self) -> list[ConvSpec]:
        w, k = self.width, self.convs_per_block
        specs = []

        def block(c_in, c_out):
            specs.append(ConvSpec(c_in, c_out))
            specs.extend(ConvSpec(c_out, c_out) for _ in range(k - 1))

        block(self.in_channels, w)
        for lvl in range(1, self.depth + 1):
            block(w * 2 ** (lvl - 1), w * 2 ** lvl)
        for lvl in range(self.depth - 1, -1, -1):
            block(w * 2 ** (lvl + 1) + w * 2 ** lvl, w * 2 ** lvl)
        specs.append(ConvSpec(w, self.in_channels))
        return specs

    @property
    def n_params(self) -> int:
        return int(np.sum([s.size for s in self.layer_spec()]))

    def config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "width": self.width,
            "depth": self.depth,
            "convs_per_block": self.convs_per_block,
            "residual": self.residual,
            "seed": self.seed,
        }

    def copy(self, params=None) -> "ReconModel":
        p = self.params.copy() if params is None else params
        return ReconModel(**self.config(), params=p)


def init_params(specs: list[ConvSpec], rng: np.random.Generator) -> np.ndarray:
    """Kaiming-uniform fan-in weights, zero biases, zero final layer."""
    chunks = []
    for i, s in enumerate(specs):
        if i == len(specs) - 1:
            chunks.append(np.zeros(s.size))
            continue
        bound = np.sqrt(6.0 / (s.c_in * s.k * s.k))
        chunks.append(rng.uniform(-bound, bound, s.n_weights))
        chunks.append(np.zeros(s.c_out))
    return np.concatenate(chunks)


def layer_slices(specs: list[ConvSpec]) -> list[tuple[slice, slice]]:
    out, pos = [], 0
    for s in specs:
        out.append((slice(pos, pos + s.n_weights), slice(pos + s.n_weights, pos + s.size)))
        pos += s.size
    return out


def model_apply(model: ReconModel, x, tape: Tape | None = None, params=None,
                stats: dict | None = None):
    """Run the network on ``x`` of shape (C, H, W) or (N, C, H, W).

    With ``tape`` the parameter vector is recorded as a leaf (one per model per
    tape, see :func:`param_leaf`). ``params`` overrides the model's own
    parameters, which is how finite-difference checks perturb them. ``stats``,
    when given, receives the smallest absolute pre-activation seen.
    """
    xv = value_of(x)
    single = xv.ndim == 3
    if single:
        x = ops.reshape(x, (1,) + xv.shape)
        xv = value_of(x)
    if xv.ndim != 4 or xv.shape[1] != model.in_channels:
        raise ShapeError(f"expected (N, {model.in_channels}, H, W) input, got {xv.shape}")
    f = 2 ** model.depth
    if xv.shape[2] % f or xv.shape[3] % f:
        raise ShapeError(f"spatial extents {xv.shape[2:]} not divisible by {f}")

    if params is None:
        params = param_leaf(model, tape) if tape is not None else model.params
    specs = model.layer_spec()
    slices = layer_slices(specs)
    layer = iter(zip(specs, slices))

    def conv(h, act=True):
        s, (ws, bs) = next(layer)
        w = ops.reshape(ops.index(params, ws), (s.k, s.k, s.c_in, s.c_out))
        b = ops.index(params, bs)
        h = ops.conv2d(h, w, b)
        if not act:
            return h
        if stats is not None:
            m = float(np.min(np.abs(value_of(h))))
            stats["min_abs_preact"] = min(stats.get("min_abs_preact", np.inf), m)
        return ops.relu(h)

    def block(h):
        for _ in range(model.convs_per_block):
            h = conv(h)
        return h

    xl = ops.transpose(x, (0, 2, 3, 1))
    h = block(xl)
    skips = [h]
    for _ in range(model.depth):
        h = block(ops.avg_pool2(h))
        skips.append(h)
    for lvl in range(model.depth - 1, -1, -1):
        h = ops.concat([ops.upsample2(h), skips[lvl]], axis=3)
        h = block(h)
    out = ops.transpose(conv(h, act=False), (0, 3, 1, 2))
    if model.residual:
        out = ops.add(out, x)
    if single:
        out = ops.reshape(out, value_of(out).shape[1:])
    return out


def param_leaf(model: ReconModel, tape: Tape) -> Var:
    return tape.watch(("params", id(model)), model.params)
