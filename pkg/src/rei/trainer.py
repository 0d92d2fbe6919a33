"""Adam optimisation, the epoch loop, checkpoints and deterministic resumption."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .diffcore import ReconModel, Tape, backward, model_apply, param_leaf, read_container, write_container
from .diffcore.checkpoint import CheckpointFormatError
from .diffcore.tape import value_of
from .losses import Batch, LossConfig, StepKeys, variant_loss
from .noise import NoiseParams, RngStream

log = logging.getLogger(__name__)

DECAY_FACTOR = 0.1

PRESETS = {
    "mri": dict(lr0=5e-4, batch_size=2, epochs=500, decay_points=(300,)),
    "inpaint": dict(lr0=1e-4, batch_size=1, epochs=500, decay_points=(100, 200, 300, 400)),
    "ct": dict(lr0=5e-4, batch_size=2, epochs=3000, decay_points=(1000, 2000)),
}

LOSS_PRESETS = {
    "mri": dict(alpha=1.0, tau=1e-2, sure_scale=1.0),
    "inpaint": dict(alpha=1.0, tau=1e-2, sure_scale=1.0),
    "ct": dict(alpha=1000.0, tau=10.0, sure_scale=1e-5),
}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str = "inpaint"
    epochs: int = 500
    batch_size: int = 1
    lr0: float = 1e-4
    decay_points: tuple[int, ...] = (100, 200, 300, 400)
    weight_decay: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0
    eval_every: int = 1
    grad_clip: float | None = None

    def __post_init__(self):
        if self.task not in PRESETS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr0 < 0 or self.weight_decay < 0:
            raise ValueError("lr0 and weight_decay must be nonnegative")
        object.__setattr__(self, "decay_points", tuple(sorted(int(p) for p in self.decay_points)))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))

    @classmethod
    def preset(cls, task: str, variant: str = "REI", **overrides) -> "TrainConfig":
        if task not in PRESETS:
            raise ValueError(f"unknown task {task!r}")
        loss = overrides.pop("loss", None) or LossConfig(variant=variant, **LOSS_PRESETS[task])
        return cls(task=task, loss=loss, **{**PRESETS[task], **overrides})

    def lr(self, epoch: int) -> float:
        passed = sum(1 for p in self.decay_points if p <= epoch)
        return self.lr0 * DECAY_FACTOR ** passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_points"] = list(self.decay_points)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        return cls(**d)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float,
              weight_decay: float = 0.0) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    g = grads + weight_decay * params
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    t = state.t + 1
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)


# ---- checkpoints ---------------------------------------------------------

def save_checkpoint(path, model: ReconModel, state: AdamState, config: TrainConfig,
                    epoch: int = 0, history: list[dict] | None = None) -> None:
    header = {
        "model": model.config(),
        "adam": {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "train": config.to_dict(),
        "epoch": int(epoch),
        "history": history or [],
    }
    write_container(path, header, {"params": model.params, "adam_m": state.m, "adam_v": state.v})


@dataclass
class Checkpoint:
    model: ReconModel
    state: AdamState
    config: TrainConfig
    epoch: int
    history: list[dict]


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    try:
        model = ReconModel(**header["model"], params=arrays["params"])
        a = header["adam"]
        state = AdamState(arrays["adam_m"], arrays["adam_v"], a["t"], a["beta1"], a["beta2"], a["eps"])
        config = TrainConfig.from_dict(header["train"])
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: missing field {exc}") from exc
    return Checkpoint(model, state, config, int(header["epoch"]), header["history"])


# ---- training loop -------------------------------------------------------

def reconstruct(model: ReconModel, A, y, tape: Tape | None = None, stats: dict | None = None):
    """f(y) = G_θ(A† y)."""
    return model_apply(model, A.pinv(y), tape=tape, stats=stats)


def loss_and_grad(model: ReconModel, A, group, noise: NoiseParams, cfg: LossConfig,
                  batch: Batch, keys: StepKeys, params=None, stats: dict | None = None):
    """Loss, term breakdown and parameter gradient for one batch."""
    tape = Tape()
    if params is not None:
        model = model.copy(np.asarray(params, dtype=np.float64))
    f = lambda v: reconstruct(model, A, v, tape=tape, stats=stats)
    loss, terms = variant_loss(cfg, batch, f, A, group, noise, keys)
    (grad,) = backward(tape, loss, [param_leaf(model, tape)])
    return float(value_of(loss)), terms, grad


@dataclass
class TrainResult:
    model: ReconModel
    state: AdamState
    history: list[dict]
    checkpoints: list[Path]


def _batches(order: np.ndarray, size: int):
    for s in range(0, len(order), size):
        yield order[s:s + size]


def epoch_order(seed: int, epoch: int, indices) -> np.ndarray:
    idx = np.asarray(indices)
    return idx[RngStream(seed, 0, epoch, "shuffle").generator().permutation(len(idx))]


def write_metrics_csv(path, history: list[dict]) -> None:
    cols = ["epoch", "lr"] + sorted({k for row in history for k in row} - {"epoch", "lr", "psnr"}) + ["psnr"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([_fmt(row.get(c, "")) for c in cols])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def train(config: TrainConfig, dataset, model: ReconModel, A, group, noise: NoiseParams, *,
          out_dir=None, resume=None, evaluate: Callable[[ReconModel], float] | None = None,
          stop_after: int | None = None) -> TrainResult:
    """Run the epoch loop.

    ``dataset`` needs ``y`` (measurements, item-major), ``train`` (indices) and,
    depending on the variant, ``x`` and ``u``. ``evaluate`` maps the current
    model to a test PSNR. With ``out_dir`` the metrics CSV and periodic
    checkpoints are written there. ``resume`` is a checkpoint path whose
    parameters, optimiser state and history replace the given model's.
    ``stop_after`` ends the run after that many completed epochs.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if len(dataset.train) == 0:
        raise ValueError("empty training split")

    start, history = 0, []
    state = AdamState.zeros_like(model.params)
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.model.n_params != model.n_params:
            raise ValueError("checkpoint model does not match")
        model = ck.model
        state, start, history = ck.state, ck.epoch, list(ck.history)
    else:
        model = model.copy()

    checkpoints = []
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start, last):
        lr = config.lr(epoch)
        keys = StepKeys(config.seed, epoch)
        sums, count = {}, 0
        for idx in _batches(epoch_order(config.seed, epoch, dataset.train), config.batch_size):
            batch = Batch(
                y=dataset.y[idx],
                index=[int(i) for i in idx],
                x=None if dataset.x is None else dataset.x[idx],
                u=None if getattr(dataset, "u", None) is None else dataset.u[idx],
            )
            loss, terms, grad = loss_and_grad(model, A, group, noise, config.loss, batch, keys)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                _abort(out, model, state, config, epoch, history, terms)
            if config.grad_clip is not None:
                norm = float(np.linalg.norm(grad))
                if norm > config.grad_clip:
                    grad = grad * (config.grad_clip / norm)
            params, state = adam_step(state, model.params, grad, lr, config.weight_decay)
            model.params = params
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        row = {"epoch": epoch, "lr": lr, **{k: v / count for k, v in sums.items()}}
        if evaluate is not None and config.eval_every and (epoch + 1) % config.eval_every == 0:
            row["psnr"] = float(evaluate(model))
        history.append(row)
        log.info("epoch %d lr %.3g %s", epoch, lr, " ".join(f"{k}={v:.5g}" for k, v in row.items() if k not in ("epoch", "lr")))
        if out is not None:
            write_metrics_csv(out / "metrics.csv", history)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                p = out / f"checkpoint_{epoch + 1:05d}.reic"
                save_checkpoint(p, model, state, config, epoch + 1, history)
                checkpoints.append(p)
    if out is not None:
        p = out / "final.reic"
        save_checkpoint(p, model, state, config, last, history)
        checkpoints.append(p)
    return TrainResult(model, state, history, checkpoints)


def _abort(out, model, state, config, epoch, history, terms):
    msg = f"non-finite loss or gradient at epoch {epoch}; terms {terms}"
    if out is not None:
        snap = out / "diverged.reic"
        save_checkpoint(snap, model, state, config, epoch, history)
        msg += f"; snapshot written to {snap}"
    raise TrainingDiverged(msg)
