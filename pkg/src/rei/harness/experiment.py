"""Experiment configuration, training of variant cells, reports and figure data."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import ReconModel
from ..losses import VARIANTS, LossConfig
from ..noise import NoiseParams
from ..operators import CtOp, InpaintOp, MriOp, RadonSpec
from ..trainer import LOSS_PRESETS, PRESETS, TrainConfig, load_checkpoint, reconstruct, train
from ..transforms import TransformGroup
from .data import Dataset, load_images, psnr, simulate, synthetic_images

log = logging.getLogger(__name__)

SECTIONS = ("task", "operator", "noise", "group", "loss", "train", "data", "seed")
BASELINE = "A†y"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


DEFAULTS = {
    "inpaint": {
        "operator": {"kept_fraction": 0.7, "seed": 0},
        "group": {"kind": "shift2d"},
    },
    "mri": {
        "operator": {"acceleration": 4.0, "center_fraction": 0.08, "seed": 0},
        "group": {"kind": "rotate", "order": 360},
    },
    "ct": {
        "operator": {"views": 50, "I0": 1e5, "mu": 0.02, "min_count": 1.0},
        "group": {"kind": "rotate", "order": 360},
    },
}


@dataclass
class ExperimentConfig:
    task: str
    operator: dict
    noise: NoiseParams
    group: dict
    variants: list[str]
    loss: dict
    train: dict
    model: dict
    data: dict
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        problems = []
        unknown = set(d) - set(SECTIONS)
        if unknown:
            problems.append(f"unknown sections: {sorted(unknown)}")
        task = d.get("task")
        if task not in PRESETS:
            problems.append(f"task must be one of {sorted(PRESETS)}, got {task!r}")
            raise ConfigError(problems)
        defaults = DEFAULTS[task]
        operator = {**defaults["operator"], **d.get("operator", {})}
        group = {**defaults["group"], **d.get("group", {})}
        loss = dict(d.get("loss", {}))
        variants = loss.pop("variants", ["REI"])
        for v in variants:
            if v not in VARIANTS:
                problems.append(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
        loss = {**LOSS_PRESETS[task], **loss}
        for k in loss:
            if k not in ("alpha", "tau", "sure_scale"):
                problems.append(f"unknown loss option {k!r}")
        try:
            noise = NoiseParams(**d.get("noise", {}))
        except (TypeError, ValueError) as exc:
            problems.append(f"noise: {exc}")
            noise = None
        train_cfg = dict(d.get("train", {}))
        model = {"width": 8, "depth": 2, "convs_per_block": 1, **train_cfg.pop("model", {})}
        data = {"source": "synthetic", "count": 60, "side": 32, "n_train": 50, "n_test": 10, **d.get("data", {})}
        if data["source"] not in ("synthetic", "directory"):
            problems.append("data.source must be 'synthetic' or 'directory'")
        if data["source"] == "directory" and "path" not in data:
            problems.append("data.path is required for a directory source")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            problems.append("seed must be a nonnegative integer")
        cfg = cls(task, operator, noise, group, list(variants), loss, train_cfg, model, data, seed, copy.deepcopy(d))
        if not problems:
            try:
                cfg.train_config(variants[0] if variants else "REI")
                TransformGroup(group["kind"], data["side"], group.get("order"))
                ReconModel(in_channels=cfg.channels, **model)
            except (TypeError, ValueError) as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read {path}: {exc}"]) from exc
        return cls.from_dict(d)

    @property
    def channels(self) -> int:
        return 2 if self.task == "mri" else 1

    def train_config(self, variant: str) -> TrainConfig:
        loss = LossConfig(variant=variant, **self.loss)
        return TrainConfig.preset(self.task, loss=loss, seed=self.seed, **self.train)

    def with_noise(self, **changes) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["noise"] = {**raw.get("noise", {}), **changes}
        return ExperimentConfig.from_dict(raw)


def build_operator(cfg: ExperimentConfig):
    side, op = cfg.data["side"], cfg.operator
    if cfg.task == "inpaint":
        return InpaintOp.random(side, op["kept_fraction"], op["seed"])
    if cfg.task == "mri":
        return MriOp.random(side, op["acceleration"], op["center_fraction"], op["seed"])
    return CtOp(RadonSpec(op["views"], side), I0=op["I0"], mu=op["mu"], min_count=op["min_count"])


def build_dataset(cfg: ExperimentConfig, A) -> Dataset:
    d = cfg.data
    if d["source"] == "synthetic":
        imgs = synthetic_images(d["count"], d["side"], seed=cfg.seed)
    else:
        imgs = load_images(d["path"], d["side"])
    x = imgs[:, None]
    if cfg.channels == 2:
        x = np.concatenate([x, np.zeros_like(x)], axis=1)
    return simulate(x, A, cfg.noise, cfg.seed, d["n_train"], d["n_test"])


def build(cfg: ExperimentConfig):
    A = build_operator(cfg)
    group = TransformGroup(cfg.group["kind"], cfg.data["side"], cfg.group.get("order"))
    return A, group, build_dataset(cfg, A)


def evaluate(model: ReconModel, A, dataset: Dataset, idx=None) -> np.ndarray:
    """Per-image test PSNR of f(y)."""
    idx = dataset.test if idx is None else idx
    rec = np.asarray(reconstruct(model, A, dataset.y[idx]))
    return np.array([psnr(r, x) for r, x in zip(rec, dataset.x[idx])])


def baseline_psnr(A, dataset: Dataset) -> np.ndarray:
    rec = np.asarray(A.pinv(dataset.y[dataset.test]))
    return np.array([psnr(r, x) for r, x in zip(rec, dataset.x[dataset.test])])


@dataclass
class ExperimentReport:
    """Per-method test PSNR. ``runtime`` is kept out of the CSV so reports are reproducible."""

    rows: dict[str, np.ndarray]
    config: dict
    runtime: dict[str, float] = field(default_factory=dict)
    noise_level: float | None = None

    def mean(self, method: str) -> float:
        return float(np.mean(self.rows[method]))

    def std(self, method: str) -> float:
        return float(np.std(self.rows[method]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n = len(next(iter(self.rows.values())))
            w.writerow(["method", "psnr_mean", "psnr_std"] + [f"img{i}" for i in range(n)])
            for method, vals in self.rows.items():
                w.writerow([method, repr(self.mean(method)), repr(self.std(method))] + [repr(float(v)) for v in vals])

    def table(self) -> str:
        lines = [f"{'method':<12}{'PSNR (dB)':>18}"]
        for method in self.rows:
            lines.append(f"{method:<12}{self.mean(method):>10.2f} ± {self.std(method):.2f}")
        return "\n".join(lines)


def write_pgm(path, img: np.ndarray) -> None:
    from PIL import Image

    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 2:
        a = np.hypot(a[0], a[1])
    elif a.ndim == 3:
        a = a[0]
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def run_experiment(config, out_dir=None, n_images: int = 4, stop_after: int | None = None) -> ExperimentReport:
    """Train every requested variant, then score them and A†y on the test split."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    out = Path(out_dir) if out_dir is not None else None
    A, group, ds = build(cfg)
    rows = {BASELINE: baseline_psnr(A, ds)}
    runtime = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True), "utf-8")
        if getattr(A, "meas_mask", None) is not None:
            write_pgm(out / "mask.pgm", A.meas_mask)
        for k, i in enumerate(ds.test[:n_images]):
            write_pgm(out / f"truth_{k}.pgm", ds.x[i])
            write_pgm(out / f"pinv_{k}.pgm", np.asarray(A.pinv(ds.y[i:i + 1]))[0])
    for variant in cfg.variants:
        t0 = time.perf_counter()
        tcfg = cfg.train_config(variant)
        model = ReconModel(cfg.channels, seed=cfg.seed, **cfg.model)
        vdir = None if out is None else out / variant
        res = train(tcfg, ds, model, A, group, cfg.noise, out_dir=vdir,
                    evaluate=lambda mdl: float(np.mean(evaluate(mdl, A, ds))), stop_after=stop_after)
        rows[variant] = evaluate(res.model, A, ds)
        runtime[variant] = time.perf_counter() - t0
        log.info("%s: %.2f dB (%.0f s)", variant, float(np.mean(rows[variant])), runtime[variant])
        if vdir is not None:
            rec = np.asarray(reconstruct(res.model, A, ds.y[ds.test[:n_images]]))
            for k, r in enumerate(rec):
                write_pgm(vdir / f"recon_{k}.pgm", r)
    level = cfg.noise.sigma if cfg.noise.kind == "gaussian" else cfg.noise.gamma
    report = ExperimentReport(rows, cfg.raw, runtime, level)
    if out is not None:
        report.to_csv(out / "report.csv")
        (out / "run.json").write_text(json.dumps({"runtime_s": runtime}, indent=2), "utf-8")
    return report


def eval_checkpoint(config, checkpoint) -> dict:
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    A, _, ds = build(cfg)
    ck = load_checkpoint(checkpoint)
    vals = evaluate(ck.model, A, ds)
    base = baseline_psnr(A, ds)
    return {"epoch": ck.epoch, "variant": ck.config.loss.variant,
            "psnr_mean": float(vals.mean()), "psnr_std": float(vals.std()),
            "baseline_psnr_mean": float(base.mean())}


# ---- figure data ---------------------------------------------------------

FIGURE_COLUMNS = ["method", "noise_level", "psnr_mean", "psnr_std"]


def emit_figure_data(reports, path=None) -> list[dict]:
    """Tidy PSNR-vs-noise-level rows, sorted by method then level."""
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    if not reports:
        raise ValueError("no reports")
    methods = set(reports[0].rows)
    for r in reports[1:]:
        if set(r.rows) != methods:
            raise ValueError("reports cover different methods; sweep grids do not match")
    levels = [r.noise_level for r in reports]
    if len(set(levels)) != len(levels):
        raise ValueError("duplicate noise levels in sweep")
    rows = [
        {"method": m, "noise_level": float(r.noise_level), "psnr_mean": r.mean(m), "psnr_std": r.std(m)}
        for r in reports for m in r.rows
    ]
    rows.sort(key=lambda row: (row["method"], row["noise_level"]))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, FIGURE_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows


def read_figure_data(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"method": r["method"], "noise_level": float(r["noise_level"]),
             "psnr_mean": float(r["psnr_mean"]), "psnr_std": float(r["psnr_std"])}
            for r in csv.DictReader(fh)
        ]


def sweep(config, param: str, values, out_dir=None) -> list[ExperimentReport]:
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config)
    if param not in ("sigma", "gamma"):
        raise ValueError("sweep parameter must be 'sigma' or 'gamma'")
    reports = []
    for v in values:
        sub = None if out_dir is None else Path(out_dir) / f"{param}_{v:g}"
        reports.append(run_experiment(cfg.with_noise(**{param: float(v)}), sub))
    if out_dir is not None:
        emit_figure_data(reports, Path(out_dir) / "figure_data.csv")
    return reports

