"""Monte-Carlo and algebraic self-checks: SURE bias, divergence trace, operators, gradients."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..diffcore import ReconModel, model_apply, relative_error
from ..diffcore.gradcheck import finite_diff_grad
from ..diffcore.model import layer_slices
from ..losses import VARIANTS, Batch, LossConfig, StepKeys, mc_divergence, sure_loss
from ..noise import NoiseParams, skewed_probe
from ..operators import CtOp, IdentityOp, InpaintOp, MriOp, RadonSpec, _fbp_fwd, _radon_fwd, ct_apply, ct_backproject
from ..trainer import loss_and_grad
from ..transforms import TransformGroup

# ---- SURE unbiasedness -----------------------------------------------------

SURE_CASES = {
    # noise kind: (noise params, clean-signal range)
    "gaussian": (NoiseParams("gaussian", sigma=0.1), (0.0, 1.0)),
    "poisson": (NoiseParams("poisson", gamma=0.1), (0.2, 1.0)),
    "mpg": (NoiseParams("mpg", gamma=1.0, sigma=2.0), (5.0, 15.0)),
}
DENOISERS = ("identity", "zero", "linear", "net")


@dataclass
class SureReport:
    noise: str
    denoiser: str
    draws: int
    sure_mean: float
    oracle_mse: float
    std_error: float
    passed: bool

    @property
    def bias(self) -> float:
        return self.sure_mean - self.oracle_mse

    def to_dict(self) -> dict:
        return {**asdict(self), "bias": self.bias}


def _denoiser(kind: str, m: int, scale: float, seed: int):
    """Returns (f acting on (N, m) batches, matrix B if linear else None)."""
    rng = np.random.default_rng(seed + 1)
    if kind == "identity":
        return (lambda v: v), np.eye(m)
    if kind == "zero":
        return (lambda v: v * 0.0), np.zeros((m, m))
    if kind == "linear":
        B = 0.5 * np.eye(m) + 0.3 * rng.standard_normal((m, m)) / math.sqrt(m)
        return _matvec_fn(B), B
    if kind == "net":
        side = int(round(math.sqrt(m)))
        if side * side != m or side % 2:
            raise ValueError("net denoiser needs m to be an even square")
        model = ReconModel(1, width=2, depth=1, seed=seed)
        last = layer_slices(model.layer_spec())[-1]
        p = model.params.copy()
        p[last[0]] = 0.3 * rng.standard_normal(last[0].stop - last[0].start)
        model = model.copy(p)

        def net(v):
            from ..diffcore import ops
            img = ops.reshape(ops.mul(v, 1.0 / scale), (-1, 1, side, side))
            return ops.mul(ops.reshape(model_apply(model, img), (-1, m)), scale)

        return net, None
    raise ValueError(f"unknown denoiser {kind!r}; choose from {DENOISERS}")


def _matvec_fn(B):
    from ..diffcore import ops
    return lambda v: ops.matvec(B, v)


def sure_check(noise_kind: str, denoiser: str, draws: int = 100_000, m: int = 64,
               seed: int = 0, chunk: int = 100, tau: float = 1e-2) -> SureReport:
    """Average SURE over ``draws`` noisy copies of a fixed signal and compare with the true MSE.

    The oracle is analytic for linear denoisers and, for the network, the
    Monte-Carlo MSE on the same draws (paired difference). Standard errors come
    from means over consecutive chunks of ``chunk`` draws.
    """
    if noise_kind not in SURE_CASES:
        raise ValueError(f"unknown noise kind {noise_kind!r}")
    noise, (lo, hi) = SURE_CASES[noise_kind]
    rng = np.random.default_rng(seed)
    u = rng.uniform(lo, hi, m)
    f, B = _denoiser(denoiser, m, hi, seed)
    A = IdentityOp(m)
    n_chunks = max(1, draws // chunk)
    sure_means, err_means = np.empty(n_chunks), np.empty(n_chunks)
    U = np.broadcast_to(u, (chunk, m))
    for k in range(n_chunks):
        g = np.random.default_rng([seed, k])
        if noise.kind == "gaussian":
            y = U + noise.sigma * g.standard_normal(U.shape)
        else:
            y = noise.gamma * g.poisson(U / noise.gamma)
            if noise.kind == "mpg":
                y = y + noise.sigma * g.standard_normal(U.shape)
        if noise.kind == "poisson":
            b = g.integers(0, 2, U.shape) * 2.0 - 1.0
        else:
            b = g.standard_normal(U.shape)
        c = skewed_probe(g, U.shape)
        sure_means[k] = float(sure_loss(y, f, A, noise, tau, b, c))
        err_means[k] = float(np.mean(np.sum((U - np.asarray(f(y))) ** 2, axis=1) / m))
    if B is not None:
        var = noise.variance(u)
        oracle = (np.sum(((np.eye(m) - B) @ u) ** 2) + np.sum(B * B * var[None, :])) / m
        diffs = sure_means
        centre = oracle
    else:
        oracle = float(np.mean(err_means))
        diffs = sure_means - err_means
        centre = 0.0
    se = float(np.std(diffs, ddof=1) / math.sqrt(n_chunks)) if n_chunks > 1 else math.inf
    mean = float(np.mean(sure_means))
    passed = abs(float(np.mean(diffs)) - centre) <= 3 * se
    if B is not None:
        passed = passed and abs(mean - oracle) <= 0.01 * abs(oracle)
    return SureReport(noise_kind, denoiser, n_chunks * chunk, mean, float(oracle), se, bool(passed))


# ---- divergence / trace ----------------------------------------------------

def trace_check(m: int = 64, probes: int = 10_000, tau: float = 1e-2, seed: int = 0) -> dict:
    """Hutchinson-style divergence of y -> By against trace(B) for B = I + G/sqrt(m)."""
    rng = np.random.default_rng(seed)
    B = np.eye(m) + rng.standard_normal((m, m)) / math.sqrt(m)
    h = _matvec_fn(B)
    y = rng.standard_normal((probes, m))
    b = rng.standard_normal((probes, m))
    est = float(mc_divergence(h, y, b, tau)) / probes
    tr = float(np.trace(B))
    return {"trace": tr, "estimate": est, "relative_error": abs(est - tr) / abs(tr)}


def identity_divergence_defect(taus=(1e-6, 1e-4, 1e-2, 1.0, 100.0), m: int = 64, seed: int = 0) -> float:
    """max over τ of |div_τ(id) - ‖b‖²| / ‖b‖²; zero up to rounding."""
    rng = np.random.default_rng(seed)
    y, b = rng.standard_normal((1, m)), rng.standard_normal((1, m))
    ref = float(np.sum(b * b))
    return max(abs(float(mc_divergence(lambda v: v, y, b, t)) - ref) / ref for t in taus)


# ---- operators ---------------------------------------------------------------

def dense_matrix(fn, in_shape) -> np.ndarray:
    """Columns are fn(e_j) for every basis image e_j (flattened)."""
    n = int(np.prod(in_shape))
    cols = np.asarray(fn(np.eye(n).reshape((n,) + tuple(in_shape))))
    return cols.reshape(n, -1).T


def shepp_logan(n: int) -> np.ndarray:
    """Modified Shepp-Logan head phantom on an n x n grid."""
    ellipses = [
        (1.0, .69, .92, 0, 0, 0), (-.8, .6624, .874, 0, -.0184, 0),
        (-.2, .11, .31, .22, 0, -18), (-.2, .16, .41, -.22, 0, 18),
        (.1, .21, .25, 0, .35, 0), (.1, .046, .046, 0, .1, 0), (.1, .046, .046, 0, -.1, 0),
        (.1, .046, .023, -.08, -.605, 0), (.1, .023, .023, 0, -.606, 0), (.1, .023, .046, .06, -.605, 0),
    ]
    y, x = np.mgrid[-1:1:n * 1j, -1:1:n * 1j]
    y = -y
    img = np.zeros((n, n))
    for amp, a, b, x0, y0, phi in ellipses:
        p = math.radians(phi)
        xr = (x - x0) * math.cos(p) + (y - y0) * math.sin(p)
        yr = -(x - x0) * math.sin(p) + (y - y0) * math.cos(p)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1] += amp
    return img


def op_check(task: str, side: int = 16, seed: int = 0) -> dict:
    """Dense-matrix adjoint and A A† A = A residuals (inpaint, mri) or CT log/FBP checks."""
    if task == "inpaint":
        op = InpaintOp.random(side, 0.7, seed)
        shape = (1, side, side)
    elif task == "mri":
        op = MriOp.random(side, 4.0, seed=seed)
        shape = (2, side, side)
    elif task == "ct":
        return ct_check(seed=seed)
    else:
        raise ValueError(f"unknown task {task!r}")
    M = dense_matrix(op.apply, shape)
    meas = _meas_shape(op, shape)
    Mt = dense_matrix(op.adjoint, meas)
    P = dense_matrix(op.pinv, meas)
    return {
        "task": task,
        "adjoint_residual": float(np.max(np.abs(Mt - M.T))),
        "pinv_residual": float(np.max(np.abs(M @ P @ M - M))),
    }


def _meas_shape(op, in_shape):
    return np.asarray(op.apply(np.zeros((1,) + tuple(in_shape)))).shape[1:]


def ct_check(side: int = 64, views: int = 180, seed: int = 0) -> dict:
    spec = RadonSpec(views, side)
    op = CtOp(spec, I0=1e5, mu=0.02)
    disk = ((np.mgrid[:side, :side] - (side - 1) / 2) ** 2).sum(0) <= (side / 2 - 1) ** 2
    x = np.random.default_rng(seed).random((1, side, side)) * disk
    cancel = np.asarray(ct_backproject(op, ct_apply(op, x))) - _fbp_fwd(spec, _radon_fwd(spec, x))
    ph = gaussian_filter(shepp_logan(side), 1.0)
    rec = _fbp_fwd(spec, _radon_fwd(spec, ph))
    return {
        "task": "ct",
        "log_cancel": float(np.max(np.abs(cancel))),
        "fbp_relative_error": float(np.linalg.norm(rec - ph) / np.linalg.norm(ph)),
    }


# ---- gradient integrity -------------------------------------------------------

@dataclass
class GradReport:
    variant: str
    instances: int
    max_relative_error: float
    skipped_near_kink: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error < 1e-5


def _grad_instance(variant: str, seed: int, side: int = 4, batch: int = 2):
    rng = np.random.default_rng(seed)
    model = ReconModel(1, width=2, depth=1, seed=seed)
    p = model.params.copy()
    last = layer_slices(model.layer_spec())[-1]
    p[last[0]] = 0.5 * rng.standard_normal(last[0].stop - last[0].start)
    p[last[1]] = 0.1 * rng.standard_normal(last[1].stop - last[1].start)
    for ws, bs in layer_slices(model.layer_spec())[:-1]:
        p[bs] = 0.1 * rng.standard_normal(bs.stop - bs.start)
    model = model.copy(p)
    A = InpaintOp.random(side, 0.7, seed)
    noise = NoiseParams("gaussian", sigma=0.1)
    x = rng.random((batch, 1, side, side))
    u = np.asarray(A.apply(x))
    y = (u + 0.1 * rng.standard_normal(u.shape)) * A.meas_mask
    b = Batch(y=y, index=list(range(batch)), x=x, u=u)
    cfg = LossConfig(variant=variant, alpha=0.7, tau=1e-2)
    group = TransformGroup("shift2d", side)
    return model, A, group, noise, cfg, b, StepKeys(seed, 0)


def _layer_directions(model: ReconModel, rng) -> np.ndarray:
    """One random unit direction per layer, supported on that layer's weights and bias."""
    dirs = []
    for ws, bs in layer_slices(model.layer_spec()):
        d = np.zeros(model.n_params)
        d[ws.start:bs.stop] = rng.standard_normal(bs.stop - ws.start)
        dirs.append(d / np.linalg.norm(d))
    return np.stack(dirs)


def gradcheck_variant(variant: str, instances: int = 20, step: float = 1e-5,
                      kink_margin: float = 1e-4, seed: int = 0) -> GradReport:
    """Backward gradients vs central differences along a random direction in every layer.

    Instances whose ReLU pre-activations come within ``kink_margin`` of zero
    are redrawn, since finite differences straddling a kink are meaningless.
    """
    worst, done, skipped, s = 0.0, 0, 0, seed
    while done < instances:
        model, A, group, noise, cfg, batch, keys = _grad_instance(variant, s)
        s += 1
        stats = {}
        _, _, grad = loss_and_grad(model, A, group, noise, cfg, batch, keys, stats=stats)
        if stats.get("min_abs_preact", np.inf) < kink_margin:
            skipped += 1
            continue
        dirs = _layer_directions(model, np.random.default_rng(s))
        p0 = model.params

        def along(d):
            return lambda t: loss_and_grad(model, A, group, noise, cfg, batch, keys, params=p0 + t[0] * d)[0]

        fd = np.array([finite_diff_grad(along(d), np.zeros(1), step=step)[0] for d in dirs])
        worst = max(worst, relative_error(dirs @ grad, fd))
        done += 1
    return GradReport(variant, done, float(worst), skipped)


def gradcheck_all(instances: int = 20, seed: int = 0) -> list[GradReport]:
    return [gradcheck_variant(v, instances, seed=seed) for v in VARIANTS]
