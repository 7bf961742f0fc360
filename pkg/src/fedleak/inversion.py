"""Label-guided gradient inversion of an intercepted client update.

The round gradient is recovered from the weight delta, then a dummy image is
optimised so that the model gradient it induces (under a fixed candidate
layout label) matches the recovered one.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import unet
from .autodiff import Tensor
from .pgm import write_pgm

CS_EPS = 1e-12
TV_EPS = 1e-8
TRACE_HEADER = ["iter", "total", "grad", "tv", "dummy"]


class DegenerateInputWarning(UserWarning):
    pass


class InversionDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class GiaConfig:
    alpha: float = 0.5
    lambda_tv: float = 0.001
    lambda_dummy: float = 0.0
    iterations: int = 4000
    lr: float = 0.01
    lr_estimate: float = 0.01
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lambda_tv < 0 or self.lambda_dummy < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def replace(self, **changes) -> "GiaConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ReconstructionResult:
    final: np.ndarray
    best: np.ndarray
    trace: np.ndarray  # (iterations, 4): total, grad, tv, dummy
    best_iter: int
    label_id: str = ""
    label_class: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def best_total(self) -> float:
        return float(self.trace[self.best_iter, 0])

    @property
    def best_grad_loss(self) -> float:
        return float(self.trace[:, 1].min())


def extract_gradients(w_prev: unet.ModelWeights, w_curr: unet.ModelWeights, lr_estimate: float) -> dict:
    """Round gradient implied by a plain-SGD weight delta: (prev - curr) / lr."""
    if lr_estimate <= 0:
        raise ValueError("learning-rate estimate must be positive")
    if not w_prev.congruent(w_curr):
        raise ValueError("weight sets are not structurally congruent")
    return {k: (w_prev[k] - w_curr[k]) / lr_estimate for k in w_prev}


def _flat(grads: Mapping) -> Tensor:
    parts = [ad.flatten(ad.as_tensor(g)) for g in grads.values()]
    return parts[0] if len(parts) == 1 else ad.concat(parts)


def gradient_matching_loss(g_dummy: Mapping, g_target: Mapping, alpha: float) -> Tensor:
    """alpha * MSE + (1 - alpha) * (1 - cosine), over all parameters jointly."""
    if list(g_dummy) != list(g_target):
        raise ValueError("gradient maps are not congruent")
    d = _flat(g_dummy)
    t = _flat(g_target)
    if d.shape != t.shape:
        raise ValueError(f"flattened gradient sizes differ: {d.shape} vs {t.shape}")
    mse = ad.mse(d, t)
    dd = ad.sum(ad.mul(d, d))
    tt = float(np.dot(t.data, t.data))
    if dd.item() == 0.0 and tt == 0.0:
        warnings.warn("gradient_matching_loss: both gradients are zero", DegenerateInputWarning, stacklevel=2)
    # a zero vector has no direction; hold its norm constant instead of sqrt'ing 0
    d_norm = ad.sqrt(dd) if dd.item() > 0.0 else Tensor(0.0)
    denom = ad.add(ad.scale(d_norm, math.sqrt(tt)), CS_EPS)
    cs = ad.mul(ad.sum(ad.mul(d, t)), ad.power(denom, -1.0))
    return ad.add(ad.scale(mse, alpha), ad.scale(ad.sub(1.0, cs), 1.0 - alpha))


def tv_loss(x: Tensor) -> Tensor:
    """Smoothed anisotropic total variation divided by the pixel count."""
    x = ad.as_tensor(x)
    if x.data.ndim == 2:
        x = ad.reshape(x, (1, 1) + x.shape)
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"tv_loss: image {h}x{w} is smaller than 2x2")
    dv = ad.sub(x[..., 1:, :], x[..., :-1, :])
    dh = ad.sub(x[..., :, 1:], x[..., :, :-1])
    tv = ad.add(
        ad.sum(ad.sqrt(ad.add(ad.mul(dv, dv), TV_EPS))),
        ad.sum(ad.sqrt(ad.add(ad.mul(dh, dh), TV_EPS))),
    )
    return ad.scale(tv, 1.0 / x.size)


def _label_array(label, shape) -> np.ndarray:
    grid = label.grid if hasattr(label, "grid") else label
    y = np.asarray(grid, dtype=np.float64)
    return np.broadcast_to(y, shape).copy()


def dummy_fp_loss(weights, x: Tensor, label, arch=None) -> Tensor:
    """Forward-pass MSE between the model's prediction on ``x`` and ``label``."""
    pred = unet.forward(weights, x, arch)
    return unet.seg_loss(pred, _label_array(label, pred.shape))


@dataclass
class LossParts:
    total: Tensor
    grad: float
    tv: float
    dummy: float


def total_loss(params: Mapping[str, Tensor], arch, x: Tensor, label, g_target: Mapping, config: GiaConfig) -> LossParts:
    """L_grad + lambda_tv * L_tv - lambda_dummy * L_dummy.

    ``params`` must be grad-requiring tensors so the dummy gradient can be
    taken with respect to them and then differentiated w.r.t. ``x``.
    """
    l_dummy = dummy_fp_loss(params, x, label, arch)
    g_dummy = ad.backward(l_dummy, params, differentiable=True)
    l_grad = gradient_matching_loss(g_dummy, g_target, config.alpha)
    total = l_grad
    l_tv = None
    if config.lambda_tv:
        l_tv = tv_loss(x)
        total = ad.add(total, ad.scale(l_tv, config.lambda_tv))
    if config.lambda_dummy:
        total = ad.sub(total, ad.scale(l_dummy, config.lambda_dummy))
    tv_value = l_tv.item() if l_tv is not None else tv_loss(x.data).item()
    return LossParts(total, l_grad.item(), tv_value, l_dummy.item())


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = self.v = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(x), np.zeros_like(x)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class GradientDescent:
    def __init__(self, lr):
        self.lr = lr

    def step(self, x, g):
        return x - self.lr * g


def _optimizer(config: GiaConfig):
    if config.optimizer == "adam":
        return Adam(config.lr, config.betas, config.eps)
    return GradientDescent(config.lr)


def run_gia(view, label, config: GiaConfig, label_id: str = "", label_class: str = "") -> ReconstructionResult:
    """Optimise a dummy image (only) against the intercepted update."""
    w_prev, w_curr = view
    arch = w_prev.arch
    g_target = extract_gradients(w_prev, w_curr, config.lr_estimate)
    params = w_prev.tensors(requires_grad=True)
    size = arch.image_size
    shape = (config.batch_size, 1, size, size)
    rng = np.random.default_rng(config.seed)
    x = rng.random(shape)
    y = _label_array(label, shape)
    label_id = label_id or getattr(label, "cell_id", "")
    label_class = label_class or getattr(label, "cls", "")

    opt = _optimizer(config)
    trace = np.zeros((config.iterations, 4))
    best, best_iter, best_total = x.copy(), 0, math.inf
    for it in range(config.iterations):
        xt = Tensor(x, requires_grad=True)
        try:
            parts = total_loss(params, arch, xt, y, g_target, config)
        except FloatingPointError as exc:
            raise InversionDiverged(f"non-finite value at iteration {it}: {exc}") from exc
        row = (parts.total.item(), parts.grad, parts.tv, parts.dummy)
        if not all(math.isfinite(v) for v in row):
            raise InversionDiverged(
                f"non-finite loss at iteration {it}: total={row[0]} grad={row[1]} tv={row[2]} dummy={row[3]}"
            )
        trace[it] = row
        if row[0] < best_total:
            best, best_iter, best_total = x.copy(), it, row[0]
        try:
            gx = ad.backward(parts.total, [xt])[0].data
        except FloatingPointError as exc:
            raise InversionDiverged(
                f"non-finite gradient at iteration {it}: total={row[0]} grad={row[1]} tv={row[2]} dummy={row[3]}"
            ) from exc
        x = np.clip(opt.step(x, gx), 0.0, 1.0)
    squeeze = (lambda a: a[0, 0]) if config.batch_size == 1 else (lambda a: a[:, 0])
    return ReconstructionResult(squeeze(x), squeeze(best), trace, best_iter, label_id, label_class)


def label_seed(seed: int, label_id: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(label_id.encode("utf-8"))]).generate_state(1)[0])


def dual_run(view, label_a, label_b, config: GiaConfig) -> tuple[ReconstructionResult, ReconstructionResult]:
    """Two inversions of the same update, one per candidate label.

    Each run's initialisation seed is derived from ``config.seed`` and the
    label id, so identical labels reproduce identical runs.
    """
    out = []
    for label in (label_a, label_b):
        cid = getattr(label, "cell_id", "")
        out.append(run_gia(view, label, config.replace(seed=label_seed(config.seed, cid))))
    return out[0], out[1]


DEFAULT_LR_GRID = (0.1, 0.05, 0.01, 0.005, 0.001)


def estimate_lr(view, label, candidates: Sequence[float] = DEFAULT_LR_GRID, probe: GiaConfig | None = None) -> float:
    """Grid search over client learning rates by short probe inversions.

    Picks the candidate whose probe ends with the lowest gradient-matching
    loss; ties go to the larger rate.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("empty learning-rate grid")
    if len(candidates) == 1:
        return candidates[0]
    probe = probe or GiaConfig(iterations=200)
    best_lr, best_loss = None, math.inf
    for lr in sorted(candidates, reverse=True):
        res = run_gia(view, label, probe.replace(lr_estimate=lr))
        final = float(res.trace[-1, 1])
        if final < best_loss:
            best_lr, best_loss = lr, final
    return best_lr


def write_reconstruction(result: ReconstructionResult, outdir, stem: str) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_pgm(outdir / f"{stem}_final.pgm", result.final)
    write_pgm(outdir / f"{stem}_best.pgm", result.best)
    with open(outdir / f"{stem}_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for i, row in enumerate(result.trace):
            w.writerow([i] + [repr(float(v)) for v in row])
