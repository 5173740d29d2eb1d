"""Latent-code inversion of the decoder (projection of a target image).

The schedule mirrors the usual GAN projector: learning rate ramped up linearly and
down by a cosine, and Gaussian noise added to the latent that decays quadratically.
The perceptual loss of that projector is replaced by an average-pooling pyramid.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DivergenceError, ScheduleError, ShapeError
from .generator import GeneratorParams, forward_backward
from .optim import Adam

_NORM = 255.0 ** 2


@dataclass(frozen=True)
class ProjectionConfig:
    num_steps: int = 500
    initial_lr: float = 0.1
    lr_rampup_fraction: float = 0.05
    lr_rampdown_fraction: float = 0.25
    init_noise_factor: float = 0.05
    noise_ramp_fraction: float = 0.75
    latent_mean_samples: int = 1024
    pyramid_levels: int = 3
    pyramid_weight: float = 1.0
    masked: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ScheduleError("num_steps must be >= 1")
        if self.initial_lr <= 0:
            raise ScheduleError("initial_lr must be positive")
        for name in ("lr_rampup_fraction", "lr_rampdown_fraction", "noise_ramp_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ScheduleError(f"{name} must lie in [0, 1]")
        if self.pyramid_levels < 1 or self.latent_mean_samples < 1:
            raise ScheduleError("pyramid_levels and latent_mean_samples must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class ProjectionResult:
    latent: np.ndarray
    reconstruction: np.ndarray
    loss_trace: np.ndarray
    best_loss: float
    best_step: int
    steps: int
    seed: int

    def best_so_far(self):
        return np.minimum.accumulate(self.loss_trace)


# ---------------------------------------------------------------------- schedule


def lr_schedule(step, config: ProjectionConfig) -> float:
    if not 0 <= step < config.num_steps:
        raise ScheduleError(f"step {step} outside [0, {config.num_steps})")
    t = step / config.num_steps
    rampup = min(1.0, t / config.lr_rampup_fraction) if config.lr_rampup_fraction > 0 else 1.0
    if config.lr_rampdown_fraction > 0:
        s = min(1.0, max(0.0, (t - (1.0 - config.lr_rampdown_fraction)) / config.lr_rampdown_fraction))
    else:
        s = 0.0
    rampdown = 0.5 * (1.0 + math.cos(math.pi * s))
    return config.initial_lr * rampup * rampdown


def noise_scale(step, config: ProjectionConfig, latent_dim) -> float:
    """Per-coordinate std of the latent perturbation at ``step``."""
    if config.noise_ramp_fraction <= 0:
        return 0.0
    t = step / config.num_steps
    ramp = max(0.0, 1.0 - t / config.noise_ramp_fraction) ** 2
    return config.init_noise_factor * math.sqrt(latent_dim) * ramp


def sample_prior(n, latent_dim, rng):
    """Latents uniform on the hypersphere of radius sqrt(latent_dim)."""
    z = rng.standard_normal((n, latent_dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True) * math.sqrt(latent_dim)


def latent_mean(params: GeneratorParams, n_samples, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = sample_prior(max(1, int(n_samples)), params.config.latent_dim, rng)
    return z.mean(axis=0)


# -------------------------------------------------------------------------- loss


def avg_pool2(x):
    h, w = x.shape[-2:]
    return x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def pyramid_loss_and_grad(a, b, levels):
    """Pyramid loss between ``a`` and ``b`` and its gradient with respect to ``a``.

    Works on ``(H, W)`` or batched ``(B, H, W)`` arrays; with a batch, the loss is
    per image.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check_pair(a, b)
    h, w = a.shape[-2:]
    f = 2 ** (levels - 1)
    if h % f or w % f:
        raise ShapeError(f"{h}x{w} image not divisible by 2**(levels-1) = {f}")
    loss = 0.0
    grad = np.zeros_like(a)
    pa, pb = a, b
    for level in range(levels):
        diff = pa - pb
        n = diff.shape[-1] * diff.shape[-2]
        loss = loss + np.sum((diff * diff).astype(np.float64), axis=(-2, -1)) / (n * _NORM)
        g = diff * (2.0 / (n * _NORM))
        # adjoint of `level` average-poolings spreads each coarse gradient over its 4**level block
        scale = 0.25 ** level
        grad += (g.repeat(2 ** level, axis=-2).repeat(2 ** level, axis=-1) * scale).astype(a.dtype)
        if level + 1 < levels:
            pa, pb = avg_pool2(pa), avg_pool2(pb)
    return loss, grad


def pyramid_loss(a, b, levels=3) -> float:
    """Sum over ``levels`` 2x average-pooled scales of MSE / 255**2 (level 0 is full resolution)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("pyramid_loss expects 2-D images")
    return float(pyramid_loss_and_grad(a, b, levels)[0])


def reconstruction_loss_and_grad(image, target, mask, levels, pyramid_weight):
    """Masked pixel MSE / 255**2 plus weighted pyramid loss, with gradient w.r.t. ``image``.

    ``mask=None`` uses every pixel for the pixel term.
    """
    diff = image - target
    if mask is None:
        n = diff.shape[-1] * diff.shape[-2]
        pix = np.sum((diff * diff).astype(np.float64), axis=(-2, -1)) / (n * _NORM)
        grad = diff * (2.0 / (n * _NORM))
    else:
        n = mask.sum(axis=(-2, -1))
        md = np.where(mask, diff, 0)
        pix = np.sum((md * md).astype(np.float64), axis=(-2, -1)) / (n * _NORM)
        scale = (2.0 / (np.asarray(n, dtype=np.float64) * _NORM)).astype(image.dtype)
        grad = md * (scale[..., None, None] if np.ndim(scale) else scale)
    if pyramid_weight:
        pl, pg = pyramid_loss_and_grad(image, target, levels)
        return pix + pyramid_weight * pl, (grad + image.dtype.type(pyramid_weight) * pg).astype(image.dtype)
    return pix, grad.astype(image.dtype)


def projection_loss_and_grad(params, z, target, mask, config: ProjectionConfig):
    """Loss of latent ``z`` against ``target`` and its gradient with respect to ``z``."""
    target = np.asarray(target, dtype=params.dtype)
    use_mask = mask if config.masked else None

    def upstream(img):
        loss, g = reconstruction_loss_and_grad(img, target, use_mask, config.pyramid_levels,
                                               config.pyramid_weight)
        return float(loss), g

    img, loss, gz, _ = forward_backward(params, z, upstream, need_params=False)
    return loss, gz, img


# -------------------------------------------------------------------- projection


def project(params: GeneratorParams, target, mask=None, config: ProjectionConfig = ProjectionConfig(),
            seed=None) -> ProjectionResult:
    """Find the latent whose rendering best matches ``target``.

    Starts at the prior mean, perturbs the optimization variable with decaying
    noise before each evaluation, and takes Adam steps under :func:`lr_schedule`.
    The returned latent is the best evaluated point (noise included), so
    ``reconstruction == forward(params, latent)``.

    Raises:
        ShapeError: target or mask does not match the generator output.
        DivergenceError: the loss becomes non-finite.
    """
    seed = config.seed if seed is None else seed
    r = params.config.output_resolution
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (r, r):
        raise ShapeError(f"target shape {target.shape} does not match generator output {(r, r)}")
    if mask is None:
        mask = np.ones((r, r), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != target.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match target {target.shape}")
    if config.masked and not mask.any():
        raise ShapeError("mask has no pixels")

    dim = params.config.latent_dim
    rng = np.random.default_rng(seed)
    z = latent_mean(params, config.latent_mean_samples, rng.integers(2**63)).astype(params.dtype)
    target = target.astype(params.dtype)
    opt = Adam([z])
    trace = np.empty(config.num_steps)
    best = (math.inf, -1, None, None)
    for step in range(config.num_steps):
        sigma = noise_scale(step, config, dim)
        zn = z + (rng.standard_normal(dim) * sigma).astype(params.dtype) if sigma > 0 else z.copy()
        loss, gz, img = projection_loss_and_grad(params, zn, target, mask, config)
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        trace[step] = loss
        if loss < best[0]:
            best = (loss, step, zn, img)
        opt.step([gz], lr_schedule(step, config))
    best_loss, best_step, z_best, img_best = best
    return ProjectionResult(
        latent=z_best,
        reconstruction=img_best.astype(np.float64),
        loss_trace=trace,
        best_loss=best_loss,
        best_step=best_step,
        steps=config.num_steps,
        seed=int(seed),
    )
