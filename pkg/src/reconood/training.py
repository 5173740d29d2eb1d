"""Generative latent optimization: fit decoder weights and one latent per image.

There is no discriminator. Each training image owns a latent on the sphere of
radius sqrt(latent_dim); weights and latents descend the same reconstruction
loss used by projection (pixel MSE plus pooling pyramid). A held-out split gets
latent-only updates and drives checkpoint selection.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInputError
from .generator import GeneratorConfig, GeneratorParams, forward, forward_backward, init_params
from .optim import Adam, RowAdam
from .projection import reconstruction_loss_and_grad, sample_prior

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr_params: float = 2e-3
    lr_latents: float = 0.2
    batch_size: int = 32
    val_fraction: float = 0.1
    pyramid_levels: int = 3
    pyramid_weight: float = 1.0
    mirror: bool = False
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    params: GeneratorParams
    latents: np.ndarray  # (n_train, latent_dim)
    params_opt: Adam
    latents_opt: RowAdam
    val_latents: np.ndarray
    val_opt: RowAdam
    best_params: GeneratorParams
    train_index: np.ndarray
    val_index: np.ndarray
    epoch: int = 0
    seed: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    history: list = field(default_factory=list)


def _renormalize(z):
    z *= (math.sqrt(z.shape[1]) / np.linalg.norm(z.astype(np.float64), axis=1, keepdims=True)).astype(z.dtype)


def _mean_loss(params, latents, images, cfg, chunk=64):
    total = 0.0
    for s in range(0, len(images), chunk):
        img = forward(params, latents[s:s + chunk])
        loss, _ = reconstruction_loss_and_grad(img, images[s:s + chunk], None, cfg.pyramid_levels,
                                               cfg.pyramid_weight)
        total += float(np.sum(loss))
    return total / len(images)


def _stack_corpus(corpus, gen_config):
    if len(corpus) == 0:
        raise InvalidInputError("training corpus is empty")
    shapes = {np.shape(im) for im in corpus}
    r = gen_config.output_resolution
    if len(shapes) != 1:
        raise InvalidInputError(f"corpus mixes resolutions: {sorted(shapes)}")
    if shapes.pop() != (r, r):
        raise InvalidInputError(f"corpus resolution does not match generator output {r}x{r}")
    return np.stack([np.asarray(im, dtype=np.float32) for im in corpus])


def init_train_state(corpus, gen_config: GeneratorConfig, cfg: TrainConfig) -> TrainState:
    images = _stack_corpus(corpus, gen_config)
    n = len(images)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    val_index, train_index = np.sort(order[:n_val]), np.sort(order[n_val:])
    if cfg.mirror:
        # mirrored copies get their own latents
        train_index = np.concatenate([train_index, -1 - train_index])
    params = init_params(gen_config, seed=int(rng.integers(2**63)))
    d = gen_config.latent_dim
    latents = sample_prior(len(train_index), d, rng).astype(np.float32)
    val_latents = sample_prior(len(val_index), d, rng).astype(np.float32)
    state = TrainState(
        params=params,
        latents=latents,
        params_opt=Adam([a for _, a in params.tensors()]),
        latents_opt=RowAdam(latents),
        val_latents=val_latents,
        val_opt=RowAdam(val_latents),
        best_params=params.copy(),
        train_index=train_index,
        val_index=val_index,
        seed=cfg.seed,
    )
    return state


def _gather(images, index):
    out = images[np.where(index < 0, -1 - index, index)]
    flip = index < 0
    if flip.any():
        out[flip] = out[flip][:, :, ::-1]
    return out


def train_glo(corpus, gen_config: GeneratorConfig = GeneratorConfig(), cfg: TrainConfig = TrainConfig(),
              callback=None) -> TrainState:
    """Train the decoder on ``corpus`` (a sequence of equal-size images in ``[0, 255]``).

    Deterministic for a fixed corpus, configs and seed. ``state.best_params`` holds
    the weights with the lowest held-out loss (the training loss when there is no
    held-out split); ``state.history`` has one dict per epoch, epoch 0 being the
    initialization.
    """
    images = _stack_corpus(corpus, gen_config)
    state = init_train_state(images, gen_config, cfg)
    train_images = _gather(images, state.train_index)
    val_images = images[state.val_index]
    rng = np.random.default_rng([cfg.seed, 1])
    levels, pw = cfg.pyramid_levels, cfg.pyramid_weight

    def evaluate(epoch):
        train_loss = _mean_loss(state.params, state.latents, train_images, cfg)
        val_loss = _mean_loss(state.params, state.val_latents, val_images, cfg) if len(val_images) else None
        best_train = min([train_loss] + [h["best_train_loss"] for h in state.history])
        state.history.append({"epoch": epoch, "train_loss": train_loss, "best_train_loss": best_train,
                              "val_loss": val_loss})
        score = val_loss if val_loss is not None else train_loss
        if score < state.best_val_loss:
            state.best_val_loss = score
            state.best_epoch = epoch
            state.best_params = state.params.copy()
        log.info("epoch %d train %.6f val %s", epoch, train_loss, val_loss)

    evaluate(0)
    n = len(train_images)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            rows = np.sort(order[s:s + cfg.batch_size])
            target = train_images[rows]

            def upstream(img):
                loss, g = reconstruction_loss_and_grad(img, target, None, levels, pw)
                return loss, g

            _, _, gz, gp = forward_backward(state.params, state.latents[rows], upstream)
            # weights follow the batch-mean loss; each latent follows its own image's loss
            b = np.float32(len(rows))
            state.params_opt.step([a / b for _, a in gp.tensors()], cfg.lr_params)
            state.latents_opt.step(rows, gz, cfg.lr_latents)
            _renormalize(state.latents)
        if len(val_images):
            for s in range(0, len(val_images), cfg.batch_size):
                rows = np.arange(s, min(s + cfg.batch_size, len(val_images)))
                target = val_images[rows]
                _, _, gz, _ = forward_backward(
                    state.params, state.val_latents[rows],
                    lambda img: (None, reconstruction_loss_and_grad(img, target, None, levels, pw)[1]),
                    need_params=False)
                state.val_opt.step(rows, gz, cfg.lr_latents)
            _renormalize(state.val_latents)
        state.epoch = epoch
        evaluate(epoch)
        if callback is not None:
            callback(state)
    return state
