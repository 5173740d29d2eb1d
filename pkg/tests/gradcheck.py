"""Finite-difference gradient checks on random small decoder configurations."""

import numpy as np

from oracles import fd_gradient_smooth, max_relative_error
from reconood.generator import GeneratorConfig, GeneratorParams, backward, forward, init_params, rectifier_pattern


def random_small_config(rng, max_res=16):
    base = int(rng.choice([1, 2, 4]))
    k = int(rng.integers(1, 4))
    while base * 2 ** k > max_res:
        k -= 1
    return GeneratorConfig(latent_dim=int(rng.integers(2, 9)), base_resolution=base,
                           output_resolution=base * 2 ** k, channels=tuple(int(c) for c in rng.integers(1, 5, k + 1)))


def randomized_params(cfg, rng, seed):
    params = init_params(cfg, seed).astype(np.float64)
    for _, a in params.tensors():
        if a.ndim == 1:
            a[:] = rng.normal(0, 0.1, a.shape)  # non-zero biases so their gradients are exercised
    return params


def unflatten(cfg, like, v):
    arrays, o = [], 0
    for _, a in like.tensors():
        arrays.append(v[o:o + a.size].reshape(a.shape))
        o += a.size
    return GeneratorParams.from_tensors(cfg, arrays)


def check_gradients(seed):
    """Return (grad_z error, grad_params error, excluded fraction) for one random config."""
    rng = np.random.default_rng(1000 + seed)
    cfg = random_small_config(rng)
    params = randomized_params(cfg, rng, seed)
    z = rng.standard_normal(cfg.latent_dim)
    up = rng.standard_normal((cfg.output_resolution,) * 2)
    gz, gp = backward(params, z, up)

    nz, vz = fd_gradient_smooth(lambda v: np.sum(up * forward(params, v)),
                                lambda v: rectifier_pattern(params, v), z)
    flat = params.flat()
    npar, vp = fd_gradient_smooth(lambda v: np.sum(up * forward(unflatten(cfg, params, v), z)),
                                  lambda v: rectifier_pattern(unflatten(cfg, params, v), z), flat)
    ez = max_relative_error(gz[vz], nz[vz])
    ep = max_relative_error(gp.flat()[vp], npar[vp])
    excluded = 1 - (vz.sum() + vp.sum()) / (vz.size + vp.size)
    return ez, ep, excluded
