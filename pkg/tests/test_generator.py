import json
import math
import struct

import numpy as np
import pytest

from gradcheck import check_gradients, randomized_params, unflatten
from oracles import fd_gradient_smooth, max_relative_error
from reconood.errors import ConfigError, FormatError, ShapeError
from reconood.generator import (GeneratorConfig, GeneratorParams, backward, forward, init_params, load_weights,
                                read_weights, rectifier_pattern, save_weights)


# ------------------------------------------------------------------ config/init


def test_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(base_resolution=4, output_resolution=48, channels=(4, 4, 4, 4))
    with pytest.raises(ConfigError):
        GeneratorConfig(base_resolution=4, output_resolution=4, channels=(4,))
    with pytest.raises(ConfigError):
        GeneratorConfig(base_resolution=4, output_resolution=16, channels=(4, 4))
    with pytest.raises(ConfigError):
        GeneratorConfig(base_resolution=4, output_resolution=16, channels=(4, 0, 4))


def test_init_deterministic_and_zero_biases():
    cfg = GeneratorConfig()
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    for (na, xa), (_, xb) in zip(a.tensors(), b.tensors()):
        assert xa.tobytes() == xb.tobytes(), na
    for i, bias in enumerate(a.biases):
        assert not bias.any(), i
    assert not a.dense_b.any() and not a.out_b.any()
    assert init_params(cfg, 4).dense_w.tobytes() != a.dense_w.tobytes()


def test_init_kernel_statistics():
    cfg = GeneratorConfig(latent_dim=8, base_resolution=4, output_resolution=16, channels=(8, 96, 128))
    params = init_params(cfg, 0, dtype=np.float64)
    kernel = params.kernels[1]
    n = kernel.size
    assert n >= 10 ** 5
    sigma = math.sqrt(2.0 / (96 * 9))
    assert abs(kernel.mean()) < 3 * sigma / math.sqrt(n)
    assert kernel.std() == pytest.approx(sigma, rel=0.02)


# ---------------------------------------------------------------------- forward


def test_forward_range_shape_and_determinism():
    cfg = GeneratorConfig()
    params = init_params(cfg, 0)
    z = np.random.default_rng(0).standard_normal((3, cfg.latent_dim)) * 10
    out = forward(params, z)
    assert out.shape == (3, 64, 64)
    assert out.min() >= 0 and out.max() <= 255
    assert forward(params, z).tobytes() == out.tobytes()
    # float32 BLAS may block a batch differently from a single row
    np.testing.assert_allclose(forward(params, z[1]), out[1], rtol=0, atol=1e-2)


def test_forward_shape_error():
    params = init_params(GeneratorConfig(), 0)
    with pytest.raises(ShapeError):
        forward(params, np.zeros(63))


def test_hand_constructed_one_stage_generator():
    # dense = identity onto a 2x2 single-channel tensor, 3x3 kernel = centre tap only
    cfg = GeneratorConfig(latent_dim=4, base_resolution=2, output_resolution=4, channels=(1, 1), slope=0.2)
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    params = GeneratorParams(cfg, np.eye(4), np.zeros(4), [kernel], [np.zeros(1)], np.ones(1), np.zeros(1))
    z = np.array([0.5, -1.0, 2.0, -0.25])
    expected = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            v = z[2 * (i // 2) + (j // 2)]
            v = v if v > 0 else 0.2 * v
            expected[i, j] = 127.5 * (1 + math.tanh(v))
    np.testing.assert_allclose(forward(params, z), expected, rtol=0, atol=1e-12)


def test_forward_small_perturbation_bounded():
    cfg = GeneratorConfig()
    params = init_params(cfg, 1)
    rng = np.random.default_rng(2)
    z = rng.standard_normal(cfg.latent_dim)
    delta = rng.standard_normal(cfg.latent_dim)
    delta *= 1e-6 / np.linalg.norm(delta)
    diff = np.abs(forward(params.astype(np.float64), z + delta) - forward(params.astype(np.float64), z))
    assert diff.max() <= 1.0


# --------------------------------------------------------------------- backward


def test_zero_upstream_gives_zero_gradients():
    params = init_params(GeneratorConfig(latent_dim=6, base_resolution=2, output_resolution=8,
                                         channels=(3, 2, 2)), 0)
    gz, gp = backward(params, np.ones(6), np.zeros((8, 8)))
    assert not gz.any()
    assert all(not a.any() for _, a in gp.tensors())


def test_backward_shape_error():
    params = init_params(GeneratorConfig(latent_dim=6, base_resolution=2, output_resolution=8,
                                         channels=(3, 2, 2)), 0)
    with pytest.raises(ShapeError):
        backward(params, np.ones(6), np.zeros((4, 4)))


@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_finite_differences(seed):
    ez, ep, excluded = check_gradients(seed)
    assert ez <= 1e-5 and ep <= 1e-5
    assert excluded < 0.02


def test_batched_gradients_sum_per_image():
    cfg = GeneratorConfig(latent_dim=5, base_resolution=2, output_resolution=8, channels=(3, 2, 2))
    params = init_params(cfg, 0, dtype=np.float64)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((3, 5))
    up = rng.standard_normal((3, 8, 8))
    gz, gp = backward(params, z, up)
    singles = [backward(params, z[i], up[i]) for i in range(3)]
    np.testing.assert_allclose(gz, np.stack([s[0] for s in singles]), atol=1e-12)
    np.testing.assert_allclose(gp.flat(), sum(s[1].flat() for s in singles), atol=1e-10)


# ------------------------------------------------------------------ weight file


def test_weights_round_trip(tmp_path):
    params = init_params(GeneratorConfig(), 5)
    path = tmp_path / "w.rgen"
    save_weights(params, path, seed=5, metadata={"note": "x"})
    loaded, header = read_weights(path)
    assert loaded.config == params.config
    assert header["seed"] == 5 and header["metadata"] == {"note": "x"}
    for (n, a), (_, b) in zip(params.tensors(), loaded.tensors()):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes(), n


def test_weights_wrong_magic(tmp_path):
    path = tmp_path / "w.rgen"
    save_weights(init_params(GeneratorConfig(), 0), path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_weights(path)


def _rewrite(path, mutate_header=None, payload_slice=None):
    data = path.read_bytes()
    version, hlen = struct.unpack_from("<HI", data, 4)
    header = json.loads(data[10:10 + hlen])
    payload = data[10 + hlen:]
    if mutate_header:
        mutate_header(header)
    if payload_slice is not None:
        payload = payload[payload_slice]
    h = json.dumps(header).encode()
    path.write_bytes(b"RGEN" + struct.pack("<HI", version, len(h)) + h + payload)


def test_weights_header_payload_mismatch(tmp_path):
    cfg3 = GeneratorConfig(latent_dim=4, base_resolution=2, output_resolution=16, channels=(2, 2, 2, 2))
    cfg2 = GeneratorConfig(latent_dim=4, base_resolution=2, output_resolution=8, channels=(2, 2, 2))
    path = tmp_path / "w.rgen"
    save_weights(init_params(cfg2, 0), path)
    three = tmp_path / "w3.rgen"
    save_weights(init_params(cfg3, 0), three)
    data3 = three.read_bytes()
    _, hlen3 = struct.unpack_from("<HI", data3, 4)
    header3 = json.loads(data3[10:10 + hlen3])

    # header declares 3 stages, payload holds the 2-stage tensors
    p2 = path.read_bytes()
    _, hlen2 = struct.unpack_from("<HI", p2, 4)
    h = json.dumps(header3).encode()
    bad = tmp_path / "bad.rgen"
    bad.write_bytes(b"RGEN" + struct.pack("<HI", 1, len(h)) + h + p2[10 + hlen2:])
    with pytest.raises(FormatError):
        load_weights(bad)


def test_weights_truncated_and_inconsistent(tmp_path):
    path = tmp_path / "w.rgen"
    save_weights(init_params(GeneratorConfig(), 0), path)
    _rewrite(path, payload_slice=slice(0, -4))
    with pytest.raises(FormatError):
        load_weights(path)

    save_weights(init_params(GeneratorConfig(), 0), path)

    def bump(h):
        h["num_stages"] = 3
    _rewrite(path, mutate_header=bump)
    with pytest.raises(FormatError):
        load_weights(path)

    save_weights(init_params(GeneratorConfig(), 0), path)

    def reshape(h):
        h["tensors"][2]["shape"] = [1, 2, 3, 3]
    _rewrite(path, mutate_header=reshape)
    with pytest.raises(FormatError):
        load_weights(path)

    path.write_bytes(b"RGEN\x01\x00")
    with pytest.raises(FormatError):
        load_weights(path)


def test_weights_version_mismatch(tmp_path):
    path = tmp_path / "w.rgen"
    save_weights(init_params(GeneratorConfig(), 0), path)
    data = bytearray(path.read_bytes())
    data[4:6] = struct.pack("<H", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_weights(path)


def test_param_gradients_on_4x4_output():
    cfg = GeneratorConfig(latent_dim=3, base_resolution=1, output_resolution=4, channels=(3, 3, 2))
    rng = np.random.default_rng(44)
    params = randomized_params(cfg, rng, 44)
    z = rng.standard_normal(3)
    up = rng.standard_normal((4, 4))
    _, gp = backward(params, z, up)
    num, valid = fd_gradient_smooth(lambda v: np.sum(up * forward(unflatten(cfg, params, v), z)),
                                    lambda v: rectifier_pattern(unflatten(cfg, params, v), z), params.flat())
    assert valid.mean() > 0.95
    assert max_relative_error(gp.flat()[valid], num[valid]) <= 1e-5
