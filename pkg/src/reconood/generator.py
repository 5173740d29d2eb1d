"""Small convolutional decoder with analytic gradients.

Architecture::

    z -> dense -> (S0, S0, C0) -> k x [nearest 2x upsample -> 3x3 conv -> leaky ReLU]
      -> 1x1 conv -> 127.5 * (1 + tanh)

Activations are kept channels-last, ``(batch, height, width, channels)``.
Convolution kernels are stored as ``(out, in, 3, 3)``.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import WEIGHT_FORMAT_VERSION
from .errors import ConfigError, FormatError, ShapeError
from .fsutil import write_bytes

MAGIC = b"RGEN"


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 64
    base_resolution: int = 4
    output_resolution: int = 64
    # channels[0] is the dense projection's depth; channels[i] is stage i's output depth
    channels: tuple = (64, 32, 32, 16, 8)
    slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    @property
    def num_stages(self):
        return int(round(math.log2(self.output_resolution / self.base_resolution)))

    def validate(self):
        if self.latent_dim < 1 or self.base_resolution < 1:
            raise ConfigError("latent_dim and base_resolution must be positive")
        k = self.num_stages
        if k < 1 or self.base_resolution * 2**k != self.output_resolution:
            raise ConfigError("output_resolution must equal base_resolution * 2**k with k >= 1")
        if len(self.channels) != k + 1:
            raise ConfigError(f"need {k + 1} channel counts for {k} stages, got {len(self.channels)}")
        if min(self.channels) < 1:
            raise ConfigError("channel counts must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "channels": tuple(d["channels"])})


@dataclass
class GeneratorParams:
    config: GeneratorConfig
    dense_w: np.ndarray  # (latent_dim, S0*S0*C0), columns ordered (row, col, channel)
    dense_b: np.ndarray
    kernels: list  # per stage, (C_out, C_in, 3, 3)
    biases: list  # per stage, (C_out,)
    out_w: np.ndarray  # (C_last,)
    out_b: np.ndarray  # (1,)

    def tensors(self):
        """``(name, array)`` pairs in declaration order."""
        out = [("dense_w", self.dense_w), ("dense_b", self.dense_b)]
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out += [(f"stage{i}_kernel", k), (f"stage{i}_bias", b)]
        out += [("out_w", self.out_w), ("out_b", self.out_b)]
        return out

    @classmethod
    def from_tensors(cls, config, arrays):
        arrays = list(arrays)
        k = config.num_stages
        return cls(config, arrays[0], arrays[1], arrays[2:2 + 2 * k:2], arrays[3:3 + 2 * k:2],
                   arrays[-2], arrays[-1])

    @property
    def dtype(self):
        return self.dense_w.dtype

    def astype(self, dtype):
        return GeneratorParams.from_tensors(self.config, [a.astype(dtype) for _, a in self.tensors()])

    def copy(self):
        return self.astype(self.dtype)

    def flat(self):
        return np.concatenate([a.ravel() for _, a in self.tensors()])


def expected_shapes(config: GeneratorConfig):
    s0, ch = config.base_resolution, config.channels
    shapes = [("dense_w", (config.latent_dim, s0 * s0 * ch[0])), ("dense_b", (s0 * s0 * ch[0],))]
    for i in range(config.num_stages):
        shapes += [(f"stage{i}_kernel", (ch[i + 1], ch[i], 3, 3)), (f"stage{i}_bias", (ch[i + 1],))]
    shapes += [("out_w", (ch[-1],)), ("out_b", (1,))]
    return shapes


def init_params(config: GeneratorConfig, seed=0, dtype=np.float32) -> GeneratorParams:
    """He-normal weights (variance 2 / fan_in) and zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in expected_shapes(config):
        if name.endswith("_b") or name.endswith("_bias"):
            arrays.append(np.zeros(shape, dtype=dtype))
            continue
        if name == "dense_w":
            fan_in = shape[0]
        elif name == "out_w":
            fan_in = shape[0]
        else:
            fan_in = shape[1] * 9
        arrays.append((rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype))
    return GeneratorParams.from_tensors(config, arrays)


# ------------------------------------------------------------------ forward/backward


def _phase_taps():
    """Linear map from 3x3 kernel taps to the four phase kernels of a nearest-2x upsample.

    ``taps[i, j, d, e, a, b] = 1`` when output phase ``(a, b)`` applies kernel tap ``(i, j)``
    to the low-res neighbour at offset ``(d - 1, e - 1)``.
    """
    rows = np.zeros((2, 3, 3))  # (phase, offset, kernel row)
    rows[0, 0, 0] = rows[0, 1, 1] = rows[0, 1, 2] = 1
    rows[1, 1, 0] = rows[1, 1, 1] = rows[1, 2, 2] = 1
    taps = np.einsum("adi,bej->ijdeab", rows, rows)
    return taps.reshape(9, 36)


_TAPS = _phase_taps()


def _im2col(x):
    """(B, H, W, C) -> (B*H*W, 9*C) patches of a zero-padded 3x3 neighbourhood, ordered (dy, dx, c)."""
    b, h, w, c = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = p[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, 9 * c)


def _col2im(dcols, shape):
    b, h, w, c = shape
    dcols = dcols.reshape(b, h, w, 9, c)
    dp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dp[:, i:i + h, j:j + w, :] += dcols[:, :, :, 3 * i + j, :]
    return dp[:, 1:-1, 1:-1, :]


def _upsampled_kernel(kernel):
    """Fold a nearest 2x upsample into a 3x3 kernel.

    Returns a ``(9*C_in, 4*C_out)`` matrix acting on low-res im2col patches whose
    output columns are ordered ``(phase_row, phase_col, c_out)``.
    """
    cout, cin = kernel.shape[:2]
    eff = kernel.reshape(cout * cin, 9) @ _TAPS.astype(kernel.dtype)
    return eff.reshape(cout, cin, 9, 4).transpose(2, 1, 3, 0).reshape(9 * cin, 4 * cout)


def _upsampled_kernel_adjoint(d_eff, kernel_shape):
    cout, cin = kernel_shape[:2]
    d = d_eff.reshape(9, cin, 4, cout).transpose(3, 1, 0, 2).reshape(cout * cin, 36)
    return (d @ _TAPS.T.astype(d_eff.dtype)).reshape(cout, cin, 3, 3)


def _shuffle(y, b, h, w, c):
    # (B*h*w, 4*c) phase-major -> (B, 2h, 2w, c)
    return y.reshape(b, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, c)


def _unshuffle(g):
    b, h2, w2, c = g.shape
    h, w = h2 // 2, w2 // 2
    return g.reshape(b, h, 2, w, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b * h * w, 4 * c)


def _as_batch(params, z):
    z = np.asarray(z, dtype=params.dtype)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2 or z2.shape[1] != params.config.latent_dim:
        raise ShapeError(f"latent must have length {params.config.latent_dim}, got shape {z.shape}")
    return z2, single


def _forward(params, z, keep_cols):
    cfg = params.config
    s0 = cfg.base_resolution
    b = z.shape[0]
    x = (z @ params.dense_w + params.dense_b).reshape(b, s0, s0, cfg.channels[0])
    cache = []
    for kernel, bias in zip(params.kernels, params.biases):
        _, h, w, _ = x.shape
        cout = kernel.shape[0]
        cols = _im2col(x)
        y = _shuffle(cols @ _upsampled_kernel(kernel), b, h, w, cout) + bias
        positive = y > 0
        x = np.where(positive, y, y * params.dtype.type(cfg.slope))
        cache.append((cols if keep_cols else None, positive, (b, h, w, kernel.shape[1])))
    pre = x @ params.out_w + params.out_b[0]
    t = np.tanh(pre)
    img = params.dtype.type(127.5) * (1 + t)
    return img, (x, t, cache)


def forward(params: GeneratorParams, z) -> np.ndarray:
    """Render ``z`` (shape ``(D,)`` or ``(B, D)``) to images in ``[0, 255]``."""
    z2, single = _as_batch(params, z)
    img, _ = _forward(params, z2, keep_cols=False)
    return img[0] if single else img


def rectifier_pattern(params: GeneratorParams, z) -> np.ndarray:
    """Flattened signs of every leaky-ReLU input; the map is smooth wherever this is locally constant."""
    z2, _ = _as_batch(params, z)
    _, (_, _, cache) = _forward(params, z2, keep_cols=False)
    return np.concatenate([positive.ravel() for _, positive, _ in cache])


def forward_backward(params, z, upstream_fn, need_params=True):
    """One forward pass followed by backpropagation of ``upstream_fn(images)``.

    ``upstream_fn`` maps the rendered batch to ``(aux, dL/dimage)``; ``aux`` is returned
    unchanged, which lets callers compute the loss from the same forward pass.

    Returns:
        ``(images, aux, grad_z, grad_params)`` with ``grad_params`` ``None`` when not requested.
    """
    z2, single = _as_batch(params, z)
    img, (x_last, t, cache) = _forward(params, z2, keep_cols=need_params)
    aux, upstream = upstream_fn(img[0] if single else img)
    upstream = np.asarray(upstream, dtype=params.dtype)
    if single:
        upstream = upstream[None]
    if upstream.shape != img.shape:
        raise ShapeError(f"upstream gradient shape {upstream.shape[1:] if single else upstream.shape} "
                         f"does not match output {img.shape[1:] if single else img.shape}")
    cfg = params.config
    dt = params.dtype.type
    dpre = upstream * (dt(127.5) * (1 - t * t))
    grads = {}
    if need_params:
        grads["out_w"] = np.tensordot(dpre, x_last, axes=([0, 1, 2], [0, 1, 2]))
        grads["out_b"] = np.array([dpre.sum()], dtype=params.dtype)
    dx = dpre[..., None] * params.out_w
    kernel_grads, bias_grads = [], []
    for kernel, (cols, positive, in_shape) in zip(reversed(params.kernels), reversed(cache)):
        dy = np.where(positive, dx, dx * dt(cfg.slope))
        if need_params:
            bias_grads.append(dy.sum(axis=(0, 1, 2)))
        dy = _unshuffle(dy)
        if need_params:
            kernel_grads.append(_upsampled_kernel_adjoint(cols.T @ dy, kernel.shape))
        dx = _col2im(dy @ _upsampled_kernel(kernel).T, in_shape)
    dh = dx.reshape(dx.shape[0], -1)
    grad_z = dh @ params.dense_w.T
    grad_params = None
    if need_params:
        grads["dense_w"] = z2.T @ dh
        grads["dense_b"] = dh.sum(axis=0)
        grad_params = GeneratorParams(cfg, grads["dense_w"], grads["dense_b"], kernel_grads[::-1],
                                      bias_grads[::-1], grads["out_w"], grads["out_b"])
    return (img[0] if single else img), aux, (grad_z[0] if single else grad_z), grad_params


def backward(params: GeneratorParams, z, upstream, need_params=True):
    """Gradients of ``sum(upstream * forward(params, z))`` with respect to ``z`` and the parameters."""
    _, _, gz, gp = forward_backward(params, z, lambda img: (None, upstream), need_params=need_params)
    return gz, gp


# ------------------------------------------------------------------- weight file


def save_weights(params: GeneratorParams, path, seed=None, metadata=None):
    """Write the ``RGEN`` weight file.

    Layout: magic ``RGEN``, u16 format version, u32 header length, UTF-8 JSON
    header, then each tensor as little-endian float32 in declaration order.
    """
    tensors = params.tensors()
    for name, a in tensors:
        if not np.all(np.isfinite(a)):
            raise ValueError(f"tensor {name} has non-finite entries")
    header = {
        "config": params.config.to_dict(),
        "num_stages": params.config.num_stages,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "seed": seed,
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    write_bytes(path, MAGIC + struct.pack("<HI", WEIGHT_FORMAT_VERSION, len(hbytes)) + hbytes + payload)


def read_weights(path):
    """Parse a weight file; returns ``(params, header)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != WEIGHT_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if 10 + hlen > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
        config = GeneratorConfig.from_dict(header["config"])
        declared = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
        num_stages = int(header["num_stages"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if num_stages != config.num_stages or declared != expected_shapes(config):
        raise FormatError(f"{path}: tensor shapes inconsistent with the declared config")
    offset = 10 + hlen
    expected_bytes = sum(4 * int(np.prod(s)) for _, s in declared)
    if len(data) - offset != expected_bytes:
        raise FormatError(f"{path}: payload has {len(data) - offset} bytes, header declares {expected_bytes}")
    arrays = []
    for _, shape in declared:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape))
        offset += 4 * n
    return GeneratorParams.from_tensors(config, arrays), header


def load_weights(path) -> GeneratorParams:
    return read_weights(path)[0]
