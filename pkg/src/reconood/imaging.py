"""Image containers, CT windowing, body masks, PNG I/O and synthetic phantoms.

Images are plain numpy arrays of shape ``(height, width)``:

* HU images hold signed Hounsfield units (float).
* Image grids hold real intensities in ``[0, 255]`` (float64).
* Body masks are boolean arrays, ``True`` inside the body.
"""

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EmptyMaskError, FormatError, InvalidInputError, InvalidSpecError
from .fsutil import atomic_path

IN_DISTRIBUTION = "in-distribution"
OOD = "ood"

# Offset used when storing HU as unsigned 16-bit PNG (air at -1024 maps to 0).
HU_PNG_OFFSET = 1024


@dataclass(frozen=True)
class WindowSpec:
    level: float = 50.0
    width: float = 350.0

    def __post_init__(self):
        if not (math.isfinite(self.level) and math.isfinite(self.width)) or self.width <= 0:
            raise InvalidSpecError(f"window width must be positive and finite, got {self.width!r}")

    @property
    def lower(self):
        return self.level - self.width / 2.0

    @property
    def upper(self):
        return self.level + self.width / 2.0


LIVER_WINDOW = WindowSpec(50.0, 350.0)


def _check_image(image, name="image"):
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {image.shape}")
    return image


def window_ct(image, spec: WindowSpec = LIVER_WINDOW) -> np.ndarray:
    """Map HU onto ``[0, 255]`` through the window ``[level - width/2, level + width/2]``.

    Values outside the window clamp to the range endpoints.
    """
    hu = _check_image(image, "HU image").astype(np.float64)
    if not np.all(np.isfinite(hu)):
        raise InvalidInputError("HU image contains non-finite values")
    return np.clip((hu - spec.lower) / spec.width, 0.0, 1.0) * 255.0


def quantize(image) -> np.ndarray:
    """Round to the nearest integer with ties away from zero (the 8-bit PNG lattice)."""
    x = np.asarray(image, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def extract_body_mask(image, threshold: float = 10.0) -> np.ndarray:
    """Largest 4-connected component of ``image > threshold`` with interior holes filled.

    Raises:
        EmptyMaskError: no pixel exceeds ``threshold``.
    """
    image = _check_image(image)
    foreground = image > threshold
    if not foreground.any():
        raise EmptyMaskError(f"no pixel exceeds threshold {threshold}")
    four = ndimage.generate_binary_structure(2, 1)
    labels, n = ndimage.label(foreground, structure=four)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    # argmax picks the lowest label among equal-size components
    largest = labels == int(np.argmax(sizes))
    return ndimage.binary_fill_holes(largest, structure=four)


# --------------------------------------------------------------------------- PNG


def save_png(image, path):
    """Write an image on the 8-bit lattice as single-channel grayscale PNG."""
    x = _check_image(image)
    if x.dtype == bool:
        x = x.astype(np.uint8) * 255
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 255 or np.any(x != np.round(x)):
        raise InvalidInputError("image is not on the 8-bit lattice; quantize it first")
    with atomic_path(path) as tmp:
        Image.fromarray(x.astype(np.uint8), mode="L").save(tmp, format="PNG")


def load_png(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG as a float64 image grid.

    Raises:
        FormatError: the file is not an 8-bit single-channel PNG.
    """
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise FormatError(f"{path}: not a PNG file")
            if im.mode != "L":
                raise FormatError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
            return np.asarray(im, dtype=np.float64).copy()
    except FormatError:
        raise
    except OSError as exc:
        if not isinstance(exc, FileNotFoundError) and "cannot identify" in str(exc):
            raise FormatError(f"{path}: {exc}") from exc
        raise


def save_mask_png(mask, path):
    save_png(np.asarray(mask, dtype=bool), path)


def load_mask_png(path) -> np.ndarray:
    return load_png(path) > 127


def save_hu_png(hu, path):
    """Store HU as 16-bit grayscale PNG with a +1024 offset (HU rounded to integers)."""
    hu = _check_image(hu, "HU image")
    stored = np.clip(np.rint(np.asarray(hu, dtype=np.float64)) + HU_PNG_OFFSET, 0, 65535)
    with atomic_path(path) as tmp:
        Image.fromarray(stored.astype(np.uint16)).save(tmp, format="PNG")


def load_hu_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I"):
            raise FormatError(f"{path}: expected 16-bit HU PNG, got mode {im.mode}")
        return np.asarray(im, dtype=np.float64) - HU_PNG_OFFSET


# ----------------------------------------------------------------------- phantoms


class AnomalyKind(str, enum.Enum):
    NONE = "none"
    BRIGHT_LINE = "bright-line"
    PERIPHERAL_FLUID = "peripheral-fluid"
    TEXTURE_SHIFT = "texture-shift"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and appearance of one synthetic axial slice.

    Lengths are in pixels, with pixel ``(i, j)`` centred at ``(i + 0.5, j + 0.5)``.
    Organ ellipses are placed by the seeded RNG strictly inside the body.
    """

    resolution: int = 64
    body_center: tuple = (32.0, 32.0)
    body_axes: tuple = (21.0, 25.0)
    body_hu: float = 40.0
    organ_count: int = 3
    organ_hu_range: tuple = (70.0, 160.0)
    noise_hu: float = 4.0
    anomaly: AnomalyKind = AnomalyKind.NONE
    seed: int = 0
    background_hu: float = -1000.0

    def validate(self):
        r = self.resolution
        cy, cx = self.body_center
        ay, ax = self.body_axes
        if r < 8:
            raise InvalidSpecError("resolution must be at least 8")
        if ay <= 0 or ax <= 0:
            raise InvalidSpecError("body ellipse axes must be positive")
        if cy - ay < 0 or cy + ay > r or cx - ax < 0 or cx + ax > r:
            raise InvalidSpecError("body ellipse does not fit in the image")
        if self.organ_count < 0 or self.noise_hu < 0:
            raise InvalidSpecError("organ_count and noise_hu must be non-negative")
        lo, hi = self.organ_hu_range
        if lo > hi:
            raise InvalidSpecError("organ_hu_range must be ordered")
        AnomalyKind(self.anomaly)


def _pixel_centres(r):
    c = np.arange(r) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _ellipse(yy, xx, cy, cx, ay, ax, angle=0.0):
    ca, sa = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def rasterize_ellipse(resolution, center, axes, angle=0.0) -> np.ndarray:
    yy, xx = _pixel_centres(resolution)
    return _ellipse(yy, xx, center[0], center[1], axes[0], axes[1], angle)


def _inside_body(spec, y, x, shrink=1.0):
    cy, cx = spec.body_center
    ay, ax = spec.body_axes
    return ((y - cy) / (ay * shrink)) ** 2 + ((x - cx) / (ax * shrink)) ** 2 <= 1.0


def _place_organ(spec, rng):
    ay, ax = spec.body_axes
    theta = np.linspace(0, 2 * np.pi, 48, endpoint=False)
    for _ in range(200):
        oy = rng.uniform(0.15, 0.4) * ay
        ox = rng.uniform(0.15, 0.4) * ax
        angle = rng.uniform(0, np.pi)
        cy = spec.body_center[0] + rng.uniform(-0.6, 0.6) * ay
        cx = spec.body_center[1] + rng.uniform(-0.6, 0.6) * ax
        ca, sa = math.cos(angle), math.sin(angle)
        by = cy + ox * np.cos(theta) * sa + oy * np.sin(theta) * ca
        bx = cx + ox * np.cos(theta) * ca - oy * np.sin(theta) * sa
        if np.all(_inside_body(spec, by, bx, shrink=0.92)):
            return cy, cx, oy, ox, angle
    raise InvalidSpecError("could not place an organ inside the body ellipse")


def _bright_line(spec, rng, hu, body):
    """Insert a 2-px-thick straight segment at HU 1500 along a row, column or diagonal."""
    r = spec.resolution
    directions = [(0, 1), (1, 0), (1, 1), (1, -1)]
    for _ in range(500):
        dy, dx = directions[rng.integers(len(directions))]
        length = int(rng.integers(24, 35))
        y0 = int(rng.integers(0, r))
        x0 = int(rng.integers(0, r))
        y1, x1 = y0 + dy * (length - 1), x0 + dx * (length - 1)
        ends_y = np.array([y0, y1, y0 + (dx == 0), y1 + (dx == 0)]) + 0.5
        ends_x = np.array([x0, x1, x0 + (dx != 0), x1 + (dx != 0)]) + 0.5
        if np.all(_inside_body(spec, ends_y, ends_x, shrink=0.85)):
            for k in range(length):
                y, x = y0 + dy * k, x0 + dx * k
                hu[y, x] = 1500.0
                if dx == 0:
                    hu[y, x + 1] = 1500.0
                else:
                    hu[y + 1, x] = 1500.0
            return
    raise InvalidSpecError("body too small for a bright-line anomaly")


def _peripheral_fluid(spec, rng, hu, body, organs):
    yy, xx = _pixel_centres(spec.resolution)
    cy, cx = spec.body_center
    ay, ax = spec.body_axes
    rho = np.sqrt(((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2)
    phi = np.arctan2((yy - cy) / ay, (xx - cx) / ax)
    direction = rng.uniform(-np.pi, np.pi)
    gap = np.abs(np.angle(np.exp(1j * (phi - direction))))
    crescent = body & ~organs & (rho >= rng.uniform(0.68, 0.76)) & (gap <= np.deg2rad(75))
    hu[crescent] = rng.uniform(0.0, 10.0)


def _texture_shift(spec, rng, hu, body):
    yy, xx = _pixel_centres(spec.resolution)
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(4.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / period + phase)
    hu[body] += 35.0 * wave[body]


def gen_phantom(spec: PhantomSpec):
    """Render a phantom deterministically from its spec.

    Returns:
        ``(hu_image, body_mask, label)`` where ``body_mask`` is the rasterized body
        ellipse and ``label`` is ``"in-distribution"`` for anomaly kind ``none``,
        ``"ood"`` otherwise.
    """
    spec.validate()
    anomaly = AnomalyKind(spec.anomaly)
    rng = np.random.default_rng(spec.seed)
    r = spec.resolution
    yy, xx = _pixel_centres(r)
    body = _ellipse(yy, xx, *spec.body_center, *spec.body_axes)
    hu = np.full((r, r), float(spec.background_hu))
    hu[body] = spec.body_hu
    organs = np.zeros_like(body)
    for _ in range(spec.organ_count):
        cy, cx, oy, ox, angle = _place_organ(spec, rng)
        region = _ellipse(yy, xx, cy, cx, oy, ox, angle)
        hu[region] = rng.uniform(*spec.organ_hu_range)
        organs |= region

    if anomaly is AnomalyKind.BRIGHT_LINE:
        _bright_line(spec, rng, hu, body)
    elif anomaly is AnomalyKind.PERIPHERAL_FLUID:
        _peripheral_fluid(spec, rng, hu, body, organs)
    elif anomaly is AnomalyKind.TEXTURE_SHIFT:
        _texture_shift(spec, rng, hu, body)

    if spec.noise_hu > 0:
        hu = hu + rng.normal(0.0, spec.noise_hu, size=hu.shape)
    label = IN_DISTRIBUTION if anomaly is AnomalyKind.NONE else OOD
    return hu, body, label


def sample_phantom_spec(seed, resolution=64, anomaly=AnomalyKind.NONE, **overrides) -> PhantomSpec:
    """Draw a jittered body geometry for one corpus member; the result is a pure function of ``seed``."""
    rng = np.random.default_rng([int(seed), 0x9E37])
    s = resolution / 64.0
    spec = PhantomSpec(
        resolution=resolution,
        body_center=(resolution / 2 + rng.uniform(-2.5, 2.5) * s, resolution / 2 + rng.uniform(-2.5, 2.5) * s),
        body_axes=(rng.uniform(18.0, 23.0) * s, rng.uniform(22.0, 27.0) * s),
        body_hu=float(rng.uniform(30.0, 50.0)),
        organ_count=int(rng.integers(2, 5)),
        anomaly=AnomalyKind(anomaly),
        seed=int(seed),
    )
    return replace(spec, **overrides) if overrides else spec


def corpus_seed(base_seed, index) -> int:
    """Per-image seed derived from a corpus seed; distinct corpora should use distinct base seeds."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])
