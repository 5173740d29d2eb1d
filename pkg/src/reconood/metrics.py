"""Reconstruction scores: masked 1-D Wasserstein distance, masked MSE and SSIM.

WD and MSE only look at pixels inside the body mask; SSIM uses the whole image.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyMaskError, FormatError, InvalidInputError, ShapeError
from .fsutil import read_csv, write_csv

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 255.0
C1 = (SSIM_K1 * DATA_RANGE) ** 2
C2 = (SSIM_K2 * DATA_RANGE) ** 2

SCORE_COLUMNS = ("image_id", "dataset", "wd", "mse", "ssim", "mask_pixels")


def _samples(x, name):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidInputError(f"{name} is empty")
    return x


def wasserstein_cdf(a, b) -> float:
    """W1 as the integral of |F_a - F_b| over the merged support."""
    a = np.sort(_samples(a, "a"))
    b = np.sort(_samples(b, "b"))
    support = np.concatenate([a, b])
    support.sort(kind="mergesort")
    widths = np.diff(support)
    fa = np.searchsorted(a, support[:-1], side="right") / a.size
    fb = np.searchsorted(b, support[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * widths))


def wasserstein_sorted(a, b) -> float:
    """W1 for equal-size samples: mean absolute difference of the order statistics."""
    a = _samples(a, "a")
    b = _samples(b, "b")
    if a.size != b.size:
        raise InvalidInputError("sorted-difference path needs equal sample sizes")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def wasserstein_1d(a, b) -> float:
    """Exact 1-Wasserstein distance between two empirical distributions."""
    a = _samples(a, "a")
    b = _samples(b, "b")
    if a.size == b.size:
        return wasserstein_sorted(a, b)
    return wasserstein_cdf(a, b)


def _masked_pair(original, reconstruction, mask):
    original = np.asarray(original, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if original.shape != reconstruction.shape or original.shape != mask.shape:
        raise ShapeError(f"shapes differ: {original.shape}, {reconstruction.shape}, mask {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("mask selects no pixels")
    return original[mask], reconstruction[mask]


def masked_wd(original, reconstruction, mask) -> float:
    a, b = _masked_pair(original, reconstruction, mask)
    return wasserstein_1d(a, b)


def masked_mse(original, reconstruction, mask) -> float:
    a, b = _masked_pair(original, reconstruction, mask)
    return float(np.mean((a - b) ** 2))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    k = g.size
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def ssim_map(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"SSIM needs two 2-D images of equal shape, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidInputError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM over all valid 11x11 Gaussian-weighted windows (sigma 1.5, L = 255)."""
    # clip only absorbs round-off at the bounds
    return float(np.clip(np.mean(ssim_map(a, b)), -1.0, 1.0))


@dataclass(frozen=True)
class ScoreRecord:
    image_id: str
    dataset: str
    wd: float
    mse: float
    ssim: float
    mask_pixels: int

    def row(self):
        return [self.image_id, self.dataset, repr(float(self.wd)), repr(float(self.mse)),
                repr(float(self.ssim)), str(int(self.mask_pixels))]


def score_reconstruction(original, reconstruction, mask, image_id="", dataset="") -> ScoreRecord:
    mask = np.asarray(mask, dtype=bool)
    return ScoreRecord(
        image_id=image_id,
        dataset=dataset,
        wd=masked_wd(original, reconstruction, mask),
        mse=masked_mse(original, reconstruction, mask),
        ssim=ssim(original, reconstruction),
        mask_pixels=int(mask.sum()),
    )


def write_scores(path, records):
    write_csv(path, SCORE_COLUMNS, [r.row() for r in records])


def read_scores(path):
    rows = read_csv(path)
    if rows and tuple(rows[0].keys()) != SCORE_COLUMNS:
        raise FormatError(f"{path}: expected columns {','.join(SCORE_COLUMNS)}")
    try:
        return [ScoreRecord(r["image_id"], r["dataset"], float(r["wd"]), float(r["mse"]), float(r["ssim"]),
                            int(r["mask_pixels"])) for r in rows]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed score row ({exc})") from exc
