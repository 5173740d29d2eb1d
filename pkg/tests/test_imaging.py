import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from oracles import background_reachable_from_border, flood_fill_labels, longest_bright_run, rasterize_disk
from reconood.errors import EmptyMaskError, FormatError, InvalidInputError, InvalidSpecError
from reconood.imaging import (IN_DISTRIBUTION, OOD, AnomalyKind, PhantomSpec, WindowSpec, extract_body_mask,
                              gen_phantom, load_hu_png, load_png, quantize, rasterize_ellipse,
                              sample_phantom_spec, save_hu_png, save_png, window_ct)

LIVER = WindowSpec(50, 350)


@pytest.mark.parametrize("hu, expected", [(-125, 0.0), (225, 255.0), (50, 127.5), (1000, 255.0), (-1000, 0.0)])
def test_window_examples(hu, expected):
    assert window_ct(np.array([[hu]]), LIVER)[0, 0] == expected


def test_window_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        window_ct(np.array([[0.0, np.nan]]), LIVER)
    with pytest.raises(InvalidSpecError):
        WindowSpec(50, 0)
    with pytest.raises(InvalidSpecError):
        WindowSpec(50, -10)


hu_values = st.floats(-3000, 3000, allow_nan=False)


@given(hu_values, hu_values)
def test_window_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    out = window_ct(np.array([[lo, hi]]), LIVER)
    assert 0 <= out[0, 0] <= out[0, 1] <= 255


@given(st.floats(-125, 225))
def test_window_symmetric_about_level(hu):
    out = window_ct(np.array([[hu, 2 * 50 - hu]]), LIVER)
    assert out.sum() == pytest.approx(255.0, abs=1e-9)


@pytest.mark.parametrize("x, expected", [(127.5, 128), (0.0, 0), (254.4, 254), (0.5, 1), (254.5, 255), (3.49, 3)])
def test_quantize_examples(x, expected):
    assert quantize(np.array([[x]]))[0, 0] == expected


@given(arrays(np.float64, (4, 5), elements=st.floats(0, 255)))
def test_quantize_on_lattice(x):
    q = quantize(x)
    assert np.all(q == np.round(q)) and q.min() >= 0 and q.max() <= 255
    assert np.all(np.abs(q - x) <= 0.5)


# ---------------------------------------------------------------------- masks


def test_mask_empty_raises():
    with pytest.raises(EmptyMaskError):
        extract_body_mask(np.zeros((16, 16)), threshold=10)


def test_mask_disk_matches_analytic_raster():
    disk = rasterize_disk(64, 31.3, 33.1, 20.5)
    img = np.where(disk, 200.0, 0.0)
    mask = extract_body_mask(img, threshold=10)
    iou = (mask & disk).sum() / (mask | disk).sum()
    assert iou >= 0.99


def test_mask_keeps_largest_blob():
    img = np.zeros((64, 64))
    img[5:25, 5:30] = 200  # 500 px
    img[40:45, 40:50] = 200  # 50 px
    labels, n = flood_fill_labels(img > 10)
    sizes = [(labels == k).sum() for k in range(1, n + 1)]
    assert sorted(sizes) == [50, 500]
    expected = labels == 1 + int(np.argmax(sizes))
    np.testing.assert_array_equal(extract_body_mask(img, 10), expected)


def test_mask_fills_holes():
    ring = rasterize_disk(48, 24, 24, 18) & ~rasterize_disk(48, 24, 24, 8)
    mask = extract_body_mask(np.where(ring, 150.0, 0.0), 10)
    np.testing.assert_array_equal(mask, rasterize_disk(48, 24, 24, 18))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (20, 20), elements=st.sampled_from([0.0, 50.0])))
def test_mask_is_one_component_without_holes(img):
    if not (img > 10).any():
        return
    mask = extract_body_mask(img, 10)
    _, n = flood_fill_labels(mask)
    assert n == 1
    # every background pixel is reachable from the border: no holes
    np.testing.assert_array_equal(background_reachable_from_border(mask), ~mask)


# ------------------------------------------------------------------------ PNG


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_png_round_trip(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("png") / "a.png"
    save_png(x.astype(np.float64), path)
    np.testing.assert_array_equal(load_png(path), x.astype(np.float64))


def test_png_zeros(tmp_path):
    save_png(np.zeros((64, 64)), tmp_path / "z.png")
    out = load_png(tmp_path / "z.png")
    assert out.shape == (64, 64) and not out.any()


def test_png_rejects_16bit_and_rgb(tmp_path):
    Image.fromarray(np.full((8, 8), 1000, dtype=np.uint16)).save(tmp_path / "w.png")
    with pytest.raises(FormatError):
        load_png(tmp_path / "w.png")
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "c.png")
    with pytest.raises(FormatError):
        load_png(tmp_path / "c.png")
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(FormatError):
        load_png(tmp_path / "junk.png")


def test_png_save_requires_lattice(tmp_path):
    with pytest.raises(InvalidInputError):
        save_png(np.full((4, 4), 1.5), tmp_path / "x.png")
    with pytest.raises(InvalidInputError):
        save_png(np.full((4, 4), 300.0), tmp_path / "x.png")


def test_png_missing_file_is_io_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_png(tmp_path / "nope.png")


def test_hu_png_round_trip(tmp_path):
    hu = np.array([[-1000.0, -125.0], [50.0, 1500.0]])
    save_hu_png(hu, tmp_path / "h.png")
    np.testing.assert_array_equal(load_hu_png(tmp_path / "h.png"), hu)


# ------------------------------------------------------------------- phantoms


def test_phantom_deterministic():
    spec = sample_phantom_spec(11, anomaly="texture-shift")
    a, ma, la = gen_phantom(spec)
    b, mb, lb = gen_phantom(spec)
    assert a.tobytes() == b.tobytes() and np.array_equal(ma, mb) and la == lb == OOD


@pytest.mark.parametrize("seed", range(8))
def test_bright_line_present(seed):
    spec = sample_phantom_spec(seed, anomaly=AnomalyKind.BRIGHT_LINE)
    hu, mask, label = gen_phantom(spec)
    assert label == OOD
    assert longest_bright_run(hu, mask) >= 20


@pytest.mark.parametrize("seed", range(5))
def test_no_bright_run_without_anomaly(seed):
    hu, mask, _ = gen_phantom(sample_phantom_spec(seed))
    assert longest_bright_run(hu, mask) == 0


def test_noise_free_phantom_piecewise_constant():
    spec = PhantomSpec(noise_hu=0.0, organ_count=3, seed=4)
    hu, mask, label = gen_phantom(spec)
    assert label == IN_DISTRIBUTION
    assert np.all(hu[~mask] == spec.background_hu)
    # body tissue plus one value per organ, each within the organ HU range
    values = np.unique(hu[mask])
    assert spec.body_hu in values and len(values) <= 1 + spec.organ_count
    organ_values = values[values != spec.body_hu]
    assert np.all((organ_values >= spec.organ_hu_range[0]) & (organ_values <= spec.organ_hu_range[1]))


def test_ground_truth_mask_is_body_ellipse():
    spec = sample_phantom_spec(3, anomaly="peripheral-fluid")
    _, mask, _ = gen_phantom(spec)
    np.testing.assert_array_equal(mask, rasterize_ellipse(spec.resolution, spec.body_center, spec.body_axes))


@pytest.mark.parametrize("kind", list(AnomalyKind))
def test_windowed_mask_recovers_body(kind):
    spec = sample_phantom_spec(21, anomaly=kind)
    hu, gt, _ = gen_phantom(spec)
    mask = extract_body_mask(quantize(window_ct(hu)), 10)
    assert (mask & gt).sum() / (mask | gt).sum() >= 0.99


def test_anomaly_kinds_change_the_image():
    base = sample_phantom_spec(5)
    clean, _, _ = gen_phantom(base)
    for kind in ("bright-line", "peripheral-fluid", "texture-shift"):
        hu, _, _ = gen_phantom(sample_phantom_spec(5, anomaly=kind))
        assert not np.array_equal(hu, clean)


@pytest.mark.parametrize("bad", [
    dict(body_axes=(0.0, 10.0)),
    dict(body_axes=(40.0, 10.0)),
    dict(resolution=4),
    dict(noise_hu=-1.0),
])
def test_invalid_phantom_geometry(bad):
    with pytest.raises(InvalidSpecError):
        gen_phantom(PhantomSpec(**bad))
