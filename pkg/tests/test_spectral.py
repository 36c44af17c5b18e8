import numpy as np
import pytest

from sepgnet.spectral import (
    GrayscaleCoefficients,
    Image,
    Modality,
    compose_seg,
    decompose,
    export_seg,
    fft2,
    ifft2,
    load_png,
    phase_reconstruct,
    quantize,
    recombine,
    replicate_channels,
    rgb_to_grey,
    save_png,
)

rng = np.random.default_rng(7)


def _rand_image(h=16, w=12, channels=3, modality=Modality.VISIBLE):
    return Image(rng.uniform(0, 255, (h, w, channels)), modality)


def _naive_dft2(x):
    h, w = x.shape
    u = np.arange(h)[:, None] * np.arange(h)[None, :]
    v = np.arange(w)[:, None] * np.arange(w)[None, :]
    eh = np.exp(-2j * np.pi * u / h)
    ew = np.exp(-2j * np.pi * v / w)
    return eh @ x @ ew


# ---- grayscale ----


def test_grey_constant_pixel():
    img = Image(np.full((2, 2, 3), 100.0), Modality.VISIBLE)
    np.testing.assert_allclose(rgb_to_grey(img).pixels, 100.0, atol=1e-9)


def test_grey_channel_coefficients():
    red = Image(np.dstack([np.full((1, 1), 255.0), np.zeros((1, 1)), np.zeros((1, 1))]),
                Modality.VISIBLE)
    green = Image(np.dstack([np.zeros((1, 1)), np.full((1, 1), 255.0), np.zeros((1, 1))]),
                  Modality.VISIBLE)
    assert abs(rgb_to_grey(red).pixels[0, 0, 0] - 76.245) < 1e-9
    assert abs(rgb_to_grey(green).pixels[0, 0, 0] - 149.685) < 1e-9


def test_grey_requires_three_channels():
    with pytest.raises(ValueError):
        rgb_to_grey(Image(np.zeros((2, 2, 1)), Modality.GREY))


def test_grey_modality_tag():
    assert rgb_to_grey(_rand_image()).modality is Modality.GREY


def test_coefficients_must_sum_to_one():
    with pytest.raises(ValueError):
        GrayscaleCoefficients(0.5, 0.5, 0.5)


def test_replicate_channels_bitwise():
    grey = rgb_to_grey(_rand_image())
    rep = replicate_channels(grey)
    assert rep.channels == 3
    for c in range(3):
        np.testing.assert_array_equal(rep.pixels[:, :, c], grey.pixels[:, :, 0])
    with pytest.raises(ValueError):
        replicate_channels(rep)


def test_replicate_constant_zero():
    rep = replicate_channels(Image(np.zeros((3, 3, 1)), Modality.GREY))
    assert not rep.pixels.any() and rep.channels == 3


# ---- fft ----


def test_fft2_constant_dc_bin():
    grid = np.full((9, 7), 3.5)
    spec = fft2(grid)
    assert abs(spec[0, 0] - 3.5 * 63) < 1e-4
    spec[0, 0] = 0
    assert np.abs(spec).max() < 1e-4


def test_fft2_roundtrip():
    for shape in ((8, 8), (9, 7), (96, 48), (37, 21)):
        x = rng.uniform(0, 255, shape)
        back = ifft2(fft2(x))
        assert np.abs(back.real - x).max() < 1e-4
        assert np.abs(back.imag).max() < 1e-4


def test_fft2_matches_naive_dft_oracle():
    for shape in ((5, 4), (7, 7), (12, 6)):
        x = rng.uniform(-1, 1, shape)
        np.testing.assert_allclose(fft2(x), _naive_dft2(x), rtol=1e-9, atol=1e-9)


def test_fft2_parseval_direct_summation():
    for shape in ((16, 16), (37, 21)):
        x = rng.uniform(0, 255, shape)
        spec = fft2(x)
        lhs = (x * x).sum()
        rhs = (np.abs(spec) ** 2).sum() / (shape[0] * shape[1])
        assert abs(lhs - rhs) / lhs < 1e-5


# ---- decompose / phase reconstruction ----


def test_decompose_constant_image():
    dec = decompose(Image(np.full((8, 6, 1), 50.0), Modality.GREY))
    assert dec.phase[0, 0, 0] == 0.0
    amp = dec.amplitude[0].copy()
    amp[0, 0] = 0
    assert amp.max() < 1e-4
    assert (dec.amplitude >= 0).all()


def test_decompose_amplitude_shift_invariance():
    img = _rand_image(12, 10)
    rolled = Image(np.roll(img.pixels, (3, 4), axis=(0, 1)), Modality.VISIBLE)
    a = decompose(img).amplitude
    b = decompose(rolled).amplitude
    assert np.abs(a - b).max() < 1e-4


def test_decompose_recombine_recovers_image():
    img = _rand_image(11, 9)
    back = recombine(decompose(img))
    assert np.abs(back - img.pixels.transpose(2, 0, 1)).max() < 1e-4


def test_phase_reconstruct_constant_is_impulse():
    rec = phase_reconstruct(decompose(Image(np.full((10, 8, 1), 77.0), Modality.GREY)))
    assert abs(rec[0, 0, 0] - 1.0) < 1e-6
    rest = rec[0].copy()
    rest[0, 0] = 0
    assert np.abs(rest).max() < 1e-6


def test_phase_reconstruct_impulse_fixed_point():
    x = np.zeros((8, 8, 1))
    x[0, 0, 0] = 1.0
    rec = phase_reconstruct(decompose(Image(x, Modality.GREY)))
    assert np.abs(rec[0] - x[:, :, 0]).max() < 1e-6


def test_phase_reconstruct_real_output():
    rec = phase_reconstruct(decompose(_rand_image(13, 11)))
    assert rec.dtype == np.float64  # imaginary residue checked internally


# ---- compose_seg ----


def test_compose_seg_weight_zero_equals_grey3():
    img = _rand_image()
    seg = compose_seg(img, weight=0.0)
    grey3 = replicate_channels(rgb_to_grey(img))
    np.testing.assert_array_equal(seg.pixels, grey3.pixels)
    assert seg.modality is Modality.SEG


def test_compose_seg_constant_image_touches_only_origin():
    img = Image(np.full((12, 10, 3), 100.0), Modality.VISIBLE)
    seg = compose_seg(img)
    grey3 = replicate_channels(rgb_to_grey(img))
    diff = np.abs(seg.pixels - grey3.pixels)
    assert diff[0, 0, :].min() > 50.0
    diff[0, 0, :] = 0
    assert diff.max() < 1e-6


def test_compose_seg_range_and_determinism():
    img = _rand_image(20, 14)
    a = compose_seg(img)
    b = compose_seg(img)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 255.0
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_compose_seg_rejects_bad_args():
    grey = replicate_channels(rgb_to_grey(_rand_image()))
    with pytest.raises(ValueError):
        compose_seg(_rand_image(), weight=-1.0)
    with pytest.raises(ValueError):
        compose_seg(Image(grey.pixels[:, :, :1], Modality.GREY))
    with pytest.raises(ValueError):
        compose_seg(_rand_image(), fft_source="hsv")


def test_compose_seg_grey_fft_source():
    img = _rand_image(16, 12)
    seg = compose_seg(img, fft_source="grey")
    assert seg.pixels.shape == img.pixels.shape
    # grey-source reconstruction is identical across the three channels
    np.testing.assert_array_equal(seg.pixels[:, :, 0], seg.pixels[:, :, 1])


# ---- png / export ----


def test_png_roundtrip_quantized(tmp_path):
    img = _rand_image(9, 7)
    path = tmp_path / "a" / "img.png"
    save_png(img, path)
    back = load_png(path, Modality.VISIBLE)
    np.testing.assert_array_equal(back.pixels, quantize(img.pixels).astype(np.float64))


def test_quantize_rounds_half_up():
    np.testing.assert_array_equal(
        quantize(np.array([[0.49, 0.5, 254.5, 255.7, -3.0]])),
        np.array([[0, 1, 255, 255, 0]], np.uint8),
    )


def test_export_seg_roundtrip(tmp_path):
    src = tmp_path / "in"
    for i in range(3):
        save_png(_rand_image(10, 8), src / "sub" / f"{i}.png")
    out1, out2 = tmp_path / "out1", tmp_path / "out2"
    rep1 = export_seg(src, out1, weight=1.0)
    rep2 = export_seg(src, out2, weight=1.0)
    assert len(rep1["converted"]) == 3 and not rep1["skipped"]
    for rel in rep1["converted"]:
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes()


def test_export_seg_weight_zero_is_grayscale(tmp_path):
    src = tmp_path / "in"
    img = _rand_image(10, 8)
    save_png(img, src / "x.png")
    export_seg(src, tmp_path / "out", weight=0.0)
    seg = load_png(tmp_path / "out" / "x.png", Modality.SEG)
    assert np.array_equal(seg.pixels[:, :, 0], seg.pixels[:, :, 1])
    loaded = load_png(src / "x.png", Modality.VISIBLE)
    grey3 = replicate_channels(rgb_to_grey(loaded))
    np.testing.assert_array_equal(seg.pixels, quantize(grey3.pixels).astype(np.float64))


def test_export_seg_skips_unreadable(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    (src / "broken.png").write_bytes(b"not a png")
    save_png(_rand_image(8, 8), src / "ok.png")
    report = export_seg(src, tmp_path / "out")
    assert report["converted"] == ["ok.png"]
    assert len(report["skipped"]) == 1 and report["skipped"][0][0] == "broken.png"


def test_export_seg_histograms_differ_from_grayscale(tmp_path):
    src = tmp_path / "in"
    save_png(_rand_image(24, 16), src / "x.png")
    export_seg(src, tmp_path / "w1", weight=1.0)
    export_seg(src, tmp_path / "w0", weight=0.0)
    a = load_png(tmp_path / "w1" / "x.png", Modality.SEG).pixels
    b = load_png(tmp_path / "w0" / "x.png", Modality.SEG).pixels
    ha = np.histogram(a, bins=32, range=(0, 255))[0]
    hb = np.histogram(b, bins=32, range=(0, 255))[0]
    assert (ha != hb).any()
