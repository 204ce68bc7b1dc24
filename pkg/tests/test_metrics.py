import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from colorctrl.errors import InputError, ShapeError
from colorctrl.metrics import (PSNR_CAP, SEMANTIC_SENTINEL, canny, canny_ssim, dilate, evaluate, get_scorer,
                               placeholder_color_score, psnr, ssim, to_gray)

from oracles import dilate_reference


def step_image(col=16, size=32, lo=0, hi=255):
    img = np.full((size, size), lo, np.uint8)
    img[:, col:] = hi
    return img


def test_psnr_uniform_pair_closed_form():
    a = np.full((16, 16, 3), 128, np.uint8)
    b = np.full((16, 16, 3), 138, np.uint8)
    assert psnr(a, b) == pytest.approx(10 * math.log10(255**2 / 100), abs=1e-12)
    assert abs(psnr(a, b) - 28.13) <= 0.01


def test_psnr_identity_cap_and_mask():
    a = np.random.default_rng(0).integers(0, 256, (12, 12, 3), dtype=np.uint8)
    assert psnr(a, a) == PSNR_CAP == 99.0
    b = a.copy()
    b[:, 6:] = 255 - b[:, 6:]
    left = np.zeros((12, 12), bool)
    left[:, :6] = True
    assert psnr(a, b, left) == PSNR_CAP
    assert psnr(a, b) < PSNR_CAP
    with pytest.raises(InputError):
        psnr(a, b, np.zeros((12, 12), bool))
    with pytest.raises(ShapeError):
        psnr(a, b[:5])


def test_psnr_is_monotone_in_error():
    a = np.full((8, 8), 100, np.uint8)
    vals = [psnr(a, a + np.uint8(d)) for d in (1, 2, 5, 20)]
    assert vals == sorted(vals, reverse=True)
    assert psnr(a, a + np.uint8(5)) == psnr(a + np.uint8(5), a)


def test_ssim_identity_symmetry_and_anticorrelation(rng):
    x = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
    y = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
    assert ssim(x, x) == 1.0
    assert ssim(x, y) == ssim(y, x)
    checker = ((np.indices((24, 24)).sum(0) // 2) % 2 * 255).astype(np.uint8)
    assert ssim(checker, 255 - checker) < 0
    with pytest.raises(InputError):
        ssim(x[:8, :8], y[:8, :8])


def test_ssim_mask_selects_windows(rng):
    x = rng.integers(0, 256, (24, 24), dtype=np.uint8)
    y = x.copy()
    y[:, 16:] = 0
    mask = np.zeros((24, 24), bool)
    mask[:, :12] = True  # the window centred on column 11 reaches column 16
    assert ssim(x, y, mask) < 1.0
    # windows centred on column 5 reach column 10 at most
    mask[:, :] = False
    mask[:, 5] = True
    assert ssim(x, y, mask) == 1.0


def test_to_gray_uses_601_weights():
    px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], np.uint8)
    assert np.allclose(to_gray(px), [[0.299 * 255, 0.587 * 255, 0.114 * 255]])


def test_canny_constant_image_has_no_edges():
    assert not canny(np.full((20, 20), 77, np.uint8)).any()


@pytest.mark.parametrize("col", [8, 15, 16, 23])
def test_canny_step_edge_is_a_single_pixel_line(col):
    edges = canny(step_image(col))
    cols = np.nonzero(edges.any(axis=0))[0]
    assert len(cols) == 1 and abs(int(cols[0]) - col) <= 1
    assert edges[:, cols[0]].all()
    assert np.array_equal(edges.sum(axis=1), np.ones(32))


def test_canny_horizontal_step_and_rgb():
    img = step_image(12).T
    edges = canny(np.repeat(img[..., None], 3, axis=2))
    rows = np.nonzero(edges.any(axis=1))[0]
    assert len(rows) == 1 and edges[rows[0]].all()


def test_canny_shift_inside_band_keeps_edges():
    img = step_image(16, lo=20, hi=220)
    assert np.array_equal(canny(img), canny(img + np.uint8(30)))


def test_canny_validates_thresholds():
    with pytest.raises(InputError):
        canny(step_image(), low=200, high=100)
    with pytest.raises(InputError):
        canny(step_image(), low=0, high=100)


def test_canny_ssim_identity_rotation_and_composition(rng):
    img = np.zeros((32, 32), np.uint8)
    img[4:14, 3:20] = 255
    img[20:28, 22:30] = 128
    assert canny_ssim(img, img) == 1.0
    assert canny_ssim(img, np.rot90(img, 2)) < 1.0
    other = np.rot90(img, 1).copy()
    composed = ssim(canny(img).astype(np.uint8) * 255, canny(other).astype(np.uint8) * 255)
    assert canny_ssim(img, other) == composed


def test_dilate_examples():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    assert np.array_equal(dilate(m, 0), m)
    d1 = dilate(m, 1)
    assert d1.sum() == 9 and d1[2:5, 2:5].all()
    with pytest.raises(InputError):
        dilate(m, -1)


@given(hnp.arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))), st.integers(0, 3), st.integers(0, 3))
@settings(max_examples=80, deadline=None)
def test_dilate_laws(mask, r1, r2):
    assert np.array_equal(dilate(mask, r1), dilate_reference(mask, r1))
    assert np.array_equal(dilate(dilate(mask, r1), r2), dilate(mask, r1 + r2))
    assert np.all(dilate(mask, r1) >= mask)


def test_placeholder_scorer():
    red = np.zeros((8, 8, 3), np.uint8)
    red[..., 0] = 220
    red[..., 1:] = 30
    assert placeholder_color_score(red, "a red car") > placeholder_color_score(red, "a blue car")
    assert placeholder_color_score(red, "a red car") == placeholder_color_score(red, "a red car")
    assert placeholder_color_score(red, "a car") == 0.0
    assert get_scorer("none") is None
    with pytest.raises(InputError):
        get_scorer("clip")


def test_evaluate_report(rng):
    ref = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    edit = ref.copy()
    edit[10:14, 10:14] = 0
    region = np.zeros((32, 32), bool)
    region[10:14, 10:14] = True
    rep = evaluate(ref, edit, region, dilate_radius=2, text="a red square")
    assert rep.bg_psnr == PSNR_CAP and rep.bg_ssim < 1.0
    same = evaluate(ref, ref)
    assert same.canny_ssim == 1.0 and same.bg_psnr == PSNR_CAP
    blank = evaluate(ref, edit, region, scorer="none")
    assert blank.semantic_whole == blank.semantic_edited == SEMANTIC_SENTINEL
    assert blank.semantic_scorer == "none"
    assert set(json.loads(json.dumps(rep.to_dict()))) == {"canny_ssim", "bg_psnr", "bg_ssim", "semantic_whole",
                                                          "semantic_edited", "semantic_scorer"}
    assert all(math.isfinite(v) for v in (rep.canny_ssim, rep.bg_psnr, rep.bg_ssim))
