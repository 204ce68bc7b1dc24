"""Image-consistency metrics: PSNR/SSIM (optionally restricted to a region),
Canny edges and SSIM between edge maps, square dilation, and a pluggable
semantic scorer.

Images are ``uint8`` arrays shaped (H, W) or (H, W, 3). Masks are boolean
(H, W) rasters where True marks pixels to INCLUDE.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, ShapeError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0
CANNY_SIGMA = 1.4
CANNY_LOW = 100.0
CANNY_HIGH = 200.0
DEFAULT_DILATE = 2
SEMANTIC_SENTINEL = -1.0

_LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(img) -> np.ndarray:
    """ITU-R 601 luma as float64; grayscale input is passed through."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        return img.astype(np.float64) @ _LUMA
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0].astype(np.float64)
    if img.ndim == 2:
        return img.astype(np.float64)
    raise ShapeError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _check_mask(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, bool)
    if mask.shape != shape:
        raise ShapeError(f"mask shape {mask.shape} does not match image {shape}")
    if not mask.any():
        raise InputError("mask selects no pixels")
    return mask


def psnr(a, b, mask=None) -> float:
    """Peak signal-to-noise ratio in dB over the pixels selected by ``mask``.

    Zero error returns ``PSNR_CAP``.
    """
    a, b = _check_pair(a, b)
    mask = _check_mask(mask, a.shape[:2])
    diff = (a.astype(np.float64) - b.astype(np.float64)) ** 2
    if mask is not None:
        diff = diff[mask]
    mse = float(diff.mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(DATA_RANGE**2 / mse), PSNR_CAP)


def gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable correlation, keeping only positions where the window fits."""
    w = len(k1d)
    rows = sliding_window_view(img, w, axis=1) @ k1d
    return sliding_window_view(rows, w, axis=0) @ k1d


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM over every position where the 11x11 window fits."""
    a, b = _check_pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise InputError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    k = gaussian_kernel1d(SSIM_SIGMA, SSIM_WINDOW // 2)
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_x, mu_y = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mu_x * mu_x
    syy = _filter_valid(y * y, k) - mu_y * mu_y
    sxy = _filter_valid(x * y, k) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b, mask=None) -> float:
    """Mean SSIM; with ``mask`` only windows centred on selected pixels count."""
    smap = ssim_map(a, b)
    if mask is None:
        return float(smap.mean())
    mask = _check_mask(mask, np.asarray(a).shape[:2])
    r = SSIM_WINDOW // 2
    inner = mask[r : mask.shape[0] - r, r : mask.shape[1] - r]
    if not inner.any():
        raise InputError("mask selects no pixels far enough from the border for SSIM")
    return float(smap[inner].mean())


def _correlate_reflect(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    ky, kx = kernel.shape
    padded = np.pad(img, ((ky // 2, ky // 2), (kx // 2, kx // 2)), mode="reflect")
    return np.einsum("ijkl,kl->ij", sliding_window_view(padded, kernel.shape), kernel)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def canny(img, sigma: float = CANNY_SIGMA, low: float = CANNY_LOW, high: float = CANNY_HIGH) -> np.ndarray:
    """Binary Canny edge map.

    Gaussian blur, Sobel gradients on the 0-255 scale, non-maximum suppression
    along four quantised directions, then 8-connected hysteresis. Gradient
    magnitudes are rounded to 1e-6 so exact ties stay ties under rounding noise;
    on a tie the pixel wins against its forward neighbour and loses against the
    backward one, which keeps symmetric ridges one pixel wide.
    """
    if not 0 < low < high:
        raise InputError(f"need 0 < low < high, got low={low}, high={high}")
    gray = to_gray(img)
    if sigma > 0:
        radius = max(1, int(math.ceil(3.0 * sigma)))
        k = gaussian_kernel1d(sigma, radius)
        gray = _correlate_reflect(gray, np.outer(k, k))
    gx = _correlate_reflect(gray, _SOBEL_X)
    gy = _correlate_reflect(gray, _SOBEL_X.T)
    mag = np.round(np.hypot(gx, gy), 6)
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    # 0: horizontal gradient, 1: 45 deg, 2: vertical, 3: 135 deg
    sector = np.digitize(angle, [22.5, 67.5, 112.5, 157.5]) % 4
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]
    h, w = mag.shape
    padded = np.pad(mag, 1)
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in enumerate(offsets):
        fwd = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep |= (sector == s) & (mag >= fwd) & (mag > bwd)
    nms = np.where(keep & (mag > 0), mag, 0.0)
    return _hysteresis(nms, low, high)


def _hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = nms >= low
    edges = nms >= high
    queue = deque(zip(*np.nonzero(edges)))
    h, w = nms.shape
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not edges[ny, nx]:
                    edges[ny, nx] = True
                    queue.append((ny, nx))
    return edges


def canny_ssim(a, b) -> float:
    """SSIM between the two Canny edge maps scaled to {0, 255}."""
    a, b = _check_pair(a, b)
    ea = canny(a).astype(np.uint8) * 255
    eb = canny(b).astype(np.uint8) * 255
    return ssim(ea, eb)


def dilate(mask, radius: int) -> np.ndarray:
    """Binary dilation by a (2r+1)x(2r+1) square; outside the raster counts as unset."""
    if radius < 0:
        raise InputError(f"radius must be >= 0, got {radius}")
    mask = np.asarray(mask, bool)
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    padded = np.pad(mask, radius)
    out = np.zeros_like(mask)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy : dy + h, dx : dx + w]
    return out


# Semantic scoring. A real CLIP-style encoder is out of scope; the placeholder
# below only exercises the report plumbing and must not be read as a quality
# measure.

NAMED_COLORS = {
    "red": (220, 30, 30), "orange": (245, 140, 20), "yellow": (240, 220, 30),
    "green": (40, 170, 60), "blue": (30, 70, 220), "purple": (130, 50, 170),
    "pink": (240, 130, 180), "brown": (120, 75, 35), "black": (10, 10, 10),
    "white": (245, 245, 245), "gray": (128, 128, 128), "grey": (128, 128, 128),
    "cyan": (30, 200, 220), "magenta": (210, 40, 170), "golden": (212, 175, 55),
    "silver": (192, 192, 192), "teal": (0, 128, 128), "violet": (150, 90, 200),
}

SemanticScorer = Callable[[np.ndarray, str, "np.ndarray | None"], float]


def placeholder_color_score(image, text: str, region=None) -> float:
    """PLACEHOLDER, not a semantic model: closeness of the mean color to the
    last named color word in ``text``, in [0, 1]. Returns 0 without a color word."""
    from .model import normalize_word

    named = [NAMED_COLORS[w] for w in map(normalize_word, text.split()) if w in NAMED_COLORS]
    if not named:
        return 0.0
    img = np.asarray(image, np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    pixels = img.reshape(-1, 3) if region is None else img[np.asarray(region, bool)]
    if len(pixels) == 0:
        return 0.0
    dist = np.linalg.norm(pixels.mean(axis=0) - np.array(named[-1], np.float64))
    return float(1.0 - dist / (DATA_RANGE * math.sqrt(3.0)))


SCORERS: dict[str, SemanticScorer | None] = {
    "placeholder": placeholder_color_score,
    "none": None,
}


def get_scorer(name: str) -> SemanticScorer | None:
    try:
        return SCORERS[name]
    except KeyError:
        raise InputError(f"unknown semantic scorer {name!r}; known: {sorted(SCORERS)}") from None


@dataclass
class MetricsReport:
    canny_ssim: float
    bg_psnr: float
    bg_ssim: float
    semantic_whole: float
    semantic_edited: float
    semantic_scorer: str = "placeholder"

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(reference, edited, edit_region=None, dilate_radius: int = DEFAULT_DILATE,
             scorer: str = "placeholder", text: str = "") -> MetricsReport:
    """Compare an edited image with its reference.

    Background metrics use the complement of ``edit_region`` dilated by
    ``dilate_radius``; without a region the whole image is background.
    """
    reference, edited = _check_pair(reference, edited)
    background = None
    region = None
    if edit_region is not None:
        region = dilate(edit_region, dilate_radius)
        background = ~region
    fn = get_scorer(scorer)
    if fn is None:
        sem_whole = sem_edit = SEMANTIC_SENTINEL
    else:
        sem_whole = fn(edited, text, None)
        sem_edit = fn(edited, text, region) if region is not None and region.any() else sem_whole
    return MetricsReport(
        canny_ssim=canny_ssim(reference, edited),
        bg_psnr=psnr(reference, edited, background),
        bg_ssim=ssim(reference, edited, background),
        semantic_whole=sem_whole,
        semantic_edited=sem_edit,
        semantic_scorer=scorer,
    )
