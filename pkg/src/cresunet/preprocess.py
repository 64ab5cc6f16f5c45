"""Image preprocessing: resizing, non-local-means despeckling, rotation augmentation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter


@dataclass(frozen=True)
class NLMParams:
    h: float = 0.1
    patch: int = 7
    window: int = 21
    sigma: float = 0.0


@dataclass(frozen=True)
class PreprocessConfig:
    size: tuple[int, int] = (256, 256)
    denoise: bool = True
    nlm: NLMParams = NLMParams()
    rotate: bool = True
    # False: {original, rotated} after denoising; True: {original, denoised} x {upright, rotated}
    denoise_variants: bool = False


def to_unit(img8: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities linearly onto [0, 1]."""
    return np.asarray(img8, dtype=np.float32) / 255.0


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped at the edges
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo).astype(np.float64)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    a = np.asarray(img, dtype=np.float64)
    r0, r1, fr = _bilinear_axis(a.shape[0], out_h)
    c0, c1, fc = _bilinear_axis(a.shape[1], out_w)
    rows = a[r0] * (1 - fr)[:, None] + a[r1] * fr[:, None]
    out = rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]
    return out.astype(np.float32)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize; keeps binary masks binary."""
    m = np.asarray(mask)
    ri = np.minimum(((np.arange(out_h) + 0.5) * (m.shape[0] / out_h)).astype(np.intp), m.shape[0] - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * (m.shape[1] / out_w)).astype(np.intp), m.shape[1] - 1)
    return m[ri][:, ci]


def _check_nlm(img: np.ndarray, patch: int, window: int) -> None:
    if patch % 2 == 0 or window % 2 == 0:
        raise ValueError(f"patch ({patch}) and window ({window}) must be odd")
    if patch > window:
        raise ValueError(f"patch ({patch}) larger than search window ({window})")
    if window > min(img.shape):
        raise ValueError(f"search window {window} exceeds image size {img.shape}")


def _nlm_weight(d2: np.ndarray, h: float, sigma: float) -> np.ndarray:
    if np.isinf(h):
        return np.ones_like(d2)
    return np.exp(-np.maximum(d2 - 2.0 * sigma**2, 0.0) / (h * h))


def nlm_denoise(img: np.ndarray, h: float = 0.1, patch: int = 7, window: int = 21, sigma: float = 0.0) -> np.ndarray:
    """Non-local means with patch-similarity weights over a square search window.

    d^2 is the mean squared difference between the patches around the two
    pixels; weights are exp(-max(d^2 - 2 sigma^2, 0) / h^2). Borders are
    handled by symmetric padding.
    """
    a = np.asarray(img, dtype=np.float64)
    _check_nlm(a, patch, window)
    r = window // 2
    padded = np.pad(a, r, mode="symmetric")
    H, W = a.shape
    num = np.zeros_like(a)
    den = np.zeros_like(a)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[r + dy : r + dy + H, r + dx : r + dx + W]
            d2 = uniform_filter((a - shifted) ** 2, size=patch, mode="reflect")
            wgt = _nlm_weight(d2, h, sigma)
            num += wgt * shifted
            den += wgt
    return np.clip(num / den, 0.0, 1.0).astype(np.float32)


def nlm_weights_at(
    img: np.ndarray, y: int, x: int, h: float = 0.1, patch: int = 7, window: int = 21, sigma: float = 0.0
) -> np.ndarray:
    """Normalized (window x window) weight map that nlm_denoise uses at pixel (y, x)."""
    a = np.asarray(img, dtype=np.float64)
    _check_nlm(a, patch, window)
    r = window // 2
    padded = np.pad(a, r, mode="symmetric")
    H, W = a.shape
    out = np.empty((window, window))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[r + dy : r + dy + H, r + dx : r + dx + W]
            d2 = uniform_filter((a - shifted) ** 2, size=patch, mode="reflect")[y, x]
            out[dy + r, dx + r] = _nlm_weight(np.asarray(d2), h, sigma)
    return out / out.sum()


def rotate180(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[::-1, ::-1])


def add_speckle(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Multiplicative Gaussian speckle img * (1 + n), n ~ N(0, sigma^2), clamped to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    a = np.asarray(img, dtype=np.float64)
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=a.shape) if sigma > 0 else 0.0
    return np.clip(a * (1.0 + noise), 0.0, 1.0).astype(np.float32)


def make_phantom(size: int = 128) -> np.ndarray:
    """Piecewise-constant test image: background, a rectangle and a disc."""
    img = np.full((size, size), 0.3, dtype=np.float32)
    s = size
    img[s // 8 : s // 2, s // 8 : 5 * s // 8] = 0.7
    yy, xx = np.mgrid[:s, :s]
    img[(yy - 0.68 * s) ** 2 + (xx - 0.62 * s) ** 2 < (0.2 * s) ** 2] = 0.5
    return img


def augment(samples: Sequence, seed: int = 0, config: PreprocessConfig = PreprocessConfig()) -> list:
    """Expand training samples with rotated (and optionally denoised) copies.

    Each sample needs ``sample_id``, ``image`` and ``mask`` attributes and is
    copied with ``dataclasses.replace``. Masks are transformed in lockstep
    with their images. Output order is deterministic; ``seed`` is accepted
    for interface stability and unused by the fixed transform set.
    """
    del seed
    out = list(samples)
    if config.denoise_variants:
        p = config.nlm
        out += [
            dataclasses.replace(s, sample_id=f"{s.sample_id}@nlm", image=nlm_denoise(s.image, p.h, p.patch, p.window, p.sigma))
            for s in samples
        ]
    if config.rotate:
        out += [
            dataclasses.replace(s, sample_id=f"{s.sample_id}@rot180", image=rotate180(s.image), mask=rotate180(s.mask))
            for s in list(out)
        ]
    return out
