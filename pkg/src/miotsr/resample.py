"""Separable bicubic (Catmull-Rom) resizing and dataset crops."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .imageio import U8, Image, round_half_away

A = -0.5
CROP = 256
SHORT_SIDE = (500, 1000)


class SourceTooSmall(ValueError):
    pass


def cubic(x, a: float = A):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=256)
def weight_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) resampling matrix with pixel-center alignment.

    When shrinking, the kernel is stretched by the scale ratio so every
    output sample averages its whole footprint. Taps falling outside the
    input are clamped onto the edge sample.
    """
    ratio = n_in / n_out
    stretch = max(ratio, 1.0)
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) * ratio - 0.5
    first = np.floor(centers - support).astype(np.int64) + 1
    ntaps = int(np.ceil(2 * support)) + 1
    taps = first[:, None] + np.arange(ntaps)[None, :]
    w = cubic((taps - centers[:, None]) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    rows = np.broadcast_to(np.arange(n_out)[:, None], taps.shape)
    np.add.at(m, (rows, np.clip(taps, 0, n_in - 1)), w)
    m.setflags(write=False)
    return m


def resize_planes(planes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) float planes; no rounding or clamping."""
    c, h, w = planes.shape
    my = weight_matrix(h, out_h)
    mx = weight_matrix(w, out_w)
    return np.einsum("oh,chw,pw->cop", my, planes.astype(np.float64), mx, optimize=True)


def resize(img: Image, out_w: int, out_h: int) -> Image:
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    if (out_w, out_h) == (img.width, img.height):
        return img
    v = resize_planes(img.planes, out_h, out_w)
    if img.depth == U8:
        v = np.clip(round_half_away(v), 0, 255).astype(np.uint8)
    else:
        v = np.clip(v, 0.0, 1.0)
    return Image(v, img.colorspace, img.depth)


def _check_factor(r):
    if not isinstance(r, (int, np.integer)) or r < 1:
        raise ValueError(f"scale factor must be a positive integer, got {r!r}")


def downscale(img: Image, r: int) -> Image:
    _check_factor(r)
    if img.width < r or img.height < r:
        raise ValueError(f"image {img.width}x{img.height} smaller than factor {r}")
    return resize(img, img.width // r, img.height // r)


def upscale_bicubic(img: Image, r: int) -> Image:
    _check_factor(r)
    return resize(img, img.width * r, img.height * r)


def resize_crop_plan(width: int, height: int, seed: int):
    """Draw (resized_w, resized_h, x0, y0) for :func:`random_resize_crop`."""
    rng = np.random.default_rng(seed)
    short = int(rng.integers(SHORT_SIDE[0], SHORT_SIDE[1] + 1))
    if width <= height:
        new_w, new_h = short, max(short, int(round(height * short / width)))
    else:
        new_w, new_h = max(short, int(round(width * short / height))), short
    x0 = int(rng.integers(0, new_w - CROP + 1))
    y0 = int(rng.integers(0, new_h - CROP + 1))
    return new_w, new_h, x0, y0


def random_resize_crop(img: Image, seed: int) -> Image:
    """Resize so the short side is uniform in [500, 1000], then crop 256x256."""
    if min(img.width, img.height) < SHORT_SIDE[0]:
        raise SourceTooSmall(
            f"source {img.width}x{img.height} is below the {SHORT_SIDE[0]}px short side"
        )
    new_w, new_h, x0, y0 = resize_crop_plan(img.width, img.height, seed)
    # only the crop window is needed: resize rows/cols restricted to it
    my = weight_matrix(img.height, new_h)[y0 : y0 + CROP]
    mx = weight_matrix(img.width, new_w)[x0 : x0 + CROP]
    v = np.einsum("oh,chw,pw->cop", my, img.planes.astype(np.float64), mx, optimize=True)
    if img.depth == U8:
        v = np.clip(round_half_away(v), 0, 255).astype(np.uint8)
    else:
        v = np.clip(v, 0.0, 1.0)
    return Image(v, img.colorspace, img.depth)
