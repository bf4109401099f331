"""Deterministic procedural test/training imagery.

Produces piecewise-smooth color scenes: a low-frequency backdrop, a few
band-limited textures and a layer of anti-aliased shapes (ellipses, convex
polygons, bars, strokes) with gradient fills, finished with a slight optical
blur and sensor noise. Scenes are a stand-in for photographic corpora when
none is available; the same seed always gives the same image.
"""

from __future__ import annotations

import numpy as np

from .imageio import Image


def _lowpass_noise(rng, h, w, cutoff, channels=1, slope=0.0):
    """Filtered white noise, normalised to unit std.

    The spectrum is a Gaussian roll-off at ``cutoff`` (cycles/pixel) times an
    optional 1/f**slope power law.
    """
    noise = rng.standard_normal((channels, h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f2 = fx**2 + fy**2
    spectrum = np.exp(-f2 / (2 * cutoff**2))
    if slope:
        spectrum = spectrum / np.maximum(f2, 1.0 / (h * w)) ** (slope / 2)
    out = np.fft.irfft2(np.fft.rfft2(noise) * spectrum, s=(h, w))
    out -= out.mean(axis=(1, 2), keepdims=True)
    out /= out.std(axis=(1, 2), keepdims=True) + 1e-12
    return out


def _palette_color(rng):
    # saturated-but-natural colors, avoiding pure extremes
    base = rng.uniform(0.08, 0.92, 3)
    mix = rng.uniform(0.0, 0.6)
    return base * (1 - mix) + base.mean() * mix


def _coverage(sdf):
    """Anti-aliased coverage from a signed distance in pixels (negative inside)."""
    return np.clip(0.5 - sdf, 0.0, 1.0)


def _shape_sdf(rng, h, w):
    """Signed distance of a random shape, evaluated on its bounding window.

    Returns (sdf, (y0, y1, x0, x1)).
    """
    kind = rng.choice(["ellipse", "polygon", "bar", "stroke"], p=[0.35, 0.3, 0.15, 0.2])
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    size = min(h, w) * rng.uniform(0.03, 0.3)
    theta = rng.uniform(0, np.pi)
    reach = 3.0 * size + 6.0
    y0, y1 = int(max(0, cy - reach)), int(min(h, cy + reach + 1))
    x0, x1 = int(max(0, cx - reach)), int(min(w, cx + reach + 1))
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    window = (y0, y1, x0, x1)
    return _sdf(rng, kind, yy, xx, cy, cx, size, theta), window


def _sdf(rng, kind, yy, xx, cy, cx, size, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    if kind == "ellipse":
        a, b = size, size * rng.uniform(0.3, 1.0)
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        return (r - 1.0) * min(a, b)
    if kind == "polygon":
        n = int(rng.integers(3, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radius = size * rng.uniform(0.6, 1.0)
        d = np.full(u.shape, -np.inf)
        for k in range(n):
            a0, a1 = angles[k], angles[(k + 1) % n] + (2 * np.pi if k == n - 1 else 0)
            mid = (a0 + a1) / 2
            half = (a1 - a0) / 2
            dist = radius * np.cos(min(half, np.pi / 2 - 1e-3))
            d = np.maximum(d, u * np.cos(mid) + v * np.sin(mid) - dist)
        return d
    if kind == "bar":
        a, b = size * rng.uniform(0.8, 2.5), size * rng.uniform(0.05, 0.3)
        return np.maximum(np.abs(u) - a, np.abs(v) - b)
    # stroke: thin curved band along a parabola
    bend = rng.uniform(-1.5, 1.5) / size
    width = rng.uniform(0.8, 4.0)
    along = np.abs(u) - size * 1.5
    across = np.abs(v - bend * u * u) - width
    return np.maximum(along, across)


def scene(height: int, width: int, seed: int) -> Image:
    """Render one RGB u8 scene."""
    rng = np.random.default_rng(seed)
    h, w = height, width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # backdrop: two colors blended by a smooth field, plus a sky-like gradient
    c0, c1 = _palette_color(rng), _palette_color(rng)
    field = _lowpass_noise(rng, h, w, cutoff=rng.uniform(0.002, 0.006))[0]
    t = 1 / (1 + np.exp(-1.5 * field))
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    grad_dir = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(grad_dir) * xx / w + np.sin(grad_dir) * yy / h) * rng.uniform(0.1, 0.3)
    img = img + ramp[None] - ramp.mean()

    # textured regions (foliage/fabric-like), masked by a smooth blob field
    for _ in range(int(rng.integers(1, 4))):
        tex = _lowpass_noise(rng, h, w, cutoff=rng.uniform(0.08, 0.3), slope=rng.uniform(1.0, 1.6))[0]
        mask = _lowpass_noise(rng, h, w, cutoff=0.004)[0]
        mask = np.clip((mask - rng.uniform(0.0, 1.0)) * 2.0, 0, 1)
        tint = _palette_color(rng)
        amp = rng.uniform(0.05, 0.15)
        img = img * (1 - 0.5 * mask[None]) + mask[None] * (0.5 * tint[:, None, None] + amp * tex[None])

    # shapes, larger ones first
    nshapes = int(rng.integers(15, 45))
    for _ in range(nshapes):
        sdf, (y0, y1, x0, x1) = _shape_sdf(rng, h, w)
        cov = _coverage(sdf)
        color = _palette_color(rng)
        shade = rng.uniform(-0.25, 0.25)
        gdir = rng.uniform(0, 2 * np.pi)
        sy, sx = yy[y0:y1, x0:x1], xx[y0:y1, x0:x1]
        lin = (np.cos(gdir) * (sx - w / 2) + np.sin(gdir) * (sy - h / 2)) / max(h, w)
        fill = color[:, None, None] + shade * lin[None]
        if rng.uniform() < 0.3:
            stripes = np.sin((sx * np.cos(gdir) + sy * np.sin(gdir)) * rng.uniform(0.1, 0.6))
            fill = fill + rng.uniform(0.03, 0.12) * stripes[None]
        alpha = rng.uniform(0.7, 1.0)
        region = img[:, y0:y1, x0:x1]
        img[:, y0:y1, x0:x1] = region * (1 - alpha * cov[None]) + alpha * cov[None] * fill

    # optics: mild separable blur, then sensor noise
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    p = 0.25 * p[:, :, :-2] + 0.5 * p[:, :, 1:-1] + 0.25 * p[:, :, 2:]
    img = 0.25 * p[:, :-2] + 0.5 * p[:, 1:-1] + 0.25 * p[:, 2:]
    img = img + rng.normal(0, rng.uniform(0.003, 0.01), img.shape)
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return Image(img)


def corpus_seeds(n: int, seed: int = 0) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def corpus(n: int, height: int, width: int, seed: int = 0) -> list[Image]:
    """``n`` scenes with independent per-image seeds derived from ``seed``."""
    return [scene(height, width, s) for s in corpus_seeds(n, seed)]
