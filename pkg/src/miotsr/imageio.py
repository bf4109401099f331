"""Planar images, binary PPM/PGM interchange and YCbCr conversion."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RGB = "RGB"
YCBCR = "YCbCr"
GRAY = "Gray"
U8 = "u8"
UNIT = "unit"

_NPLANES = {RGB: 3, YCBCR: 3, GRAY: 1}

# full-range BT.601, as used by JFIF
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


class PPMError(ValueError):
    """Malformed PPM/PGM data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def round_half_away(x):
    """Round to nearest integer, ties away from zero (float result)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True, eq=False)
class Image:
    """A planar raster: ``planes`` has shape (channels, height, width).

    u8 images hold uint8 samples; unit images hold float64 samples in [0, 1].
    """

    planes: np.ndarray
    colorspace: str = RGB
    depth: str = U8

    def __post_init__(self):
        planes = np.asarray(self.planes)
        if planes.ndim == 2:
            planes = planes[None]
        if planes.ndim != 3:
            raise ValueError(f"planes must be (C, H, W), got shape {planes.shape}")
        if self.colorspace not in _NPLANES:
            raise ValueError(f"unknown colorspace {self.colorspace!r}")
        if planes.shape[0] != _NPLANES[self.colorspace]:
            raise ValueError(
                f"{self.colorspace} needs {_NPLANES[self.colorspace]} planes, got {planes.shape[0]}"
            )
        if self.depth == U8:
            if planes.dtype != np.uint8:
                if np.any(planes < 0) or np.any(planes > 255):
                    raise ValueError("u8 samples must lie in [0, 255]")
                planes = planes.astype(np.uint8)
        elif self.depth == UNIT:
            planes = planes.astype(np.float64)
            if planes.size and (planes.min() < 0.0 or planes.max() > 1.0):
                raise ValueError("unit samples must lie in [0, 1]")
        else:
            raise ValueError(f"unknown depth {self.depth!r}")
        planes.setflags(write=False)
        object.__setattr__(self, "planes", planes)

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.colorspace == other.colorspace
            and self.depth == other.depth
            and self.planes.shape == other.planes.shape
            and bool(np.array_equal(self.planes, other.planes))
        )

    def __repr__(self):
        return f"Image({self.width}x{self.height}, {self.colorspace}, {self.depth})"

    @classmethod
    def from_hwc(cls, array, colorspace=None) -> "Image":
        """Build a u8 image from an (H, W, 3) or (H, W) array."""
        array = np.asarray(array)
        if array.ndim == 2:
            return cls(array[None], colorspace or GRAY)
        return cls(np.moveaxis(array, -1, 0), colorspace or RGB)

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self.planes, 0, -1)

    def to_unit(self) -> "Image":
        if self.depth == UNIT:
            return self
        return Image(self.planes / 255.0, self.colorspace, UNIT)

    def to_u8(self) -> "Image":
        if self.depth == U8:
            return self
        v = np.clip(round_half_away(self.planes * 255.0), 0, 255)
        return Image(v.astype(np.uint8), self.colorspace, U8)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(data: bytes) -> Image:
    """Parse binary PPM (P6) or PGM (P5) with maxval 255."""
    data = bytes(data)
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PPMError("truncated header", len(data))
        fields.append((m.group(1), m.start(1)))
        pos = m.end(1)
    (magic, moff), *rest = fields
    if magic not in (b"P6", b"P5"):
        raise PPMError(f"bad magic {magic!r}", moff)
    nums = []
    for tok, off in rest:
        if not tok.isdigit():
            raise PPMError(f"expected integer, got {tok!r}", off)
        nums.append((int(tok), off))
    (width, woff), (height, hoff), (maxval, moff2) = nums
    if width <= 0:
        raise PPMError("width must be positive", woff)
    if height <= 0:
        raise PPMError("height must be positive", hoff)
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}", moff2)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PPMError("missing whitespace after maxval", pos)
    pos += 1
    nchan = 3 if magic == b"P6" else 1
    need = nchan * width * height
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PPMError(f"payload truncated: need {need} bytes, have {len(payload)}", len(data))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, nchan)
    return Image(np.moveaxis(pixels, -1, 0).copy(), RGB if nchan == 3 else GRAY)


def write_ppm(img: Image) -> bytes:
    if img.depth != U8:
        raise ValueError("write_ppm needs a u8 image")
    if img.colorspace == RGB:
        magic = b"P6"
    elif img.colorspace == GRAY:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write {img.colorspace} as PPM; convert to RGB first")
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + np.ascontiguousarray(np.moveaxis(img.planes, 0, -1)).tobytes()


def load(path) -> Image:
    return read_ppm(Path(path).read_bytes())


def save(img: Image, path) -> None:
    Path(path).write_bytes(write_ppm(img))


def _matmul_planes(matrix, planes, offset):
    flat = planes.reshape(3, -1).astype(np.float64)
    out = matrix @ (flat + offset[:, None])
    return out.reshape(planes.shape)


def rgb_to_ycbcr(img: Image) -> Image:
    if img.colorspace != RGB or img.depth != U8:
        raise ValueError("rgb_to_ycbcr expects a u8 RGB image")
    ycc = _matmul_planes(_RGB2YCC, img.planes, np.zeros(3))
    ycc[1:] += 128.0
    ycc = np.clip(round_half_away(ycc), 0, 255).astype(np.uint8)
    return Image(ycc, YCBCR)


def ycbcr_to_rgb(img: Image) -> Image:
    if img.colorspace != YCBCR or img.depth != U8:
        raise ValueError("ycbcr_to_rgb expects a u8 YCbCr image")
    rgb = _matmul_planes(_YCC2RGB, img.planes, np.array([0.0, -128.0, -128.0]))
    rgb = np.clip(round_half_away(rgb), 0, 255).astype(np.uint8)
    return Image(rgb, RGB)


def luma(img: Image) -> np.ndarray:
    """Float64 luma plane of a u8 image (Gray passes through)."""
    if img.depth != U8:
        img = img.to_u8()
    if img.colorspace == GRAY:
        return img.planes[0].astype(np.float64)
    if img.colorspace == YCBCR:
        return img.planes[0].astype(np.float64)
    return rgb_to_ycbcr(img).planes[0].astype(np.float64)
