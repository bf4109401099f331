"""Baseline-JPEG-style lossy codec with a small self-describing container.

Pipeline: RGB -> YCbCr -> optional 4:2:0 chroma subsampling -> 8x8 blocks ->
level shift + DCT -> quantization -> zigzag -> DPCM/run-length Huffman coding.
Each component is coded as an independent section; there is no interleaving.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _tables
from .imageio import GRAY, RGB, U8, YCBCR, Image, rgb_to_ycbcr, round_half_away, ycbcr_to_rgb

LUMA = "luma"
CHROMA = "chroma"

MAGIC = b"MIOT"
VERSION = 1
_HEADER = struct.Struct("<4sBBBBBBHH")
_SECTION = struct.Struct("<I")
_COLORSPACE_CODES = {GRAY: 0, RGB: 1}
_COLORSPACE_NAMES = {v: k for k, v in _COLORSPACE_CODES.items()}

# largest magnitudes representable with the baseline size categories
_MAX_AC = 1023
_MAX_DC = 2047


class CodecError(ValueError):
    """Malformed or inconsistent bitstream."""


class CorruptStreamError(CodecError):
    """Entropy-coded data could not be decoded; ``block`` is the failing block index."""

    def __init__(self, message: str, block: int):
        super().__init__(f"{message} (block {block})")
        self.block = block


# ---------------------------------------------------------------- tables

_BASE_LUMA = np.array(_tables.LUMA_QUANT, dtype=np.int64).reshape(8, 8)
_BASE_CHROMA = np.array(_tables.CHROMA_QUANT, dtype=np.int64).reshape(8, 8)


@dataclass(frozen=True, eq=False)
class QuantTables:
    luma: np.ndarray
    chroma: np.ndarray


def quality_to_tables(q: int) -> QuantTables:
    """Scale the Annex-K matrices by the libjpeg quality convention."""
    if not isinstance(q, (int, np.integer)) or not 1 <= q <= 100:
        raise ValueError(f"quality must be an integer in 1..100, got {q!r}")
    scale = 5000 // q if q < 50 else 200 - 2 * q

    def scaled(base):
        return np.clip((base * scale + 50) // 100, 1, 255)

    return QuantTables(scaled(_BASE_LUMA), scaled(_BASE_CHROMA))


# ---------------------------------------------------------------- transforms


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)
    m = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16) / 2
    m[0] /= np.sqrt(2)
    return m


DCT = _dct_matrix()


def fdct_block(b):
    """Orthonormal 2-D DCT-II of level-shifted samples; works on (..., 8, 8)."""
    b = np.asarray(b, dtype=np.float64)
    return DCT @ b @ DCT.T


def idct_block(c):
    c = np.asarray(c, dtype=np.float64)
    return DCT.T @ c @ DCT


def quantize_block(c, table):
    return round_half_away(np.asarray(c, dtype=np.float64) / table).astype(np.int64)


def dequantize_block(qc, table):
    return np.asarray(qc, dtype=np.int64) * table


def _zigzag_order() -> np.ndarray:
    # walk anti-diagonals, alternating direction
    cells = sorted(
        ((r, c) for r in range(8) for c in range(8)),
        key=lambda rc: (rc[0] + rc[1], rc[1] if (rc[0] + rc[1]) % 2 == 0 else rc[0]),
    )
    return np.array([r * 8 + c for r, c in cells])


ZIGZAG = _zigzag_order()
UNZIGZAG = np.argsort(ZIGZAG)


def zigzag(b):
    """Flatten (..., 8, 8) blocks into (..., 64) vectors in zigzag scan order."""
    b = np.asarray(b)
    return b.reshape(b.shape[:-2] + (64,))[..., ZIGZAG]


def inverse_zigzag(v):
    v = np.asarray(v)
    return v[..., UNZIGZAG].reshape(v.shape[:-1] + (8, 8))


# ---------------------------------------------------------------- huffman


class _Huffman:
    def __init__(self, spec):
        counts, values = spec
        codes = {}
        code = 0
        k = 0
        for length, n in enumerate(counts, start=1):
            for _ in range(n):
                codes[values[k]] = (code, length)
                code += 1
                k += 1
            code <<= 1
        self.codes = codes
        self.code = np.zeros(256, dtype=np.int64)
        self.length = np.zeros(256, dtype=np.int64)
        lut_sym = np.zeros(1 << 16, dtype=np.int64)
        lut_len = np.zeros(1 << 16, dtype=np.int64)
        for sym, (c, n) in codes.items():
            self.code[sym] = c
            self.length[sym] = n
            lo = c << (16 - n)
            hi = (c + 1) << (16 - n)
            lut_sym[lo:hi] = sym
            lut_len[lo:hi] = n
        self.lut_sym = lut_sym.tolist()
        self.lut_len = lut_len.tolist()


_HUFF = {
    LUMA: (_Huffman(_tables.LUMA_DC), _Huffman(_tables.LUMA_AC)),
    CHROMA: (_Huffman(_tables.CHROMA_DC), _Huffman(_tables.CHROMA_AC)),
}


def _size_category(v):
    """Bit length of |v| (0 for v == 0)."""
    return np.frexp(np.abs(v).astype(np.float64))[1].astype(np.int64)


def _amplitude_bits(v, size):
    return np.where(v >= 0, v, v + (np.int64(1) << size) - 1)


def _pack_bits(values, lengths) -> bytes:
    """Concatenate MSB-first bit fields; pad the last byte with 1-bits."""
    values = np.asarray(values, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    total = int(lengths.sum())
    if total == 0:
        return b""
    owner = np.repeat(np.arange(len(values)), lengths)
    starts = np.cumsum(lengths) - lengths
    within = np.arange(total) - starts[owner]
    bits = (values[owner] >> (lengths[owner] - 1 - within)) & 1
    pad = (-total) % 8
    if pad:
        bits = np.concatenate([bits, np.ones(pad, dtype=np.int64)])
    return np.packbits(bits.astype(np.uint8)).tobytes()


def entropy_encode(blocks, component: str = LUMA) -> bytes:
    """Huffman-code zigzagged quantized blocks of shape (n, 64).

    DC values are DPCM coded against the previous block (first predictor 0);
    AC values use run/size symbols with ZRL (0xF0) and EOB (0x00).
    """
    dc_table, ac_table = _HUFF[component]
    blocks = np.asarray(blocks, dtype=np.int64).reshape(-1, 64)
    n = len(blocks)
    if n == 0:
        return b""
    if np.abs(blocks[:, 1:]).max(initial=0) > _MAX_AC:
        raise ValueError("AC coefficient out of baseline range")
    diff = np.diff(blocks[:, 0], prepend=0)
    if np.abs(diff).max() > _MAX_DC:
        raise ValueError("DC difference out of baseline range")

    # every event: (sort key, code|amplitude value, bit length)
    keys, vals, lens = [], [], []

    size = _size_category(diff)
    keys.append(np.arange(n) * 1024)
    vals.append((dc_table.code[size] << size) | _amplitude_bits(diff, size))
    lens.append(dc_table.length[size] + size)

    bi, pi = np.nonzero(blocks[:, 1:])
    k = pi + 1
    first = np.ones(len(bi), dtype=bool)
    first[1:] = bi[1:] != bi[:-1]
    prev = np.where(first, 0, np.concatenate([[0], k[:-1]]))
    run = k - prev - 1
    nzrl = run // 16
    v = blocks[bi, k]
    size = _size_category(v)
    sym = ((run % 16) << 4) | size
    keys.append(bi * 1024 + k * 8 + 4)
    vals.append((ac_table.code[sym] << size) | _amplitude_bits(v, size))
    lens.append(ac_table.length[sym] + size)

    for j in range(3):
        sel = nzrl > j
        keys.append(bi[sel] * 1024 + k[sel] * 8 + j)
        vals.append(np.full(sel.sum(), ac_table.code[0xF0]))
        lens.append(np.full(sel.sum(), ac_table.length[0xF0]))

    last = np.zeros(n, dtype=np.int64)
    np.maximum.at(last, bi, k)
    eob = np.nonzero(last < 63)[0]
    keys.append(eob * 1024 + 64 * 8)
    vals.append(np.full(len(eob), ac_table.code[0x00]))
    lens.append(np.full(len(eob), ac_table.length[0x00]))

    order = np.argsort(np.concatenate(keys), kind="stable")
    return _pack_bits(np.concatenate(vals)[order], np.concatenate(lens)[order])


def _peek_table(data: bytes) -> list:
    """For every bit offset, the next 16 bits of the stream (1-padded)."""
    buf = np.frombuffer(data + b"\xff" * 5, dtype=np.uint8).astype(np.int64)
    pos = np.arange(len(data) * 8 + 16)
    idx = pos >> 3
    word = (buf[idx] << 16) | (buf[idx + 1] << 8) | buf[idx + 2]
    return ((word >> (8 - (pos & 7))) & 0xFFFF).tolist()


def entropy_decode(data: bytes, nblocks: int, component: str = LUMA) -> np.ndarray:
    """Exact inverse of :func:`entropy_encode`; returns (nblocks, 64) int64."""
    dc_table, ac_table = _HUFF[component]
    peek = _peek_table(bytes(data))
    nbits = len(data) * 8
    dc_sym, dc_len = dc_table.lut_sym, dc_table.lut_len
    ac_sym, ac_len = ac_table.lut_sym, ac_table.lut_len
    out = [0] * (nblocks * 64)
    p = 0
    pred = 0
    for b in range(nblocks):
        if p >= nbits:
            raise CorruptStreamError("stream ended early", b)
        w = peek[p]
        n = dc_len[w]
        if n == 0:
            raise CorruptStreamError("invalid DC code", b)
        s = dc_sym[w]
        p += n
        if s:
            a = peek[p] >> (16 - s)
            p += s
            if a < (1 << (s - 1)):
                a -= (1 << s) - 1
            pred += a
        base = b * 64
        out[base] = pred
        k = 1
        while k < 64:
            w = peek[p]
            n = ac_len[w]
            if n == 0:
                raise CorruptStreamError("invalid AC code", b)
            rs = ac_sym[w]
            p += n
            s = rs & 15
            if s == 0:
                if rs == 0x00:
                    break
                if rs != 0xF0:
                    raise CorruptStreamError(f"invalid AC symbol {rs:#04x}", b)
                k += 16
                if k > 63:
                    raise CorruptStreamError("zero run past end of block", b)
                continue
            k += rs >> 4
            if k > 63:
                raise CorruptStreamError("run past end of block", b)
            a = peek[p] >> (16 - s)
            p += s
            if a < (1 << (s - 1)):
                a -= (1 << s) - 1
            out[base + k] = a
            k += 1
        if p > nbits:
            raise CorruptStreamError("stream ended inside block", b)
    if nbits - p >= 8:
        raise CodecError(f"{(nbits - p) // 8} trailing bytes after last block")
    return np.array(out, dtype=np.int64).reshape(nblocks, 64)


# ---------------------------------------------------------------- planes


def _pad_to(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = h - plane.shape[0], w - plane.shape[1]
    if ph == 0 and pw == 0:
        return plane
    return np.pad(plane, ((0, ph), (0, pw)), mode="edge")


def _ceil8(n: int) -> int:
    return -(-n // 8) * 8


def subsample_420(plane: np.ndarray) -> np.ndarray:
    """2x2 box average (edge-replicated to even size), rounded half away."""
    h, w = plane.shape
    p = _pad_to(plane, h + h % 2, w + w % 2).astype(np.float64)
    avg = (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2]) / 4
    return round_half_away(avg).astype(np.uint8)


def upsample_420(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)[:h, :w]


def _plane_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    p = _pad_to(plane, _ceil8(h), _ceil8(w))
    H, W = p.shape
    return p.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)


def _blocks_plane(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = _ceil8(h), _ceil8(w)
    return blocks.reshape(H // 8, W // 8, 8, 8).transpose(0, 2, 1, 3).reshape(H, W)[:h, :w]


def encode_plane(plane: np.ndarray, table: np.ndarray, component: str) -> bytes:
    blocks = _plane_blocks(plane).astype(np.float64) - 128.0
    qc = quantize_block(fdct_block(blocks), table)
    qc[:, 1:, :] = np.clip(qc[:, 1:, :], -_MAX_AC, _MAX_AC)
    qc[:, 0, 1:] = np.clip(qc[:, 0, 1:], -_MAX_AC, _MAX_AC)
    return entropy_encode(zigzag(qc), component)


def decode_plane(data: bytes, h: int, w: int, table: np.ndarray, component: str) -> np.ndarray:
    nblocks = (_ceil8(h) // 8) * (_ceil8(w) // 8)
    qc = inverse_zigzag(entropy_decode(data, nblocks, component))
    spatial = idct_block(dequantize_block(qc, table).astype(np.float64)) + 128.0
    spatial = np.clip(round_half_away(spatial), 0, 255).astype(np.uint8)
    return _blocks_plane(spatial, h, w)


# ---------------------------------------------------------------- container


@dataclass(frozen=True)
class Header:
    variant: int
    scale: int
    quality: int
    subsample: bool
    colorspace: str
    width: int
    height: int

    @property
    def ncomponents(self) -> int:
        return 1 if self.colorspace == GRAY else 3

    def plane_sizes(self):
        h, w = self.height, self.width
        sizes = [(h, w)]
        if self.ncomponents == 3:
            c = ((h + 1) // 2, (w + 1) // 2) if self.subsample else (h, w)
            sizes += [c, c]
        return sizes


def encode(img: Image, q: int, subsample: bool = True, *, variant: int = 0, scale: int = 1) -> bytes:
    """Compress a u8 RGB or Gray image into a MIOT bitstream."""
    if img.depth != U8 or img.colorspace not in (RGB, GRAY):
        raise ValueError("encode expects a u8 RGB or Gray image")
    if img.width == 0 or img.height == 0:
        raise ValueError("cannot encode an empty image")
    if img.width > 0xFFFF or img.height > 0xFFFF:
        raise ValueError("image dimensions exceed 65535")
    if variant not in (0, 1) or scale not in (1, 4):
        raise ValueError("variant must be 0/1 and scale 1/4")
    tables = quality_to_tables(q)
    out = [
        _HEADER.pack(
            MAGIC, VERSION, variant, scale, q, int(bool(subsample)),
            _COLORSPACE_CODES[img.colorspace], img.width, img.height,
        )
    ]
    if img.colorspace == GRAY:
        planes = [(img.planes[0], tables.luma, LUMA)]
    else:
        y, cb, cr = rgb_to_ycbcr(img).planes
        if subsample:
            cb, cr = subsample_420(cb), subsample_420(cr)
        planes = [(y, tables.luma, LUMA), (cb, tables.chroma, CHROMA), (cr, tables.chroma, CHROMA)]
    for plane, table, comp in planes:
        payload = encode_plane(plane, table, comp)
        out.append(_SECTION.pack(len(payload)))
        out.append(payload)
    return b"".join(out)


def parse_header(bs: bytes) -> Header:
    if len(bs) < _HEADER.size:
        raise CodecError(f"bitstream shorter than header ({len(bs)} bytes)")
    magic, version, variant, scale, q, sub, cs, w, h = _HEADER.unpack_from(bs)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    if variant not in (0, 1) or scale not in (1, 4):
        raise CodecError(f"bad variant/scale {variant}/{scale}")
    if not 1 <= q <= 100:
        raise CodecError(f"bad quality {q}")
    if sub not in (0, 1):
        raise CodecError(f"bad subsample flag {sub}")
    if cs not in _COLORSPACE_NAMES:
        raise CodecError(f"bad colorspace code {cs}")
    if w == 0 or h == 0:
        raise CodecError("zero image dimension")
    return Header(variant, scale, q, bool(sub), _COLORSPACE_NAMES[cs], w, h)


def sections(bs: bytes):
    """Split a bitstream into (header, [payload per component])."""
    header = parse_header(bs)
    pos = _HEADER.size
    payloads = []
    for i in range(header.ncomponents):
        if pos + _SECTION.size > len(bs):
            raise CodecError(f"missing section header for component {i}")
        (n,) = _SECTION.unpack_from(bs, pos)
        pos += _SECTION.size
        if pos + n > len(bs):
            raise CodecError(f"component {i} payload truncated: need {n}, have {len(bs) - pos}")
        payloads.append(bytes(bs[pos : pos + n]))
        pos += n
    if pos != len(bs):
        raise CodecError(f"{len(bs) - pos} unexpected bytes after last section")
    return header, payloads


def decode(bs: bytes) -> Image:
    header, payloads = sections(bs)
    tables = quality_to_tables(header.quality)
    sizes = header.plane_sizes()
    if header.colorspace == GRAY:
        y = decode_plane(payloads[0], *sizes[0], tables.luma, LUMA)
        return Image(y[None], GRAY)
    y = decode_plane(payloads[0], *sizes[0], tables.luma, LUMA)
    cb = decode_plane(payloads[1], *sizes[1], tables.chroma, CHROMA)
    cr = decode_plane(payloads[2], *sizes[2], tables.chroma, CHROMA)
    if header.subsample:
        cb = upsample_420(cb, header.height, header.width)
        cr = upsample_420(cr, header.height, header.width)
    return ycbcr_to_rgb(Image(np.stack([y, cb, cr]), YCBCR))


def roundtrip(img: Image, q: int, subsample: bool = True) -> tuple[Image, int]:
    """Decode(encode(img)) together with the compressed size in bytes."""
    bs = encode(img, q, subsample)
    return decode(bs), len(bs)
