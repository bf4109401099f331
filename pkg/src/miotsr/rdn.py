"""Residual dense network: parameters, forward pass, training and weight files.

Layout of the network (all convolutions 3x3 unless noted)::

    x -> sfe1 -> F_-1 -> sfe2 -> F_0
      -> D x RDB [C x (conv + ReLU, concatenated), 1x1 fusion, + block input]
      -> concat of all RDB outputs -> 1x1 gff1 -> gff2 -> + F_-1
      -> upsampler (conv to G0*r*r channels + pixel shuffle; absent at scale 1)
      -> out (3 channels)

With ``residual=True`` the network predicts a correction that is added to
the (bicubically upscaled) input instead of the full image.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import decode, encode
from .imageio import UNIT, Image, load, save
from .resample import SourceTooSmall, downscale, random_resize_crop, weight_matrix

log = logging.getLogger(__name__)

QUALITIES = {1: (1, 5, 10, 15, 20, 25), 2: (10, 20, 30, 40, 50, 60)}
SCALE = {1: 1, 2: 4}
MIN_SIDE = 16
HELDOUT_FRACTION = 0.1


class ModelError(ValueError):
    """Invalid configuration, parameters or weights file."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, batch_ids):
        super().__init__(f"non-finite loss at step {step} (lr={lr:g}, batch ids {list(batch_ids)})")
        self.step = step
        self.lr = lr
        self.batch_ids = list(batch_ids)


@dataclass(frozen=True)
class RdnConfig:
    D: int = 4
    C: int = 8
    G: int = 16
    G0: int = 32
    scale: int = 1
    channels: int = 3
    up_stages: int = 1  # 1: one x4 shuffle, 2: two x2 shuffles
    residual: bool = False

    def __post_init__(self):
        for name in ("D", "C", "G", "G0"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.scale not in (1, 4):
            raise ModelError(f"scale must be 1 or 4, got {self.scale}")
        if self.channels != 3:
            raise ModelError("the network maps 3 channels to 3 channels")
        if self.up_stages not in (1, 2):
            raise ModelError("up_stages must be 1 or 2")

    @classmethod
    def for_variant(cls, variant: int, **kw) -> "RdnConfig":
        return cls(scale=SCALE[variant], **kw)

    def layers(self) -> list:
        """(name, in_channels, out_channels, kernel) for every convolution, in file order."""
        D, C, G, G0 = self.D, self.C, self.G, self.G0
        out = [("sfe1", self.channels, G0, 3), ("sfe2", G0, G0, 3)]
        for d in range(D):
            for c in range(C):
                out.append((f"rdb{d}.conv{c}", G0 + c * G, G, 3))
            out.append((f"rdb{d}.lff", G0 + C * G, G0, 1))
        out += [("gff1", D * G0, G0, 1), ("gff2", G0, G0, 3)]
        for i, r in enumerate(self.up_factors()):
            out.append((f"up{i}", G0, G0 * r * r, 3))
        out.append(("out", G0, self.channels, 3))
        return out

    def up_factors(self) -> tuple:
        if self.scale == 1:
            return ()
        return (4,) if self.up_stages == 1 else (2, 2)


class RdnParams:
    """Named weight/bias tensors of one network plus its config."""

    def __init__(self, cfg: RdnConfig, tensors: dict):
        self.cfg = cfg
        self.tensors = dict(tensors)
        expected = {}
        for name, cin, cout, k in cfg.layers():
            expected[name + ".w"] = (cout, cin, k, k)
            expected[name + ".b"] = (cout,)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ModelError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ModelError(f"{name}: shape {self.tensors[name].shape}, config needs {shape}")

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return [f"{n}.{s}" for n, *_ in self.cfg.layers() for s in ("w", "b")]

    def parameters(self) -> list:
        return [self.tensors[n] for n in self.names()]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "RdnParams":
        return RdnParams(self.cfg, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    def __eq__(self, other):
        if not isinstance(other, RdnParams) or self.cfg != other.cfg:
            return NotImplemented if not isinstance(other, RdnParams) else False
        return all(
            self.tensors[k].data.dtype == other.tensors[k].data.dtype
            and np.array_equal(self.tensors[k].data, other.tensors[k].data)
            for k in self.tensors
        )

    def __repr__(self):
        return f"RdnParams({self.cfg}, {self.count()} values)"


def init_params(cfg: RdnConfig, seed: int = 0, dtype=np.float32) -> RdnParams:
    """He-normal weights (std sqrt(2/fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, cin, cout, k in cfg.layers():
        std = math.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype)
        tensors[name + ".w"] = Tensor(w, requires_grad=True)
        tensors[name + ".b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return RdnParams(cfg, tensors)


# ---------------------------------------------------------------- forward


def _conv(p: RdnParams, name: str, x):
    return ad.conv2d(x, p[name + ".w"], p[name + ".b"])


def rdb(p: RdnParams, d: int, x):
    feats = x
    for c in range(p.cfg.C):
        grown = ad.relu(_conv(p, f"rdb{d}.conv{c}", feats))
        feats = ad.concat_channels([feats, grown])
    return ad.add(_conv(p, f"rdb{d}.lff", feats), x)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Image):
        x = x.to_unit().planes
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def upsample_bicubic_array(x: np.ndarray, r: int) -> np.ndarray:
    """Bicubic x``r`` upscaling of (..., H, W) float arrays, no clamping."""
    h, w = x.shape[-2:]
    my = weight_matrix(h, h * r).astype(x.dtype)
    mx = weight_matrix(w, w * r).astype(x.dtype)
    return np.einsum("oh,...hw,pw->...op", my, x, mx, optimize=True)


def forward(p: RdnParams, x, grl: bool = True) -> Tensor:
    """Run the network on (3,h,w) / (N,3,h,w) data or a unit-float Image.

    Output has spatial size scale*(h, w) and is not clamped.
    """
    cfg = p.cfg
    dtype = p["out.w"].data.dtype
    x = _as_input(x, dtype)
    if x.data.ndim not in (3, 4) or x.shape[-3] != cfg.channels:
        raise ModelError(f"input must be ({cfg.channels},h,w) or (n,{cfg.channels},h,w), got {x.shape}")
    if min(x.shape[-2:]) < MIN_SIDE:
        raise ModelError(f"input spatial size {x.shape[-2:]} is below {MIN_SIDE}")
    f_minus1 = _conv(p, "sfe1", x)
    f = _conv(p, "sfe2", f_minus1)
    outs = []
    for d in range(cfg.D):
        f = rdb(p, d, f)
        outs.append(f)
    fused = ad.concat_channels(outs) if len(outs) > 1 else outs[0]
    g = _conv(p, "gff2", _conv(p, "gff1", fused))
    if grl:
        g = ad.add(g, f_minus1)
    for i, r in enumerate(cfg.up_factors()):
        g = ad.pixel_shuffle(_conv(p, f"up{i}", g), r)
    y = _conv(p, "out", g)
    if cfg.residual:
        base = x.data if cfg.scale == 1 else upsample_bicubic_array(x.data, cfg.scale)
        y = ad.add(y, Tensor(base.astype(dtype)))
    return y


def restore(p: RdnParams, img: Image) -> Image:
    """Inference on one image; output is clamped and quantized to u8."""
    with ad.no_grad():
        out = forward(p, img.to_unit()).data
    return Image(np.clip(out, 0.0, 1.0).astype(np.float64), depth=UNIT).to_u8()


# ---------------------------------------------------------------- data


@dataclass
class TrainPlan:
    variant: int = 1
    steps: int = 500
    batch: int = 16
    patch: int = 96
    qualities: tuple = ()
    seed: int = 0
    lr: float = 1e-4
    loss: str = "l1"
    log_every: int = 50
    micro_batch: int = 4  # samples per forward/backward graph; gradients are summed

    def __post_init__(self):
        if self.variant not in (1, 2):
            raise ValueError(f"variant must be 1 or 2, got {self.variant}")
        if not self.qualities:
            self.qualities = QUALITIES[self.variant]
        self.qualities = tuple(int(q) for q in self.qualities)
        if any(not 1 <= q <= 100 for q in self.qualities):
            raise ValueError(f"qualities must lie in 1..100: {self.qualities}")
        if self.patch % self.scale or self.patch // self.scale < MIN_SIDE:
            raise ValueError(f"patch {self.patch} must be a multiple of {self.scale} and give inputs >= {MIN_SIDE}")
        if self.steps < 0 or self.batch < 1 or self.micro_batch < 1:
            raise ValueError("steps >= 0, batch >= 1 and micro_batch >= 1 required")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be l1 or l2, got {self.loss!r}")

    @property
    def scale(self) -> int:
        return SCALE[self.variant]


@dataclass
class RestorationSample:
    """``input`` = ``clean`` + ``noise``; ``target`` is ``clean`` at full resolution."""

    input: np.ndarray
    target: np.ndarray
    clean: np.ndarray
    quality: int

    @property
    def noise(self) -> np.ndarray:
        return self.input - self.clean


def degrade(img: Image, variant: int, q: int) -> Image:
    """What the server receives: decode(encode(img)) or the x4-downscaled equivalent."""
    src = downscale(img, 4) if variant == 2 else img
    return decode(encode(src, q, variant=variant - 1, scale=SCALE[variant]))


def make_training_pair(src: Image, plan: TrainPlan, rng: np.random.Generator) -> RestorationSample:
    p = plan.patch
    if p > src.width or p > src.height:
        raise ValueError(f"patch {p} larger than source {src.width}x{src.height}")
    y0 = int(rng.integers(0, src.height - p + 1))
    x0 = int(rng.integers(0, src.width - p + 1))
    q = int(rng.choice(plan.qualities))
    patch = Image(src.to_u8().planes[:, y0 : y0 + p, x0 : x0 + p])
    clean = downscale(patch, 4) if plan.variant == 2 else patch
    received = decode(encode(clean, q, variant=plan.variant - 1, scale=plan.scale))
    return RestorationSample(
        input=received.to_unit().planes,
        target=patch.to_unit().planes,
        clean=clean.to_unit().planes,
        quality=q,
    )


def split_dataset(items: list) -> tuple:
    """(train, held-out): the last 10% (at least one item) is held out."""
    n = len(items)
    if n < 2:
        raise ValueError("need at least two images to hold one out")
    hold = max(1, int(round(n * HELDOUT_FRACTION)))
    return items[: n - hold], items[n - hold :]


def prepare_dataset(sources, out_dir, seed: int = 0) -> dict:
    """Resize/crop each ``(name, Image)`` source into ``out_dir`` as PPM.

    Sources that are too small are skipped and reported, not fatal.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed)
    written, skipped = [], []
    for name, img in sources:
        child = int(seeds.spawn(1)[0].generate_state(1)[0])
        try:
            crop = random_resize_crop(img, child)
        except SourceTooSmall as e:
            log.warning("skipping %s: %s", name, e)
            skipped.append((name, str(e)))
            continue
        path = out / f"{name}.ppm"
        save(crop, path)
        written.append(path.name)
    return {"written": written, "skipped": skipped}


def load_dataset(path) -> list:
    """``(stem, Image)`` pairs for every .ppm/.pgm in ``path``, sorted by filename."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    return [(p.stem, load(p)) for p in files]


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: RdnParams
    losses: list = field(default_factory=list)

    def window_means(self, k: int = 50) -> tuple:
        """Mean loss of the first and last ``k`` steps."""
        return float(np.mean(self.losses[:k])), float(np.mean(self.losses[-k:]))


def _loss_fn(name):
    return ad.l1_loss if name == "l1" else ad.l2_loss


def train(cfg: RdnConfig, plan: TrainPlan, dataset, params: RdnParams | None = None, callback=None) -> TrainResult:
    """Mini-batch Adam training; ``dataset`` is a list of Images (training split only).

    ``callback(step, loss)`` is called every ``plan.log_every`` steps.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if cfg.scale != plan.scale:
        raise ModelError(f"config scale {cfg.scale} does not match variant {plan.variant}")
    images = [img if isinstance(img, Image) else img[1] for img in dataset]
    params = params if params is not None else init_params(cfg, plan.seed)
    weights = params.parameters()
    opt = ad.Adam(weights, lr=plan.lr)
    rng = np.random.default_rng(plan.seed)
    loss_fn = _loss_fn(plan.loss)
    dtype = weights[0].data.dtype
    losses = []
    for step in range(plan.steps):
        ids = rng.integers(0, len(images), plan.batch)
        samples = [make_training_pair(images[i], plan, rng) for i in ids]
        opt.zero_grad()
        total = 0.0
        for start in range(0, plan.batch, plan.micro_batch):
            chunk = samples[start : start + plan.micro_batch]
            x = np.stack([s.input for s in chunk]).astype(dtype)
            y = np.stack([s.target for s in chunk]).astype(dtype)
            loss = loss_fn(forward(params, x), y)
            share = len(chunk) / plan.batch
            total += float(loss.data) * share
            ad.mul(loss, np.asarray(share, dtype=dtype)).backward()
        if not math.isfinite(total):
            raise TrainingDiverged(step, plan.lr, ids.tolist())
        opt.step()
        losses.append(total)
        if plan.log_every and (step % plan.log_every == 0 or step == plan.steps - 1):
            log.info("step %d loss %.5f", step, total)
            if callback is not None:
                callback(step, total)
    return TrainResult(params, losses)


# ---------------------------------------------------------------- weights file

_MAGIC = b"RDNW"
_VERSION = 1
_CFG = struct.Struct("<4sB6H")


def save_weights(p: RdnParams) -> bytes:
    cfg = p.cfg
    out = [_CFG.pack(_MAGIC, _VERSION, cfg.D, cfg.C, cfg.G, cfg.G0, cfg.scale, cfg.channels)]
    for name in p.names():
        arr = np.ascontiguousarray(p[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def load_weights(data: bytes, expect: RdnConfig | None = None, residual: bool = False) -> RdnParams:
    """Parse a weights file. If ``expect`` is given the embedded config must match it.

    The file stores D, C, G, G0, scale and channels; the number of
    upsampling stages is inferred from the layer names and ``residual`` (not
    stored) is taken from ``expect`` or the argument.
    """
    if len(data) < _CFG.size:
        raise ModelError("weights file shorter than its header")
    magic, version, D, C, G, G0, scale, channels = _CFG.unpack_from(data, 0)
    if magic != _MAGIC:
        raise ModelError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ModelError(f"unsupported weights version {version}")
    pos = _CFG.size
    tensors = {}
    name = "<header>"
    while pos < len(data):
        prev = name
        try:
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + n > len(data):
                raise ModelError(
                    f"record after layer {prev!r}: name length {n} at offset {pos - 2} runs past the end of the file"
                )
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
        except (struct.error, UnicodeDecodeError) as e:
            raise ModelError(f"truncated or corrupt record after layer {prev!r}: {e}") from None
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > len(data):
            raise ModelError(f"layer {name!r}: declared shape {dims} needs {nbytes} bytes, only {len(data) - pos} left")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
        if name in tensors:
            raise ModelError(f"layer {name!r} appears twice")
        tensors[name] = Tensor(arr, requires_grad=True)
    up_stages = 2 if "up1.w" in tensors else 1
    if expect is not None:
        residual = expect.residual
    try:
        cfg = RdnConfig(D, C, G, G0, scale, channels, up_stages=up_stages, residual=residual)
    except ModelError as e:
        raise ModelError(f"weights file config invalid: {e}") from None
    if expect is not None and replace(expect, residual=cfg.residual) != cfg:
        raise ModelError(f"weights were saved for {cfg}, expected {expect}")
    return RdnParams(cfg, tensors)


def save_weights_file(p: RdnParams, path) -> None:
    Path(path).write_bytes(save_weights(p))


def load_weights_file(path, expect: RdnConfig | None = None, residual: bool = False) -> RdnParams:
    return load_weights(Path(path).read_bytes(), expect, residual)
