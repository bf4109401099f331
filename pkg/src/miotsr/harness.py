"""End-to-end pipelines, quality sweeps, the radio energy model and reports."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .codec import decode, encode
from .imageio import Image
from .rdn import RdnParams, restore
from .resample import A as CUBIC_A
from .resample import downscale, upscale_bicubic

PAIRED_QUALITIES = ((1, 10), (5, 20), (10, 30), (15, 40), (20, 50), (25, 60), (30, 70))
RATE_GRID = (1,) + tuple(range(5, 101, 5))
MEAN_ID = "__mean__"
RATIO_ORIENTATION = "bytes(variant 2, with x4 down-scaling) / bytes(variant 1, without down-scaling)"
DIFF_ORIENTATION = "variant 1 metric minus variant 2 metric"

CSV_COLUMNS = (
    "image_id",
    "variant",
    "quality",
    "bytes",
    "ssim_degraded",
    "psnr_degraded",
    "ssim_restored",
    "psnr_restored",
    "energy_j",
)
PAIRED_COLUMNS = (
    "quality_v1",
    "quality_v2",
    "ssim_diff_degraded",
    "psnr_diff_degraded",
    "ssim_diff_restored",
    "psnr_diff_restored",
    "bytes_v1",
    "bytes_v2",
    "size_ratio",
    "energy_ratio",
)


class PipelineError(RuntimeError):
    def __init__(self, image_id, cause: Exception):
        super().__init__(f"{image_id}: {cause}")
        self.image_id = image_id
        self.cause = cause


# ---------------------------------------------------------------- energy


@dataclass(frozen=True)
class RadioModel:
    """First-order radio: E = bits * (e_elec + e_amp * d**gamma)."""

    e_elec: float = 50e-9
    e_amp: float = 100e-12
    d: float = 50.0
    gamma: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"radio parameter {f.name} must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "RadioModel":
        """From ``"e_elec,e_amp,d,gamma"``."""
        parts = [p for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"--radio expects e_elec,e_amp,d,gamma; got {text!r}")
        return cls(*(float(p) for p in parts))

    def joules_per_bit(self) -> float:
        return self.e_elec + self.e_amp * self.d**self.gamma


def energy(nbytes: int, rm: RadioModel = RadioModel()) -> float:
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    return 8 * nbytes * rm.joules_per_bit()


# ---------------------------------------------------------------- pipelines


@dataclass
class PipelineResult:
    image_id: str
    variant: int
    quality: int
    bytes: int
    ssim_degraded: float
    psnr_degraded: float
    ssim_restored: float | None = None
    psnr_restored: float | None = None
    energy_j: float = 0.0


def _scores(ref: Image, img: Image):
    return metrics.ssim(ref, img), metrics.psnr(ref, img)


def pad_to_multiple(img: Image, r: int) -> Image:
    h, w = img.height, img.width
    ph, pw = -h % r, -w % r
    if not ph and not pw:
        return img
    planes = np.pad(img.planes, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return Image(planes, img.colorspace, img.depth)


def crop(img: Image, width: int, height: int) -> Image:
    return Image(img.planes[:, :height, :width], img.colorspace, img.depth)


def _check_model(params, scale):
    if params is not None and params.cfg.scale != scale:
        raise ValueError(f"model has scale {params.cfg.scale}, pipeline needs {scale}")


def run_variant1(img: Image, q: int, params: RdnParams | None, image_id="", radio=RadioModel()) -> PipelineResult:
    """Compress at full resolution, decompress, restore. ``params=None`` skips restoration."""
    try:
        _check_model(params, 1)
        bs = encode(img, q, variant=0, scale=1)
        received = decode(bs)
        res = PipelineResult(image_id, 1, q, len(bs), *_scores(img, received), energy_j=energy(len(bs), radio))
        if params is not None:
            res.ssim_restored, res.psnr_restored = _scores(img, restore(params, received))
        return res
    except Exception as e:
        raise PipelineError(image_id, e) from e


def run_variant2(img: Image, q: int, params: RdnParams | None, image_id="", radio=RadioModel()) -> PipelineResult:
    """Down-scale x4, compress, decompress, then up-scale (bicubic baseline) or super-resolve."""
    try:
        _check_model(params, 4)
        padded = pad_to_multiple(img, 4)
        bs = encode(downscale(padded, 4), q, variant=1, scale=4)
        received = decode(bs)
        baseline = crop(upscale_bicubic(received, 4), img.width, img.height)
        res = PipelineResult(image_id, 2, q, len(bs), *_scores(img, baseline), energy_j=energy(len(bs), radio))
        if params is not None:
            restored = crop(restore(params, received), img.width, img.height)
            res.ssim_restored, res.psnr_restored = _scores(img, restored)
        return res
    except Exception as e:
        raise PipelineError(image_id, e) from e


RUNNERS = {1: run_variant1, 2: run_variant2}


# ---------------------------------------------------------------- sweep


@dataclass
class SweepPlan:
    grid1: tuple = ()
    grid2: tuple = ()
    pairs: tuple = PAIRED_QUALITIES
    restore: bool = True
    seed: int = 0
    radio: RadioModel = RadioModel()
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.pairs = tuple((int(a), int(b)) for a, b in self.pairs)
        if not self.grid1:
            self.grid1 = tuple(a for a, _ in self.pairs)
        if not self.grid2:
            self.grid2 = tuple(b for _, b in self.pairs)
        self.grid1 = tuple(sorted({int(q) for q in self.grid1}))
        self.grid2 = tuple(sorted({int(q) for q in self.grid2}))
        if not self.grid1 and not self.grid2:
            raise ValueError("sweep needs at least one quality")
        for a, b in self.pairs:
            if a not in self.grid1 or b not in self.grid2:
                raise ValueError(f"pair ({a},{b}) is not covered by the quality grids")
        for q in self.grid1 + self.grid2:
            if not 1 <= q <= 100:
                raise ValueError(f"quality {q} outside 1..100")

    def grid(self, variant: int) -> tuple:
        return self.grid1 if variant == 1 else self.grid2


@dataclass
class SweepReport:
    rows: list
    aggregates: list
    paired: list
    metadata: dict = field(default_factory=dict)


def _mean(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def aggregate(rows) -> list:
    """Corpus means per (variant, quality)."""
    groups = {}
    for r in rows:
        groups.setdefault((r.variant, r.quality), []).append(r)
    out = []
    for (variant, q), rs in sorted(groups.items()):
        out.append(
            PipelineResult(
                MEAN_ID,
                variant,
                q,
                _mean([r.bytes for r in rs]),
                _mean([r.ssim_degraded for r in rs]),
                _mean([r.psnr_degraded for r in rs]),
                _mean([r.ssim_restored for r in rs]),
                _mean([r.psnr_restored for r in rs]),
                _mean([r.energy_j for r in rs]),
            )
        )
    return out


def _diff(a, b):
    return None if a is None or b is None else a - b


def paired_table(rows, pairs) -> list:
    """One variant-comparison row per quality pair; ratios are corpus means of per-image ratios."""
    by_key = {(r.image_id, r.variant, r.quality): r for r in rows}
    images = sorted({r.image_id for r in rows})
    out = []
    for q1, q2 in pairs:
        r1 = [by_key[(i, 1, q1)] for i in images]
        r2 = [by_key[(i, 2, q2)] for i in images]
        m1, m2 = aggregate(r1)[0], aggregate(r2)[0]
        ratios = [b.bytes / a.bytes for a, b in zip(r1, r2)]
        eratios = [b.energy_j / a.energy_j if a.energy_j else None for a, b in zip(r1, r2)]
        out.append(
            {
                "quality_v1": q1,
                "quality_v2": q2,
                "ssim_diff_degraded": _diff(m1.ssim_degraded, m2.ssim_degraded),
                "psnr_diff_degraded": _diff(m1.psnr_degraded, m2.psnr_degraded),
                "ssim_diff_restored": _diff(m1.ssim_restored, m2.ssim_restored),
                "psnr_diff_restored": _diff(m1.psnr_restored, m2.psnr_restored),
                "bytes_v1": m1.bytes,
                "bytes_v2": m2.bytes,
                "size_ratio": float(np.mean(ratios)),
                "energy_ratio": _mean(eratios),
            }
        )
    return out


def sweep(plan: SweepPlan, dataset, models: dict | None = None) -> SweepReport:
    """Run both pipelines over ``dataset`` (``(image_id, Image)`` pairs).

    ``models`` maps variant (1 or 2) to params. With ``plan.restore`` every
    variant that has a quality grid needs a model; this is checked up front.
    """
    models = models or {}
    variants = [v for v in (1, 2) if plan.grid(v)]
    if plan.restore:
        missing = [v for v in variants if models.get(v) is None]
        if missing:
            raise ValueError(f"no model for variant(s) {missing}; pass one or disable restoration")
        for v in variants:
            _check_model(models[v], 1 if v == 1 else 4)
    dataset = list(dataset)
    ids = [i for i, _ in dataset]
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")
    jobs = [(image_id, img, v, q) for image_id, img in dataset for v in variants for q in plan.grid(v)]

    def run(job):
        image_id, img, v, q = job
        return RUNNERS[v](img, q, models.get(v) if plan.restore else None, image_id, plan.radio)

    if plan.workers == 1:
        rows = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(plan.workers) as pool:
            rows = list(pool.map(run, jobs))
    rows.sort(key=lambda r: (r.image_id, r.variant, r.quality))
    pairs = [p for p in plan.pairs if 1 in variants and 2 in variants]
    meta = run_metadata(plan, models if plan.restore else {}, len(dataset))
    return SweepReport(rows, aggregate(rows), paired_table(rows, pairs), meta)


def run_metadata(plan: SweepPlan, models: dict, n_images: int) -> dict:
    return {
        "images": n_images,
        "seed": plan.seed,
        "codec": {
            "container": "MIOT v1",
            "color": "full-range BT.601 YCbCr",
            "chroma_subsampling": "4:2:0 box average",
            "quant_tables": "Annex-K base tables, libjpeg quality scaling",
            "entropy": "baseline Huffman, Annex-K typical tables",
        },
        "resample": {"filter": f"Catmull-Rom cubic a={CUBIC_A}", "downscale_factor": 4},
        "variant2_baseline": "bicubic x4 upscale of the decoded image",
        "metrics": metrics.CONVENTIONS,
        "radio": {**asdict(plan.radio), "note": "illustrative first-order radio model; only ratios are meaningful"},
        "size_ratio": RATIO_ORIENTATION,
        "differences": DIFF_ORIENTATION,
        "quality_grids": {"1": list(plan.grid1), "2": list(plan.grid2)},
        "pairs": [list(p) for p in plan.pairs],
        "models": {str(v): asdict(p.cfg) for v, p in sorted(models.items()) if p is not None},
    }


# ---------------------------------------------------------------- reports


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)  # "inf", "nan" and shortest round-trip repr
    return str(v)


def _parse_cell(text: str, column: str):
    if text == "":
        return None
    if column == "image_id":
        return text
    if column in ("variant", "quality", "quality_v1", "quality_v2"):
        return int(text)
    if column == "bytes":
        return int(text) if text.isdigit() else float(text)
    return float(text)


def _table_csv(columns, records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([_cell(rec[c]) for c in columns])
    return buf.getvalue()


def rows_csv(report: SweepReport) -> str:
    recs = [asdict(r) for r in report.rows + report.aggregates]
    return _table_csv(CSV_COLUMNS, recs)


def paired_csv(report: SweepReport) -> str:
    return _table_csv(PAIRED_COLUMNS, report.paired)


def parse_csv(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    return [{k: _parse_cell(v, k) for k, v in row.items()} for row in reader]


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def report_json(report: SweepReport) -> str:
    doc = {
        "metadata": report.metadata,
        "rows": [asdict(r) for r in report.rows],
        "aggregates": [asdict(r) for r in report.aggregates],
        "paired": report.paired,
    }
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


def _unjson(v):
    if v in ("inf", "-inf", "nan"):
        return float(v)
    return v


def load_report_json(text: str) -> SweepReport:
    doc = json.loads(text)

    def results(items):
        return [PipelineResult(**{k: _unjson(v) for k, v in it.items()}) for it in items]

    paired = [{k: _unjson(v) for k, v in p.items()} for p in doc["paired"]]
    return SweepReport(results(doc["rows"]), results(doc["aggregates"]), paired, doc["metadata"])


def emit_report(report: SweepReport, out_dir, fmt: str = "csv") -> list:
    """Write ``sweep.csv`` or ``sweep.json`` plus ``paired.csv`` (and metadata for CSV)."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if fmt == "csv":
        paths.append(out / "sweep.csv")
        paths[-1].write_text(rows_csv(report))
        paths.append(out / "metadata.json")
        paths[-1].write_text(json.dumps(_jsonable(report.metadata), indent=2, sort_keys=True) + "\n")
    else:
        paths.append(out / "sweep.json")
        paths[-1].write_text(report_json(report))
    paths.append(out / "paired.csv")
    paths[-1].write_text(paired_csv(report))
    return paths
