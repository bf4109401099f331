"""End-to-end acceptance run.

Every criterion records one PASS/FAIL line (shown in the terminal summary)
before asserting, so a failing criterion still reports its measurements.
The module trains both restoration models once, at the full budget, which
takes about 80 minutes on a single core.
"""

import time

import numpy as np
import pytest

from miotsr import autodiff as ad
from miotsr import codec, harness, rdn
from miotsr.autodiff import Tensor
from miotsr.imageio import GRAY, Image
from miotsr.rdn import RdnConfig, TrainPlan
from miotsr.synth import corpus, scene

from .oracles import finite_difference, max_rel_error

pytestmark = pytest.mark.slow

N_SOURCES = 200
SOURCE_SIZE = (512, 640)  # height, width; short side meets the 500px floor
CORPUS_SIZE = (192, 256)
N_CORPUS = 24
STEPS = 500
TRAIN_QUALITIES = (10,)


def record(log, n, name, ok, detail):
    line = f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'} - {detail}"
    log.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def sweep_corpus():
    return [(f"img{i:02d}", im) for i, im in enumerate(corpus(N_CORPUS, *CORPUS_SIZE, seed=2024))]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    """200 prepared 256x256 crops: (train split, held-out split)."""
    out = tmp_path_factory.mktemp("prepared")
    h, w = SOURCE_SIZE
    sources = ((f"src{i:03d}", scene(h, w, 10_000 + i)) for i in range(N_SOURCES))
    result = rdn.prepare_dataset(sources, out, seed=7)
    assert len(result["written"]) == N_SOURCES and not result["skipped"]
    train_items, held = rdn.split_dataset(rdn.load_dataset(out))
    return [img for _, img in train_items], held


@pytest.fixture(scope="module")
def trained(prepared):
    """Both variants trained once: variant -> (TrainResult, seconds)."""
    train_imgs, _ = prepared
    out = {}
    for v in (1, 2):
        cfg = RdnConfig.for_variant(v, D=4, C=8, G=16, G0=32)
        plan = TrainPlan(variant=v, steps=STEPS, batch=16, patch=96, qualities=TRAIN_QUALITIES, seed=v)
        t0 = time.perf_counter()
        res = rdn.train(cfg, plan, train_imgs, callback=lambda s, l: print(f"variant {v} step {s} loss {l:.4f}"))
        out[v] = (res, time.perf_counter() - t0)
    return out


# ---------------------------------------------------------------- 1


def test_criterion_1_codec(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)

    blocks = rng.uniform(-128, 127, (500, 8, 8))
    dct_err = float(np.abs(codec.idct_block(codec.fdct_block(blocks)) - blocks).max())

    quant_ok = True
    for q in (1, 10, 50, 90, 100):
        t = codec.quality_to_tables(q)
        for table in (t.luma, t.chroma):
            c = codec.fdct_block(blocks)
            back = codec.dequantize_block(codec.quantize_block(c, table), table)
            quant_ok &= bool(np.all(np.abs(back - c) <= table / 2 + 1e-9))

    entropy_ok = True
    for comp in (codec.LUMA, codec.CHROMA):
        zz = rng.integers(-1023, 1024, (40, 64)) * (rng.random((40, 64)) < 0.3)
        zz[:, 0] = rng.integers(-1023, 1024, 40)
        entropy_ok &= bool(np.array_equal(codec.entropy_decode(codec.entropy_encode(zz, comp), 40, comp), zz))

    container_ok = True
    for img in (scene(37, 53, 1), Image(rng.integers(0, 256, (1, 29, 41), dtype=np.uint8), GRAY)):
        for q in (5, 75):
            bs = codec.encode(img, q)
            header, payloads = codec.sections(bs)
            comps = [codec.LUMA, codec.CHROMA, codec.CHROMA][: header.ncomponents]
            for (h, w), payload, comp in zip(header.plane_sizes(), payloads, comps):
                n = -(-h // 8) * -(-w // 8)
                coefs = codec.entropy_decode(payload, n, comp)
                container_ok &= codec.entropy_encode(coefs, comp) == payload
            container_ok &= (header.width, header.height, header.quality) == (img.width, img.height, q)
            container_ok &= codec.decode(bs).planes.shape == img.planes.shape

    gray = Image(rng.integers(0, 256, (1, 64, 80), dtype=np.uint8), GRAY)
    gray_err = int(np.abs(codec.decode(codec.encode(gray, 100)).planes.astype(int) - gray.planes).max())

    secs = time.perf_counter() - t0
    ok = dct_err <= 1e-9 and quant_ok and entropy_ok and container_ok and gray_err <= 1 and secs < 60
    detail = (
        f"dct err {dct_err:.1e}, quant bound {quant_ok}, entropy {entropy_ok}, container {container_ok}, "
        f"q100 gray max err {gray_err}, {secs:.1f}s"
    )
    assert record(acceptance_log, 1, "codec correctness", ok, detail), detail


# ---------------------------------------------------------------- 2


def test_criterion_2_rate_monotonicity(acceptance_log, sweep_corpus):
    t0 = time.perf_counter()
    grid = harness.RATE_GRID
    rep = harness.sweep(harness.SweepPlan(grid1=grid, grid2=grid, pairs=(), restore=False), sweep_corpus)
    secs = time.perf_counter() - t0
    bad = []
    for v in (1, 2):
        agg = [a for a in rep.aggregates if a.variant == v]
        assert [a.quality for a in agg] == list(grid)
        for field in ("bytes", "ssim_degraded", "psnr_degraded"):
            vals = np.array([getattr(a, field) for a in agg])
            if np.any(np.diff(vals) < 0):
                bad.append(f"v{v} {field}")
    v1 = {a.quality: a for a in rep.aggregates if a.variant == 1}
    ok = not bad and secs < 300
    detail = (
        f"{len(rep.rows)} rows; v1 bytes {v1[1].bytes:.0f}->{v1[100].bytes:.0f}, "
        f"SSIM {v1[1].ssim_degraded:.3f}->{v1[100].ssim_degraded:.3f}; non-monotone: {bad or 'none'}, {secs:.1f}s"
    )
    assert record(acceptance_log, 2, "rate monotonicity", ok, detail), detail


# ---------------------------------------------------------------- 3


def _gradcheck(build, arrays, eps=1e-3, floor=1e-6):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    build(*leaves).backward()

    def f():
        with ad.no_grad():
            return float(build(*[Tensor(a) for a in arrays]).data)

    numeric = finite_difference(f, arrays, eps=eps)
    return max(max_rel_error(t.grad, n, floor) for t, n in zip(leaves, numeric))


def test_criterion_3_autodiff(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    wts = {s: r(*s) for s in [(2, 3, 5, 6), (2, 4, 5, 6), (2, 5, 5, 6), (1, 2, 6, 8)]}

    def ws(y):
        return ad.sum_all(ad.mul(y, Tensor(wts[y.shape])))

    kinked = rng.uniform(0.1, 1, (2, 3, 5, 6)) * rng.choice([-1, 1], (2, 3, 5, 6))
    ops = {
        "conv3x3": (lambda x, w, b: ws(ad.conv2d(x, w, b)), [r(2, 3, 5, 6), r(4, 3, 3, 3), r(4)]),
        "conv3x3 widen": (lambda x, w, b: ws(ad.conv2d(x, w, b)), [r(2, 3, 5, 6), r(5, 3, 3, 3), r(5)]),
        "conv1x1": (lambda x, w, b: ws(ad.conv2d(x, w, b)), [r(2, 5, 5, 6), r(3, 5, 1, 1), r(3)]),
        "relu": (lambda x: ws(ad.relu(x)), [kinked]),
        "add": (lambda a, b: ws(ad.add(a, b)), [r(2, 3, 5, 6), r(2, 3, 5, 6)]),
        "mul": (lambda a, b: ad.sum_all(ad.mul(a, b)), [r(2, 3, 5, 6), r(2, 3, 5, 6)]),
        "concat": (lambda a, b: ws(ad.concat_channels([a, b])), [r(2, 1, 5, 6), r(2, 2, 5, 6)]),
        "pixel_shuffle": (lambda x: ws(ad.pixel_shuffle(x, 2)), [r(1, 8, 3, 4)]),
        "l1": (lambda a: ad.l1_loss(a, np.full((2, 3, 5, 6), 0.3)), [kinked]),
        "l2": (lambda a: ad.l2_loss(a, np.full((2, 3, 5, 6), 0.3)), [r(2, 3, 5, 6)]),
    }
    errors = {name: _gradcheck(fn, arrays) for name, (fn, arrays) in ops.items()}
    worst_op = max(errors, key=errors.get)

    model_err = 0.0
    for scale in (1, 4):
        p32 = rdn.init_params(RdnConfig(D=2, C=2, G=4, G0=8, scale=scale), 5)
        arrays = {k: v.data.astype(np.float64) for k, v in p32.tensors.items()}
        for k in arrays:
            if k.endswith(".b"):
                arrays[k] = rng.normal(0, 0.1, arrays[k].shape)
        x = rng.random((3, 16, 16))
        target = rng.random((3, 16 * scale, 16 * scale))
        names = list(arrays)

        def build(*ts, cfg=p32.cfg, x=x, target=target, names=names):
            return ad.l2_loss(rdn.forward(rdn.RdnParams(cfg, dict(zip(names, ts))), Tensor(x)), target)

        leaves = [Tensor(arrays[k], requires_grad=True) for k in names]
        build(*leaves).backward()

        def f(names=names, build=build):
            with ad.no_grad():
                return float(build(*[Tensor(arrays[k]) for k in names]).data)

        # a few entries of every tensor; small steps avoid straddling ReLU kinks
        for name, leaf in zip(names, leaves):
            flat = arrays[name].reshape(-1)
            for i in rng.choice(flat.size, min(3, flat.size), replace=False):
                num = finite_difference(f, [flat[i : i + 1]], eps=1e-5)[0][0]
                model_err = max(model_err, max_rel_error(leaf.grad.reshape(-1)[i], num, floor=1e-5))

    secs = time.perf_counter() - t0
    ok = errors[worst_op] <= 1e-4 and model_err <= 1e-3 and secs < 120
    detail = f"worst op {worst_op} {errors[worst_op]:.1e}, whole model {model_err:.1e}, {secs:.1f}s"
    assert record(acceptance_log, 3, "autodiff", ok, detail), detail


# ---------------------------------------------------------------- 4


def test_criterion_4_training_descent(acceptance_log, trained):
    parts, ok = [], True
    for v, (res, secs) in trained.items():
        first, last = res.window_means(50)
        ratio = last / first
        ok &= ratio < 0.3 and secs <= 1800
        parts.append(f"v{v} loss {first:.3f}->{last:.4f} (ratio {ratio:.3f}) in {secs / 60:.1f} min")
    detail = "; ".join(parts)
    assert record(acceptance_log, 4, "training descent", ok, detail), detail


# ---------------------------------------------------------------- 5


def test_criterion_5_restoration_direction(acceptance_log, trained, prepared):
    _, held = prepared
    t0 = time.perf_counter()
    parts, ok = [], True
    for v, (res, _) in trained.items():
        rows = [harness.RUNNERS[v](img, TRAIN_QUALITIES[0], res.params, name) for name, img in held]
        base_ssim = np.mean([r.ssim_degraded for r in rows])
        rest_ssim = np.mean([r.ssim_restored for r in rows])
        gain = np.mean([r.psnr_restored - r.psnr_degraded for r in rows])
        ok &= rest_ssim >= base_ssim + 0.005 and gain >= 0.1
        parts.append(f"v{v} SSIM {base_ssim:.4f}->{rest_ssim:.4f}, PSNR gain {gain:+.2f} dB")
    secs = time.perf_counter() - t0
    ok &= secs <= 600
    detail = f"{len(held)} held-out crops; " + "; ".join(parts) + f"; {secs:.1f}s"
    assert record(acceptance_log, 5, "restoration direction", ok, detail), detail


# ---------------------------------------------------------------- 6


def test_criterion_6_size_reduction(acceptance_log, sweep_corpus):
    t0 = time.perf_counter()
    rep = harness.sweep(harness.SweepPlan(restore=False), sweep_corpus)
    secs = time.perf_counter() - t0
    sizes = {(r.image_id, r.variant, r.quality): r.bytes for r in rep.rows}
    per_image = [sizes[(i, 2, q2)] / sizes[(i, 1, q1)] for i, _ in sweep_corpus for q1, q2 in harness.PAIRED_QUALITIES]
    means = [p["size_ratio"] for p in rep.paired]
    ok = all(0.05 < m < 0.45 for m in means) and max(per_image) < 1 and secs < 300
    detail = (
        f"pair mean ratios {', '.join(f'{m:.3f}' for m in means)}; "
        f"overall {np.mean(means):.3f}; max per-image {max(per_image):.3f}; {secs:.1f}s"
    )
    assert record(acceptance_log, 6, "size reduction", ok, detail), detail


# ---------------------------------------------------------------- 7


def test_criterion_7_energy(acceptance_log, sweep_corpus):
    hand = harness.energy(1000, harness.RadioModel(50e-9, 100e-12, 50, 2))
    hand_ok = hand == pytest.approx(2.4e-3, rel=1e-15, abs=0)
    rep = harness.sweep(harness.SweepPlan(restore=False, radio=harness.RadioModel(30e-9, 80e-12, 120, 2.5)), sweep_corpus[:6])
    rows = {(r.image_id, r.variant, r.quality): r for r in rep.rows}
    worst = 0.0
    for i, _ in sweep_corpus[:6]:
        for q1, q2 in harness.PAIRED_QUALITIES:
            a, b = rows[(i, 1, q1)], rows[(i, 2, q2)]
            worst = max(worst, abs((b.energy_j / a.energy_j) / (b.bytes / a.bytes) - 1))
    for p in rep.paired:
        worst = max(worst, abs(p["energy_ratio"] / p["size_ratio"] - 1))
    ok = hand_ok and worst <= 1e-12
    detail = f"2.4 mJ example -> {hand * 1e3:.6f} mJ; worst energy/byte ratio mismatch {worst:.1e}"
    assert record(acceptance_log, 7, "energy linearity", ok, detail), detail


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism(acceptance_log, trained, sweep_corpus):
    models = {v: res.params for v, (res, _) in trained.items()}
    t0 = time.perf_counter()
    first = harness.rows_csv(harness.sweep(harness.SweepPlan(seed=11), sweep_corpus, models))
    second = harness.rows_csv(harness.sweep(harness.SweepPlan(seed=11), sweep_corpus, models))
    secs = time.perf_counter() - t0
    ok = first == second
    detail = f"two restored sweeps of {N_CORPUS} images x 7 pairs: {len(first)} CSV bytes, identical={ok}, {secs:.0f}s"
    assert record(acceptance_log, 8, "determinism", ok, detail), detail
