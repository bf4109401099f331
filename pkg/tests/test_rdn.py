import struct

import numpy as np
import pytest

from miotsr import autodiff as ad
from miotsr import rdn
from miotsr.autodiff import Tensor
from miotsr.codec import decode, encode
from miotsr.imageio import UNIT, Image, luma
from miotsr.metrics import psnr
from miotsr.rdn import ModelError, RdnConfig
from miotsr.synth import corpus

from .oracles import finite_difference, max_rel_error

TINY = dict(D=1, C=2, G=4, G0=8)


@pytest.fixture(scope="module")
def crops():
    return corpus(6, 128, 128, seed=3)


class TestConfig:
    def test_defaults(self):
        cfg = RdnConfig()
        assert (cfg.D, cfg.C, cfg.G, cfg.G0, cfg.scale, cfg.channels) == (4, 8, 16, 32, 1, 3)

    @pytest.mark.parametrize("kw", [dict(D=0), dict(C=0), dict(G=0), dict(scale=2), dict(channels=1), dict(up_stages=3)])
    def test_invalid(self, kw):
        with pytest.raises(ModelError):
            RdnConfig(**kw)

    def test_layer_shapes(self):
        cfg = RdnConfig(D=2, C=3, G=5, G0=7, scale=4)
        layers = {name: (cin, cout, k) for name, cin, cout, k in cfg.layers()}
        assert layers["rdb1.conv2"] == (7 + 2 * 5, 5, 3)
        assert layers["rdb0.lff"] == (7 + 3 * 5, 7, 1)
        assert layers["gff1"] == (2 * 7, 7, 1)
        assert layers["up0"] == (7, 7 * 16, 3)
        assert layers["out"] == (7, 3, 3)

    def test_two_stage_upsampler(self):
        names = [n for n, *_ in RdnConfig(scale=4, up_stages=2).layers()]
        assert "up0" in names and "up1" in names
        assert not any(n.startswith("up") for n, *_ in RdnConfig(scale=1).layers())


class TestInit:
    def test_deterministic(self):
        assert rdn.init_params(RdnConfig(**TINY), 5) == rdn.init_params(RdnConfig(**TINY), 5)
        assert rdn.init_params(RdnConfig(**TINY), 5) != rdn.init_params(RdnConfig(**TINY), 6)

    def test_he_std_and_zero_bias(self):
        p = rdn.init_params(RdnConfig(), 0)
        for name, cin, cout, k in p.cfg.layers():
            w = p[name + ".w"].data
            if w.size >= 4000:
                assert abs(w.std() / np.sqrt(2 / (cin * k * k)) - 1) < 0.1
            assert np.all(p[name + ".b"].data == 0)
        assert p["sfe1.w"].dtype == np.float32


class TestForward:
    def test_zero_final_layer(self, rng):
        p = rdn.init_params(RdnConfig(**TINY), 0)
        p["out.w"].data[:] = 0
        y = rdn.forward(p, rng.random((3, 16, 16)))
        assert np.all(y.data == 0)

    def test_scale4_shape(self, rng):
        p = rdn.init_params(RdnConfig(scale=4), 0)
        assert rdn.forward(p, rng.random((3, 48, 48))).shape == (3, 192, 192)

    def test_scale1_shape(self, rng):
        p = rdn.init_params(RdnConfig(), 0)
        with ad.no_grad():
            assert rdn.forward(p, rng.random((3, 96, 96))).shape == (3, 96, 96)

    @pytest.mark.parametrize("scale,stages", [(1, 1), (4, 1), (4, 2)])
    @pytest.mark.parametrize("h,w", [(16, 16), (17, 23)])
    def test_output_dims(self, rng, scale, stages, h, w):
        p = rdn.init_params(RdnConfig(**TINY, scale=scale, up_stages=stages), 1)
        assert rdn.forward(p, rng.random((2, 3, h, w))).shape == (2, 3, scale * h, scale * w)

    def test_image_input(self, rng):
        p = rdn.init_params(RdnConfig(**TINY), 0)
        img = Image(rng.integers(0, 256, (3, 16, 16)).astype(np.uint8))
        a = rdn.forward(p, img).data
        b = rdn.forward(p, img.planes / 255.0).data
        np.testing.assert_allclose(a, b, rtol=1e-6)

    def test_rejects_bad_input(self, rng):
        p = rdn.init_params(RdnConfig(**TINY), 0)
        with pytest.raises(ModelError):
            rdn.forward(p, rng.random((1, 16, 16)))
        with pytest.raises(ModelError):
            rdn.forward(p, rng.random((3, 8, 16)))

    def test_grl_is_wired(self, rng):
        p = rdn.init_params(RdnConfig(**TINY), 2)
        x = rng.random((3, 16, 16))
        assert not np.allclose(rdn.forward(p, x).data, rdn.forward(p, x, grl=False).data)

    @pytest.mark.parametrize("D", [1, 2, 3])
    def test_rdb_output_channels(self, rng, D):
        p = rdn.init_params(RdnConfig(D=D, C=2, G=3, G0=5), 0)
        x = Tensor(rng.random((5, 16, 16)).astype(np.float32))
        for d in range(D):
            assert rdn.rdb(p, d, x).shape == (5, 16, 16)

    def test_residual_mode_adds_input(self, rng):
        cfg = RdnConfig(**TINY, residual=True)
        p = rdn.init_params(cfg, 0)
        p["out.w"].data[:] = 0
        x = rng.random((3, 16, 16)).astype(np.float32)
        np.testing.assert_allclose(rdn.forward(p, x).data, x, atol=1e-7)
        cfg4 = RdnConfig(**TINY, scale=4, residual=True)
        p4 = rdn.init_params(cfg4, 0)
        p4["out.w"].data[:] = 0
        np.testing.assert_allclose(rdn.forward(p4, np.full((3, 16, 16), 0.3, np.float32)).data, 0.3, atol=1e-6)

    def test_restore_clamps(self, rng):
        p = rdn.init_params(RdnConfig(**TINY), 0)
        img = Image(rng.integers(0, 256, (3, 16, 20)).astype(np.uint8))
        out = rdn.restore(p, img)
        assert out.planes.dtype == np.uint8 and (out.width, out.height) == (20, 16)


def test_whole_model_gradcheck():
    rng = np.random.default_rng(0)
    p32 = rdn.init_params(RdnConfig(**TINY, scale=4), 0)
    # float64 copy with small random biases so every path is exercised
    arrays = {k: v.data.astype(np.float64) for k, v in p32.tensors.items()}
    for k in arrays:
        if k.endswith(".b"):
            arrays[k] = rng.normal(0, 0.1, arrays[k].shape)
    x = rng.random((3, 16, 16))
    target = rng.random((3, 64, 64))

    def build(tensors):
        p = rdn.RdnParams(p32.cfg, tensors)
        return ad.l2_loss(rdn.forward(p, Tensor(x)), target)

    leaves = {k: Tensor(a, requires_grad=True) for k, a in arrays.items()}
    build(leaves).backward()

    def f():
        with ad.no_grad():
            return float(build({k: Tensor(a) for k, a in arrays.items()}).data)

    # spot-check a few entries of every tensor; a biased layer touches every
    # pixel, so a 1e-3 step would straddle ReLU kinks somewhere in the map
    worst = 0.0
    for name, a in arrays.items():
        flat = a.reshape(-1)
        for i in rng.choice(flat.size, min(4, flat.size), replace=False):
            num = finite_difference(f, [flat[i : i + 1]], eps=1e-5)[0][0]
            ana = leaves[name].grad.reshape(-1)[i]
            worst = max(worst, max_rel_error(ana, num, floor=1e-5))
    assert worst <= 1e-3


class TestTrainingData:
    def test_variant1_pair(self, crops, rng):
        plan = rdn.TrainPlan(variant=1, qualities=(100,), patch=64)
        s = rdn.make_training_pair(crops[0], plan, rng)
        assert s.input.shape == s.target.shape == (3, 64, 64)
        assert s.input.min() >= 0 and s.input.max() <= 1
        np.testing.assert_allclose(s.input, s.clean + s.noise)
        target = Image(s.target, depth=UNIT).to_u8()
        received = Image(s.input, depth=UNIT).to_u8()
        assert received == decode(encode(target, 100))
        # 4:2:0 chroma is lossy even at q=100; luma stays within rounding
        assert np.abs(luma(received) - luma(target)).max() <= 1
        assert psnr(received, target) > 30

    def test_variant2_pair(self, crops, rng):
        plan = rdn.TrainPlan(variant=2, qualities=(30,), patch=96)
        s = rdn.make_training_pair(crops[0], plan, rng)
        assert s.input.shape == (3, 24, 24) and s.target.shape == (3, 96, 96)
        assert s.clean.shape == (3, 24, 24)

    def test_deterministic(self, crops):
        plan = rdn.TrainPlan(variant=1, patch=64)
        a = rdn.make_training_pair(crops[1], plan, np.random.default_rng(4))
        b = rdn.make_training_pair(crops[1], plan, np.random.default_rng(4))
        np.testing.assert_array_equal(a.input, b.input)
        assert a.quality == b.quality and a.quality in plan.qualities

    def test_patch_too_large(self, crops, rng):
        with pytest.raises(ValueError):
            rdn.make_training_pair(crops[0], rdn.TrainPlan(patch=192 + 64), rng)

    def test_plan_defaults(self):
        assert rdn.TrainPlan(variant=1).qualities == (1, 5, 10, 15, 20, 25)
        assert rdn.TrainPlan(variant=2).qualities == (10, 20, 30, 40, 50, 60)
        p = rdn.TrainPlan()
        assert (p.steps, p.batch, p.patch, p.lr) == (500, 16, 96, 1e-4)

    @pytest.mark.parametrize("kw", [dict(variant=2, patch=90), dict(qualities=(0,)), dict(variant=3), dict(loss="huber")])
    def test_plan_invalid(self, kw):
        with pytest.raises(ValueError):
            rdn.TrainPlan(**kw)

    def test_split(self):
        items = list(range(200))
        train, held = rdn.split_dataset(items)
        assert held == list(range(180, 200)) and train == list(range(180))
        assert rdn.split_dataset([1, 2, 3]) == ([1, 2], [3])

    def test_prepare_and_load(self, tmp_path):
        from miotsr.synth import scene

        sources = [("a", scene(520, 600, 1)), ("b", scene(300, 300, 2)), ("c", scene(560, 510, 3))]
        report = rdn.prepare_dataset(sources, tmp_path, seed=1)
        assert report["written"] == ["a.ppm", "c.ppm"]
        assert [name for name, _ in report["skipped"]] == ["b"]
        loaded = rdn.load_dataset(tmp_path)
        assert [n for n, _ in loaded] == ["a", "c"]
        assert all((im.width, im.height) == (256, 256) for _, im in loaded)


class TestTrain:
    def _plan(self, **kw):
        base = dict(variant=1, steps=4, batch=4, patch=32, qualities=(10,), log_every=1, micro_batch=2)
        base.update(kw)
        return rdn.TrainPlan(**base)

    def test_runs_and_is_deterministic(self, crops):
        cfg = RdnConfig(**TINY)
        a = rdn.train(cfg, self._plan(), crops)
        b = rdn.train(cfg, self._plan(), crops)
        assert len(a.losses) == 4 and a.losses == b.losses
        assert a.params == b.params

    def test_micro_batching_is_exact_split(self, crops):
        cfg = RdnConfig(**TINY)
        a = rdn.train(cfg, self._plan(steps=1, micro_batch=1), crops)
        b = rdn.train(cfg, self._plan(steps=1, micro_batch=4), crops)
        assert a.losses[0] == pytest.approx(b.losses[0], rel=1e-5)
        for k in a.params.tensors:
            np.testing.assert_allclose(a.params[k].data, b.params[k].data, atol=2e-6)

    def test_callback(self, crops):
        seen = []
        rdn.train(RdnConfig(**TINY), self._plan(steps=3, log_every=2), crops, callback=lambda s, l: seen.append(s))
        assert seen == [0, 2]

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            rdn.train(RdnConfig(**TINY), self._plan(), [])

    def test_scale_mismatch(self, crops):
        with pytest.raises(ModelError):
            rdn.train(RdnConfig(**TINY, scale=4), self._plan(), crops)

    def test_nan_aborts(self, crops):
        p = rdn.init_params(RdnConfig(**TINY), 0)
        p["out.b"].data[:] = np.nan
        with pytest.raises(rdn.TrainingDiverged) as exc:
            rdn.train(RdnConfig(**TINY), self._plan(), crops, params=p)
        assert exc.value.step == 0 and len(exc.value.batch_ids) == 4

    def test_descends(self, crops):
        res = rdn.train(RdnConfig(**TINY), self._plan(steps=60, lr=1e-3, log_every=0), crops)
        first, last = res.window_means(10)
        assert last < first


class TestWeightsFile:
    def test_roundtrip_bitwise(self):
        p = rdn.init_params(RdnConfig(**TINY, scale=4), 3)
        q = rdn.load_weights(rdn.save_weights(p))
        assert q == p and q.cfg == p.cfg

    def test_header(self):
        data = rdn.save_weights(rdn.init_params(RdnConfig(**TINY), 0))
        assert data[:4] == b"RDNW" and data[4] == 1
        assert struct.unpack_from("<6H", data, 5) == (1, 2, 4, 8, 1, 3)
        (n,) = struct.unpack_from("<H", data, 17)
        assert data[19 : 19 + n] == b"sfe1.w"

    def test_two_stage_inferred(self):
        p = rdn.init_params(RdnConfig(**TINY, scale=4, up_stages=2), 0)
        assert rdn.load_weights(rdn.save_weights(p)).cfg.up_stages == 2

    def test_config_mismatch(self):
        data = rdn.save_weights(rdn.init_params(RdnConfig(**TINY), 0))
        with pytest.raises(ModelError):
            rdn.load_weights(data, expect=RdnConfig(D=2, C=2, G=4, G0=8))
        assert rdn.load_weights(data, expect=RdnConfig(**TINY)).cfg == RdnConfig(**TINY)

    def test_bad_magic_and_version(self):
        data = bytearray(rdn.save_weights(rdn.init_params(RdnConfig(**TINY), 0)))
        with pytest.raises(ModelError):
            rdn.load_weights(b"XXXX" + bytes(data[4:]))
        data[4] = 9
        with pytest.raises(ModelError):
            rdn.load_weights(bytes(data))

    def test_corrupt_dims_names_layer(self):
        data = bytearray(rdn.save_weights(rdn.init_params(RdnConfig(**TINY), 0)))
        # first record: name "sfe1.w", rank 4, dims (8,3,3,3); inflate dim 0
        off = 19 + len("sfe1.w") + 1
        struct.pack_into("<I", data, off, 80000)
        with pytest.raises(ModelError, match="sfe1.w"):
            rdn.load_weights(bytes(data))

    def test_wrong_shape_names_layer(self):
        data = bytearray(rdn.save_weights(rdn.init_params(RdnConfig(**TINY), 0)))
        off = 19 + len("sfe1.w") + 1
        struct.pack_into("<I", data, off, 4)  # (4,3,3,3): fits in the file but breaks the layout
        with pytest.raises(ModelError, match="sfe1"):
            rdn.load_weights(bytes(data))

    def test_truncated(self):
        data = rdn.save_weights(rdn.init_params(RdnConfig(**TINY), 0))
        for cut in (3, 10, 25, len(data) - 2):
            with pytest.raises(ModelError):
                rdn.load_weights(data[:cut])

    def test_file_helpers(self, tmp_path):
        p = rdn.init_params(RdnConfig(**TINY), 0)
        rdn.save_weights_file(p, tmp_path / "m.rdnw")
        assert rdn.load_weights_file(tmp_path / "m.rdnw") == p
