"""Network stages: soft-mask hourglass, grouped gating, fusion U-Net,
the mask-free variant, presets, and checkpointing."""

import os

import numpy as np
import pytest

from conftest import make_camera
from sweepsynth.checkpoint import ChecksumMismatch, load_arrays, save_arrays
from sweepsynth.network import (
    PRESETS,
    Model,
    ModelVariant,
    get_variant,
    load_model_config,
    mixed_scale_forward,
    model_forward,
    param_count,
    psv_net_inputs,
    save_model_config,
)
from sweepsynth.psv import build_psv, sample_depths
from sweepsynth.tensor import Tensor, no_grad
from sweepsynth.training import make_synthetic_dataset


def tiny_variant(n_planes=2, cap=16, use_sm=True, n_views=2):
    return ModelVariant("tiny", n_planes, n_views, use_sm, 1.0, 10.0, channel_cap=cap)


def rand_inputs(rng, variant, h=16, w=16, batch=1):
    k, n = variant.n_views, variant.n_planes
    pm = (rng.random((batch, 3 * k * n, h, w)).astype(np.float32)) * 2 - 1
    gray = (rng.random((batch, k * n, h, w)).astype(np.float32)) * 2 - 1
    return pm, gray


class TestSoftMaskNet:
    def test_output_shape_and_range(self, rng):
        v = get_variant("Ours-19", channel_cap=32)
        m = Model(v, seed=0)
        pm, gray = rand_inputs(rng, v, h=48, w=64)
        with no_grad():
            masks = m.soft_masks(Tensor(gray))
        assert masks.shape == (1, 19, 48, 64)
        assert masks.data.min() > 0.0 and masks.data.max() < 1.0

    def test_zero_weights_give_half(self, rng):
        v = tiny_variant(n_planes=3)
        m = Model(v, seed=0)
        for _, t in m.named_params():
            t.data[:] = 0.0
        _, gray = rand_inputs(rng, v)
        with no_grad():
            masks = m.soft_masks(Tensor(gray))
        assert np.allclose(masks.data, 0.5, atol=1e-7)

    def test_three_view_softmax_head(self, rng):
        v = tiny_variant(n_planes=4, n_views=3)
        m = Model(v, seed=1)
        pm, gray = rand_inputs(rng, v)
        with no_grad():
            masks = m.soft_masks(Tensor(gray))
        assert masks.shape == (1, 4, 16, 16)
        assert masks.data.min() > 0 and masks.data.max() < 1


class TestGating:
    def test_gate_map_in_unit_interval(self, rng):
        v = tiny_variant(n_planes=3)
        m = Model(v, seed=2)
        pm, gray = rand_inputs(rng, v)
        from sweepsynth.tensor import channel_interleave, relu, sigmoid

        with no_grad():
            masks = m.soft_masks(Tensor(gray))
            z = channel_interleave(Tensor(pm), masks, 6, 1)
            h = relu(m.gate.c2(relu(m.gate.c1(z))))
            gate_map = sigmoid(m.gate.g(h))
        assert gate_map.data.min() > 0.0 and gate_map.data.max() < 1.0

    def test_zero_gate_weights_halve_features(self, rng):
        from sweepsynth.tensor import channel_interleave, relu

        v = tiny_variant(n_planes=2)
        m = Model(v, seed=3)
        m.gate.g.weight.data[:] = 0.0
        m.gate.g.bias.data[:] = 0.0
        pm, gray = rand_inputs(rng, v)
        with no_grad():
            masks = m.soft_masks(Tensor(gray))
            z = channel_interleave(Tensor(pm), masks, 6, 1)
            out = m.gate.forward(z)
            h = relu(m.gate.c2(relu(m.gate.c1(z))))
            expected = 0.5 * relu(m.gate.f(h)).data
        assert np.allclose(out.data, expected, atol=1e-7)

    def test_groups_do_not_mix_planes(self, rng):
        # perturbing plane pair j's channels changes only group j's output
        v = tiny_variant(n_planes=3)
        m = Model(v, seed=4)
        pm, gray = rand_inputs(rng, v)
        masks = np.full((1, 3, 16, 16), 0.5, np.float32)
        from sweepsynth.tensor import channel_interleave

        def gate_out(planes):
            with no_grad():
                z = channel_interleave(Tensor(planes), Tensor(masks), 6, 1)
                return m.gate.forward(z).data

        base = gate_out(pm)
        for j in range(3):
            bumped = pm.copy()
            bumped[:, 6 * j : 6 * (j + 1)] += rng.random((1, 6, 16, 16)).astype(np.float32)
            out = gate_out(bumped)
            changed = np.abs(out - base).reshape(1, 3, 6, 16, 16).max(axis=(0, 2, 3, 4))
            assert changed[j] > 1e-4
            for other in range(3):
                if other != j:
                    assert changed[other] == 0.0


class TestModelForward:
    @pytest.mark.parametrize("name", ["Ours-13-NoSM", "Ours-17-NoSM", "Ours-19", "Ours-32"])
    def test_untrained_forward_finite(self, name, rng):
        v = get_variant(name, channel_cap=24)
        m = Model(v, seed=0)
        pm, gray = rand_inputs(rng, v, h=32, w=32)
        with no_grad():
            out = m.forward(Tensor(pm), Tensor(gray), training=False)
        assert out.shape == (1, 3, 32, 32)
        assert np.all(np.isfinite(out.data))
        assert out.data.min() > -1 and out.data.max() < 1

    def test_shape_contract_across_resolutions(self, rng):
        v = tiny_variant(n_planes=2, cap=8)
        m = Model(v, seed=0)
        for h, w in [(32, 32), (36, 64), (72, 128), (54, 96)]:
            pm, gray = rand_inputs(rng, v, h=h, w=w)
            with no_grad():
                out = m.forward(Tensor(pm), Tensor(gray), training=False)
            assert out.shape == (1, 3, h, w)
            assert np.all(np.isfinite(out.data))

    def test_nosm_forward_and_shape(self, rng):
        v = tiny_variant(n_planes=3, use_sm=False)
        m = Model(v, seed=0)
        pm, _ = rand_inputs(rng, v, h=24, w=40)
        with no_grad():
            out = m.forward(Tensor(pm), training=False)
        assert out.shape == (1, 3, 24, 40)

    def test_shape_contract_at_benchmark_resolution(self, rng):
        # the chunked conv path must hold the contract up to 1024x576
        v = tiny_variant(n_planes=2, cap=8)
        m = Model(v, seed=0)
        pm, gray = rand_inputs(rng, v, h=576, w=1024)
        with no_grad():
            out = m.forward(Tensor(pm), Tensor(gray), training=False)
        assert out.shape == (1, 3, 576, 1024)
        assert np.all(np.isfinite(out.data))

    def test_batched_forward_matches_single(self, rng):
        v = tiny_variant(n_planes=2, cap=8)
        m = Model(v, seed=0)
        pm, gray = rand_inputs(rng, v, batch=2)
        with no_grad():
            both = m.forward(Tensor(pm), Tensor(gray), training=False).data
            one = m.forward(Tensor(pm[:1]), Tensor(gray[:1]), training=False).data
        assert np.abs(both[:1] - one).max() < 1e-5


class TestParamCounts:
    def test_published_bands(self):
        mil = 1e6
        p32 = param_count(get_variant("Ours-32"))
        p19 = param_count(get_variant("Ours-19"))
        p32n = param_count(get_variant("Ours-32-NoSM"))
        p19n = param_count(get_variant("Ours-19-NoSM"))
        assert 9 * mil <= p32 <= 15 * mil
        assert 6.75 * mil <= p19 <= 11.25 * mil
        assert 12 * mil <= p32n <= 20 * mil
        assert p32n > p32 and p19n > p19

    def test_count_matches_manual_sum(self):
        v = tiny_variant(n_planes=2)
        m = Model(v, seed=0)
        manual = sum(t.size for _, t in m.named_params())
        assert m.param_count() == manual == param_count(v)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path, rng):
        v = tiny_variant(n_planes=2)
        m = Model(v, seed=5)
        path = os.path.join(tmp_path, "m.ckpt")
        m.save(path)
        m2 = Model(v, seed=99)  # different init, then overwritten
        m2.load(path)
        for (n1, t1), (n2, t2) in zip(m.named_params(), m2.named_params()):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)
        pm, gray = rand_inputs(rng, v)
        with no_grad():
            a = m.forward(Tensor(pm), Tensor(gray), training=False).data
            b = m2.forward(Tensor(pm), Tensor(gray), training=False).data
        assert np.array_equal(a, b)

    def test_format_raw_layout(self, tmp_path):
        path = os.path.join(tmp_path, "x.ckpt")
        arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
                  "b.c": np.array([1.5], dtype=np.float32)}
        save_arrays(path, arrays)
        raw = open(path, "rb").read()
        assert raw[:4] == b"FDIV"
        loaded = load_arrays(path)
        assert list(loaded) == ["a", "b.c"]
        assert np.array_equal(loaded["a"], arrays["a"])
        assert loaded["a"].dtype == np.float32

    def test_mismatched_checkpoint_rejected(self, tmp_path):
        v = tiny_variant(n_planes=2)
        path = os.path.join(tmp_path, "m.ckpt")
        Model(v, seed=0).save(path)
        other = Model(tiny_variant(n_planes=3), seed=0)
        with pytest.raises(ChecksumMismatch):
            other.load(path)
        with pytest.raises(ChecksumMismatch):
            save_arrays(path, {"junk": np.zeros(3, np.float32)})
            Model(v, seed=0).load(path)


class TestEndToEndPsv:
    def _psv(self, rng, n_planes=4, w=48, h=32):
        ds = sample_depths(n_planes, 1.0, 20.0)
        tgt = make_camera(width=w, height=h)
        s1 = make_camera(width=w, height=h, position=(-0.05, 0, 0))
        s2 = make_camera(width=w, height=h, position=(0.05, 0, 0))
        imgs = [rng.random((h, w, 3)).astype(np.float32) for _ in range(2)]
        return build_psv(imgs, [s1, s2], tgt, ds)

    def test_model_forward_on_psv(self, rng):
        vol = self._psv(rng)
        v = tiny_variant(n_planes=4, cap=8)
        m = Model(v, seed=0)
        out = model_forward(m, vol)
        assert out.shape == (32, 48, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_plane_major_assembly(self, rng):
        vol = self._psv(rng, n_planes=3)
        pm, gray = psv_net_inputs(vol)
        n = vol.n_planes
        for j in range(n):
            # group j carries [view1 RGB, view2 RGB] of plane j, in [-1, 1]
            expect1 = vol.planes[j] * 2 - 1
            expect2 = vol.planes[n + j] * 2 - 1
            assert np.allclose(pm[0, 6 * j : 6 * j + 3], expect1, atol=1e-6)
            assert np.allclose(pm[0, 6 * j + 3 : 6 * j + 6], expect2, atol=1e-6)

    def test_wrong_psv_rejected(self, rng):
        vol = self._psv(rng, n_planes=4)
        m = Model(tiny_variant(n_planes=3), seed=0)
        with pytest.raises(ValueError):
            model_forward(m, vol)

    def test_mixed_scale_shape_and_constant_scene(self):
        # constant-texture scene: half-res masks cannot change the result
        v = tiny_variant(n_planes=3, cap=8)
        m = Model(v, seed=0)
        w, h = 128, 96
        ds = sample_depths(3, 1.0, 20.0)
        tgt = make_camera(width=w, height=h)
        s1 = make_camera(width=w, height=h, position=(-0.04, 0, 0))
        s2 = make_camera(width=w, height=h, position=(0.04, 0, 0))
        const = np.full((h, w, 3), 0.42, np.float32)
        vol = build_psv([const, const], [s1, s2], tgt, ds)
        half = np.full((h // 2, w // 2, 3), 0.42, np.float32)
        from sweepsynth.geometry import Camera

        s1h = Camera(intrinsics=s1.intrinsics.scaled(0.5), pose=s1.pose)
        s2h = Camera(intrinsics=s2.intrinsics.scaled(0.5), pose=s2.pose)
        tgth = Camera(intrinsics=tgt.intrinsics.scaled(0.5), pose=tgt.pose)
        vol_half = build_psv([half, half], [s1h, s2h], tgth, ds)
        mixed = mixed_scale_forward(m, vol, vol_half)
        full = model_forward(m, vol)
        assert mixed.shape == full.shape == (h, w, 3)
        assert np.abs(mixed - full).mean() < 1e-3

    def test_mixed_scale_rejects_wrong_half(self, rng):
        v = tiny_variant(n_planes=4, cap=8)
        m = Model(v, seed=0)
        vol = self._psv(rng, n_planes=4)
        with pytest.raises(ValueError):
            mixed_scale_forward(m, vol, vol)


class TestVariantsAndConfig:
    def test_presets_complete(self):
        assert set(PRESETS) == {
            "Ours-32", "Ours-19", "Ours-32-NoSM", "Ours-19-NoSM",
            "Ours-17-NoSM", "Ours-13-NoSM", "F-19-3view",
        }
        assert PRESETS["Ours-17-NoSM"].d_min == 0.3
        assert PRESETS["Ours-17-NoSM"].d_max == 16.0
        assert PRESETS["F-19-3view"].n_views == 3
        assert not PRESETS["Ours-13-NoSM"].use_sm

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            get_variant("Ours-7")

    def test_config_file_roundtrip(self, tmp_path):
        v = get_variant("Ours-17-NoSM", channel_cap=64)
        path = os.path.join(tmp_path, "model.cfg")
        save_model_config(path, v, seed=123)
        v2, seed = load_model_config(path)
        assert v2 == v and seed == 123


def test_training_dataset_forward_smoke(rng):
    triplets = make_synthetic_dataset(1, 64, 36, seed=3)
    t = triplets[0]
    v = tiny_variant(n_planes=3, cap=8)
    vol = build_psv(t.images, t.cameras, t.target_camera,
                    sample_depths(3, v.d_min, v.d_max))
    out = model_forward(Model(v, seed=0), vol)
    assert out.shape == (36, 64, 3)
    assert np.all(np.isfinite(out))
