import numpy as np
import pytest

from scenemoe import experts as ex
from scenemoe import numerics as nm
from scenemoe.errors import ConfigError, DimensionError


def tiny_cfg(**kw):
    base = dict(input_width=3, internal_width=4, layers=2, heads=2, common_width=4)
    base.update(kw)
    return ex.ExpertConfig(**base)


def make_expert(cfg, seed=0, prefix="expert_x"):
    tape = nm.ParamTape()
    ex.init_expert_params(tape, prefix, cfg, np.random.default_rng(seed))
    return tape, prefix


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            tiny_cfg(internal_width=5, heads=2).validate()

    def test_layers_positive(self):
        with pytest.raises(ConfigError):
            tiny_cfg(layers=0).validate()


class TestForward:
    def test_width_mismatch(self):
        cfg = tiny_cfg()
        tape, prefix = make_expert(cfg)
        with pytest.raises(DimensionError):
            ex.expert_forward(tape, prefix, cfg, np.zeros((2, 5)))

    def test_single_frame_equals_duplicated_frames(self):
        # with one frame self-attention is identity-weighted; duplicating the
        # frame changes nothing because pooling averages identical rows
        cfg = tiny_cfg()
        tape, prefix = make_expert(cfg)
        frame = np.random.default_rng(1).normal(size=(1, 3))
        one = ex.expert_forward(tape, prefix, cfg, frame).pooled.data
        two = ex.expert_forward(tape, prefix, cfg, np.repeat(frame, 2, axis=0)).pooled.data
        np.testing.assert_allclose(one, two, atol=1e-12)

    def test_frame_permutation_invariance_when_unpositional(self):
        cfg = tiny_cfg()
        tape, prefix = make_expert(cfg)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3))
        base = ex.expert_forward(tape, prefix, cfg, x).pooled.data
        perm = ex.expert_forward(tape, prefix, cfg, x[::-1].copy()).pooled.data
        np.testing.assert_allclose(base, perm, atol=1e-12)

    def test_positional_encoding_breaks_permutation_invariance(self):
        cfg = tiny_cfg(positional_encoding=True)
        tape, prefix = make_expert(cfg)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 3))
        base = ex.expert_forward(tape, prefix, cfg, x).pooled.data
        perm = ex.expert_forward(tape, prefix, cfg, x[::-1].copy()).pooled.data
        assert np.abs(base - perm).max() > 1e-6

    def test_heterogeneous_experts_share_output_width(self):
        tape = nm.ParamTape()
        rng = np.random.default_rng(4)
        widths = {"a": (6, 8), "b": (10, 12), "c": (5, 4), "d": (9, 16)}
        for name, (w_in, w_int) in widths.items():
            cfg = ex.ExpertConfig(input_width=w_in, internal_width=w_int, layers=1, heads=2, common_width=8)
            ex.init_expert_params(tape, f"expert_{name}", cfg, rng)
            out = ex.expert_forward(tape, f"expert_{name}", cfg, rng.normal(size=(3, w_in)))
            assert out.pooled.shape == (1, 8)

    def test_parameter_counts_track_internal_widths(self):
        tape = nm.ParamTape()
        rng = np.random.default_rng(5)
        counts = {}
        for name, w_int in (("a", 8), ("b", 12), ("c", 4), ("d", 16)):
            cfg = ex.ExpertConfig(input_width=6, internal_width=w_int, layers=1, heads=2, common_width=8)
            ex.init_expert_params(tape, f"expert_{name}", cfg, rng)
            counts[name] = ex.parameter_count(tape, f"expert_{name}")
        assert counts["c"] < counts["a"] < counts["b"] < counts["d"]

    def test_grad_check_two_layer_expert(self):
        cfg = tiny_cfg()
        tape, prefix = make_expert(cfg, seed=6)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 3))
        probe = rng.normal(size=(1, 4))

        def f():
            return nm.sum_all(nm.mul_const(ex.expert_forward(tape, prefix, cfg, x).pooled, probe))

        params = [(n, tape[n]) for n in ex.expert_param_names(tape, prefix) if "decoder" not in n]
        res = nm.finite_diff_check(f, params, max_per_param=6, rng=np.random.default_rng(8))
        assert res.max_rel_err < 1e-4


class TestSceneDecoder:
    def test_zero_weights_predict_zero(self):
        cfg = tiny_cfg()
        tape, prefix = make_expert(cfg, seed=9)
        tape[f"{prefix}/decoder/w"].data[...] = 0.0
        tape[f"{prefix}/decoder/b"].data[...] = 0.0
        rng = np.random.default_rng(10)
        x = rng.normal(size=(4, 3))
        pooled = ex.expert_forward(tape, prefix, cfg, x).pooled
        pred = ex.scene_decoder(tape, prefix, pooled)
        np.testing.assert_array_equal(pred.data, np.zeros((1, 3)))
        target = ex.reconstruction_target(x)
        assert abs(nm.mse(pred, target).item() - (target**2).mean()) < 1e-12

    def test_reconstruction_target_is_frame_mean(self):
        x = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(ex.reconstruction_target(x), x.mean(axis=0, keepdims=True))

    def test_decoder_grad(self):
        cfg = tiny_cfg()
        tape, prefix = make_expert(cfg, seed=11)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 3))
        target = ex.reconstruction_target(x)

        def f():
            pooled = ex.expert_forward(tape, prefix, cfg, x).pooled
            return nm.mse(ex.scene_decoder(tape, prefix, pooled), target)

        params = [(n, tape[n]) for n in ex.expert_param_names(tape, prefix)]
        res = nm.finite_diff_check(f, params, max_per_param=5, rng=np.random.default_rng(13))
        assert res.max_rel_err < 1e-4
