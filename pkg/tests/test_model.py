"""Config validation, model assembly, checkpoint format and the optimizer."""

import dataclasses

import numpy as np
import pytest

from conftest import micro_config, random_batch
from gatepose import checkpoint
from gatepose import tensor as T
from gatepose.errors import ConfigError, FormatError
from gatepose.model import (
    ModelConfig, build, count_params, default_config, tiny_config)
from gatepose.nn import Conv2d
from gatepose.optim import Adam
from gatepose.train import train_step

rng = np.random.default_rng(31337)


class TestConfigValidation:
    def test_defaults_are_valid(self):
        default_config().validate()
        tiny_config().validate()
        micro_config().validate()

    @pytest.mark.parametrize("overrides", [
        {"input_size": (50, 64)},
        {"stage_channels": (4, 8, 16), "stage_depths": (1, 1, 1)},
        {"stage_channels": (4, 8, 20, 40), "stem_width": 4},
        {"stem_width": 8},
        {"n_agents": 5},
        {"n_agents": 4},          # grid 2x2 exceeds the 1x1 coarsest map
        {"fusion_target_stride": 12},
        {"decoder_widths": (8,)},
        {"n_joints": 0},
        {"heatmap_sigma": 0.0},
        {"learning_rate": -1.0},
    ])
    def test_bad_fields_rejected(self, overrides):
        with pytest.raises(ConfigError):
            micro_config(**overrides).validate()

    def test_glace_needs_even_stem(self):
        cfg = ModelConfig(input_size=(32, 32), stem_width=31,
                          stage_channels=(31, 62, 124, 248),
                          stage_depths=(1, 1, 1, 1), n_agents=1, n_joints=2)
        with pytest.raises(ConfigError):
            cfg.validate()
        cfg2 = dataclasses.replace(cfg, use_glace=False)
        with pytest.raises(ConfigError):
            # still fails: squeeze-excite needs widths divisible by 4
            build(cfg2.validate())

    def test_heads_divisor_must_divide_widths(self):
        cfg = default_config(heads_divisor=28)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_json_round_trip(self):
        cfg = micro_config(heatmap_sigma=1.25, use_dysample=False)
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_key_rejected(self):
        d = micro_config().to_dict()
        d["bogus"] = 1
        with pytest.raises(ConfigError):
            ModelConfig.from_dict(d)

    def test_heatmap_sizes(self):
        assert default_config().heatmap_size() == (64, 48)
        assert tiny_config().heatmap_size() == (16, 16)
        assert micro_config().heatmap_size() == (8, 8)


class TestModelAssembly:
    def test_build_is_deterministic(self, micro):
        a = build(micro)
        b = build(micro)
        pa = dict(a.named_parameters())
        pb = dict(b.named_parameters())
        assert pa.keys() == pb.keys()
        for name in pa:
            assert np.array_equal(pa[name].data, pb[name].data), name

    def test_parameter_names_unique(self, micro):
        names = [n for n, _ in build(micro).named_parameters()]
        assert len(names) == len(set(names))

    def test_count_params_on_known_layer(self):
        conv = Conv2d(4, 8, 1, np.random.default_rng(0))
        assert count_params(conv) == 4 * 8 + 8

    def test_count_params_totals(self, micro):
        model = build(micro)
        assert count_params(model) == sum(
            p.size for _, p in model.named_parameters())
        # regression pins on the shipped configurations
        assert count_params(model) == 31053
        assert count_params(build(tiny_config())) == 1978409

    def test_forward_shapes(self, micro):
        model = build(micro).eval()
        out = model(T.Tensor(rng.standard_normal((2, 3, 32, 32))))
        assert [f.shape for f in out.pyramid] == [
            (2, 4, 8, 8), (2, 8, 4, 4), (2, 16, 2, 2), (2, 32, 1, 1)]
        assert out.fused.shape == (2, 60, 2, 2)
        assert out.refined.shape == (2, 16, 2, 2)
        assert out.pooled.shape == (2, 16)
        assert out.heatmaps.shape == (2, 2, 8, 8)

    def test_forward_accepts_plain_arrays(self, micro):
        model = build(micro).eval()
        out = model.forward(rng.standard_normal((1, 3, 32, 32)))
        assert out.heatmaps.shape == (1, 2, 8, 8)

    def test_all_toggles_off_runs(self):
        cfg = micro_config(use_glace=False, use_agent_attention=False,
                           use_gefb=False, use_dysample=False,
                           use_cbam=False, use_se=False)
        model = build(cfg).eval()
        out = model(T.Tensor(rng.standard_normal((1, 3, 32, 32))))
        assert out.heatmaps.shape == (1, 2, 8, 8)


class TestCheckpoint:
    def test_round_trip_preserves_forward(self, micro, tmp_path):
        model = build(micro)
        # move the BN running stats off their init so buffers are exercised
        model.train()
        with T.no_grad():
            model(T.Tensor(rng.standard_normal((2, 3, 32, 32))))
        path = tmp_path / "m.ckpt"
        checkpoint.save(model, path, step=7)
        loaded, step, opt_state = checkpoint.load(path)
        assert step == 7
        assert opt_state is None

        x = T.Tensor(rng.standard_normal((1, 3, 32, 32)))
        model.eval()
        loaded.eval()
        with T.no_grad():
            a = model(x).heatmaps.data
            b = loaded(x).heatmaps.data
        assert np.array_equal(a, b)

    def test_embedded_config_restored(self, micro, tmp_path):
        path = tmp_path / "m.ckpt"
        checkpoint.save(build(micro), path)
        loaded, _, _ = checkpoint.load(path)
        assert loaded.config == micro

    def test_truncated_file_rejected(self, micro, tmp_path):
        path = tmp_path / "m.ckpt"
        checkpoint.save(build(micro), path)
        raw = path.read_bytes()
        clipped = tmp_path / "clip.ckpt"
        clipped.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(FormatError):
            checkpoint.load(clipped)

    def test_bad_magic_rejected(self, micro, tmp_path):
        path = tmp_path / "m.ckpt"
        checkpoint.save(build(micro), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            checkpoint.load(path)

    def test_trailing_garbage_rejected(self, micro, tmp_path):
        path = tmp_path / "m.ckpt"
        checkpoint.save(build(micro), path)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(FormatError):
            checkpoint.load(path)

    def test_config_mismatch_names_tensor(self, micro, tmp_path):
        path = tmp_path / "m.ckpt"
        checkpoint.save(build(micro), path)
        other = micro_config(n_joints=3)
        with pytest.raises(FormatError) as err:
            checkpoint.load(path, config=other)
        assert "decoder.head" in str(err.value)

    def test_optimizer_state_round_trip(self, micro, tmp_path):
        model = build(micro)
        opt = Adam(model.named_parameters(), lr=1e-3)
        batch = random_batch(micro, B=1)
        train_step(model, batch, opt)
        path = tmp_path / "m.ckpt"
        checkpoint.save(model, path, step=1, optimizer=opt)
        _, step, opt_state = checkpoint.load(path)
        assert step == 1
        assert opt_state is not None
        ref = opt.state_dict()
        assert set(opt_state) == set(ref)
        for name, st in ref.items():
            assert int(opt_state[name]["step"]) == st["step"]
            assert np.array_equal(opt_state[name]["m"], st["m"])
            assert np.array_equal(opt_state[name]["v"], st["v"])

    def test_resume_matches_uninterrupted_run(self, micro, tmp_path):
        # 3 steps, checkpoint, 2 more must equal 5 straight steps bitwise.
        batch = random_batch(micro, B=2, seed=4)

        straight = build(micro)
        opt_a = Adam(straight.named_parameters(), lr=1e-3)
        for _ in range(5):
            train_step(straight, batch, opt_a)

        interrupted = build(micro)
        opt_b = Adam(interrupted.named_parameters(), lr=1e-3)
        for _ in range(3):
            train_step(interrupted, batch, opt_b)
        path = tmp_path / "m.ckpt"
        checkpoint.save(interrupted, path, step=3, optimizer=opt_b)

        resumed, step, opt_state = checkpoint.load(path)
        opt_c = Adam(resumed.named_parameters(), lr=1e-3)
        opt_c.load_state_dict(opt_state)
        for _ in range(2):
            train_step(resumed, batch, opt_c)

        pa = dict(straight.named_parameters())
        pb = dict(resumed.named_parameters())
        for name in pa:
            assert np.array_equal(pa[name].data, pb[name].data), name
        for (na, ba), (nb, bb) in zip(straight.named_buffers(),
                                      resumed.named_buffers()):
            assert na == nb
            assert np.array_equal(ba, bb), na


class TestAdam:
    def test_three_step_scalar_oracle(self):
        # Hand-rolled bias-corrected updates on a single scalar parameter
        # with a constant gradient.
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        m = v = 0.0
        x = 1.0
        for t in range(1, 4):
            p.grad = np.array([2.0])
            opt.step()
            m = 0.9 * m + 0.1 * 2.0
            v = 0.999 * v + 0.001 * 4.0
            m_hat = m / (1 - 0.9 ** t)
            v_hat = v / (1 - 0.999 ** t)
            x -= 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
            assert abs(p.data[0] - x) <= 1e-15

    def test_zero_lr_is_noop(self, micro):
        model = build(micro)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        opt = Adam(model.named_parameters(), lr=0.0)
        train_step(model, random_batch(micro, B=1), opt)
        for name, p in model.named_parameters():
            assert np.array_equal(p.data, before[name]), name

    def test_unused_parameters_skipped(self):
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        q = T.Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam([("p", p), ("q", q)], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert q.data[0] == 2.0
        assert "q" not in opt.state

    def test_duplicate_names_rejected(self):
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError):
            Adam([("p", p), ("p", p)], lr=0.1)

    def test_unknown_state_rejected(self):
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        with pytest.raises(KeyError):
            opt.load_state_dict(
                {"ghost": {"step": 1, "m": np.zeros(1), "v": np.zeros(1)}})
