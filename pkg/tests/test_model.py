import numpy as np
import pytest

from backwarp import ops
from backwarp.errors import ConfigError, ContractError
from backwarp.model import Model, ModelConfig
from backwarp.tensor import Tensor, concat, narrow, no_grad, repeat_batch


def tiny_config(**kw):
    base = dict(levels=3, channels=(8, 12, 16), frames_per_blur=3, max_disp=2,
                flow_widths=(16, 12), synth_width=12, stn_width=8, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def default_model():
    return Model(ModelConfig())


class TestConfig:
    def test_channel_count_must_match_levels(self):
        with pytest.raises(ConfigError):
            ModelConfig(levels=3, channels=(8, 8))

    def test_flow_needs_a_motion_branch(self):
        with pytest.raises(ConfigError):
            tiny_config(use_stn=False, use_motion_decoder=False, use_flow=True)

    def test_roundtrip_dict(self):
        cfg = tiny_config(use_stn=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncoder:
    def test_level_dims_and_channels(self, default_model):
        rng = np.random.default_rng(0)
        x = Tensor(rng.random((1, 3, 64, 64), np.float32))
        feats = default_model.encode(x)
        dims = [(f.shape[2], f.shape[3]) for f in feats]
        assert dims == [(64, 64), (32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]
        assert [f.shape[1] for f in feats] == [16, 32, 32, 64, 64, 96]

    def test_deterministic(self, default_model):
        rng = np.random.default_rng(1)
        x = rng.random((1, 3, 32, 32), np.float32)
        a = default_model.encode(Tensor(x.copy()))
        b = default_model.encode(Tensor(x.copy()))
        for fa, fb in zip(a, b):
            assert fa.data.tobytes() == fb.data.tobytes()


class TestDecoders:
    def test_reference_decode_shapes(self):
        m = Model(tiny_config())
        x = Tensor(np.random.default_rng(0).random((2, 3, 16, 16), np.float32))
        enc = m.encode(x)
        v3 = m.decode_reference(enc[2], None, 3)
        assert v3.shape == (2, 16, 4, 4)
        v2 = m.decode_reference(enc[1], v3, 2)
        assert v2.shape == (2, 12, 8, 8)

    def test_zero_weights_give_bias_only(self):
        m = Model(tiny_config())
        for name, p in m.params.items():
            if name.startswith("refdec/level3/") and name.endswith("weight"):
                p._buf[...] = 0.0
            if name.startswith("refdec/level3/") and name.endswith("bias"):
                p._buf[...] = 0.0
        x = Tensor(np.random.default_rng(0).random((1, 3, 8, 8), np.float32))
        enc = m.encode(x)
        out = m.decode_reference(enc[2], None, 3)
        assert not out.data.any()

    def test_gradient_reaches_both_decode_inputs(self):
        m = Model(tiny_config())
        rng = np.random.default_rng(2)
        enc_l = Tensor(rng.random((1, 12, 8, 8), np.float32), requires_grad=True)
        up = Tensor(rng.random((1, 16, 4, 4), np.float32), requires_grad=True)
        m.decode_reference(enc_l, up, 2).sum().backward()
        assert enc_l.grad is not None and np.abs(enc_l.grad).max() > 0
        assert up.grad is not None and np.abs(up.grad).max() > 0

    def test_stn_identity_at_init(self):
        m = Model(tiny_config())
        enc = Tensor(np.random.default_rng(3).random((2, 8, 12, 12), np.float32))
        pos = m.indexing.nonmiddle[0]
        key = m._offset_key(pos)
        transformed = m.stn[(1, key)](enc)
        assert np.array_equal(transformed.data, enc.data)

    def test_motion_decoder_bypass_switch(self):
        m = Model(tiny_config(use_motion_decoder=False))
        enc = Tensor(np.random.default_rng(4).random((1, 8, 12, 12), np.float32))
        pos = m.indexing.nonmiddle[1]
        out = m.decode_motion(enc, None, 1, pos)
        key = m._offset_key(pos)
        stn_out = m.stn[(1, key)](enc)
        assert out.data.tobytes() == stn_out.data.tobytes()

    def test_unknown_offset_rejected(self):
        m = Model(tiny_config())
        enc = Tensor(np.zeros((1, 8, 8, 8), np.float32))
        with pytest.raises(ContractError):
            m.decode_motion(enc, None, 1, m.indexing.ref_positions[0])

    def test_bank_matches_single_offset_path(self):
        m = Model(tiny_config())
        rng = np.random.default_rng(5)
        b = 2
        enc_l = Tensor(rng.random((2 * b, 8, 12, 12), np.float32))
        e0 = narrow(enc_l, 0, 0, b)
        e1 = narrow(enc_l, 0, b, b)
        half = len(m.indexing.nonmiddle) // 2
        sides = concat([repeat_batch(e0, half), repeat_batch(e1, half)], axis=0)
        bank = m._decode_motion_bank(sides, None, 1)
        for slot, pos in enumerate(m.indexing.nonmiddle):
            side = e0 if pos < m.indexing.n else e1
            single = m.decode_motion(side, None, 1, pos)
            assert np.array_equal(bank.data[slot * b:(slot + 1) * b], single.data), pos


class TestFlowEstimation:
    def test_zero_at_init(self):
        m = Model(tiny_config())
        rng = np.random.default_rng(6)
        v = Tensor(rng.random((2, 8, 8, 8), np.float32))
        up = Tensor(np.zeros((2, 2, 8, 8), np.float32))
        flow = m.estimate_flow_level(v, v, up, 1)
        assert flow.shape == (2, 2, 8, 8)
        assert not flow.data.any()

    def test_context_residual_identity_at_init(self):
        m = Model(tiny_config())
        rng = np.random.default_rng(7)
        flow = Tensor(rng.random((1, 2, 8, 8), np.float32))
        feats = Tensor(rng.random((1, 8, 8, 8), np.float32))
        out = m.refine_context(flow, feats)
        assert np.array_equal(out.data, flow.data)

    def test_context_gradient_reaches_flow(self):
        m = Model(tiny_config())
        rng = np.random.default_rng(8)
        flow = Tensor(rng.random((1, 2, 8, 8), np.float32), requires_grad=True)
        feats = Tensor(rng.random((1, 8, 8, 8), np.float32))
        m.refine_context(flow, feats).sum().backward()
        assert flow.grad is not None and np.abs(flow.grad).max() > 0


class TestForward:
    def test_count_law_n7(self, default_model):
        rng = np.random.default_rng(9)
        out = default_model.infer(rng.random((1, 3, 64, 64), np.float32),
                                  rng.random((1, 3, 64, 64), np.float32))
        for level in range(1, 7):
            assert out.frame_count(level) == 14
            assert out.flow_count(level) == 24

    def test_count_law_any_odd_n(self):
        for n in (3, 5):
            m = Model(tiny_config(frames_per_blur=n))
            rng = np.random.default_rng(n)
            out = m.infer(rng.random((1, 3, 16, 16), np.float32),
                          rng.random((1, 3, 16, 16), np.float32))
            assert out.frame_count(1) == 2 * n
            assert out.flow_count(1) == 2 * (2 * n) - 4

    def test_first_pass_finite_and_zero_flows(self, default_model):
        rng = np.random.default_rng(10)
        out = default_model.infer(rng.random((1, 3, 32, 32), np.float32),
                                  rng.random((1, 3, 32, 32), np.float32))
        for level in range(1, 7):
            assert not out.flows[level - 1].data.any()
            assert np.isfinite(out.frames_ref[level - 1].data).all()
            assert np.isfinite(out.frames_nm[level - 1].data).all()

    def test_batch_invariance_bitwise(self):
        m = Model(tiny_config())
        rng = np.random.default_rng(11)
        a0 = rng.random((2, 3, 16, 16), np.float32)
        a1 = rng.random((2, 3, 16, 16), np.float32)
        full = m.infer(a0, a1)
        one = m.infer(a0[:1], a1[:1])
        two = m.infer(a0[1:], a1[1:])
        for level in (1, 2, 3):
            for pos in range(m.indexing.n_total):
                fa = full.frame(1, pos).data
                assert np.array_equal(fa[:1], one.frame(1, pos).data)
                assert np.array_equal(fa[1:], two.frame(1, pos).data)
            fl = full.flows[level - 1].data.reshape(-1, 2, *full.level_dims[level - 1])
        whole = np.stack([full.flow(1, m_) .data for m_ in range(m.indexing.n_flows)])
        parts = np.stack([np.concatenate([one.flow(1, m_).data, two.flow(1, m_).data])
                          for m_ in range(m.indexing.n_flows)])
        assert np.array_equal(whole, parts)

    def test_ragged_input_dims(self):
        m = Model(tiny_config())
        rng = np.random.default_rng(12)
        out = m.infer(rng.random((1, 3, 20, 28), np.float32),
                      rng.random((1, 3, 20, 28), np.float32))
        assert out.level_dims == [(20, 28), (10, 14), (5, 7)]
        assert out.frames_ref[0].shape[2:] == (20, 28)
        assert out.flows[2].shape[2:] == (5, 7)

    def test_no_flow_ablation_forward(self):
        m = Model(tiny_config(use_flow=False))
        rng = np.random.default_rng(13)
        out = m.infer(rng.random((1, 3, 16, 16), np.float32),
                      rng.random((1, 3, 16, 16), np.float32))
        assert out.flows is None
        assert out.frame_count(1) == 6

    def test_every_parameter_gets_gradient_per_config(self):
        rng = np.random.default_rng(14)
        b0 = rng.random((1, 3, 16, 16), np.float32)
        b1 = rng.random((1, 3, 16, 16), np.float32)
        variants = [dict(), dict(use_stn=False), dict(use_motion_decoder=False),
                    dict(use_flow=False)]
        for kw in variants:
            m = Model(tiny_config(**kw))
            out = m.forward(b0, b1)
            rng2 = np.random.default_rng(15)
            terms = []
            for level in range(1, 4):
                tgt = Tensor(rng2.random(out.frames_ref[level - 1].shape).astype(np.float32))
                terms.append(ops.l1_mean(out.frames_ref[level - 1], tgt))
                tgt = Tensor(rng2.random(out.frames_nm[level - 1].shape).astype(np.float32))
                terms.append(ops.l1_mean(out.frames_nm[level - 1], tgt))
                if out.flows is not None:
                    tgt = Tensor(rng2.random(out.flows[level - 1].shape).astype(np.float32))
                    terms.append(ops.epe(out.flows[level - 1], tgt))
            loss = terms[0]
            for t in terms[1:]:
                loss = loss + t
            loss.backward()
            dead = [n for n, p in m.params.items()
                    if p.grad is None or not np.abs(p.grad).max() > 0]
            assert not dead, f"dead parameters under {kw}: {dead[:6]}"

    def test_seed_determinism_end_to_end(self):
        rng = np.random.default_rng(16)
        b0 = rng.random((1, 3, 16, 16), np.float32)
        b1 = rng.random((1, 3, 16, 16), np.float32)
        outs = []
        for _ in range(2):
            m = Model(tiny_config(seed=5))
            o = m.infer(b0, b1)
            outs.append(o.frames_ref[0].data.tobytes() + o.flows[0].data.tobytes())
        assert outs[0] == outs[1]

    def test_mismatched_pair_rejected(self, default_model):
        with pytest.raises(Exception):
            default_model.infer(np.zeros((1, 3, 32, 32), np.float32),
                                np.zeros((1, 3, 16, 16), np.float32))


def test_checkpoint_names_follow_convention(default_model):
    names = set(default_model.params)
    assert "encoder/level1/layer0/weight" in names
    assert "stn/level2/offset0/fc/bias" in names
    assert "motdec/level3/offset11/layer1/weight" in names
    assert "flow/level1/layer2/weight" in names
    assert "synthref/level6/layer0/bias" in names
    for n in names:
        assert n.endswith("/weight") or n.endswith("/bias"), n
