import os
import subprocess
import sys

import numpy as np
import pytest

import oracles
from acm_unet import engine as eg
from acm_unet import model as md
from acm_unet.engine import F64, Tensor
from acm_unet.model import (
    AdapterToMap,
    AdapterToTokens,
    ChecksumMismatch,
    ConfigMismatch,
    InvalidConfig,
    ModelConfig,
    SegHead,
    UpBlock,
    build_model,
    count_params,
    load_checkpoint,
    save_checkpoint,
)

rng = np.random.default_rng(31)


def desk_cfg(**kw):
    base = dict(base_width=8, n_vss=1, num_classes=4, input_size=32,
                depths=(1, 1, 1), d_state=4)
    base.update(kw)
    return ModelConfig(**base).validate()


class TestConfig:
    def test_validation_errors(self):
        with pytest.raises(InvalidConfig):
            ModelConfig(base_width=2).validate()
        with pytest.raises(InvalidConfig):
            ModelConfig(input_size=40).validate()
        with pytest.raises(InvalidConfig):
            ModelConfig(n_vss=-1).validate()
        with pytest.raises(InvalidConfig):
            ModelConfig(num_classes=1).validate()
        with pytest.raises(InvalidConfig):
            ModelConfig(depths=(1, 2)).validate()

    def test_text_roundtrip(self):
        cfg = desk_cfg(use_mswt=False, expansion_factor=2.0)
        again = ModelConfig.from_text(cfg.to_text())
        assert again == cfg


class TestBuild:
    def test_same_seed_bit_identical(self):
        cfg = desk_cfg()
        m1 = build_model(cfg, seed=5)
        m2 = build_model(cfg, seed=5)
        for (n1, p1), (n2, p2) in zip(m1.named_parameters(),
                                      m2.named_parameters()):
            assert n1 == n2
            assert np.array_equal(p1.data, p2.data), n1

    def test_different_seed_differs(self):
        cfg = desk_cfg()
        m1 = build_model(cfg, seed=5)
        m2 = build_model(cfg, seed=6)
        diffs = sum(not np.array_equal(p1.data, p2.data)
                    for (_, p1), (_, p2) in zip(m1.named_parameters(),
                                                m2.named_parameters()))
        assert diffs > 0

    def test_vss_toggle_removes_parameters(self):
        m = build_model(desk_cfg(use_vss=False), 0)
        names = [n for n, _ in m.named_parameters()]
        assert not any("vss" in n or "to_tokens" in n or "to_map" in n
                       for n in names)
        m2 = build_model(desk_cfg(), 0)
        assert any("vss" in n for n, _ in m2.named_parameters())

    def test_mswt_toggle_removes_parameters(self):
        m = build_model(desk_cfg(use_mswt=False), 0)
        assert not any("mswt" in n for n, _ in m.named_parameters())

    def test_cross_process_determinism(self):
        code = (
            "import numpy as np, hashlib\n"
            "from acm_unet.model import ModelConfig, build_model\n"
            "from acm_unet.engine import Tensor\n"
            "cfg = ModelConfig(base_width=8, n_vss=1, num_classes=4,"
            " input_size=32, depths=(1,1,1), d_state=4)\n"
            "m = build_model(cfg, seed=9).eval()\n"
            "x = Tensor(np.random.default_rng(3).uniform("
            "0, 1, (1, 3, 32, 32)).astype(np.float32))\n"
            "h = hashlib.sha256(m(x).data.tobytes()).hexdigest()\n"
            "print(h)\n"
        )
        outs = {subprocess.run([sys.executable, "-c", code], cwd="/root/pkg",
                               capture_output=True, text=True,
                               check=True).stdout.strip()
                for _ in range(2)}
        assert len(outs) == 1


class TestEncoderLadder:
    def test_desk_ladder(self):
        m = build_model(desk_cfg(), 0).eval()
        x = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
        f = m.encoder_forward(x)
        assert f.f1.shape == (1, 8, 16, 16)
        assert f.f2.shape == (1, 32, 8, 8)
        assert f.f3.shape == (1, 64, 4, 4)
        assert f.f4.shape == (1, 128, 2, 2)

    def test_min_size_ladder(self):
        cfg = ModelConfig(base_width=4, n_vss=1, num_classes=2, input_size=16,
                          depths=(1, 1, 1), d_state=4).validate()
        m = build_model(cfg, 0).eval()
        f = m.encoder_forward(Tensor(np.zeros((1, 3, 16, 16), np.float32)))
        assert f.f4.shape == (1, 64, 1, 1)

    def test_vss_toggle_preserves_shapes(self):
        x = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
        shapes = []
        for use_vss in (False, True):
            m = build_model(desk_cfg(use_vss=use_vss), 0).eval()
            f = m.encoder_forward(x)
            shapes.append((f.f1.shape, f.f2.shape, f.f3.shape, f.f4.shape))
        assert shapes[0] == shapes[1]

    def test_wrong_input_rejected(self):
        m = build_model(desk_cfg(), 0)
        with pytest.raises(eg.ShapeMismatch):
            m.encoder_forward(Tensor(np.zeros((1, 3, 16, 16), np.float32)))
        with pytest.raises(eg.ShapeMismatch):
            m.encoder_forward(Tensor(np.zeros((1, 1, 32, 32), np.float32)))


class TestAdapters:
    def test_identity_roundtrip_on_prenormalized_input(self):
        c = 6
        r = np.random.default_rng(0)
        to_t = AdapterToTokens(r, c, c)
        to_m = AdapterToMap(r, c, c)
        to_t.proj.weight.data[:] = np.eye(c, dtype=np.float32)
        to_t.proj.bias.data[:] = 0.0
        to_m.proj.weight.data[:] = np.eye(c, dtype=np.float32)
        to_m.proj.bias.data[:] = 0.0
        # per-position zero-mean unit-variance channels, so LN is a no-op
        raw = rng.standard_normal((1, c, 3, 3)).astype(np.float32)
        raw -= raw.mean(axis=1, keepdims=True)
        raw /= raw.std(axis=1, keepdims=True)
        f = Tensor(raw)
        rec = to_m(to_t(f))
        assert np.abs(rec.data - f.data).max() < 1e-5

    def test_shape_roundtrip(self):
        r = np.random.default_rng(1)
        to_t = AdapterToTokens(r, 8, 8)
        to_m = AdapterToMap(r, 8, 8)
        for h, w in [(2, 2), (3, 5)]:
            f = Tensor(rng.uniform(-1, 1, (2, 8, h, w)).astype(np.float32))
            t = to_t(f)
            assert t.shape == (2, h, w, 8)
            assert to_m(t).shape == (2, 8, h, w)


class TestDecoder:
    def test_upsample_block_shape_contract(self):
        r = np.random.default_rng(0)
        ub = UpBlock(r, 128, 64)
        prev = Tensor(rng.uniform(-1, 1, (1, 128, 2, 2)).astype(np.float32))
        skip = Tensor(rng.uniform(-1, 1, (1, 64, 4, 4)).astype(np.float32))
        assert ub(prev, skip).shape == (1, 64, 4, 4)

    def test_spatial_ratio_enforced(self):
        r = np.random.default_rng(0)
        ub = UpBlock(r, 16, 8)
        prev = Tensor(np.zeros((1, 16, 4, 4), np.float32))
        skip = Tensor(np.zeros((1, 8, 4, 4), np.float32))
        with pytest.raises(eg.ShapeMismatch):
            ub(prev, skip)

    def test_mswt_off_equals_truncated_pipeline(self):
        from acm_unet.layers import bilinear_upsample2x
        r = np.random.default_rng(3)
        ub = UpBlock(r, 16, 8, use_mswt=False)
        prev = Tensor(rng.uniform(-1, 1, (1, 16, 4, 4)).astype(np.float32))
        skip = Tensor(rng.uniform(-1, 1, (1, 8, 8, 8)).astype(np.float32))
        full = ub(prev, skip)
        x = bilinear_upsample2x(ub.reduce(prev))
        x = eg.concat([x, skip], axis=1)
        manual = ub.res(ub.fuse(x))
        assert np.array_equal(full.data, manual.data)

    def test_seg_head_shape_and_zero_case(self):
        r = np.random.default_rng(0)
        head = SegHead(r, 16, 9)
        x = Tensor(rng.uniform(-1, 1, (1, 16, 16, 16)).astype(np.float32))
        y = head(x)
        assert y.shape == (1, 9, 32, 32)
        for p in head.parameters():
            p.data[:] = 0.0
        z = head(x)
        assert np.abs(z.data).max() == 0.0
        # zero logits -> uniform softmax
        e = np.exp(z.data)
        p = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(p, 1.0 / 9)


class TestForward:
    def test_desk_forward_finite(self):
        m = build_model(desk_cfg(), 0)
        x = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32))
        y = m(x)
        assert y.shape == (2, 4, 32, 32)
        assert np.isfinite(y.data).all()

    def test_batch_independence_eval(self):
        m = build_model(desk_cfg(), 3).eval()
        x = rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
        y = m(Tensor(x)).data
        y0 = m(Tensor(x[0:1])).data
        y1 = m(Tensor(x[1:2])).data
        assert np.abs(np.concatenate([y0, y1]) - y).max() < 1e-5

    def test_eval_forward_pure(self):
        m = build_model(desk_cfg(), 1).eval()
        x = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
        assert np.array_equal(m(x).data, m(x).data)

    def test_toggle_algebra_trains(self):
        from acm_unet.engine import GradTape, backward
        from acm_unet.losses import LossConfig, total_loss
        x = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
        labels = rng.integers(0, 4, (1, 32, 32)).astype(np.float32)
        for use_mswt in (False, True):
            for use_vss in (False, True):
                m = build_model(desk_cfg(use_mswt=use_mswt,
                                         use_vss=use_vss), 0)
                with GradTape() as tape:
                    loss = total_loss(m(x), labels, LossConfig(0.5))
                assert np.isfinite(loss.item())
                grads = backward(tape, loss)
                assert all(np.isfinite(g.data).all() for g in grads.values())


class TestParamsAndCheckpoint:
    def test_tiny_closed_form_count(self):
        cfg = ModelConfig(base_width=4, n_vss=0, num_classes=2, input_size=16,
                          use_mswt=False, use_vss=False, depths=(1, 1, 1))
        m = build_model(cfg.validate(), 0)
        assert count_params(m) == oracles.tiny_model_params(C=4, num_classes=2)

    def test_count_monotone_in_width(self):
        n8 = count_params(build_model(desk_cfg(base_width=8), 0))
        n16 = count_params(build_model(desk_cfg(base_width=16), 0))
        assert n8 < n16

    def test_checkpoint_roundtrip_bit_identical(self, tmp_path):
        m = build_model(desk_cfg(), 2)
        x = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32))
        m(x)  # move the batch-norm running stats off their init
        path = tmp_path / "model.ckpt"
        save_checkpoint(m, path, step=17, seed=2)
        m2, meta, _ = load_checkpoint(path)
        assert meta == {"step": 17, "seed": 2}
        m.eval()
        m2.eval()
        assert np.array_equal(m(x).data, m2(x).data)

    def test_checkpoint_crc_guard(self, tmp_path):
        m = build_model(desk_cfg(), 0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(m, path)
        blob = bytearray(path.read_bytes())
        blob[100] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(path)

    def test_checkpoint_magic_guard(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(md.CheckpointError):
            load_checkpoint(path)

    def test_optimizer_state_roundtrip(self, tmp_path):
        from acm_unet.optim import AdamW
        m = build_model(desk_cfg(), 0)
        opt = AdamW(m.parameters(), lr=1e-3)
        for p in m.parameters():
            p.grad = eg.Tensor(np.ones_like(p.data))
        opt.step()
        path = tmp_path / "model.ckpt"
        save_checkpoint(m, path, optimizer=opt)
        _, _, state = load_checkpoint(path)
        assert set(state) == {p.name for p in m.parameters()}
        m_name = m.parameters()[0].name
        assert np.allclose(state[m_name][0], opt.m[0], atol=1e-7)
