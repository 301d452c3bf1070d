import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import contrastive_ref, conv_out_len
from wav2ent.acoustic import (AcousticModel, EncoderConfig, MaskInfo, apply_time_mask, context_network,
                              contrastive_loss, diversity_loss, feature_encoder, gumbel_noise, pretrain,
                              quantize_gumbel, sample_distractors, sample_mask)
from wav2ent.core import Tensor, grad_check
from wav2ent.core import functional as F
from wav2ent.errors import EmptyManifest, InputTooShort, InsufficientMaskedFrames, ShapeMismatch

SMALL = dict(conv_spec=((8, 4, 2), (16, 3, 2)), d_model=16, n_layers=1, n_heads=2, entries=8)


def small_model(seed=0, **kw):
    return AcousticModel(EncoderConfig(**{**SMALL, **kw}), seed)


class TestFeatureEncoder:
    def test_default_spec_length(self):
        cfg = EncoderConfig()
        assert cfg.frames_for(16000) == 798 == conv_out_len(16000, cfg.conv_spec)
        assert cfg.total_stride == 20

    def test_receptive_field_gives_one_frame(self):
        model = small_model()
        rf = model.cfg.receptive_field
        assert feature_encoder(np.zeros(rf, np.float32), model).shape == (1, 16)
        with pytest.raises(InputTooShort):
            feature_encoder(np.zeros(rf - 1, np.float32), model)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(1, 200_000))
    def test_length_formula(self, n):
        cfg = EncoderConfig()
        expect = conv_out_len(n, cfg.conv_spec) if n >= cfg.receptive_field else 0
        assert cfg.frames_for(n) == expect

    def test_actual_output_matches_formula(self):
        model = small_model()
        for n in (8, 30, 101):
            assert feature_encoder(np.ones(n, np.float32), model).shape[0] == model.cfg.frames_for(n)

    def test_constant_input_gives_constant_frames(self):
        z = feature_encoder(np.zeros(400, np.float32), small_model()).data
        assert np.allclose(z, z[0], atol=1e-7)

    def test_batched_matches_single(self):
        model = small_model()
        x = np.random.default_rng(0).normal(size=(3, 90)).astype(np.float32)
        batch = feature_encoder(x, model).data
        assert np.allclose(batch[2], feature_encoder(x[2], model).data, atol=1e-6)

    @pytest.mark.parametrize("kw", [dict(conv_spec=()), dict(conv_spec=((8, 0, 1),)),
                                    dict(d_model=10), dict(mask_prob=0.0), dict(temperature=0.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            EncoderConfig(**{**SMALL, **kw})


class TestMasking:
    def test_p_one_masks_everything(self):
        assert sample_mask(17, 1.0, 2, np.random.default_rng(0)).all()

    def test_never_empty(self):
        rng = np.random.default_rng(1)
        # a forced span may start on the last frame and be clipped to one
        assert all(1 <= sample_mask(10, 1e-9, 2, rng).sum() <= 2 for _ in range(50))

    def test_span_clipped_at_end(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = sample_mask(5, 0.3, 3, rng)
            assert m.shape == (5,)

    def test_monte_carlo_fraction(self):
        rng = np.random.default_rng(2)
        p, M, T = 0.05, 2, 400
        frac = np.mean([sample_mask(T, p, M, rng).mean() for _ in range(10_000)])
        assert abs(frac - (1 - (1 - p) ** M)) < 0.02

    def test_too_short(self):
        with pytest.raises(InputTooShort):
            sample_mask(1, 0.5, 2, np.random.default_rng(0))

    def test_masked_hold_vector_and_rest_untouched(self):
        model = small_model()
        z = Tensor(np.random.default_rng(3).normal(size=(12, 16)).astype(np.float32))
        zm, info = apply_time_mask(z, model.cfg, np.random.default_rng(4), model.mask_vector)
        assert info.masked_indices.size > 0
        assert np.array_equal(zm.data[info.mask], np.broadcast_to(model.mask_vector.data, (info.mask.sum(), 16)))
        assert np.array_equal(zm.data[~info.mask], z.data[~info.mask])


class TestQuantizer:
    def test_inference_is_pure(self):
        model = small_model()
        z = Tensor(np.random.default_rng(0).normal(size=(6, 16)).astype(np.float32))
        q1, i1, _ = quantize_gumbel(z, model.quantizer, 2.0, False)
        q2, i2, _ = quantize_gumbel(z, model.quantizer, 2.0, False)
        assert np.array_equal(i1, i2) and np.array_equal(q1.data, q2.data)
        assert i1.shape == (6, 2) and q1.shape == (6, 16)

    def test_output_is_codebook_concatenation(self):
        model = small_model()
        z = Tensor(np.random.default_rng(1).normal(size=(4, 16)).astype(np.float32))
        q, idx, _ = quantize_gumbel(z, model.quantizer, 2.0, True, np.random.default_rng(0))
        cb = model.quantizer.codebook.data
        for t in range(4):
            assert np.allclose(q.data[t], np.concatenate([cb[0, idx[t, 0]], cb[1, idx[t, 1]]]), atol=1e-6)

    def test_training_needs_rng(self):
        model = small_model()
        with pytest.raises(ValueError):
            quantize_gumbel(Tensor(np.zeros((2, 16))), model.quantizer, 2.0, True)

    def test_large_tau_is_uniform(self):
        logits = np.random.default_rng(0).normal(size=8)
        soft = F.softmax(Tensor(logits / 1e9, dtype=np.float64)).data
        assert np.allclose(soft, 1 / 8)

    def test_straight_through_follows_soft_path(self):
        model = small_model().astype(np.float64)
        qz = model.quantizer
        z = Tensor(np.random.default_rng(5).normal(size=(3, 16)), dtype=np.float64)
        tau = 2.0
        noise = gumbel_noise((3, 2, 8), np.random.default_rng(9))
        cb = qz.codebook.data

        quantize_gumbel(z, qz, tau, True, np.random.default_rng(9))
        qz.logits.w.zero_grad()
        F.sum(quantize_gumbel(z, qz, tau, True, np.random.default_rng(9))[0]).backward()

        def soft_value(w):
            lg = (z.data @ w + qz.logits.b.data).reshape(3, 2, 8) + noise
            e = np.exp((lg - lg.max(-1, keepdims=True)) / tau)
            soft = e / e.sum(-1, keepdims=True)
            return float(np.einsum("tgv,gvd->", soft, cb))

        w0 = qz.logits.w.data.copy()
        worst = 0.0
        rng = np.random.default_rng(0)
        for _ in range(50):
            i, j = rng.integers(16), rng.integers(16)
            up, down = w0.copy(), w0.copy()
            up[i, j] += 1e-5
            down[i, j] -= 1e-5
            num = (soft_value(up) - soft_value(down)) / 2e-5
            a = qz.logits.w.grad[i, j]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        assert worst < 1e-2


class TestContextNetwork:
    def test_length_preserved(self):
        model = small_model()
        assert context_network(Tensor(np.zeros((9, 16))), model).shape == (9, 16)

    def test_zero_layers_is_norm_of_positions(self):
        model = small_model(n_layers=0)
        z = np.random.default_rng(0).normal(size=(5, 16)).astype(np.float32)
        from wav2ent.core.layers import sinusoidal_positions
        x = z + sinusoidal_positions(5, 16)
        ln = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
        assert np.allclose(context_network(Tensor(z), model).data, ln, atol=1e-5)

    def test_one_frame_reaches_all(self):
        model = small_model().astype(np.float64)
        z = np.random.default_rng(1).normal(size=(8, 16))
        base = context_network(Tensor(z, dtype=np.float64), model).data
        z[3, 0] += 1.0
        delta = np.abs(context_network(Tensor(z, dtype=np.float64), model).data - base).max(axis=-1)
        assert np.all(delta > 0)

    def test_width_mismatch(self):
        with pytest.raises(ShapeMismatch):
            context_network(Tensor(np.zeros((4, 8))), small_model())


def _mask_info(T, masked):
    m = np.zeros(T, bool)
    m[masked] = True
    return MaskInfo(np.flatnonzero(m), m, None)


class TestContrastive:
    def test_all_equal_is_log_k_plus_one(self):
        v = np.ones((6, 4))
        mi = _mask_info(6, [0, 2, 3, 5])
        loss = contrastive_loss(Tensor(v), Tensor(v), mi, 0.1, 10, np.random.default_rng(0)).item()
        assert loss == pytest.approx(math.log(11), abs=1e-5)

    def test_orthogonal_distractors(self):
        c = np.zeros((12, 12))
        q = np.zeros((12, 12))
        c[0, 0] = q[0, 0] = 1.0
        for t in range(1, 12):
            c[t, t] = 1.0
            q[t, t] = 1.0
        mi = _mask_info(12, [0])
        dis = np.arange(1, 11)[None, :]
        loss = contrastive_loss(Tensor(c, dtype=np.float64), Tensor(q, dtype=np.float64), mi, 0.1, 10,
                                np.random.default_rng(0), distractors=dis).item()
        expect = -math.log(math.exp(10) / (math.exp(10) + 10))
        assert loss == pytest.approx(expect, abs=1e-9)
        assert loss == pytest.approx(4.54e-4, abs=1e-6)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        c, q = rng.normal(size=(10, 6)), rng.normal(size=(10, 6))
        mi = _mask_info(10, [1, 2, 5, 6, 9])
        dis = sample_distractors(mi.masked_indices, 4, np.random.default_rng(1))
        got = contrastive_loss(Tensor(c, dtype=np.float64), Tensor(q, dtype=np.float64), mi, 0.1, 4,
                               None, distractors=dis).item()
        cands = [[t] + list(d) for t, d in zip(mi.masked_indices, dis)]
        assert got == pytest.approx(contrastive_ref(c, q, mi.masked_indices, cands, 0.1), abs=1e-5)

    def test_distractors_come_from_other_masked_frames(self):
        masked = np.array([1, 4, 7, 8])
        dis = sample_distractors(masked, 10, np.random.default_rng(0))
        for t, row in zip(masked, dis):
            assert t not in row and set(row) <= set(masked)
        wide = np.arange(0, 40, 2)
        dis = sample_distractors(wide, 10, np.random.default_rng(0))
        assert all(len(set(row)) == 10 for row in dis)

    def test_needs_two_masked(self):
        with pytest.raises(InsufficientMaskedFrames):
            contrastive_loss(Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))), _mask_info(4, [2]), 0.1, 3,
                             np.random.default_rng(0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        c, q = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
        mi = _mask_info(8, rng.choice(8, 3, replace=False))
        assert contrastive_loss(Tensor(c), Tensor(q), mi, 0.1, 5, rng).item() >= 0

    def test_unmasked_context_gets_no_gradient(self):
        rng = np.random.default_rng(4)
        c = Tensor(rng.normal(size=(10, 6)), requires_grad=True)
        q = Tensor(rng.normal(size=(10, 6)), requires_grad=True)
        mi = _mask_info(10, [2, 3, 7])
        contrastive_loss(c, q, mi, 0.1, 4, rng).backward()
        assert np.all(c.grad[~mi.mask] == 0)
        assert np.any(c.grad[mi.mask] != 0)

    def test_grad_on_inputs(self):
        rng = np.random.default_rng(5)
        c = Tensor(rng.normal(size=(10, 6)), requires_grad=True, dtype=np.float64)
        q = Tensor(rng.normal(size=(10, 6)), requires_grad=True, dtype=np.float64)
        mi = _mask_info(10, [0, 1, 4, 5, 8])
        dis = sample_distractors(mi.masked_indices, 4, rng)
        f = lambda: contrastive_loss(c, q, mi, 0.1, 4, None, distractors=dis)  # noqa: E731
        assert grad_check(f, [c, q], n_coords=60) < 1e-2

    def test_grad_through_encoder_and_context(self):
        model = small_model(seed=3).astype(np.float64)
        x = np.random.default_rng(6).normal(size=60)
        mask = np.zeros(14, bool)
        mask[[1, 2, 6, 7, 10, 11]] = True

        def loss():
            rng = np.random.default_rng(11)
            z = feature_encoder(Tensor(x, dtype=np.float64), model)
            q, _, probs = quantize_gumbel(z, model.quantizer, 2.0, True, rng)
            # targets as constants: finite differences cannot see the straight-through path
            q = Tensor(q.data)
            zm, mi = apply_time_mask(z, model.cfg, rng, model.mask_vector, mask=mask)
            c = context_network(zm, model)
            closs = contrastive_loss(c, q, mi, 0.1, 4, rng)
            return F.add(closs, F.mul(diversity_loss(F.mean(probs, axis=0)), 0.1))

        assert feature_encoder(x, model).shape[0] == 14
        params = model.encoder_parameters() + [model.mask_vector] + model.context_parameters()
        # the 1/kappa sharpening makes eps=1e-3 truncation error visible
        assert grad_check(loss, params, eps=1e-4, n_coords=60) < 1e-2


class TestDiversity:
    def test_uniform_is_zero(self):
        assert diversity_loss(Tensor(np.full((2, 8), 1 / 8))).item() == pytest.approx(0.0, abs=1e-6)

    def test_one_hot(self):
        p = np.zeros((2, 8))
        p[:, 3] = 1.0
        assert diversity_loss(Tensor(p, dtype=np.float64)).item() == pytest.approx(7 / 8, abs=1e-9)

    def test_random_matches_formula(self):
        p = np.random.default_rng(0).dirichlet(np.ones(16), size=3)
        ent = -(p * np.log(p)).sum(-1)
        expect = np.mean((16 - np.exp(ent)) / 16)
        assert diversity_loss(Tensor(p, dtype=np.float64)).item() == pytest.approx(expect, abs=1e-6)


class TestPretrain:
    def _waves(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        return [rng.normal(size=int(rng.integers(150, 220))).astype(np.float32) for _ in range(n)]

    def test_zero_steps_is_initialization(self):
        cfg = EncoderConfig(**SMALL)
        res = pretrain(self._waves(), cfg, 0, seed=4)
        init = AcousticModel(cfg, 4).state_dict()
        assert res.history == []
        assert all(np.array_equal(v, init[k]) for k, v in res.model.state_dict().items())

    def test_history_and_determinism(self):
        cfg = EncoderConfig(**SMALL)
        a = pretrain(self._waves(), cfg, 3, seed=1, batch_size=2)
        b = pretrain(self._waves(), cfg, 3, seed=1, batch_size=2)
        assert [h["step"] for h in a.history] == [1, 2, 3]
        assert a.history == b.history
        assert all(np.array_equal(v, b.model.state_dict()[k]) for k, v in a.model.state_dict().items())
        h = a.history[0]
        assert h["loss"] == pytest.approx(h["contrastive"] + cfg.diversity_weight * h["diversity"], rel=1e-5)

    def test_parameters_move(self):
        cfg = EncoderConfig(**SMALL)
        res = pretrain(self._waves(), cfg, 2, seed=0, batch_size=3)
        init = AcousticModel(cfg, 0).state_dict()
        assert not np.array_equal(res.model.state_dict()["convs.0"], init["convs.0"])

    def test_empty(self):
        with pytest.raises(EmptyManifest):
            pretrain([], EncoderConfig(**SMALL), 1, seed=0)
