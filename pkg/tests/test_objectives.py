"""Flow-matching objective, noise schedule, and semantic-alignment losses."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from melflow import synth
from melflow.config import RunConfig
from melflow.conditioning import ConditionEncoders
from melflow.dit import ContextBatch, build_denoiser
from melflow.objectives import (
    HUBERT_PROXY,
    MERT_PROXY,
    LossError,
    LossWeights,
    NoiseSchedule,
    SslHeads,
    TEACHER_SPECS,
    build_teachers,
    fm_loss,
    fm_target,
    make_noisy,
    precondition_x0,
    sample_timesteps,
    sigma_from_t,
    ssl_loss,
    temporal_align,
    total_loss,
)


class TestSchedule:
    def test_endpoints_fixed_for_all_shifts(self):
        for shift in (0.5, 1.0, 3.0, 6.0):
            s = NoiseSchedule(shift=shift)
            assert float(s.sigma(torch.tensor(0.0))) == pytest.approx(0.0)
            assert float(s.sigma(torch.tensor(1.0))) == pytest.approx(1.0)

    def test_shift_three_midpoint(self):
        s = NoiseSchedule(shift=3.0)
        assert float(s.sigma(torch.tensor(0.5))) == pytest.approx(0.75)

    def test_shift_one_is_identity(self):
        s = NoiseSchedule(shift=1.0)
        t = torch.linspace(0, 1, 11)
        assert torch.allclose(s.sigma(t), t, atol=1e-7)

    def test_monotone_increasing(self):
        for shift in (0.5, 1.0, 3.0, 6.0):
            s = NoiseSchedule(shift=shift)
            vals = s.sigma(torch.linspace(0, 1, 101))
            assert (vals[1:] > vals[:-1]).all()

    def test_larger_shift_pushes_sigma_up(self):
        t = torch.tensor(0.5)
        lo = float(NoiseSchedule(shift=1.0).sigma(t))
        hi = float(NoiseSchedule(shift=3.0).sigma(t))
        assert hi > lo

    def test_sigma_grid_descends_from_one_to_zero(self):
        s = NoiseSchedule(shift=3.0)
        grid = s.sigma_grid(30)
        assert len(grid) == 31
        assert grid[0] == pytest.approx(1.0)
        assert grid[-1] == pytest.approx(0.0)
        assert all(a > b for a, b in zip(grid, grid[1:]))

    def test_sigma_from_t_matches_formula(self):
        for t in (0.1, 0.4, 0.9):
            expected = 3.0 * t / (1 + 2.0 * t)
            assert float(sigma_from_t(torch.tensor(t), 3.0)) == pytest.approx(expected)

    def test_sample_timesteps_in_unit_interval(self):
        gen = torch.Generator().manual_seed(0)
        t = sample_timesteps(10000, gen)
        assert t.shape == (10000,)
        assert float(t.min()) > 0.0 and float(t.max()) < 1.0
        # logit-normal: median 0.5
        assert abs(float(t.median()) - 0.5) < 0.02


class TestNoisyPath:
    def test_endpoints(self):
        x0 = torch.randn(2, 3)
        z = torch.randn(2, 3)
        assert torch.equal(make_noisy(x0, z, 0.0), x0)
        assert torch.equal(make_noisy(x0, z, 1.0), z)

    def test_arithmetic_example(self):
        x0 = torch.tensor([2.0])
        z = torch.tensor([-1.0])
        assert float(make_noisy(x0, z, 0.25)) == pytest.approx(0.25 * -1 + 0.75 * 2)

    def test_target_is_displacement(self):
        x0 = torch.randn(4)
        z = torch.randn(4)
        assert torch.equal(fm_target(x0, z), z - x0)

    @given(
        sigma=st.floats(0.0, 1.0),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=40, deadline=None)
    def test_precondition_recovers_x0_for_true_velocity(self, sigma, seed):
        gen = torch.Generator().manual_seed(seed)
        x0 = torch.randn(3, 4, generator=gen)
        z = torch.randn(3, 4, generator=gen)
        x_noisy = make_noisy(x0, z, sigma)
        v_true = fm_target(x0, z)
        rec = precondition_x0(v_true, sigma, x_noisy)
        assert torch.allclose(rec, x0, rtol=1e-5, atol=1e-5)

    def test_precondition_at_sigma_zero_returns_input(self):
        x = torch.randn(2, 2)
        v = torch.randn(2, 2)
        assert torch.equal(precondition_x0(v, 0.0, x), x)


def tiny_model_and_ctx():
    cfg = RunConfig().replace(**{"dit.blocks": 2}).dit
    torch.manual_seed(0)
    model = build_denoiser(cfg, n_bins=128)
    enc = ConditionEncoders()
    with torch.no_grad():
        bundle = enc.encode(
            text="pop", lyric_ids=torch.tensor([10, 20, 30]), speaker_id=0
        )
    return model, ContextBatch.from_bundles([bundle, bundle])


class TestFmLoss:
    def test_zero_model_follows_sigma_squared_law(self):
        model, ctx = tiny_model_and_ctx()  # zero velocity at init
        gen = torch.Generator().manual_seed(1)
        schedule = NoiseSchedule(shift=3.0)
        x0 = torch.randn(2, 8, 16, 6, generator=gen)
        z = torch.randn(2, 8, 16, 6, generator=gen)
        t = torch.tensor([0.3, 0.8])
        loss = fm_loss(model, x0, z, t, ctx, schedule)
        sig = schedule.sigma(t)
        per = ((z - x0) ** 2).flatten(1).mean(1)
        expected = float((sig**2 * per).mean())
        assert float(loss) == pytest.approx(expected, rel=1e-5)

    def test_oracle_velocity_gives_zero_loss(self):
        schedule = NoiseSchedule(shift=3.0)

        class Oracle:
            def __call__(self, x, t, ctx, return_hidden=False):
                sig = schedule.sigma(torch.as_tensor(t)).view(-1, 1, 1, 1)
                out = (x - self.x0) / torch.clamp(1 - sig, min=1e-8) * 0 + self.v
                return (out, []) if return_hidden else out

        gen = torch.Generator().manual_seed(2)
        x0 = torch.randn(2, 8, 16, 4, generator=gen)
        z = torch.randn(2, 8, 16, 4, generator=gen)
        oracle = Oracle()
        oracle.x0 = x0
        oracle.v = z - x0
        loss = fm_loss(oracle, x0, z, torch.tensor([0.2, 0.7]), None, schedule)
        assert float(loss) == pytest.approx(0.0, abs=1e-10)

    def test_non_finite_loss_rejected(self):
        schedule = NoiseSchedule()

        class NanModel:
            def __call__(self, x, t, ctx, return_hidden=False):
                out = torch.full_like(x, float("nan"))
                return (out, []) if return_hidden else out

        x0 = torch.randn(1, 8, 16, 4)
        z = torch.randn(1, 8, 16, 4)
        with pytest.raises(LossError):
            fm_loss(NanModel(), x0, z, torch.tensor([0.5]), None, schedule)


class TestTeachers:
    def test_feature_dims_and_rates(self):
        teachers = build_teachers(n_bins=128)
        mel = synth.MelSpectrogram(torch.rand(1024, 128), frame_rate_hz=86.1328125)
        f_mert = teachers[MERT_PROXY].features_of(mel)
        f_hub = teachers[HUBERT_PROXY].features_of(mel)
        # 11.89 s of audio: 75 Hz -> 891, 50 Hz -> 594
        dur = 1024 / 86.1328125
        assert f_mert.shape == (round(dur * 75.0), 1024)
        assert f_hub.shape == (round(dur * 50.0), 768)

    def test_features_deterministic(self):
        teachers = build_teachers(n_bins=128)
        mel = synth.MelSpectrogram(torch.rand(256, 128), frame_rate_hz=86.1328125)
        a = teachers[MERT_PROXY].features_of(mel)
        b = build_teachers(n_bins=128)[MERT_PROXY].features_of(mel)
        assert torch.equal(a, b)

    def test_features_depend_on_content(self):
        teachers = build_teachers(n_bins=128)
        a = teachers[MERT_PROXY].features_of(
            synth.MelSpectrogram(torch.zeros(256, 128), 86.1328125)
        )
        b = teachers[MERT_PROXY].features_of(
            synth.MelSpectrogram(torch.ones(256, 128), 86.1328125)
        )
        assert not torch.allclose(a, b)

    def test_spec_table(self):
        assert TEACHER_SPECS[MERT_PROXY].dim == 1024
        assert TEACHER_SPECS[MERT_PROXY].rate_hz == 75.0
        assert TEACHER_SPECS[MERT_PROXY].chunk_s == 5.0
        assert TEACHER_SPECS[HUBERT_PROXY].dim == 768
        assert TEACHER_SPECS[HUBERT_PROXY].rate_hz == 50.0
        assert TEACHER_SPECS[HUBERT_PROXY].chunk_s == 30.0


class TestTemporalAlign:
    def test_identity_when_lengths_match(self):
        x = torch.randn(7, 5)
        assert torch.equal(temporal_align(x, 7), x)

    def test_constant_stays_constant(self):
        x = torch.ones(9, 3)
        out = temporal_align(x, 4)
        assert torch.allclose(out, torch.ones(4, 3))

    def test_linear_ramp_endpoints(self):
        x = torch.tensor([[0.0], [1.0]])
        out = temporal_align(x, 3)
        assert out.shape == (3, 1)
        assert float(out[0]) == pytest.approx(0.0)
        assert float(out[-1]) == pytest.approx(1.0)
        assert float(out[1]) == pytest.approx(0.5)

    def test_target_len_must_be_positive(self):
        with pytest.raises(Exception):
            temporal_align(torch.randn(4, 2), 0)


class TestSslLoss:
    def make_heads(self, d_model=16):
        torch.manual_seed(5)
        return SslHeads(d_model=d_model)

    def test_identical_projection_gives_zero(self):
        heads = self.make_heads()
        h = torch.randn(6, 16)
        feats = {
            MERT_PROXY: heads(MERT_PROXY, h).detach(),
            HUBERT_PROXY: heads(HUBERT_PROXY, h).detach(),
        }
        loss, parts = ssl_loss(h, feats, heads, LossWeights())
        assert float(loss) == pytest.approx(0.0, abs=1e-6)
        assert parts[MERT_PROXY] == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_projection_gives_one(self):
        heads = self.make_heads()
        h = torch.randn(4, 16)
        proj_m = heads(MERT_PROXY, h).detach()
        proj_h = heads(HUBERT_PROXY, h).detach()

        def orth(m):
            flipped = m.clone()
            flipped[:, 0::2] = m[:, 1::2] * -1
            flipped[:, 1::2] = m[:, 0::2]
            return flipped

        feats = {MERT_PROXY: orth(proj_m), HUBERT_PROXY: orth(proj_h)}
        loss, parts = ssl_loss(h, feats, heads, LossWeights())
        assert float(loss) == pytest.approx(1.0, abs=1e-5)

    def test_finetune_weighting(self):
        heads = self.make_heads()
        h = torch.randn(4, 16)
        proj_m = heads(MERT_PROXY, h).detach()
        proj_h = heads(HUBERT_PROXY, h).detach()

        feats = {MERT_PROXY: -proj_m, HUBERT_PROXY: -proj_h}  # cosine -1 -> dist 2
        weights = LossWeights(w_mert=1.0, w_hubert=0.01)
        loss, _ = ssl_loss(h, feats, heads, weights)
        # (1.0 * 2 + 0.01 * 2) / 2
        assert float(loss) == pytest.approx((2.0 + 0.02) / 2, abs=1e-5)

    def test_loss_range(self):
        heads = self.make_heads()
        h = torch.randn(5, 16)
        gen = torch.Generator().manual_seed(9)
        feats = {
            MERT_PROXY: torch.randn(5, 1024, generator=gen),
            HUBERT_PROXY: torch.randn(5, 768, generator=gen),
        }
        loss, _ = ssl_loss(h, feats, heads, LossWeights())
        assert 0.0 <= float(loss) <= 2.0

    def test_length_mismatch_is_aligned(self):
        heads = self.make_heads()
        h = torch.randn(8, 16)
        gen = torch.Generator().manual_seed(10)
        feats = {
            MERT_PROXY: torch.randn(20, 1024, generator=gen),
            HUBERT_PROXY: torch.randn(13, 768, generator=gen),
        }
        loss, _ = ssl_loss(h, feats, heads, LossWeights())
        assert torch.isfinite(loss)


class TestTotalLoss:
    def test_weighted_sum(self):
        w = LossWeights(lambda_ssl=0.5)
        out = total_loss(torch.tensor(1.0), torch.tensor(0.8), w)
        assert float(out) == pytest.approx(1.0 + 0.5 * 0.8)

    def test_lambda_zero_drops_ssl(self):
        w = LossWeights(lambda_ssl=0.0)
        out = total_loss(torch.tensor(0.7), torch.tensor(123.0), w)
        assert float(out) == pytest.approx(0.7)
