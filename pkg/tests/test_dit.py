"""Denoiser architecture: linear attention, modulation, patchify, LoRA."""

import pytest
import torch

from melflow.config import RunConfig
from melflow.conditioning import ConditionEncoders, sinusoidal_positions
from melflow.dit import (
    AdaLnSingle,
    BudgetError,
    ContextBatch,
    ConvFFN,
    Denoiser,
    LoraAdapter,
    LoraError,
    TimestepEmbedding,
    build_denoiser,
    linear_attention,
    modulation_mlp_count,
    modulation_parameter_count,
    rotary_angles,
)



def make_denoiser(**overrides):
    cfg = RunConfig().replace(**{f"dit.{k}": v for k, v in overrides.items()}).dit
    torch.manual_seed(cfg.seed)
    return build_denoiser(cfg, n_bins=128)


def bundle_for(text="pop", lyric_len=5, speaker=1, *, encoders=None):
    enc = encoders or ConditionEncoders()
    ids = torch.randint(10, 90, (lyric_len,))
    return enc.encode(text=text, lyric_ids=ids, speaker_id=speaker)


def trained_nudge(model, scale=0.02):
    """Randomize the zero-initialized tensors so outputs are not trivially 0."""
    gen = torch.Generator().manual_seed(1234)
    with torch.no_grad():
        for p in model.parameters():
            if p.abs().sum() == 0:
                p.add_(torch.randn(p.shape, generator=gen) * scale)


class TestCrossAttentionAddressing:
    def make(self, d=32, heads=4):
        torch.manual_seed(6)
        from melflow.dit import CrossAttention

        return CrossAttention(d, heads)

    def test_query_permutation_equivariance(self):
        # content-only addressing: shuffling latent tokens shuffles outputs
        attn = self.make()
        x = torch.randn(2, 9, 32)
        ctx = torch.randn(2, 5, 32)
        mask = torch.ones(2, 5, dtype=torch.bool)
        perm = torch.randperm(9, generator=torch.Generator().manual_seed(0))
        out = attn(x, ctx, mask)
        out_perm = attn(x[:, perm], ctx, mask)
        assert torch.allclose(out[:, perm], out_perm, atol=1e-6)

    def test_key_permutation_invariance(self):
        attn = self.make()
        x = torch.randn(2, 7, 32)
        ctx = torch.randn(2, 6, 32)
        mask = torch.ones(2, 6, dtype=torch.bool)
        perm = torch.randperm(6, generator=torch.Generator().manual_seed(1))
        a = attn(x, ctx, mask)
        b = attn(x, ctx[:, perm], mask[:, perm])
        assert torch.allclose(a, b, atol=1e-6)

    def test_masked_keys_never_contribute(self):
        attn = self.make()
        x = torch.randn(1, 4, 32)
        ctx = torch.randn(1, 5, 32)
        mask = torch.tensor([[True, True, False, True, False]])
        base = attn(x, ctx, mask)
        junk = ctx.clone()
        junk[:, ~mask[0]] = 1e4
        assert torch.allclose(base, attn(x, junk, mask), atol=1e-5)


class TestAbsolutePositions:
    def test_table_shape_and_range(self):
        pos = sinusoidal_positions(12, 16)
        assert pos.shape == (12, 16)
        assert float(pos.abs().max()) <= 1.0

    def test_rows_distinct(self):
        pos = sinusoidal_positions(64, 32)
        dists = (pos[None, :] - pos[:, None]).norm(dim=-1)
        dists.fill_diagonal_(1.0)
        assert float(dists.min()) > 1e-3

    def test_position_zero_is_sin0_cos0(self):
        pos = sinusoidal_positions(3, 8)
        assert torch.allclose(pos[0, :4], torch.zeros(4))
        assert torch.allclose(pos[0, 4:], torch.ones(4))

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_positions(4, 7)

    def test_prefix_stability(self):
        # longer sequences extend the table without changing earlier rows
        short = sinusoidal_positions(8, 16)
        long = sinusoidal_positions(32, 16)
        assert torch.equal(long[:8], short)

    def test_denoiser_tokens_carry_position(self):
        # the same cell at two time indices must produce different velocity
        # once any weight is nonzero; with zero init both are exactly zero
        model = make_denoiser()
        trained_nudge(model)
        ctx = ContextBatch.from_bundles([bundle_for()])
        cell = torch.randn(1, 8, 16, 1)
        x = torch.cat([cell, cell], dim=-1)
        v = model(x, 0.5, ctx)
        assert not torch.allclose(v[..., 0], v[..., 1], atol=1e-7)


class TestLinearAttention:
    def test_single_token_returns_value(self):
        q = torch.randn(2, 3, 1, 8)
        k = torch.randn(2, 3, 1, 8)
        v = torch.randn(2, 3, 1, 8)
        out = linear_attention(q, k, v)
        assert torch.allclose(out, v, rtol=1e-4, atol=1e-5)

    def test_matches_explicit_kernel_form(self):
        # O(L^2) evaluation of the same elu+1 kernel, token by token
        torch.manual_seed(0)
        q = torch.randn(1, 2, 6, 4)
        k = torch.randn(1, 2, 6, 4)
        v = torch.randn(1, 2, 6, 4)
        out = linear_attention(q, k, v)
        phi_q = torch.nn.functional.elu(q) + 1.0
        phi_k = torch.nn.functional.elu(k) + 1.0
        scores = torch.einsum("bhid,bhjd->bhij", phi_q, phi_k)
        ref = torch.einsum("bhij,bhjd->bhid", scores, v) / (
            scores.sum(-1, keepdim=True) + 1e-6
        )
        assert torch.allclose(out, ref, rtol=1e-4, atol=1e-5)

    def test_permutation_equivariance(self):
        torch.manual_seed(1)
        q = torch.randn(1, 2, 5, 4)
        k = torch.randn(1, 2, 5, 4)
        v = torch.randn(1, 2, 5, 4)
        perm = torch.randperm(5)
        out = linear_attention(q, k, v)
        out_p = linear_attention(q[:, :, perm], k[:, :, perm], v[:, :, perm])
        assert torch.allclose(out[:, :, perm], out_p, rtol=1e-4, atol=1e-5)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            linear_attention(
                torch.randn(1, 2, 5, 4), torch.randn(1, 2, 6, 4), torch.randn(1, 2, 5, 4)
            )

    def test_long_sequence_stays_finite(self):
        torch.manual_seed(4)
        q = torch.randn(1, 1, 512, 8)
        out = linear_attention(q, q, q)
        assert torch.isfinite(out).all()


class TestRotary:
    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            rotary_angles(4, 7)

    def test_tables_shape(self):
        cos, sin = rotary_angles(16, 8)
        assert cos.shape == (16, 4) and sin.shape == (16, 4)
        assert torch.allclose(cos[0], torch.ones(4))
        assert torch.allclose(sin[0], torch.zeros(4))


class TestModulation:
    def test_zero_init_identity(self):
        ada = AdaLnSingle(t_dim=32, d=16)
        out = ada(torch.randn(3, 32))
        assert torch.equal(out, torch.zeros(3, 96))

    def test_parameter_count_law(self):
        # one shared 6d projection plus a 6d offset vector per extra block
        one = modulation_parameter_count(make_denoiser(blocks=1))
        d = 128
        for n in (2, 4, 8):
            model = make_denoiser(blocks=n)
            assert modulation_parameter_count(model) == one + (n - 1) * 6 * d

    def test_single_shared_mlp(self):
        assert modulation_mlp_count(make_denoiser(blocks=6)) == 1

    def test_untrained_offsets_share_base_modulation(self):
        model = make_denoiser(blocks=4)
        t_emb = model.t_embed(torch.tensor([0.3]))
        base = model.adaln(t_emb)
        mods = [base + blk.mod_offset for blk in model.blocks]
        for m in mods[1:]:
            assert torch.equal(m, mods[0])


class TestConvFFN:
    def test_length_one_equals_pointwise_chain(self):
        torch.manual_seed(2)
        ffn = ConvFFN(d=8, expansion=2)
        x = torch.randn(1, 1, 8)
        out = ffn(x)
        silu = torch.nn.functional.silu
        w_in = ffn.pw_in.weight[:, :, 0]
        h = silu(x[0, 0] @ w_in.T + ffn.pw_in.bias)
        # depthwise conv at L=1 sees only the center tap of its kernel
        w_center = ffn.dw.weight[:, 0, ffn.dw.weight.shape[-1] // 2]
        h = silu(h * w_center + ffn.dw.bias)
        w_out = ffn.pw_out.weight[:, :, 0]
        ref = h @ w_out.T + ffn.pw_out.bias
        assert torch.allclose(out[0, 0], ref, rtol=1e-5, atol=1e-6)

    def test_zeroed_ffn_adds_nothing(self):
        ffn = ConvFFN(d=8, expansion=2)
        with torch.no_grad():
            ffn.dw.weight.zero_()
            ffn.dw.bias.zero_()
            ffn.pw_out.bias.zero_()
        x = torch.randn(2, 5, 8)
        assert torch.equal(ffn(x), torch.zeros(2, 5, 8))

    def test_translation_equivariance_in_interior(self):
        torch.manual_seed(3)
        ffn = ConvFFN(d=8, expansion=2)
        x = torch.randn(1, 12, 8)
        shifted = torch.roll(x, shifts=2, dims=1)
        out = ffn(x)
        out_s = ffn(shifted)
        # compare away from the roll seam
        assert torch.allclose(out[:, 3:9], out_s[:, 5:11], rtol=1e-4, atol=1e-5)


class TestDenoiser:
    def test_zero_velocity_at_init(self):
        model = make_denoiser()
        x = torch.randn(2, 8, 16, 12)
        ctx = ContextBatch.from_bundles([bundle_for(), bundle_for("rock", 3, 2)])
        v = model(x, torch.tensor([0.5, 0.5]), ctx)
        assert torch.equal(v, torch.zeros_like(x))

    def test_velocity_shape_matches_latent(self):
        model = make_denoiser()
        trained_nudge(model)
        x = torch.randn(1, 8, 16, 9)
        ctx = ContextBatch.from_bundles([bundle_for()])
        v = model(x, torch.tensor([0.25]), ctx)
        assert v.shape == x.shape

    def test_scalar_t_broadcasts(self):
        model = make_denoiser()
        trained_nudge(model)
        x = torch.randn(2, 8, 16, 4)
        ctx = ContextBatch.from_bundles([bundle_for(), bundle_for()])
        va = model(x, 0.3, ctx)
        vb = model(x, torch.tensor([0.3, 0.3]), ctx)
        assert torch.allclose(va, vb, atol=1e-6)

    def test_patchify_projects_per_time_column(self):
        model = make_denoiser()
        x = torch.randn(3, 8, 16, 10)
        tokens = model.patchify(x)
        assert tokens.shape == (3, 10, 128)
        # one token per latent frame: the projection of that frame's 8x16 cell
        col0 = x[:, :, :, 0].reshape(3, -1)
        ref0 = model.patch_proj(col0)
        assert torch.allclose(tokens[:, 0], ref0, atol=1e-6)

    def test_unpatchify_inverts_token_layout(self):
        model = make_denoiser()
        x = torch.randn(2, 8, 16, 7)
        tokens = x.permute(0, 3, 1, 2).reshape(2, 7, 8 * 16)
        back = model.unpatchify(tokens)
        assert back.shape == x.shape
        assert torch.equal(back, x)

    def test_patchify_rejects_wrong_geometry(self):
        model = make_denoiser()
        with pytest.raises(BudgetError):
            model.patchify(torch.randn(1, 8, 15, 10))

    def test_latent_budget_enforced(self):
        model = make_denoiser()
        ctx = ContextBatch.from_bundles([bundle_for()])
        x = torch.randn(1, 8, 16, 2585)
        with pytest.raises(BudgetError) as exc:
            model(x, 0.5, ctx)
        assert "2584" in str(exc.value)

    def test_timestep_changes_output_after_nudge(self):
        model = make_denoiser()
        trained_nudge(model)
        x = torch.randn(1, 8, 16, 6)
        ctx = ContextBatch.from_bundles([bundle_for()])
        v0 = model(x, 0.1, ctx)
        v1 = model(x, 0.9, ctx)
        assert not torch.allclose(v0, v1)

    def test_conditioning_changes_output_after_nudge(self):
        model = make_denoiser()
        trained_nudge(model)
        x = torch.randn(1, 8, 16, 6)
        ctx_a = ContextBatch.from_bundles([bundle_for("pop", 4, 1)])
        ctx_b = ContextBatch.from_bundles([bundle_for("metal", 7, 3)])
        assert not torch.allclose(model(x, 0.5, ctx_a), model(x, 0.5, ctx_b))

    def test_tap_hidden_index(self):
        for blocks, expected in ((1, 1), (2, 1), (3, 1), (8, 3), (24, 8)):
            model = make_denoiser(blocks=blocks)
            assert model.tap_index == expected

    def test_return_hidden_length(self):
        model = make_denoiser(blocks=4)
        x = torch.randn(1, 8, 16, 4)
        ctx = ContextBatch.from_bundles([bundle_for()])
        _, hiddens = model(x, 0.5, ctx, return_hidden=True)
        assert len(hiddens) == 4
        tap = model.tap_hidden(hiddens)
        assert torch.equal(tap, hiddens[model.tap_index - 1])


class TestTimestepEmbedding:
    def test_distinct_timesteps_distinct_embeddings(self):
        emb = TimestepEmbedding(dim=32)
        e = emb(torch.tensor([0.0, 0.5, 1.0]))
        assert e.shape == (3, 32)
        assert not torch.allclose(e[0], e[1])
        assert not torch.allclose(e[1], e[2])

    def test_follows_parameter_dtype(self):
        emb = TimestepEmbedding(dim=16).double()
        out = emb(torch.tensor([0.25], dtype=torch.float64))
        assert out.dtype == torch.float64


class TestLora:
    def make(self, model, rank=4):
        return LoraAdapter(model, rank=rank, alpha=8.0, targets=("self_attn", "cross_attn"))

    def test_fresh_adapter_is_identity(self):
        model = make_denoiser()
        trained_nudge(model)
        x = torch.randn(1, 8, 16, 6)
        ctx = ContextBatch.from_bundles([bundle_for()])
        base = model(x, 0.4, ctx)
        adapter = self.make(model)
        adapter.attach(model)
        try:
            assert torch.equal(model(x, 0.4, ctx), base)
        finally:
            adapter.detach(model)
        assert torch.equal(model(x, 0.4, ctx), base)

    def test_merge_unmerge_roundtrip(self):
        model = make_denoiser()
        trained_nudge(model)
        adapter = self.make(model)
        with torch.no_grad():
            for key in adapter.b:
                adapter.b[key].add_(torch.randn_like(adapter.b[key]) * 0.01)
        x = torch.randn(1, 8, 16, 6)
        ctx = ContextBatch.from_bundles([bundle_for()])
        adapter.attach(model)
        try:
            with_adapter = model(x, 0.4, ctx)
        finally:
            adapter.detach(model)
        adapter.merge_into(model)
        merged = model(x, 0.4, ctx)
        adapter.unmerge_from(model)
        restored = model(x, 0.4, ctx)
        assert torch.allclose(with_adapter, merged, rtol=1e-5, atol=1e-6)
        base = model(x, 0.4, ctx)
        assert torch.allclose(restored, base, atol=1e-6)

    def test_rank_must_be_below_min_fan(self):
        model = make_denoiser()
        with pytest.raises(LoraError):
            LoraAdapter(model, rank=128, alpha=1.0, targets=("self_attn",))

    def test_unmatched_targets_rejected(self):
        model = make_denoiser()
        with pytest.raises(LoraError):
            LoraAdapter(model, rank=2, alpha=1.0, targets=("nonexistent_layer",))

    def test_double_attach_rejected(self):
        model = make_denoiser()
        adapter = self.make(model)
        adapter.attach(model)
        try:
            with pytest.raises(LoraError):
                adapter.attach(model)
        finally:
            adapter.detach(model)

    def test_applied_context_manager(self):
        model = make_denoiser()
        trained_nudge(model)
        x = torch.randn(1, 8, 16, 4)
        ctx = ContextBatch.from_bundles([bundle_for()])
        base = model(x, 0.4, ctx)
        adapter = self.make(model)
        with torch.no_grad():
            for key in adapter.b:
                adapter.b[key].add_(0.05)
        with adapter.applied(model):
            inside = model(x, 0.4, ctx)
        after = model(x, 0.4, ctx)
        assert not torch.allclose(inside, base)
        assert torch.equal(after, base)

    def test_adapter_trains_while_base_frozen(self):
        model = make_denoiser()
        trained_nudge(model)
        adapter = self.make(model)
        base_params = [p.clone() for p in model.parameters()]
        x = torch.randn(1, 8, 16, 4)
        with torch.no_grad():
            ctx = ContextBatch.from_bundles([bundle_for()])
        opt = torch.optim.SGD(adapter.parameters(), lr=0.1)
        adapter.attach(model)
        try:
            for _ in range(3):
                opt.zero_grad()
                loss = model(x, 0.4, ctx).pow(2).mean()
                loss.backward()
                opt.step()
        finally:
            adapter.detach(model)
        for p, ref in zip(model.parameters(), base_params):
            assert torch.equal(p, ref)

    def test_key_escaping(self):
        model = make_denoiser()
        adapter = self.make(model)
        assert len(adapter.a) > 0
        for key in adapter.a:
            assert "." not in key
            assert "__" in key
