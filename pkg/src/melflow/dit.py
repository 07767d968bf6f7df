"""Linear-attention diffusion transformer denoiser.

Latent frames are patchified into one token per time step and tagged with a
sinusoidal absolute position. Blocks apply rotary-phase linear self-attention,
content-only softmax cross-attention over the concatenated conditioning
sequence, and a 1D convolutional feed-forward. Timestep modulation is
AdaLN-single: one shared MLP produces the base (shift, scale, gate) set and
every block adds only a learned offset. LoRA adapters can wrap the attention
projections without touching base weights.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import (
    SPEAKER_EMB_DIM,
    TEXT_EMB_DIM,
    ConditionBundle,
    sinusoidal_positions,
)
from .config import (
    LATENT_CHANNELS,
    MAX_LATENT_TOKENS,
    MAX_LYRIC_TOKENS,
    MAX_TEXT_TOKENS,
    SPATIAL_FACTOR,
    DitSection,
)

ATTN_EPS = 1e-6


class BudgetError(ValueError):
    pass


class LoraError(ValueError):
    pass


def rotary_angles(n_pos: int, dim: int, device=None, base: float = 10000.0):
    """cos/sin tables [n_pos, dim/2] for pairwise phase rotation."""
    if dim % 2:
        raise ValueError(f"rotary dim must be even, got {dim}")
    freqs = base ** (-torch.arange(0, dim, 2, device=device).float() / dim)
    angles = torch.arange(n_pos, device=device).float()[:, None] * freqs[None, :]
    return angles.cos(), angles.sin()


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive channel pairs of x [..., L, dim] by position phase."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, eps: float = ATTN_EPS):
    """Kernelized attention, O(L) in sequence length.

    output = phi(q) [phi(k)^T v] / (phi(q) [phi(k)^T 1] + eps), phi = elu + 1.
    Contains no positional term: permuting tokens permutes outputs identically.
    """
    if q.shape != k.shape or k.shape != v.shape:
        raise ValueError(f"q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")
    phi_q = F.elu(q) + 1.0
    phi_k = F.elu(k) + 1.0
    kv = torch.einsum("...ld,...le->...de", phi_k, v)
    ksum = phi_k.sum(dim=-2)
    num = torch.einsum("...ld,...de->...le", phi_q, kv)
    den = torch.einsum("...ld,...d->...l", phi_q, ksum) + eps
    return num / den.unsqueeze(-1)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, l, d = x.shape
    return x.view(b, l, heads, d // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, l, dh = x.shape
    return x.transpose(1, 2).reshape(b, l, h * dh)


class LinearSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads or (d // heads) % 2:
            raise ValueError(f"d_model {d} needs an even per-head dim over {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (_split_heads(t, self.heads) for t in (q, k, v))
        cos, sin = rotary_angles(x.shape[1], q.shape[-1], device=x.device)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)
        return self.out(_merge_heads(linear_attention(q, k, v)))


class CrossAttention(nn.Module):
    """Softmax attention from latent tokens to the condition sequence.

    Purely content-addressed: no phase rotation on either side. Position
    lives in the token features themselves (absolute tables on both the
    latent and lyric streams), so retrieval never fights a rotation whose
    axes do not correspond.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads or (d // heads) % 2:
            raise ValueError(f"d_model {d} needs an even per-head dim over {heads} heads")
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, ctx_mask: torch.Tensor):
        # x: [B, L, d]; ctx: [B, M, d]; ctx_mask: [B, M] bool, False on padding
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(ctx), self.heads)
        v = _split_heads(self.v(ctx), self.heads)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(
            ~ctx_mask[:, None, None, :], torch.finfo(scores.dtype).min
        )
        att = scores.softmax(dim=-1)
        return self.out(_merge_heads(att @ v))


class ConvFFN(nn.Module):
    """Pointwise expand, depthwise kernel-3 temporal conv, pointwise project."""

    def __init__(self, d: int, expansion: int):
        super().__init__()
        h = d * expansion
        self.pw_in = nn.Conv1d(d, h, 1)
        self.dw = nn.Conv1d(h, h, 3, padding=1, groups=h)
        self.pw_out = nn.Conv1d(h, d, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.transpose(1, 2)  # [B, d, L]
        y = F.silu(self.pw_in(y))
        y = F.silu(self.dw(y))
        return self.pw_out(y).transpose(1, 2)


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"timestep embedding dim must be even, got {dim}")
        self.dim = dim
        self.lin1 = nn.Linear(dim, dim)
        self.lin2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        dtype = self.lin1.weight.dtype
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, device=t.device, dtype=dtype) / half
        )
        angles = t.to(dtype)[:, None] * 1000.0 * freqs[None, :]
        emb = torch.cat([angles.sin(), angles.cos()], dim=-1)
        return self.lin2(F.silu(self.lin1(emb)))


class AdaLnSingle(nn.Module):
    """The one shared modulation MLP: timestep embedding -> 6*d base set.

    Zero-initialized so untrained gates are zero and blocks start as
    identities on their modulated branches.
    """

    def __init__(self, t_dim: int, d: int):
        super().__init__()
        self.proj = nn.Linear(t_dim, 6 * d)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, t_emb: torch.Tensor) -> torch.Tensor:
        return self.proj(F.silu(t_emb))


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DitBlock(nn.Module):
    def __init__(self, d: int, heads: int, ffn_expansion: int):
        super().__init__()
        self.norm_sa = nn.LayerNorm(d, elementwise_affine=False)
        self.self_attn = LinearSelfAttention(d, heads)
        self.norm_ca = nn.LayerNorm(d, elementwise_affine=False)
        self.cross_attn = CrossAttention(d, heads)
        self.norm_ffn = nn.LayerNorm(d, elementwise_affine=False)
        self.ffn = ConvFFN(d, ffn_expansion)
        # This block's only modulation parameters: an offset on the shared base.
        self.mod_offset = nn.Parameter(torch.zeros(6 * d))

    def forward(self, x, base_mod, ctx, ctx_mask):
        mod = base_mod + self.mod_offset
        shift_sa, scale_sa, gate_sa, shift_ffn, scale_ffn, gate_ffn = mod.chunk(6, dim=-1)
        h = _modulate(self.norm_sa(x), shift_sa, scale_sa)
        x = x + gate_sa.unsqueeze(1) * self.self_attn(h)
        x = x + self.cross_attn(self.norm_ca(x), ctx, ctx_mask)
        h = _modulate(self.norm_ffn(x), shift_ffn, scale_ffn)
        x = x + gate_ffn.unsqueeze(1) * self.ffn(h)
        return x


@dataclass
class ContextBatch:
    """Padded, masked condition sequences for a batch."""

    text: torch.Tensor  # [B, Lt, d_text]
    text_mask: torch.Tensor  # [B, Lt] bool
    lyric: torch.Tensor  # [B, Ll, d_lyric]
    lyric_mask: torch.Tensor  # [B, Ll] bool
    speaker: torch.Tensor  # [B, d_speaker]

    @staticmethod
    def from_bundles(bundles: list[ConditionBundle]) -> "ContextBatch":
        def pad_stack(seqs, masks=None):
            m = max(s.shape[0] for s in seqs)
            out = torch.zeros(len(seqs), m, seqs[0].shape[1], dtype=seqs[0].dtype)
            valid = torch.zeros(len(seqs), m, dtype=torch.bool)
            for i, s in enumerate(seqs):
                out[i, : s.shape[0]] = s
                valid[i, : s.shape[0]] = True if masks is None else masks[i]
            return out, valid

        text, text_mask = pad_stack([b.text_emb for b in bundles])
        lyric, lyric_mask = pad_stack(
            [b.lyric_emb for b in bundles], [b.lyric_mask for b in bundles]
        )
        return ContextBatch(
            text=text,
            text_mask=text_mask,
            lyric=lyric,
            lyric_mask=lyric_mask,
            speaker=torch.stack([b.speaker_emb for b in bundles]),
        )


class Denoiser(nn.Module):
    """Velocity-field transformer over patchified latents.

    One latent time frame becomes one token (the flattened channel-by-freq
    column, linearly projected). The REPA tap is the post-block activation at
    1-indexed block ceil(n_blocks/3).
    """

    def __init__(
        self,
        d_model: int = 128,
        blocks: int = 8,
        heads: int = 4,
        ffn_expansion: int = 2,
        d_lyric: int = 128,
        t_embed_dim: int = 128,
        n_bins: int = 128,
        latent_channels: int = LATENT_CHANNELS,
        d_text: int = TEXT_EMB_DIM,
        d_speaker: int = SPEAKER_EMB_DIM,
    ):
        super().__init__()
        if n_bins % SPATIAL_FACTOR:
            raise ValueError(f"n_bins must divide {SPATIAL_FACTOR}, got {n_bins}")
        self.d_model = d_model
        self.n_blocks = blocks
        self.latent_channels = latent_channels
        self.f_lat = n_bins // SPATIAL_FACTOR
        self.in_dim = latent_channels * self.f_lat
        self.patch_proj = nn.Linear(self.in_dim, d_model)
        self.t_embed = TimestepEmbedding(t_embed_dim)
        self.adaln = AdaLnSingle(t_embed_dim, d_model)
        self.text_proj = nn.Linear(d_text, d_model)
        self.lyric_proj = nn.Linear(d_lyric, d_model)
        self.speaker_proj = nn.Linear(d_speaker, d_model)
        self.blocks = nn.ModuleList(
            DitBlock(d_model, heads, ffn_expansion) for _ in range(blocks)
        )
        self.final_norm = nn.LayerNorm(d_model, elementwise_affine=False)
        self.head = nn.Linear(d_model, self.in_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def tap_index(self) -> int:
        """1-indexed REPA tap block: ceil(n_blocks / 3)."""
        return math.ceil(self.n_blocks / 3)

    def patchify(self, latent: torch.Tensor) -> torch.Tensor:
        b, c, f, t = latent.shape
        if c != self.latent_channels or f != self.f_lat:
            raise BudgetError(
                f"latent [{c}x{f}x{t}] does not match model geometry "
                f"[{self.latent_channels}x{self.f_lat}]"
            )
        tokens = latent.permute(0, 3, 1, 2).reshape(b, t, self.in_dim)
        return self.patch_proj(tokens)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b, t, _ = tokens.shape
        return (
            tokens.view(b, t, self.latent_channels, self.f_lat).permute(0, 2, 3, 1)
        )

    def _validate_budgets(self, n_tokens: int, ctx: ContextBatch) -> None:
        if n_tokens > MAX_LATENT_TOKENS:
            raise BudgetError(f"{n_tokens} latent tokens, budget is {MAX_LATENT_TOKENS}")
        if ctx.text.shape[1] > MAX_TEXT_TOKENS:
            raise BudgetError(f"{ctx.text.shape[1]} text tokens, budget is {MAX_TEXT_TOKENS}")
        if ctx.lyric.shape[1] > MAX_LYRIC_TOKENS:
            raise BudgetError(f"{ctx.lyric.shape[1]} lyric tokens, budget is {MAX_LYRIC_TOKENS}")

    def build_context(self, ctx: ContextBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Project the three condition paths to d_model and concatenate."""
        parts = [
            self.text_proj(ctx.text),
            self.lyric_proj(ctx.lyric),
            self.speaker_proj(ctx.speaker).unsqueeze(1),
        ]
        b = ctx.text.shape[0]
        spk_mask = torch.ones(b, 1, dtype=torch.bool, device=ctx.text.device)
        mask = torch.cat([ctx.text_mask, ctx.lyric_mask, spk_mask], dim=1)
        return torch.cat(parts, dim=1), mask

    def adaln_single(self, t: torch.Tensor) -> list[torch.Tensor]:
        """Per-block modulation vectors [B, 6*d]: shared base + block offset."""
        if t.dim() == 0:
            t = t.unsqueeze(0)
        base = self.adaln(self.t_embed(t))
        return [base + blk.mod_offset for blk in self.blocks]

    def forward(
        self,
        latent: torch.Tensor,
        t: torch.Tensor | float,
        ctx: ContextBatch,
        return_hidden: bool = False,
    ):
        b = latent.shape[0]
        if not torch.is_tensor(t):
            t = torch.tensor(float(t))
        if t.dim() == 0:
            t = t.expand(b)
        self._validate_budgets(latent.shape[-1], ctx)
        x = self.patchify(latent)
        x = x + sinusoidal_positions(x.shape[1], self.d_model, device=x.device, dtype=x.dtype)
        base_mod = self.adaln(self.t_embed(t))
        context, ctx_mask = self.build_context(ctx)
        hiddens = []
        for block in self.blocks:
            x = block(x, base_mod, context, ctx_mask)
            hiddens.append(x)
        v = self.head(self.final_norm(x))
        v = self.unpatchify(v)
        if return_hidden:
            return v, hiddens
        return v

    def tap_hidden(self, hiddens: list[torch.Tensor]) -> torch.Tensor:
        return hiddens[self.tap_index - 1]


def build_denoiser(cfg: DitSection, n_bins: int) -> Denoiser:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return Denoiser(
            d_model=cfg.d_model,
            blocks=cfg.blocks,
            heads=cfg.heads,
            ffn_expansion=cfg.ffn_expansion,
            d_lyric=cfg.d_lyric,
            t_embed_dim=cfg.t_embed_dim,
            n_bins=n_bins,
        )


def modulation_parameter_count(model: Denoiser) -> int:
    """Parameters of the timestep-modulation machinery (shared MLP + offsets)."""
    n = sum(p.numel() for p in model.adaln.parameters())
    n += sum(blk.mod_offset.numel() for blk in model.blocks)
    return n


def modulation_mlp_count(model: nn.Module) -> int:
    return sum(1 for m in model.modules() if isinstance(m, AdaLnSingle))


class LoraLinear(nn.Module):
    """A base linear plus a low-rank residual; base weights are never written."""

    def __init__(self, base: nn.Linear, a: nn.Parameter, b: nn.Parameter, scaling: float):
        super().__init__()
        self.base = base
        self.a = a
        self.b = b
        self.scaling = scaling

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.base.weight, self.base.bias) + self.scaling * F.linear(
            F.linear(x, self.a), self.b
        )


def _lora_key(name: str) -> str:
    return name.replace(".", "__")


class LoraAdapter(nn.Module):
    """Low-rank pairs for every linear layer whose name matches a target.

    B starts at zero, so a fresh adapter is an exact no-op. attach/detach swap
    wrapper modules in and out; merge_into/unmerge_from fold the update into
    the base weights in place.
    """

    def __init__(
        self,
        model: nn.Module,
        rank: int = 8,
        alpha: float = 16.0,
        targets: tuple[str, ...] = ("self_attn", "cross_attn"),
        seed: int = 0,
    ):
        super().__init__()
        if rank < 1:
            raise LoraError(f"rank must be >= 1, got {rank}")
        self.rank = rank
        self.alpha = alpha
        self.targets = tuple(targets)
        self.a = nn.ParameterDict()
        self.b = nn.ParameterDict()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            for name, mod in model.named_modules():
                if not isinstance(mod, nn.Linear):
                    continue
                if not any(t in name for t in self.targets):
                    continue
                fan_in, fan_out = mod.in_features, mod.out_features
                if rank >= min(fan_in, fan_out):
                    raise LoraError(
                        f"rank {rank} >= min dim {min(fan_in, fan_out)} of {name}"
                    )
                key = _lora_key(name)
                self.a[key] = nn.Parameter(torch.randn(rank, fan_in) * 0.02)
                self.b[key] = nn.Parameter(torch.zeros(fan_out, rank))
        if not self.a:
            raise LoraError(f"no linear layers matched targets {self.targets}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def target_names(self, model: nn.Module) -> list[str]:
        keys = set(self.a.keys())
        return [n for n, m in model.named_modules() if _lora_key(n) in keys]

    def _parent_and_leaf(self, model: nn.Module, name: str):
        parts = name.split(".")
        parent = model
        for p in parts[:-1]:
            parent = getattr(parent, p)
        return parent, parts[-1]

    def attach(self, model: nn.Module) -> nn.Module:
        for name in self.target_names(model):
            parent, leaf = self._parent_and_leaf(model, name)
            base = getattr(parent, leaf)
            if isinstance(base, LoraLinear):
                raise LoraError(f"{name} already has an adapter attached")
            key = _lora_key(name)
            setattr(parent, leaf, LoraLinear(base, self.a[key], self.b[key], self.scaling))
        return model

    def detach(self, model: nn.Module) -> nn.Module:
        for name, mod in list(model.named_modules()):
            if isinstance(mod, LoraLinear):
                parent, leaf = self._parent_and_leaf(model, name)
                setattr(parent, leaf, mod.base)
        return model

    @contextlib.contextmanager
    def applied(self, model: nn.Module):
        self.attach(model)
        try:
            yield model
        finally:
            self.detach(model)

    def _resolve_linear(self, model: nn.Module, name: str) -> nn.Linear:
        parent, leaf = self._parent_and_leaf(model, name)
        base = getattr(parent, leaf)
        return base.base if isinstance(base, LoraLinear) else base

    @torch.no_grad()
    def merge_into(self, model: nn.Module) -> None:
        for name in self.target_names(model):
            lin = self._resolve_linear(model, name)
            lin.weight += self.scaling * (self.b[_lora_key(name)] @ self.a[_lora_key(name)])

    @torch.no_grad()
    def unmerge_from(self, model: nn.Module) -> None:
        for name in self.target_names(model):
            lin = self._resolve_linear(model, name)
            lin.weight -= self.scaling * (self.b[_lora_key(name)] @ self.a[_lora_key(name)])
