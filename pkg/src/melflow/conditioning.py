"""Conditioning paths: byte-level lyric tokenizer with structural tags, a
frozen hash-projection text embedder, a trainable lyric encoder, a speaker
embedding table, and the conditional-dropout policy used for classifier-free
guidance training.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import MAX_LYRIC_TOKENS, MAX_TEXT_TOKENS

TEXT_EMB_DIM = 768
SPEAKER_EMB_DIM = 512

PAD, BOS, EOS = 0, 1, 2
TAG_TOKENS = {"verse": 3, "chorus": 4, "bridge": 5, "inst": 6, "instrumental": 7}
INSTRUMENTAL_TOKENS = (TAG_TOKENS["inst"], TAG_TOKENS["instrumental"])
BYTE_OFFSET = 8
VOCAB_SIZE = BYTE_OFFSET + 256


class LyricError(ValueError):
    pass


class TextError(ValueError):
    pass


class SpeakerError(KeyError):
    pass


def tokenize_lyrics(text: str, max_tokens: int = MAX_LYRIC_TOKENS) -> list[int]:
    """Map lyrics to token ids: known [tags] to special tokens, the rest to bytes.

    Unknown bracket tags degrade to plain bytes with a warning. [inst] and
    [instrumental] are only legal as the sole content token.
    """
    ids = [BOS]
    i = 0
    while i < len(text):
        if text[i] == "[":
            close = text.find("]", i)
            if close != -1:
                tag = text[i + 1 : close].strip().lower()
                if tag in TAG_TOKENS:
                    ids.append(TAG_TOKENS[tag])
                    i = close + 1
                    continue
                warnings.warn(f"unknown structural tag [{tag}], keeping it as plain text")
        ids.extend(BYTE_OFFSET + b for b in text[i].encode("utf-8"))
        i += 1
    ids.append(EOS)
    content = [t for t in ids if t not in (BOS, EOS)]
    if any(t in INSTRUMENTAL_TOKENS for t in content) and len(content) > 1:
        raise LyricError("[inst]/[instrumental] must be the only lyric content")
    if len(ids) > max_tokens:
        raise LyricError(f"lyrics tokenize to {len(ids)} tokens, budget is {max_tokens}")
    return ids


def detokenize_lyrics(ids) -> str:
    """Inverse of tokenize_lyrics over the byte alphabet (tags re-rendered)."""
    tag_names = {v: k for k, v in TAG_TOKENS.items()}
    out = []
    pending = bytearray()
    for t in ids:
        if t >= BYTE_OFFSET:
            pending.append(t - BYTE_OFFSET)
            continue
        if pending:
            out.append(pending.decode("utf-8"))
            pending = bytearray()
        if t in tag_names:
            out.append(f"[{tag_names[t]}]")
    if pending:
        out.append(pending.decode("utf-8"))
    return "".join(out)


def is_burst_token(token_id: int) -> bool:
    """Tokens that map to a sung burst in the synthetic corpus: non-whitespace bytes."""
    if token_id < BYTE_OFFSET:
        return False
    return not chr(token_id - BYTE_OFFSET).isspace()


def split_text_tokens(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


class TextEmbedder:
    """Frozen stand-in for a pretrained text encoder.

    Every token maps to a fixed 768-d vector derived from a keyed hash, so
    embeddings are deterministic across runs and platforms and are never
    trained. Distinct tokens get near-orthogonal vectors.
    """

    def __init__(self, seed: int = 1000):
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                token.encode("utf-8"), key=str(self.seed).encode(), digest_size=8
            ).digest()
            rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
            vec = (rng.standard_normal(TEXT_EMB_DIM) / math.sqrt(TEXT_EMB_DIM)).astype(
                np.float32
            )
            self._cache[token] = vec
        return vec

    def embed(self, text: str) -> torch.Tensor:
        tokens = split_text_tokens(text)
        if len(tokens) > MAX_TEXT_TOKENS:
            raise TextError(f"{len(tokens)} text tokens, budget is {MAX_TEXT_TOKENS}")
        if not tokens:
            tokens = [""]
        return torch.from_numpy(np.stack([self.token_vector(t) for t in tokens]))


def sinusoidal_positions(
    n_pos: int, dim: int, device=None, dtype=torch.float32, base: float = 10000.0
) -> torch.Tensor:
    """Absolute position table [n_pos, dim]: sin on the first half, cos on the
    second, geometric frequency ladder. Parameter-free, any sequence length."""
    if dim % 2:
        raise ValueError(f"position dim must be even, got {dim}")
    half = dim // 2
    freqs = base ** (-torch.arange(half, device=device, dtype=dtype) / half)
    angles = torch.arange(n_pos, device=device, dtype=dtype)[:, None] * freqs[None, :]
    return torch.cat([angles.sin(), angles.cos()], dim=-1)


class LyricEncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x, valid_mask):
        # x: [B, L, d]; valid_mask: [B, L] bool, False on PAD
        B, L, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q = q.view(B, L, h, d // h).transpose(1, 2)
        k = k.view(B, L, h, d // h).transpose(1, 2)
        v = v.view(B, L, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        neg = torch.finfo(scores.dtype).min
        scores = scores.masked_fill(~valid_mask[:, None, None, :], neg)
        att = scores.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, L, d)
        x = x + self.proj(out)
        x = x + self.mlp(self.norm2(x))
        return x


class LyricEncoder(nn.Module):
    """Byte/tag embedding table plus absolute positions, then self-attention.

    Token order is load-bearing: the k-th burst token owns the k-th time slot
    downstream, so every embedding carries its index via the sinusoidal table.
    """

    def __init__(self, d: int = 128, heads: int = 4, blocks: int = 2, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        self.vocab_size = vocab_size
        self.table = nn.Embedding(vocab_size, d)
        self.blocks = nn.ModuleList(LyricEncoderBlock(d, heads) for _ in range(blocks))
        self.norm = nn.LayerNorm(d)

    def forward(self, ids: torch.Tensor, valid_mask: torch.Tensor | None = None) -> torch.Tensor:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if valid_mask is None:
            valid_mask = ids != PAD
        x = self.table(ids)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], device=x.device, dtype=x.dtype)
        for block in self.blocks:
            x = block(x, valid_mask)
        return self.norm(x)


@dataclass
class DroppedFlags:
    """Raw outcomes of the four dropout draws (global, then per-signal).

    A signal is effectively nulled when the global draw OR its own draw fired;
    the flags record the draws themselves so their empirical rates match the
    configured probabilities.
    """

    global_: bool = False
    text: bool = False
    lyric: bool = False
    speaker: bool = False

    def text_nulled(self) -> bool:
        return self.global_ or self.text

    def lyric_nulled(self) -> bool:
        return self.global_ or self.lyric

    def speaker_nulled(self) -> bool:
        return self.global_ or self.speaker


@dataclass
class ConditionBundle:
    text_emb: torch.Tensor  # [L_txt, 768]
    lyric_emb: torch.Tensor  # [L_lyr, d_lyric]
    lyric_mask: torch.Tensor  # [L_lyr] bool, False on PAD positions
    speaker_emb: torch.Tensor  # [512]
    dropped: DroppedFlags


@dataclass
class DropoutRates:
    global_: float = 0.15
    text: float = 0.15
    lyric: float = 0.15
    speaker: float = 0.50


class ConditionEncoders(nn.Module):
    """The three conditioning paths plus the learned null forms.

    The null text/lyric sequences are trainable length-1 embeddings; the null
    speaker embedding is the exact zero vector. The unconditional bundle used
    at inference is bit-identical to a fully dropped training bundle because
    both read the same parameters.
    """

    def __init__(
        self,
        d_lyric: int = 128,
        n_speakers: int = 8,
        text_seed: int = 1000,
        speaker_omitted: bool = False,
    ):
        super().__init__()
        self.text_embedder = TextEmbedder(seed=text_seed)
        self.lyric_encoder = LyricEncoder(d=d_lyric)
        self.speakers = nn.Embedding(n_speakers, SPEAKER_EMB_DIM)
        self.null_text = nn.Parameter(torch.randn(1, TEXT_EMB_DIM) * 0.02)
        self.null_lyric = nn.Parameter(torch.randn(1, d_lyric) * 0.02)
        self.speaker_omitted = speaker_omitted

    def speaker_vector(self, speaker_id: int | None) -> torch.Tensor:
        ref = self.speakers.weight
        if speaker_id is None or self.speaker_omitted:
            return torch.zeros(SPEAKER_EMB_DIM, dtype=ref.dtype, device=ref.device)
        if not 0 <= speaker_id < self.speakers.num_embeddings:
            raise SpeakerError(f"unknown speaker id {speaker_id}")
        return self.speakers(torch.tensor(speaker_id, device=ref.device))

    def encode(self, text: str, lyric_ids, speaker_id: int | None) -> ConditionBundle:
        ids = torch.as_tensor(lyric_ids, dtype=torch.long)
        if ids.numel() > MAX_LYRIC_TOKENS:
            raise LyricError(f"{ids.numel()} lyric tokens, budget is {MAX_LYRIC_TOKENS}")
        lyric_emb = self.lyric_encoder(ids.unsqueeze(0)).squeeze(0)
        dtype = self.null_text.dtype
        return ConditionBundle(
            text_emb=self.text_embedder.embed(text).to(dtype),
            lyric_emb=lyric_emb,
            lyric_mask=ids != PAD,
            speaker_emb=self.speaker_vector(speaker_id).to(dtype),
            dropped=DroppedFlags(),
        )

    def null_bundle(self) -> ConditionBundle:
        return ConditionBundle(
            text_emb=self.null_text,
            lyric_emb=self.null_lyric,
            lyric_mask=torch.ones(1, dtype=torch.bool),
            speaker_emb=torch.zeros(
                SPEAKER_EMB_DIM, dtype=self.null_text.dtype, device=self.null_text.device
            ),
            dropped=DroppedFlags(global_=True, text=True, lyric=True, speaker=True),
        )

    def apply_condition_dropout(
        self,
        bundle: ConditionBundle,
        generator: torch.Generator,
        rates: DropoutRates = DropoutRates(),
    ) -> ConditionBundle:
        """Replace dropped signals by their null forms.

        Draw order is fixed (global, text, lyric, speaker) so outcomes are a
        pure function of the generator state.
        """
        draws = torch.rand(4, generator=generator)
        flags = DroppedFlags(
            global_=bool(draws[0] < rates.global_),
            text=bool(draws[1] < rates.text),
            lyric=bool(draws[2] < rates.lyric),
            speaker=bool(draws[3] < rates.speaker),
        )
        null = self.null_bundle()
        out = replace(bundle, dropped=flags)
        if flags.text_nulled():
            out = replace(out, text_emb=null.text_emb)
        if flags.lyric_nulled():
            out = replace(out, lyric_emb=null.lyric_emb, lyric_mask=null.lyric_mask)
        if flags.speaker_nulled():
            out = replace(out, speaker_emb=null.speaker_emb)
        return out
