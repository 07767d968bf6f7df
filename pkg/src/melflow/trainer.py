"""Training loop: decoupled-weight-decay adaptive-moment optimizer with the
recipe's betas, linear warmup, global-norm gradient clipping, variable-length
batch grouping, conditional dropout, and trajectory-exact checkpointing.

Determinism contract: every random draw comes from a generator seeded by
mix_seed(seed, step) or mix_seed(seed, epoch tag), never from ambient RNG
state, so a resumed run consumes exactly the same randomness as an
uninterrupted one.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .conditioning import ConditionBundle, ConditionEncoders, DropoutRates
from .config import RunConfig, TrainSection
from .container import load_tensors, pack_text, save_tensors, unpack_text
from .dcae import Dcae, LatentStats, dcae_from_tensors, dcae_to_tensors
from .dit import ContextBatch, Denoiser, build_denoiser
from .objectives import (
    HUBERT_PROXY,
    MERT_PROXY,
    LossWeights,
    NoiseSchedule,
    SslHeads,
    build_teachers,
    fm_loss,
    sample_timesteps,
    ssl_loss,
    total_loss,
)
from .synth import Song


class TrainError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def mix_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (order-sensitive)."""
    raw = ",".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little") >> 1


def lr_at(step: int, cfg: TrainSection) -> float:
    """Linear warmup to cfg.lr over warmup_steps, constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def clip_gradients(params: list[torch.nn.Parameter], max_norm: float = 0.5) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm; non-finite gradients abort the run.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() * g.double()).sum() for g in grads))
    if not torch.isfinite(total):
        raise TrainError("non-finite gradient norm")
    norm = float(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


class AdamW:
    """Decoupled weight decay + bias-corrected adaptive moments.

    Implemented directly (rather than through a framework optimizer) so the
    whole state is a flat named-tensor dict that round-trips bit-exactly
    through the checkpoint container.
    """

    def __init__(
        self,
        named_params: list[tuple[str, torch.nn.Parameter]],
        betas: tuple[float, float] = (0.8, 0.9),
        weight_decay: float = 1e-2,
        eps: float = 1e-8,
    ):
        self.entries = [(n, p) for n, p in named_params if p.requires_grad]
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.entries}
        self.v = {n: torch.zeros_like(p) for n, p in self.entries}

    def zero_grad(self) -> None:
        for _, p in self.entries:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.count
        bc2 = 1.0 - b2**self.count
        for n, p in self.entries:
            g = p.grad
            if g is None:
                continue
            p.mul_(1.0 - lr * self.weight_decay)
            m, v = self.m[n], self.v[n]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"opt/step_count": torch.tensor([float(self.count)])}
        for n in self.m:
            out[f"opt/m/{n}"] = self.m[n]
            out[f"opt/v/{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.count = int(tensors["opt/step_count"][0])
        for n in self.m:
            for store, tag in ((self.m, "m"), (self.v, "v")):
                key = f"opt/{tag}/{n}"
                if key not in tensors:
                    raise CheckpointError(f"optimizer state missing tensor {key}")
                if tensors[key].shape != store[n].shape:
                    raise CheckpointError(f"optimizer tensor {key} has wrong shape")
                store[n] = tensors[key].clone()


@dataclass
class TrainItem:
    """Per-song cache of everything a training step reuses."""

    index: int
    latent: torch.Tensor  # [C, F, T_lat], standardized
    text_emb: torch.Tensor  # [L_txt, 768], frozen embedder output
    lyric_ids: torch.Tensor  # [L_lyr] long
    speaker_id: int | None
    teacher_feats: dict[str, torch.Tensor]

    @property
    def t_lat(self) -> int:
        return self.latent.shape[-1]


def length_grouped_batches(
    items: list, batch_size: int, rng: random.Random
) -> list[list[int]]:
    """Indices batched so every batch shares one latent length.

    Items are bucketed by t_lat, shuffled within buckets, chunked, and the
    batch order is shuffled; each item appears exactly once.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    buckets: dict[int, list[int]] = {}
    for i, item in enumerate(items):
        buckets.setdefault(item.t_lat, []).append(i)
    batches = []
    for length in sorted(buckets):
        idx = buckets[length]
        rng.shuffle(idx)
        for j in range(0, len(idx), batch_size):
            batches.append(idx[j : j + batch_size])
    rng.shuffle(batches)
    return batches


def prepare_items(
    songs: list[Song],
    dcae: Dcae,
    stats: LatentStats,
    encoders: ConditionEncoders,
    teachers: dict,
) -> list[TrainItem]:
    """Encode and cache latents, frozen text embeddings, and teacher features."""
    items = []
    for song in songs:
        latent, _ = dcae.encode_mel(song.mel)
        items.append(
            TrainItem(
                index=song.index,
                latent=stats.normalize(latent.data),
                text_emb=encoders.text_embedder.embed(song.tag_text).to(torch.float32),
                lyric_ids=torch.tensor(song.spec.lyric_tokens, dtype=torch.long),
                speaker_id=song.spec.speaker_id,
                teacher_feats={
                    name: teacher.features_of(song.mel) for name, teacher in teachers.items()
                },
            )
        )
    return items


@dataclass
class TrainState:
    cfg: RunConfig
    denoiser: Denoiser
    encoders: ConditionEncoders
    heads: SslHeads
    opt: AdamW
    dcae: Dcae
    stats: LatentStats
    teachers: dict
    schedule: NoiseSchedule
    weights: LossWeights
    rates: DropoutRates
    step: int = 0
    dropout_tally: dict = field(
        default_factory=lambda: {"draws": 0, "global": 0, "text": 0, "lyric": 0, "speaker": 0}
    )

    def named_trainables(self) -> list[tuple[str, torch.nn.Parameter]]:
        out = []
        for prefix, module in (
            ("denoiser", self.denoiser),
            ("encoders", self.encoders),
            ("heads", self.heads),
        ):
            for n, p in module.named_parameters():
                if p.requires_grad:
                    out.append((f"{prefix}/{n}", p))
        return out


def build_train_state(cfg: RunConfig, dcae: Dcae, stats: LatentStats) -> TrainState:
    tr = cfg.train
    denoiser = build_denoiser(cfg.dit, cfg.dcae.n_bins)
    with torch.random.fork_rng():
        torch.manual_seed(mix_seed(cfg.dit.seed, "encoders"))
        encoders = ConditionEncoders(
            d_lyric=cfg.dit.d_lyric,
            n_speakers=cfg.data.n_speakers,
            speaker_omitted=tr.speaker_omitted(),
        )
        heads = SslHeads(cfg.dit.d_model)
    state = TrainState(
        cfg=cfg,
        denoiser=denoiser,
        encoders=encoders,
        heads=heads,
        opt=None,
        dcae=dcae,
        stats=stats,
        teachers=build_teachers(cfg.dcae.n_bins),
        schedule=NoiseSchedule(tr.shift),
        weights=LossWeights(
            lambda_ssl=tr.lambda_ssl, w_mert=tr.w_mert, w_hubert=tr.effective_w_hubert()
        ),
        rates=DropoutRates(
            global_=tr.dropout_global,
            text=tr.dropout_text,
            lyric=tr.dropout_lyric,
            speaker=tr.dropout_speaker,
        ),
    )
    state.opt = AdamW(
        state.named_trainables(), betas=tr.betas, weight_decay=tr.weight_decay
    )
    return state


def _batch_bundles(
    state: TrainState, batch: list[TrainItem], gen: torch.Generator
) -> list[ConditionBundle]:
    """Encode lyrics for the batch, assemble bundles, apply dropout in order."""
    max_len = max(item.lyric_ids.shape[0] for item in batch)
    ids = torch.zeros(len(batch), max_len, dtype=torch.long)
    for i, item in enumerate(batch):
        ids[i, : item.lyric_ids.shape[0]] = item.lyric_ids
    valid = ids != 0
    lyric_emb = state.encoders.lyric_encoder(ids, valid)
    bundles = []
    for i, item in enumerate(batch):
        n = item.lyric_ids.shape[0]
        bundle = ConditionBundle(
            text_emb=item.text_emb,
            lyric_emb=lyric_emb[i, :n],
            lyric_mask=valid[i, :n],
            speaker_emb=state.encoders.speaker_vector(item.speaker_id),
            dropped=None,
        )
        bundle = state.encoders.apply_condition_dropout(bundle, gen, state.rates)
        tally = state.dropout_tally
        tally["draws"] += 1
        tally["global"] += bundle.dropped.global_
        tally["text"] += bundle.dropped.text
        tally["lyric"] += bundle.dropped.lyric
        tally["speaker"] += bundle.dropped.speaker
        bundles.append(bundle)
    return bundles


def train_step(state: TrainState, batch: list[TrainItem]) -> dict:
    """One optimization step; all randomness keyed by (seed, global step)."""
    tr = state.cfg.train
    gen = torch.Generator().manual_seed(mix_seed(tr.seed, state.step))
    x0 = torch.stack([item.latent for item in batch])
    t = sample_timesteps(len(batch), gen)
    z = torch.randn(x0.shape, generator=gen)
    bundles = _batch_bundles(state, batch, gen)
    ctx = ContextBatch.from_bundles(bundles)

    need_ssl = state.weights.lambda_ssl > 0.0
    loss_fm, hiddens = fm_loss(
        state.denoiser, x0, z, t, ctx, state.schedule, return_hidden=True
    )
    if need_ssl:
        h_tap = state.denoiser.tap_hidden(hiddens)
        per_item = [
            ssl_loss(h_tap[i], batch[i].teacher_feats, state.heads, state.weights)[0]
            for i in range(len(batch))
        ]
        loss_ssl = torch.stack(per_item).mean()
    else:
        loss_ssl = torch.zeros(())
    loss = total_loss(loss_fm, loss_ssl, state.weights)
    if not torch.isfinite(loss):
        raise TrainError(f"non-finite loss at step {state.step}")

    state.opt.zero_grad()
    loss.backward()
    params = [p for _, p in state.opt.entries]
    grad_norm = clip_gradients(params, tr.clip_norm)
    lr = lr_at(state.step, tr)
    state.opt.step(lr)
    metrics = {
        "step": state.step,
        "L_FM": float(loss_fm.detach()),
        "L_SSL": float(loss_ssl.detach()),
        "grad_norm": grad_norm,
        "lr": lr,
    }
    state.step += 1
    return metrics


def train_loop(
    state: TrainState,
    items: list[TrainItem],
    total_steps: int | None = None,
    on_metrics=None,
) -> list[dict]:
    """Run until cfg.train.steps (or total_steps), resuming from state.step."""
    tr = state.cfg.train
    target = tr.steps if total_steps is None else total_steps
    if not items and state.step < target:
        raise TrainError("no training items")
    history = []
    while state.step < target:
        epoch = state.step // _batches_per_epoch(items, tr)
        rng = random.Random(mix_seed(tr.seed, "epoch", epoch))
        batches = length_grouped_batches(items, tr.batch_size, rng)
        offset = state.step - epoch * len(batches)
        for b in batches[offset:]:
            metrics = train_step(state, [items[i] for i in b])
            history.append(metrics)
            if on_metrics is not None:
                on_metrics(metrics)
            if state.step >= target:
                break
    return history


def _batches_per_epoch(items: list[TrainItem], tr: TrainSection) -> int:
    lengths: dict[int, int] = {}
    for item in items:
        lengths[item.t_lat] = lengths.get(item.t_lat, 0) + 1
    return sum(-(-n // tr.batch_size) for n in lengths.values())


CHECKPOINT_KIND = "dit-train"


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors = {
        "meta/kind": pack_text(CHECKPOINT_KIND),
        "meta/step": torch.tensor([float(state.step)]),
        "meta/config": pack_text(state.cfg.to_text()),
    }
    for prefix, module in (
        ("denoiser", state.denoiser),
        ("encoders", state.encoders),
        ("heads", state.heads),
    ):
        for name, value in module.state_dict().items():
            tensors[f"model/{prefix}/{name}"] = value
    tensors.update(state.opt.state_tensors())
    tensors.update(dcae_to_tensors(state.dcae, state.stats, prefix="dcae/"))
    save_tensors(path, tensors)


def load_checkpoint(path: str | Path) -> TrainState:
    tensors = load_tensors(path)
    if "meta/kind" not in tensors or unpack_text(tensors["meta/kind"]) != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a denoiser training checkpoint")
    cfg = RunConfig.from_text(unpack_text(tensors["meta/config"]))
    dcae, stats = dcae_from_tensors(tensors, prefix="dcae/")
    state = build_train_state(cfg, dcae, stats)
    for prefix, module in (
        ("denoiser", state.denoiser),
        ("encoders", state.encoders),
        ("heads", state.heads),
    ):
        sub = {
            name[len(prefix) + 7 :]: t
            for name, t in tensors.items()
            if name.startswith(f"model/{prefix}/")
        }
        try:
            module.load_state_dict(sub)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint does not fit config ({exc})") from exc
    state.opt.load_state_tensors(tensors)
    state.step = int(tensors["meta/step"][0])
    return state
