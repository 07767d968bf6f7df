"""Training objectives: the flow-matching loss with preconditioned x0
reconstruction, shifted logit-normal timestep sampling, and a semantic
alignment loss that pulls a mid-stack denoiser activation toward two frozen
pseudo-teacher feature sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .synth import MelSpectrogram


class ShapeError(ValueError):
    pass


class LossError(FloatingPointError):
    pass


@dataclass
class NoiseSchedule:
    """t in [0,1] -> sigma in [0,1] with a resolution shift; endpoints exact."""

    shift: float = 3.0

    def __post_init__(self):
        if self.shift <= 0:
            raise ValueError(f"shift must be positive, got {self.shift}")

    def sigma(self, t):
        s = self.shift
        return s * t / (1.0 + (s - 1.0) * t)

    def sigma_grid(self, steps: int) -> list[float]:
        """Descending integration grid sigma_i = sigma(1 - i/steps), i = 0..steps."""
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        return [float(self.sigma(1.0 - i / steps)) for i in range(steps + 1)]

    def sigma_cdf(self, sigma):
        """Analytic CDF of sigma under t = logistic(u), u ~ N(0,1).

        Inverting sigma = s*t/(1+(s-1)*t) gives t = sigma/(s-(s-1)*sigma), and
        P(sigma <= y) = P(t <= t(y)) = Phi(logit(t(y))).
        """
        s = self.shift
        sigma = torch.as_tensor(sigma, dtype=torch.float64)
        t = sigma / (s - (s - 1.0) * sigma)
        t = t.clamp(1e-12, 1.0 - 1e-12)
        u = torch.log(t) - torch.log1p(-t)
        return 0.5 * (1.0 + torch.erf(u / math.sqrt(2.0)))


def sigma_from_t(t, shift: float = 3.0):
    return NoiseSchedule(shift).sigma(t)


def sample_timesteps(n: int, generator: torch.Generator) -> torch.Tensor:
    """Logit-normal draws: t = logistic(u), u ~ N(0,1); strictly inside (0,1)."""
    u = torch.randn(n, generator=generator)
    return torch.sigmoid(u)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _broadcast_sigma(sigma, ref: torch.Tensor) -> torch.Tensor:
    """Scalar or per-item sigma to a shape broadcastable over ref."""
    if not torch.is_tensor(sigma):
        return torch.tensor(float(sigma), dtype=ref.dtype, device=ref.device)
    if sigma.dim() == 0:
        return sigma.to(ref.dtype)
    if sigma.shape[0] != ref.shape[0]:
        raise ShapeError(f"sigma batch {sigma.shape[0]} vs tensor batch {ref.shape[0]}")
    return sigma.to(ref.dtype).view(-1, *([1] * (ref.dim() - 1)))


def make_noisy(x0: torch.Tensor, z: torch.Tensor, sigma) -> torch.Tensor:
    """Linear interpolation x_noisy = (1 - sigma) * x0 + sigma * z."""
    _check_same_shape(x0, z)
    s = _broadcast_sigma(sigma, x0)
    return (1.0 - s) * x0 + s * z


def fm_target(x0: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """The regression target for the velocity head: z - x0."""
    _check_same_shape(x0, z)
    return z - x0


def precondition_x0(v_out: torch.Tensor, sigma, x_noisy: torch.Tensor) -> torch.Tensor:
    """x0 estimate from a velocity prediction: v_out * (-sigma) + x_noisy."""
    _check_same_shape(v_out, x_noisy)
    s = _broadcast_sigma(sigma, v_out)
    return v_out * (-s) + x_noisy


def fm_loss(
    model,
    x0: torch.Tensor,
    z: torch.Tensor,
    t: torch.Tensor,
    ctx,
    schedule: NoiseSchedule,
    return_hidden: bool = False,
):
    """MSE between the preconditioned x0 estimate and the clean latent."""
    sigma = schedule.sigma(t)
    x_noisy = make_noisy(x0, z, sigma)
    if return_hidden:
        v, hiddens = model(x_noisy, t, ctx, return_hidden=True)
    else:
        v, hiddens = model(x_noisy, t, ctx), None
    x0_pred = precondition_x0(v, sigma, x_noisy)
    loss = F.mse_loss(x0_pred, x0)
    if not torch.isfinite(loss):
        raise LossError("flow-matching loss is not finite")
    if return_hidden:
        return loss, hiddens
    return loss


MERT_PROXY = "mert_proxy"
HUBERT_PROXY = "hubert_proxy"


@dataclass
class TeacherSpec:
    name: str
    dim: int
    rate_hz: float
    chunk_s: float
    seed: int


TEACHER_SPECS = {
    MERT_PROXY: TeacherSpec(MERT_PROXY, dim=1024, rate_hz=75.0, chunk_s=5.0, seed=501),
    HUBERT_PROXY: TeacherSpec(HUBERT_PROXY, dim=768, rate_hz=50.0, chunk_s=30.0, seed=502),
}


class PseudoTeacher(nn.Module):
    """Frozen seeded projection standing in for a pretrained audio encoder.

    Mel frames pass through a fixed random linear map and tanh, then each
    bounded-context chunk is resampled to the teacher frame rate and the
    chunks are concatenated. Deterministic by construction; no gradients.
    """

    def __init__(self, spec: TeacherSpec, n_bins: int):
        super().__init__()
        self.spec = spec
        gen = torch.Generator().manual_seed(spec.seed)
        w = torch.randn(spec.dim, n_bins, generator=gen) / math.sqrt(n_bins)
        self.register_buffer("weight", w)

    @torch.no_grad()
    def features(self, mel: torch.Tensor, frame_rate_hz: float) -> torch.Tensor:
        # mel: [T, F] -> [N, dim] at the teacher rate, N = round(rate * T / frame_rate)
        t_frames = mel.shape[0]
        rate = self.spec.rate_hz
        total = max(1, round(rate * t_frames / frame_rate_hz))
        per_chunk = round(rate * self.spec.chunk_s)
        out = []
        n0 = 0
        while n0 < total:
            n1 = min(n0 + per_chunk, total)
            i0 = min(int(math.floor(n0 / rate * frame_rate_hz)), t_frames - 1)
            i1 = max(min(int(math.ceil(n1 / rate * frame_rate_hz)), t_frames), i0 + 1)
            chunk = torch.tanh(mel[i0:i1] @ self.weight.T)
            out.append(temporal_align(chunk, n1 - n0))
            n0 = n1
        return torch.cat(out, dim=0)

    def features_of(self, mel: MelSpectrogram) -> torch.Tensor:
        return self.features(mel.data, mel.frame_rate_hz)


def build_teachers(n_bins: int) -> dict[str, PseudoTeacher]:
    return {name: PseudoTeacher(spec, n_bins) for name, spec in TEACHER_SPECS.items()}


def temporal_align(features: torch.Tensor, target_len: int) -> torch.Tensor:
    """Linear interpolation along time to target_len; endpoint-preserving."""
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    length = features.shape[0]
    if length == target_len:
        return features
    if length == 1:
        return features.expand(target_len, *features.shape[1:]).clone()
    x = features.T.unsqueeze(0)  # [1, dim, T]
    y = F.interpolate(x, size=target_len, mode="linear", align_corners=True)
    return y.squeeze(0).T


@dataclass
class LossWeights:
    lambda_ssl: float = 1.0
    w_mert: float = 1.0
    w_hubert: float = 1.0  # 0.01 in the finetune phase

    def __post_init__(self):
        if min(self.lambda_ssl, self.w_mert, self.w_hubert) < 0:
            raise ValueError("loss weights must be nonnegative")


class SslHeads(nn.Module):
    """Trainable linear maps from denoiser width to each teacher's dim."""

    def __init__(self, d_model: int, d_mert: int = 1024, d_hubert: int = 768):
        super().__init__()
        self.heads = nn.ModuleDict(
            {
                MERT_PROXY: nn.Linear(d_model, d_mert),
                HUBERT_PROXY: nn.Linear(d_model, d_hubert),
            }
        )

    def forward(self, name: str, h: torch.Tensor) -> torch.Tensor:
        return self.heads[name](h)


def _alignment_cosine(projected: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean over frames of cosine similarity after aligning to the min length."""
    t_common = min(projected.shape[0], teacher.shape[0])
    a = temporal_align(projected, t_common)
    b = temporal_align(teacher, t_common)
    return F.cosine_similarity(a, b, dim=-1, eps=1e-8).mean()


def ssl_loss(
    h_tap: torch.Tensor,
    teacher_feats: dict[str, torch.Tensor],
    heads: SslHeads,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Semantic alignment loss for one item: h_tap [L, D] vs teacher features.

    Per teacher: project, align both to the common length, 1 - cosine
    similarity averaged over frames; the two teacher terms are averaged with
    their weights. Range [0, 2] at unit weights, 0 iff perfectly aligned.
    """
    losses = {}
    for name in (MERT_PROXY, HUBERT_PROXY):
        projected = heads(name, h_tap)
        c = _alignment_cosine(projected, teacher_feats[name])
        losses[name] = 1.0 - c
    total = (weights.w_mert * losses[MERT_PROXY] + weights.w_hubert * losses[HUBERT_PROXY]) / 2.0
    parts = {name: float(v.detach()) for name, v in losses.items()}
    return total, parts


def ssl_loss_from_mel(
    h_tap: torch.Tensor,
    mel: MelSpectrogram,
    teachers: dict[str, PseudoTeacher],
    heads: SslHeads,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    feats = {name: teacher.features_of(mel) for name, teacher in teachers.items()}
    return ssl_loss(h_tap, feats, heads, weights)


def total_loss(loss_fm: torch.Tensor, loss_ssl: torch.Tensor, weights: LossWeights):
    return loss_fm + weights.lambda_ssl * loss_ssl
