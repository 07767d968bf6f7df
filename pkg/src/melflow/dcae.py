"""Mel compression stage: a small convolutional autoencoder with an 8x
spatial reduction on both axes and 8 latent channels, trained with plain
reconstruction MSE. Latents are standardized by corpus statistics before the
denoiser ever sees them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LATENT_CHANNELS, SPATIAL_FACTOR, DcaeSection
from .container import load_tensors, save_tensors, pack_text, unpack_text
from .synth import MelSpectrogram, Song


class ShapeError(ValueError):
    pass


@dataclass
class Latent:
    """A [C, F_lat, T_lat] compressed spectrogram; T_lat ticks at latent_rate_hz."""

    data: torch.Tensor
    latent_rate_hz: float

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]


@dataclass
class LatentStats:
    """Per-channel standardization constants measured on training latents."""

    mean: torch.Tensor  # [C]
    std: torch.Tensor  # [C]

    def normalize(self, data: torch.Tensor) -> torch.Tensor:
        return (data - self.mean[:, None, None]) / self.std[:, None, None]

    def denormalize(self, data: torch.Tensor) -> torch.Tensor:
        return data * self.std[:, None, None] + self.mean[:, None, None]


def pad_mel(data: torch.Tensor, multiple: int = SPATIAL_FACTOR) -> tuple[torch.Tensor, int]:
    """Right-pad [T, F] with zeros so both dims divide `multiple`; returns original T."""
    if data.dim() != 2:
        raise ShapeError(f"mel must be [T, F], got shape {tuple(data.shape)}")
    t, f = data.shape
    pad_t = (-t) % multiple
    pad_f = (-f) % multiple
    if pad_t or pad_f:
        data = F.pad(data, (0, pad_f, 0, pad_t))
    return data, t


def crop_mel(data: torch.Tensor, n_frames: int, n_bins: int) -> torch.Tensor:
    return data[:n_frames, :n_bins]


def _seeded(builder, seed: int):
    """Run a module constructor under a forked, seeded global RNG."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return builder()


class Dcae(nn.Module):
    """Encoder: stem, two stride-2 convs, one 2x average pool, latent head.
    Decoder mirrors it with nearest-neighbor upsampling. The decoder head is
    linear; outputs are clamped to the mel's [0, 1] range only at the
    decode_latent boundary so training gradients stay healthy in dark regions.
    """

    def __init__(
        self,
        width: int = 16,
        n_bins: int = 128,
        frame_rate_hz: float = 86.1328125,
        latent_channels: int = LATENT_CHANNELS,
    ):
        super().__init__()
        if n_bins % SPATIAL_FACTOR != 0:
            raise ShapeError(f"n_bins must divide {SPATIAL_FACTOR}, got {n_bins}")
        w = width
        self.width = width
        self.n_bins = n_bins
        self.frame_rate_hz = frame_rate_hz
        self.latent_channels = latent_channels
        act = nn.SiLU
        self.encoder = nn.Sequential(
            nn.Conv2d(1, w, 3, padding=1), act(),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), act(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), act(),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), act(),
            nn.Conv2d(4 * w, 4 * w, 3, padding=1), act(),
            nn.AvgPool2d(2),
            nn.Conv2d(4 * w, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 4 * w, 3, padding=1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 4 * w, 3, padding=1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), act(),
            nn.Conv2d(w, 1, 3, padding=1),
        )

    @property
    def latent_rate_hz(self) -> float:
        return self.frame_rate_hz / SPATIAL_FACTOR

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, 1, F, T] with F, T multiples of 8 -> [B, C, F/8, T/8]
        if x.shape[-1] % SPATIAL_FACTOR or x.shape[-2] % SPATIAL_FACTOR:
            raise ShapeError(
                f"encoder input dims must be multiples of {SPATIAL_FACTOR}, got "
                f"{tuple(x.shape)}; right-pad with pad_mel first"
            )
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.latent_channels:
            raise ShapeError(
                f"latent has {z.shape[1]} channels, decoder expects {self.latent_channels}"
            )
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def encode_mel(self, mel: MelSpectrogram) -> tuple[Latent, int]:
        """Mel [T, F] to latent; also returns the pre-pad frame count."""
        if mel.n_bins != self.n_bins:
            raise ShapeError(f"expected {self.n_bins} mel bins, got {mel.n_bins}")
        padded, orig_t = pad_mel(mel.data)
        x = padded.T.unsqueeze(0).unsqueeze(0)  # [1, 1, F, T]
        with torch.no_grad():
            z = self.encode(x)[0]
        return Latent(data=z, latent_rate_hz=self.latent_rate_hz), orig_t

    def decode_latent(self, latent: Latent, n_frames: int | None = None) -> MelSpectrogram:
        with torch.no_grad():
            x = self.decode(latent.data.unsqueeze(0))[0, 0].clamp(0.0, 1.0)  # [F, T]
        data = x.T
        if n_frames is not None:
            data = crop_mel(data, n_frames, self.n_bins)
        return MelSpectrogram(data=data, frame_rate_hz=self.frame_rate_hz)


def build_dcae(cfg: DcaeSection) -> Dcae:
    return _seeded(
        lambda: Dcae(width=cfg.width, n_bins=cfg.n_bins, frame_rate_hz=cfg.frame_rate_hz),
        cfg.seed,
    )


def overfit_crops(songs: list[Song], n_crops: int = 8, crop_frames: int = 64) -> torch.Tensor:
    """Fixed training crops: one window per song, offsets staggered deterministically."""
    crops = []
    for i in range(n_crops):
        mel = songs[i % len(songs)].mel.data
        t = mel.shape[0]
        if t < crop_frames:
            raise ShapeError(f"song {i} has {t} frames, crop needs {crop_frames}")
        start = ((i * 29) % (t - crop_frames + 1)) // 8 * 8
        crops.append(mel[start : start + crop_frames].T)  # [F, T_crop]
    return torch.stack(crops).unsqueeze(1)  # [N, 1, F, T_crop]


def log_spectral_distance(recon: torch.Tensor, target: torch.Tensor, eps: float = 1e-4):
    """Mean over frames of the RMS log10-magnitude difference across bins."""
    d = torch.log10(recon.clamp(min=0) + eps) - torch.log10(target.clamp(min=0) + eps)
    return float(d.pow(2).mean(dim=-1).sqrt().mean())


def train_dcae(songs: list[Song], cfg: DcaeSection, log=None) -> tuple[Dcae, dict]:
    """Overfit the autoencoder on a fixed set of crops; returns final metrics.

    The whole run is a pure function of the config (seeded init, fixed crop
    schedule, no data augmentation). Aborts on a non-finite loss.
    """
    model = build_dcae(cfg)
    crops = overfit_crops(songs, n_crops=8, crop_frames=cfg.crop_frames)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = crops.shape[0]
    bs = min(cfg.batch_size, n)
    mse_history = []
    for step in range(cfg.train_steps):
        idx = [(step * bs + j) % n for j in range(bs)]
        batch = crops[idx]
        recon = model(batch)
        loss = F.mse_loss(recon, batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"reconstruction loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        mse_history.append(float(loss.detach()))
        if log is not None and (step % 200 == 0 or step == cfg.train_steps - 1):
            log({"stage": "dcae", "step": step, "mse": mse_history[-1]})
    model.eval()
    with torch.no_grad():
        recon = model(crops)
        final_mse = float(F.mse_loss(recon, crops))
        final_lsd = log_spectral_distance(recon, crops)
    return model, {
        "final_mse": final_mse,
        "final_lsd": final_lsd,
        "steps": cfg.train_steps,
        "mse_history": mse_history,
    }


def latent_stats(model: Dcae, songs: list[Song]) -> LatentStats:
    """Per-channel mean/std over the corpus latents (population std, floored)."""
    model.eval()
    sums = torch.zeros(model.latent_channels, dtype=torch.float64)
    sq = torch.zeros(model.latent_channels, dtype=torch.float64)
    count = 0
    for song in songs:
        z, _ = model.encode_mel(song.mel)
        d = z.data.double()
        sums += d.sum(dim=(1, 2))
        sq += (d * d).sum(dim=(1, 2))
        count += d.shape[1] * d.shape[2]
    mean = sums / count
    var = (sq / count - mean * mean).clamp(min=1e-8)
    return LatentStats(mean=mean.float(), std=var.sqrt().float())


def save_dcae(path: str | Path, model: Dcae, stats: LatentStats) -> None:
    tensors = {
        "meta/kind": pack_text("dcae"),
        "config/width": torch.tensor([float(model.width)]),
        "config/n_bins": torch.tensor([float(model.n_bins)]),
        "config/frame_rate_hz": torch.tensor([model.frame_rate_hz]),
        "stats/latent_mean": stats.mean,
        "stats/latent_std": stats.std,
    }
    for name, value in model.state_dict().items():
        tensors[f"model/{name}"] = value
    save_tensors(path, tensors)


def load_dcae(path: str | Path) -> tuple[Dcae, LatentStats]:
    tensors = load_tensors(path)
    if unpack_text(tensors["meta/kind"]) != "dcae":
        raise ValueError(f"{path} is not a compression-stage checkpoint")
    return dcae_from_tensors(tensors)


def dcae_from_tensors(tensors: dict, prefix: str = "") -> tuple[Dcae, LatentStats]:
    model = Dcae(
        width=int(tensors[f"{prefix}config/width"][0]),
        n_bins=int(tensors[f"{prefix}config/n_bins"][0]),
        frame_rate_hz=float(tensors[f"{prefix}config/frame_rate_hz"][0]),
    )
    state = {
        name[len(prefix) + 6 :]: t
        for name, t in tensors.items()
        if name.startswith(f"{prefix}model/")
    }
    model.load_state_dict(state)
    model.eval()
    stats = LatentStats(
        mean=tensors[f"{prefix}stats/latent_mean"], std=tensors[f"{prefix}stats/latent_std"]
    )
    return model, stats


def dcae_to_tensors(model: Dcae, stats: LatentStats, prefix: str = "") -> dict:
    out = {
        f"{prefix}config/width": torch.tensor([float(model.width)]),
        f"{prefix}config/n_bins": torch.tensor([float(model.n_bins)]),
        f"{prefix}config/frame_rate_hz": torch.tensor([model.frame_rate_hz]),
        f"{prefix}stats/latent_mean": stats.mean,
        f"{prefix}stats/latent_std": stats.std,
    }
    for name, value in model.state_dict().items():
        out[f"{prefix}model/{name}"] = value
    return out
