"""Deterministic synthetic mel-spectrogram corpus.

Each song is rendered from a compact SongSpec: a style tag drives a harmonic
pad in the low bins, lyric byte tokens drive fixed-length vocal bursts whose
bin encodes the letter, and the speaker id drives a high-bin overtone strip.
The layout is chosen so that conditioning signals are recoverable from the
mel by simple energy measurements, which the evaluation suites rely on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import conditioning
from .config import DataSection, DcaeSection
from .container import save_tensors, load_tensors

TAG_NAMES = [
    "pop", "rock", "jazz", "folk", "blues", "metal", "ambient", "techno",
    "house", "classical", "reggae", "funk", "country", "punk", "soul", "disco",
]

# Temporal layout of vocal bursts (seconds).
LEAD_IN_S = 0.15
BURST_LEN_S = 0.35
BURST_GAP_S = 0.10
BURST_SLOT_S = BURST_LEN_S + BURST_GAP_S

# Bin layout: harmonic pad low, vocal bursts mid/high, speaker strip on top.
PAD_BASE_BIN = 6
VOCAL_BASE_BIN = 72
VOCAL_BIN_STRIDE = 2
SPEAKER_BASE_BIN = 124
N_LETTER_BINS = 26

# Per-song texture so no two songs are cell-identical. Kept faint: the floor
# is unlearnable entropy for the denoiser, and it caps how far L_FM can fall.
NOISE_FLOOR_AMP = 0.005


class SynthError(ValueError):
    pass


@dataclass
class MelSpectrogram:
    """A [T, F] magnitude mel in [0, 1]; both dims are multiples of 8."""

    data: torch.Tensor
    frame_rate_hz: float

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz


@dataclass
class SongSpec:
    duration_s: float
    tag_id: int
    lyric_tokens: list[int]
    speaker_id: int | None
    seed: int


@dataclass
class Song:
    index: int
    spec: SongSpec
    tag_text: str
    lyric_text: str
    mel: MelSpectrogram


def letter_bin(token_id: int) -> int:
    """Vocal-band bin for a byte token: letters spread over 26 two-bin slots."""
    byte = token_id - conditioning.BYTE_OFFSET
    ch = chr(byte).lower()
    idx = (ord(ch) - ord("a")) % N_LETTER_BINS if ch.isalpha() else byte % N_LETTER_BINS
    return VOCAL_BASE_BIN + VOCAL_BIN_STRIDE * idx


def burst_windows(lyric_tokens, duration_s: float) -> list[tuple[float, float, int]]:
    """(start_s, end_s, bin) for every burst-bearing token, in order.

    Raises SynthError when the duration cannot hold all bursts.
    """
    burst_tokens = [t for t in lyric_tokens if conditioning.is_burst_token(t)]
    windows = []
    for k, tok in enumerate(burst_tokens):
        start = LEAD_IN_S + k * BURST_SLOT_S
        end = start + BURST_LEN_S
        if end > duration_s:
            raise SynthError(
                f"duration {duration_s:.2f}s holds only {k} of "
                f"{len(burst_tokens)} lyric bursts"
            )
        windows.append((start, end, letter_bin(tok)))
    return windows


def _pad_to_multiple(n: int, m: int = 8) -> int:
    return ((n + m - 1) // m) * m


def _add_band(canvas: np.ndarray, row: int, profile: np.ndarray, amp_spread=(0.45, 1.0, 0.45)):
    """Add a time profile at a bin with a little spectral width."""
    T, F = canvas.shape
    for off, w in zip((-1, 0, 1), amp_spread):
        b = row + off
        if 0 <= b < F:
            canvas[:, b] += w * profile


def synth_mel(
    spec: SongSpec,
    n_bins: int = 128,
    frame_rate_hz: float = 86.1328125,
) -> MelSpectrogram:
    """Render a SongSpec to a mel deterministically (seed fixes every sample)."""
    if n_bins % 8 != 0:
        raise SynthError(f"n_bins must be a multiple of 8, got {n_bins}")
    rng = np.random.default_rng(spec.seed)
    windows = burst_windows(spec.lyric_tokens, spec.duration_s)

    t_raw = round(spec.duration_s * frame_rate_hz)
    T = _pad_to_multiple(max(t_raw, 8))
    canvas = np.zeros((T, n_bins), dtype=np.float64)
    t_sec = np.arange(T) / frame_rate_hz
    active = (t_sec < spec.duration_s).astype(np.float64)

    # Style pad: a few decaying harmonics of a tag-dependent base bin, with a
    # slow seeded tremolo so no two songs share the exact texture.
    base = PAD_BASE_BIN + (spec.tag_id % 16) * 3
    lfo_hz = 0.3 + 0.4 * rng.random()
    lfo_phase = 2 * math.pi * rng.random()
    for k in range(3):
        row = base + 7 * k
        if row >= VOCAL_BASE_BIN - 2:
            break
        amp = 0.38 * (0.72**k)
        profile = amp * (0.82 + 0.18 * np.sin(2 * math.pi * lfo_hz * t_sec + lfo_phase))
        _add_band(canvas, row, profile * active)

    # Vocal bursts: one raised-cosine burst per qualifying lyric token, placed
    # at the letter's bin. Speaker overtone strip mirrors the burst envelope.
    spk_row = None
    if spec.speaker_id is not None:
        spk_row = SPEAKER_BASE_BIN + (spec.speaker_id % (n_bins - SPEAKER_BASE_BIN))
    for start_s, end_s, row in windows:
        i0, i1 = int(round(start_s * frame_rate_hz)), int(round(end_s * frame_rate_hz))
        i1 = min(max(i1, i0 + 2), T)
        env = np.zeros(T)
        n = i1 - i0
        env[i0:i1] = 0.5 - 0.5 * np.cos(2 * math.pi * (np.arange(n) + 0.5) / n)
        _add_band(canvas, row, 0.85 * env)
        if spk_row is not None:
            canvas[:, spk_row] += 0.5 * env

    canvas += rng.uniform(0.0, NOISE_FLOOR_AMP, size=canvas.shape) * active[:, None]
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return MelSpectrogram(
        data=torch.from_numpy(canvas.astype(np.float32)), frame_rate_hz=frame_rate_hz
    )


def _random_lyrics(rng: np.random.Generator, duration_s: float) -> str:
    """Distinct-letter lyric line sized to fit the duration with slack."""
    capacity = int((duration_s - LEAD_IN_S) / BURST_SLOT_S)
    n_letters = max(2, min(capacity - 1, 12))
    letters = rng.choice(np.array(list("abcdefghijklmnopqrstuvwxyz")), n_letters, replace=False)
    words, i = [], 0
    while i < n_letters:
        w = int(rng.integers(2, 4))
        words.append("".join(letters[i : i + w]))
        i += w
    section = "[verse]" if rng.random() < 0.7 else "[chorus]"
    return section + "\n" + " ".join(words)


def build_corpus(data_cfg: DataSection, dcae_cfg: DcaeSection) -> list[Song]:
    """The full deterministic training corpus for a config."""
    rng = np.random.default_rng(data_cfg.seed)
    durations = data_cfg.duration_choices()
    songs = []
    for i in range(data_cfg.n_songs):
        song_seed = int(rng.integers(0, 2**31 - 1))
        song_rng = np.random.default_rng(song_seed)
        duration = durations[i % len(durations)]
        tag_id = int(song_rng.integers(0, data_cfg.n_tags))
        instrumental = song_rng.random() < data_cfg.instrumental_fraction
        if instrumental:
            lyric_text = "[inst]" if song_rng.random() < 0.5 else "[instrumental]"
            speaker_id = None
        else:
            lyric_text = _random_lyrics(song_rng, duration)
            speaker_id = int(song_rng.integers(0, data_cfg.n_speakers))
        spec = SongSpec(
            duration_s=duration,
            tag_id=tag_id,
            lyric_tokens=conditioning.tokenize_lyrics(lyric_text),
            speaker_id=speaker_id,
            seed=song_seed,
        )
        mel = synth_mel(spec, n_bins=dcae_cfg.n_bins, frame_rate_hz=dcae_cfg.frame_rate_hz)
        songs.append(
            Song(
                index=i,
                spec=spec,
                tag_text=TAG_NAMES[tag_id % len(TAG_NAMES)],
                lyric_text=lyric_text,
                mel=mel,
            )
        )
    return songs


def write_dataset(songs: list[Song], out_dir: str | Path) -> Path:
    """Write songs as one tensor container each plus a JSONL manifest."""
    out = Path(out_dir)
    (out / "songs").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with manifest.open("w") as fh:
        for song in songs:
            rel = f"songs/song_{song.index:04d}.acep"
            save_tensors(
                out / rel,
                {
                    "mel": song.mel.data,
                    "frame_rate_hz": torch.tensor([song.mel.frame_rate_hz]),
                },
            )
            row = {
                "index": song.index,
                "file": rel,
                "duration_s": song.spec.duration_s,
                "tag_id": song.spec.tag_id,
                "tag_text": song.tag_text,
                "lyric_text": song.lyric_text,
                "speaker_id": song.spec.speaker_id,
                "seed": song.spec.seed,
            }
            fh.write(json.dumps(row) + "\n")
    return manifest


def load_dataset(dataset_dir: str | Path) -> list[Song]:
    root = Path(dataset_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    songs = []
    with manifest.open() as fh:
        for line in fh:
            row = json.loads(line)
            tensors = load_tensors(root / row["file"])
            mel = MelSpectrogram(
                data=tensors["mel"], frame_rate_hz=float(tensors["frame_rate_hz"][0])
            )
            spec = SongSpec(
                duration_s=row["duration_s"],
                tag_id=row["tag_id"],
                lyric_tokens=conditioning.tokenize_lyrics(row["lyric_text"]),
                speaker_id=row["speaker_id"],
                seed=row["seed"],
            )
            songs.append(
                Song(
                    index=row["index"],
                    spec=spec,
                    tag_text=row["tag_text"],
                    lyric_text=row["lyric_text"],
                    mel=mel,
                )
            )
    songs.sort(key=lambda s: s.index)
    return songs
