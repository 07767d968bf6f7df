"""File-to-file runs tying the modules together: dataset generation, the two
trainers, and the inference commands. Every function here is reproducible
from (config, seed) alone, and all artifacts use the same tensor container.
"""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import torch

from .conditioning import ConditionBundle, tokenize_lyrics
from .config import RunConfig, SamplerSection
from .container import load_tensors, save_tensors
from .dcae import Latent, latent_stats, save_dcae, train_dcae
from .sampler import (
    EditMask,
    flow_edit,
    ode_sample,
    ode_sample_variation,
    repaint,
)
from .synth import MelSpectrogram, build_corpus, load_dataset, write_dataset
from .trainer import (
    TrainState,
    load_checkpoint,
    prepare_items,
    save_checkpoint,
    train_loop,
)


class PipelineError(RuntimeError):
    pass


MEL_TENSOR = "mel"
MEL_META_TENSOR = "meta"


def write_mel_file(path: str | Path, mel: MelSpectrogram) -> None:
    """Container with the "mel" tensor plus [frame_rate_hz, n_bins] metadata."""
    save_tensors(
        path,
        {
            MEL_TENSOR: mel.data,
            MEL_META_TENSOR: torch.tensor([mel.frame_rate_hz, float(mel.n_bins)]),
        },
    )


def read_mel_file(path: str | Path) -> MelSpectrogram:
    tensors = load_tensors(path)
    if MEL_TENSOR not in tensors or MEL_META_TENSOR not in tensors:
        raise PipelineError(f"{path} is not a mel file (missing {MEL_TENSOR}/{MEL_META_TENSOR})")
    data = tensors[MEL_TENSOR]
    meta = tensors[MEL_META_TENSOR]
    if data.ndim != 2 or int(meta[1]) != data.shape[1]:
        raise PipelineError(
            f"{path}: mel shape {tuple(data.shape)} disagrees with metadata n_bins {int(meta[1])}"
        )
    return MelSpectrogram(data=data, frame_rate_hz=float(meta[0]))


def run_gen_data(cfg: RunConfig, out_dir: str | Path) -> dict:
    songs = build_corpus(cfg.data, cfg.dcae)
    manifest = write_dataset(songs, out_dir)
    return {"n_songs": len(songs), "manifest": str(manifest), "out_dir": str(out_dir)}


def run_train_dcae(cfg: RunConfig, data_dir: str | Path, out: str | Path, log=None) -> dict:
    songs = load_dataset(data_dir)
    model, metrics = train_dcae(songs, cfg.dcae, log=log)
    stats = latent_stats(model, songs)
    save_dcae(out, model, stats)
    return {
        "ckpt": str(out),
        "final_mse": metrics["final_mse"],
        "final_lsd": metrics["final_lsd"],
        "steps": metrics["steps"],
    }


def run_train(
    cfg: RunConfig,
    data_dir: str | Path,
    dcae_ckpt: str | Path,
    out: str | Path,
    resume: str | Path | None = None,
    log=None,
    on_metrics=None,
) -> dict:
    """Train the denoiser; optionally resume a checkpoint trajectory-exactly."""
    from .dcae import load_dcae

    songs = load_dataset(data_dir)
    if resume is not None:
        state = load_checkpoint(resume)
    else:
        dcae, stats = load_dcae(dcae_ckpt)
        from .trainer import build_train_state

        state = build_train_state(cfg, dcae, stats)
    items = prepare_items(songs, state.dcae, state.stats, state.encoders, state.teachers)
    history = train_loop(state, items, on_metrics=on_metrics)
    save_checkpoint(state, out)
    result = {"ckpt": str(out), "step": state.step}
    if history:
        result.update(
            {
                "final_L_FM": history[-1]["L_FM"],
                "final_L_SSL": history[-1]["L_SSL"],
            }
        )
    if log is not None:
        for m in history:
            log(m)
    return result


def _sampler_config(
    cfg: RunConfig, seed: int | None, steps: int | None, guidance_scale: float | None
) -> SamplerSection:
    out = cfg.sampler
    if seed is not None:
        out = replace(out, seed=seed)
    if steps is not None:
        out = replace(out, steps=steps)
    if guidance_scale is not None:
        out = replace(out, guidance_scale=guidance_scale)
    return out


def _conditions(state: TrainState, tags: str, lyrics: str) -> tuple[ConditionBundle, ConditionBundle]:
    """Encode (cond, uncond) bundles; empty lyrics take the instrumental path."""
    lyric_source = lyrics if lyrics.strip() else "[inst]"
    lyric_ids = tokenize_lyrics(lyric_source)
    cond = state.encoders.encode(tags, lyric_ids, speaker_id=None)
    return cond, state.encoders.null_bundle()


def _decode_to_file(
    state: TrainState, latent_norm: torch.Tensor, n_frames: int, out: str | Path
) -> dict:
    latent = Latent(
        data=state.stats.denormalize(latent_norm),
        latent_rate_hz=state.dcae.latent_rate_hz,
    )
    mel = state.dcae.decode_latent(latent, n_frames=n_frames)
    write_mel_file(out, mel)
    return {
        "out": str(out),
        "n_frames": mel.n_frames,
        "n_bins": mel.n_bins,
        "duration_s": mel.duration_s,
    }


def _frames_for_duration(state: TrainState, duration_s: float) -> tuple[int, int]:
    if duration_s <= 0:
        raise PipelineError(f"duration must be positive, got {duration_s}")
    n_frames = int(round(duration_s * state.dcae.frame_rate_hz))
    n_frames = max(n_frames, 1)
    t_lat = math.ceil(n_frames / 8)
    return n_frames, t_lat


def load_inference_state(ckpt: str | Path) -> TrainState:
    state = load_checkpoint(ckpt)
    state.denoiser.eval()
    state.dcae.eval()
    return state


def run_sample(
    ckpt: str | Path,
    tags: str,
    lyrics: str,
    duration_s: float,
    out: str | Path,
    seed: int | None = None,
    steps: int | None = None,
    guidance_scale: float | None = None,
    state: TrainState | None = None,
) -> dict:
    """Text conditions to a mel file: encode, integrate the ODE, decode."""
    state = state or load_inference_state(ckpt)
    cond, uncond = _conditions(state, tags, lyrics)
    n_frames, t_lat = _frames_for_duration(state, duration_s)
    config = _sampler_config(state.cfg, seed, steps, guidance_scale)
    latent_norm = ode_sample(state.denoiser, cond, t_lat, config, uncond=uncond)
    result = _decode_to_file(state, latent_norm, n_frames, out)
    result.update({"n_frames_precrop": t_lat * 8, "t_lat": t_lat, "seed": config.seed})
    return result


def _encode_input_mel(state: TrainState, mel: MelSpectrogram) -> tuple[torch.Tensor, int]:
    latent, orig_frames = state.dcae.encode_mel(mel)
    return state.stats.normalize(latent.data), orig_frames


def run_repaint(
    ckpt: str | Path,
    in_mel: str | Path,
    mask_spec: str,
    tags: str,
    lyrics: str,
    out: str | Path,
    seed: int | None = None,
    steps: int | None = None,
    guidance_scale: float | None = None,
    state: TrainState | None = None,
) -> dict:
    """Regenerate the masked time span of an existing mel, keeping the rest."""
    state = state or load_inference_state(ckpt)
    mel = read_mel_file(in_mel)
    x_ref, orig_frames = _encode_input_mel(state, mel)
    start_s, end_s = parse_mask_spec(mask_spec)
    mask = EditMask.regenerate_span(
        start_s, end_s, x_ref.shape[-1], state.dcae.latent_rate_hz
    )
    cond, uncond = _conditions(state, tags, lyrics)
    config = _sampler_config(state.cfg, seed, steps, guidance_scale)
    latent_norm = repaint(state.denoiser, x_ref, mask, cond, config, uncond=uncond)
    result = _decode_to_file(state, latent_norm, orig_frames, out)
    result.update(
        {
            "regenerated_frames": int((~mask.keep).sum()),
            "kept_frames": int(mask.keep.sum()),
            "seed": config.seed,
        }
    )
    return result


def parse_mask_spec(spec: str) -> tuple[float, float]:
    """Time span "start_s..end_s" in seconds."""
    parts = spec.split("..")
    if len(parts) != 2:
        raise PipelineError(f'mask spec must look like "2.0..4.5", got {spec!r}')
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise PipelineError(f"mask spec bounds must be numbers, got {spec!r}") from exc


def run_variate(
    ckpt: str | Path,
    in_mel_or_seed: str,
    ratio: float,
    tags: str,
    lyrics: str,
    out: str | Path,
    duration_s: float | None = None,
    seed: int | None = None,
    variation_seed: int = 1,
    steps: int | None = None,
    guidance_scale: float | None = None,
    state: TrainState | None = None,
) -> dict:
    """Trigonometric noise-mix variation of a prior generation.

    The positional argument is either the seed of the original generation or
    the mel file it produced; a file fixes the geometry while --seed names the
    noise that generated it. Ratio 0 reproduces the original bit-exactly.
    """
    state = state or load_inference_state(ckpt)
    try:
        orig_seed = int(in_mel_or_seed)
        if duration_s is None:
            raise PipelineError("duration_s is required when variating from a seed")
        n_frames, t_lat = _frames_for_duration(state, duration_s)
    except ValueError:
        mel = read_mel_file(in_mel_or_seed)
        n_frames = mel.n_frames
        t_lat = math.ceil(n_frames / 8)
        orig_seed = seed if seed is not None else state.cfg.sampler.seed
    cond, uncond = _conditions(state, tags, lyrics)
    config = _sampler_config(state.cfg, orig_seed, steps, guidance_scale)
    latent_norm = ode_sample_variation(
        state.denoiser, cond, t_lat, config, ratio, variation_seed, uncond=uncond
    )
    result = _decode_to_file(state, latent_norm, n_frames, out)
    result.update({"ratio": ratio, "seed": orig_seed, "variation_seed": variation_seed})
    return result


def run_edit(
    ckpt: str | Path,
    in_mel: str | Path,
    tags: str,
    lyrics_src: str,
    lyrics_tgt: str,
    out: str | Path,
    seed: int | None = None,
    steps: int | None = None,
    guidance_scale: float | None = None,
    state: TrainState | None = None,
) -> dict:
    """Two-branch flow edit of an existing mel from source to target lyrics."""
    state = state or load_inference_state(ckpt)
    mel = read_mel_file(in_mel)
    x_src, orig_frames = _encode_input_mel(state, mel)
    cond_src, uncond = _conditions(state, tags, lyrics_src)
    cond_tgt, _ = _conditions(state, tags, lyrics_tgt)
    config = _sampler_config(state.cfg, seed, steps, guidance_scale)
    latent_norm = flow_edit(
        state.denoiser, x_src, cond_src, cond_tgt, config, uncond=uncond
    )
    result = _decode_to_file(state, latent_norm, orig_frames, out)
    result["seed"] = config.seed
    return result


def run_full_pipeline(cfg: RunConfig, workdir: str | Path, log=None) -> dict:
    """gen-data, train-dcae, train, one sample; returns all artifact paths."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    data_dir = workdir / "data"
    dcae_ckpt = workdir / "dcae.acep"
    dit_ckpt = workdir / "denoiser.acep"
    sample_path = workdir / "sample.acep"
    gen = run_gen_data(cfg, data_dir)
    dcae_metrics = run_train_dcae(cfg, data_dir, dcae_ckpt, log=log)
    train_metrics = run_train(cfg, data_dir, dcae_ckpt, dit_ckpt, log=log)
    sample = run_sample(
        dit_ckpt,
        tags="piano, calm",
        lyrics="[verse]\nab",
        duration_s=2.97,
        out=sample_path,
    )
    return {
        "data": gen,
        "dcae": dcae_metrics,
        "train": train_metrics,
        "sample": sample,
        "paths": {
            "data_dir": str(data_dir),
            "dcae_ckpt": str(dcae_ckpt),
            "dit_ckpt": str(dit_ckpt),
            "sample": str(sample_path),
        },
    }
