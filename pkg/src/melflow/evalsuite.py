"""Evaluation harness: measured properties of trained artifacts (lyric-burst
localization, reconstruction quality, attention scaling) plus the suite
runners behind the eval command. Tests and the CLI both call these.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import torch

from . import synth
from .conditioning import ConditionEncoders
from .config import SamplerSection
from .dcae import Dcae, Latent
from .dit import linear_attention
from .objectives import NoiseSchedule
from .sampler import ode_sample
from .trainer import TrainState, mix_seed


@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: dict

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={v}" for k, v in self.details.items())
        return f"[{status}] {self.name}: {parts}"


def generate_song_mel(
    state: TrainState, song: synth.Song, sampler_cfg: SamplerSection
) -> synth.MelSpectrogram:
    """Sample a latent under the song's own conditions and decode it."""
    bundle = state.encoders.encode(
        song.tag_text, song.spec.lyric_tokens, song.spec.speaker_id
    )
    null = state.encoders.null_bundle()
    t_lat = song.mel.data.shape[0] // 8
    cfg = replace(sampler_cfg, seed=mix_seed(sampler_cfg.seed, song.index))
    state.denoiser.eval()
    latent_norm = ode_sample(state.denoiser, bundle, t_lat, cfg, uncond=null)
    latent = Latent(
        data=state.stats.denormalize(latent_norm),
        latent_rate_hz=state.dcae.latent_rate_hz,
    )
    return state.dcae.decode_latent(latent, n_frames=song.mel.data.shape[0])


def burst_localization_score(
    mel: synth.MelSpectrogram, song: synth.Song
) -> float | None:
    """How concentrated generated vocal energy is inside the true burst windows.

    For each burst token: mean energy per frame in its (window x bin band)
    over mean energy per frame across all time in that band. 1.0 means no
    temporal localization at all; the renderer's own mels score far higher.
    """
    windows = synth.burst_windows(song.spec.lyric_tokens, song.spec.duration_s)
    if not windows:
        return None
    fr = mel.frame_rate_hz
    scores = []
    for start_s, end_s, row in windows:
        i0, i1 = int(round(start_s * fr)), int(round(end_s * fr))
        i1 = min(max(i1, i0 + 1), mel.n_frames)
        band = mel.data[:, max(row - 1, 0) : row + 2]
        in_window = float(band[i0:i1].mean())
        overall = float(band.mean())
        scores.append(in_window / (overall + 1e-8))
    return sum(scores) / len(scores)


def lyric_localization(
    state: TrainState,
    songs: list[synth.Song],
    sampler_cfg: SamplerSection,
    max_songs: int = 8,
) -> dict:
    """Mean burst localization over generated renditions of vocal songs."""
    vocal = [s for s in songs if s.spec.speaker_id is not None][:max_songs]
    per_song = {}
    for song in vocal:
        mel = generate_song_mel(state, song, sampler_cfg)
        score = burst_localization_score(mel, song)
        if score is not None:
            per_song[song.index] = score
    mean = sum(per_song.values()) / max(len(per_song), 1)
    return {"mean_score": mean, "per_song": per_song, "n_songs": len(per_song)}


def edit_energy_localization(
    state: TrainState,
    song: synth.Song,
    sampler_cfg: SamplerSection,
    burst_index: int = 0,
    pad_frames: int = 1,
) -> dict:
    """Fraction of flow-edit latent change inside the edited token's window.

    Swaps one burst token of the song's lyrics for a different letter, edits
    the model's own rendition from source to target lyrics, and measures how
    much of the squared latent change falls in that token's time span.
    """
    from .conditioning import BYTE_OFFSET, is_burst_token
    from .sampler import flow_edit

    toks = list(song.spec.lyric_tokens)
    positions = [i for i, t in enumerate(toks) if is_burst_token(t)]
    if burst_index >= len(positions):
        raise ValueError(f"song {song.index} has only {len(positions)} burst tokens")
    p = positions[burst_index]
    replacement = next(
        BYTE_OFFSET + ord(c)
        for c in "abcdefghijklmnopqrstuvwxyz"
        if BYTE_OFFSET + ord(c) != toks[p]
    )
    tgt = list(toks)
    tgt[p] = replacement

    cond_src = state.encoders.encode(song.tag_text, toks, song.spec.speaker_id)
    cond_tgt = state.encoders.encode(song.tag_text, tgt, song.spec.speaker_id)
    null = state.encoders.null_bundle()
    t_lat = song.mel.data.shape[0] // 8
    cfg = replace(sampler_cfg, seed=mix_seed(sampler_cfg.seed, "edit", song.index))
    state.denoiser.eval()
    x_src = ode_sample(state.denoiser, cond_src, t_lat, cfg, uncond=null)
    x_edit = flow_edit(state.denoiser, x_src, cond_src, cond_tgt, cfg, uncond=null)

    delta = (x_edit - x_src).pow(2).sum(dim=(0, 1))  # [T_lat]
    start_s, end_s, _ = synth.burst_windows(toks, song.spec.duration_s)[burst_index]
    rate = state.dcae.latent_rate_hz
    lo = max(math.floor(start_s * rate) - pad_frames, 0)
    hi = min(math.ceil(end_s * rate) + pad_frames, t_lat)
    total = float(delta.sum())
    inside = float(delta[lo:hi].sum())
    return {
        "fraction_in_window": inside / total if total > 0 else 0.0,
        "window_frames": (lo, hi),
        "t_lat": t_lat,
        "total_change": total,
    }


def reconstruction_report(dcae_model: Dcae, songs: list[synth.Song]) -> dict:
    """Corpus-level roundtrip error of the frozen compression stage."""
    import torch.nn.functional as F

    total, count = 0.0, 0
    for song in songs:
        latent, orig = dcae_model.encode_mel(song.mel)
        recon = dcae_model.decode_latent(latent, n_frames=orig)
        total += float(F.mse_loss(recon.data, song.mel.data)) * song.mel.data.numel()
        count += song.mel.data.numel()
    return {"corpus_mse": total / count}


def _time_fn(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    times.sort()
    return times[len(times) // 2]


def quadratic_attention_reference(q, k, v):
    """Plain softmax attention, O(L^2); the scaling baseline."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return scores.softmax(dim=-1) @ v


def attention_scaling_benchmark(
    short_len: int = 2048, long_len: int = 4096, dim: int = 32, repeats: int = 5
) -> dict:
    """Median wall-clock ratio long/short for linear and quadratic attention."""
    gen = torch.Generator().manual_seed(0)

    def inputs(length):
        return [torch.randn(1, length, dim, generator=gen) for _ in range(3)]

    results = {}
    for name, fn in (("linear", linear_attention), ("quadratic", quadratic_attention_reference)):
        qs, ks, vs = inputs(short_len)
        ql, kl, vl = inputs(long_len)
        fn(qs, ks, vs)  # warm up allocator and kernels
        fn(ql, kl, vl)
        t_short = _time_fn(lambda: fn(qs, ks, vs), repeats)
        t_long = _time_fn(lambda: fn(ql, kl, vl), repeats)
        results[name] = {
            "t_short_ms": t_short * 1e3,
            "t_long_ms": t_long * 1e3,
            "ratio": t_long / t_short,
        }
    return results


def dropout_rate_audit(
    encoders: ConditionEncoders, rates, n_draws: int = 10_000, seed: int = 99
) -> dict:
    """Empirical frequencies of the four raw dropout draws over n_draws."""
    gen = torch.Generator().manual_seed(seed)
    base = encoders.null_bundle()  # content is irrelevant, flags are audited
    counts = {"global": 0, "text": 0, "lyric": 0, "speaker": 0}
    for _ in range(n_draws):
        out = encoders.apply_condition_dropout(base, gen, rates)
        counts["global"] += out.dropped.global_
        counts["text"] += out.dropped.text
        counts["lyric"] += out.dropped.lyric
        counts["speaker"] += out.dropped.speaker
    return {k: v / n_draws for k, v in counts.items()}


def binomial_ci_halfwidth(p: float, n: int, z: float = 2.576) -> float:
    """99% normal-approximation confidence half-width for a Bernoulli rate."""
    return z * math.sqrt(p * (1.0 - p) / n)


def timestep_distribution_ks(shift: float = 3.0, n: int = 100_000, seed: int = 7) -> float:
    """KS statistic of empirical sigma draws vs the analytic pushforward CDF."""
    from .objectives import sample_timesteps

    schedule = NoiseSchedule(shift)
    gen = torch.Generator().manual_seed(seed)
    t = sample_timesteps(n, gen)
    sigma = schedule.sigma(t)
    sigma_sorted = sigma.sort().values.double()
    cdf = schedule.sigma_cdf(sigma_sorted)
    i = torch.arange(1, n + 1, dtype=torch.float64)
    upper = (i / n - cdf).abs().max()
    lower = (cdf - (i - 1) / n).abs().max()
    return float(torch.maximum(upper, lower))


class ZeroVelocity:
    """Model stand-in that predicts zero velocity everywhere."""

    def __call__(self, x, t, ctx=None, return_hidden=False):
        out = torch.zeros_like(x)
        return (out, []) if return_hidden else out


class OracleVelocity:
    """Exact velocity field of the straight path toward a fixed clean latent.

    On the interpolation x = (1-sigma) x0 + sigma z the true velocity z - x0
    equals (x - x0) / sigma, so this is exact at every noisy state, and any
    Euler integration lands on x0 with zero discretization error.
    """

    def __init__(self, x0: torch.Tensor, schedule: NoiseSchedule):
        self.x0 = x0
        self.schedule = schedule
        self.latent_channels = x0.shape[-3]
        self.f_lat = x0.shape[-2]

    def eval(self):
        return self

    def __call__(self, x, t, ctx=None, return_hidden=False):
        sigma = self.schedule.sigma(torch.as_tensor(t, dtype=x.dtype))
        if sigma.dim() > 0:
            sigma = sigma.view(-1, *([1] * (x.dim() - 1)))
        out = (x - self.x0) / sigma
        return (out, []) if return_hidden else out


def precondition_identity_error(n: int = 1000, seed: int = 5) -> float:
    """Max reconstruction error of x0 from (target velocity, noisy state, sigma)."""
    from .objectives import fm_target, make_noisy, precondition_x0

    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n):
        x0 = torch.randn(1, 2, 3, 4, generator=gen)
        z = torch.randn(1, 2, 3, 4, generator=gen)
        sigma = torch.rand(1, generator=gen)
        noisy = make_noisy(x0, z, sigma)
        rebuilt = precondition_x0(fm_target(x0, z), sigma, noisy)
        worst = max(worst, float((rebuilt - x0).abs().max()))
    return worst


def zero_model_law_error(n: int = 64, seed: int = 6, shift: float = 3.0) -> float:
    """|fm_loss(zero model) - sigma^2 mean||z - x0||^2| for per-item sigmas."""
    from .objectives import fm_loss, sample_timesteps

    schedule = NoiseSchedule(shift)
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.randn(n, 2, 2, 4, generator=gen)
    z = torch.randn(n, 2, 2, 4, generator=gen)
    t = sample_timesteps(n, gen)
    loss = fm_loss(ZeroVelocity(), x0, z, t, None, schedule)
    sigma = schedule.sigma(t)
    expected = (sigma.view(-1, 1, 1, 1) ** 2 * (z - x0) ** 2).mean()
    return abs(float(loss) - float(expected))


def _randomize_zero_parameters(model: torch.nn.Module, seed: int = 3) -> None:
    """Give zero-initialized tensors random values so every path carries gradient.

    Zero-init gates and heads are correct for training but make a finite
    difference check vacuous: a zero gate kills both the analytic and numeric
    gradient of everything behind it.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if p.numel() and float(p.abs().max()) == 0.0:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.5)


def central_difference_check(
    model: torch.nn.Module, loss_fn, rel_tol: float = 1e-3, h: float = 1e-5
) -> dict:
    """Compare autograd gradients to central finite differences, all in float64.

    Checks every element of every trainable parameter. Relative error uses a
    small absolute floor so genuinely zero gradients compare as equal.
    """
    model.double()
    params = [p for p in model.parameters() if p.requires_grad]
    n_params = sum(p.numel() for p in params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            flat = p.view(-1)
            for idx in range(flat.numel()):
                keep = float(flat[idx])
                flat[idx] = keep + h
                up = float(loss_fn())
                flat[idx] = keep - h
                down = float(loss_fn())
                flat[idx] = keep
                numeric = (up - down) / (2.0 * h)
                analytic = float(grad.view(-1)[idx])
                denom = max(abs(numeric), abs(analytic), 1e-6)
                worst = max(worst, abs(numeric - analytic) / denom)
    return {"max_rel_err": worst, "n_params": n_params}


def micro_dcae() -> tuple[torch.nn.Module, callable]:
    from .dcae import Dcae

    with torch.random.fork_rng():
        torch.manual_seed(21)
        model = Dcae(width=1, n_bins=8, frame_rate_hz=86.1328125, latent_channels=2)
    gen = torch.Generator().manual_seed(22)
    x = torch.rand(1, 1, 8, 16, generator=gen).double()
    target = torch.rand(1, 1, 8, 16, generator=gen).double()

    def loss_fn():
        return ((model(x) - target) ** 2).mean()

    return model, loss_fn


def micro_denoiser() -> tuple[torch.nn.Module, callable]:
    from .dit import ContextBatch, Denoiser

    with torch.random.fork_rng():
        torch.manual_seed(31)
        model = Denoiser(
            d_model=4,
            blocks=1,
            heads=2,
            ffn_expansion=2,
            d_lyric=4,
            t_embed_dim=4,
            n_bins=8,
            latent_channels=4,
            d_text=4,
            d_speaker=4,
        )
    _randomize_zero_parameters(model, seed=32)
    gen = torch.Generator().manual_seed(33)
    latent = torch.randn(1, 4, 1, 6, generator=gen).double()
    target = torch.randn(1, 4, 1, 6, generator=gen).double()
    ctx = ContextBatch(
        text=torch.randn(1, 2, 4, generator=gen).double(),
        text_mask=torch.tensor([[True, True]]),
        lyric=torch.randn(1, 3, 4, generator=gen).double(),
        lyric_mask=torch.tensor([[True, True, False]]),
        speaker=torch.randn(1, 4, generator=gen).double(),
    )
    t = torch.tensor(0.37, dtype=torch.float64)

    def loss_fn():
        return ((model(latent, t, ctx) - target) ** 2).mean()

    return model, loss_fn


def micro_lyric_encoder() -> tuple[torch.nn.Module, callable]:
    from .conditioning import LyricEncoder

    with torch.random.fork_rng():
        torch.manual_seed(41)
        model = LyricEncoder(d=4, heads=2, blocks=1, vocab_size=16)
    ids = torch.tensor([[1, 5, 9, 12, 2, 0, 0]])
    mask = ids != 0
    gen = torch.Generator().manual_seed(42)
    target = torch.randn(1, 7, 4, generator=gen).double()

    def loss_fn():
        return ((model(ids, mask) - target) ** 2).mean()

    return model, loss_fn


def micro_ssl_heads() -> tuple[torch.nn.Module, callable]:
    from .objectives import HUBERT_PROXY, MERT_PROXY, LossWeights, SslHeads, ssl_loss

    with torch.random.fork_rng():
        torch.manual_seed(51)
        heads = SslHeads(d_model=16, d_mert=12, d_hubert=8)
    gen = torch.Generator().manual_seed(52)
    h_tap = torch.randn(5, 16, generator=gen).double()
    feats = {
        MERT_PROXY: torch.randn(7, 12, generator=gen).double(),
        HUBERT_PROXY: torch.randn(4, 8, generator=gen).double(),
    }
    weights = LossWeights(lambda_ssl=1.0, w_mert=1.0, w_hubert=1.0)

    def loss_fn():
        return ssl_loss(h_tap, feats, heads, weights)[0]

    return heads, loss_fn


GRADCHECK_SUBSYSTEMS = {
    "dcae": micro_dcae,
    "denoiser": micro_denoiser,
    "lyric_encoder": micro_lyric_encoder,
    "ssl_heads": micro_ssl_heads,
}


def suite_geometry() -> list[SuiteResult]:
    """Shape law anchors: 11.88 s -> 128 latent frames; 2584 frames -> ~240 s."""
    from .conditioning import tokenize_lyrics
    from .dcae import Dcae
    from .synth import SongSpec, synth_mel

    t0 = time.perf_counter()
    spec = SongSpec(
        duration_s=11.88,
        tag_id=0,
        lyric_tokens=tokenize_lyrics("[verse]\nab"),
        speaker_id=0,
        seed=1,
    )
    mel = synth_mel(spec)
    with torch.random.fork_rng():
        torch.manual_seed(0)
        model = Dcae(width=1)
    latent, _ = model.encode_mel(mel)
    enc_frames = latent.n_frames

    big = Latent(
        data=torch.zeros(model.latent_channels, model.n_bins // 8, 2584),
        latent_rate_hz=model.latent_rate_hz,
    )
    decoded = model.decode_latent(big)
    dec_duration = decoded.duration_s
    frame_gap = abs(decoded.n_frames - round(240.0 * model.frame_rate_hz))
    elapsed = time.perf_counter() - t0
    passed = enc_frames == 128 and frame_gap <= 1
    return [
        SuiteResult(
            "geometry",
            passed,
            {
                "encode_11.88s_latent_frames": enc_frames,
                "decode_2584_duration_s": round(dec_duration, 4),
                "decode_2584_frame_gap": frame_gap,
                "elapsed_s": round(elapsed, 3),
            },
        )
    ]


def suite_fm_identity() -> list[SuiteResult]:
    """Preconditioning identity, zero-model loss law, oracle exactness."""
    from .conditioning import ConditionEncoders
    from .objectives import fm_loss, sample_timesteps

    t0 = time.perf_counter()
    pre_err = precondition_identity_error(n=1000)
    law_err = zero_model_law_error()

    schedule = NoiseSchedule(3.0)
    gen = torch.Generator().manual_seed(8)
    x0 = torch.randn(4, 2, 2, 6, generator=gen)
    z = torch.randn(4, 2, 2, 6, generator=gen)
    t = sample_timesteps(4, gen)
    oracle = OracleVelocity(x0, schedule)
    oracle_loss = float(fm_loss(oracle, x0, z, t, None, schedule))

    with torch.random.fork_rng():
        torch.manual_seed(9)
        encoders = ConditionEncoders(d_lyric=8, n_speakers=2)
    x0_one = torch.randn(1, 2, 2, 6, generator=gen)
    oracle_one = OracleVelocity(x0_one, schedule)
    cfg = SamplerSection(steps=1, guidance_scale=1.0, shift=3.0, seed=3)
    one_step = ode_sample(oracle_one, encoders.null_bundle(), 6, cfg)
    one_step_err = float((one_step - x0_one[0]).abs().max())
    multi = ode_sample(oracle_one, encoders.null_bundle(), 6, replace(cfg, steps=17))
    multi_err = float((multi - x0_one[0]).abs().max())
    elapsed = time.perf_counter() - t0
    passed = (
        pre_err <= 1e-6
        and law_err <= 1e-6
        and oracle_loss <= 1e-6
        and one_step_err <= 1e-6
        and multi_err <= 1e-6
    )
    return [
        SuiteResult(
            "fm-identity",
            passed,
            {
                "precondition_max_err": pre_err,
                "zero_model_law_err": law_err,
                "oracle_fm_loss": oracle_loss,
                "oracle_one_step_err": one_step_err,
                "oracle_17_step_err": multi_err,
                "elapsed_s": round(elapsed, 3),
            },
        )
    ]


def suite_gradcheck() -> list[SuiteResult]:
    """Central finite differences vs autograd on sub-1k-parameter instances."""
    out = []
    for name, build in GRADCHECK_SUBSYSTEMS.items():
        t0 = time.perf_counter()
        model, loss_fn = build()
        report = central_difference_check(model, loss_fn)
        elapsed = time.perf_counter() - t0
        passed = report["max_rel_err"] <= 1e-3 and report["n_params"] <= 1000
        out.append(
            SuiteResult(
                f"gradcheck/{name}",
                passed,
                {
                    "max_rel_err": f"{report['max_rel_err']:.2e}",
                    "n_params": report["n_params"],
                    "elapsed_s": round(elapsed, 3),
                },
            )
        )
    return out


def _small_control_state():
    """A compact trained-shape model for exactness checks (weights untrained)."""
    from .config import DitSection
    from .dit import build_denoiser

    dit_cfg = DitSection(
        d_model=32, blocks=2, heads=2, d_lyric=16, t_embed_dim=32, seed=13
    )
    model = build_denoiser(dit_cfg, n_bins=128)
    with torch.random.fork_rng():
        torch.manual_seed(14)
        encoders = ConditionEncoders(d_lyric=16, n_speakers=4)
    return model, encoders


def suite_control(state: TrainState | None = None) -> list[SuiteResult]:
    """Bit-level exactness of the control suite against its contracts."""
    from .conditioning import tokenize_lyrics
    from .sampler import EditMask, flow_edit, ode_sample_variation, repaint

    t0 = time.perf_counter()
    if state is not None:
        model, encoders = state.denoiser, state.encoders
    else:
        model, encoders = _small_control_state()
    model.eval()
    cond = encoders.encode("piano, bright", tokenize_lyrics("[verse]\nab"), None)
    uncond = encoders.null_bundle()
    t_lat = 24
    cfg = SamplerSection(steps=8, guidance_scale=3.0, shift=3.0, seed=17)

    baseline = ode_sample(model, cond, t_lat, cfg, uncond=uncond)

    all_regen = EditMask(keep=torch.zeros(t_lat, dtype=torch.bool))
    x_ref = torch.randn(
        model.latent_channels, model.f_lat, t_lat,
        generator=torch.Generator().manual_seed(18),
    )
    regen = repaint(model, x_ref, all_regen, cond, cfg, uncond=uncond)
    regen_bit_equal = bool(torch.equal(regen, baseline))

    keep = torch.zeros(t_lat, dtype=torch.bool)
    keep[:6] = True
    keep[-3:] = True
    kept = repaint(model, x_ref, EditMask(keep=keep), cond, cfg, uncond=uncond)
    keep_dev = float((kept[..., keep] - x_ref[..., keep]).abs().max())

    var0 = ode_sample_variation(model, cond, t_lat, cfg, 0.0, 999, uncond=uncond)
    var0_bit_equal = bool(torch.equal(var0, baseline))

    edited = flow_edit(model, baseline, cond, cond, cfg, uncond=uncond)
    edit_bit_equal = bool(torch.equal(edited, baseline))
    elapsed = time.perf_counter() - t0
    passed = regen_bit_equal and keep_dev == 0.0 and var0_bit_equal and edit_bit_equal
    return [
        SuiteResult(
            "control",
            passed,
            {
                "repaint_keep_max_dev": keep_dev,
                "repaint_all_regen_bit_equal": regen_bit_equal,
                "variation_ratio0_bit_equal": var0_bit_equal,
                "flow_edit_identity_bit_equal": edit_bit_equal,
                "elapsed_s": round(elapsed, 3),
            },
        )
    ]


def suite_stats() -> list[SuiteResult]:
    """Dropout-rate confidence intervals and the timestep distribution KS test."""
    from .conditioning import DropoutRates

    t0 = time.perf_counter()
    with torch.random.fork_rng():
        torch.manual_seed(19)
        encoders = ConditionEncoders(d_lyric=8, n_speakers=2)
    rates = DropoutRates()
    n = 10_000
    observed = dropout_rate_audit(encoders, rates, n_draws=n)
    targets = {
        "global": rates.global_,
        "text": rates.text,
        "lyric": rates.lyric,
        "speaker": rates.speaker,
    }
    rate_ok = all(
        abs(observed[k] - p) <= binomial_ci_halfwidth(p, n) for k, p in targets.items()
    )
    ks = timestep_distribution_ks(shift=3.0, n=100_000)
    elapsed = time.perf_counter() - t0
    passed = rate_ok and ks < 0.01
    return [
        SuiteResult(
            "stats",
            passed,
            {
                "dropout_observed": {k: round(v, 4) for k, v in observed.items()},
                "dropout_in_ci": rate_ok,
                "sigma_ks": round(ks, 5),
                "elapsed_s": round(elapsed, 3),
            },
        )
    ]


def suite_attention() -> list[SuiteResult]:
    """Wall-clock scaling of linear attention vs the quadratic reference."""
    t0 = time.perf_counter()
    bench = attention_scaling_benchmark()
    elapsed = time.perf_counter() - t0
    linear_ratio = bench["linear"]["ratio"]
    quad_ratio = bench["quadratic"]["ratio"]
    passed = linear_ratio <= 3.0 and quad_ratio > 3.4
    return [
        SuiteResult(
            "attention",
            passed,
            {
                "linear_ratio_4096_over_2048": round(linear_ratio, 3),
                "quadratic_ratio_4096_over_2048": round(quad_ratio, 3),
                "elapsed_s": round(elapsed, 3),
            },
        )
    ]


def fm_moving_average(history: list[dict], window: int = 10) -> tuple[float, float]:
    """(early, final) window means of L_FM over a training history."""
    fm = [m["L_FM"] for m in history]
    return sum(fm[:window]) / window, sum(fm[-window:]) / window


def ssl_window_means(history: list[dict], window: int = 500) -> list[float]:
    ssl = [m["L_SSL"] for m in history]
    return [
        sum(ssl[i : i + window]) / window for i in range(0, len(ssl) - window + 1, window)
    ]


def overfit_pair(cfg, songs, log=None) -> dict:
    """Train the aligned run and its alignment-ablated twin on one corpus.

    Returns both histories and final localization scores; the heavy artifact
    behind the overfit suite, shared so callers train at most once.
    """
    from .dcae import latent_stats, train_dcae
    from .trainer import build_train_state, prepare_items, train_loop

    dcae_model, dcae_metrics = train_dcae(songs, cfg.dcae, log=log)
    stats = latent_stats(dcae_model, songs)
    runs = {}
    for label, run_cfg in (
        ("repa", cfg),
        ("ablated", cfg.replace(**{"train.lambda_ssl": 0.0})),
    ):
        state = build_train_state(run_cfg, dcae_model, stats)
        items = prepare_items(songs, state.dcae, state.stats, state.encoders, state.teachers)
        history = train_loop(state, items, on_metrics=log)
        loc = lyric_localization(state, songs, run_cfg.sampler)
        runs[label] = {"state": state, "history": history, "localization": loc}
    return {"dcae_metrics": dcae_metrics, "runs": runs}


OVERFIT_FM_FRACTION = 0.05
OVERFIT_LOCALIZATION_GAP = 0.20


def suite_overfit(cfg, songs, log=None, pair: dict | None = None) -> list[SuiteResult]:
    """Desk-scale overfit run: loss collapse, SSL descent, ablation gap."""
    t0 = time.perf_counter()
    pair = pair or overfit_pair(cfg, songs, log=log)
    repa = pair["runs"]["repa"]
    ablated = pair["runs"]["ablated"]

    early, final = fm_moving_average(repa["history"])
    fm_ok = final < OVERFIT_FM_FRACTION * early
    ssl_means = ssl_window_means(repa["history"])
    ssl_ok = all(b < a for a, b in zip(ssl_means, ssl_means[1:]))
    loc_repa = repa["localization"]["mean_score"]
    loc_ablated = ablated["localization"]["mean_score"]
    gap = (loc_repa - loc_ablated) / loc_repa if loc_repa > 0 else 0.0
    gap_ok = gap >= OVERFIT_LOCALIZATION_GAP
    elapsed = time.perf_counter() - t0
    return [
        SuiteResult(
            "overfit/fm-collapse",
            fm_ok,
            {
                "early_ma10": round(early, 5),
                "final_ma10": round(final, 5),
                "fraction": round(final / early, 5),
                "threshold": OVERFIT_FM_FRACTION,
            },
        ),
        SuiteResult(
            "overfit/ssl-descent",
            ssl_ok,
            {"window_means": [round(v, 5) for v in ssl_means]},
        ),
        SuiteResult(
            "overfit/ablation-gap",
            gap_ok,
            {
                "localization_repa": round(loc_repa, 4),
                "localization_ablated": round(loc_ablated, 4),
                "relative_gap": round(gap, 4),
                "threshold": OVERFIT_LOCALIZATION_GAP,
                "elapsed_s": round(elapsed, 1),
            },
        ),
    ]


def suite_repro(cfg, workdir: str | Path) -> list[SuiteResult]:
    """Two full pipeline runs bit-compared, plus a resume-trajectory check."""
    import hashlib
    from pathlib import Path

    from .pipeline import run_full_pipeline

    t0 = time.perf_counter()
    workdir = Path(workdir)
    digests = {}
    for label in ("a", "b"):
        result = run_full_pipeline(cfg, workdir / label)
        digests[label] = {
            name: hashlib.sha256(Path(path).read_bytes()).hexdigest()
            for name, path in result["paths"].items()
            if name != "data_dir"
        }
    bit_identical = digests["a"] == digests["b"]
    resume_ok = resume_trajectory_check(cfg, workdir / "a" / "data", workdir / "resume")
    elapsed = time.perf_counter() - t0
    return [
        SuiteResult(
            "repro",
            bit_identical and resume_ok,
            {
                "runs_bit_identical": bit_identical,
                "resume_trajectory_exact": resume_ok,
                "artifacts": sorted(digests["a"]),
                "elapsed_s": round(elapsed, 1),
            },
        )
    ]


def resume_trajectory_check(cfg, data_dir: str | Path, workdir: str | Path) -> bool:
    """Save at half, resume, and compare against the uninterrupted run."""
    from pathlib import Path

    from .dcae import latent_stats, train_dcae
    from .synth import load_dataset
    from .trainer import (
        build_train_state,
        load_checkpoint,
        prepare_items,
        save_checkpoint,
        train_loop,
    )

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    total = cfg.train.steps
    half = max(total // 2, 1)
    songs = load_dataset(data_dir)
    dcae_model, _ = train_dcae(songs, cfg.dcae)
    stats = latent_stats(dcae_model, songs)

    state = build_train_state(cfg, dcae_model, stats)
    items = prepare_items(songs, state.dcae, state.stats, state.encoders, state.teachers)
    train_loop(state, items, total_steps=half)
    save_checkpoint(state, workdir / "half.acep")
    train_loop(state, items, total_steps=total)
    save_checkpoint(state, workdir / "straight.acep")

    resumed = load_checkpoint(workdir / "half.acep")
    items_r = prepare_items(
        songs, resumed.dcae, resumed.stats, resumed.encoders, resumed.teachers
    )
    train_loop(resumed, items_r, total_steps=total)
    save_checkpoint(resumed, workdir / "resumed.acep")
    return (workdir / "straight.acep").read_bytes() == (workdir / "resumed.acep").read_bytes()


LIGHT_SUITES = {
    "geometry": suite_geometry,
    "fm-identity": suite_fm_identity,
    "gradcheck": suite_gradcheck,
    "control": suite_control,
    "stats": suite_stats,
    "attention": suite_attention,
}


