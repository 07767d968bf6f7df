"""Inference: Euler ODE integration of the learned velocity field with
classifier-free guidance, plus the control suite built on top of it --
variations by trigonometric noise mixing, mask-constrained repainting, and
inversion-free two-branch flow editing.

Every operation is a pure function of (seed, config, parameters, conditions);
noise is drawn from a local generator in a documented order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .conditioning import ConditionBundle
from .config import SamplerSection
from .dit import ContextBatch, Denoiser
from .objectives import NoiseSchedule, make_noisy


class SamplerError(RuntimeError):
    pass


class MaskError(ValueError):
    pass


@dataclass
class EditMask:
    """Per-latent-frame keep/regenerate switch; True preserves the reference."""

    keep: torch.Tensor  # [T_lat] bool

    def __post_init__(self):
        self.keep = torch.as_tensor(self.keep, dtype=torch.bool)
        if self.keep.dim() != 1:
            raise MaskError(f"mask must be 1-D over latent frames, got {self.keep.dim()}-D")

    @staticmethod
    def regenerate_span(start_s: float, end_s: float, t_lat: int, latent_rate_hz: float):
        """All-keep mask with [start_s, end_s) opened for regeneration.

        Seconds map to latent frames as floor(start*rate) .. ceil(end*rate).
        """
        if end_s < start_s:
            raise MaskError(f"empty repaint span {start_s}..{end_s}")
        i0 = max(0, math.floor(start_s * latent_rate_hz))
        i1 = min(t_lat, math.ceil(end_s * latent_rate_hz))
        keep = torch.ones(t_lat, dtype=torch.bool)
        keep[i0:i1] = False
        return EditMask(keep=keep)


def cfg_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """v = v_uncond + scale * (v_cond - v_uncond), with exact endpoint paths."""
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"shape mismatch: {v_cond.shape} vs {v_uncond.shape}")
    if scale == 1.0:
        return v_cond
    if scale == 0.0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


class GuidedVelocity:
    """Bundles model + conditions; evaluates the guided field at (x, t)."""

    def __init__(
        self,
        model: Denoiser,
        cond: ConditionBundle,
        uncond: ConditionBundle | None,
        scale: float,
    ):
        self.model = model
        self.scale = scale
        self.cond_ctx = ContextBatch.from_bundles([cond]) if cond is not None else None
        self.uncond_ctx = ContextBatch.from_bundles([uncond]) if uncond is not None else None
        if scale != 1.0 and self.uncond_ctx is None:
            raise SamplerError("guidance scale != 1 needs an unconditional bundle")
        if scale != 0.0 and self.cond_ctx is None:
            raise SamplerError("guidance scale != 0 needs a conditional bundle")

    @torch.no_grad()
    def __call__(self, x: torch.Tensor, t: float) -> torch.Tensor:
        if self.scale == 1.0:
            return self.model(x, t, self.cond_ctx)
        if self.scale == 0.0:
            return self.model(x, t, self.uncond_ctx)
        v_cond = self.model(x, t, self.cond_ctx)
        v_uncond = self.model(x, t, self.uncond_ctx)
        return cfg_velocity(v_cond, v_uncond, self.scale)


def _integrate(
    velocity: GuidedVelocity,
    x: torch.Tensor,
    config: SamplerSection,
    keep: torch.Tensor | None = None,
    x_ref: torch.Tensor | None = None,
    z_fixed: torch.Tensor | None = None,
) -> torch.Tensor:
    """Euler integration from sigma=1 to sigma=0 on the shifted grid.

    With a keep mask, the kept frames are overwritten after every step with
    the reference re-noised at the new sigma (the reference itself at 0).
    """
    schedule = NoiseSchedule(config.shift)
    grid = schedule.sigma_grid(config.steps)
    overwrite = keep is not None and bool(keep.any())
    for i in range(config.steps):
        t_i = 1.0 - i / config.steps
        v = velocity(x, t_i)
        x = x + (grid[i + 1] - grid[i]) * v
        if not torch.isfinite(x).all():
            raise SamplerError(f"non-finite state after integration step {i}")
        if overwrite:
            if i == config.steps - 1:
                ref_state = x_ref
            else:
                ref_state = make_noisy(x_ref, z_fixed, grid[i + 1])
            x = torch.where(keep[None, None, None, :], ref_state, x)
    return x


def ode_sample(
    model: Denoiser,
    cond: ConditionBundle,
    t_lat: int,
    config: SamplerSection,
    uncond: ConditionBundle | None = None,
) -> torch.Tensor:
    """Draw z ~ N(0, I) and integrate the guided field to a clean latent [C, F, T]."""
    gen = torch.Generator().manual_seed(config.seed)
    z = torch.randn(1, model.latent_channels, model.f_lat, t_lat, generator=gen)
    velocity = GuidedVelocity(model, cond, uncond, config.guidance_scale)
    return _integrate(velocity, z, config)[0]


def variation_noise(z_orig: torch.Tensor, ratio: float, generator: torch.Generator):
    """Variance-preserving mix cos(r*pi/2)*z_orig + sin(r*pi/2)*z_new.

    One fresh-noise draw is consumed for every call, so sibling variations of
    the same seed stay aligned regardless of ratio. Endpoints are exact.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mixing ratio must be in [0, 1], got {ratio}")
    z_new = torch.randn(z_orig.shape, generator=generator, dtype=z_orig.dtype)
    if ratio == 0.0:
        return z_orig.clone()
    if ratio == 1.0:
        return z_new
    angle = ratio * math.pi / 2.0
    return math.cos(angle) * z_orig + math.sin(angle) * z_new


def ode_sample_variation(
    model: Denoiser,
    cond: ConditionBundle,
    t_lat: int,
    config: SamplerSection,
    ratio: float,
    variation_seed: int,
    uncond: ConditionBundle | None = None,
) -> torch.Tensor:
    """ode_sample with the initial noise replaced by a trigonometric mix.

    ratio 0 reproduces ode_sample(config) bit-exactly; ratio 1 is an
    independent draw keyed by variation_seed.
    """
    gen = torch.Generator().manual_seed(config.seed)
    z_orig = torch.randn(1, model.latent_channels, model.f_lat, t_lat, generator=gen)
    var_gen = torch.Generator().manual_seed(variation_seed)
    z = variation_noise(z_orig, ratio, var_gen)
    velocity = GuidedVelocity(model, cond, uncond, config.guidance_scale)
    return _integrate(velocity, z, config)[0]


def repaint(
    model: Denoiser,
    x_ref: torch.Tensor,
    mask: EditMask,
    cond: ConditionBundle,
    config: SamplerSection,
    uncond: ConditionBundle | None = None,
) -> torch.Tensor:
    """Regenerate the masked-out frames of x_ref [C, F, T]; keep frames exactly.

    The keep region is re-noised with one fixed z per run so the constraint is
    consistent across steps; an all-regenerate mask follows the same code path
    as ode_sample and reproduces it bit-exactly at equal seeds.
    """
    if x_ref.dim() != 3:
        raise MaskError(f"reference latent must be [C, F, T], got {x_ref.dim()}-D")
    t_lat = x_ref.shape[-1]
    if mask.keep.shape[0] != t_lat:
        raise MaskError(f"mask length {mask.keep.shape[0]} vs {t_lat} latent frames")
    gen = torch.Generator().manual_seed(config.seed)
    z = torch.randn(1, *x_ref.shape, generator=gen, dtype=x_ref.dtype)
    velocity = GuidedVelocity(model, cond, uncond, config.guidance_scale)
    x = _integrate(
        velocity, z, config, keep=mask.keep, x_ref=x_ref.unsqueeze(0), z_fixed=z
    )
    return x[0]


def flow_edit(
    model: Denoiser,
    x_src: torch.Tensor,
    cond_src: ConditionBundle,
    cond_tgt: ConditionBundle,
    config: SamplerSection,
    uncond: ConditionBundle | None = None,
) -> torch.Tensor:
    """Inversion-free edit of a clean latent [C, F, T] from cond_src to cond_tgt.

    At each sigma on the descending grid both branches share one noise draw:
    the source state is re-noised directly, the target state rides at a fixed
    offset (x_tgt - x_src), and only the velocity difference is integrated.
    Identical conditions give a zero difference at every step, returning x_src
    bit-exactly.
    """
    if x_src.dim() != 3:
        raise MaskError(f"source latent must be [C, F, T], got {x_src.dim()}-D")
    gen = torch.Generator().manual_seed(config.seed)
    schedule = NoiseSchedule(config.shift)
    grid = schedule.sigma_grid(config.steps)
    v_src_field = GuidedVelocity(model, cond_src, uncond, config.guidance_scale)
    v_tgt_field = GuidedVelocity(model, cond_tgt, uncond, config.guidance_scale)
    x_src_b = x_src.unsqueeze(0)
    x_tgt = x_src_b.clone()
    for i in range(config.steps):
        t_i = 1.0 - i / config.steps
        z_i = torch.randn(x_src_b.shape, generator=gen, dtype=x_src.dtype)
        x_src_noisy = make_noisy(x_src_b, z_i, grid[i])
        x_tgt_noisy = x_src_noisy + (x_tgt - x_src_b)
        v_src = v_src_field(x_src_noisy, t_i)
        v_tgt = v_tgt_field(x_tgt_noisy, t_i)
        x_tgt = x_tgt + (grid[i + 1] - grid[i]) * (v_tgt - v_src)
        if not torch.isfinite(x_tgt).all():
            raise SamplerError(f"non-finite state after edit step {i}")
    return x_tgt[0]
