"""Request and response bodies for the HTTP service.

Paths refer to the filesystem of the host running the service; the service is
a thin wrapper over the same file-to-file pipeline the CLI uses in-process.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ConfiguredRequest(BaseModel):
    """Base for requests that honor a config file plus dotted-key overrides."""

    config_path: str | None = None
    overrides: dict[str, str] = Field(default_factory=dict)


class GenDataRequest(ConfiguredRequest):
    out_dir: str


class GenDataResponse(BaseModel):
    n_songs: int
    manifest: str
    out_dir: str


class TrainDcaeRequest(ConfiguredRequest):
    data_dir: str
    out: str


class TrainDcaeResponse(BaseModel):
    ckpt: str
    final_mse: float
    final_lsd: float
    steps: int


class TrainRequest(ConfiguredRequest):
    data_dir: str
    dcae_ckpt: str
    out: str
    resume: str | None = None


class TrainResponse(BaseModel):
    ckpt: str
    step: int
    final_L_FM: float | None = None
    final_L_SSL: float | None = None


class InferenceOverrides(BaseModel):
    seed: int | None = None
    steps: int | None = None
    guidance_scale: float | None = None


class SampleRequest(InferenceOverrides):
    ckpt: str
    tags: str
    lyrics: str = ""
    duration_s: float
    out: str


class MelFileResponse(BaseModel):
    out: str
    n_frames: int
    n_bins: int
    duration_s: float
    seed: int


class SampleResponse(MelFileResponse):
    n_frames_precrop: int
    t_lat: int


class RepaintRequest(InferenceOverrides):
    ckpt: str
    in_mel: str
    mask_spec: str
    tags: str
    lyrics: str = ""
    out: str


class RepaintResponse(MelFileResponse):
    regenerated_frames: int
    kept_frames: int


class VariateRequest(InferenceOverrides):
    ckpt: str
    in_mel_or_seed: str
    ratio: float
    tags: str
    lyrics: str = ""
    out: str
    duration_s: float | None = None
    variation_seed: int = 1


class VariateResponse(MelFileResponse):
    ratio: float
    variation_seed: int


class EditRequest(InferenceOverrides):
    ckpt: str
    in_mel: str
    tags: str
    lyrics_src: str
    lyrics_tgt: str
    out: str


class EditResponse(MelFileResponse):
    pass


class InspectRequest(BaseModel):
    path: str


class TensorRow(BaseModel):
    name: str
    shape: list[int]
    numel: int


class InspectResponse(BaseModel):
    path: str
    format_version: int
    tensor_count: int
    tensors: list[TensorRow]
    crc_ok: bool
    total_values: int


class EvalRequest(BaseModel):
    suite: str
    ckpt: str | None = None


class SuiteResultModel(BaseModel):
    name: str
    passed: bool
    details: dict


class EvalResponse(BaseModel):
    results: list[SuiteResultModel]
    all_passed: bool


class ErrorBody(BaseModel):
    error: str
    kind: str
