"""FastAPI wrapper over the pipeline: one endpoint per command, shared error
mapping, and a health probe. State (checkpoints) lives on disk; requests name
paths, so the service stays stateless between calls.
"""

from __future__ import annotations

import dataclasses

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, container, evalsuite, pipeline
from ..config import ConfigError, RunConfig, apply_string_overrides
from . import schemas


def _load_config(req: schemas.ConfiguredRequest) -> RunConfig:
    cfg = RunConfig.from_file(req.config_path) if req.config_path else RunConfig()
    if req.overrides:
        cfg = apply_string_overrides(cfg, req.overrides)
    return cfg


_CLIENT_ERRORS = (
    ConfigError,
    container.ContainerError,
    pipeline.PipelineError,
    FileNotFoundError,
    ValueError,
)


def create_app() -> FastAPI:
    app = FastAPI(title="melflow", version=__version__)

    @app.exception_handler(Exception)
    async def on_error(request, exc):
        status = 400 if isinstance(exc, _CLIENT_ERRORS) else 500
        body = schemas.ErrorBody(error=str(exc), kind=type(exc).__name__)
        return JSONResponse(status_code=status, content=body.model_dump())

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/gen-data", response_model=schemas.GenDataResponse)
    def gen_data(req: schemas.GenDataRequest):
        return pipeline.run_gen_data(_load_config(req), req.out_dir)

    @app.post("/train-dcae", response_model=schemas.TrainDcaeResponse)
    def train_dcae(req: schemas.TrainDcaeRequest):
        return pipeline.run_train_dcae(_load_config(req), req.data_dir, req.out)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        return pipeline.run_train(
            _load_config(req), req.data_dir, req.dcae_ckpt, req.out, resume=req.resume
        )

    @app.post("/sample", response_model=schemas.SampleResponse)
    def sample(req: schemas.SampleRequest):
        return pipeline.run_sample(
            req.ckpt,
            tags=req.tags,
            lyrics=req.lyrics,
            duration_s=req.duration_s,
            out=req.out,
            seed=req.seed,
            steps=req.steps,
            guidance_scale=req.guidance_scale,
        )

    @app.post("/repaint", response_model=schemas.RepaintResponse)
    def repaint(req: schemas.RepaintRequest):
        return pipeline.run_repaint(
            req.ckpt,
            in_mel=req.in_mel,
            mask_spec=req.mask_spec,
            tags=req.tags,
            lyrics=req.lyrics,
            out=req.out,
            seed=req.seed,
            steps=req.steps,
            guidance_scale=req.guidance_scale,
        )

    @app.post("/variate", response_model=schemas.VariateResponse)
    def variate(req: schemas.VariateRequest):
        return pipeline.run_variate(
            req.ckpt,
            in_mel_or_seed=req.in_mel_or_seed,
            ratio=req.ratio,
            tags=req.tags,
            lyrics=req.lyrics,
            out=req.out,
            duration_s=req.duration_s,
            seed=req.seed,
            variation_seed=req.variation_seed,
            steps=req.steps,
            guidance_scale=req.guidance_scale,
        )

    @app.post("/edit", response_model=schemas.EditResponse)
    def edit(req: schemas.EditRequest):
        return pipeline.run_edit(
            req.ckpt,
            in_mel=req.in_mel,
            tags=req.tags,
            lyrics_src=req.lyrics_src,
            lyrics_tgt=req.lyrics_tgt,
            out=req.out,
            seed=req.seed,
            steps=req.steps,
            guidance_scale=req.guidance_scale,
        )

    @app.post("/inspect", response_model=schemas.InspectResponse)
    def inspect(req: schemas.InspectRequest):
        return container.inspect(req.path)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def run_eval(req: schemas.EvalRequest):
        if req.suite not in evalsuite.LIGHT_SUITES:
            raise ValueError(
                f"unknown or heavyweight suite {req.suite!r}; serveable suites: "
                f"{sorted(evalsuite.LIGHT_SUITES)}"
            )
        if req.suite == "control" and req.ckpt:
            state = pipeline.load_inference_state(req.ckpt)
            results = evalsuite.suite_control(state)
        else:
            results = evalsuite.LIGHT_SUITES[req.suite]()
        return schemas.EvalResponse(
            results=[dataclasses.asdict(r) for r in results],
            all_passed=all(r.passed for r in results),
        )

    return app


app = create_app()
