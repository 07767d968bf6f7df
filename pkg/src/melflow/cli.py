"""Command-line surface. Every subcommand runs in-process by default; pass
--server URL to send the same request to a running service instead. Errors
exit nonzero with one machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile

from . import __version__, container, evalsuite, pipeline
from .config import ConfigError, RunConfig, apply_string_overrides


def _parse_sets(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set needs key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = _parse_sets(getattr(args, "set", None))
    return apply_string_overrides(cfg, overrides) if overrides else cfg


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (key = value lines)")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key, repeatable (e.g. --set train.steps=100)",
    )


def _client_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--server", help="base URL of a running service; POST instead of running here")


def _inference_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="sampler seed (default from config)")
    p.add_argument("--steps", type=int, default=None, help="ODE steps (default from config)")
    p.add_argument("--guidance-scale", type=float, default=None)


def _lyrics_from(args) -> str:
    if getattr(args, "lyrics_file", None):
        with open(args.lyrics_file, encoding="utf-8") as fh:
            return fh.read()
    return args.lyrics


def _emit(result: dict) -> None:
    print(json.dumps(result, sort_keys=True))


def _post(server: str, endpoint: str, body: dict) -> dict:
    import httpx

    url = server.rstrip("/") + endpoint
    resp = httpx.post(url, json=body, timeout=None)
    payload = resp.json()
    if resp.status_code != 200:
        raise RuntimeError(f"{endpoint} failed: {payload.get('error', resp.text)}")
    return payload


def _config_body(args) -> dict:
    return {"config_path": args.config, "overrides": _parse_sets(getattr(args, "set", None))}


def _inference_body(args) -> dict:
    return {"seed": args.seed, "steps": args.steps, "guidance_scale": args.guidance_scale}


def cmd_gen_data(args) -> int:
    if args.server:
        _emit(_post(args.server, "/gen-data", {**_config_body(args), "out_dir": args.out_dir}))
        return 0
    _emit(pipeline.run_gen_data(_load_config(args), args.out_dir))
    return 0


def cmd_train_dcae(args) -> int:
    if args.server:
        body = {**_config_body(args), "data_dir": args.data_dir, "out": args.out}
        _emit(_post(args.server, "/train-dcae", body))
        return 0
    log = _step_logger() if args.verbose else None
    _emit(pipeline.run_train_dcae(_load_config(args), args.data_dir, args.out, log=log))
    return 0


def _step_logger():
    def log(metrics: dict) -> None:
        step = metrics.get("step")
        if step is not None and step % 100 == 0:
            keep = {k: v for k, v in metrics.items() if isinstance(v, (int, float))}
            print(json.dumps(keep, sort_keys=True), file=sys.stderr)

    return log


def cmd_train(args) -> int:
    if args.server:
        body = {
            **_config_body(args),
            "data_dir": args.data_dir,
            "dcae_ckpt": args.dcae_ckpt,
            "out": args.out,
            "resume": args.resume,
        }
        _emit(_post(args.server, "/train", body))
        return 0
    on_metrics = _step_logger() if args.verbose else None
    _emit(
        pipeline.run_train(
            _load_config(args),
            args.data_dir,
            args.dcae_ckpt,
            args.out,
            resume=args.resume,
            on_metrics=on_metrics,
        )
    )
    return 0


def cmd_sample(args) -> int:
    lyrics = _lyrics_from(args)
    if args.server:
        body = {
            "ckpt": args.ckpt,
            "tags": args.tags,
            "lyrics": lyrics,
            "duration_s": args.duration,
            "out": args.out,
            **_inference_body(args),
        }
        _emit(_post(args.server, "/sample", body))
        return 0
    _emit(
        pipeline.run_sample(
            args.ckpt,
            tags=args.tags,
            lyrics=lyrics,
            duration_s=args.duration,
            out=args.out,
            seed=args.seed,
            steps=args.steps,
            guidance_scale=args.guidance_scale,
        )
    )
    return 0


def cmd_repaint(args) -> int:
    lyrics = _lyrics_from(args)
    if args.server:
        body = {
            "ckpt": args.ckpt,
            "in_mel": args.in_mel,
            "mask_spec": args.mask,
            "tags": args.tags,
            "lyrics": lyrics,
            "out": args.out,
            **_inference_body(args),
        }
        _emit(_post(args.server, "/repaint", body))
        return 0
    _emit(
        pipeline.run_repaint(
            args.ckpt,
            in_mel=args.in_mel,
            mask_spec=args.mask,
            tags=args.tags,
            lyrics=lyrics,
            out=args.out,
            seed=args.seed,
            steps=args.steps,
            guidance_scale=args.guidance_scale,
        )
    )
    return 0


def cmd_variate(args) -> int:
    lyrics = _lyrics_from(args)
    if args.server:
        body = {
            "ckpt": args.ckpt,
            "in_mel_or_seed": args.in_mel_or_seed,
            "ratio": args.ratio,
            "tags": args.tags,
            "lyrics": lyrics,
            "out": args.out,
            "duration_s": args.duration,
            "variation_seed": args.variation_seed,
            **_inference_body(args),
        }
        _emit(_post(args.server, "/variate", body))
        return 0
    _emit(
        pipeline.run_variate(
            args.ckpt,
            in_mel_or_seed=args.in_mel_or_seed,
            ratio=args.ratio,
            tags=args.tags,
            lyrics=lyrics,
            out=args.out,
            duration_s=args.duration,
            seed=args.seed,
            variation_seed=args.variation_seed,
            steps=args.steps,
            guidance_scale=args.guidance_scale,
        )
    )
    return 0


def cmd_edit(args) -> int:
    if args.server:
        body = {
            "ckpt": args.ckpt,
            "in_mel": args.in_mel,
            "tags": args.tags,
            "lyrics_src": args.lyrics_src,
            "lyrics_tgt": args.lyrics_tgt,
            "out": args.out,
            **_inference_body(args),
        }
        _emit(_post(args.server, "/edit", body))
        return 0
    _emit(
        pipeline.run_edit(
            args.ckpt,
            in_mel=args.in_mel,
            tags=args.tags,
            lyrics_src=args.lyrics_src,
            lyrics_tgt=args.lyrics_tgt,
            out=args.out,
            seed=args.seed,
            steps=args.steps,
            guidance_scale=args.guidance_scale,
        )
    )
    return 0


def cmd_inspect_ckpt(args) -> int:
    if args.server:
        report = _post(args.server, "/inspect", {"path": args.path})
    else:
        report = container.inspect(args.path)
    name_w = max((len(r["name"]) for r in report["tensors"]), default=4)
    for row in report["tensors"]:
        shape = "x".join(str(d) for d in row["shape"]) or "scalar"
        print(f"{row['name']:<{name_w}}  {shape:>12}  {row['numel']:>10}")
    print(
        f"tensors={report['tensor_count']} total_values={report['total_values']} "
        f"format_version={report['format_version']} crc_ok={report['crc_ok']}"
    )
    return 0


def cmd_eval(args) -> int:
    if args.server:
        payload = _post(args.server, "/eval", {"suite": args.suite, "ckpt": args.ckpt})
        for r in payload["results"]:
            status = "PASS" if r["passed"] else "FAIL"
            parts = ", ".join(f"{k}={v}" for k, v in r["details"].items())
            print(f"[{status}] {r['name']}: {parts}")
        return 0 if payload["all_passed"] else 1

    results = []
    if args.suite == "light":
        names = list(evalsuite.LIGHT_SUITES)
    elif args.suite == "all":
        names = list(evalsuite.LIGHT_SUITES) + ["overfit", "repro"]
    else:
        names = [args.suite]
    for name in names:
        if name in evalsuite.LIGHT_SUITES:
            if name == "control" and args.ckpt:
                state = pipeline.load_inference_state(args.ckpt)
                results.extend(evalsuite.suite_control(state))
            else:
                results.extend(evalsuite.LIGHT_SUITES[name]())
        elif name == "overfit":
            from .synth import build_corpus

            cfg = _load_config(args)
            songs = build_corpus(cfg.data, cfg.dcae)
            results.extend(evalsuite.suite_overfit(cfg, songs))
        elif name == "repro":
            cfg = _load_config(args)
            workdir = args.workdir or tempfile.mkdtemp(prefix="repro-")
            results.extend(evalsuite.suite_repro(cfg, workdir))
        else:
            raise ConfigError(
                f"unknown suite {name!r}; choose from "
                f"{sorted(evalsuite.LIGHT_SUITES) + ['overfit', 'repro', 'light', 'all']}"
            )
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="melflow",
        description="Train and drive the mel-latent flow-matching music model.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic song corpus")
    p.add_argument("out_dir")
    _config_args(p)
    _client_args(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-dcae", help="train the mel compression stage")
    p.add_argument("data_dir")
    p.add_argument("out", help="output checkpoint path")
    p.add_argument("--verbose", action="store_true", help="log metrics every 100 steps")
    _config_args(p)
    _client_args(p)
    p.set_defaults(fn=cmd_train_dcae)

    p = sub.add_parser("train", help="train the denoiser")
    p.add_argument("data_dir")
    p.add_argument("dcae_ckpt")
    p.add_argument("out", help="output checkpoint path")
    p.add_argument("--resume", help="checkpoint to resume from (trajectory-exact)")
    p.add_argument("--verbose", action="store_true", help="log metrics every 100 steps")
    _config_args(p)
    _client_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate a mel file from text conditions")
    p.add_argument("ckpt")
    p.add_argument("out")
    p.add_argument("--tags", required=True, help='style text, e.g. "piano, calm"')
    p.add_argument("--lyrics", default="", help="lyric text; empty means instrumental")
    p.add_argument("--lyrics-file", help="read lyrics from a file instead")
    p.add_argument("--duration", type=float, required=True, help="output length in seconds")
    _inference_args(p)
    _client_args(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("repaint", help="regenerate a time span of an existing mel")
    p.add_argument("ckpt")
    p.add_argument("in_mel")
    p.add_argument("out")
    p.add_argument("--mask", required=True, metavar="START..END", help='seconds, e.g. "1.0..2.5"')
    p.add_argument("--tags", required=True)
    p.add_argument("--lyrics", default="")
    p.add_argument("--lyrics-file")
    _inference_args(p)
    _client_args(p)
    p.set_defaults(fn=cmd_repaint)

    p = sub.add_parser("variate", help="noise-mix variation of a prior generation")
    p.add_argument("ckpt")
    p.add_argument("in_mel_or_seed", help="mel file from a prior sample run, or its seed")
    p.add_argument("out")
    p.add_argument("--ratio", type=float, required=True, help="0 reproduces, 1 is independent")
    p.add_argument("--tags", required=True)
    p.add_argument("--lyrics", default="")
    p.add_argument("--lyrics-file")
    p.add_argument("--duration", type=float, help="required when variating from a seed")
    p.add_argument("--variation-seed", type=int, default=1)
    _inference_args(p)
    _client_args(p)
    p.set_defaults(fn=cmd_variate)

    p = sub.add_parser("edit", help="flow-edit an existing mel to new lyrics")
    p.add_argument("ckpt")
    p.add_argument("in_mel")
    p.add_argument("out")
    p.add_argument("--tags", required=True)
    p.add_argument("--lyrics-src", required=True)
    p.add_argument("--lyrics-tgt", required=True)
    _inference_args(p)
    _client_args(p)
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("inspect-ckpt", help="print a container's tensor table")
    p.add_argument("path")
    _client_args(p)
    p.set_defaults(fn=cmd_inspect_ckpt)

    p = sub.add_parser("eval", help="run acceptance suites and print pass/fail")
    p.add_argument(
        "--suite",
        default="light",
        help="geometry | fm-identity | gradcheck | control | stats | attention | "
        "overfit | repro | light (all fast suites) | all",
    )
    p.add_argument("--ckpt", help="checkpoint for the control suite (optional)")
    p.add_argument("--workdir", help="scratch dir for the repro suite")
    _config_args(p)
    _client_args(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # one machine-readable line, nonzero exit
        print(
            json.dumps({"error": str(exc), "kind": type(exc).__name__}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
