"""Command-line client of the pipeline service.

The CLI never runs pipeline code itself: every command is an HTTP request.
By default the requests run against an in-process instance of the service
(real request/response flow over an ASGI transport, no sockets); pass
``--server URL`` to drive a remote instance started with ``madseg serve``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error,
1 anything else.

The ``MADSEG_CONFIG`` environment variable supplies the default ``--config``
path.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys

import httpx

from . import __version__
from .errors import exit_code_for

CONFIG_ENV_VAR = "MADSEG_CONFIG"


def _post(server: str | None, path: str, payload: dict) -> tuple[int, dict]:
    """POST a JSON payload in-process or to a remote server."""
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            resp = client.post(path, json=payload)
            return resp.status_code, resp.json()

    from .service.app import create_app

    async def call() -> tuple[int, dict]:
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(
            transport=transport, base_url="http://madseg.local", timeout=None
        ) as client:
            resp = await client.post(path, json=payload)
            return resp.status_code, resp.json()

    return asyncio.run(call())


def _dispatch(server: str | None, path: str, payload: dict) -> dict:
    """POST and either return the response body or exit with a mapped code."""
    try:
        status, body = _post(server, path, payload)
    except httpx.HTTPError as exc:
        print(f"error (transport): {exc}", file=sys.stderr)
        raise SystemExit(1) from exc
    if status == 200:
        return body
    if status == 422:  # request-model validation
        print(f"error (config): {json.dumps(body)}", file=sys.stderr)
        raise SystemExit(exit_code_for("config"))
    category = body.get("category", "internal")
    message = body.get("message", json.dumps(body))
    print(f"error ({category}): {message}", file=sys.stderr)
    raise SystemExit(exit_code_for(category))


def _require_config(args: argparse.Namespace) -> str:
    config = args.config or os.environ.get(CONFIG_ENV_VAR)
    if not config:
        print(
            f"error (config): no --config given and {CONFIG_ENV_VAR} is unset",
            file=sys.stderr,
        )
        raise SystemExit(exit_code_for("config"))
    return config


# --------------------------------------------------------------------------
# Command handlers
# --------------------------------------------------------------------------
def cmd_simulate(args: argparse.Namespace) -> int:
    body = _dispatch(
        args.server,
        "/simulate",
        {
            "config": _require_config(args),
            "out_dir": args.out,
            "count": args.count,
            "seed": args.seed,
        },
    )
    print(
        f"wrote {body['pairs']} simulated pairs to {body['out_dir']} "
        f"(manifest: {body['manifest']})"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    body = _dispatch(
        args.server,
        "/train",
        {
            "config": _require_config(args),
            "out": args.out,
            "log": args.log,
            "labeler_csv": args.labeler_csv,
            "seed": args.seed,
            "refresh_every": args.refresh_every,
            "ablate": args.ablate,
            "quiet": args.quiet,
        },
    )
    early = " (stopped early)" if body["stopped_early"] else ""
    print(f"checkpoint: {body['checkpoint']}")
    print(f"training log: {body['log']}")
    print(f"steps run: {body['steps_run']}{early}")
    print(f"final total loss: {body['final']['total']:.6f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    body = _dispatch(
        args.server,
        "/eval",
        {
            "checkpoint": args.checkpoint,
            "config": args.config or os.environ.get(CONFIG_ENV_VAR),
            "out_dir": args.out,
            "heatmaps": True if args.heatmaps else None,
            "pixel_metrics": True if args.pixel_metrics else None,
        },
    )
    print(
        f"AUROC {body['auroc']:.4f} on {body['category']} "
        f"({body['n_normal']} normal / {body['n_anomalous']} anomalous)"
    )
    if body.get("pixel_auroc") is not None:
        print(f"pixel AUROC {body['pixel_auroc']:.4f}")
    print(f"scores: {body['scores_csv']}")
    if body.get("heatmap_dir"):
        print(f"heatmaps: {body['n_heatmaps']} files in {body['heatmap_dir']}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    body = _dispatch(
        args.server,
        "/ablate",
        {
            "config": _require_config(args),
            "which": args.which,
            "out_dir": args.out,
            "seed": args.seed,
            "quiet": args.quiet,
        },
    )
    print(body["table"])
    print(f"rows: {body['csv']}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    body = _dispatch(
        args.server,
        "/score",
        {
            "checkpoint": args.checkpoint,
            "image_path": args.image,
            "heatmap_out": args.heatmap_out,
        },
    )
    print(f"image score: {body['image_score']:.6f}")
    print(f"latent score: {body['latent_score']:.6f}")
    if body.get("heatmap_out"):
        print(f"heatmap: {body['heatmap_out']}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    body = _dispatch(
        args.server,
        "/synth",
        {
            "out_dir": args.out,
            "category": args.category,
            "size": args.size,
            "n_train": args.n_train,
            "n_test_normal": args.n_test_normal,
            "n_test_anomalous": args.n_test_anomalous,
            "seed": args.seed if args.seed is not None else 0,
        },
    )
    print(f"corpus: {body['category_dir']}")
    print(f"textures: {body['texture_dir']}")
    return 0


def cmd_init_config(args: argparse.Namespace) -> int:
    from .config import default_config_text

    text = default_config_text()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote default config to {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="madseg",
        description="Memory-augmented surface-defect segmentation pipeline.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "--server",
        default=None,
        help="base URL of a running service (default: run in-process)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic anomaly pairs")
    p.add_argument("--config", help=f"run config path (or ${CONFIG_ENV_VAR})")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=8, help="number of pairs")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help=f"run config path (or ${CONFIG_ENV_VAR})")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--log", default=None, help="training-log CSV path")
    p.add_argument(
        "--labeler-csv",
        default=None,
        help="write per-refresh committee scores and labels as CSV",
    )
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument(
        "--refresh-every",
        type=int,
        default=None,
        help="override the committee refresh period",
    )
    p.add_argument(
        "--ablate",
        choices=["baseline", "no_msff", "no_attention", "with_ca"],
        default=None,
        help="train an architecture variant",
    )
    p.add_argument("--quiet", action="store_true", help="no per-step progress")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--config",
        default=None,
        help="config for dataset paths (default: the checkpoint's snapshot)",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--heatmaps", action="store_true", help="export per-image heatmaps"
    )
    p.add_argument(
        "--pixel-metrics", action="store_true", help="also compute pixel AUROC"
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train + evaluate architecture variants")
    p.add_argument("--config", help=f"run config path (or ${CONFIG_ENV_VAR})")
    p.add_argument(
        "--which",
        default="all",
        help="baseline|no_msff|no_attention|with_ca|all",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument(
        "--verbose", dest="quiet", action="store_false", help="per-step progress"
    )
    p.set_defaults(func=cmd_ablate, quiet=True)

    p = sub.add_parser("score", help="score one image with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="image file to score")
    p.add_argument(
        "--heatmap-out", default=None, help="write the heatmap PNG here"
    )
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("synth", help="write the procedural demo corpus")
    p.add_argument("--out", required=True, help="corpus root directory")
    p.add_argument("--category", default="stripes")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test-normal", type=int, default=50)
    p.add_argument("--n-test-anomalous", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init-config", help="emit a fully commented default config")
    p.add_argument("--out", default=None, help="write here instead of stdout")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
