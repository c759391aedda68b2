"""Command-line front end.

Local subcommands (gen-data, train, active, eval) execute in this process
so a run is a single OS process end to end; `serve` hosts the HTTP
service and the `remote` group is a thin client for it.

Exit codes: 0 success, 2 config validation, 3 IO (missing/corrupt files),
4 numeric or protocol failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from pydantic import ValidationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bayesfed",
        description="Bayesian federated learning simulator: posterior-sampling "
        "clients, distillation-based aggregation, active learning, calibration/OOD evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p, threads=True):
        p.add_argument("--config", required=True, help="YAML/JSON experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if threads:
            p.add_argument("--threads", type=int, default=1, help="client-update worker threads")

    p = sub.add_parser("gen-data", help="materialize dataset + partition files")
    add_run_flags(p, threads=False)

    p = sub.add_parser("train", help="run federated training")
    add_run_flags(p)

    p = sub.add_parser("active", help="run the active-learning loop")
    add_run_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint (calibration + OOD)")
    add_run_flags(p, threads=False)
    p.add_argument("--checkpoint", required=True, help="model checkpoint JSON")

    p = sub.add_parser("serve", help="host the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--run-root", default="runs", help="directory for service-managed run dirs")

    p = sub.add_parser("remote", help="talk to a running service")
    rsub = p.add_subparsers(dest="remote_command", required=True)
    for name in ("submit-train", "submit-active"):
        rp = rsub.add_parser(name, help=f"{name.split('-')[1]} run on the service")
        rp.add_argument("--server", required=True, help="service base URL")
        rp.add_argument("--config", required=True)
        rp.add_argument("--seed", type=int, default=None)
        rp.add_argument("--threads", type=int, default=1)
    rp = rsub.add_parser("status", help="one run's state")
    rp.add_argument("--server", required=True)
    rp.add_argument("--run", required=True)
    rp = rsub.add_parser("records", help="one run's round records")
    rp.add_argument("--server", required=True)
    rp.add_argument("--run", required=True)
    rp = rsub.add_parser("metrics", help="one run's final metrics")
    rp.add_argument("--server", required=True)
    rp.add_argument("--run", required=True)
    rp = rsub.add_parser("list", help="all runs on the service")
    rp.add_argument("--server", required=True)
    return parser


def _load(args):
    from .config import ExperimentConfig, load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(), "seed": args.seed})
    return cfg


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2))


def _run_local(args) -> int:
    from . import experiment

    cfg = _load(args)
    if args.command == "gen-data":
        _emit(experiment.gen_data(cfg, args.out))
    elif args.command == "train":
        _emit(experiment.run_train(cfg, args.out, threads=args.threads))
    elif args.command == "active":
        _emit(experiment.run_active(cfg, args.out, threads=args.threads))
    elif args.command == "eval":
        _emit(experiment.run_eval(cfg, args.checkpoint, args.out))
    return EXIT_OK


def _run_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(args.run_root), host=args.host, port=args.port)
    return EXIT_OK


def _run_remote(args) -> int:
    import httpx

    base = args.server.rstrip("/")
    try:
        with httpx.Client(base_url=base, timeout=30.0) as client:
            if args.remote_command in ("submit-train", "submit-active"):
                cfg = _load(args)
                kind = args.remote_command.split("-")[1]
                resp = client.post(
                    f"/runs/{kind}", json={"config": cfg.resolved(), "threads": args.threads}
                )
            elif args.remote_command == "status":
                resp = client.get(f"/runs/{args.run}")
            elif args.remote_command == "records":
                resp = client.get(f"/runs/{args.run}/records")
            elif args.remote_command == "metrics":
                resp = client.get(f"/runs/{args.run}/metrics")
            else:
                resp = client.get("/runs")
    except httpx.HTTPError as exc:
        print(f"error: cannot reach {base}: {exc}", file=sys.stderr)
        return EXIT_IO
    body = resp.json() if resp.content else None
    if resp.status_code >= 400:
        print(f"error: service returned {resp.status_code}: {body}", file=sys.stderr)
        if resp.status_code == 422:
            return EXIT_CONFIG
        if resp.status_code == 404:
            return EXIT_IO
        return 1
    _emit(body)
    return EXIT_OK


def main(argv=None) -> int:
    from .autodiff import NumericError
    from .data import FormatError
    from .federation import ProtocolError
    from .models import CheckpointError

    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            return _run_serve(args)
        if args.command == "remote":
            return _run_remote(args)
        return _run_local(args)
    except ValidationError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
