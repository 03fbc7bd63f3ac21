"""Command-line client for the mopac service.

By default the CLI drives an in-process copy of the HTTP app, so no server
is needed.  Point it at a running server with ``--server URL`` or the
``MOPAC_SERVER`` environment variable.

Exit codes: 0 on success, 2 for bad input (config, scenario file, checkpoint),
1 for failures during a run.  Failures print one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import httpx

from .bounds import CSV_COLUMNS, write_report_csv
from .config import ExperimentConfig
from .errors import ConfigurationError, MopacError

SERVER_ENV = "MOPAC_SERVER"
INPUT_ERRORS = {"configuration_error", "contract_violation", "scenario_size", "invalid_request", "not_found", "usage_error"}


class _Parser(argparse.ArgumentParser):
    """Reports usage mistakes as a JSON error record like every other failure."""

    def error(self, message):
        print(json.dumps({"error": {"type": "usage_error", "message": f"{self.prog}: {message}"}}), file=sys.stderr)
        sys.exit(2)


class ClientError(Exception):
    def __init__(self, record: dict, status: int | None = None):
        super().__init__(record["error"]["message"])
        self.record = record
        self.status = status


def _client(server: str | None):
    server = server or os.environ.get(SERVER_ENV)
    if server:
        return httpx.Client(base_url=server, timeout=None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def _call(client, method: str, url: str, body: dict | None = None) -> dict:
    try:
        resp = client.request(method, url, json=body)
    except httpx.HTTPError as exc:
        raise ClientError({"error": {"type": "connection_error", "message": str(exc)}}) from exc
    try:
        data = resp.json()
    except ValueError:
        data = None
    if resp.status_code >= 400:
        if not (isinstance(data, dict) and "error" in data):
            data = {"error": {"type": "http_error", "message": f"HTTP {resp.status_code}: {resp.text[:200]}"}}
        raise ClientError(data, resp.status_code)
    return data


def cmd_train(args, client) -> dict:
    cfg = ExperimentConfig.load(args.config)
    body = {"config": cfg.model_dump(mode="json"), "seed": args.seed, "output_dir": args.out, "wait": True}
    status = _call(client, "POST", "/runs", body)
    if status["status"] == "failed":
        raise ClientError({"error": status["error"]})
    return status


def cmd_evaluate(args, client) -> dict:
    body = {"checkpoint": str(Path(args.checkpoint).resolve()), "episodes": args.episodes, "seed": args.seed}
    if args.env:
        body["env_id"] = args.env
    return _call(client, "POST", "/evaluate", body)


def cmd_bounds_sweep(args, client) -> dict:
    try:
        spec = json.loads(Path(args.scenarios).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read {args.scenarios}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{args.scenarios} is not valid JSON: {exc}") from exc
    if isinstance(spec, list):
        spec = {"scenarios": spec}
    if not isinstance(spec, dict):
        raise ConfigurationError("scenario file must hold a list or an object")
    result = _call(client, "POST", "/bounds/sweep", spec)
    write_report_csv(result["rows"], args.out)
    return {"out": str(args.out), "satisfied": result["satisfied"], "total": result["total"], "columns": CSV_COLUMNS}


def cmd_serve(args, client=None) -> dict:
    import uvicorn

    uvicorn.run("mopac.service.app:app", host=args.host, port=args.port, log_level="info")
    return {"status": "stopped"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mopac", description=__doc__.splitlines()[0])
    p.add_argument("--server", help=f"service URL (default: in-process, or ${SERVER_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run one experiment to completion")
    t.add_argument("--config", required=True, help="YAML experiment config (may name a preset)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", help="output directory (else $MOPAC_OUTPUT_DIR, else the config's)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="roll out a checkpoint's deterministic policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=5)
    e.add_argument("--env", help="environment id (defaults to the one the checkpoint was trained on)")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bounds", help="exact tabular bound checks")
    bsub = b.add_subparsers(dest="bounds_command", required=True, parser_class=_Parser)
    s = bsub.add_parser("sweep", help="check the MPC suboptimality bound on a scenario file")
    s.add_argument("--scenarios", required=True, help="JSON list of scenarios or {\"generate\": {...}}")
    s.add_argument("--out", required=True, help="CSV report path")
    s.set_defaults(func=cmd_bounds_sweep)

    v = sub.add_parser("serve", help="run the HTTP service")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.set_defaults(func=cmd_serve)
    return p


def _fail(record: dict) -> int:
    print(json.dumps(record), file=sys.stderr)
    return 2 if record["error"]["type"] in INPUT_ERRORS else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "serve":
            cmd_serve(args)
            return 0
        with _client(args.server) as client:
            out = args.func(args, client)
    except ClientError as exc:
        return _fail(exc.record)
    except MopacError as exc:
        return _fail({"error": {"type": exc.code, "message": str(exc)}})
    print(json.dumps(out, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
