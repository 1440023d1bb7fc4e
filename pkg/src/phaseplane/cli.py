"""Command line front-end.

Runs the stages in-process, or against a running service with ``--server URL``;
both paths go through the same handlers and write identical files.

Exit codes: 0 all invariant checks passed, 1 some check failed, 2 invalid
configuration, 3 a stage failed.
"""

from __future__ import annotations

import os
import sys

# cap library thread pools before numpy and numba are imported
_threads = os.environ.get("PHASEPLANE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import base64  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

from .errors import ConfigInvalid, PhaseplaneError, StageFailed  # noqa: E402
from .sweeps import parse_values  # noqa: E402

log = logging.getLogger("phaseplane")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3


def _read_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _b64(path) -> str:
    return base64.b64encode(Path(path).read_bytes()).decode()


def build_request(args) -> tuple:
    """``(endpoint, payload)`` for the chosen command."""
    base = {"config": _read_config(getattr(args, "config", None)), "seed": args.seed,
            "strict_paper_gaps": args.strict_paper_gaps}
    cmd = args.command
    if cmd == "whitney":
        return "whitney", base
    if cmd == "tiles":
        return "tiles/build", base
    if cmd == "form":
        return "form/eval", dict(base, kind=args.kind)
    if cmd == "sweep":
        cfg = base["config"]
        values = parse_values(args.grid) if args.grid else cfg.get("sweep", {}).get("values")
        if values is None:
            values = [2.0**k for k in range(11)]
        return "sweep", dict(base, param=args.param, values=values)
    if cmd == "report":
        return "report", base
    if cmd == "packets":
        with open(args.spec) as fh:
            spec = json.load(fh)
        return "packets/verify", {"spec": spec, "field": _b64(args.field)}
    if cmd == "select":
        with open(args.tiles) as fh:
            tiles = json.load(fh)
        return "select", {"tiles": tiles, "fields": [_b64(p) for p in args.fields]}
    raise SystemExit(f"unknown command {cmd!r}")


def run_local(endpoint: str, payload: dict):
    from .service import HANDLERS

    model, handler = HANDLERS[endpoint]
    try:
        return handler(model.model_validate(payload))
    except (ConfigInvalid, StageFailed):
        raise
    except (PhaseplaneError, ValueError, ArithmeticError) as err:
        raise StageFailed(endpoint.split("/")[0], f"{type(err).__name__}: {err}") from err


def run_remote(server: str, endpoint: str, payload: dict):
    import httpx

    from .service import from_response

    with httpx.Client(base_url=server.rstrip("/"), timeout=None) as client:
        r = client.post(f"/{endpoint}", json=payload)
    if r.status_code == 422:
        detail = r.json().get("detail")
        if isinstance(detail, dict) and detail.get("error") == "ConfigInvalid":
            raise ConfigInvalid(detail["message"])
        raise ConfigInvalid(json.dumps(detail))
    if r.status_code >= 400:
        detail = r.json().get("detail", {})
        raise StageFailed(detail.get("stage", endpoint), detail.get("message", r.text))
    return from_response(r.json())


def _write(path, data) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)


def destinations(args, artifacts: dict) -> dict:
    """Where each artifact goes for the chosen command."""
    cmd = args.command
    out = Path(args.out) if getattr(args, "out", None) else None
    if cmd == "report":
        root = out or Path("phaseplane-run")
        return {name: root / name for name in artifacts}
    primary = {"whitney": "family.json", "tiles": "tiles.json", "select": "decomposition.json",
               "form": "result.json", "sweep": "sweep.csv", "packets": "packets.json"}[cmd]
    dest = {}
    for name in artifacts:
        if name == primary:
            dest[name] = out
        elif name == "audit.log":
            dest[name] = Path(args.audit) if args.audit else (out.with_name("audit.log") if out else None)
        elif name.endswith("_stats.csv"):
            dest[name] = out.with_name(out.stem + "_stats.csv") if out else None
        elif out is not None:
            dest[name] = out.with_name(name)
        else:
            dest[name] = None
    return dest


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (u64), overrides the config")
    common.add_argument("--strict-paper-gaps", action="store_true", help="enforce k_i - k_j > 100d")
    common.add_argument("--server", default=os.environ.get("PHASEPLANE_SERVER"), help="service URL")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="phaseplane", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("whitney", parents=[common], help="build a Whitney family")
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    s = sub.add_parser("packets", parents=[common], help="cut-off class checks")
    s.add_argument("action", choices=["verify"])
    s.add_argument("--spec", required=True)
    s.add_argument("--field", required=True)
    s.add_argument("--out")

    s = sub.add_parser("tiles", parents=[common], help="multitiles and matched test fields")
    s.add_argument("action", choices=["build"])
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    s = sub.add_parser("select", parents=[common], help="level decomposition of a tile set")
    s.add_argument("--tiles", required=True)
    s.add_argument("--fields", nargs=3, required=True, metavar=("F1", "F2", "F3"))
    s.add_argument("--out", required=True)
    s.add_argument("--audit")

    s = sub.add_parser("form", parents=[common], help="evaluate a trilinear form")
    s.add_argument("action", choices=["eval"])
    s.add_argument("--kind", required=True, choices=["tensor", "full", "direct", "bht", "beurling"])
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    s = sub.add_parser("sweep", parents=[common], help="parameter sweep as CSV")
    s.add_argument("--param", required=True, choices=["lambda", "theta", "M"])
    s.add_argument("--grid", help="values, e.g. 2^0..2^10 or 0,pi/8,pi/4")
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    s = sub.add_parser("report", parents=[common], help="run the configured pipeline")
    s.add_argument("--config")
    s.add_argument("--out", help="output directory")
    s.add_argument("--timing", action="store_true", help="also write timing.json (not reproducible)")

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("-v", "--verbose", action="store_true")
    return p


def serve(host: str, port: int) -> int:
    import uvicorn

    uvicorn.run("phaseplane.service:app", host=host, port=port, log_level="info")
    return EXIT_OK


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "serve":
        return serve(args.host, args.port)
    if args.command == "sweep" and args.param == "M" and args.grid:
        print("error: M sweeps take their directions from the config", file=sys.stderr)
        return EXIT_CONFIG
    try:
        endpoint, payload = build_request(args)
        if args.server:
            out = run_remote(args.server, endpoint, payload)
        else:
            import time

            t0 = time.perf_counter()
            out = run_local(endpoint, payload)
            if args.command == "report" and args.timing:
                out.artifacts["timing.json"] = json.dumps({"seconds": time.perf_counter() - t0}) + "\n"
    except ConfigInvalid as err:
        print(f"config invalid: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailed as err:
        print(str(err), file=sys.stderr)
        return EXIT_STAGE
    for name, path in sorted(destinations(args, out.artifacts).items()):
        if path is None:
            sys.stdout.write(out.artifacts[name] if isinstance(out.artifacts[name], str) else "")
            continue
        _write(path, out.artifacts[name])
        log.info("wrote %s", path)
    failed = [k for k, v in out.checks.items() if not v]
    for k in failed:
        print(f"check failed: {k}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
