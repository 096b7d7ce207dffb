"""Command line harness: ``defect-fpp run | sample-dump | dist-query | eta-table``.

Exit codes:
    0  success
    2  invalid input (configuration, dump, table); the message names the field
    3  hard failure while running (pathwise violation, insufficient data, bug)
    4  run stopped early by its time budget; partial outputs written
    130  interrupted; partial outputs written
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import (SCHEMA, ConfigError, ExperimentConfig, MonotonicityViolation,
                         rows_to_csv, run_experiment)
from .limits import EtaTable, merge_tables
from .metric import distance_graph_xi, distance_intrinsic, geodesic_xi0
from .model import (Box, Domain, InsufficientData, IntensityField, InvalidParameter,
                    MarkedConfiguration, OutOfDomain, PointConfiguration, default_u_star)
from .sampler import (RngStream, dump_csv, load_csv, sample_homogeneous, sample_inhomogeneous,
                      sample_marked)

DEFAULT_SEED = 20240607
SEED_ENV = "DEFECT_FPP_SEED"

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILURE = 3
EXIT_BUDGET = 4
EXIT_INTERRUPTED = 130


class UsageError(Exception):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def resolve_seed(arg: int | None) -> int:
    """``--seed``, else ``$DEFECT_FPP_SEED``, else the fixed default."""
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env.strip(), 0)
        except ValueError:
            raise UsageError(SEED_ENV, f"not an integer: {env!r}") from None
    return DEFAULT_SEED


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Reporter:
    """stderr for people; stdout carries a single JSON document in ``--json`` mode."""

    def __init__(self, as_json: bool):
        self.as_json = as_json

    def info(self, msg: str):
        print(msg, file=sys.stderr)

    def result(self, doc: dict, text: str | None = None):
        if self.as_json:
            sys.stdout.write(_dumps(doc))
        elif text is not None:
            print(text)

    def error(self, code: int, kind: str, msg: str, field_name: str | None = None) -> int:
        print(f"error: {msg}", file=sys.stderr)
        if self.as_json:
            doc = {"schema": SCHEMA, "status": "error", "exit_code": code, "error": kind,
                   "message": msg}
            if field_name is not None:
                doc["field"] = field_name
            sys.stdout.write(_dumps(doc))
        return code


# ---------------------------------------------------------------------------
# run


def _output_names(cfg: ExperimentConfig) -> tuple[str, str]:
    csv_name = cfg.outputs.get("csv", f"{cfg.kind}.csv")
    json_name = cfg.outputs.get("summary", f"{cfg.kind}.json")
    for key, name in (("csv", csv_name), ("summary", json_name)):
        if not isinstance(name, str) or not name or "/" in name or name.startswith("."):
            raise ConfigError(f"outputs.{key}", "must be a plain file name")
    return csv_name, json_name


def cmd_run(args, rep: Reporter) -> int:
    path = Path(args.config)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        return rep.error(EXIT_INVALID, "config", f"cannot read {path}: {exc.strerror}", "config")
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        return rep.error(EXIT_INVALID, "config", f"config is not valid JSON: {exc}", "config")
    try:
        seed = resolve_seed(args.seed)
        cfg = ExperimentConfig.from_json(doc)
        if args.replicas is not None:
            if args.replicas < 1:
                raise ConfigError("replicas", "must be a positive integer")
            cfg.replicas = args.replicas
        csv_name, json_name = _output_names(cfg)
    except (ConfigError, UsageError) as exc:
        return rep.error(EXIT_INVALID, "config", str(exc), exc.field)
    if args.jobs < 1:
        return rep.error(EXIT_INVALID, "usage", "--jobs must be at least 1", "jobs")

    out = Path(args.out_dir)
    csv_path, json_path = out / csv_name, out / json_name
    manifest = {"schema": SCHEMA, "tool": "defect-fpp", "version": __version__,
                "config": str(path), "config_sha256": hashlib.sha256(raw).hexdigest(),
                "kind": cfg.kind, "seed": seed, "jobs": args.jobs, "started": _now()}
    done: dict[int, dict] = {}

    def on_row(k, row):
        done[k] = row
        if not rep.as_json and args.verbose:
            rep.info(f"replica {k} done")

    def write_partial(status: str, message: str):
        prefix = []
        k = 0
        while k in done:
            prefix.append(dict(replica=k, **{c: v for c, v in done[k].items() if c != "replica"}))
            k += 1
        part = csv_path.with_name(csv_path.name + ".partial")
        atomic_write(part, rows_to_csv(prefix) if prefix else "replica\n")
        manifest.update(finished=_now(), status=status, message=message,
                        replicas_completed=len(prefix), outputs={"csv": str(part)})
        atomic_write(out / "manifest.json", _dumps(manifest))

    rep.info(f"running {cfg.kind} with seed {seed}, {cfg.replicas} replicas, {args.jobs} jobs")
    try:
        result = run_experiment(cfg, seed, jobs=args.jobs, on_row=on_row)
    except KeyboardInterrupt:
        write_partial("interrupted", "interrupted by user")
        return rep.error(EXIT_INTERRUPTED, "interrupted", "interrupted; partial CSV written")
    except ConfigError as exc:
        return rep.error(EXIT_INVALID, "config", str(exc), exc.field)
    except MonotonicityViolation as exc:
        write_partial("failed", str(exc))
        return rep.error(EXIT_FAILURE, "monotonicity_violation", str(exc))
    except InsufficientData as exc:
        return rep.error(EXIT_FAILURE, "insufficient_data", str(exc))
    except (InvalidParameter, OutOfDomain) as exc:
        return rep.error(EXIT_INVALID, "config", str(exc))
    except Exception as exc:  # noqa: BLE001 - reported as a structured hard failure
        return rep.error(EXIT_FAILURE, "internal", f"{type(exc).__name__}: {exc}")

    csv_text = rows_to_csv(result.rows) if result.rows else "replica\n"
    summary = result.to_json()
    if result.stopped is not None:
        csv_path = csv_path.with_name(csv_path.name + ".partial")
    atomic_write(csv_path, csv_text)
    atomic_write(json_path, _dumps(summary))
    status = "ok" if result.stopped is None else "stopped"
    manifest.update(finished=_now(), status=status, replicas_completed=result.completed,
                    outputs={"csv": str(csv_path), "summary": str(json_path)})
    if result.stopped is not None:
        manifest["message"] = result.stopped
    atomic_write(out / "manifest.json", _dumps(manifest))
    rep.result({"status": status, "manifest": str(out / "manifest.json"),
                "summary": summary}, text=f"wrote {csv_path} and {json_path}")
    if result.stopped is not None:
        rep.info(f"stopped early: {result.stopped}")
        return EXIT_BUDGET
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample-dump


def _parse_json_arg(text: str, name: str):
    try:
        if text.lstrip().startswith(("[", "{")):
            return json.loads(text)
        return json.loads(Path(text).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(name, f"cannot parse: {exc}") from None


def cmd_sample_dump(args, rep: Reporter) -> int:
    try:
        seed = resolve_seed(args.seed)
        region = Box.from_bounds(_parse_json_arg(args.region, "region"))
        if args.d is not None and region.d != args.d:
            raise UsageError("d", f"region has dimension {region.d}, not {args.d}")
        us = args.u_star if args.u_star is not None else default_u_star(region.d)
        rng = RngStream(seed, args.stream)
        if args.intensity is not None:
            fld = IntensityField.from_json(_parse_json_arg(args.intensity, "intensity"),
                                           u_star=us, allow_supercritical=args.allow_supercritical)
            cfg = sample_inhomogeneous(fld, region, rng, args.radius)
        elif args.marked:
            if args.u is None or args.u <= 0:
                raise UsageError("u", "--marked needs u > 0 (the mark range)")
            cfg = sample_marked(region, args.u, rng, args.radius)
        else:
            if args.u is None:
                raise UsageError("u", "give --u or --intensity")
            if args.u < 0 or not math.isfinite(args.u):
                raise UsageError("u", "must be a finite number >= 0")
            if args.u >= us and not args.allow_supercritical:
                raise UsageError("u", f"u = {args.u} is not below u* = {us}")
            cfg = sample_homogeneous(args.u, region, rng, args.radius)
    except UsageError as exc:
        return rep.error(EXIT_INVALID, "usage", str(exc), exc.field)
    except (InvalidParameter, OutOfDomain, ValueError, KeyError, TypeError) as exc:
        return rep.error(EXIT_INVALID, "usage", str(exc))
    text = dump_csv(cfg)
    if args.out is not None:
        atomic_write(Path(args.out), text)
        rep.info(f"wrote {len(cfg)} centers to {args.out}")
        rep.result({"status": "ok", "path": args.out, "count": len(cfg), "seed": seed})
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# dist-query


def _point(text: str, name: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.replace(" ", "").strip("()[]").split(",")]
    except ValueError:
        raise UsageError(name, f"expected comma-separated coordinates, got {text!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise UsageError(name, "coordinates must be finite")
    return np.array(vals)


def cmd_dist_query(args, rep: Reporter) -> int:
    try:
        try:
            cfg = load_csv(args.config, radius=args.radius)
        except OSError as exc:
            raise UsageError("config", f"cannot read {args.config}: {exc.strerror}") from None
        except InvalidParameter as exc:
            raise UsageError("config", str(exc)) from None
        if isinstance(cfg, MarkedConfiguration):
            cfg = PointConfiguration(cfg.centers, cfg.radius)
        x, y = _point(args.from_, "from"), _point(args.to, "to")
        if len(x) != cfg.d or len(y) != cfg.d:
            raise UsageError("from" if len(x) != cfg.d else "to",
                             f"needs {cfg.d} coordinates to match the dump")
        if not 0.0 <= args.xi < 1.0:
            raise UsageError("xi", "must lie in [0, 1)")
        if args.K < 4:
            raise UsageError("K", "must be at least 4")
        if args.restrict is not None:
            dom = Domain.from_json(_parse_json_arg(args.restrict, "restrict"))
            if dom.d != cfg.d:
                raise UsageError("restrict", "domain dimension does not match the dump")
            res = distance_intrinsic(cfg, None, dom, x, y, xi=args.xi, K=args.K)
        elif args.xi == 0.0:
            res = geodesic_xi0(cfg, None, x, y)
        else:
            res = distance_graph_xi(cfg, None, args.xi, x, y, args.K)
    except UsageError as exc:
        return rep.error(EXIT_INVALID, "usage", str(exc), exc.field)
    except (InvalidParameter, KeyError, TypeError) as exc:
        return rep.error(EXIT_INVALID, "usage", str(exc))
    doc = res.to_json()
    sys.stdout.write(_dumps(doc))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eta-table


def _load_table(path: str) -> EtaTable:
    try:
        return EtaTable.from_json(path)
    except OSError as exc:
        raise UsageError("table", f"cannot read {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, InvalidParameter, ValueError) as exc:
        raise UsageError("table", f"{path}: {exc}") from None


def cmd_eta_table(args, rep: Reporter) -> int:
    try:
        tables = [_load_table(p) for p in args.tables]
        if args.action == "validate":
            problems = {p: t.problems() for p, t in zip(args.tables, tables)}
            ok = not any(problems.values())
            for p, probs in problems.items():
                for msg in probs:
                    rep.info(f"{p}: {msg}")
            rep.result({"status": "ok" if ok else "invalid", "problems": problems},
                       text="valid" if ok else None)
            return EXIT_OK if ok else EXIT_INVALID
        merged = merge_tables(tables)
    except UsageError as exc:
        return rep.error(EXIT_INVALID, "usage", str(exc), exc.field)
    except InvalidParameter as exc:
        return rep.error(EXIT_INVALID, "table", str(exc), "table")
    text = _dumps(merged.to_json())
    if args.out is not None:
        atomic_write(Path(args.out), text)
        rep.result({"status": "ok", "path": args.out, "entries": int(len(merged.u))},
                   text=f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="defect-fpp", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog=__doc__.split("\n", 1)[1])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true",
                        help="machine-readable JSON on stdout, messages on stderr")

    r = sub.add_parser("run", parents=[common], help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--replicas", type=int, default=None, help="override the config's count")
    r.add_argument("--out-dir", default=".")
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sample-dump", parents=[common], help="dump one realization as CSV")
    s.add_argument("--region", required=True, help='box bounds, e.g. "[[0,10],[0,10]]"')
    s.add_argument("--u", type=float, default=None)
    s.add_argument("--intensity", default=None, help="intensity field JSON (text or path)")
    s.add_argument("--d", type=int, default=None)
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--marked", action="store_true", help="marks uniform on [0, u)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--stream", type=int, default=0)
    s.add_argument("--u-star", type=float, default=None)
    s.add_argument("--allow-supercritical", action="store_true")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_sample_dump)

    q = sub.add_parser("dist-query", aliases=["dist"], parents=[common],
                       help="distance between two points in a dumped configuration")
    q.add_argument("--config", required=True, help="CSV dump from sample-dump")
    q.add_argument("--from", dest="from_", required=True)
    q.add_argument("--to", required=True)
    q.add_argument("--xi", type=float, default=0.0)
    q.add_argument("--K", type=int, default=16)
    q.add_argument("--radius", type=float, default=1.0)
    q.add_argument("--restrict", default=None, help="domain JSON (text or path)")
    q.set_defaults(func=cmd_dist_query)

    e = sub.add_parser("eta-table", parents=[common], help="merge or validate eta tables")
    e.add_argument("action", choices=["merge", "validate"])
    e.add_argument("tables", nargs="+")
    e.add_argument("--out", "-o", default=None)
    e.set_defaults(func=cmd_eta_table)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    rep = Reporter(getattr(args, "json", False))
    try:
        return args.func(args, rep)
    except UsageError as exc:
        return rep.error(EXIT_INVALID, "usage", str(exc), exc.field)


if __name__ == "__main__":
    sys.exit(main())
