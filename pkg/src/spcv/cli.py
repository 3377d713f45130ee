"""``spcv`` command line entry point.

Failures print a single ``error=<kind> ...`` record on stderr. A missing path exits
with status 2 and any other failure with status 1.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as pl
from .fixtures import FIXTURE_KINDS
from .quality import DEFAULT_WINDOWS

EXIT_OK, EXIT_FAIL, EXIT_MISSING = 0, 1, 2


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _common(defaults: bool) -> argparse.ArgumentParser:
    # subcommand copies suppress defaults so flags given before the verb survive
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--config", help=f"YAML run config (falls back to ${pl.CONFIG_ENV})", **kw)
    c.add_argument("--seed", type=int, **(kw or {"default": None}))
    c.add_argument("--jobs", type=int, help="worker processes for per-file work", **(kw or {"default": None}))
    c.add_argument("--quiet", action="store_true", **kw)
    return c


def build_parser() -> argparse.ArgumentParser:
    common = _common(defaults=False)
    p = argparse.ArgumentParser(prog="spcv", parents=[_common(defaults=True)],
                                description="Structured point cloud video tools")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("structurize", parents=[common], help="fit an SPCV container to a frame sequence")
    s.add_argument("inputs", nargs="*", help="point cloud frames in time order")
    s.add_argument("-o", "--output")
    s.add_argument("--report")
    s.add_argument("--gt", nargs="+", default=None, help="index-aligned ground-truth frames")
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. frame.steps=100")

    e = sub.add_parser("evaluate", parents=[common], help="quality reports for a container")
    e.add_argument("spcv")
    e.add_argument("--originals", nargs="+", default=[])
    e.add_argument("--gt", nargs="+", default=[])
    e.add_argument("--windows", type=_ints, default=list(DEFAULT_WINDOWS))
    e.add_argument("--K", dest="ks", type=_ints, default=[8])
    e.add_argument("--denormalize", action="store_true")
    e.add_argument("-o", "--output", help="write the report here instead of stdout")

    i = sub.add_parser("interpolate", parents=[common], help="insert linearly interpolated frames")
    i.add_argument("spcv")
    i.add_argument("t1", type=int)
    i.add_argument("t2", type=int)
    i.add_argument("--count", type=int, default=1)
    i.add_argument("-o", "--output", required=True)

    x = sub.add_parser("export", parents=[common], help="quantized planar frames for video codecs")
    x.add_argument("spcv")
    x.add_argument("directory")
    x.add_argument("--bits", type=int, default=16)

    f = sub.add_parser("make-fixture", parents=[common], help="write a synthetic sequence")
    f.add_argument("kind", choices=FIXTURE_KINDS)
    f.add_argument("directory")
    f.add_argument("--frames", type=int, default=4)
    f.add_argument("-n", type=int, default=4096)
    f.add_argument("--step", type=float, default=0.05)
    f.add_argument("--format", default="ply-binary-le")
    return p


def _quote(text: str) -> str:
    return '"' + str(text).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ") + '"'


def error_record(exc: BaseException) -> str:
    if isinstance(exc, FileNotFoundError):
        path = exc.filename or ""
        return f"error=missing_path path={_quote(path)} message={_quote(exc.strerror or exc)}"
    return f"error={type(exc).__name__} message={_quote(exc)}"


def _run(args) -> int:
    overrides = {}
    if args.command == "structurize":
        overrides.update(dict(pl.parse_override(o) for o in args.overrides))
        for key in ("output", "report", "gt"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        if args.inputs:
            overrides["inputs"] = args.inputs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    cfg = pl.load_config(args.config, overrides)

    if args.command == "structurize":
        res = pl.cmd_structurize(cfg)
        print(f"wrote {res.output} report={res.report}")
    elif args.command == "evaluate":
        text = pl.cmd_evaluate(args.spcv, args.originals, args.gt, args.windows, args.ks,
                               args.denormalize, cfg.seed)
        if args.output:
            with open(args.output, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    elif args.command == "interpolate":
        out = pl.cmd_interpolate(args.spcv, args.t1, args.t2, args.count, args.output)
        print(f"wrote {args.output} frames={out.T}")
    elif args.command == "export":
        files = pl.cmd_export(args.spcv, args.bits, args.directory)
        print(f"wrote {len(files)} frames to {args.directory}")
    elif args.command == "make-fixture":
        res = pl.cmd_make_fixture(args.kind, args.directory, args.frames, args.n, args.step, args.format)
        print(f"wrote {len(res.frames)} frames manifest={res.manifest}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except FileNotFoundError as exc:
        print(error_record(exc), file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, RuntimeError, OSError) as exc:
        print(error_record(exc), file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
