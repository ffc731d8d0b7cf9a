"""Command-line front end.

Exit status: 0 on success, 2 for configuration errors (the message names
the field path), 1 for runtime failures (tagged with the failing module).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import FORMAT_VERSIONS, __version__
from .config import ConfigError, load_config_file

COMMANDS = ("ingest", "prior", "train", "generate", "assemble", "eval", "cluster", "prompts")


def _version_text() -> str:
    formats = ", ".join(f"{k} {v}" for k, v in FORMAT_VERSIONS.items())
    return f"cityforge {__version__} (formats: {formats})"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cityforge", description="Footprint-prior 3D city generation pipeline.")
    parser.add_argument("--version", action="version", version=_version_text())
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", required=True, help="pipeline configuration JSON")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. training.steps=50 (repeatable)")
        p.add_argument("-j", "--jobs", type=int, default=1, help="per-building worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from . import pipeline
    from .errors import CityForgeError

    try:
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be at least 1")
        cfg = load_config_file(args.config, args.overrides)
        ws = pipeline.STAGES[args.command](cfg, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CityForgeError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    for rel in sorted(ws.artifacts):
        print(ws.root / rel)
    return 0


if __name__ == "__main__":
    sys.exit(main())
