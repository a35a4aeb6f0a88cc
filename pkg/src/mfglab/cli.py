"""Command line runner: `mfglab run CONFIG [--out DIR] [--seed N] [--threads N]` and `mfglab list`."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, MfgError
from .experiments import EXPERIMENTS, catalog, validate

EXIT_OK, EXIT_ERROR, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("mfglab")


def _threads(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("MFGLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"MFGLAB_THREADS must be an integer, got {env!r}") from None
    return 1


def load_config(path) -> tuple[dict, bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        cfg = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    validate(cfg)
    return cfg, raw


def run(config_path, out=None, seed=None, threads=None) -> int:
    try:
        cfg, raw = load_config(config_path)
        nthreads = _threads(threads)
    except ConfigError as exc:
        print(f"mfglab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    seed = int(cfg.get("seed", 0)) if seed is None else int(seed)
    out = Path(out if out is not None else cfg.get("output", "mfglab-out"))
    runner = EXPERIMENTS[cfg["kind"]][0]
    start = time.perf_counter()
    try:
        files, checks = runner(cfg, seed, nthreads)
    except (MfgError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"mfglab: numerical failure in {cfg['kind']}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    wall = time.perf_counter() - start
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(files):
        with open(out / name, "w", newline="") as fh:
            fh.write(files[name])
    manifest = {
        "kind": cfg["kind"],
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "seed": seed,
        "threads": nthreads,
        "versions": {"mfglab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_time_s": round(wall, 3),
        "checks": {k: bool(v) for k, v in sorted(checks.items())},
        "files": {name: hashlib.sha256(files[name].encode()).hexdigest() for name in sorted(files)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name, ok in sorted(checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if all(checks.values()) else EXIT_CHECK_FAILED


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mfglab", description="particle experiments for potential mean field games")
    sub = parser.add_subparsers(dest="command")
    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--threads", type=int, default=None, help="worker threads (default: $MFGLAB_THREADS or 1)")
    sub.add_parser("list", help="list experiment kinds")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "list":
        print(catalog())
        return EXIT_OK
    if args.command == "run":
        return run(args.config, args.out, args.seed, args.threads)
    parser.print_usage(sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
