"""Command-line entry point: ``protoda {train-base,train-interp,explain,inspect,eval}``.

All commands share one run directory (``--out``)::

    base.npz                  frozen base model
    interp/                   round_XX.npz, last.npz, best.npz, train_log.csv
    report/                   explanation bundle
    inspect/                  removal curves (and ablation runs)
    eval.json
    manifest_<command>.json   config snapshot, seed, checkpoint hashes

Exit codes: 0 success, 2 missing upstream checkpoint, 1 any other error.
Errors are printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .base_model import accuracy, load_base, save_base, train_base
from .config import PROFILES, RunConfig, load_toml, resolve
from .datasets import SOURCE, TARGET, DomainPair, SyntheticSpec, TargetShift, generate_synthetic_pair, \
    load_directory_pair
from .errors import MissingArtifact, ProtoDAError
from .explain import emit_report
from .inspection import ALL_CLASSES, fidelity_ablation, removal_sweep
from .trainer import evaluate, load_interp, run_protocol

log = logging.getLogger("protoda")

CACHE_ENV = "PROTODA_CACHE"
TRAINING = ("train-base", "train-interp")


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "protoda")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_pair(cfg: RunConfig) -> DomainPair:
    """The synthetic generator unless both data roots are set. Relative roots
    resolve against the cache root."""
    d = cfg.data
    if d.source_root and d.target_root:
        roots = [Path(r) if Path(r).is_absolute() else cache_root() / r for r in (d.source_root, d.target_root)]
        return load_directory_pair(roots[0], roots[1], d.image_size)
    if cfg.profile != "synthetic":
        raise ValueError(f"profile {cfg.profile!r} needs data.source_root and data.target_root")
    shift = TargetShift(d.hue_degrees, d.noise_sigma, d.background_texture)
    return generate_synthetic_pair(SyntheticSpec(d.n_classes, d.per_class, d.seed, shift, d.image_size))


class Run:
    """Resolved config plus run-directory paths for one command invocation."""

    def __init__(self, args, cfg: RunConfig):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out) if args.out else cache_root() / "runs" / cfg.profile
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.results: dict = {}

    @property
    def base_path(self) -> Path:
        return Path(self.args.base) if getattr(self.args, "base", None) else self.out / "base.npz"

    @property
    def interp_dir(self) -> Path:
        return self.out / "interp"

    @property
    def interp_path(self) -> Path:
        if getattr(self.args, "checkpoint", None):
            return Path(self.args.checkpoint)
        return self.interp_dir / "last.npz"

    def need(self, path: Path, what: str) -> Path:
        if not path.is_file():
            raise MissingArtifact(path, what)
        self.inputs[str(path)] = file_sha256(path)
        return path

    def produced(self, path: Path) -> None:
        self.outputs[str(path)] = file_sha256(path)

    def write_manifest(self) -> Path:
        manifest = dict(
            command=self.args.command, argv=sys.argv[1:], seed=self.args.seed, profile=self.cfg.profile,
            config=self.cfg.to_dict(), inputs=self.inputs, outputs=self.outputs, results=self.results,
            versions=dict(protoda=__version__, torch=torch.__version__, numpy=np.__version__,
                          python=platform.python_version()),
        )
        path = self.out / f"manifest_{self.args.command}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
        return path


# ---------------------------------------------------------------- commands

def cmd_train_base(run: Run) -> None:
    pair = load_pair(run.cfg)
    path = run.base_path
    if run.args.resume and path.is_file():
        log.info("reusing %s", path)
        base = load_base(run.need(path, "base checkpoint"))
    else:
        base = train_base(pair, run.cfg.base)
        save_base(base, path)
    run.produced(path)
    run.results = {"acc_source": accuracy(base, pair, SOURCE)}
    if pair.has_target_labels:
        run.results["acc_target"] = accuracy(base, pair, TARGET)


def cmd_train_interp(run: Run) -> None:
    base = load_base(run.need(run.base_path, "base checkpoint"))
    pair = load_pair(run.cfg)
    model = run_protocol(base, pair, run.cfg.interp, out_dir=run.interp_dir, resume=run.args.resume)
    for name in ("last.npz", "best.npz", "train_log.csv"):
        if (run.interp_dir / name).is_file():
            run.produced(run.interp_dir / name)
    run.results = evaluate(model, pair)


def cmd_explain(run: Run) -> None:
    model = load_interp(run.need(run.interp_path, "interpretive checkpoint"))
    pair = load_pair(run.cfg)
    e = run.cfg.explain
    out = run.out / "report"
    emit_report(model, pair, out, e.m, e.tau, e.percentile)
    run.produced(out / "matches.json")
    run.results = {"report": str(out / "index.html")}


def cmd_inspect(run: Run) -> None:
    model = load_interp(run.need(run.interp_path, "interpretive checkpoint"))
    pair = load_pair(run.cfg)
    if not pair.has_target_labels:
        raise ValueError("removal sweeps need held-out target labels")
    cumulative = run.cfg.inspect.cumulative and not run.args.non_cumulative
    out = run.out / "inspect"
    scopes = [ALL_CLASSES] + list(run.cfg.inspect.categories or pair.categories)
    summaries = {}
    for scope in scopes:
        curve = removal_sweep(model, pair, scope, cumulative=cumulative)
        paths = curve.save(out)
        run.produced(paths["csv"])
        summaries[scope] = curve.summary()
    if run.args.ablation:
        base = load_base(run.need(run.base_path, "base checkpoint"))
        runs = fidelity_ablation(base, pair, run.cfg.interp, out_dir=out / "ablation")
        summaries["ablation"] = {k: dict(gamma=v["gamma"], metrics=v["metrics"], curve=v["curve"].summary())
                                 for k, v in runs.items()}
    (out / "summary.json").write_text(json.dumps(summaries, indent=1, sort_keys=True))
    run.results = summaries


def cmd_eval(run: Run) -> None:
    model = load_interp(run.need(run.interp_path, "interpretive checkpoint"))
    pair = load_pair(run.cfg)
    metrics = evaluate(model, pair)
    path = run.out / "eval.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(metrics, indent=1, sort_keys=True))
    run.produced(path)
    run.results = metrics


COMMANDS = {
    "train-base": cmd_train_base,
    "train-interp": cmd_train_interp,
    "explain": cmd_explain,
    "inspect": cmd_inspect,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML file; flags override its values")
        p.add_argument("--out", help=f"run directory (default ${CACHE_ENV}/runs/<profile>)")
        p.add_argument("--seed", type=int, help="required for training commands")
        p.add_argument("--profile", choices=PROFILES)
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-base", "train-interp", "inspect"):
            p.add_argument("--base", help="base checkpoint (default <out>/base.npz)")
        if name in ("explain", "inspect", "eval"):
            p.add_argument("--checkpoint", help="interpretive checkpoint (default <out>/interp/last.npz)")
        if name in TRAINING:
            p.add_argument("--resume", action="store_true", help="continue from existing checkpoints in --out")
        if name == "inspect":
            p.add_argument("--non-cumulative", action="store_true", help="mask one step's prototypes at a time")
            p.add_argument("--ablation", action="store_true", help="also train with and without the fidelity term")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = load_toml(args.config) if args.config else {}
    cfg = resolve(overrides, args.profile or overrides.get("profile"))
    if args.seed is not None:
        # the seed belongs to the stage the command trains
        if args.command == "train-base":
            cfg.base.seed = args.seed
        else:
            cfg.interp = cfg.interp.replace(seed=args.seed)
    return cfg


def _fail(exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "path", None):
        err["path"] = exc.path
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.to_toml(), end="")
            return 0
        if args.command in TRAINING and args.seed is None:
            raise ValueError(f"{args.command} requires --seed")
        run = Run(args, cfg)
        COMMANDS[args.command](run)
        run.write_manifest()
        print(json.dumps(run.results, indent=1, sort_keys=True, default=str))
        return 0
    except MissingArtifact as exc:
        return _fail(exc, 2)
    except (ProtoDAError, ValueError, OSError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
