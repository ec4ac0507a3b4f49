"""Command-line entry point: ``semvid {train,transmit,sweep,ingest-baseline,report}``.

Runs are configured by an INI file (one section per command) and/or flags;
flags win. Relative input paths in a config file resolve against the file's
folder. Relative output folders resolve against ``$SEMVID_OUTPUT_ROOT`` when it
is set.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import re
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .data import ClipManifest
from .experiments import (
    ExperimentSpec,
    SchemaError,
    describe_accounting,
    load_baseline,
    rebuild_report,
    run_sweep,
    store_baseline,
    transmit_clip,
    write_transmit_outputs,
)
from .model import load_checkpoint, state_digest
from .training import TrainConfig, train
from .types import InfeasibleBudgetError, source_dim

OUTPUT_ROOT_ENV = "SEMVID_OUTPUT_ROOT"
log = logging.getLogger("semvid")


class UsageError(Exception):
    pass


# --- config files -------------------------------------------------------------

def _key_line(path: Path, section: str, key: str) -> int | None:
    current = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[(.+)\]$", stripped)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", stripped):
            return lineno
    return None


class ConfigFile:
    """One section of an INI file, with line numbers for error messages."""

    def __init__(self, path, section: str):
        self.path = Path(path)
        self.section = section
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with self.path.open() as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise UsageError(f"config file {self.path} does not exist") from None
        except configparser.Error as exc:
            raise UsageError(f"{self.path}: malformed config: {exc}") from None
        if not parser.has_section(section):
            raise UsageError(f"{self.path}: missing [{section}] section")
        self.values = dict(parser.items(section))

    def where(self, key: str) -> str:
        line = _key_line(self.path, self.section, key)
        return f"{self.path}:{line}" if line else str(self.path)

    def path_value(self, key: str) -> Path | None:
        raw = self.values.get(key)
        if raw is None or not raw.strip():
            return None
        p = Path(raw.strip()).expanduser()
        return p if p.is_absolute() else self.path.parent / p


def _empty_config() -> ConfigFile:
    cfg = ConfigFile.__new__(ConfigFile)
    cfg.path, cfg.section, cfg.values = Path("<flags>"), "", {}
    return cfg


def _output_dir(raw) -> Path:
    p = Path(raw).expanduser()
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not p.is_absolute() and root:
        return Path(root) / p
    return p


def _float_list(text: str, name: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in re.split(r"[,\s]+", text.strip()) if x)
    except ValueError:
        raise UsageError(f"{name}: expected a comma-separated list of numbers, got {text!r}") from None


def _int_list(text: str, name: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in re.split(r"[,\s]+", text.strip()) if x)
    except ValueError:
        raise UsageError(f"{name}: expected a comma-separated list of integers, got {text!r}") from None


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_TRAIN_PATHS = {"manifest", "holdout", "output", "resume"}


def build_train_config(cfg: ConfigFile, overrides: dict) -> tuple[TrainConfig, dict]:
    values, paths = {}, {}
    for key, raw in cfg.values.items():
        if key in _TRAIN_PATHS:
            paths[key] = cfg.path_value(key) if key != "output" else raw.strip()
            continue
        if key not in _TRAIN_FIELDS:
            raise UsageError(f"{cfg.where(key)}: unknown option {key!r}")
        try:
            if key == "cbr_grid":
                values[key] = _float_list(raw, key)
            else:
                values[key] = _coerce(_TRAIN_FIELDS[key].type, raw)
        except (UsageError, ValueError) as exc:
            raise UsageError(f"{cfg.where(key)}: bad value for {key!r}: {exc}") from None
    for key, value in overrides.items():
        if value is None:
            continue
        if key in _TRAIN_PATHS:
            paths[key] = value
        else:
            values[key] = value
    for required in ("manifest", "output"):
        if not paths.get(required):
            raise UsageError(f"missing required field {required!r} (set it in [train] or pass --{required})")
    paths["output"] = _output_dir(paths["output"])
    try:
        return TrainConfig.from_dict(values), paths
    except ValueError as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def _coerce(type_name, raw: str):
    t = str(type_name)
    if t in ("int", "<class 'int'>"):
        return int(raw)
    if t in ("float", "<class 'float'>"):
        return float(raw)
    return raw


# --- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = ConfigFile(args.config, "train") if args.config else _empty_config()
    overrides = {"manifest": args.manifest, "output": args.output, "holdout": args.holdout,
                 "resume": args.resume, "steps": args.steps, "seed": args.seed}
    tcfg, paths = build_train_config(cfg, overrides)
    manifest = ClipManifest.from_file(paths["manifest"])
    result = train(manifest, tcfg, paths["output"], holdout_clip=paths.get("holdout"),
                   resume_from=paths.get("resume"))
    print(f"checkpoint: {result.checkpoint}")
    print(f"digest: {state_digest(result.model)}")
    if result.evals:
        print(f"held-out PSNR: {result.evals[0]['holdout_psnr']:.2f} dB -> "
              f"{result.evals[-1]['holdout_psnr']:.2f} dB")
    return 0


def cmd_transmit(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = _output_dir(args.output)
    try:
        outcome = transmit_clip(model, args.clip, args.cbr, args.snr, args.seed)
    except InfeasibleBudgetError as exc:
        raise UsageError(str(exc)) from None
    written = write_transmit_outputs(outcome, out)
    n_total = outcome.frames.shape[0]
    h, w = outcome.frames.shape[-2:]
    for g, (report, row) in enumerate(zip(outcome.reports, outcome.rows)):
        n = len(report.lengths) - 1
        print(f"GOP {g}: {describe_accounting(report, n, source_dim(h, w))}")
        print(f"GOP {g}: PSNR {row.psnr_db:.3f} dB, MS-SSIM {row.ms_ssim:.5f} ({row.ms_ssim_db:.3f} dB)")
    print(f"wrote {n_total} frames to {out / 'frames'} and report {written['csv']}")
    return 0


def cmd_sweep(args) -> int:
    cfg = ConfigFile(args.config, "sweep") if args.config else _empty_config()
    v = cfg.values

    def pick(flag, key):
        return flag if flag is not None else v.get(key)

    checkpoint = args.checkpoint or cfg.path_value("checkpoint")
    manifest = args.manifest or cfg.path_value("manifest")
    output = pick(args.output, "output")
    for name, value in (("checkpoint", checkpoint), ("manifest", manifest), ("output", output)):
        if not value:
            raise UsageError(f"missing required field {name!r} (set it in [sweep] or pass --{name})")
    kwargs = {}
    if pick(args.cbr_grid, "cbr_grid"):
        kwargs["cbr_grid"] = _float_list(pick(args.cbr_grid, "cbr_grid"), "cbr_grid")
    if pick(args.snr_grid, "snr_grid"):
        kwargs["snr_grid"] = _float_list(pick(args.snr_grid, "snr_grid"), "snr_grid")
    if pick(args.seeds, "seeds"):
        kwargs["seeds"] = _int_list(pick(args.seeds, "seeds"), "seeds")
    baselines = list(args.baseline or [])
    if v.get("baselines"):
        baselines += [cfg.path.parent / b.strip() for b in v["baselines"].split(",") if b.strip()]
    try:
        spec = ExperimentSpec(Path(checkpoint), Path(manifest), _output_dir(output),
                              baselines=tuple(Path(b) for b in baselines), **kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = load_checkpoint(spec.checkpoint)
    result = run_sweep(model, spec)
    print(f"{len(result['rows'])} rows in {result['results']}; {len(result['failures'])} failed cells")
    for p in result["plots"]:
        print(f"plot: {p}")
    return 1 if result["failures"] and not result["rows"] else 0


def cmd_ingest_baseline(args) -> int:
    try:
        series = load_baseline(args.csv, name=args.name)
    except (SchemaError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    target = store_baseline(series, _output_dir(args.output))
    print(f"{len(series.points)} points ({', '.join(series.labels())}) stored in {target}")
    return 0


def cmd_report(args) -> int:
    out = _output_dir(args.output)
    if not (out / "results.csv").exists():
        raise UsageError(f"{out} has no results.csv; run a sweep first")
    result = rebuild_report(out)
    print(f"summary: {result['summary']}")
    for p in result["plots"]:
        print(f"plot: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semvid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a clip manifest")
    p.add_argument("--config", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--output")
    p.add_argument("--holdout", type=Path)
    p.add_argument("--resume", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transmit", help="send one clip through the channel")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--clip", type=Path, required=True)
    p.add_argument("--cbr", type=float, required=True)
    p.add_argument("--snr", type=float, required=True, help="dB; 'inf' for a noiseless channel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_transmit)

    p = sub.add_parser("sweep", help="evaluate a CBR x SNR x seed grid")
    p.add_argument("--config", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--output")
    p.add_argument("--cbr-grid")
    p.add_argument("--snr-grid")
    p.add_argument("--seeds")
    p.add_argument("--baseline", action="append", type=Path)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ingest-baseline", help="validate and store an external results CSV")
    p.add_argument("csv", type=Path)
    p.add_argument("--output", required=True)
    p.add_argument("--name")
    p.set_defaults(func=cmd_ingest_baseline)

    p = sub.add_parser("report", help="rebuild summary and plots from a sweep folder")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"semvid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"semvid {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
