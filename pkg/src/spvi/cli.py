"""Command-line entry point: ``spvi run | validate | export``.

Exit codes: 0 success, 2 missing file, 3 validation failure (bad config,
incompatible inputs, incomplete run), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

EXIT_OK, EXIT_MISSING, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3, 4


def configure_threads(env=os.environ) -> int | None:
    """Cap XLA CPU parallelism from ``SPVI_THREADS``; returns the cap if set."""
    raw = env.get("SPVI_THREADS")
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("SPVI_THREADS must be a positive integer")
    flags = env.get("XLA_FLAGS", "")
    extra = f"--xla_cpu_multi_thread_eigen={'false' if n == 1 else 'true'} intra_op_parallelism_threads={n}"
    env["XLA_FLAGS"] = f"{flags} {extra}".strip()
    return n


class RunError(Exception):
    def __init__(self, code: int, message: str, kind: str = "error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _classify(exc: BaseException) -> int:
    from pydantic import ValidationError
    import yaml

    from spvi.errors import (CalibrationError, DomainError, FitError, ObjectiveError,
                             ShapeError, SolverError, StepError, TrainingError)
    from spvi.io import FormatError

    if isinstance(exc, RunError):
        return exc.code
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, (SolverError, TrainingError, ObjectiveError, StepError, FitError,
                        FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ValidationError, yaml.YAMLError, DomainError, ShapeError, CalibrationError,
                        FormatError, ValueError, KeyError)):
        return EXIT_INVALID
    return 1


def _error_record(exc: BaseException, code: int) -> dict:
    return {"error": type(exc).__name__, "message": str(exc), "exit_code": code}


@contextmanager
def run_lock(directory: Path):
    """Exclusive ownership of a run directory via an ``O_EXCL`` lockfile."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(EXIT_INVALID, f"run directory {directory} is locked by another process")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def listed_files(manifest: dict) -> set[str]:
    files = set(manifest.get("artifacts", [])) | set(manifest.get("exports", []))
    return files


def orphans(run_dir) -> list[str]:
    """Files under ``run_dir`` that ``manifest.json`` does not list."""
    from spvi.io import read_json

    run_dir = Path(run_dir)
    manifest = read_json(run_dir / "manifest.json")
    listed = listed_files(manifest) | {"manifest.json"}
    found = []
    for p in run_dir.rglob("*"):
        if p.is_file() and p.name != ".lock":
            rel = p.relative_to(run_dir).as_posix()
            if rel not in listed:
                found.append(rel)
    return sorted(found)


def _files_under(directory: Path) -> list[str]:
    rels = (p.relative_to(directory).as_posix() for p in directory.rglob("*") if p.is_file())
    return sorted(r for r in rels if r not in (".lock", "manifest.json"))


def cmd_validate(path: str) -> int:
    from spvi.config import load_config

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config not found: {p}")
    cfg = load_config(p)
    print(json.dumps({"valid": True, "kind": cfg.kind}))
    return EXIT_OK


def cmd_run(path: str) -> int:
    import spvi
    from spvi.config import load_config
    from spvi.experiments import EXPERIMENTS
    from spvi.io import write_json

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config not found: {p}")
    cfg = load_config(p)
    out = Path(cfg.output_dir)
    with run_lock(out):
        try:
            metrics = EXPERIMENTS[cfg.kind](cfg, out)
            extra = {}
            if isinstance(metrics, tuple):
                metrics, extra = metrics
        except BaseException as exc:
            code = _classify(exc)
            write_json(out / "error.json", _error_record(exc, code))
            raise
        (out / "error.json").unlink(missing_ok=True)
        if metrics:
            from spvi.evaluation import write_metrics

            write_metrics(out / "metrics.csv", metrics)
        manifest = {
            "kind": cfg.kind,
            "status": "complete",
            "code_version": spvi.__version__,
            "seeds": {"seed": cfg.seed},
            "config": cfg.model_dump(mode="json"),
            "artifacts": _files_under(out),
            **extra,
        }
        write_json(out / "manifest.json", manifest)
    print(json.dumps({"status": "complete", "output_dir": str(out)}))
    return EXIT_OK


def cmd_export(run_dir: str) -> int:
    from spvi.io import read_json, write_json

    run_dir = Path(run_dir)
    if not run_dir.exists():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise RunError(EXIT_INVALID, f"{run_dir} holds no completed run")
    manifest = read_json(mpath)
    if manifest.get("status") != "complete":
        raise RunError(EXIT_INVALID, f"{run_dir} is not a completed run")
    exports = []
    edir = run_dir / "exports"
    edir.mkdir(exist_ok=True)
    if (run_dir / "history.csv").exists():
        _export_loss_curve(run_dir / "history.csv", edir / "loss_curve.csv")
        exports.append("exports/loss_curve.csv")
    if (run_dir / "sweep.csv").exists():
        shutil.copyfile(run_dir / "sweep.csv", edir / "kl_vs_weight.csv")
        exports.append("exports/kl_vs_weight.csv")
    if (run_dir / "boundgap.csv").exists():
        shutil.copyfile(run_dir / "boundgap.csv", edir / "boundgap.csv")
        exports.append("exports/boundgap.csv")
    if (run_dir / "losses.csv").exists():
        shutil.copyfile(run_dir / "losses.csv", edir / "dsm_loss.csv")
        exports.append("exports/dsm_loss.csv")
    for name in ("posterior_mean.spvi", "posterior_std.spvi"):
        if (run_dir / name).exists():
            shutil.copyfile(run_dir / name, edir / name)
            exports.append(f"exports/{name}")
    manifest["exports"] = sorted(set(manifest.get("exports", [])) | set(exports))
    write_json(mpath, manifest)
    print(json.dumps({"exports": manifest["exports"]}))
    return EXIT_OK


def _export_loss_curve(src: Path, dst: Path, window: int = 100):
    rows = list(csv.DictReader(src.open()))
    a = 2.0 / (window + 1)
    smooth = None
    with dst.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "smoothed_loss"])
        for r in rows:
            loss = float(r["loss"])
            smooth = loss if smooth is None else (1 - a) * smooth + a * loss
            writer.writerow([r["step"], r["loss"], repr(smooth)])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spvi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    p_exp = sub.add_parser("export", help="write plot-ready series for a finished run")
    p_exp.add_argument("rundir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_threads()
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "validate":
            return cmd_validate(args.config)
        return cmd_export(args.rundir)
    except Exception as exc:  # mapped to an exit status with a JSON record
        code = _classify(exc)
        print(json.dumps(_error_record(exc, code)), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
