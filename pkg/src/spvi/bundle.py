"""Measurement bundles: a JSON manifest plus tensor containers on disk."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from spvi.forward.measurement import Measurement
from spvi.forward.vlbi import closure_design, read_coverage, write_coverage
from spvi.io import read_json, read_tensor, write_json, write_tensor


def save_bundle(directory, y: Measurement, truth=None, extra: dict | None = None) -> list[str]:
    """Persist ``y`` (and optionally the ground truth) under ``directory``.

    Returns the written file names relative to ``directory``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"values": "values.spvi", "noise_sigma": "noise_sigma.spvi"}
    write_tensor(directory / files["values"], y.values)
    write_tensor(directory / files["noise_sigma"], y.noise_sigma)
    meta = {}
    for key, value in y.metadata.items():
        if key == "mask":
            files["mask"] = "mask.spvi"
            write_tensor(directory / files["mask"], np.asarray(value))
        elif key == "matrix":
            files["matrix"] = "matrix.spvi"
            write_tensor(directory / files["matrix"], np.asarray(value))
        elif key == "coverage":
            files["coverage"] = "coverage.txt"
            write_coverage(directory / files["coverage"], value)
        elif key == "design":
            continue  # rebuilt from the coverage on load
        else:
            meta[key] = list(value) if isinstance(value, tuple) else value
    if truth is not None:
        files["truth"] = "truth.spvi"
        write_tensor(directory / files["truth"], np.asarray(truth))
    manifest = {
        "model_id": y.model_id,
        "n_values": int(y.dim),
        "noise_sigma_scalar": float(y.noise_sigma[0]) if np.all(y.noise_sigma == y.noise_sigma[0]) else None,
        "metadata": meta,
        "files": files,
        **(extra or {}),
    }
    write_json(directory / "bundle.json", manifest)
    return ["bundle.json", *files.values()]


def load_bundle(directory) -> tuple[Measurement, np.ndarray | None]:
    directory = Path(directory)
    path = directory / "bundle.json"
    if not path.exists():
        raise FileNotFoundError(f"no measurement bundle at {directory}")
    manifest = read_json(path)
    files = manifest["files"]
    meta = dict(manifest["metadata"])
    if "shape" in meta:
        meta["shape"] = tuple(meta["shape"])
    values = read_tensor(directory / files["values"]).astype(float)
    sigma = read_tensor(directory / files["noise_sigma"]).astype(float)
    if "mask" in files:
        meta["mask"] = read_tensor(directory / files["mask"]).astype(np.uint8)
    if "matrix" in files:
        meta["matrix"] = read_tensor(directory / files["matrix"]).astype(float)
    if "coverage" in files:
        meta["coverage"] = read_coverage(directory / files["coverage"])
        if manifest["model_id"] == "vlbi_closure":
            meta["design"] = closure_design(meta["coverage"])
    truth = None
    if "truth" in files:
        truth = read_tensor(directory / files["truth"]).astype(float)
    return Measurement(values, sigma, manifest["model_id"], meta), truth
