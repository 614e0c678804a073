"""File layout and I/O for datasets, fits, studies and run manifests."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from app import __version__
from app.errors import DataError

logger = logging.getLogger(__name__)

LONGITUDINAL_FILE = "longitudinal.csv"
SURVIVAL_FILE = "survival.csv"
TRUTH_FILE = "truth.json"
MANIFEST_FILE = "manifest.json"
DRAWS_FILE = "draws.csv"
POINTWISE_FILE = "pointwise_loglik.npy"
SUBJECTS_FILE = "subjects.npy"
DIAGNOSTICS_FILE = "diagnostics.json"
SUMMARY_FILE = "summary.json"
TRAJECTORIES_FILE = "trajectories.csv"
BASIS_FILE = "basis.npz"
LOO_FILE = "loo.json"
NPZ_VERSION = 1


# ── Digests ─────────────────────────────────────────────────────────

def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def directory_digests(directory: str | Path, exclude: tuple[str, ...] = (MANIFEST_FILE,)) -> dict[str, str]:
    directory = Path(directory)
    return {
        str(p.relative_to(directory)): file_digest(p)
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.name not in exclude
    }


# ── CSV with provenance header ──────────────────────────────────────

def write_csv(frame: pd.DataFrame, path: str | Path, provenance: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key, value in (provenance or {}).items():
            f.write(f"# {key}: {value}\n")
        frame.to_csv(f, index=False, float_format="%.17g")
    return path


def read_provenance(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            out[key.strip()] = value.strip()
    return out


def read_csv(path: str | Path, label: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing {label} CSV: {path}")
    try:
        frame = pd.read_csv(path, comment="#")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse {label} CSV {path}: {e}") from e
    return frame


# ── JSON / NPZ ──────────────────────────────────────────────────────

def _default(obj: Any):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_default) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def save_npz(path: str | Path, kind: str, **arrays: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, kind=np.array(kind), version=np.array(NPZ_VERSION), **arrays)
    return path


def load_npz(path: str | Path, kind: str | None = None) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        out = {k: data[k] for k in data.files}
    if kind is not None and str(out.get("kind")) != kind:
        raise DataError(f"{path}: expected a {kind!r} container, found {out.get('kind')!r}")
    return out


# ── Datasets ────────────────────────────────────────────────────────

def save_dataset(directory: str | Path, longitudinal: pd.DataFrame, survival: pd.DataFrame,
                 truth: dict | None, provenance: dict[str, Any]) -> list[Path]:
    directory = Path(directory)
    paths = [
        write_csv(longitudinal, directory / LONGITUDINAL_FILE, provenance),
        write_csv(survival, directory / SURVIVAL_FILE, provenance),
    ]
    if truth is not None:
        paths.append(write_json(directory / TRUTH_FILE, truth))
    return paths


def load_dataset_frames(directory: str | Path) -> tuple[pd.DataFrame, pd.DataFrame]:
    directory = Path(directory)
    return (read_csv(directory / LONGITUDINAL_FILE, "longitudinal"),
            read_csv(directory / SURVIVAL_FILE, "survival"))


def is_dataset_dir(directory: Path) -> bool:
    return (directory / LONGITUDINAL_FILE).exists() or (directory / SURVIVAL_FILE).exists()


def is_fit_dir(directory: Path) -> bool:
    return (directory / SUMMARY_FILE).exists() and (directory / MANIFEST_FILE).exists()


# ── Manifest ────────────────────────────────────────────────────────

class RunManifest(BaseModel):
    command: str
    config_hash: str | None = None
    seed: int | None = None
    code_version: str = __version__
    config: dict[str, Any] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    started_at: float = Field(default_factory=time.time)
    elapsed_seconds: float = 0.0
    extra: dict[str, Any] = Field(default_factory=dict)


def write_manifest(directory: str | Path, manifest: RunManifest) -> Path:
    """Record outputs and timing; must be the last file written to the directory."""
    directory = Path(directory)
    manifest.outputs = sorted(
        str(p.relative_to(directory)) for p in directory.rglob("*")
        if p.is_file() and p.name != MANIFEST_FILE and p.parent == directory
    )
    manifest.elapsed_seconds = round(time.time() - manifest.started_at, 3)
    path = write_json(directory / MANIFEST_FILE, manifest.model_dump())
    logger.info(f"Manifest written: {path}")
    return path


def read_manifest(directory: str | Path) -> RunManifest:
    return RunManifest.model_validate(read_json(Path(directory) / MANIFEST_FILE))
