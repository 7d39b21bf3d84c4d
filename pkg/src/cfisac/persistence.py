"""On-disk formats: run configuration, datasets, checkpoints, manifests.

Dataset file (JSON, UTF-8, keys sorted)::

    {"format": "cfisac-dataset", "version": 1,
     "config": {<SystemConfig fields>}, "size": S, "seed": s,
     "train_fraction": f, "split": k,
     "scenes": [{"ue_xy": [[x, y], ...], "target_xy": [x, y]}, ...]}

Only positions are stored; channels are re-derived on load. Floats are
written with their shortest round-trip repr, so save/load is lossless and
regeneration with the same seed is byte-identical.

Checkpoint file (``torch.save`` of a dict)::

    {"format": "cfisac-checkpoint", "version": 1, "arch": {...},
     "system": {...}, "dtype": "float32", "state_dicts": [per-AP ...],
     "meta": {"role", "epoch", "lambda", "val_g1", "val_g2", ...}}
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ConfigError, DataMismatchError
from .model import PRESETS, ArchitectureSpec, DistributedModel, init_model
from .scenario import Dataset, SystemConfig
from .training import CeilingEstimates, TrainConfig

DATASET_FORMAT = "cfisac-dataset"
CHECKPOINT_FORMAT = "cfisac-checkpoint"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    """Everything a config file can set: system, training and architecture."""

    system: SystemConfig = field(default_factory=SystemConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchitectureSpec | None = None

    def to_dict(self) -> dict:
        d = {"system": self.system.to_dict(), "train": self.train.to_dict()}
        if self.arch is not None:
            d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"system", "train", "arch"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        arch = d.get("arch")
        if isinstance(arch, str):
            arch = resolve_arch(arch)
        elif arch is not None:
            arch = ArchitectureSpec.from_dict(arch)
        return cls(SystemConfig.from_dict(d.get("system", {})),
                   TrainConfig.from_dict(d.get("train", {})), arch)


def resolve_arch(name: str) -> ArchitectureSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(PRESETS)}") from None


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def parse_config(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(d)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())


# -- datasets ----------------------------------------------------------------

def dataset_to_json(ds: Dataset) -> str:
    doc = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "config": ds.config.to_dict(),
        "size": len(ds),
        "seed": ds.seed,
        "train_fraction": ds.train_fraction,
        "split": ds.split,
        "scenes": [{"ue_xy": ds.ue_xy[i].tolist(), "target_xy": ds.target_xy[i].tolist()}
                   for i in range(len(ds))],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_json(ds))


def load_dataset(path: str | Path) -> Dataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != DATASET_FORMAT or doc.get("version") != FORMAT_VERSION:
        raise DataMismatchError(f"{path} is not a version-{FORMAT_VERSION} {DATASET_FORMAT} file")
    scenes = doc["scenes"]
    if len(scenes) != doc["size"]:
        raise DataMismatchError(f"{path}: header says {doc['size']} scenes, found {len(scenes)}")
    cfg = SystemConfig.from_dict(doc["config"])
    ue = np.array([s["ue_xy"] for s in scenes], dtype=float).reshape(len(scenes), cfg.num_ues, 2)
    tgt = np.array([s["target_xy"] for s in scenes], dtype=float).reshape(len(scenes), 2)
    return Dataset(config=cfg, ue_xy=ue, target_xy=tgt, split=int(doc["split"]),
                   seed=int(doc["seed"]), train_fraction=float(doc["train_fraction"]))


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(model: DistributedModel, path: str | Path, meta: dict | None = None) -> None:
    dtype = next(model.parameters()).dtype
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "arch": model.spec.to_dict(),
        "system": model.system.to_dict(),
        "dtype": "float64" if dtype == torch.float64 else "float32",
        "state_dicts": [net.state_dict() for net in model.nets],
        "meta": dict(meta or {}),
    }, path)


def load_checkpoint(path: str | Path, system: SystemConfig | None = None) -> tuple[DistributedModel, dict]:
    """Rebuild a model; rejects checkpoints trained for a different ``system``."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise DataMismatchError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != FORMAT_VERSION:
        raise DataMismatchError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    ck_system = SystemConfig.from_dict(blob["system"])
    if system is not None and ck_system != system:
        raise DataMismatchError(f"{path} was trained for a different system config")
    spec = ArchitectureSpec.from_dict(blob["arch"])
    dtype = torch.float64 if blob["dtype"] == "float64" else torch.float32
    model = init_model(spec, ck_system, 0, dtype=dtype)
    for net, sd in zip(model.nets, blob["state_dicts"]):
        net.load_state_dict(sd)
    model.eval()
    return model, blob["meta"]


def save_ceilings(c: CeilingEstimates, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"g1_max": c.g1_max, "g2_max": c.g2_max}, indent=2) + "\n")


def load_ceilings(path: str | Path) -> CeilingEstimates:
    d = json.loads(Path(path).read_text())
    return CeilingEstimates(float(d["g1_max"]), float(d["g2_max"]))


# -- manifests ---------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: str | Path, command: str, args: dict, *, config: RunConfig | None = None,
                   seeds: dict | None = None, ceilings: CeilingEstimates | None = None,
                   artifacts: dict | None = None, inputs: dict | None = None,
                   started: str = "", finished: str = "") -> Path:
    doc = {
        "command": command,
        "code_version": __version__,
        "args": args,
        "config": config.to_dict() if config is not None else None,
        "seeds": seeds or {},
        "ceilings": None if ceilings is None else {"g1_max": ceilings.g1_max, "g2_max": ceilings.g2_max},
        "artifacts": artifacts or {},
        "inputs": inputs or {},
        "started": started,
        "finished": finished,
    }
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    return json.loads(p.read_text())
