"""On-disk synthetic datasets: MGT1 triples (X, Y, Z) plus a hashed manifest.

Layout::

    <root>/manifest.json
    <root>/train/0000_x.mgt  0000_y.mgt  0000_z.mgt ...
    <root>/val/0000_x.mgt ...
    <root>/pgm/train_0000_{x,y,z}.pgm ...
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import degradation as deg
from . import mgt
from .config import RunConfig
from .training import PairSet

MANIFEST = "manifest.json"
FORMAT = "mgdun-dataset-1"


class DatasetError(ValueError):
    pass


def operators(cfg: RunConfig) -> tuple[deg.DegradationOp, deg.LinearCrossModalOp]:
    dk = deg.DegradationOp(sigma=cfg.sigma, scale=cfg.scale, noise_std=cfg.noise_lr)
    p = deg.LinearCrossModalOp.gaussian(cfg.guide_sigma, cfg.guide_gain, cfg.noise_guide)
    return dk, p


def problem_seed(seed: int, split: str, index: int) -> int:
    """Seed of one phantom; train and val draws never share a seed."""
    return int(np.random.SeedSequence([seed, 1 if split == "val" else 0, index]).generate_state(1)[0])


def make_problems(cfg: RunConfig, split: str) -> list[deg.ReconProblem]:
    n = cfg.count if split == "train" else cfg.val_count
    dk, p = operators(cfg)
    return [deg.synth_problem(deg.PhantomSpec(seed=problem_seed(cfg.seed, split, i), size=(cfg.size, cfg.size)),
                              dk, p)
            for i in range(n)]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write(cfg: RunConfig, root: str | Path, pgm: bool = True) -> dict:
    """Synthesize the train and val splits under ``root``; returns the manifest."""
    root = Path(root)
    files = {}
    for split in ("train", "val"):
        (root / split).mkdir(parents=True, exist_ok=True)
        for i, prob in enumerate(make_problems(cfg, split)):
            for key in ("x", "y", "z"):
                rel = f"{split}/{i:04d}_{key}.mgt"
                mgt.save(root / rel, getattr(prob, key))
                files[rel] = _sha256(root / rel)
                if pgm:
                    (root / "pgm").mkdir(exist_ok=True)
                    mgt.write_pgm16(root / "pgm" / f"{split}_{i:04d}_{key}.pgm", getattr(prob, key))
    manifest = {
        "format": FORMAT,
        "seed": cfg.seed,
        "count": cfg.count,
        "val_count": cfg.val_count,
        "size": cfg.size,
        "scale": cfg.scale,
        "sigma": cfg.sigma,
        "noise_lr": cfg.noise_lr,
        "noise_guide": cfg.noise_guide,
        "guide_sigma": cfg.guide_sigma,
        "guide_gain": cfg.guide_gain,
        "noiseless": cfg.noise_lr == 0 and cfg.noise_guide == 0,
        "files": files,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class Dataset:
    root: Path
    manifest: dict
    train: PairSet
    val: PairSet

    @property
    def scale(self) -> int:
        return int(self.manifest["scale"])


def _stack(root: Path, manifest: dict, split: str, n: int) -> PairSet:
    if n == 0:
        return PairSet(np.zeros((0, 1, 1, 1), np.float32), np.zeros((0, 1, 1, 1), np.float32),
                       np.zeros((0, 1, 1, 1), np.float32))
    parts = {k: [] for k in "xyz"}
    for i in range(n):
        for k in "xyz":
            parts[k].append(mgt.load(root / f"{split}/{i:04d}_{k}.mgt"))
    return PairSet(*(np.concatenate(parts[k]) for k in "xyz"))


def load(root: str | Path, verify: bool = True) -> Dataset:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DatasetError(f"no {MANIFEST} in {root}; run 'mgdun synth' first")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{path}: unsupported dataset format {manifest.get('format')!r}")
    if verify:
        for rel, digest in manifest["files"].items():
            if not (root / rel).is_file() or _sha256(root / rel) != digest:
                raise DatasetError(f"{rel}: missing or hash mismatch with the manifest")
    return Dataset(root, manifest,
                   _stack(root, manifest, "train", manifest["count"]),
                   _stack(root, manifest, "val", manifest["val_count"]))


def problems(pairs: PairSet, scale: int) -> list[deg.ReconProblem]:
    return [deg.ReconProblem(x=pairs.x[i:i + 1], y=pairs.y[i:i + 1], z=pairs.z[i:i + 1], scale=scale)
            for i in range(len(pairs))]
