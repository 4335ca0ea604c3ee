"""On-disk dataset layout written by `make-dataset` and consumed by
`train` / `eval` / `ablate`.

    <root>/manifest.json     generation parameters, per-slice entries,
                             fold assignments
    <root>/images/vXX_sYY.raw (+ .json sidecar)
    <root>/labels/vXX_sYY.pgm
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import DataError, MissingFold
from .io import read_json, read_pgm, read_raw_f32, write_json, write_pgm, write_raw_f32
from .phantoms import Phantom, gen_volume, kfold_split
from .geometry import EllipseParams

MANIFEST = "manifest.json"


def make_dataset(root, volumes: int, slices_per_volume: int, size: int,
                 ambiguity: float, seed: int, folds: int) -> dict:
    """Generate and persist a dataset; returns the manifest."""
    root = Path(root)
    fold_splits = kfold_split(volumes, folds, seed)
    entries = []
    for v in range(volumes):
        slices = gen_volume(seed * 100003 + v, size, ambiguity,
                            n_slices=slices_per_volume)
        for j, ph in enumerate(slices):
            stem = f"v{v:02d}_s{j:02d}"
            write_raw_f32(root / "images" / f"{stem}.raw", ph.image)
            write_pgm(root / "labels" / f"{stem}.pgm", ph.strong_label)
            entries.append({
                "volume": v,
                "slice": j,
                "image": f"images/{stem}.raw",
                "label": f"labels/{stem}.pgm",
                "true_params": ph.true_params.to_dict(),
                "seed": ph.seed,
            })
    manifest = {
        "size": size,
        "ambiguity": ambiguity,
        "seed": seed,
        "volumes": volumes,
        "slices_per_volume": slices_per_volume,
        "folds": {"k": folds, "splits": fold_splits},
        "slices": entries,
    }
    write_json(root / MANIFEST, manifest)
    return manifest


@dataclass
class LoadedDataset:
    manifest: dict
    volumes: dict[int, list[Phantom]]

    def fold(self, index: int) -> dict:
        splits = self.manifest["folds"]["splits"]
        if not 0 <= index < len(splits):
            raise MissingFold(
                f"fold {index} not in dataset (k={len(splits)})"
            )
        return splits[index]

    def slices_of(self, volume_ids) -> list[Phantom]:
        return [p for v in volume_ids for p in self.volumes[v]]


def load_dataset(root) -> LoadedDataset:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise DataError(f"no {MANIFEST} under {root}")
    manifest = read_json(path)
    volumes: dict[int, list[Phantom]] = {}
    for entry in manifest["slices"]:
        ph = Phantom(
            image=read_raw_f32(root / entry["image"]),
            strong_label=read_pgm(root / entry["label"]),
            true_params=EllipseParams.from_dict(entry["true_params"]),
            seed=int(entry["seed"]),
        )
        volumes.setdefault(int(entry["volume"]), []).append(ph)
    for v, slices in volumes.items():
        if not slices:
            raise DataError(f"volume {v} has no slices")
    return LoadedDataset(manifest=manifest, volumes=volumes)
