"""Generate and load the synthetic (input, albedo, shade) dataset."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ipcd import pcio
from ipcd.model import TrainSample
from ipcd.projection import HemisphereGrid, PLDMap, compute_pld, load_pld_csv, save_pld_csv
from ipcd.scenegen import SceneSpec, build_scene, sample_triplet, sun_from_time

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenConfig:
    assets: int = 16
    train_assets: int = 12
    times: tuple = ("morning", "noon", "evening")
    n_points: int = 20000
    seed: int = 0
    buildings_min: int = 1
    buildings_max: int = 4
    compute_pld: bool = True
    image_size: int = 64
    point_size: float = 0.02
    theta_step: float = 10.0
    theta_max: float = 80.0
    phi_step: float = 10.0

    def grid(self) -> HemisphereGrid:
        return HemisphereGrid.regular(self.theta_step, self.phi_step, self.theta_max)


def asset_name(i: int) -> str:
    return f"asset{i:03d}"


def asset_seed(base_seed: int, i: int) -> int:
    return base_seed * 100003 + i


def triplet_seed(base_seed: int, i: int, t: int) -> int:
    return (base_seed * 100003 + i) * 7 + t + 1


def generate_dataset(root, cfg: GenConfig = GenConfig()) -> pcio.DatasetIndex:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not 0 <= cfg.train_assets <= cfg.assets:
        raise ValueError("train_assets must lie in [0, assets]")
    names = [asset_name(i) for i in range(cfg.assets)]
    for i, name in enumerate(names):
        spec = SceneSpec(seed=asset_seed(cfg.seed, i), building_count=(cfg.buildings_min, cfg.buildings_max))
        scene = build_scene(spec)
        for t, label in enumerate(cfg.times):
            tseed = triplet_seed(cfg.seed, i, t)
            triplet = sample_triplet(scene, sun_from_time(label), cfg.n_points, tseed)
            d = pcio.triplet_dir(root, name, label)
            pcio.save_triplet(triplet, d, meta={"asset": name, "time": label, "scene_seed": spec.seed,
                                                "sample_seed": tseed, "buildings": len(scene.footprints)})
            if cfg.compute_pld:
                pld = compute_pld(triplet.cloud, cfg.grid(), cfg.image_size, cfg.point_size)
                save_pld_csv(pld, d / "pld.csv")
            log.info("generated %s/%s", name, label)
    index = pcio.DatasetIndex(root, names[: cfg.train_assets], names[cfg.train_assets:], list(cfg.times))
    pcio.write_index(index)
    return index


def load_pld_for(directory) -> PLDMap | None:
    path = Path(directory) / "pld.csv"
    return load_pld_csv(path) if path.exists() else None


def load_samples(root, split: str = "train") -> list[TrainSample]:
    index = pcio.read_index(root)
    out = []
    for asset, time in index.entries(split):
        d = index.path(asset, time)
        out.append(TrainSample.prepare(pcio.load_triplet(d), load_pld_for(d), f"{asset}/{time}"))
    return out


def load_entries(root, split: str = "test"):
    """Yield (name, raw triplet, pld) for a split."""
    index = pcio.read_index(root)
    for asset, time in index.entries(split):
        d = index.path(asset, time)
        yield f"{asset}/{time}", pcio.load_triplet(d), load_pld_for(d)
