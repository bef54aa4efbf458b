"""INI-style run configuration shared by every CLI subcommand.

Each subcommand reads its own section; values fall back to the defaults
below. Overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
from pathlib import Path

DEFAULTS: dict[str, dict[str, object]] = {
    "gen": {
        "assets": 16,
        "train_assets": 12,
        "times": "morning,noon,evening",
        "n_points": 20000,
        "seed": 0,
        "buildings_min": 1,
        "buildings_max": 4,
        "compute_pld": True,
    },
    "pld": {
        "image_size": 64,
        "point_size": 0.02,
        "theta_step": 10.0,
        "theta_max": 80.0,
        "phi_step": 10.0,
    },
    "train": {
        "variant": "full",
        "mode": "",
        "iterations": 5000,
        "points": 2048,
        "k": 16,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "seed": 0,
        "lam": 0.1,
        "use_pld": True,
        "use_hfr": True,
        "share_encoder": True,
        "log_every": 0,
        "batch_pool": 8,
    },
    "retinex": {"k": 12, "tau": 0.1, "mu": 1e-3},
    "eval": {"split": "test", "model": "baseline_a", "delta": 1.1},
    "register": {
        "split": "test",
        "overlaps": "0.9,0.7,0.5",
        "seed": 0,
        "max_iterations": 60,
        "radius": 0.08,
        "color_weight": 0.3,
        "rotation_threshold": 5.0,
        "translation_threshold": 0.05,
        "colors": "input",
        "max_points": 5000,
    },
}


def _coerce(default, raw: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(float(raw))
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


class Config:
    def __init__(self, sections: dict[str, dict[str, object]]):
        self._sections = sections

    def section(self, name: str) -> dict[str, object]:
        return dict(self._sections.get(name, {}))

    def get(self, section: str, key: str):
        return self._sections[section][key]

    def as_dict(self) -> dict[str, dict[str, object]]:
        return {k: dict(v) for k, v in self._sections.items()}


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    sections = {name: dict(values) for name, values in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(Path(path)):
            raise FileNotFoundError(f"config file not found: {path}")
        for name in parser.sections():
            target = sections.setdefault(name, {})
            for key, raw in parser.items(name):
                target[key] = _coerce(target[key], raw) if key in target else raw
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        name, key = lhs.split(".", 1)
        target = sections.setdefault(name, {})
        target[key] = _coerce(target[key], raw) if key in target else raw
    return Config(sections)
