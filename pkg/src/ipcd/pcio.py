"""Point-cloud I/O, normalization and the on-disk dataset layout.

Dataset layout::

    <root>/split.json
    <root>/<asset>/<time>/input.ply
    <root>/<asset>/<time>/albedo.ply
    <root>/<asset>/<time>/shade.ply
    <root>/<asset>/<time>/meta.json
    <root>/<asset>/<time>/pld.csv        (optional, written by ``gen``)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Mapping

import numpy as np

if TYPE_CHECKING:
    from ipcd.scenegen import SunConfig


class PLYFormatError(ValueError):
    pass


class EmptyCloudError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        col = np.asarray(self.colors, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {pos.shape}")
        if col.shape != pos.shape:
            raise ValueError(f"colors shape {col.shape} does not match positions {pos.shape}")
        if len(pos) == 0:
            raise EmptyCloudError("point cloud has no points")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain non-finite values")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", np.clip(col, 0.0, 1.0))

    def __len__(self) -> int:
        return len(self.positions)

    def take(self, idx) -> "PointCloud":
        return PointCloud(self.positions[idx], self.colors[idx])


@dataclass(eq=False)
class IntrinsicTriplet:
    """Aligned input / albedo / shade for one scene under one sun."""

    cloud: PointCloud
    albedo: np.ndarray
    shade: np.ndarray
    sun: "SunConfig | None" = None

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.shade = np.asarray(self.shade, dtype=np.float64)
        n = len(self.cloud)
        if self.albedo.shape != (n, 3) or self.shade.shape != (n, 3):
            raise ValueError("albedo/shade must match the cloud's N x 3 shape")

    def __len__(self) -> int:
        return len(self.cloud)

    def take(self, idx) -> "IntrinsicTriplet":
        return IntrinsicTriplet(self.cloud.take(idx), self.albedo[idx], self.shade[idx], self.sun)


@dataclass(frozen=True)
class NormalizationTransform:
    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Center on the centroid and scale so the farthest point sits at radius 1."""
    center = cloud.positions.mean(axis=0)
    radius = np.linalg.norm(cloud.positions - center, axis=1).max()
    # coincident points leave only centroid rounding noise; do not blow it up
    degenerate = radius <= 1e-12 * max(1.0, float(np.abs(cloud.positions).max()))
    scale = 1.0 if degenerate else 1.0 / radius
    tf = NormalizationTransform(center, float(scale))
    return PointCloud(tf.apply(cloud.positions), cloud.colors), tf


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _read_header(f):
    first = f.readline().strip()
    if first != b"ply":
        raise PLYFormatError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []  # [name, count, [(prop, type)]]
    while True:
        line = f.readline()
        if not line:
            raise PLYFormatError("unexpected end of file inside header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append([tokens[1], int(tokens[2]), []])
        elif tokens[0] == "property":
            if not elements:
                raise PLYFormatError("property declared before any element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], "list"))
            else:
                if tokens[1] not in _PLY_TYPES:
                    raise PLYFormatError(f"unsupported property type {tokens[1]!r}")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PLYFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply_vertices(path) -> dict[str, np.ndarray]:
    """Read every scalar vertex property of a PLY file into a name -> array dict."""
    with open(path, "rb") as f:
        fmt, elements = _read_header(f)
        if not elements or elements[0][0] != "vertex":
            raise PLYFormatError("first element must be 'vertex'")
        _, count, props = elements[0]
        if any(t == "list" for _, t in props):
            raise PLYFormatError("list properties on vertices are not supported")
        if fmt == "ascii":
            rows = []
            for _ in range(count):
                line = f.readline()
                if not line:
                    raise PLYFormatError("fewer vertex rows than declared")
                rows.append(line.split()[: len(props)])
            table = np.array(rows, dtype=np.float64).reshape(count, len(props))
            return {name: table[:, i].astype(t) for i, (name, t) in enumerate(props)}
        order = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(name, order + t) for name, t in props])
        raw = f.read(dtype.itemsize * count)
        if len(raw) < dtype.itemsize * count:
            raise PLYFormatError(f"binary body holds {len(raw) // dtype.itemsize} of {count} declared vertices")
        data = np.frombuffer(raw, dtype=dtype, count=count)
        return {name: np.asarray(data[name]).astype(data[name].dtype.newbyteorder("=")) for name, _ in props}


def _color_to_unit(arr: np.ndarray) -> np.ndarray:
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def load_ply(path) -> PointCloud:
    return load_ply_with_extras(path)[0]


def load_ply_with_extras(path) -> tuple[PointCloud, dict[str, np.ndarray]]:
    """Load positions, colors, and any ``<name>_r/_g/_b`` float channel triples."""
    props = read_ply_vertices(path)
    for key in ("x", "y", "z", "red", "green", "blue"):
        if key not in props:
            raise PLYFormatError(f"PLY {path} is missing vertex property {key!r}")
    n = len(props["x"])
    if n == 0:
        raise EmptyCloudError(f"PLY {path} has zero vertices")
    pos = np.stack([props["x"], props["y"], props["z"]], axis=1).astype(np.float64)
    col = np.stack([_color_to_unit(props[c]) for c in ("red", "green", "blue")], axis=1)
    extras = {}
    for key in props:
        if key.endswith("_r"):
            base = key[:-2]
            if base + "_g" in props and base + "_b" in props:
                extras[base] = np.stack(
                    [props[base + s].astype(np.float64) for s in ("_r", "_g", "_b")], axis=1
                )
    return PointCloud(pos, col), extras


def save_ply(
    cloud: PointCloud,
    path,
    encoding: str = "binary-le",
    extra: Mapping[str, np.ndarray] | None = None,
    color_type: str = "uchar",
) -> None:
    """Write a cloud as PLY; ``extra`` channels become ``<name>_r/_g/_b`` float properties."""
    if encoding not in ("ascii", "binary-le"):
        raise ValueError(f"encoding must be 'ascii' or 'binary-le', got {encoding!r}")
    if color_type not in ("uchar", "float", "double"):
        raise ValueError(f"unsupported color_type {color_type!r}")
    extra = dict(extra or {})
    n = len(cloud)
    fields = [("x", "f8", "double"), ("y", "f8", "double"), ("z", "f8", "double")]
    ctype = "u1" if color_type == "uchar" else _PLY_TYPES[color_type]
    fields += [(c, ctype, color_type) for c in ("red", "green", "blue")]
    for name, arr in extra.items():
        arr = np.asarray(arr)
        if arr.shape != (n, 3):
            raise ValueError(f"extra channel {name!r} must be {n} x 3, got {arr.shape}")
        fields += [(f"{name}_{s}", "f8", "double") for s in ("r", "g", "b")]

    table = np.empty(n, dtype=[(name, "<" + t) for name, t, _ in fields])
    table["x"], table["y"], table["z"] = cloud.positions.T
    if color_type == "uchar":
        q = np.round(cloud.colors * 255.0).astype(np.uint8)
    else:
        q = cloud.colors
    table["red"], table["green"], table["blue"] = q.T
    for name, arr in extra.items():
        for j, s in enumerate("rgb"):
            table[f"{name}_{s}"] = np.asarray(arr, dtype=np.float64)[:, j]

    header = ["ply", "format " + ("ascii 1.0" if encoding == "ascii" else "binary_little_endian 1.0")]
    header.append(f"element vertex {n}")
    header += [f"property {ply_t} {name}" for name, _, ply_t in fields]
    header.append("end_header")
    blob = ("\n".join(header) + "\n").encode("ascii")

    path = Path(path)
    with open(path, "wb") as f:
        f.write(blob)
        if encoding == "binary-le":
            f.write(table.tobytes())
        else:
            lines = []
            for row in table:
                vals = []
                for (name, t, _), v in zip(fields, row):
                    vals.append(str(int(v)) if t == "u1" else repr(float(v)))
                lines.append(" ".join(vals))
            f.write(("\n".join(lines) + "\n").encode("ascii"))


# --------------------------------------------------------------------------- dataset layout

def triplet_dir(root, asset: str, time: str) -> Path:
    return Path(root) / asset / time


def save_triplet(triplet: IntrinsicTriplet, directory, meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pos = triplet.cloud.positions
    # float colors keep I = A*S exact on disk
    save_ply(triplet.cloud, directory / "input.ply", color_type="double")
    save_ply(PointCloud(pos, triplet.albedo), directory / "albedo.ply", color_type="double")
    save_ply(PointCloud(pos, triplet.shade), directory / "shade.ply", color_type="double")
    record = dict(meta or {})
    if triplet.sun is not None:
        record["sun"] = triplet.sun.to_dict()
    with open(directory / "meta.json", "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)


def load_triplet(directory) -> IntrinsicTriplet:
    from ipcd.scenegen import SunConfig

    directory = Path(directory)
    cloud = load_ply(directory / "input.ply")
    albedo = load_ply(directory / "albedo.ply").colors
    shade = load_ply(directory / "shade.ply").colors
    sun = None
    meta_path = directory / "meta.json"
    if meta_path.exists():
        with open(meta_path) as f:
            meta = json.load(f)
        if "sun" in meta:
            sun = SunConfig.from_dict(meta["sun"])
    return IntrinsicTriplet(cloud, albedo, shade, sun)


@dataclass
class DatasetIndex:
    root: Path
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    times: list[str] = field(default_factory=list)

    def entries(self, split: str) -> list[tuple[str, str]]:
        assets = self.train if split == "train" else self.test if split == "test" else self.train + self.test
        return [(a, t) for a in assets for t in self.times]

    def path(self, asset: str, time: str) -> Path:
        return triplet_dir(self.root, asset, time)


def write_index(index: DatasetIndex) -> None:
    with open(Path(index.root) / "split.json", "w") as f:
        json.dump({"train": index.train, "test": index.test, "times": index.times}, f, indent=2)


def read_index(root) -> DatasetIndex:
    root = Path(root)
    split_path = root / "split.json"
    if not split_path.exists():
        raise FileNotFoundError(f"no split.json in dataset root {root}")
    with open(split_path) as f:
        data = json.load(f)
    return DatasetIndex(root, list(data["train"]), list(data["test"]), list(data["times"]))


def write_json_atomic(path, payload) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    os.replace(tmp, path)
