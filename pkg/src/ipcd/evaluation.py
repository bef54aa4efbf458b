"""Decomposition metrics and relative-reflectance pair evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ipcd.projection import LUMA

PSNR_CAP = 99.0
LABELS = ("darker", "lighter", "equal")


def psnr_from_mse(mse: float) -> float:
    return PSNR_CAP if mse < 1e-10 else float(10.0 * np.log10(1.0 / mse))


def metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """(MSE, MAE, PSNR) over all N*3 entries, peak value 1."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"metrics: shape mismatch {pred.shape} vs {truth.shape}")
    diff = pred - truth
    mse = float(np.mean(diff * diff))
    mae = float(np.mean(np.abs(diff)))
    return mse, mae, psnr_from_mse(mse)


@dataclass
class MetricRow:
    name: str
    albedo: tuple  # (mse, mae, psnr)
    shade: tuple


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, name: str, pred_albedo, pred_shade, truth_albedo, truth_shade) -> MetricRow:
        row = MetricRow(name, metrics(pred_albedo, truth_albedo), metrics(pred_shade, truth_shade))
        self.rows.append(row)
        return row

    def mean(self) -> dict[str, float]:
        """Row means; PSNR is averaged per row, and also given from the mean MSE."""
        out = {}
        for comp in ("albedo", "shade"):
            vals = np.array([getattr(r, comp) for r in self.rows])
            out[f"{comp}_mse"], out[f"{comp}_mae"], out[f"{comp}_psnr"] = vals.mean(axis=0)
            out[f"{comp}_psnr_of_mean_mse"] = psnr_from_mse(out[f"{comp}_mse"])
        return {k: float(v) for k, v in out.items()}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "albedo_mse", "albedo_mae", "albedo_psnr", "shade_mse", "shade_mae", "shade_psnr"])
            for r in self.rows:
                w.writerow([r.name, *map(repr, r.albedo), *map(repr, r.shade)])
            m = self.mean()
            w.writerow(["mean", *(repr(m[f"albedo_{x}"]) for x in ("mse", "mae", "psnr")),
                        *(repr(m[f"shade_{x}"]) for x in ("mse", "mae", "psnr"))])

    def table(self) -> str:
        lines = [f"{'name':<24}{'alb MSE':>10}{'alb MAE':>10}{'alb PSNR':>10}{'shd MSE':>10}{'shd MAE':>10}{'shd PSNR':>10}"]
        for r in self.rows:
            lines.append(f"{r.name:<24}" + "".join(f"{v:>10.4f}" for v in (*r.albedo, *r.shade)))
        m = self.mean()
        lines.append(f"{'mean':<24}" + "".join(
            f"{m[f'{c}_{x}']:>10.4f}" for c in ("albedo", "shade") for x in ("mse", "mae", "psnr")))
        return "\n".join(lines)


# --------------------------------------------------------------------------- pair annotations

@dataclass(frozen=True)
class PairAnnotation:
    i: int
    j: int
    label: str  # reflectance of i relative to j

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("annotation pair must reference two different points")
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")


def classify_ratio(rho: np.ndarray, delta: float) -> np.ndarray:
    return np.where(rho < 1.0 / delta, "darker", np.where(rho > delta, "lighter", "equal"))


def predict_pairs(albedo: np.ndarray, annotations, delta: float = 1.1) -> np.ndarray:
    luma = np.maximum(np.asarray(albedo) @ LUMA, 1e-4)
    i = np.array([a.i for a in annotations])
    j = np.array([a.j for a in annotations])
    return classify_ratio(luma[i] / luma[j], delta)


def macro_f1(truth, pred) -> float:
    """Macro f1 over the classes that occur in either labels or predictions."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    scores = []
    for c in LABELS:
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def pair_f1(albedo: np.ndarray, annotations, delta: float = 1.1) -> float:
    n = len(albedo)
    for a in annotations:
        if not (0 <= a.i < n and 0 <= a.j < n):
            raise ValueError(f"annotation ({a.i}, {a.j}) is outside a cloud of {n} points")
    pred = predict_pairs(albedo, annotations, delta)
    return macro_f1([a.label for a in annotations], pred)


def synthesize_annotations(albedo: np.ndarray, n_pairs: int, seed: int = 0, delta: float = 1.1) -> list[PairAnnotation]:
    """Random point pairs labelled from ground-truth albedo luma ratios."""
    rng = np.random.default_rng(seed)
    n = len(albedo)
    i = rng.integers(n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    luma = np.maximum(np.asarray(albedo) @ LUMA, 1e-4)
    labels = classify_ratio(luma[i] / luma[j], delta)
    return [PairAnnotation(int(a), int(b), str(c)) for a, b, c in zip(i, j, labels)]


def write_annotations(annotations, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["i", "j", "label"])
        for a in annotations:
            w.writerow([a.i, a.j, a.label])


def read_annotations(path) -> list[PairAnnotation]:
    with open(path, newline="") as f:
        return [PairAnnotation(int(r["i"]), int(r["j"]), r["label"].strip()) for r in csv.DictReader(f)]
