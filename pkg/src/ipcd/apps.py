"""Relighting and albedo editing on decomposed clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def mask(self, positions: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        return np.all((positions >= lo) & (positions <= hi), axis=1)


def relight(albedo: np.ndarray, new_shade: np.ndarray) -> np.ndarray:
    albedo = np.asarray(albedo, dtype=np.float64)
    new_shade = np.asarray(new_shade, dtype=np.float64)
    if albedo.shape != new_shade.shape:
        raise ValueError(f"relight: albedo {albedo.shape} and shade {new_shade.shape} differ in shape")
    return np.clip(albedo * new_shade, 0.0, 1.0)


def selection_indices(selection, n: int, positions: np.ndarray | None = None) -> np.ndarray:
    if isinstance(selection, Box):
        if positions is None:
            raise SelectionError("a box selection needs point positions")
        idx = np.flatnonzero(selection.mask(positions))
    else:
        idx = np.unique(np.asarray(selection, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= n):
            raise SelectionError(f"selected indices fall outside a cloud of {n} points")
    if idx.size == 0:
        raise SelectionError("selection is empty")
    return idx


def rotate_hue(colors: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate RGB about the gray axis; preserves the channel mean."""
    axis = np.ones(3) / np.sqrt(3.0)
    a = np.radians(degrees)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * K @ K
    return colors @ R.T


def edit_texture(albedo: np.ndarray, selection, positions: np.ndarray | None = None,
                 color=None, hue_shift: float | None = None) -> np.ndarray:
    """Set or hue-shift the albedo of selected points; other rows are copied untouched."""
    if (color is None) == (hue_shift is None):
        raise ValueError("give exactly one of color or hue_shift")
    albedo = np.asarray(albedo, dtype=np.float64)
    idx = selection_indices(selection, len(albedo), positions)
    out = albedo.copy()
    if color is not None:
        out[idx] = np.clip(np.broadcast_to(np.asarray(color, float), (len(idx), 3)), 0.0, 1.0)
    else:
        out[idx] = np.clip(rotate_hue(albedo[idx], hue_shift), 0.0, 1.0)
    return out
