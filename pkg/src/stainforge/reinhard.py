"""Reinhard global color-statistics baseline.

Matches per-channel mean and standard deviation in CIE LAB space (sRGB gamma,
D65 white point). A classical point of comparison for the learned transfer.
"""

from dataclasses import dataclass

import numpy as np

from .patches import Patch

STD_FLOOR = 1e-6

# sRGB <-> XYZ (D65) matrices
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


@dataclass(frozen=True)
class LabStats:
    """Per-channel LAB mean and (floored) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.mean).all() and np.isfinite(self.std).all()):
            raise ValueError("LAB statistics must be finite")
        object.__setattr__(self, "std", np.maximum(self.std, STD_FLOOR))


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1 / 2.4) - 0.055)


def _f(t):
    delta = 6 / 29
    return np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4 / 29)


def _f_inv(u):
    delta = 6 / 29
    return np.where(u > delta, u**3, 3 * delta**2 * (u - 4 / 29))


def rgb_to_lab(pixels):
    """Convert an (H, W, 3) sRGB array in [0, 1] to CIE LAB."""
    xyz = _srgb_to_linear(pixels) @ _RGB_TO_XYZ.T
    fxyz = _f(xyz / _D65_WHITE)
    fx, fy, fz = fxyz[..., 0], fxyz[..., 1], fxyz[..., 2]
    lab = np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)
    return lab


def lab_to_rgb(lab):
    """Convert CIE LAB back to sRGB in [0, 1], clamping out-of-gamut values."""
    l, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    fy = (l + 16) / 116
    fx = fy + a / 500
    fz = fy - b / 200
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * _D65_WHITE
    rgb = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
    return np.clip(rgb, 0.0, 1.0)


def lab_stats(patch):
    """LAB channel statistics of a patch."""
    lab = rgb_to_lab(patch.pixels)
    return LabStats(mean=lab.mean(axis=(0, 1)), std=lab.std(axis=(0, 1)))


def reinhard_transfer(patch, ref_stats):
    """Shift and scale each LAB channel of `patch` to match `ref_stats`.

    Constant channels hit the std floor and map to the reference mean.
    """
    lab = rgb_to_lab(patch.pixels)
    mean = lab.mean(axis=(0, 1))
    std = np.maximum(lab.std(axis=(0, 1)), STD_FLOOR)
    matched = (lab - mean) * (ref_stats.std / std) + ref_stats.mean
    rgb = lab_to_rgb(matched).astype(np.float32)
    return Patch(rgb, source_id=patch.source_id, tile_coords=patch.tile_coords)
