"""Bias correction, contrast stretching and brain extraction."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import ndimage

from .errors import DegenerateFit, EmptyMask
from .volume import Mask3D, Volume3D

LOG_EPS = 1e-6


@dataclass(frozen=True)
class PreprocessConfig:
    bias_poly_degree: int = 2
    stretch_percentiles: tuple[float, float] = (1.0, 99.0)
    bet_threshold_fraction: float = 0.35
    morphology_radius: int = 2
    head_threshold_fraction: float = 0.1

    def __post_init__(self):
        lo, hi = self.stretch_percentiles
        if not (0 <= lo < hi <= 100):
            raise ValueError(f"need 0 <= p_lo < p_hi <= 100, got {self.stretch_percentiles}")
        if self.bias_poly_degree < 0:
            raise ValueError("bias_poly_degree must be >= 0")
        if not 0 < self.bet_threshold_fraction < 1:
            raise ValueError("bet_threshold_fraction must lie in (0, 1)")
        if self.morphology_radius < 0:
            raise ValueError("morphology_radius must be >= 0")


def poly_exponents(degree: int) -> list[tuple[int, int, int]]:
    """Monomial exponents (a, b, c) with a + b + c <= degree, in a fixed order."""
    return [e for e in product(range(degree + 1), repeat=3) if sum(e) <= degree]


def _poly_design(dims, degree: int, index=None) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in dims]
    if index is None:
        coords = np.meshgrid(*axes, indexing="ij")
        x, y, z = (c.ravel() for c in coords)
    else:
        x, y, z = (axes[d][index[d]] for d in range(3))
    return np.stack([x**a * y**b * z**c for a, b, c in poly_exponents(degree)], axis=1)


def bias_correct(vol: Volume3D, mask: Mask3D, cfg: PreprocessConfig = PreprocessConfig()) -> Volume3D:
    """Remove a smooth multiplicative bias by a log-domain polynomial fit over ``mask``.

    The masked mean intensity is restored after division by the fitted field.
    """
    if mask.dims != vol.dims:
        raise ValueError("mask and volume dims differ")
    n_coef = len(poly_exponents(cfg.bias_poly_degree))
    idx = np.nonzero(mask.data)
    if len(idx[0]) < n_coef:
        raise DegenerateFit(f"{len(idx[0])} masked voxels for {n_coef} polynomial coefficients")
    if np.any(vol.data < 0):
        raise ValueError("bias_correct expects non-negative intensities")
    design = _poly_design(vol.dims, cfg.bias_poly_degree, idx)
    target = np.log(vol.data[idx] + LOG_EPS)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    full = _poly_design(vol.dims, cfg.bias_poly_degree) @ coef
    field = np.exp(full.reshape(vol.dims))
    corrected = vol.data / field
    mean_in = vol.data[idx].mean()
    mean_out = corrected[idx].mean()
    if mean_out > 0:
        corrected = corrected * (mean_in / mean_out)
    return vol.with_data(corrected)


def contrast_stretch(vol: Volume3D, cfg: PreprocessConfig = PreprocessConfig()) -> Volume3D:
    """Map the (p_lo, p_hi) percentile range linearly onto [0, 1], clamping outside."""
    lo, hi = np.percentile(vol.data, cfg.stretch_percentiles)
    if hi <= lo:
        return vol.with_data(np.zeros(vol.dims))
    return vol.with_data(np.clip((vol.data - lo) / (hi - lo), 0.0, 1.0))


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    g = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return x * x + y * y + z * z <= r * r


SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=SIX_CONNECTED)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def head_mask(vol: Volume3D, cfg: PreprocessConfig = PreprocessConfig()) -> Mask3D:
    """Loose foreground mask used to fit the bias field before skull stripping."""
    ref = np.percentile(vol.data, 99)
    return Mask3D(vol.data > cfg.head_threshold_fraction * ref)


def brain_extract(vol: Volume3D, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[Volume3D, Mask3D]:
    """Threshold + morphology skull stripping.

    Threshold at a fraction of the 99th percentile, keep the largest
    6-connected component, close then open with a ball, fill holes.
    """
    robust_max = np.percentile(vol.data, 99)
    mask = vol.data > cfg.bet_threshold_fraction * robust_max
    if robust_max <= 0 or not mask.any():
        raise EmptyMask("threshold removed every voxel")
    mask = largest_component(mask)
    r = cfg.morphology_radius
    if r > 0:
        se = ball(r)
        padded = np.pad(mask, r + 1)
        padded = ndimage.binary_closing(padded, structure=se)
        padded = ndimage.binary_opening(padded, structure=se)
        mask = padded[(slice(r + 1, -(r + 1)),) * 3]
    mask = ndimage.binary_fill_holes(mask)
    mask = largest_component(mask)
    if not mask.any():
        raise EmptyMask("morphology removed every voxel")
    return vol.with_data(np.where(mask, vol.data, 0.0)), Mask3D(mask)
