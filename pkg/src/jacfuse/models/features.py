"""Deterministic convolutional feature bank feeding the random forests.

Stands in for a pretrained deep extractor: a fixed bank of seeded 3x3x3
filters whose responses are pooled over the brain mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import EmptyMask, ShapeMismatch

KERNEL = 27  # 3*3*3 taps


def _orthonormal_bank(n_filters: int, seed: int) -> np.ndarray:
    """Gaussian filters orthonormalized in blocks of at most 27.

    Only 27 vectors can be mutually orthogonal in R^27, so each block of up to
    27 filters is orthonormalized on its own.
    """
    rng = np.random.default_rng(seed)
    raw = rng.normal(0.0, 1.0, (n_filters, KERNEL))
    out = np.empty_like(raw)
    for start in range(0, n_filters, KERNEL):
        block = raw[start : start + KERNEL]
        q, r = np.linalg.qr(block.T)
        # fix signs so the result does not depend on LAPACK conventions
        q = q * np.sign(np.diag(r))
        out[start : start + KERNEL] = q.T
    return out.reshape(n_filters, 3, 3, 3)


@dataclass(frozen=True)
class FeatureExtractor:
    n_filters: int = 32
    seed: int = 0

    @property
    def filters(self) -> np.ndarray:
        return _orthonormal_bank(self.n_filters, self.seed)

    @property
    def n_features(self) -> int:
        return 3 * self.n_filters

    def __call__(self, vol, mask) -> np.ndarray:
        return extract_features(vol, mask, self)


def valid_convolve(data: np.ndarray, filters: np.ndarray) -> np.ndarray:
    """Valid-mode cross-correlation with every filter, shape ``(F, nx-2, ny-2, nz-2)``."""
    win = sliding_window_view(data, (3, 3, 3))
    return np.moveaxis(np.tensordot(win, filters, axes=([3, 4, 5], [1, 2, 3])), 3, 0)


def extract_features(vol, mask, extractor: FeatureExtractor = FeatureExtractor()) -> np.ndarray:
    """Per-filter (mean, std, max) of the response over masked voxels, flattened filter-major."""
    data = np.asarray(getattr(vol, "data", vol), dtype=np.float64)
    mask = np.asarray(getattr(mask, "data", mask), dtype=bool)
    if data.ndim != 3 or min(data.shape) < 3:
        raise ShapeMismatch(f"need a 3D volume with at least 3 voxels per axis, got {data.shape}")
    if mask.shape != data.shape:
        raise ShapeMismatch(f"mask {mask.shape} does not match volume {data.shape}")
    # a valid response at index i is centred on voxel i+1
    inner = mask[1:-1, 1:-1, 1:-1]
    if not inner.any():
        raise EmptyMask("no masked voxels away from the volume border")
    resp = valid_convolve(data, extractor.filters)[:, inner]
    feats = np.stack([resp.mean(axis=1), resp.std(axis=1), resp.max(axis=1)], axis=1)
    return feats.reshape(-1)
