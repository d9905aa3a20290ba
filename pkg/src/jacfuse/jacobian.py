"""Jacobian matrices and determinant maps of displacement fields."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .registration import DisplacementField
from .volume import Volume3D

log = logging.getLogger(__name__)


class DeformationType(IntEnum):
    COMPRESSION = -1
    NO_CHANGE = 0
    EXPANSION = 1


@dataclass(frozen=True)
class JacobianMap:
    volume: Volume3D
    source: str = ""

    @property
    def data(self) -> np.ndarray:
        return self.volume.data

    @property
    def dims(self):
        return self.volume.dims

    def folding_count(self) -> int:
        """Voxels with non-positive determinant (the transform folds there)."""
        return int((self.volume.data <= 0).sum())


def jacobian_matrix_field(field: DisplacementField) -> np.ndarray:
    """J = I + dD/dx per voxel, shape ``(nx, ny, nz, 3, 3)`` with ``J[..., i, j] = dT_i/dx_j``.

    Central differences inside, one-sided at the faces, voxel units.
    """
    if min(field.dims) < 2:
        raise ValueError(f"every axis needs at least 2 voxels, got {field.dims}")
    jac = np.empty(field.dims + (3, 3))
    for i in range(3):
        grads = np.gradient(field.data[i])
        for j in range(3):
            jac[..., i, j] = grads[j]
        jac[..., i, i] += 1.0
    return jac


def det3(m: np.ndarray) -> np.ndarray:
    """Determinant of stacked 3x3 matrices by cofactor expansion along the first row."""
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def jacobian_determinant_map(field: DisplacementField, source: str = "") -> JacobianMap:
    det = det3(jacobian_matrix_field(field))
    jmap = JacobianMap(Volume3D(det, field.spacing, field.affine), source)
    folds = jmap.folding_count()
    if folds:
        log.warning("%s: %d voxels with non-positive Jacobian determinant", source or "field", folds)
    return jmap


def classify_deformation(jmap: JacobianMap | np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-voxel -1 (compression), 0 (no change, |det - 1| <= eps) or +1 (expansion)."""
    det = jmap.data if isinstance(jmap, JacobianMap) else np.asarray(jmap, dtype=np.float64)
    out = np.where(det > 1.0, DeformationType.EXPANSION, DeformationType.COMPRESSION).astype(np.int8)
    out[np.abs(det - 1.0) <= eps] = DeformationType.NO_CHANGE
    return out


def deformation_summary(jmap: JacobianMap, mask: np.ndarray | None = None, eps: float = 1e-6) -> dict:
    """Fractions of compression / expansion / no-change voxels plus folding count."""
    labels = classify_deformation(jmap, eps)
    if mask is not None:
        labels = labels[np.asarray(mask, dtype=bool)]
    n = max(labels.size, 1)
    return {
        "compression": float((labels == DeformationType.COMPRESSION).sum() / n),
        "expansion": float((labels == DeformationType.EXPANSION).sum() / n),
        "no_change": float((labels == DeformationType.NO_CHANGE).sum() / n),
        "folding_voxels": jmap.folding_count(),
    }
