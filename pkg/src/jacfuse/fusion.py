"""Early fusion of Jacobian maps, late fusion of model probabilities, subject prediction."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import MODALITIES, HdiCandidate, impute_hdi
from .errors import EmptyInput, MalformedDistribution, NoModalities, ShapeMismatch
from .models.cnn import Cnn3dModel, cnn_forward
from .models.features import FeatureExtractor, extract_features
from .models.forest import ForestModel, rf_predict_proba
from .volume import Volume3D, resample_array

N_CLASSES = 4
FUSION_ORDER = MODALITIES  # MRI first, then CT


def _as_array(m) -> np.ndarray:
    return np.asarray(getattr(m, "data", m), dtype=np.float64)


def early_fuse(jd_maps: Sequence) -> Volume3D:
    """Concatenate Jacobian maps along the depth (first) axis without altering values."""
    if not jd_maps:
        raise EmptyInput("nothing to fuse")
    arrays = [_as_array(m) for m in jd_maps]
    first = arrays[0].shape[1:]
    for a in arrays:
        if a.ndim != 3 or a.shape[1:] != first:
            raise ShapeMismatch(f"cannot depth-concatenate maps of shapes {[x.shape for x in arrays]}")
    ref = getattr(jd_maps[0], "volume", jd_maps[0])
    spacing = getattr(ref, "spacing", (1.0, 1.0, 1.0))
    return Volume3D(np.concatenate(arrays, axis=0), spacing)


def late_fuse(probs: Sequence) -> tuple[np.ndarray, int]:
    """Arithmetic mean of probability vectors and its argmax (ties to the lowest index)."""
    if len(probs) == 0:
        raise EmptyInput("late fusion needs at least one probability vector")
    vecs = [np.asarray(p, dtype=np.float64) for p in probs]
    for v in vecs:
        if v.shape != (N_CLASSES,) or not np.all(np.isfinite(v)) or (v < 0).any() or abs(v.sum() - 1.0) > 1e-6:
            raise MalformedDistribution(f"not a {N_CLASSES}-class distribution: {v}")
    total = vecs[0].copy()
    for v in vecs[1:]:
        total = total + v
    p_aggr = total / len(vecs)
    return p_aggr, int(np.argmax(p_aggr))


@dataclass
class EnsemblePrediction:
    id: str
    p_cnn: np.ndarray
    p_rf_mri: np.ndarray
    p_rf_ct: np.ndarray
    p_aggr: np.ndarray
    predicted: int
    donor_id: str | None = None
    imputed: str | None = None
    actual: int | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "p_cnn": self.p_cnn.tolist(),
            "p_rf_mri": self.p_rf_mri.tolist(),
            "p_rf_ct": self.p_rf_ct.tolist(),
            "p_aggr": self.p_aggr.tolist(),
            "class": self.predicted,
            "actual": self.actual,
            "donor_id": self.donor_id,
            "imputed_modality": self.imputed,
            "fusion_order": list(FUSION_ORDER),
        }


def write_predictions(preds: Sequence[EnsemblePrediction], path) -> None:
    with open(path, "w") as f:
        for p in preds:
            f.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


@dataclass
class EnsembleModels:
    cnn: Cnn3dModel
    rf_mri: ForestModel
    rf_ct: ForestModel
    extractor: FeatureExtractor = field(default_factory=FeatureExtractor)
    mask: np.ndarray | None = None

    @property
    def cnn_dims(self) -> tuple[int, int, int]:
        d, h, w = self.cnn.input_shape
        return (d // len(FUSION_ORDER), h, w)


def cnn_input(maps: dict[str, np.ndarray], cnn_dims) -> np.ndarray:
    """Downsample each modality's map to ``cnn_dims`` and fuse them in MRI, CT order."""
    return early_fuse([resample_array(_as_array(maps[m]), cnn_dims) for m in FUSION_ORDER]).data


def complete_modalities(
    subject: HdiCandidate, donors: Sequence[HdiCandidate], use_label: bool = False
) -> tuple[dict[str, np.ndarray], str | None, str | None]:
    """Subject's Jacobian maps with any missing modality filled by hot-deck imputation.

    Returns ``(maps, donor_id, imputed_modality)``.
    """
    present = [m for m in FUSION_ORDER if m in subject.sources]
    if not present:
        raise NoModalities(f"{subject.id}: no modality available")
    maps = {m: subject.sources[m] for m in present}
    donor_id = imputed = None
    for m in FUSION_ORDER:
        if m not in maps:
            donor_id, maps[m] = impute_hdi(subject, donors, m, use_label=use_label)
            imputed = m
    return maps, donor_id, imputed


def model_probabilities(models: EnsembleModels, maps: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = cnn_input(maps, models.cnn_dims)[None]
    p_cnn = cnn_forward(models.cnn, x, "eval")[0]
    mask = models.mask if models.mask is not None else np.ones(_as_array(maps["MRI"]).shape, bool)
    f_mri = extract_features(maps["MRI"], mask, models.extractor)
    f_ct = extract_features(maps["CT"], mask, models.extractor)
    p_mri = rf_predict_proba(models.rf_mri, f_mri)[0]
    p_ct = rf_predict_proba(models.rf_ct, f_ct)[0]
    return p_cnn, p_mri, p_ct


def predict_subject(
    subject: HdiCandidate, models: EnsembleModels, donors: Sequence[HdiCandidate], actual: int | None = None
) -> EnsemblePrediction:
    """Impute, run all three models and average their probabilities.

    Test-time imputation ignores the label, which is unknown at prediction time.
    """
    maps, donor_id, imputed = complete_modalities(subject, donors, use_label=False)
    p_cnn, p_mri, p_ct = model_probabilities(models, maps)
    p_aggr, cls = late_fuse([p_cnn, p_mri, p_ct])
    return EnsemblePrediction(subject.id, p_cnn, p_mri, p_ct, p_aggr, cls, donor_id, imputed, actual)
