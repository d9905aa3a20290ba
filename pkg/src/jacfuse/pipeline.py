"""File-based pipeline stages: phantom, preprocess, register, jacobian, train, evaluate.

Each stage reads the previous stage's files under the output directory and
writes its own next to them. A completed stage leaves a marker holding the
config hash, and ``run_log.json`` records per-stage input and output digests.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import PipelineConfig
from .dataset import (
    CLASS_NAMES,
    MODALITIES,
    DatasetManifest,
    HdiCandidate,
    MomentSignature,
    adasyn_oversample,
    class_weights,
    compute_moments,
    select_sessions,
    stratified_kfold,
    stratified_split,
)
from .errors import CheckpointError, JacfuseError, NoDonorAvailable
from .evaluate import (
    ablation_reports,
    format_table,
    metrics_report,
    write_class_bars,
    write_curve,
    write_report,
)
from .fusion import EnsembleModels, cnn_input, complete_modalities, late_fuse, write_predictions
from .jacobian import deformation_summary, jacobian_determinant_map
from .models.checkpoint import load_cnn, load_forest, save_cnn, save_forest
from .models.cnn import Cnn3dModel, TrainConfig, cnn_train
from .models.features import FeatureExtractor, extract_features
from .models.forest import ForestConfig, rf_train, rf_tree_curve
from .phantom import build_template, generate_dataset
from .preprocess import PreprocessConfig, bias_correct, brain_extract, contrast_stretch, head_mask
from .registration import (
    DisplacementField,
    RegistrationResult,
    SubjectVolumes,
    choose_mri_donor,
    register_ct,
    register_mri,
)
from .volume import Mask3D, Volume3D, read_nifti, read_nifti_array, write_nifti, write_nifti_array

log = logging.getLogger(__name__)

STAGES = ("phantom", "preprocess", "register", "jacobian", "train", "evaluate")


class StageError(JacfuseError):
    """A stage failed; the message names the subject or file involved."""


# ------------------------------------------------------------- workspace


@dataclass(frozen=True)
class Workspace:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def manifest(self) -> Path:
        return self.data / "manifest.json"

    @property
    def selection(self) -> Path:
        return self.root / "selection.json"

    @property
    def template(self) -> Path:
        return self.root / "template" / "template.nii"

    @property
    def template_mask(self) -> Path:
        return self.root / "template" / "template_mask.nii"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def run_log(self) -> Path:
        return self.root / "run_log.json"

    def marker(self, stage: str) -> Path:
        return self.root / "stages" / f"{stage}.done"

    def stage_file(self, rel: str, suffix: str) -> Path:
        """``data/sub/sub_ses-1_mri.nii`` -> ``data/sub/sub_ses-1_mri{suffix}.nii``."""
        p = self.data / rel
        return p.with_name(p.stem + suffix + ".nii")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(ws: Workspace, paths: Sequence[Path]) -> dict[str, str]:
    return {str(Path(p).relative_to(ws.root)): sha256_file(Path(p)) for p in sorted(set(paths)) if Path(p).is_file()}


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise StageError(f"missing input file {path}") from e


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map, in worker processes when ``jobs > 1``."""
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _read_volume(path: Path) -> Volume3D:
    if not path.is_file():
        raise StageError(f"missing input file {path}")
    return read_nifti(path)[0]


def _read_mask(path: Path) -> np.ndarray:
    return _read_volume(path).data > 0.5


def _fresh(outputs: Sequence[Path], force: bool) -> bool:
    """True when every output exists and no rerun is forced."""
    return not force and all(p.is_file() for p in outputs)


# --------------------------------------------------------------- selection


@dataclass
class Selected:
    id: str
    label: int
    cdr: float
    paths: dict[str, str]


def load_selection(ws: Workspace) -> tuple[list[Selected], set[str], set[str]]:
    doc = _read_json(ws.selection)
    subjects = [Selected(s["id"], s["label"], s["cdr"], {m: p for m, p in s["paths"].items() if p}) for s in doc["subjects"]]
    return subjects, set(doc["train"]), set(doc["test"])


# ----------------------------------------------------------------- stages


def stage_phantom(cfg: PipelineConfig, ws: Workspace, force: bool = False, jobs: int = 1):
    d = cfg.dataset
    manifest = generate_dataset(d.n_per_class, d.missing_fraction, cfg.seed, ws.data, cfg.phantom)
    outputs = [ws.manifest] + [ws.data / s.path for r in manifest.subjects for s in r.sessions]
    return [], outputs


def preprocess_volume(vol: Volume3D, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[Volume3D, Mask3D]:
    """Bias correction inside the head, contrast stretch, brain extraction."""
    corrected = bias_correct(vol, head_mask(vol, cfg), cfg)
    return brain_extract(contrast_stretch(corrected, cfg), cfg)


def _preprocess_job(args):
    sid, src, out, mask_out, cfg = args
    try:
        brain, mask = preprocess_volume(_read_volume(Path(src)), cfg)
    except JacfuseError as e:
        raise StageError(f"{sid}: {e}") from e
    write_nifti(brain, out)
    write_nifti_array(mask.data.astype(np.float64), mask_out, brain.spacing, brain.affine, datatype=2)
    return sid


def stage_preprocess(cfg: PipelineConfig, ws: Workspace, force: bool = False, jobs: int = 1):
    if not ws.manifest.is_file():
        raise StageError(f"missing input file {ws.manifest}")
    manifest = DatasetManifest.load(ws.manifest)
    records = [select_sessions(r, cfg.seed) for r in manifest.subjects]
    labels = [int(r.class_label) for r in records]
    train, test = stratified_split(labels, cfg.dataset.test_fraction, cfg.seed)
    subjects = []
    for r in records:
        subjects.append(
            {
                "id": r.id,
                "label": int(r.class_label),
                "cdr": r.cdr,
                "paths": {m: (r.selected(m).path if r.selected(m) else None) for m in MODALITIES},
            }
        )
    _write_json(
        ws.selection,
        {"subjects": subjects, "train": [records[i].id for i in train], "test": [records[i].id for i in test], "seed": cfg.seed},
    )
    jobs_list, inputs, outputs = [], [ws.manifest], [ws.selection]
    for s in subjects:
        for m, rel in s["paths"].items():
            if rel is None:
                continue
            src = ws.data / rel
            if not src.is_file():
                raise StageError(f"{s['id']}: missing input file {src}")
            out, mask_out = ws.stage_file(rel, "_pp"), ws.stage_file(rel, "_mask")
            inputs.append(src)
            outputs += [out, mask_out]
            if not _fresh([out, mask_out], force):
                jobs_list.append((s["id"], str(src), str(out), str(mask_out), cfg.preprocess))
    _pmap(_preprocess_job, jobs_list, jobs)
    return inputs, outputs


def _write_field(field: DisplacementField, path: Path) -> None:
    write_nifti_array(np.moveaxis(field.data, 0, -1), path, field.spacing, field.affine)


def _read_field(path: Path) -> DisplacementField:
    if not path.is_file():
        raise StageError(f"missing input file {path}")
    data, hdr = read_nifti_array(path)
    return DisplacementField(np.moveaxis(data, -1, 0), tuple(float(s) for s in hdr.pixdim[1:4]))


def _subject_volumes(ws: Workspace, s: Selected, label) -> SubjectVolumes:
    sv = SubjectVolumes(s.id, label)
    for m, rel in s.paths.items():
        vol = _read_volume(ws.stage_file(rel, "_pp"))
        mask = _read_mask(ws.stage_file(rel, "_mask"))
        if m == "MRI":
            sv.mri, sv.mri_mask = vol, mask
        else:
            sv.ct, sv.ct_mask = vol, mask
    return sv


def _diag_clean(d: dict) -> dict:
    return {k: (v if not isinstance(v, (list, tuple)) else [float(x) for x in v]) for k, v in d.items()}


def _register_mri_job(args):
    ws, s, params = args
    sv = _subject_volumes(ws, s, None)
    try:
        res = register_mri(sv, _read_volume(ws.template), params)
    except JacfuseError as e:
        raise StageError(f"{s.id}: {e}") from e
    write_nifti(res.registered_mri, ws.stage_file(s.paths["MRI"], "_reg"))
    _write_field(res.mri_field, ws.stage_file(s.paths["MRI"], "_def"))
    return _diag_clean(res.diagnostics["mri"])


def _register_ct_job(args):
    ws, s, ref, params = args
    sv = _subject_volumes(ws, s, None)
    ref_sv = _subject_volumes(ws, ref, None)
    registered_ref = _read_volume(ws.stage_file(ref.paths["MRI"], "_reg"))
    res = RegistrationResult(s.id)
    try:
        register_ct(sv, ref_sv, registered_ref, params, res)
    except JacfuseError as e:
        raise StageError(f"{s.id}: {e}") from e
    write_nifti(res.registered_ct, ws.stage_file(s.paths["CT"], "_reg"))
    _write_field(res.ct_field, ws.stage_file(s.paths["CT"], "_def"))
    return {**_diag_clean(res.diagnostics["ct"]), "reference": ref.id}


def stage_register(cfg: PipelineConfig, ws: Workspace, force: bool = False, jobs: int = 1):
    """Template from training normals, MRIs to template, CTs to registered MRIs.

    A CT-only subject borrows a training subject's registered MRI as its
    reference. Training subjects match donors within their own class; test
    subjects match on CT moments alone.
    """
    subjects, train, test = load_selection(ws)
    params = cfg.registration
    inputs = [ws.selection] + [ws.stage_file(rel, sfx) for s in subjects for rel in s.paths.values() for sfx in ("_pp", "_mask")]
    if force or not ws.template.is_file() or not ws.template_mask.is_file():
        normals = [_read_volume(ws.stage_file(s.paths["MRI"], "_pp")) for s in subjects if s.id in train and s.label == 0 and "MRI" in s.paths]
        if len(normals) < 2:
            raise StageError(f"template needs two training normals with MRI, found {len(normals)}")
        history: list[float] = []
        template = build_template(normals, cfg.dataset.template_iterations, params, history)
        ws.template.parent.mkdir(parents=True, exist_ok=True)
        write_nifti(template, ws.template)
        _, tmask = brain_extract(template, cfg.preprocess)
        write_nifti_array(tmask.data.astype(np.float64), ws.template_mask, template.spacing, template.affine, datatype=2)
        _write_json(ws.template.parent / "template_history.json", {"mean_ssd_per_iteration": history})
    diag_path = ws.root / "registration.json"
    diag = json.loads(diag_path.read_text()) if diag_path.is_file() and not force else {}

    mri_subjects = [s for s in subjects if "MRI" in s.paths]
    todo = [s for s in mri_subjects if not _fresh([ws.stage_file(s.paths["MRI"], sfx) for sfx in ("_reg", "_def")], force)]
    for s, d in zip(todo, _pmap(_register_mri_job, [(ws, s, params) for s in todo], jobs)):
        diag.setdefault(s.id, {})["MRI"] = d

    by_id = {s.id: s for s in subjects}
    pool = [s for s in subjects if s.id in train and "MRI" in s.paths and "CT" in s.paths]
    pool_volumes = None
    ct_jobs = []
    for s in subjects:
        if "CT" not in s.paths:
            continue
        outs = [ws.stage_file(s.paths["CT"], sfx) for sfx in ("_reg", "_def")]
        if _fresh(outs, force) and "CT" in diag.get(s.id, {}):
            continue
        if "MRI" in s.paths:
            ref = s
        else:
            if pool_volumes is None:
                pool_volumes = [_subject_volumes(ws, p, p.label) for p in pool]
            label = s.label if s.id in train else None
            try:
                ref = by_id[choose_mri_donor(_subject_volumes(ws, s, label), pool_volumes).id]
            except NoDonorAvailable as e:
                raise StageError(f"{s.id}: {e}") from e
            log.info("%s: CT registered against training donor %s", s.id, ref.id)
        ct_jobs.append((ws, s, ref, params))
    for job, d in zip(ct_jobs, _pmap(_register_ct_job, ct_jobs, jobs)):
        diag.setdefault(job[1].id, {})["CT"] = d
    _write_json(diag_path, diag)
    outputs = [ws.template, ws.template_mask, diag_path]
    outputs += [ws.stage_file(rel, sfx) for s in subjects for rel in s.paths.values() for sfx in ("_reg", "_def")]
    return inputs, outputs


def _jacobian_job(args):
    ws, sid, rel, eps, tmask = args
    field = _read_field(ws.stage_file(rel, "_def"))
    jmap = jacobian_determinant_map(field, source=sid)
    write_nifti(jmap.volume, ws.stage_file(rel, "_jd"))
    sig = compute_moments(jmap.data, tmask)
    return {"skewness": sig.skewness, "kurtosis": sig.kurtosis, **deformation_summary(jmap, tmask, eps)}


def stage_jacobian(cfg: PipelineConfig, ws: Workspace, force: bool = False, jobs: int = 1):
    subjects, _, _ = load_selection(ws)
    tmask = _read_mask(ws.template_mask)
    summary_path = ws.root / "jacobian.json"
    summary = json.loads(summary_path.read_text()) if summary_path.is_file() and not force else {}
    todo = []
    for s in subjects:
        for m, rel in s.paths.items():
            if not _fresh([ws.stage_file(rel, "_jd")], force) or m not in summary.get(s.id, {}):
                todo.append((s.id, m, rel))
    results = _pmap(_jacobian_job, [(ws, sid, rel, cfg.jacobian.no_change_eps, tmask) for sid, _, rel in todo], jobs)
    for (sid, m, _), r in zip(todo, results):
        summary.setdefault(sid, {})[m] = r
    _write_json(summary_path, summary)
    inputs = [ws.template_mask] + [ws.stage_file(rel, "_def") for s in subjects for rel in s.paths.values()]
    outputs = [summary_path] + [ws.stage_file(rel, "_jd") for s in subjects for rel in s.paths.values()]
    return inputs, outputs


# ----------------------------------------------------------------- learning


@dataclass
class Arrays:
    f_mri: np.ndarray
    f_ct: np.ndarray
    cnn_x: np.ndarray


class FeatureCache:
    """Features and CNN inputs for (subject, donor) pairs, computed once."""

    def __init__(self, extractor: FeatureExtractor, mask: np.ndarray, cnn_dims):
        self.extractor, self.mask, self.cnn_dims = extractor, mask, tuple(cnn_dims)
        self._cache: dict[tuple, Arrays] = {}

    def get(self, key: tuple, maps: dict[str, np.ndarray]) -> Arrays:
        if key not in self._cache:
            self._cache[key] = Arrays(
                extract_features(maps["MRI"], self.mask, self.extractor),
                extract_features(maps["CT"], self.mask, self.extractor),
                cnn_input(maps, self.cnn_dims),
            )
        return self._cache[key]


def load_candidates(ws: Workspace, subjects: Sequence[Selected], known_labels: set[str]) -> dict[str, HdiCandidate]:
    """Jacobian maps and moment signatures per subject; labels only for ``known_labels``."""
    summary = _read_json(ws.root / "jacobian.json")
    out = {}
    for s in subjects:
        sources, sigs = {}, {}
        for m, rel in s.paths.items():
            sources[m] = _read_volume(ws.stage_file(rel, "_jd")).data
            sigs[m] = MomentSignature(summary[s.id][m]["skewness"], summary[s.id][m]["kurtosis"])
        out[s.id] = HdiCandidate(s.id, s.label if s.id in known_labels else None, sigs, sources)
    return out


def _completed(cand: HdiCandidate, donors: Sequence[HdiCandidate], use_label: bool, cache: FeatureCache):
    try:
        maps, donor_id, imputed = complete_modalities(cand, donors, use_label=use_label)
    except NoDonorAvailable:
        if not use_label:
            raise
        # no same-class subject carries the missing modality; widen to every donor
        log.warning("%s: no same-class donor, using nearest donor of any class", cand.id)
        maps, donor_id, imputed = complete_modalities(cand, donors, use_label=False)
    return cache.get((cand.id, donor_id), maps), donor_id, imputed


@dataclass
class Ensemble:
    models: EnsembleModels
    cnn_curve: list[dict]


def fit_ensemble(
    arrays: Sequence[Arrays],
    labels: np.ndarray,
    cfg: PipelineConfig,
    seed: int,
    extractor: FeatureExtractor,
    mask: np.ndarray,
    val: tuple[Sequence[Arrays], np.ndarray] | None = None,
    jobs: int = 1,
) -> Ensemble:
    """ADASYN-balanced training of the CNN and both forests on one training set.

    Oversampling runs in the joint RF feature space; each synthetic CNN input
    interpolates the same parent pair with the same coefficient.
    """
    mc, dc = cfg.models, cfg.dataset
    y = np.asarray(labels, dtype=np.int64)
    feats = np.hstack([np.stack([a.f_mri for a in arrays]), np.stack([a.f_ct for a in arrays])])
    cnn_x = np.stack([a.cnn_x for a in arrays])
    counts = np.bincount(y, minlength=4)
    k = max(1, min(dc.adasyn_k, int(counts[counts > 0].min()) - 1))
    scale = feats.std(axis=0)
    scale[scale == 0] = 1.0
    _, y_aug, parents = adasyn_oversample(feats / scale, y, k=k, beta=dc.adasyn_beta, seed=seed, return_parents=True)
    if parents:
        i, z, lam = (np.array(v) for v in zip(*parents))
        feats = np.vstack([feats, feats[i] + lam[:, None] * (feats[z] - feats[i])])
        cnn_x = np.concatenate([cnn_x, cnn_x[i] + lam[:, None, None, None] * (cnn_x[z] - cnn_x[i])])
    weights = class_weights(y)
    nf = feats.shape[1] // 2
    cnn = Cnn3dModel(cnn_x.shape[1:], tuple(mc.cnn_filters), mc.dropout, seed=seed)
    tc = TrainConfig(learning_rate=mc.learning_rate, batch_size=mc.batch_size, epochs=mc.epochs, seed=seed)
    x_val = y_val = None
    if val is not None:
        x_val, y_val = np.stack([a.cnn_x for a in val[0]]), np.asarray(val[1])
    cnn, curve = cnn_train(cnn, cnn_x, y_aug, tc, weights, x_val, y_val)
    rf_mri = rf_train(feats[:, :nf], y_aug, ForestConfig(n_trees=mc.n_trees, seed=seed), jobs=jobs)
    rf_ct = rf_train(feats[:, nf:], y_aug, ForestConfig(n_trees=mc.n_trees, seed=seed + 7919), jobs=jobs)
    return Ensemble(EnsembleModels(cnn, rf_mri, rf_ct, extractor, mask), curve)


def _predict_arrays(models: EnsembleModels, arr: Arrays):
    from .models.cnn import cnn_forward
    from .models.forest import rf_predict_proba

    p_cnn = cnn_forward(models.cnn, arr.cnn_x[None], "eval")[0]
    p_mri = rf_predict_proba(models.rf_mri, arr.f_mri)[0]
    p_ct = rf_predict_proba(models.rf_ct, arr.f_ct)[0]
    return p_cnn, p_mri, p_ct


def _fold_metrics(models: EnsembleModels, arrays: Sequence[Arrays], labels) -> dict:
    preds = {"CNN": [], "RF-CT": [], "RF-MRI": [], "ELF": []}
    for arr in arrays:
        p_cnn, p_mri, p_ct = _predict_arrays(models, arr)
        preds["CNN"].append(int(np.argmax(p_cnn)))
        preds["RF-MRI"].append(int(np.argmax(p_mri)))
        preds["RF-CT"].append(int(np.argmax(p_ct)))
        preds["ELF"].append(late_fuse([p_cnn, p_mri, p_ct])[1])
    out = {}
    for name, p in preds.items():
        r = metrics_report(name, labels, p)
        out[name] = {"accuracy": r.accuracy, "macro_sensitivity": r.macro_sensitivity, "macro_specificity": r.macro_specificity}
    return out


def _extractor(cfg: PipelineConfig) -> FeatureExtractor:
    return FeatureExtractor(cfg.models.feature_filters, cfg.seed)


def stage_train(cfg: PipelineConfig, ws: Workspace, force: bool = False, jobs: int = 1):
    """Stratified k-fold cross-validation on the training split, then a final fit on all of it."""
    subjects, train, _ = load_selection(ws)
    tsubj = [s for s in subjects if s.id in train]
    cands = load_candidates(ws, tsubj, train)
    tmask = _read_mask(ws.template_mask)
    extractor = _extractor(cfg)
    cache = FeatureCache(extractor, tmask, cfg.models.cnn_dims)
    ids = [s.id for s in tsubj]
    y = np.array([s.label for s in tsubj], dtype=np.int64)
    genuine = list(cands.values())
    # training subjects borrow from same-class training donors
    completed = {sid: _completed(cands[sid], genuine, True, cache) for sid in ids}
    ws.models.mkdir(parents=True, exist_ok=True)
    curves_dir = ws.models / "curves"
    curves_dir.mkdir(exist_ok=True)

    k = cfg.dataset.folds
    fold_rows = []
    if k > 1:
        for f, val_idx in enumerate(stratified_kfold(y, k, cfg.seed)):
            tr_idx = np.setdiff1d(np.arange(len(ids)), val_idx)
            tr_ids = {ids[i] for i in tr_idx}
            donors = [cands[i] for i in ids if i in tr_ids]
            val_arrays = []
            for i in val_idx:
                # validation subjects are imputed like test subjects: training-fold donors, no label
                c = cands[ids[i]]
                blind = HdiCandidate(c.id, None, c.signatures, c.sources)
                val_arrays.append(_completed(blind, donors, False, cache)[0])
            ens = fit_ensemble(
                [completed[ids[i]][0] for i in tr_idx], y[tr_idx], cfg, cfg.seed * 1000 + f, extractor, tmask, (val_arrays, y[val_idx]), jobs
            )
            write_curve(ens.cnn_curve, curves_dir / f"cnn_fold{f}.csv")
            for name, rf, attr in (("rf_mri", ens.models.rf_mri, "f_mri"), ("rf_ct", ens.models.rf_ct, "f_ct")):
                fv = np.stack([getattr(a, attr) for a in val_arrays])
                write_curve(rf_tree_curve(rf, fv, y[val_idx]), curves_dir / f"{name}_fold{f}.csv")
            fold_rows.append({"fold": f, "n_train": int(len(tr_idx)), "n_val": int(len(val_idx)), **_fold_metrics(ens.models, val_arrays, y[val_idx])})
            log.info("fold %d: ELF accuracy %.3f", f, fold_rows[-1]["ELF"]["accuracy"])

    final = fit_ensemble([completed[i][0] for i in ids], y, cfg, cfg.seed * 1000 + 999, extractor, tmask, jobs=jobs)
    save_cnn(final.models.cnn, ws.models / "cnn.elf")
    save_forest(final.models.rf_mri, ws.models / "rf_mri.elf")
    save_forest(final.models.rf_ct, ws.models / "rf_ct.elf")
    write_curve(final.cnn_curve, curves_dir / "cnn_final.csv")
    means = {}
    if fold_rows:
        for name in ("CNN", "RF-CT", "RF-MRI", "ELF"):
            means[name] = {m: float(np.mean([r[name][m] for r in fold_rows])) for m in fold_rows[0][name]}
    summary = {
        "folds": k,
        "fold_metrics": fold_rows,
        "fold_means": means,
        "train_ids": ids,
        "train_imputation": {sid: completed[sid][1] for sid in ids if completed[sid][1]},
        "class_weights": class_weights(y).tolist(),
    }
    _write_json(ws.models / "train_summary.json", summary)
    inputs = [ws.selection, ws.template_mask] + [ws.stage_file(rel, "_jd") for s in tsubj for rel in s.paths.values()]
    outputs = sorted(ws.models.rglob("*.*"))
    return inputs, outputs


def load_models(cfg: PipelineConfig, ws: Workspace) -> EnsembleModels:
    paths = [ws.models / n for n in ("cnn.elf", "rf_mri.elf", "rf_ct.elf")]
    for p in paths:
        if not p.is_file():
            raise CheckpointError(f"missing model checkpoint {p}")
    return EnsembleModels(load_cnn(paths[0]), load_forest(paths[1]), load_forest(paths[2]), _extractor(cfg), _read_mask(ws.template_mask))


def stage_evaluate(cfg: PipelineConfig, ws: Workspace, force: bool = False, jobs: int = 1):
    """Held-out predictions, the four-row ablation table, per-class bars and figures."""
    from .fusion import EnsemblePrediction

    subjects, train, test = load_selection(ws)
    models = load_models(cfg, ws)
    train_c = load_candidates(ws, [s for s in subjects if s.id in train], train)
    test_c = load_candidates(ws, [s for s in subjects if s.id in test], set())
    donors = list(train_c.values())
    cache = FeatureCache(models.extractor, models.mask, models.cnn_dims)
    preds = []
    for s in subjects:
        if s.id not in test:
            continue
        arr, donor_id, imputed = _completed(test_c[s.id], donors, False, cache)
        p_cnn, p_mri, p_ct = _predict_arrays(models, arr)
        p_aggr, cls = late_fuse([p_cnn, p_mri, p_ct])
        preds.append(EnsemblePrediction(s.id, p_cnn, p_mri, p_ct, p_aggr, cls, donor_id, imputed, s.label))
    reports = ablation_reports(preds)
    ws.reports.mkdir(parents=True, exist_ok=True)
    write_predictions(preds, ws.reports / "predictions.jsonl")
    fusion_err = max(float(np.max(np.abs(p.p_aggr - (p.p_cnn + p.p_rf_mri + p.p_rf_ct) / 3))) for p in preds)
    provenance = {p.id: {"donor_id": p.donor_id, "imputed": p.imputed, "donor_in_train": p.donor_id in train} for p in preds if p.donor_id}
    write_report(
        reports,
        ws.reports / "metrics.json",
        seed=cfg.seed,
        config_hash=cfg.digest(),
        n_test=len(preds),
        max_fusion_error=fusion_err,
        imputation=provenance,
        class_names=list(CLASS_NAMES),
    )
    (ws.reports / "table.txt").write_text(format_table(reports))
    write_class_bars(reports[-1], ws.reports / "class_bars.csv")
    outputs = [ws.reports / n for n in ("predictions.jsonl", "metrics.json", "table.txt", "class_bars.csv")]
    if cfg.evaluate.figures:
        outputs += render_figures(ws, reports)
    inputs = [ws.models / n for n in ("cnn.elf", "rf_mri.elf", "rf_ct.elf")]
    return inputs, outputs


def render_figures(ws: Workspace, reports) -> list[Path]:
    from . import plotting

    fig_dir = ws.reports / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    out = []
    elf = reports[-1]
    plotting.plot_class_bars(elf, fig_dir / "elf_class_rates.png")
    plotting.plot_confusion(elf.confusion, fig_dir / "elf_confusion.png", "ELF")
    plotting.plot_ablation(reports, fig_dir / "ablation.png")
    out += [fig_dir / "elf_class_rates.png", fig_dir / "elf_confusion.png", fig_dir / "ablation.png"]
    curves_dir = ws.models / "curves"
    for prefix, xlabel in (("cnn", "epoch"), ("rf_mri", "trees"), ("rf_ct", "trees")):
        files = sorted(curves_dir.glob(f"{prefix}_*.csv"))
        if not files:
            continue
        curves = {}
        for p in files:
            rows = np.genfromtxt(p, delimiter=",", names=True)
            curves[p.stem.split("_")[-1]] = [dict(zip(rows.dtype.names, map(float, r))) for r in np.atleast_1d(rows)]
        target = fig_dir / f"{prefix}_curves.png"
        plotting.plot_learning_curves(curves, target, xlabel)
        out.append(target)
    return out


# ----------------------------------------------------------------- driver

STAGE_FUNCS = {
    "phantom": stage_phantom,
    "preprocess": stage_preprocess,
    "register": stage_register,
    "jacobian": stage_jacobian,
    "train": stage_train,
    "evaluate": stage_evaluate,
}


def run_stage(name: str, cfg: PipelineConfig, force: bool = False, jobs: int = 1) -> bool:
    """Run one stage unless its marker matches the current config. Returns True if it ran."""
    ws = Workspace(Path(cfg.out_dir))
    ws.root.mkdir(parents=True, exist_ok=True)
    marker = ws.marker(name)
    chash = cfg.digest()
    run_log = json.loads(ws.run_log.read_text()) if ws.run_log.is_file() else {}
    run_log.update({"config_hash": chash, "seed": cfg.seed, "config": cfg.to_dict()})
    stages = run_log.setdefault("stages", {})
    if not force and marker.is_file() and json.loads(marker.read_text()).get("config_hash") == chash:
        log.info("stage %s already complete, skipping", name)
        stages.setdefault(name, {})["last_status"] = "skipped"
        _write_json(ws.run_log, run_log)
        return False
    start = time.time()
    log.info("stage %s", name)
    inputs, outputs = STAGE_FUNCS[name](cfg, ws, force=force, jobs=jobs)
    stages[name] = {
        "last_status": "ran",
        "seconds": round(time.time() - start, 3),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "inputs": _digests(ws, inputs),
        "outputs": _digests(ws, outputs),
    }
    _write_json(ws.run_log, run_log)
    _write_json(marker, {"config_hash": chash})
    return True


def run_all(cfg: PipelineConfig, force: bool = False, jobs: int = 1) -> dict:
    """Every stage in order; returns the evaluation metrics document."""
    for name in STAGES:
        run_stage(name, cfg, force=force, jobs=jobs)
    return json.loads((Workspace(Path(cfg.out_dir)).reports / "metrics.json").read_text())
