"""Synthetic MRI/CT head phantoms with class-dependent atrophy.

The severity knobs are benchmark settings chosen to make the four classes
separable at 48^3 while leaving jitter and noise to blur them. They carry no
clinical meaning.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import CDR_BY_CLASS, ClassLabel, DatasetManifest, Session, SubjectRecord
from .errors import TooFewSubjects
from .volume import Volume3D, grid_coords, write_nifti

# tissue labels
BACKGROUND, SKULL, CSF, GM, WM, VENTRICLE, NUCLEUS = range(7)

MRI_INTENSITY = {BACKGROUND: 0.0, SKULL: 0.9, CSF: 0.15, GM: 0.55, WM: 0.8, VENTRICLE: 0.15, NUCLEUS: 0.55}


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (48, 48, 48)
    ventricle_expansion: tuple[float, ...] = (1.00, 1.15, 1.30, 1.50)
    cortical_thinning: tuple[float, ...] = (1.00, 0.97, 0.93, 0.88)
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.3
    skull_intensity: float = 0.9
    # piecewise-linear lookup from clean MRI intensity to CT intensity
    ct_remap_in: tuple[float, ...] = (0.0, 0.15, 0.55, 0.8, 0.9)
    ct_remap_out: tuple[float, ...] = (0.0, 0.12, 0.42, 0.5, 1.0)
    max_rotation_deg: float = 3.0
    max_translation: float = 2.0
    partial_volume_sigma: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if any(d % 4 for d in self.dims):
            raise ValueError(f"phantom dims must be divisible by 4, got {self.dims}")
        if any(b <= a for a, b in zip(self.ventricle_expansion, self.ventricle_expansion[1:])):
            raise ValueError("ventricle expansion must increase strictly with severity")


@dataclass
class PhantomSubject:
    mri: Volume3D
    ct: Volume3D
    brain_mask: np.ndarray
    params: dict = field(default_factory=dict)


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _ellipsoid(u: np.ndarray, center, radii) -> np.ndarray:
    r = np.asarray(radii, dtype=float).reshape(3, 1, 1, 1)
    c = np.asarray(center, dtype=float).reshape(3, 1, 1, 1)
    return (((u - c) / r) ** 2).sum(axis=0) <= 1.0


def label_map(dims, expansion: float, thinning: float, rotation=None, translation=None) -> np.ndarray:
    """Tissue labels of the canonical head, optionally under a rigid jitter.

    Voxel x samples the canonical geometry at R^T (x - c - t) + c.
    """
    dims = tuple(dims)
    n = np.asarray(dims, dtype=float)
    c = (n - 1) / 2
    x = grid_coords(dims)
    if rotation is not None:
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        rel = x - (c + t).reshape(3, 1, 1, 1)
        u = np.einsum("ji,j...->i...", rotation, rel) + c.reshape(3, 1, 1, 1)
    else:
        u = x
    skull_outer = np.array([0.46, 0.48, 0.42]) * n
    skull_inner = skull_outer - 0.04 * n
    brain_max = skull_inner - 0.07 * n
    cortex = 0.07 * n
    wm_radii = brain_max - cortex
    brain_radii = wm_radii + cortex * thinning
    labels = np.zeros(dims, dtype=np.int8)
    labels[_ellipsoid(u, c, skull_outer)] = SKULL
    labels[_ellipsoid(u, c, skull_inner)] = CSF
    labels[_ellipsoid(u, c, brain_radii)] = GM
    labels[_ellipsoid(u, c, wm_radii)] = WM
    offset = np.array([0.2, 0.0, 0.0]) * n
    nuc_radii = np.array([0.06, 0.08, 0.06]) * n
    labels[_ellipsoid(u, c - offset, nuc_radii)] = NUCLEUS
    labels[_ellipsoid(u, c + offset, nuc_radii)] = NUCLEUS
    vent_radii = np.array([0.08, 0.13, 0.07]) * n * expansion
    labels[_ellipsoid(u, c, vent_radii)] = VENTRICLE
    return labels


def _bias_field(dims, rng, amplitude: float) -> np.ndarray:
    axes = [np.linspace(-1, 1, d) for d in dims]
    u = np.stack(np.meshgrid(*axes, indexing="ij"))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    linear = np.einsum("i,i...->...", direction, u) / np.sqrt(3)
    quad = (u[0] ** 2 - u[1] ** 2) * rng.uniform(-1, 1)
    poly = 0.7 * linear + 0.3 * quad
    return np.exp(amplitude * poly)


def generate_subject(label: int | ClassLabel, seed: int, cfg: PhantomConfig = PhantomConfig()) -> PhantomSubject:
    """One subject's MRI and CT sharing a single jittered geometry."""
    label = ClassLabel(int(label))
    rng = np.random.default_rng([int(seed), 7919])
    expansion = cfg.ventricle_expansion[label]
    thinning = cfg.cortical_thinning[label]
    axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0.0, cfg.max_rotation_deg))
    rotation = _rotation(axis, angle)
    direction = rng.normal(size=3)
    translation = direction / np.linalg.norm(direction) * rng.uniform(0.0, cfg.max_translation)
    labels = label_map(cfg.dims, expansion, thinning, rotation, translation)

    lut = np.array([MRI_INTENSITY[i] for i in range(7)])
    lut[SKULL] = cfg.skull_intensity
    clean = lut[labels]
    ct_clean = np.interp(clean, cfg.ct_remap_in, cfg.ct_remap_out)
    if cfg.partial_volume_sigma > 0:
        clean = ndimage.gaussian_filter(clean, cfg.partial_volume_sigma, mode="constant")
        ct_clean = ndimage.gaussian_filter(ct_clean, cfg.partial_volume_sigma, mode="constant")
    bias = _bias_field(cfg.dims, rng, cfg.bias_amplitude)
    mri = np.clip(clean * bias + rng.normal(0.0, cfg.noise_sigma, cfg.dims), 0.0, 1.2)
    ct = np.clip(ct_clean + rng.normal(0.0, cfg.noise_sigma, cfg.dims), 0.0, 1.2)
    brain = np.isin(labels, (GM, WM, VENTRICLE, NUCLEUS))
    params = {
        "class": int(label),
        "expansion": expansion,
        "thinning": thinning,
        "rotation": rotation,
        "translation": translation,
        "labels": labels,
        "ventricle_voxels": int((labels == VENTRICLE).sum()),
    }
    return PhantomSubject(Volume3D(mri), Volume3D(ct), brain, params)


def generate_dataset(
    n_per_class: int,
    missing_fraction: float,
    seed: int,
    out_dir: str | os.PathLike,
    cfg: PhantomConfig = PhantomConfig(),
) -> DatasetManifest:
    """Write phantom sessions as NIfTI plus ``manifest.json`` under ``out_dir``.

    Every subject gets one or two sessions per modality. A seeded
    ``round(missing_fraction * N)`` subjects lose all sessions of one
    randomly chosen modality.
    """
    if n_per_class < 2:
        raise TooFewSubjects(f"n_per_class must be >= 2, got {n_per_class}")
    if not 0 <= missing_fraction < 1:
        raise ValueError("missing_fraction must lie in [0, 1)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([int(seed), 104729])
    n_total = 4 * n_per_class
    n_missing = int(np.floor(missing_fraction * n_total + 0.5))
    missing_idx = set(rng.choice(n_total, size=n_missing, replace=False).tolist())
    subjects = []
    for i in range(n_total):
        label = ClassLabel(i // n_per_class)
        sid = f"sub-{i:03d}"
        cdrs = CDR_BY_CLASS[label]
        cdr = cdrs[(i % n_per_class) % len(cdrs)]
        drop = None
        if i in missing_idx:
            drop = "MRI" if rng.random() < 0.5 else "CT"
        sessions = []
        subj_dir = out / sid
        subj_dir.mkdir(exist_ok=True)
        n_sessions = int(rng.integers(1, 3))
        times = np.sort(rng.choice(3000, size=2 * n_sessions, replace=False))
        for s in range(n_sessions):
            ph = generate_subject(label, seed=int(seed) * 100003 + i * 17 + s, cfg=cfg)
            for modality, vol, t in (("MRI", ph.mri, times[2 * s]), ("CT", ph.ct, times[2 * s + 1])):
                if modality == drop:
                    continue
                rel = f"{sid}/{sid}_ses-{s + 1}_{modality.lower()}.nii"
                write_nifti(vol, out / rel, datatype=16)
                sessions.append(Session(modality, int(t), rel))
        subjects.append(SubjectRecord(id=sid, cdr=cdr, sessions=sessions))
    manifest = DatasetManifest(subjects=subjects, seed=int(seed))
    manifest.save(out / "manifest.json")
    return manifest


def build_template(normals: list[Volume3D], iterations: int = 2, params=None, history: list | None = None) -> Volume3D:
    """Iterative mean template: average, register every member to it, re-average.

    If ``history`` is given, the mean SSD from the template to its registered
    members is appended after each iteration.
    """
    from .registration import RegistrationParams, register_affine, register_deformable, ssd, warp, warp_affine

    if len(normals) < 2:
        raise TooFewSubjects("template building needs at least two volumes")
    params = params or RegistrationParams()
    template = normals[0].with_data(np.mean([v.data for v in normals], axis=0))
    for _ in range(iterations):
        aligned = []
        for vol in normals:
            a = register_affine(vol, template, params)
            moved = warp_affine(vol, a, template.dims)
            field = register_deformable(moved, template, params)
            aligned.append(warp(moved, field))
        new = template.with_data(np.mean([v.data for v in aligned], axis=0))
        if history is not None:
            history.append(float(np.mean([ssd(new, v) for v in aligned])))
        template = new
    return template

