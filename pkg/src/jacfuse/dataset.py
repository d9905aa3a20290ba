"""Subject manifests, labeling, session selection, imputation and resampling."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ClassTooSmall,
    InvalidCdr,
    MissingClass,
    NoDonorAvailable,
    TooFewSamples,
    ZeroVariance,
)

MODALITIES = ("MRI", "CT")


class ClassLabel(IntEnum):
    NORMAL = 0
    MCI = 1
    MILD_AD = 2
    SEVERE_AD = 3


N_CLASSES = len(ClassLabel)
CLASS_NAMES = ("Normal", "MCI", "MildAD", "SevereAD")

CDR_BY_CLASS = {
    ClassLabel.NORMAL: (0.0,),
    ClassLabel.MCI: (0.5,),
    ClassLabel.MILD_AD: (1.0, 2.0),
    ClassLabel.SEVERE_AD: (3.0,),
}


def map_cdr_to_class(cdr: float) -> ClassLabel:
    """CDR 0 -> Normal, 0.5 -> MCI, 1 or 2 -> MildAD, 3 -> SevereAD."""
    for label, values in CDR_BY_CLASS.items():
        if cdr in values:
            return label
    raise InvalidCdr(f"CDR {cdr!r} is not one of 0, 0.5, 1, 2, 3")


@dataclass(frozen=True)
class Session:
    modality: str
    timestamp: int
    path: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass
class SubjectRecord:
    id: str
    cdr: float
    sessions: list[Session] = field(default_factory=list)
    selected_mri: Session | None = None
    selected_ct: Session | None = None

    @property
    def class_label(self) -> ClassLabel:
        return map_cdr_to_class(self.cdr)

    @property
    def missing_mri(self) -> bool:
        return self.selected_mri is None

    @property
    def missing_ct(self) -> bool:
        return self.selected_ct is None

    def selected(self, modality: str) -> Session | None:
        return self.selected_mri if modality == "MRI" else self.selected_ct


@dataclass
class DatasetManifest:
    subjects: list[SubjectRecord]
    seed: int = 0

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")

    @property
    def class_counts(self) -> list[int]:
        counts = [0] * N_CLASSES
        for s in self.subjects:
            counts[s.class_label] += 1
        return counts

    def labels(self) -> np.ndarray:
        return np.array([int(s.class_label) for s in self.subjects], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "subjects": [
                {
                    "id": s.id,
                    "cdr": s.cdr,
                    "sessions": [
                        {"modality": x.modality, "timestamp": x.timestamp, "path": x.path} for x in s.sessions
                    ],
                }
                for s in self.subjects
            ],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        subjects = []
        for entry in doc["subjects"]:
            sessions = [Session(x["modality"], int(x["timestamp"]), str(x["path"])) for x in entry["sessions"]]
            rec = SubjectRecord(id=str(entry["id"]), cdr=float(entry["cdr"]), sessions=sessions)
            rec.class_label  # validates the CDR
            subjects.append(rec)
        return cls(subjects=subjects, seed=int(doc.get("seed", 0)))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def select_sessions(rec: SubjectRecord, seed: int) -> SubjectRecord:
    """Pick one MRI session at random and the CT session closest in time to it.

    CT ties go to the earlier timestamp. Without an MRI, the earliest CT is
    taken.
    """
    if not rec.sessions:
        raise ValueError(f"subject {rec.id} has no sessions")
    rng = np.random.default_rng([int(seed), _stable_hash(rec.id)])
    mris = sorted((s for s in rec.sessions if s.modality == "MRI"), key=lambda s: (s.timestamp, s.path))
    cts = sorted((s for s in rec.sessions if s.modality == "CT"), key=lambda s: (s.timestamp, s.path))
    mri = mris[int(rng.integers(len(mris)))] if mris else None
    ct = None
    if cts:
        if mri is None:
            ct = cts[0]
        else:
            ct = min(cts, key=lambda s: (abs(s.timestamp - mri.timestamp), s.timestamp))
    return SubjectRecord(id=rec.id, cdr=rec.cdr, sessions=list(rec.sessions), selected_mri=mri, selected_ct=ct)


def _stable_hash(text: str) -> int:
    # str hash() is salted per process; seeds must not depend on it
    return int(hashlib.sha256(text.encode()).hexdigest()[:15], 16)


# --------------------------------------------------------------- moments


@dataclass(frozen=True)
class MomentSignature:
    skewness: float
    kurtosis: float

    def distance(self, other: "MomentSignature") -> float:
        return float(np.hypot(self.skewness - other.skewness, self.kurtosis - other.kurtosis))


def compute_moments(values: np.ndarray, mask: np.ndarray | None = None) -> MomentSignature:
    """Population skewness m3/m2^1.5 and Pearson (non-excess) kurtosis m4/m2^2."""
    x = np.asarray(values, dtype=np.float64)
    if mask is not None:
        x = x[np.asarray(mask, dtype=bool)]
    x = x.ravel()
    if x.size < 4:
        raise ZeroVariance(f"need at least 4 voxels, got {x.size}")
    d = x - x.mean()
    m2 = np.mean(d**2)
    if m2 <= 1e-300 or np.max(np.abs(d)) <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ZeroVariance("region has zero variance")
    m3 = np.mean(d**3)
    m4 = np.mean(d**4)
    return MomentSignature(float(m3 / m2**1.5), float(m4 / m2**2))


# ------------------------------------------------------------ hot deck


@dataclass
class HdiCandidate:
    """A subject as seen by hot-deck imputation: label, per-modality signature and data reference."""

    id: str
    label: int | None
    signatures: dict[str, MomentSignature] = field(default_factory=dict)
    sources: dict[str, object] = field(default_factory=dict)


def impute_hdi(
    target: HdiCandidate, donors: Sequence[HdiCandidate], missing: str, use_label: bool = True
) -> tuple[str, object]:
    """Borrow the missing modality from the nearest-moment donor.

    Distance is Euclidean in (skewness, kurtosis) of the modality the target
    does have. With ``use_label`` the donor must share the target's label;
    ties go to the lexicographically smallest id. Returns ``(donor_id, source)``.
    """
    shared = "CT" if missing == "MRI" else "MRI"
    if shared not in target.signatures:
        raise NoDonorAvailable(f"{target.id}: has neither modality")
    best = None
    for d in donors:
        if d.id == target.id or missing not in d.sources or shared not in d.signatures:
            continue
        if use_label and target.label is not None and d.label != target.label:
            continue
        key = (d.signatures[shared].distance(target.signatures[shared]), d.id)
        if best is None or key < best[0]:
            best = (key, d)
    if best is None:
        raise NoDonorAvailable(f"{target.id}: no donor with {missing}")
    donor = best[1]
    return donor.id, donor.sources[missing]


# ---------------------------------------------------------------- ADASYN


def adasyn_oversample(
    features: np.ndarray,
    labels: np.ndarray,
    k: int = 5,
    beta: float = 1.0,
    seed: int = 0,
    return_parents: bool = False,
):
    """Adaptive synthetic oversampling of every class smaller than the largest.

    For class s with m_s members, G = (m_max - m_s) * beta synthetic points
    are spread over its members in proportion to the share of other-class
    points among each member's k nearest neighbours. Each synthetic point is
    x_i + lam * (x_z - x_i) with x_z one of the k nearest same-class points.
    Originals are returned first, unchanged.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be (n, d) with one label per row")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    m_max = counts.max()
    sq = np.sum(X * X, axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(dist, np.inf)
    new_x, new_y, parents = [], [], []
    for cls, m_s in zip(classes, counts):
        G = (m_max - m_s) * beta
        if G <= 0:
            continue
        members = np.flatnonzero(y == cls)
        if len(members) < k + 1:
            raise TooFewSamples(f"class {cls} has {len(members)} samples, need k+1={k + 1}")
        nn_all = np.argsort(dist[members], axis=1, kind="stable")[:, :k]
        r = (y[nn_all] != cls).sum(axis=1) / k
        if r.sum() > 0:
            r_hat = r / r.sum()
        else:
            r_hat = np.full(len(members), 1.0 / len(members))
        g = np.floor(r_hat * G + 0.5).astype(int)
        within = dist[np.ix_(members, members)]
        nn_same = np.argsort(within, axis=1, kind="stable")[:, :k]
        for row, (i, g_i) in enumerate(zip(members, g)):
            for _ in range(g_i):
                z = members[nn_same[row, rng.integers(k)]]
                lam = rng.random()
                new_x.append(X[i] + lam * (X[z] - X[i]))
                new_y.append(cls)
                parents.append((i, z, lam))
    if new_x:
        X_out = np.vstack([X, np.array(new_x)])
        y_out = np.concatenate([y, np.array(new_y, dtype=np.int64)])
    else:
        X_out, y_out = X.copy(), y.copy()
    if return_parents:
        return X_out, y_out, parents
    return X_out, y_out


def class_weights(labels: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    """Inverse-frequency class weights normalised to sum to one."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)[:n_classes]
    if np.any(counts == 0):
        raise MissingClass(f"classes {np.flatnonzero(counts == 0).tolist()} absent from training labels")
    w = 1.0 / counts
    return w / w.sum()


# -------------------------------------------------------------- splitting


def stratified_split(labels: Sequence[int], test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled train/test split; returns sorted index arrays."""
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if len(idx) < 2:
            raise ClassTooSmall(f"class {cls} has {len(idx)} subjects, need 2")
        idx = rng.permutation(idx)
        n_test = int(np.floor(test_fraction * len(idx) + 0.5))
        n_test = min(max(n_test, 1), len(idx) - 1)
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def stratified_kfold(labels: Sequence[int], k: int = 10, seed: int = 0) -> list[np.ndarray]:
    """Partition indices into k folds with per-class counts differing by at most one.

    Classes are dealt round-robin, each starting where the previous one
    stopped, which also keeps total fold sizes within one of each other.
    """
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if len(idx) < k:
            raise ClassTooSmall(f"class {cls} has {len(idx)} members, fewer than k={k}")
        for j, i in enumerate(rng.permutation(idx)):
            folds[(offset + j) % k].append(int(i))
        offset = (offset + len(idx)) % k
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]
