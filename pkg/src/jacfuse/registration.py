"""Affine pre-alignment, demons deformable registration and the multi-stage pipeline.

Transforms map *fixed* voxel coordinates to *moving* voxel coordinates, so a
warped image is always ``moving(T(x))`` evaluated on the fixed grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dataset import MomentSignature, compute_moments
from .errors import NoDonorAvailable, SingularTransform
from .volume import Volume3D, grid_coords, resample_array, trilinear

log = logging.getLogger(__name__)

DEMONS_DELTA = 1e-9


@dataclass(frozen=True)
class RegistrationParams:
    pyramid_levels: int = 3
    # deformable iterations per level, coarse to fine
    iterations: tuple[int, ...] = (100, 75, 50)
    affine_iterations: tuple[int, ...] = (40, 20, 10)
    alpha: float = 2.0
    step_size: float = 1.0
    # Gaussian pre-smoothing of both images at every level, voxels
    image_sigma: float = 1.0
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if self.pyramid_levels < 1 or len(self.iterations) < 1 or len(self.affine_iterations) < 1:
            raise ValueError("need at least one pyramid level and iteration count")
        if min(self.iterations) < 0 or min(self.affine_iterations) < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.alpha <= 0 or self.step_size <= 0 or self.convergence_tol <= 0:
            raise ValueError("alpha, step_size and convergence_tol must be positive")

    def level_iterations(self, counts: Sequence[int]) -> list[int]:
        """Per-level counts (coarse to fine) stretched or cut to ``pyramid_levels``."""
        counts = list(counts)
        n = self.pyramid_levels
        if len(counts) >= n:
            return counts[len(counts) - n :]
        return [counts[0]] * (n - len(counts)) + counts


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, copy=True)
        if m.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine bottom row must be (0, 0, 0, 1)")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    def is_invertible(self) -> bool:
        return abs(np.linalg.det(self.matrix[:3, :3])) > 1e-12


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement in voxel units, shape ``(3, nx, ny, nz)`` on the fixed grid."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64, copy=True)
        if d.ndim != 4 or d.shape[0] != 3:
            raise ValueError(f"displacement field must have shape (3, nx, ny, nz), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacement field has non-finite components")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)
        if self.affine is None:
            object.__setattr__(self, "affine", np.diag(tuple(self.spacing) + (1.0,)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[1:])  # type: ignore[return-value]

    @classmethod
    def zeros(cls, like: Volume3D) -> "DisplacementField":
        return cls(np.zeros((3,) + like.dims), like.spacing, like.affine)

    def magnitude(self) -> np.ndarray:
        return np.sqrt((self.data**2).sum(axis=0))


# ------------------------------------------------------------------ warping


def warp_array(data: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """``data`` sampled at x + disp(x) on the grid of ``disp`` (zero outside)."""
    return trilinear(data, grid_coords(disp.shape[1:]) + disp)


def warp(moving: Volume3D, field: DisplacementField) -> Volume3D:
    """Evaluate moving(x + D(x)) on the field's grid."""
    return Volume3D(warp_array(moving.data, field.data), field.spacing, field.affine)


def _affine_coords(matrix: np.ndarray, dims) -> np.ndarray:
    x = grid_coords(dims)
    return np.einsum("ij,j...->i...", matrix[:3, :3], x) + matrix[:3, 3].reshape(3, 1, 1, 1)


def warp_affine(moving: Volume3D, A: AffineTransform, out_dims: Sequence[int], like: Volume3D | None = None) -> Volume3D:
    """Evaluate moving(A x) on a grid of ``out_dims``."""
    if not A.is_invertible():
        raise SingularTransform("affine transform is singular")
    out_dims = tuple(int(n) for n in out_dims)
    data = trilinear(moving.data, _affine_coords(A.matrix, out_dims))
    if like is not None:
        return Volume3D(data, like.spacing, like.affine)
    return Volume3D(data, moving.spacing, moving.affine)


def ssd(a: Volume3D | np.ndarray, b: Volume3D | np.ndarray) -> float:
    a = a.data if isinstance(a, Volume3D) else a
    b = b.data if isinstance(b, Volume3D) else b
    return float(np.sum((a - b) ** 2))


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field of x -> T_outer(T_inner(x)): D_inner(x) + D_outer(x + D_inner(x))."""
    x = grid_coords(inner.dims) + inner.data
    comp = inner.data + np.stack([trilinear(outer.data[c], x) for c in range(3)])
    return DisplacementField(comp, inner.spacing, inner.affine)


# ------------------------------------------------------------------ pyramid


def _level_dims(dims, level: int) -> tuple[int, ...]:
    return tuple(max(int(round((n - 1) / 2**level)) + 1, 2) if n > 1 else 1 for n in dims)


def _pyramid(data: np.ndarray, levels: int) -> list[np.ndarray]:
    """Images from coarse to fine; the finest is ``data`` itself."""
    out = []
    for level in range(levels - 1, 0, -1):
        smooth = ndimage.gaussian_filter(data, 0.5 * 2**level, mode="constant")
        out.append(resample_array(smooth, _level_dims(data.shape, level)))
    out.append(data)
    return out


# ------------------------------------------------------------------- affine


def _unit_frame(dims) -> np.ndarray:
    """Matrix taking voxel coordinates to [-1, 1] normalised coordinates."""
    s = np.eye(4)
    for i, n in enumerate(dims):
        if n > 1:
            s[i, i] = 2.0 / (n - 1)
            s[i, 3] = -1.0
    return s


def _to_voxel(norm: np.ndarray, fixed_dims, moving_dims) -> np.ndarray:
    return np.linalg.inv(_unit_frame(moving_dims)) @ norm @ _unit_frame(fixed_dims)


def _to_norm(vox: np.ndarray, fixed_dims, moving_dims) -> np.ndarray:
    return _unit_frame(moving_dims) @ vox @ np.linalg.inv(_unit_frame(fixed_dims))


def _affine_residuals(params, mov, mov_grads, fix, u, fixed_dims, moving_dims, with_jac):
    norm = np.eye(4)
    norm[:3, :] = params.reshape(3, 4)
    vox = _to_voxel(norm, fixed_dims, moving_dims)
    y = np.einsum("ij,j...->i...", vox[:3, :3], grid_coords(fixed_dims)) + vox[:3, 3].reshape(3, 1, 1, 1)
    r = (trilinear(mov, y) - fix).ravel()
    if not with_jac:
        return r, None
    # d r / d norm[i, j] = dM/dy_i * (dy_i/dv_i) * u_j
    scale = [(m - 1) / 2.0 if m > 1 else 0.0 for m in moving_dims]
    jac = np.empty((r.size, 12))
    for i in range(3):
        g = trilinear(mov_grads[i], y).ravel() * scale[i]
        for j in range(4):
            jac[:, 4 * i + j] = g * u[j]
    return r, jac


def register_affine(
    moving: Volume3D, fixed: Volume3D, params: RegistrationParams = RegistrationParams(), diagnostics: dict | None = None
) -> AffineTransform:
    """12-parameter affine minimising mean squared intensity difference.

    Parameters live in unit-cube normalised coordinates so they carry over
    between pyramid levels. Each level runs damped Gauss-Newton
    (Levenberg-Marquardt) steps from the previous estimate; the best
    transform seen is returned.
    """
    levels = params.pyramid_levels
    iters = params.level_iterations(params.affine_iterations)
    mov_pyr = _pyramid(moving.data, levels)
    fix_pyr = _pyramid(fixed.data, levels)
    p = np.eye(4)[:3].ravel()
    history = []
    for mov, fix, n_iter in zip(mov_pyr, fix_pyr, iters):
        grads = np.gradient(mov) if min(mov.shape) > 1 else [np.zeros_like(mov)] * 3
        u_axes = [np.linspace(-1, 1, n) if n > 1 else np.zeros(1) for n in fix.shape]
        uu = np.meshgrid(*u_axes, indexing="ij")
        u = [c.ravel() for c in uu] + [np.ones(fix.size)]
        r, jac = _affine_residuals(p, mov, grads, fix, u, fix.shape, mov.shape, True)
        cost = float(r @ r) / r.size
        lam = None
        for _ in range(n_iter):
            jtj = jac.T @ jac
            jtr = jac.T @ r
            if lam is None:
                lam = 1e-3 * float(np.mean(np.diag(jtj))) + 1e-12
            accepted = False
            for _ in range(8):
                try:
                    step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-12), -jtr)
                except np.linalg.LinAlgError:
                    lam *= 4.0
                    continue
                p_new = p + step
                r_new, _ = _affine_residuals(p_new, mov, grads, fix, u, fix.shape, mov.shape, False)
                cost_new = float(r_new @ r_new) / r_new.size
                if cost_new < cost:
                    accepted = True
                    break
                lam *= 4.0
            if not accepted:
                break
            improvement = (cost - cost_new) / max(cost, 1e-300)
            p = p_new
            cost = cost_new
            lam = max(lam / 3.0, 1e-12)
            r, jac = _affine_residuals(p, mov, grads, fix, u, fix.shape, mov.shape, True)
            if improvement < params.convergence_tol:
                break
        history.append(cost)
    norm = np.eye(4)
    norm[:3, :] = p.reshape(3, 4)
    vox = _to_voxel(norm, fixed.dims, moving.dims)
    vox[3] = (0.0, 0.0, 0.0, 1.0)
    if diagnostics is not None:
        diagnostics["affine_cost_per_level"] = history
    return AffineTransform(vox)


# --------------------------------------------------------------- deformable


def _demons_level(mov, fix, disp, n_iter, params, mask=None):
    """Run demons iterations on one level; returns the best field and its SSD."""
    grid = grid_coords(fix.shape)
    sigma = params.alpha
    best_disp, best_ssd = disp, None
    recent = []
    for it in range(n_iter + 1):
        warped = trilinear(mov, grid + disp)
        diff = fix - warped
        cur = float(np.sum(diff * diff))
        if best_ssd is None or cur < best_ssd:
            best_disp, best_ssd = disp, cur
        recent.append(cur)
        if it == n_iter:
            break
        if len(recent) > 5:
            old = recent[-6]
            if old > 0 and (old - min(recent[-5:])) / old < params.convergence_tol:
                break
        g = np.gradient(warped)
        denom = g[0] ** 2 + g[1] ** 2 + g[2] ** 2 + diff**2 + DEMONS_DELTA
        force = np.stack(g) * (diff / denom)
        if mask is not None:
            force *= mask
        disp = disp + params.step_size * force
        disp = np.stack([ndimage.gaussian_filter(disp[c], sigma, mode="nearest") for c in range(3)])
    return best_disp, best_ssd


def register_deformable(
    moving: Volume3D, fixed: Volume3D, params: RegistrationParams = RegistrationParams(), diagnostics: dict | None = None
) -> DisplacementField:
    """Demons registration: D <- smooth(D + step * force), coarse to fine.

    force = (F - M o T) grad(M o T) / (|grad(M o T)|^2 + (F - M o T)^2 + delta)

    Gaussian smoothing of the accumulated field with sigma ``alpha`` plays the
    role of the regulariser. At the finest level the lowest-SSD iterate is
    kept, and the zero field wins if nothing beats it, so the result never
    has higher SSD than no deformation.
    """
    if moving.dims != fixed.dims:
        raise ValueError(f"deformable registration needs equal grids, got {moving.dims} vs {fixed.dims}")
    levels = params.pyramid_levels
    iters = params.level_iterations(params.iterations)
    mov_pyr = _pyramid(moving.data, levels)
    fix_pyr = _pyramid(fixed.data, levels)
    disp = np.zeros((3,) + fix_pyr[0].shape)
    per_level = []
    for li, (mov, fix, n_iter) in enumerate(zip(mov_pyr, fix_pyr, iters)):
        if disp.shape[1:] != fix.shape:
            coarse = disp.shape[1:]
            disp = np.stack(
                [
                    resample_array(disp[c], fix.shape) * ((fix.shape[c] - 1) / max(coarse[c] - 1, 1))
                    for c in range(3)
                ]
            )
        if params.image_sigma > 0:
            mov = ndimage.gaussian_filter(mov, params.image_sigma, mode="constant")
            fix = ndimage.gaussian_filter(fix, params.image_sigma, mode="constant")
        disp, best = _demons_level(mov, fix, disp, n_iter, params)
        per_level.append(best)
    final_ssd = ssd(warp_array(moving.data, disp), fixed.data)
    zero_ssd = ssd(moving, fixed)
    per_level.append(final_ssd)
    if final_ssd > zero_ssd:
        disp = np.zeros_like(disp)
        per_level[-1] = zero_ssd
    if diagnostics is not None:
        diagnostics["ssd_per_level"] = per_level
        diagnostics["ssd_zero"] = zero_ssd
    return DisplacementField(disp, fixed.spacing, fixed.affine)


# ------------------------------------------------------ intensity matching


def match_intensities(
    source: Volume3D, reference: Volume3D, source_mask: np.ndarray, reference_mask: np.ndarray, n_quantiles: int = 256
) -> Volume3D:
    """Monotone quantile mapping of ``source`` brain intensities onto ``reference``'s.

    Voxels outside ``source_mask`` are set to 0.
    """
    q = np.linspace(0, 100, n_quantiles)
    src_q = np.percentile(source.data[source_mask], q)
    ref_q = np.percentile(reference.data[reference_mask], q)
    # strictly increasing knots for np.interp
    src_q = src_q + np.arange(n_quantiles) * 1e-12
    mapped = np.interp(source.data, src_q, ref_q)
    return source.with_data(np.where(source_mask, mapped, 0.0))


# ------------------------------------------------------------- pipeline


@dataclass
class SubjectVolumes:
    """Preprocessed volumes of one subject as input to the multi-stage registration."""

    id: str
    label: int | None
    mri: Volume3D | None = None
    ct: Volume3D | None = None
    mri_mask: np.ndarray | None = None
    ct_mask: np.ndarray | None = None

    def mask(self, modality: str) -> np.ndarray:
        vol, m = (self.mri, self.mri_mask) if modality == "MRI" else (self.ct, self.ct_mask)
        return m if m is not None else vol.data > 0


@dataclass
class RegistrationResult:
    id: str
    mri_field: DisplacementField | None = None
    ct_field: DisplacementField | None = None
    mri_affine: AffineTransform | None = None
    ct_affine: AffineTransform | None = None
    registered_mri: Volume3D | None = None
    registered_ct: Volume3D | None = None
    ct_reference: str | None = None
    diagnostics: dict = field(default_factory=dict)


def register_to(moving: Volume3D, fixed: Volume3D, params: RegistrationParams, diag: dict):
    """Affine then deformable; returns (affine, field, warped moving)."""
    a = register_affine(moving, fixed, params, diag)
    moved = warp_affine(moving, a, fixed.dims, like=fixed)
    diag["ssd_affine"] = ssd(moved, fixed)
    d = register_deformable(moved, fixed, params, diag)
    out = warp(moved, d)
    diag["ssd_deformable"] = ssd(out, fixed)
    return a, d, out


def register_mri(subject: SubjectVolumes, template: Volume3D, params: RegistrationParams) -> RegistrationResult:
    res = RegistrationResult(subject.id)
    a, d, out = register_to(subject.mri, template, params, res.diagnostics.setdefault("mri", {}))
    res.mri_affine, res.mri_field, res.registered_mri = a, d, out
    return res


def ct_signature(subject: SubjectVolumes) -> MomentSignature:
    return compute_moments(subject.ct.data, subject.mask("CT"))


def choose_mri_donor(subject: SubjectVolumes, candidates: Sequence[SubjectVolumes]) -> SubjectVolumes:
    """Donor MRI for a CT-only subject: same label, nearest CT (skewness, kurtosis).

    With ``subject.label`` None the label constraint is dropped.
    Ties break on the lexicographically smaller id.
    """
    target = ct_signature(subject)
    best = None
    for c in candidates:
        if c.id == subject.id or c.mri is None or c.ct is None:
            continue
        if subject.label is not None and c.label != subject.label:
            continue
        key = (ct_signature(c).distance(target), c.id)
        if best is None or key < best[0]:
            best = (key, c)
    if best is None:
        raise NoDonorAvailable(f"{subject.id}: no MRI donor with label {subject.label}")
    return best[1]


def register_ct(
    subject: SubjectVolumes,
    reference: SubjectVolumes,
    registered_mri: Volume3D,
    params: RegistrationParams,
    res: RegistrationResult,
) -> RegistrationResult:
    """Register the subject's CT onto ``reference``'s registered MRI.

    CT intensities are first quantile-mapped onto the reference subject's
    native MRI so that SSD compares like with like.
    """
    matched = match_intensities(subject.ct, reference.mri, subject.mask("CT"), reference.mask("MRI"))
    a, d, out = register_to(matched, registered_mri, params, res.diagnostics.setdefault("ct", {}))
    res.ct_affine, res.ct_field, res.registered_ct = a, d, out
    res.ct_reference = reference.id
    return res


def register_pipeline(
    subjects: Sequence[SubjectVolumes],
    template: Volume3D,
    params: RegistrationParams = RegistrationParams(),
    donor_pool: Sequence[SubjectVolumes] | None = None,
    mri_results: dict[str, RegistrationResult] | None = None,
) -> dict[str, RegistrationResult]:
    """All MRIs to the template, then each CT to its own subject's registered MRI.

    A CT-only subject borrows the registered MRI of a donor chosen by
    :func:`choose_mri_donor` from ``donor_pool`` (default: ``subjects``).
    """
    pool = list(donor_pool) if donor_pool is not None else list(subjects)
    results = dict(mri_results or {})
    for s in subjects:
        if s.mri is not None and s.id not in results:
            results[s.id] = register_mri(s, template, params)
    out = {}
    for s in subjects:
        res = results.get(s.id) or RegistrationResult(s.id)
        if s.ct is not None:
            if s.mri is not None:
                ref = s
            else:
                ref = choose_mri_donor(s, pool)
                log.info("%s: CT registered against donor %s", s.id, ref.id)
                if ref.id not in results:
                    results[ref.id] = register_mri(ref, template, params)
            register_ct(s, ref, results[ref.id].registered_mri, params, res)
        out[s.id] = res
    return out
