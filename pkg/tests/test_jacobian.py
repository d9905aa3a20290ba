import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from jacfuse.jacobian import (
    DeformationType,
    classify_deformation,
    deformation_summary,
    det3,
    jacobian_determinant_map,
    jacobian_matrix_field,
)
from jacfuse.registration import DisplacementField
from jacfuse.volume import grid_coords


def central_difference_oracle(u: np.ndarray, axis: int) -> np.ndarray:
    """Loop-free but independently written: (u[i+1]-u[i-1])/2 inside, one-sided at faces."""
    n = u.shape[axis]
    out = np.empty_like(u)

    def sl(a, b):
        idx = [slice(None)] * 3
        idx[axis] = slice(a, b)
        return tuple(idx)

    out[sl(1, n - 1)] = (u[sl(2, n)] - u[sl(0, n - 2)]) / 2.0
    out[sl(0, 1)] = u[sl(1, 2)] - u[sl(0, 1)]
    out[sl(n - 1, n)] = u[sl(n - 1, n)] - u[sl(n - 2, n - 1)]
    return out


def test_zero_field_det_exactly_one():
    jmap = jacobian_determinant_map(DisplacementField(np.zeros((3, 6, 7, 8))))
    assert np.max(np.abs(jmap.data - 1.0)) <= 1e-12
    assert classify_deformation(jmap).tolist() == np.zeros((6, 7, 8), int).tolist()


def test_uniform_expansion():
    x = grid_coords((12, 12, 12))
    c = 5.5
    jmap = jacobian_determinant_map(DisplacementField(0.1 * (x - c)))
    assert np.max(np.abs(jmap.data[1:-1, 1:-1, 1:-1] - 1.331)) < 1e-9
    # a linear field is differentiated exactly at the faces too
    assert np.max(np.abs(jmap.data - 1.331)) < 1e-9


def test_smooth_random_field_matches_central_difference_oracle(rng):
    field = ndimage.gaussian_filter(rng.normal(size=(3, 14, 12, 10)), (0, 2, 2, 2)) * 4
    jac = jacobian_matrix_field(DisplacementField(field))
    for i in range(3):
        for j in range(3):
            expected = central_difference_oracle(field[i], j) + (1.0 if i == j else 0.0)
            assert np.max(np.abs(jac[..., i, j] - expected)) < 1e-12
    det = jacobian_determinant_map(DisplacementField(field)).data
    assert np.allclose(det, np.linalg.det(jac), atol=1e-12)


@given(st.integers(0, 10_000))
def test_quadratic_field_matches_complex_step(seed):
    """Central differences are exact for quadratics, so the interior agrees with the analytic derivative."""
    r = np.random.default_rng(seed)
    a = r.normal(scale=0.01, size=(3, 3, 3))  # quadratic coefficients per component
    b = r.normal(scale=0.05, size=(3, 3))
    dims = (7, 6, 5)
    x = grid_coords(dims).astype(complex)

    def disp(pts):
        return np.stack([np.einsum("j,j...->...", b[i], pts) + np.einsum("jk,j...,k...->...", a[i], pts, pts) for i in range(3)])

    field = disp(x).real
    h = 1e-20
    jac_cs = np.empty(dims + (3, 3))
    for j in range(3):
        step = x.copy()
        step[j] = step[j] + 1j * h
        jac_cs[..., :, j] = np.moveaxis(disp(step).imag / h, 0, -1)
    jac_cs += np.eye(3)
    det = jacobian_determinant_map(DisplacementField(field)).data
    interior = (slice(1, -1),) * 3
    assert np.max(np.abs(det[interior] - np.linalg.det(jac_cs)[interior])) < 1e-6


@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
def test_det3_matches_numpy(values):
    m = np.array(values).reshape(3, 3)
    assert det3(m) == pytest.approx(np.linalg.det(m), abs=1e-9)


def test_classification_and_summary():
    det = np.array([[[0.5, 1.0, 1.5, 1.0 + 1e-7]]])
    labels = classify_deformation(det)
    assert labels.ravel().tolist() == [DeformationType.COMPRESSION, 0, DeformationType.EXPANSION, 0]
    x = grid_coords((8, 8, 8))
    jmap = jacobian_determinant_map(DisplacementField(-0.2 * (x - 3.5)))
    s = deformation_summary(jmap)
    assert s["compression"] == 1.0 and s["folding_voxels"] == 0


def test_folding_reported(caplog):
    x = grid_coords((6, 6, 6))
    jmap = jacobian_determinant_map(DisplacementField(-1.5 * (x - 2.5)), source="fold")
    assert jmap.folding_count() == 6**3
    assert "non-positive" in caplog.text


def test_too_small_field_rejected():
    with pytest.raises(ValueError):
        jacobian_matrix_field(DisplacementField(np.zeros((3, 1, 4, 4))))
