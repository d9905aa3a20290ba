import json

import numpy as np
import pytest

from jacfuse.dataset import DatasetManifest, map_cdr_to_class
from jacfuse.errors import TooFewSubjects
from jacfuse.phantom import VENTRICLE, PhantomConfig, build_template, generate_dataset, generate_subject, label_map
from jacfuse.registration import RegistrationParams


def test_ventricle_ratio_severe_vs_normal():
    n = generate_subject(0, 5).params["ventricle_voxels"]
    s = generate_subject(3, 5).params["ventricle_voxels"]
    assert s / n == pytest.approx(1.5**3, rel=0.10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ventricle_volume_monotone_in_severity(seed):
    counts = [generate_subject(c, seed).params["ventricle_voxels"] for c in range(4)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_deterministic_and_shared_geometry():
    a, b = generate_subject(2, 9), generate_subject(2, 9)
    assert np.array_equal(a.mri.data, b.mri.data) and np.array_equal(a.ct.data, b.ct.data)
    assert np.array_equal(a.params["labels"], b.params["labels"])
    assert a.mri.data.min() >= 0 and a.mri.data.max() <= 1.2
    assert a.ct.data.min() >= 0 and a.ct.data.max() <= 1.2
    # CT and MRI come from one label map: CT background and MRI background coincide away from noise
    assert a.brain_mask.sum() > 0


def test_canonical_label_map_symmetry():
    lab = label_map((48, 48, 48), 1.0, 1.0)
    assert np.array_equal(lab, lab[::-1])
    assert (lab == VENTRICLE).sum() > 0


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(dims=(30, 32, 32))
    with pytest.raises(ValueError):
        PhantomConfig(ventricle_expansion=(1.0, 1.0, 1.2, 1.3))


def test_dataset_counts_and_missing(tmp_path):
    m = generate_dataset(5, 0.2, 7, tmp_path)
    assert len(m.subjects) == 20
    missing = [r for r in m.subjects if not {s.modality for s in r.sessions} >= {"MRI", "CT"}]
    assert len(missing) == 4
    assert all(r.sessions for r in m.subjects)
    for r in m.subjects:
        assert map_cdr_to_class(r.cdr) == r.class_label
        for s in r.sessions:
            assert (tmp_path / s.path).is_file()
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back.to_dict() == m.to_dict()


def test_dataset_no_missing_and_rerun_identical(tmp_path):
    generate_dataset(2, 0.0, 3, tmp_path / "a")
    generate_dataset(2, 0.0, 3, tmp_path / "b")
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a == b
    m = DatasetManifest.load(tmp_path / "a" / "manifest.json")
    assert all({s.modality for s in r.sessions} == {"MRI", "CT"} for r in m.subjects)


def test_dataset_needs_two_per_class(tmp_path):
    with pytest.raises(TooFewSubjects):
        generate_dataset(1, 0.0, 0, tmp_path)


def test_template_of_identical_inputs():
    v = generate_subject(0, 1).mri
    t = build_template([v, v], iterations=1, params=RegistrationParams(pyramid_levels=2, iterations=(5, 5), affine_iterations=(3, 3)))
    assert np.max(np.abs(t.data - v.data)) < 1e-9


def test_template_needs_two():
    with pytest.raises(TooFewSubjects):
        build_template([generate_subject(0, 1).mri])


def test_template_ssd_non_increasing():
    vols = [generate_subject(0, 100 + i).mri for i in range(3)]
    hist = []
    build_template(vols, iterations=2, history=hist)
    assert len(hist) == 2 and hist[1] <= hist[0]
