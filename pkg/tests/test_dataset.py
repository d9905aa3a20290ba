import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from jacfuse.dataset import (
    ClassLabel,
    DatasetManifest,
    HdiCandidate,
    MomentSignature,
    Session,
    SubjectRecord,
    adasyn_oversample,
    class_weights,
    compute_moments,
    impute_hdi,
    map_cdr_to_class,
    select_sessions,
    stratified_kfold,
    stratified_split,
)
from jacfuse.errors import ClassTooSmall, InvalidCdr, MissingClass, NoDonorAvailable, TooFewSamples, ZeroVariance


@pytest.mark.parametrize("cdr,label", [(0, 0), (0.5, 1), (1, 2), (2, 2), (3, 3)])
def test_cdr_mapping(cdr, label):
    assert map_cdr_to_class(cdr) == label


@pytest.mark.parametrize("cdr", [0.7, -1, 4, float("nan")])
def test_invalid_cdr(cdr):
    with pytest.raises(InvalidCdr):
        map_cdr_to_class(cdr)


def record(sessions, sid="s1", cdr=0.5):
    return SubjectRecord(sid, cdr, [Session(m, t, f"{m}{t}.nii") for m, t in sessions])


def test_ct_nearest_to_selected_mri():
    rec = select_sessions(record([("MRI", 100), ("CT", 40), ("CT", 130), ("CT", 500)]), 0)
    assert rec.selected_mri.timestamp == 100 and rec.selected_ct.timestamp == 130


def test_ct_tie_goes_to_earlier():
    rec = select_sessions(record([("MRI", 100), ("CT", 90), ("CT", 110)]), 0)
    assert rec.selected_ct.timestamp == 90


def test_missing_modality_flags():
    rec = select_sessions(record([("CT", 5)]), 0)
    assert rec.missing_mri and not rec.missing_ct and rec.selected_ct.timestamp == 5


def test_mri_choice_is_seeded_and_uniform():
    sessions = [("MRI", t) for t in (10, 20, 30)] + [("CT", 15)]
    picks = {select_sessions(record(sessions, sid=f"s{i}"), 3).selected_mri.timestamp for i in range(40)}
    assert picks == {10, 20, 30}
    a = select_sessions(record(sessions), 3).selected_mri.timestamp
    assert all(select_sessions(record(sessions), 3).selected_mri.timestamp == a for _ in range(3))


def test_manifest_roundtrip(tmp_path):
    m = DatasetManifest([record([("MRI", 1), ("CT", 2)], "a", 0), record([("CT", 3)], "b", 3)], seed=5)
    m.save(tmp_path / "m.json")
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back.to_dict() == m.to_dict()
    assert back.class_counts == [1, 0, 0, 1]


def test_manifest_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        DatasetManifest([record([("MRI", 1)], "a"), record([("MRI", 1)], "a")])


@given(st.integers(0, 10_000))
def test_moments_match_scipy(seed):
    r = np.random.default_rng(seed)
    v = r.gamma(2.0, size=(6, 7, 5))
    mask = r.random(v.shape) < 0.6
    sig = compute_moments(v, mask)
    assert sig.skewness == pytest.approx(stats.skew(v[mask]), rel=1e-9, abs=1e-12)
    assert sig.kurtosis == pytest.approx(stats.kurtosis(v[mask], fisher=False), rel=1e-9)


def test_moments_zero_variance():
    with pytest.raises(ZeroVariance):
        compute_moments(np.ones((3, 3, 3)))


def test_hdi_picks_nearest_same_label():
    t = HdiCandidate("t", 1, {"MRI": MomentSignature(0.0, 3.0)})
    donors = [
        HdiCandidate("a", 1, {"MRI": MomentSignature(0.5, 3.0)}, {"CT": "A"}),
        HdiCandidate("b", 2, {"MRI": MomentSignature(0.0, 3.0)}, {"CT": "B"}),
        HdiCandidate("c", 1, {"MRI": MomentSignature(0.1, 3.1)}, {"CT": "C"}),
    ]
    assert impute_hdi(t, donors, "CT") == ("c", "C")
    assert impute_hdi(t, donors, "CT", use_label=False) == ("b", "B")


def test_hdi_tie_breaks_on_id_and_excludes_self():
    t = HdiCandidate("m", None, {"CT": MomentSignature(1.0, 2.0)}, {"CT": "self"})
    donors = [
        HdiCandidate("z", 0, {"CT": MomentSignature(1.0, 2.0)}, {"MRI": "Z"}),
        HdiCandidate("m", 0, {"CT": MomentSignature(1.0, 2.0)}, {"MRI": "self"}),
        HdiCandidate("k", 0, {"CT": MomentSignature(1.0, 2.0)}, {"MRI": "K"}),
    ]
    assert impute_hdi(t, donors, "MRI") == ("k", "K")


def test_hdi_no_donor():
    t = HdiCandidate("t", 1, {"MRI": MomentSignature(0, 3)})
    with pytest.raises(NoDonorAvailable):
        impute_hdi(t, [HdiCandidate("a", 2, {"MRI": MomentSignature(0, 3)}, {"CT": 1})], "CT")


def test_adasyn_balanced_gives_nothing(rng):
    x = rng.normal(size=(20, 3))
    y = np.repeat([0, 1], 10)
    xo, yo = adasyn_oversample(x, y, k=3, seed=1)
    assert len(xo) == 20 and np.array_equal(xo, x)


def test_adasyn_twenty_vs_ten(rng):
    x = np.vstack([rng.normal(size=(20, 2)), rng.normal(loc=1.0, size=(10, 2))])
    y = np.array([0] * 20 + [1] * 10)
    xo, yo, parents = adasyn_oversample(x, y, k=5, seed=2, return_parents=True)
    n_new = len(xo) - 30
    assert abs(n_new - 10) <= 2  # per-member rounding
    assert np.all(yo[30:] == 1)
    for (i, z, lam), p in zip(parents, xo[30:]):
        assert y[i] == y[z] == 1 and 0 <= lam <= 1
        assert np.allclose(p, x[i] + lam * (x[z] - x[i]))


def test_adasyn_too_few(rng):
    x = rng.normal(size=(13, 2))
    y = np.array([0] * 10 + [1] * 3)
    with pytest.raises(TooFewSamples):
        adasyn_oversample(x, y, k=5)


@given(st.lists(st.integers(1, 200), min_size=4, max_size=4))
def test_class_weights_sum_to_one_and_inverse(counts):
    y = np.repeat(np.arange(4), counts)
    w = class_weights(y)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(w * np.array(counts), w[0] * counts[0])


def test_class_weights_reference_case():
    y = np.repeat(np.arange(4), [100, 50, 25, 25])
    assert np.allclose(class_weights(y), [1 / 11, 2 / 11, 4 / 11, 4 / 11], atol=1e-12)
    with pytest.raises(MissingClass):
        class_weights([0, 1, 2])


def test_stratified_split_proportions():
    y = np.repeat(np.arange(4), 10)
    train, test = stratified_split(y, 0.2, seed=7)
    assert len(set(train) & set(test)) == 0 and len(train) + len(test) == 40
    assert np.bincount(y[test]).tolist() == [2, 2, 2, 2]
    with pytest.raises(ClassTooSmall):
        stratified_split([0, 1, 1], 0.2, 0)


@given(st.lists(st.integers(3, 12), min_size=2, max_size=4), st.integers(0, 99))
def test_kfold_partition(counts, seed):
    y = np.repeat(np.arange(len(counts)), counts)
    folds = stratified_kfold(y, 3, seed)
    allidx = np.sort(np.concatenate(folds))
    assert np.array_equal(allidx, np.arange(len(y)))
    for c in range(len(counts)):
        per = [int((y[f] == c).sum()) for f in folds]
        assert max(per) - min(per) <= 1
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1


def test_kfold_class_too_small():
    with pytest.raises(ClassTooSmall):
        stratified_kfold([0, 0, 1, 1, 1], 3, 0)


def test_class_label_names():
    assert ClassLabel.SEVERE_AD == 3
