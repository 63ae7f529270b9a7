import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsuda.data import CaseManifest, Dataset, DataError, LabelMap, save_labelmap
from vsuda.metrics import assd, dice_score, evaluate_dataset, evaluate_labelmaps, surface_mask


def brute_force_surface(mask):
    """Foreground voxels with an out-of-range or background 6-neighbour."""
    out = np.zeros_like(mask, dtype=bool)
    for idx in zip(*np.nonzero(mask)):
        for ax in range(3):
            for d in (-1, 1):
                nb = list(idx)
                nb[ax] += d
                if not 0 <= nb[ax] < mask.shape[ax] or not mask[tuple(nb)]:
                    out[idx] = True
    return out


def brute_force_assd(a, b, spacing):
    sa = np.argwhere(brute_force_surface(a)) * np.asarray(spacing)
    sb = np.argwhere(brute_force_surface(b)) * np.asarray(spacing)
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1))
    return (d.min(1).sum() + d.min(0).sum()) / (len(sa) + len(sb))


def set_count_dice(a, b):
    A = {tuple(i) for i in np.argwhere(a)}
    B = {tuple(i) for i in np.argwhere(b)}
    return 2 * len(A & B) / (len(A) + len(B))


def random_pair(rng, shape=(8, 8, 8), p=0.3):
    return rng.random(shape) < p, rng.random(shape) < p


def test_dice_identity():
    m = np.zeros((4, 4, 4), int)
    m[1:3, 1:3, 1:3] = 1
    assert dice_score(m, m) == 1.0


def test_dice_disjoint():
    a = np.zeros((4, 4, 4), int)
    b = np.zeros((4, 4, 4), int)
    a[0, 0, 0] = 1
    b[3, 3, 3] = 1
    assert dice_score(a, b) == 0.0


def test_dice_hand_value():
    # |A| = 4, |B| = 6, |A∩B| = 3 -> 6 / 10
    a = np.zeros(20, int)
    b = np.zeros(20, int)
    a[[0, 1, 2, 3]] = 1
    b[[1, 2, 3, 10, 11, 12]] = 1
    assert dice_score(a.reshape(2, 2, 5), b.reshape(2, 2, 5)) == pytest.approx(0.6)


def test_dice_both_empty():
    z = np.zeros((2, 2, 2), int)
    assert dice_score(z, z, 1) == 1.0


def test_dice_class_selection():
    a = np.array([[[1, 2, 2]]])
    b = np.array([[[2, 2, 0]]])
    assert dice_score(a, b, 1) == 0.0
    assert dice_score(a, b, 2) == pytest.approx(2 * 1 / 4)


def test_shape_mismatch():
    with pytest.raises(DataError):
        dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(DataError):
        assd(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_assd_identity():
    m = np.zeros((5, 5, 5), int)
    m[1:4, 1:4, 1:4] = 1
    assert assd(m, m) == 0.0


def test_assd_single_voxels():
    a = np.zeros((3, 3, 8), int)
    b = np.zeros((3, 3, 8), int)
    a[1, 1, 1] = 1
    b[1, 1, 4] = 1
    assert assd(a, b, 1, (1, 1, 1)) == pytest.approx(3.0)


def test_assd_empty_conventions():
    z = np.zeros((3, 3, 3), int)
    m = z.copy()
    m[1, 1, 1] = 1
    assert assd(z, z) == 0.0
    assert math.isnan(assd(m, z))
    assert math.isnan(assd(z, m))


def test_surface_border_counts_as_background():
    m = np.ones((3, 3, 3), bool)
    s = surface_mask(m)
    assert s.sum() == 26 and not s[1, 1, 1]


def test_surface_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, _ = random_pair(rng, p=0.6)
        assert np.array_equal(surface_mask(a), brute_force_surface(a))


def test_oracle_equivalence_random_pairs():
    rng = np.random.default_rng(0)
    for i in range(50):
        a, b = random_pair(rng, p=rng.uniform(0.05, 0.6))
        spacing = (1.0, 1.0, 1.0) if i % 2 == 0 else tuple(rng.uniform(0.3, 2.5, 3))
        assert dice_score(a, b, True) == set_count_dice(a, b)
        assert abs(assd(a, b, True, spacing) - brute_force_assd(a, b, spacing)) < 1e-9


masks = st.integers(0, 2**32 - 1).map(lambda s: random_pair(np.random.default_rng(s), p=0.3))


@given(masks)
@settings(max_examples=30, deadline=None)
def test_symmetry(pair):
    a, b = pair
    assert dice_score(a, b, True) == dice_score(b, a, True)
    assert assd(a, b, True) == pytest.approx(assd(b, a, True), abs=1e-12)


@given(masks, st.floats(0.1, 5.0))
@settings(max_examples=30, deadline=None)
def test_spacing_scaling(pair, s):
    a, b = pair
    base = (1.0, 0.7, 1.3)
    assert assd(a, b, True, tuple(s * x for x in base)) == pytest.approx(s * assd(a, b, True, base), rel=1e-9)
    assert dice_score(a, b, True) == dice_score(a, b, True)


def test_translation_invariance():
    rng = np.random.default_rng(5)
    a = np.zeros((12, 12, 12), bool)
    b = np.zeros((12, 12, 12), bool)
    a[:6, :6, :6] = rng.random((6, 6, 6)) < 0.5
    b[:6, :6, :6] = rng.random((6, 6, 6)) < 0.5
    sa, sb = np.roll(a, (3, 2, 4), (0, 1, 2)), np.roll(b, (3, 2, 4), (0, 1, 2))
    assert dice_score(a, b, True) == dice_score(sa, sb, True)
    # interior shift: border voxels stop counting as surface, so shift both well inside
    a2, b2 = np.roll(a, (1, 1, 1), (0, 1, 2)), np.roll(b, (1, 1, 1), (0, 1, 2))
    a3, b3 = np.roll(a2, (4, 3, 2), (0, 1, 2)), np.roll(b2, (4, 3, 2), (0, 1, 2))
    assert assd(a2, b2, True) == pytest.approx(assd(a3, b3, True), abs=1e-12)


def _lm(arr, cid):
    return LabelMap(np.asarray(arr), case_id=cid)


def test_report_single_case():
    m = np.zeros((4, 4, 4), int)
    m[1:3, 1:3, 1:3] = 1
    m[0, 0, 0] = 2
    rep = evaluate_labelmaps({"c": _lm(m, "c")}, {"c": _lm(m, "c")})
    agg = rep.aggregates[1]
    assert agg.dice_mean == 1.0 and agg.dice_std == 0.0 and agg.n == 1
    assert "(n=1)" in rep.to_text()


def test_report_two_cases_mean_std():
    gt = np.zeros((1, 1, 10), int)
    gt[..., :5] = 1
    # prediction with Dice 0.8: |A|=5, |B|=5, overlap 4
    p8 = np.zeros_like(gt)
    p8[..., 1:6] = 1
    # Dice 0.9: |A|=10, |B|=10, overlap 9
    gt2 = np.zeros((1, 1, 20), int)
    gt2[..., :10] = 1
    p9 = np.zeros_like(gt2)
    p9[..., 1:11] = 1  # overlap 9 -> 18/20
    rep = evaluate_labelmaps(
        {"a": _lm(p8, "a"), "b": _lm(p9, "b")}, {"a": _lm(gt, "a"), "b": _lm(gt2, "b")}, classes=(1,)
    )
    assert [r.dice for r in rep.rows] == pytest.approx([0.8, 0.9])
    assert rep.aggregates[1].dice_mean == pytest.approx(0.85)
    assert rep.aggregates[1].dice_std == pytest.approx(np.std([0.8, 0.9], ddof=1))
    assert rep.aggregates[1].dice_std == pytest.approx(0.0707, abs=1e-4)


def test_report_counts_undefined_assd():
    gt = np.zeros((3, 3, 3), int)
    gt[1, 1, 1] = 1
    rep = evaluate_labelmaps({"a": _lm(np.zeros_like(gt), "a"), "b": _lm(gt, "b")}, {"a": _lm(gt, "a"), "b": _lm(gt, "b")}, classes=(1,))
    agg = rep.aggregates[1]
    assert agg.n_assd_undefined == 1 and agg.n_assd == 1
    assert agg.assd_mean == 0.0
    assert "undefined" in rep.to_csv()


def test_evaluate_dataset_identical(tmp_path):
    rng = np.random.default_rng(0)
    cases = []
    for i in range(3):
        lab = LabelMap(rng.integers(0, 3, (5, 5, 5)), case_id=f"c{i}")
        p = tmp_path / f"c{i}.nii.gz"
        save_labelmap(lab, p)
        cases.append(CaseManifest(f"c{i}", "ceT1", p, p, "true"))
    ds = Dataset("gt", tuple(cases))
    rep = evaluate_dataset(ds, ds)
    for c in (1, 2):
        assert rep.aggregates[c].dice_mean == 1.0
        assert rep.aggregates[c].assd_mean == 0.0


def test_evaluate_dataset_refuses_pseudo_truth(tmp_path):
    lab = LabelMap(np.zeros((2, 2, 2), int))
    p = tmp_path / "c.nii.gz"
    save_labelmap(lab, p)
    pseudo = Dataset("p", (CaseManifest("c", "hrT2_real", p, p, "pseudo"),))
    with pytest.raises(DataError, match="true labels"):
        evaluate_dataset(pseudo, pseudo)


def test_evaluate_dataset_case_mismatch(tmp_path):
    lab = LabelMap(np.zeros((2, 2, 2), int))
    p = tmp_path / "c.nii.gz"
    save_labelmap(lab, p)
    a = Dataset("a", (CaseManifest("x", "ceT1", p, p, "true"),))
    b = Dataset("b", (CaseManifest("y", "ceT1", p, p, "true"),))
    with pytest.raises(DataError, match="differ"):
        evaluate_dataset(a, b)
