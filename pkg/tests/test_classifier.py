import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.optimize import linprog

from conftest import preset_scene
from solvis import synthgen as sg
from solvis.classifier import (AUGMENTATIONS, FEATURE_NAMES, ConfusionMatrix, FeaturedCase, FeatureVector,
                               LabeledCase, SvmModel, augment, augment_rows, classify, classify_many,
                               compose_flips, confusion_matrix, extract_features, fold_assignment,
                               kfold_validate, read_feature_dump, read_manifest, train_svm, train_svm_traced,
                               write_feature_dump, write_manifest)
from solvis.errors import BadFeature, DegenerateTrainingSet, ModelFormatError
from solvis.labels import LABELS, Label
from solvis.raster import flip_h

CENTERS = np.array([[0, 100, 0, 0, 0.9], [8, 100, 0, 0, 0.1], [0, 100, 0, 500, 0.9]], dtype=np.float64)
SPREAD = np.array([1.0, 1.0, 1.0, 40.0, 0.03])


def blobs(seed: int = 0, n: int = 30) -> list[tuple[FeatureVector, Label]]:
    """Three well separated 5-D blobs, one per class."""
    rng = np.random.default_rng(seed)
    data = []
    for center, label in zip(CENTERS, LABELS):
        for x in center + rng.normal(0, 1, (n, 5)) * SPREAD:
            x[2], x[3] = abs(x[2]), abs(x[3])
            data.append((FeatureVector.from_array(x), label))
    return data


def separable(data) -> bool:
    """Linear-programming oracle: is there (W, b) with a unit multiclass margin?"""
    X = np.array([f.to_array() for f, _ in data])
    X = (X - X.mean(0)) / X.std(0)
    y = [label.index for _, label in data]
    k, d = len(LABELS), X.shape[1] + 1
    rows = []
    for x, t in zip(np.hstack([X, np.ones((len(X), 1))]), y):
        for j in range(k):
            if j != t:
                row = np.zeros(k * d)
                row[j * d:(j + 1) * d] = x
                row[t * d:(t + 1) * d] = -x
                rows.append(row)
    res = linprog(np.zeros(k * d), A_ub=np.array(rows), b_ub=-np.ones(len(rows)),
                  bounds=[(None, None)] * (k * d), method="highs")
    return res.status == 0


def featured(data, groups=None) -> list[FeaturedCase]:
    return [FeaturedCase(f"c{i}", f, label, groups[i] if groups else f"c{i}")
            for i, (f, label) in enumerate(data)]


def fv(*values) -> FeatureVector:
    return FeatureVector(*values)


# -- feature vectors ----------------------------------------------------------------

def test_feature_vector_round_trip():
    f = fv(1.5, 200.0, 3.0, 12.0, 0.75)
    assert FeatureVector.from_array(f.to_array()) == f
    assert tuple(f.to_array()) == (1.5, 200.0, 3.0, 12.0, 0.75)


@pytest.mark.parametrize("values", [(math.nan, 1, 1, 1, 0.5), (1, math.inf, 1, 1, 0.5), (1, 1, -1, 1, 0.5),
                                    (1, 1, 1, -1, 0.5), (1, 1, 1, 1, 1.5), (1, 1, 1, 1, -0.1)])
def test_feature_vector_rejects_bad_values(values):
    with pytest.raises(BadFeature):
        fv(*values)


def test_feature_vector_needs_five_values():
    with pytest.raises(BadFeature):
        FeatureVector.from_array([1, 2, 3])


# -- augmentation -----------------------------------------------------------------

def test_compose_flips_is_a_group():
    for a in AUGMENTATIONS:
        assert compose_flips(a, "identity") == a
        assert compose_flips(a, a) == "identity"
        for b in AUGMENTATIONS:
            assert compose_flips(a, b) == compose_flips(b, a)
    assert compose_flips("h", "v") == "hv"


def test_augment_one_case():
    s = preset_scene("B")
    case = LabeledCase("b1", s.white, s.check, s.label, "B", truth=s.grid)
    out = augment([case])
    assert [c.augmentation for c in out] == ["identity", "h", "v", "hv"]
    assert {c.group for c in out} == {"b1"} and all(c.label is Label.FAIL2 for c in out)
    assert out[1].white_image == flip_h(s.white) and out[1].check_image == flip_h(s.check)
    assert out[1].truth.mask.bits.tolist() == s.grid.mask.bits[:, ::-1].tolist()


def test_augment_preserves_label_histogram(tmp_path):
    rows = [dict(case_id=f"k{i}", white_png="w.png", check_png="c.png", label=label.value, scenario="",
                 augmentation="identity")
            for i, label in enumerate([Label.FAIL1] * 20 + [Label.FAIL2] * 104 + [Label.PASS] * 29)]
    write_manifest(tmp_path / "m.csv", rows)
    out = augment_rows(read_manifest(tmp_path / "m.csv"))
    assert len(out) == 612
    assert [sum(r.label is label for r in out) for label in (Label.FAIL1, Label.FAIL2, Label.PASS)] == [80, 416, 116]
    assert len({r.case_id for r in out}) == 612


# -- training -----------------------------------------------------------------------

def test_toy_blobs_are_learned():
    data = blobs()
    assert separable(data)
    model = train_svm(data)
    assert classify_many(model, [f for f, _ in data]) == [label for _, label in data]
    for center, label in zip(CENTERS, LABELS):
        assert classify(model, center) is label


def test_overlapping_blobs_are_not_separable():
    data = blobs()
    x = data[0][0]
    data.append((x, Label.FAIL1))
    assert not separable(data)


PROBE = np.array([[a, 100, 1, b, r] for a in np.linspace(-4, 12, 9) for b in np.linspace(0, 600, 9)
                  for r in (0.1, 0.5, 0.9)])


@pytest.mark.parametrize("seed", range(3))
def test_duplicated_data_gives_same_decisions(seed):
    data = blobs(seed)
    once = train_svm(data)
    twice = train_svm([p for p in data for _ in range(2)])
    assert np.array_equal(np.argmax(once.decision(PROBE), 1), np.argmax(twice.decision(PROBE), 1))


@given(st.floats(1e-3, 1e3))
def test_positive_scaling_keeps_labels(s):
    model = train_svm(blobs())
    assert np.array_equal(np.argmax(model.decision(PROBE), 1), np.argmax(model.scaled(s).decision(PROBE), 1))


def test_ties_follow_class_order():
    zero = SvmModel((0.0,) * 5, (1.0,) * 5, ((0.0,) * 5,) * 3, (0.0, 0.0, 0.0))
    assert classify(zero, fv(1, 2, 3, 4, 0.5)) is Label.PASS
    fail_tie = replace(zero, biases=(0.0, 1.0, 1.0))
    assert classify(fail_tie, fv(1, 2, 3, 4, 0.5)) is Label.FAIL1


def test_classify_rejects_bad_input():
    model = train_svm(blobs())
    with pytest.raises(BadFeature):
        classify(model, np.array([1, 2, math.nan, 4, 0.5]))
    with pytest.raises(BadFeature):
        classify(model, np.ones(4))


@given(hnp.arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)))
def test_classify_is_total(x):
    assert classify(train_svm(blobs()), x) in LABELS


def test_degenerate_training_sets():
    data = blobs()
    with pytest.raises(DegenerateTrainingSet):
        train_svm([p for p in data if p[1] is Label.PASS])
    with pytest.raises(DegenerateTrainingSet):
        train_svm(data[:3] + data[30:32])
    with pytest.raises(BadFeature):
        train_svm([(np.array([1, 1, 1, math.nan, 0]), label) for _, label in data])


def test_training_is_reproducible():
    data = blobs(4)
    assert train_svm(data).dumps() == train_svm(data).dumps()
    assert train_svm(data, seed=1).dumps() != train_svm(data, seed=2).dumps()


def test_model_round_trip(tmp_path):
    model = train_svm(blobs())
    model.save(tmp_path / "m.txt")
    back = SvmModel.load(tmp_path / "m.txt")
    assert back == model and back.dumps() == model.dumps()


@pytest.mark.parametrize("mutate", [lambda t: "garbage\n",
                                    lambda t: t.replace("solvis-linear-svm 1", "solvis-linear-svm 9"),
                                    lambda t: t.replace("classes Pass Fail1 Fail2", "classes Fail1 Pass Fail2"),
                                    lambda t: "\n".join(line for line in t.splitlines() if not line.startswith("scale")),
                                    lambda t: t.replace("scale ", "scale -1 ", 1),
                                    lambda t: t.replace("mean ", "mean x ", 1)])
def test_model_format_errors(mutate):
    text = train_svm(blobs()).dumps()
    with pytest.raises(ModelFormatError):
        SvmModel.loads(mutate(text))


@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-1e5, 1e5)))
def test_normalize_round_trip(x):
    model = train_svm(blobs())
    assert np.allclose(model.denormalize(model.normalize(x)), x, rtol=0, atol=1e-9)


def test_objective_settles(synthetic612):
    data = [(c.features, c.label) for c in synthetic612.cases]
    _, trace = train_svm_traced(data)
    start = trace.objective.shape[1] // 10
    tail = trace.objective[:, start:]
    assert np.all(np.diff(tail, axis=1) <= 1e-6)


# -- evaluation -----------------------------------------------------------------------

def test_confusion_examples():
    truth = [Label.PASS, Label.FAIL1, Label.FAIL2, Label.FAIL2]
    perfect = confusion_matrix(truth, truth)
    assert np.array_equal(perfect.counts, np.diag([1, 1, 2]))
    assert perfect.accuracy == 1.0 and set(perfect.class_accuracy().values()) == {1.0}
    cm = confusion_matrix([Label.FAIL1] * 76 + [Label.PASS] * 4, [Label.FAIL1] * 80)
    assert cm.class_accuracy()[Label.FAIL1] == 0.95
    assert "95.00%" in cm.format()
    with pytest.raises(ValueError):
        confusion_matrix(truth, truth[:-1])


def test_empty_confusion_is_nan():
    assert math.isnan(ConfusionMatrix(np.zeros((3, 3), dtype=np.int64)).accuracy)


@given(st.integers(2, 6), st.integers(0, 1000), st.lists(st.sampled_from(LABELS), min_size=8, max_size=40))
def test_fold_partition(k, seed, labels):
    cases = [FeaturedCase(f"c{i}-{a}", fv(0, 0, 0, 0, 0), label, f"c{i}", a)
             for i, label in enumerate(labels) for a in AUGMENTATIONS]
    folds = fold_assignment(cases, k, seed)
    assert len(folds) == len(cases) and set(folds) <= set(range(k))
    by_group = {}
    for case, f in zip(cases, folds):
        assert by_group.setdefault(case.group, f) == f
    for label in LABELS:
        sizes = [sum(1 for c, f in zip(cases, folds) if c.label is label and f == j) // 4 for j in range(k)]
        assert max(sizes) - min(sizes) <= 1


def test_fold_assignment_errors():
    cases = featured(blobs())
    with pytest.raises(ValueError):
        fold_assignment(cases, 1)
    mixed = [FeaturedCase("a", fv(0, 0, 0, 0, 0), Label.PASS, "g"), FeaturedCase("b", fv(0, 0, 0, 0, 0), Label.FAIL1, "g")]
    with pytest.raises(ValueError):
        fold_assignment(mixed, 2)


def test_two_fold_toy():
    report = kfold_validate(featured(blobs()), 2)
    assert report.mode == "cv" and report.fold_accuracy == (1.0, 1.0)
    assert report.confusion.total == 90


# -- end to end ----------------------------------------------------------------------

@pytest.mark.parametrize("cat, label", [("A", Label.PASS), ("C", Label.FAIL2), ("D", Label.FAIL1)])
def test_end_to_end(model, cat, label):
    s = preset_scene(cat, seed=17)
    assert classify(model, extract_features(s.white, s.check)) is label
    assert classify(model, extract_features(flip_h(s.white), flip_h(s.check))) is label


def test_particle_and_turbid_feature_regimes():
    b = preset_scene("B", seed=17)
    fb = extract_features(b.white, b.check)
    assert fb.particle_pixel_count > 100 and fb.superposition_ratio >= 0.7
    d = preset_scene("D", seed=17)
    assert extract_features(d.white, d.check).superposition_ratio <= 0.3


# -- files -------------------------------------------------------------------------

def test_feature_dump_round_trip(tmp_path):
    cases = featured(blobs(n=3))
    write_feature_dump(tmp_path / "f.csv", cases)
    back = read_feature_dump(tmp_path / "f.csv")
    assert [(i, f, label) for i, f, label in back] == [(c.case_id, c.features, c.label) for c in cases]


def test_manifest_rows_load_flipped(tmp_path):
    sg.generate_dataset({Label.PASS: 1, Label.FAIL1: 0, Label.FAIL2: 0}, 2, tmp_path)
    rows = augment_rows(read_manifest(tmp_path / "manifest.csv"))
    assert [r.augmentation for r in rows] == list(AUGMENTATIONS)
    plain, flipped = rows[0].load(), rows[1].load()
    assert flipped.white_image == flip_h(plain.white_image)
    assert flipped.group == plain.group == rows[0].case_id
