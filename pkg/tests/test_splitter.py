from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leukattn.ingest import DatasetManifest, ImageRecord, Label, Source
from leukattn.splitter import (
    SPLITS,
    DEFAULT_TARGETS,
    ClassCounts,
    Split,
    SplitAssignment,
    SplitError,
    check_split,
    fixed_split,
    materialize,
    proportional_targets,
    random_resplit,
    read_split,
    write_split,
)

from conftest import make_manifest


def tally(split, manifest):
    """Brute-force per-split, per-class patient counts."""
    c = Counter()
    for pid, s in split.assignment.items():
        c[(s, manifest.patients[pid].label)] += 1
    return c


def test_cnmc_shaped_fixed_split():
    m = make_manifest(60, 41)
    split = fixed_split(m)
    c = tally(split, m)
    assert [c[(s, Label.ALL)] + c[(s, Label.HEM)] for s in SPLITS] == [80, 10, 11]
    for s in SPLITS:
        assert c[(s, Label.ALL)] == DEFAULT_TARGETS[s].all
        assert c[(s, Label.HEM)] == DEFAULT_TARGETS[s].hem
    check_split(split, m)


def test_ten_patient_targets_by_enumeration():
    m = make_manifest(6, 4)
    targets = {Split.TRAINING: ClassCounts(4, 2), Split.VALIDATION: ClassCounts(1, 1),
               Split.TEST: ClassCounts(1, 1)}
    for seed in range(50):
        c = tally(fixed_split(m, targets, seed), m)
        assert c == Counter({(Split.TRAINING, Label.ALL): 4, (Split.TRAINING, Label.HEM): 2,
                             (Split.VALIDATION, Label.ALL): 1, (Split.VALIDATION, Label.HEM): 1,
                             (Split.TEST, Label.ALL): 1, (Split.TEST, Label.HEM): 1})


def test_resplit_determinism_and_variety():
    m = make_manifest(60, 41)
    a = random_resplit(m, seed=3)
    assert a == random_resplit(m, seed=3)
    assert a.assignment != random_resplit(m, seed=4).assignment


def test_hundred_resplits_leak_free():
    m = make_manifest(60, 41)
    for seed in range(100):
        split = random_resplit(m, seed=seed)
        check_split(split, m)
        sets = [split.patients(s) for s in SPLITS]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        assert set().union(*sets) == set(m.patients)


def test_infeasible_targets_name_class_and_deficit():
    m = make_manifest(10, 5)
    with pytest.raises(SplitError, match=r"ALL.*deficit \+50"):
        fixed_split(m)


def test_zero_target_rejected():
    m = make_manifest(3, 3)
    t = {Split.TRAINING: ClassCounts(3, 1), Split.VALIDATION: ClassCounts(0, 1),
         Split.TEST: ClassCounts(0, 1)}
    with pytest.raises(SplitError, match=">= 1"):
        fixed_split(m, t)


def test_check_split_detects_leakage_and_missing():
    m = make_manifest(3, 3)
    split = fixed_split(m, {s: ClassCounts(1, 1) for s in SPLITS})
    bad = dict(split.assignment)
    bad.pop(next(iter(bad)))
    with pytest.raises(SplitError, match="unassigned"):
        check_split(SplitAssignment(bad), m)


def test_proportional_targets():
    m = make_manifest(60, 41)
    t = proportional_targets(m, (0.79, 0.15, 0.06))
    assert sum(t[s].all for s in SPLITS) == 60
    assert sum(t[s].hem for s in SPLITS) == 41
    assert all(t[s].all >= 1 and t[s].hem >= 1 for s in SPLITS)
    assert (t[Split.TRAINING].all, t[Split.VALIDATION].all, t[Split.TEST].all) == (47, 9, 4)
    check_split(random_resplit(m, t, 1), m)


def test_materialize_four_record_fixture():
    recs = [ImageRecord(f"{p}_{i}", f"/{p}_{i}.png", p, lab)
            for p, lab in (("P1", Label.ALL), ("P2", Label.HEM)) for i in range(2)]
    m = DatasetManifest.from_records(recs)
    split = SplitAssignment({"P1": Split.TRAINING, "P2": Split.TEST})
    tr, va, te = materialize(m, split)
    assert (len(tr), len(va), len(te)) == (2, 0, 2)


def test_materialize_empty_and_unassigned():
    assert materialize(DatasetManifest(()), SplitAssignment({})) == ([], [], [])
    m = make_manifest(1, 1)
    with pytest.raises(SplitError):
        materialize(m, SplitAssignment({"A000": Split.TRAINING}))


def test_materialize_keeps_originals_in_eval_splits():
    m = make_manifest(3, 3, images_per_patient=2)
    split = fixed_split(m, {s: ClassCounts(1, 1) for s in SPLITS})
    val_patient = sorted(split.patients(Split.VALIDATION))[0]
    extra = ImageRecord("rep", "/rep.png", val_patient, m.patients[val_patient].label,
                        Source.REPLICA, 1)
    m2 = DatasetManifest.from_records(list(m.records) + [extra])
    tr, va, te = materialize(m2, split)
    assert all(r.is_original for r in va + te)
    routed = {r.image_id for r in tr + va + te}
    assert routed == {r.image_id for r in m.records}


def test_image_counts_follow_patients():
    m = make_manifest(60, 41, images_per_patient=lambda lab, i: 1 + i % 7)
    split = fixed_split(m)
    tr, va, te = materialize(m, split)
    counts = split.counts(m)
    for recs, s in zip((tr, va, te), SPLITS):
        img = counts[s]["images"]
        assert len(recs) == img.all + img.hem


def test_split_file_round_trip_and_bytes(tmp_path):
    m = make_manifest(60, 41)
    a = write_split(fixed_split(m, seed=7), tmp_path / "a.tsv")
    b = write_split(fixed_split(m, seed=7), tmp_path / "b.tsv")
    assert a.read_bytes() == b.read_bytes()
    back = read_split(a)
    assert back == fixed_split(m, seed=7)


@settings(max_examples=40, deadline=None)
@given(n_all=st.integers(3, 30), n_hem=st.integers(3, 30), seed=st.integers(0, 2**31))
def test_stratification_property(n_all, n_hem, seed):
    m = make_manifest(n_all, n_hem, images_per_patient=1)
    t = proportional_targets(m, (0.7, 0.15, 0.15))
    split = random_resplit(m, t, seed)
    check_split(split, m)
    c = tally(split, m)
    for s in SPLITS:
        assert c[(s, Label.ALL)] == t[s].all and c[(s, Label.HEM)] == t[s].hem
