import itertools
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from leukattn import experiments as EX
from leukattn.experiments import (
    AblationRow,
    AblationTable,
    DataConfig,
    Settings,
    apply_variant,
    compare_variants,
    run_ablation,
    run_monte_carlo,
    summarize_runs,
)
from leukattn.ingest import scan_dataset
from leukattn.model import ModelConfig
from leukattn.splitter import ClassCounts, Split, check_split, fixed_split, read_split
from leukattn.training import TrainConfig

SMALL_TARGETS = {
    Split.TRAINING: ClassCounts(8, 6),
    Split.VALIDATION: ClassCounts(3, 3),
    Split.TEST: ClassCounts(3, 3),
}
QUICK = Settings(
    model=ModelConfig(backbone_id="tiny", pretrained=False, input_size=32, tiny_width=16),
    train=TrainConfig(max_epochs=2, batch_size=16, mixed_precision=False, device="cpu"),
    data=DataConfig(cache_images=True),
)


def two_pass(values):
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def test_summarize_hand_vector():
    s = summarize_runs([0.96, 0.98, 1.00])
    assert s.mean == pytest.approx(0.98, abs=1e-15)
    assert s.std == pytest.approx(0.02, abs=1e-15)
    # percentile with linear interpolation on 3 points: rank 0.05 and 1.95
    assert s.ci_low == pytest.approx(0.96 + 0.05 * 0.02)
    assert s.ci_high == pytest.approx(0.98 + 0.95 * 0.02)
    assert s.n == 3


def test_summarize_degenerate():
    c = summarize_runs([0.98] * 7)
    assert (c.mean, c.std, c.ci_low, c.ci_high) == pytest.approx((0.98, 0.0, 0.98, 0.98))
    one = summarize_runs([0.91])
    assert one.mean == 0.91 and one.std is None and one.ci_low == one.ci_high == 0.91
    with pytest.raises(ValueError):
        summarize_runs([])


def test_summarize_against_two_pass_oracle():
    rng = np.random.default_rng(0)
    for n in (2, 5, 100, 1000):
        v = list(rng.normal(0.98, 0.004, n))
        s = summarize_runs(v)
        mean, std = two_pass(v)
        assert s.mean == pytest.approx(mean, abs=1e-12)
        assert s.std == pytest.approx(std, abs=1e-12)
        assert s.ci_low <= s.mean <= s.ci_high


def test_compare_identical_runs():
    a = [0.9, 0.95, 0.97]
    r = compare_variants(a, list(a), names=("full", "no-attention"))
    assert r.no_difference and r.p_value == 1.0 and r.deltas == [0.0, 0.0, 0.0]
    assert (r.variant_a, r.variant_b) == ("full", "no-attention")


def test_compare_constant_shift_significant():
    rng = np.random.default_rng(1)
    b = rng.normal(0.95, 0.01, 100)
    a = b + 0.01 + rng.normal(0, 1e-4, 100)
    r = compare_variants(a, b)
    assert r.p_value < 0.001 and r.t_p_value < 0.001
    assert len(r.deltas) == 100 and 0 <= r.p_value <= 1


def exact_wilcoxon_p(d):
    """Two-sided p by enumerating all 2^n sign assignments of the ranks."""
    ranks = np.argsort(np.argsort(np.abs(d))) + 1  # no ties in |d| here
    t_obs = ranks[d > 0].sum()
    dist = [sum(r for r, s in zip(ranks, signs) if s) for signs in
            itertools.product((0, 1), repeat=len(d))]
    dist = np.array(dist)
    lo = np.mean(dist <= t_obs)
    hi = np.mean(dist >= t_obs)
    return min(1.0, 2 * min(lo, hi))


@pytest.mark.parametrize("seed", range(6))
def test_wilcoxon_matches_exact_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 12))
    b = rng.random(n)
    d = rng.normal(0.01 * seed, 0.02, n)
    r = compare_variants(b + d, b)
    assert r.p_value == pytest.approx(exact_wilcoxon_p(np.array(r.deltas)), abs=1e-12)


def test_compare_unpaired_errors():
    with pytest.raises(ValueError):
        compare_variants([0.9, 0.8], [0.9])
    with pytest.raises(ValueError):
        compare_variants([0.9, 0.8], [0.7, 0.6], seeds_a=[0, 1], seeds_b=[1, 2])


def test_ablation_table_consistency(tmp_path):
    t = AblationTable.from_f1(0.9789, [("no-augmentation", 0.9350), ("no-attention", 0.9493)])
    assert t.rows[0].delta == 0.0
    for r in t.rows:
        assert r.delta == r.f1 - t.rows[0].f1
    lines = t.write(tmp_path / "a.tsv").read_text().splitlines()
    assert lines[0] == "configuration\tval_f1\tdelta" and len(lines) == 4
    assert len(AblationTable.from_f1(0.9, []).rows) == 1
    with pytest.raises(ValueError):
        AblationTable([AblationRow("full", 0.9, 0.0), AblationRow("x", 0.8, -0.2)])
    with pytest.raises(ValueError):
        AblationTable([AblationRow("x", 0.8, 0.0)])


def test_apply_variant():
    s = Settings()
    assert apply_variant(s, "no-attention").model.use_attention is False
    assert apply_variant(s, "no-focal-loss").train.loss == "ce"
    na = apply_variant(s, "no-augmentation").data
    assert not na.balance and not na.augment
    with pytest.raises(ValueError, match="unknown ablation variant"):
        apply_variant(s, "no-dropout")


@pytest.fixture(scope="module")
def smoke_manifest(smoke_dataset):
    return scan_dataset(smoke_dataset)


@pytest.mark.slow
def test_monte_carlo_three_iterations(smoke_manifest, tmp_path):
    s = run_monte_carlo(smoke_manifest, QUICK, tmp_path, n=3, base_seed=5, targets=SMALL_TARGETS)
    assert s.seeds == [5, 6, 7] and len(s.reports) == 3 and not s.failed
    splits = [read_split(tmp_path / f"iter_{i:03d}" / "split.tsv") for i in range(3)]
    for sp in splits:
        check_split(sp, smoke_manifest)
    assert len({tuple(sorted(sp.assignment.items())) for sp in splits}) == 3
    f1 = s.values("f1_weighted")
    oracle = summarize_runs(f1)
    assert s.metrics["f1_weighted"] == oracle
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_completed"] == 3

    # interrupted run: drop one iteration, resume, and get the same summary
    first = (tmp_path / "summary.json").read_text()
    (tmp_path / "iter_001" / "metrics.json").unlink()
    calls = []
    real = EX.run_training
    EX.run_training = lambda *a, **k: calls.append(1) or real(*a, **k)
    try:
        run_monte_carlo(smoke_manifest, QUICK, tmp_path, n=3, base_seed=5, targets=SMALL_TARGETS)
    finally:
        EX.run_training = real
    assert len(calls) == 1
    assert (tmp_path / "summary.json").read_text() == first


def test_monte_carlo_failed_iteration_recorded(smoke_manifest, tmp_path, monkeypatch):
    def fake(manifest, split, settings, out_dir, evaluate_test=True):
        if settings.train.seed == 1:
            raise RuntimeError("boom")
        from leukattn.evaluation import evaluate_predictions
        rep = evaluate_predictions([0, 1, 1], [0, 1, 0], [0.1, 0.9, 0.6])
        ck = type("C", (), {"epoch": 1})()
        return EX.TrainingResult(ck, None, rep, rep)

    monkeypatch.setattr(EX, "run_training", fake)
    s = run_monte_carlo(smoke_manifest, QUICK, tmp_path, n=3, base_seed=0, targets=SMALL_TARGETS)
    assert s.n_requested == 3 and len(s.reports) == 2
    assert s.failed[0]["iteration"] == 1 and "boom" in s.failed[0]["error"]
    assert (tmp_path / "iter_001" / "error.json").exists()
    assert json.loads((tmp_path / "summary.json").read_text())["failed"][0]["seed"] == 1
    with pytest.raises(ValueError):
        run_monte_carlo(smoke_manifest, QUICK, tmp_path, n=0)


@pytest.mark.slow
def test_ablation_desk_run(smoke_manifest, tmp_path):
    split = fixed_split(smoke_manifest, SMALL_TARGETS, seed=3)
    quick = replace(QUICK, train=replace(QUICK.train, max_epochs=1))
    table = run_ablation(smoke_manifest, split, quick, out_dir=tmp_path)
    assert [r.name for r in table.rows] == ["full", "no-augmentation", "no-attention", "no-focal-loss"]
    for r in table.rows:
        assert 0.0 <= r.f1 <= 1.0 and r.delta == r.f1 - table.rows[0].f1
    assert (tmp_path / "ablation.tsv").exists()
    only_full = run_ablation(smoke_manifest, split, quick, variants=())
    assert len(only_full.rows) == 1
    with pytest.raises(ValueError):
        run_ablation(smoke_manifest, split, quick, variants=("bogus",))
