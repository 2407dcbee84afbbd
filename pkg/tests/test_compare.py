import json

import numpy as np
import pytest

from components.compare import (
    boa_ratio,
    build_report,
    coincidence,
    parameter_histograms,
    quartile_edges,
    ratios_frame,
    write_report,
)
from components.ising import RandomSource, SpinConfiguration, random_model
from components.mc_kernels import Schedule, default_regimes, sa_campaign
from components.samplers import sample_exhaustive, sample_sa
from components.valley import (
    ValleyRecord,
    ValleyRegistry,
    WarmingConfig,
    characterize_valley,
    register_campaign,
    register_sample,
)
from utils.errors import DataError

S = SpinConfiguration.from_string
M1, M2, M3, M4 = S("+++"), S("++-"), S("+-+"), S("---")


def _record(lm, e_lm, n_low, n_up, e_act=1.0):
    return ValleyRecord(lm, e_lm, e_act, e_act, n_low + n_up, n_low, n_up, n_low / e_act, 1.0, 1.0)


def _registry(ups=(10, 200, 260, 5), lows=(1, 2, 3, 4)) -> ValleyRegistry:
    """qa finds M1..M3, sa finds M2..M4."""
    registry = ValleyRegistry(["qa", "sa"])
    for lm, energy in zip((M1, M2, M3), (-3.0, -2.0, -1.0)):
        registry.add(lm, energy, "qa")
    for cycle, (lm, energy) in enumerate(zip((M2, M3, M4), (-2.0, -1.0, 0.0))):
        registry.add(lm, energy, "sa", cycle * 10)
    for lm, energy, up, low in zip((M1, M2, M3, M4), (-3.0, -2.0, -1.0, 0.0), ups, lows):
        registry.attach(_record(lm, energy, low, up))
    return registry


def test_partition_of_overlapping_samplers():
    partition = coincidence(_registry(), "qa", "sa")
    assert partition.a_only == (M1,)
    assert partition.both == (M2, M3)
    assert partition.b_only == (M4,)
    assert partition.missed_percentage == pytest.approx(1 / 3)


def test_partition_with_cycle_cut():
    partition = coincidence(_registry(), "qa", "sa", cut_b=5)
    assert partition.both == (M2,)
    assert partition.a_only == (M1, M3)
    assert partition.cut == 5


def test_partition_rejects_unknown_sampler():
    with pytest.raises(DataError, match="unknown sampler"):
        coincidence(_registry(), "qa", "dw")


def test_missed_percentage_undefined_without_reference_valleys():
    registry = ValleyRegistry(["qa", "sa"])
    registry.add(M4, 0.0, "sa")
    assert coincidence(registry, "qa", "sa").missed_percentage is None


def test_histogram_layers_add_up():
    registry = _registry()
    partition = coincidence(registry, "qa", "sa")
    histogram = parameter_histograms(registry, partition, "e_lm", bins=4)
    assert len(histogram.bins) == 4
    assert all(b.all == b.both + b.a_only for b in histogram.bins)
    assert sum(b.all for b in histogram.bins) == 3
    assert sum(b.a_only for b in histogram.bins) == 1
    assert histogram.bins[0].low == -3.0 and histogram.bins[-1].high == -1.0
    frame = histogram.to_frame()
    assert list(frame.columns) == ["bin_low", "bin_high", "all", "both", "a_only"]


def test_histogram_of_single_value_and_exclusions():
    registry = ValleyRegistry(["qa", "sa"])
    registry.add(M1, -1.0, "qa")
    registry.add(M2, -1.0, "qa")
    registry.attach(_record(M1, -1.0, 1, 1))
    partition = coincidence(registry, "qa", "sa")
    histogram = parameter_histograms(registry, partition, "e_act", bins=2)
    assert histogram.excluded == 1
    assert histogram.bins[0].low == 0.5 and histogram.bins[-1].high == 1.5
    assert sum(b.all for b in histogram.bins) == 1


def test_histogram_of_empty_partition():
    registry = ValleyRegistry(["qa", "sa"])
    histogram = parameter_histograms(registry, coincidence(registry, "qa", "sa"), "e_lm")
    assert histogram.bins == ()


def test_upper_state_ratio():
    registry = _registry(ups=(100, 200, 260, 5))
    (overall,) = boa_ratio(registry, coincidence(registry, "qa", "sa"))
    assert overall.bucket == "all"
    assert overall.ratio == pytest.approx(4.6)
    assert overall.mean_ratio == pytest.approx(2.3)
    assert overall.defined


def test_upper_state_ratio_undefined_when_unique_sum_is_zero():
    registry = _registry(ups=(0, 200, 260, 5))
    (overall,) = boa_ratio(registry, coincidence(registry, "qa", "sa"))
    assert not overall.defined
    assert overall.ratio is None


def test_bucketed_ratio_with_explicit_edges():
    registry = _registry(ups=(2, 6, 4, 5), lows=(1, 1, 3, 4))
    results = boa_ratio(registry, coincidence(registry, "qa", "sa"), "n_low", edges=[0.0, 2.0, 4.0])
    assert [r.bucket for r in results] == ["all", "n_low[0,2]", "n_low[2,4]"]
    assert results[1].ratio == pytest.approx(3.0)
    assert results[1].coincident_valleys == 1 and results[1].unique_valleys == 1
    assert not results[2].defined
    frame = ratios_frame(results)
    assert list(frame["defined"]) == [True, True, False]


def test_bucketing_rejects_unknown_parameter():
    registry = _registry()
    with pytest.raises(ValueError):
        boa_ratio(registry, coincidence(registry, "qa", "sa"), "e_lm")


def test_quartile_edges_are_distinct():
    assert list(quartile_edges([1.0, 1.0, 1.0])) == [1.0]
    assert list(quartile_edges([0.0, 1.0, 2.0, 3.0, 4.0])) == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert quartile_edges([]).size == 0


def test_report_files_and_summary(tmp_path):
    registry = _registry()
    report = build_report(registry, "qa", "sa", bins=5, cut_points=(5, 100), patterns=3)
    summary = report.summary()
    assert summary["counts"] == {"a_only": 1, "both": 2, "b_only": 1}
    assert summary["missed_percentage_by_cut"] == {"5": pytest.approx(2 / 3), "100": pytest.approx(1 / 3)}
    assert summary["reference_valleys_per_pattern"] == 1.0
    written = write_report(report, tmp_path / "compare")
    names = sorted(p.name for p in written)
    assert "qa_vs_sa_summary.json" in names
    assert "qa_vs_sa_ratios.csv" in names
    assert "qa_vs_sa_hist_e_act.csv" in names
    loaded = json.loads((tmp_path / "compare" / "qa_vs_sa_summary.json").read_text(encoding="utf-8"))
    assert loaded["reference"] == "qa"


def test_exhaustive_comparator_misses_nothing():
    model = random_model(12, RandomSource(23), integer=True)
    fast = sample_sa(model, 50, Schedule.geometric(3.0, 0.8), RandomSource(24), name="fast")
    registry = register_sample(ValleyRegistry(), fast, model)
    register_sample(registry, sample_exhaustive(model, name="all"), model)
    partition = coincidence(registry, "fast", "all")
    assert partition.a_only == ()
    assert partition.missed_percentage == 0.0


def _random_registry(generator: np.random.Generator) -> ValleyRegistry:
    registry = ValleyRegistry(["a", "b"])
    for index in generator.choice(64, size=int(generator.integers(1, 30)), replace=False).tolist():
        lm = SpinConfiguration.from_index(index, 6)
        e_lm = float(generator.normal())
        tags = [name for name in ("a", "b") if generator.random() < 0.6] or ["a"]
        for name in tags:
            registry.add(lm, e_lm, name)
        if generator.random() < 0.8:
            n_low, n_up = int(generator.integers(1, 20)), int(generator.integers(0, 50))
            e_act = float(generator.uniform(0.1, 3.0))
            registry.attach(ValleyRecord(lm, e_lm, e_act, e_act, n_low + n_up, n_low, n_up, n_low / e_act, 1.0, 2.0))
    return registry


def test_partition_and_histogram_identities_on_random_registries():
    generator = np.random.default_rng(99)
    for _ in range(100):
        registry = _random_registry(generator)
        partition = coincidence(registry, "a", "b")
        in_a, in_b = set(registry.tagged("a")), set(registry.tagged("b"))
        assert set(partition.a_only) | set(partition.both) == in_a
        assert set(partition.both) | set(partition.b_only) == in_b
        assert not set(partition.a_only) & set(partition.both)
        assert set(partition.both) == in_a & in_b
        if in_a:
            assert partition.missed_percentage == pytest.approx(len(in_a - in_b) / len(in_a))
        else:
            assert partition.missed_percentage is None
        for parameter in ("e_lm", "e_act", "n_lv"):
            histogram = parameter_histograms(registry, partition, parameter, bins=7)
            assert all(b.all == b.both + b.a_only for b in histogram.bins)
            counted = sum(b.all for b in histogram.bins) + histogram.excluded
            assert counted == len(in_a)
        overall = boa_ratio(registry, partition)[0]
        ups_both = sum(registry.get(lm).record.n_up for lm in partition.both if registry.get(lm).record)
        ups_unique = sum(registry.get(lm).record.n_up for lm in partition.a_only if registry.get(lm).record)
        assert (overall.sum_up_coincident, overall.sum_up_unique) == (ups_both, ups_unique)
        assert overall.defined == (ups_unique > 0)


@pytest.mark.slow
def test_upper_state_ratio_is_stable_across_warming_seeds():
    model = random_model(16, RandomSource(51))
    short = sample_sa(model, 20, Schedule.geometric(3.0, 0.5), RandomSource(52), name="short")
    campaign = sa_campaign(model, default_regimes(3.0, rates=(0.9,)), 300, RandomSource(53), workers=2)

    def registry_for(seed: int) -> ValleyRegistry:
        registry = register_campaign(register_sample(ValleyRegistry(), short, model), campaign, model, "sa")
        for i, lm in enumerate(registry.tagged("short")):
            registry.attach(characterize_valley(model, lm, WarmingConfig(chains=400), RandomSource(seed).child(i), workers=2))
        return registry

    ratios = []
    for seed in (61, 62, 63):
        report = build_report(registry_for(seed), "short", "sa", bucket_parameters=())
        summary = report.summary()
        if not summary["overall_ratio_defined"]:
            assert summary["overall_ratio"] is None
            continue
        assert summary["overall_ratio"] >= 0.0
        if report.partition.both:
            ratios.append(summary["overall_ratio"])
    if len(ratios) == 3:
        mean = sum(ratios) / 3
        assert all(abs(r - mean) <= 0.1 * mean for r in ratios)
