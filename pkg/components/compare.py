"""Sampler comparisons over a valley registry.

Sampler A is the reference and B the comparator: which of A's valleys B also found,
how valley parameters are distributed among shared and A-only valleys, and how the
upper-state counts of the two groups compare.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from components.ising import SpinConfiguration
from components.valley import ValleyEntry, ValleyRegistry
from utils.errors import DataError

logger = logging.getLogger(__name__)

PARAMETERS = ("e_lm", "e_act", "dos_bottom", "width_w", "n_lv")
EXTRA_PARAMETERS = ("e_max", "n_low", "n_up", "width_intercept")
BUCKET_PARAMETERS = ("n_low", "e_act", "width_w")
DEFAULT_BINS = 30
DEFAULT_BUCKETS = 4


@dataclass(frozen=True)
class Partition:
    reference: str
    comparator: str
    a_only: Tuple[SpinConfiguration, ...]
    both: Tuple[SpinConfiguration, ...]
    b_only: Tuple[SpinConfiguration, ...]
    cut: Optional[int] = None

    @property
    def a_total(self) -> int:
        return len(self.a_only) + len(self.both)

    @property
    def missed_percentage(self) -> Optional[float]:
        """Share of A's valleys that B missed, as a fraction; None when A found nothing."""
        return len(self.a_only) / self.a_total if self.a_total else None

    def counts(self) -> Dict[str, int]:
        return {"a_only": len(self.a_only), "both": len(self.both), "b_only": len(self.b_only)}


def _check_sampler(registry: ValleyRegistry, name: str) -> None:
    if name not in registry.samplers:
        raise DataError(f"unknown sampler {name!r}; registered: {', '.join(registry.samplers) or 'none'}")


def coincidence(
    registry: ValleyRegistry,
    a: str,
    b: str,
    cut_a: Optional[int] = None,
    cut_b: Optional[int] = None,
) -> Partition:
    """Split valleys into A-only, both and B-only; each part is ordered by spin string.

    ``cut_a``/``cut_b`` restrict a campaign sampler to valleys first found before that
    cycle.
    """
    _check_sampler(registry, a)
    _check_sampler(registry, b)
    in_a = set(registry.tagged(a, cut_a))
    in_b = set(registry.tagged(b, cut_b))
    ordered = registry.keys()
    return Partition(
        reference=a,
        comparator=b,
        a_only=tuple(lm for lm in ordered if lm in in_a and lm not in in_b),
        both=tuple(lm for lm in ordered if lm in in_a and lm in in_b),
        b_only=tuple(lm for lm in ordered if lm in in_b and lm not in in_a),
        cut=cut_b,
    )


def parameter_value(entry: ValleyEntry, parameter: str) -> Optional[float]:
    if parameter == "e_lm":
        return entry.e_lm
    if parameter not in PARAMETERS + EXTRA_PARAMETERS:
        raise ValueError(f"unknown valley parameter {parameter!r}")
    if entry.record is None:
        return None
    value = getattr(entry.record, parameter)
    return None if value is None else float(value)


@dataclass(frozen=True)
class HistogramBin:
    low: float
    high: float
    all: int
    both: int
    a_only: int


@dataclass(frozen=True)
class LayeredHistogram:
    parameter: str
    bins: Tuple[HistogramBin, ...]
    excluded: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(b.low, b.high, b.all, b.both, b.a_only) for b in self.bins],
            columns=["bin_low", "bin_high", "all", "both", "a_only"],
        )


def _values(registry: ValleyRegistry, keys: Sequence[SpinConfiguration], parameter: str) -> Tuple[List[float], int]:
    values, missing = [], 0
    for lm in keys:
        value = parameter_value(registry.get(lm), parameter)
        if value is None:
            missing += 1
        else:
            values.append(value)
    return values, missing


def parameter_histograms(
    registry: ValleyRegistry, partition: Partition, parameter: str, bins: int = DEFAULT_BINS
) -> LayeredHistogram:
    """Equal-width histogram of A's valleys, layered into all / both / A-only.

    Valleys without a value for ``parameter`` are left out and counted in ``excluded``.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    both, missing_both = _values(registry, partition.both, parameter)
    a_only, missing_a = _values(registry, partition.a_only, parameter)
    excluded = missing_both + missing_a
    if excluded:
        logger.info("histogram %s: %d valleys without a value excluded", parameter, excluded)
    combined = both + a_only
    if not combined:
        return LayeredHistogram(parameter, (), excluded)
    lo, hi = min(combined), max(combined)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts_both = np.histogram(both, edges)[0]
    counts_a = np.histogram(a_only, edges)[0]
    layers = tuple(
        HistogramBin(float(edges[i]), float(edges[i + 1]), int(counts_both[i] + counts_a[i]), int(counts_both[i]), int(counts_a[i]))
        for i in range(bins)
    )
    return LayeredHistogram(parameter, layers, excluded)


@dataclass(frozen=True)
class RatioResult:
    bucket: str
    sum_up_coincident: int
    sum_up_unique: int
    coincident_valleys: int
    unique_valleys: int
    ratio: Optional[float]
    mean_ratio: Optional[float]

    @property
    def defined(self) -> bool:
        return self.ratio is not None


def _ratio(bucket: str, coincident: Sequence[int], unique: Sequence[int]) -> RatioResult:
    sum_c, sum_u = int(sum(coincident)), int(sum(unique))
    ratio = sum_c / sum_u if sum_u > 0 else None
    mean_ratio = None
    if coincident and unique and sum_u > 0:
        mean_ratio = (sum_c / len(coincident)) / (sum_u / len(unique))
    return RatioResult(bucket, sum_c, sum_u, len(coincident), len(unique), ratio, mean_ratio)


def quartile_edges(values: Sequence[float], buckets: int = DEFAULT_BUCKETS) -> np.ndarray:
    """Distinct quantile edges splitting ``values`` into at most ``buckets`` groups."""
    if not values:
        return np.array([])
    return np.unique(np.quantile(np.asarray(values, dtype=np.float64), np.linspace(0.0, 1.0, buckets + 1)))


def boa_ratio(
    registry: ValleyRegistry,
    partition: Partition,
    buckets: Optional[str] = None,
    bucket_count: int = DEFAULT_BUCKETS,
    edges: Optional[Sequence[float]] = None,
) -> List[RatioResult]:
    """Summed n_up over shared valleys divided by summed n_up over A-only valleys.

    The overall ratio comes first, labelled ``all``. With ``buckets`` set to a valley
    parameter, valleys are also grouped by that parameter (quantile edges over A's
    valleys unless ``edges`` is given; right edges inclusive) and one result is emitted
    per bucket. A ratio is undefined when its A-only sum is zero. ``mean_ratio`` is the
    ratio of per-valley means.
    """
    def usable(keys):
        out = []
        for lm in keys:
            entry = registry.get(lm)
            if entry.record is not None and entry.record.n_up is not None:
                out.append(entry)
        return out

    both = usable(partition.both)
    unique = usable(partition.a_only)
    results = [_ratio("all", [e.record.n_up for e in both], [e.record.n_up for e in unique])]
    if buckets is None:
        return results
    if buckets not in BUCKET_PARAMETERS:
        raise ValueError(f"cannot bucket by {buckets!r}; choose one of {', '.join(BUCKET_PARAMETERS)}")

    keyed = [(e, parameter_value(e, buckets)) for e in both + unique]
    keyed = [(e, v) for e, v in keyed if v is not None]
    cuts = np.asarray(edges, dtype=np.float64) if edges is not None else quartile_edges([v for _, v in keyed], bucket_count)
    if cuts.size < 2:
        if cuts.size == 1:
            cuts = np.array([cuts[0], cuts[0]])
        else:
            return results
    shared = {id(e) for e in both}
    groups: List[Tuple[List[int], List[int]]] = [([], []) for _ in range(cuts.size - 1)]
    for entry, value in keyed:
        slot = int(np.clip(np.searchsorted(cuts, value, side="right") - 1, 0, cuts.size - 2))
        groups[slot][0 if id(entry) in shared else 1].append(entry.record.n_up)
    for i, (coincident, unique_ups) in enumerate(groups):
        label = f"{buckets}[{cuts[i]:.6g},{cuts[i + 1]:.6g}]"
        results.append(_ratio(label, coincident, unique_ups))
    return results


def ratios_frame(results: Sequence[RatioResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            (r.bucket, r.sum_up_coincident, r.sum_up_unique, r.ratio, r.defined, r.mean_ratio,
             r.coincident_valleys, r.unique_valleys)
            for r in results
        ],
        columns=["bucket", "sum_coinc", "sum_unique", "ratio", "defined", "mean_ratio", "n_coinc", "n_unique"],
    )


@dataclass
class ComparisonReport:
    reference: str
    comparator: str
    partition: Partition
    histograms: Dict[str, LayeredHistogram] = field(default_factory=dict)
    ratios: List[RatioResult] = field(default_factory=list)
    missed_by_cut: Dict[int, Optional[float]] = field(default_factory=dict)
    patterns: Optional[int] = None

    def summary(self) -> dict:
        counts = self.partition.counts()
        a_total = self.partition.a_total
        b_total = counts["both"] + counts["b_only"]
        out = {
            "reference": self.reference,
            "comparator": self.comparator,
            "counts": counts,
            "reference_valleys": a_total,
            "comparator_valleys": b_total,
            "missed_percentage": self.partition.missed_percentage,
            "missed_percentage_by_cut": {str(cut): value for cut, value in sorted(self.missed_by_cut.items())},
            "histogram_exclusions": {name: h.excluded for name, h in sorted(self.histograms.items())},
            "overall_ratio": self.ratios[0].ratio if self.ratios else None,
            "overall_ratio_defined": bool(self.ratios and self.ratios[0].defined),
        }
        if self.patterns:
            out["training_patterns"] = self.patterns
            out["reference_valleys_per_pattern"] = a_total / self.patterns
            out["comparator_valleys_per_pattern"] = b_total / self.patterns
        return out


def build_report(
    registry: ValleyRegistry,
    reference: str,
    comparator: str,
    *,
    parameters: Sequence[str] = PARAMETERS,
    bins: int = DEFAULT_BINS,
    bucket_parameters: Sequence[str] = BUCKET_PARAMETERS,
    bucket_count: int = DEFAULT_BUCKETS,
    cut_points: Sequence[int] = (),
    patterns: Optional[int] = None,
) -> ComparisonReport:
    partition = coincidence(registry, reference, comparator)
    report = ComparisonReport(reference, comparator, partition, patterns=patterns)
    for parameter in parameters:
        report.histograms[parameter] = parameter_histograms(registry, partition, parameter, bins)
    report.ratios = boa_ratio(registry, partition)
    for parameter in bucket_parameters:
        report.ratios += boa_ratio(registry, partition, parameter, bucket_count)[1:]
    for cut in sorted(set(cut_points)):
        report.missed_by_cut[cut] = coincidence(registry, reference, comparator, cut_b=cut).missed_percentage
    if not report.ratios[0].defined:
        logger.warning("%s vs %s: overall upper-state ratio undefined (no A-only valleys with n_up)", reference, comparator)
    return report


def write_report(report: ComparisonReport, directory: Union[str, Path]) -> List[Path]:
    """Histogram CSVs, a ratio CSV and a JSON summary named after the two samplers."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{report.reference}_vs_{report.comparator}"
    written = []
    for parameter, histogram in sorted(report.histograms.items()):
        path = directory / f"{stem}_hist_{parameter}.csv"
        histogram.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        written.append(path)
    path = directory / f"{stem}_ratios.csv"
    ratios_frame(report.ratios).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    written.append(path)
    path = directory / f"{stem}_summary.json"
    path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)
    return written
