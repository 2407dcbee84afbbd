"""Local-valley characterization and the registry of discovered valleys.

A valley is identified by its local minimum (the fixed point of ``descend_zero_t``).
Its parameters come from simulated warming: escape rates at a ladder of temperatures
give the activation energy through an Arrhenius fit, and the distinct in-valley states
visited along the way give the census counts, width and bottom density of states.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from components.ising import IsingModel, RandomSource, SpinConfiguration, energy
from components.mc_kernels import (
    CampaignResult,
    EscapeTrace,
    calibration_scale,
    descend_zero_t,
    escape_chain,
    is_local_minimum,
)
from components.rbm import Rbm, joint_state
from components.samplers import SampleSet
from utils.errors import ArrheniusFitError, DataError, DimensionMismatchError, NotAMinimumError
from utils.parallel import chunked, run_parallel

logger = logging.getLogger(__name__)

VALLEY_COLUMNS = [
    "lm",
    "e_lm",
    "e_act",
    "e_max",
    "e_max_sampled",
    "n_lv",
    "n_low",
    "n_up",
    "width_w",
    "width_intercept",
    "dos_bottom",
    "discovered_by",
    "first_cycle",
    "arrhenius_points",
    "fit_residual",
    "arrhenius",
    "flat_links",
]


@dataclass(frozen=True)
class WarmingConfig:
    """Simulated-warming protocol."""

    chains: int = 200
    jump_cap: int = 1_000_000
    ladder_factor: float = 1.5
    t0_fraction: float = 0.1
    max_rungs: int = 40
    min_fit_points: int = 3
    threshold_multiplier: float = 1.0
    dos_fraction: float = 0.1
    fit_rate_per_spin: float = 0.5
    calibration_trials: int = 1000

    def __post_init__(self):
        if self.chains < 1 or self.jump_cap < 1 or self.max_rungs < 1:
            raise ValueError("chains, jump_cap and max_rungs must be positive")
        if self.ladder_factor <= 1.0:
            raise ValueError("ladder_factor must exceed 1")
        if self.t0_fraction <= 0 or self.dos_fraction <= 0 or self.threshold_multiplier <= 0:
            raise ValueError("t0_fraction, dos_fraction and threshold_multiplier must be positive")
        if self.min_fit_points < 3:
            raise ValueError("an Arrhenius fit needs at least 3 points")


class ArrheniusPoint(NamedTuple):
    temperature: float
    rate: float
    chains: int


@dataclass(frozen=True)
class EscapeRate:
    temperature: float
    rate: float
    stderr: float
    chains: int
    escaped: int
    capped: int

    @property
    def all_capped(self) -> bool:
        return self.escaped == 0

    @property
    def capped_fraction(self) -> float:
        return self.capped / self.chains


@dataclass(frozen=True)
class ArrheniusFit:
    e_act: float
    intercept: float
    residual: float
    points_used: int
    excluded: int


@dataclass(frozen=True)
class ValleyRecord:
    """All valley parameters; energies are absolute except e_act, e_max and e_max_sampled.

    ``e_max_sampled`` is the highest visited in-valley energy above e_lm; ``e_max`` is the
    same value raised to at least e_act.
    """

    lm: SpinConfiguration
    e_lm: float
    e_act: Optional[float]
    e_max: float
    n_lv: int
    n_low: Optional[int]
    n_up: Optional[int]
    width_w: Optional[float]
    width_intercept: Optional[float]
    dos_bottom: Optional[float]
    arrhenius: Tuple[ArrheniusPoint, ...] = ()
    fit_residual: Optional[float] = None
    sampled_energies: Tuple[float, ...] = ()
    n_lv_by_rung: Tuple[int, ...] = ()
    e_max_sampled: Optional[float] = None

    def __post_init__(self):
        if self.n_lv < 1:
            raise ValueError("a valley contains at least its minimum")
        if self.e_act is not None and self.e_act < 0:
            raise ValueError("e_act must be non-negative")
        if (self.n_low is None) != (self.n_up is None):
            raise ValueError("n_low and n_up are either both known or both unknown")
        if self.n_low is not None:
            if self.n_low < 0 or self.n_up < 0 or self.n_low + self.n_up != self.n_lv:
                raise ValueError(f"inconsistent counts: {self.n_low} + {self.n_up} != {self.n_lv}")

    def split_counts(self, multiplier: float = 1.0) -> Tuple[int, int]:
        """Recompute (n_low, n_up) from the stored sampled energies."""
        if self.e_act is None:
            raise ValueError("split needs an activation energy")
        threshold = self.e_lm + multiplier * self.e_act
        n_low = sum(1 for e in self.sampled_energies if e < threshold)
        return n_low, len(self.sampled_energies) - n_low


def _escape_batch(
    model: IsingModel,
    lm: SpinConfiguration,
    temperature: float,
    rng: RandomSource,
    jump_cap: int,
    indices: Sequence[int],
) -> List[EscapeTrace]:
    memo: Dict[bytes, bytes] = {}
    return [escape_chain(model, lm, temperature, rng.child(i).generator(), jump_cap, memo) for i in indices]


def _run_escape_chains(
    model: IsingModel,
    lm: SpinConfiguration,
    temperature: float,
    chains: int,
    rng: RandomSource,
    jump_cap: int,
    workers: int,
) -> Tuple[EscapeRate, Dict[bytes, SpinConfiguration]]:
    tasks = [(model, lm, temperature, rng, jump_cap, chunk) for chunk in chunked(list(range(chains)), workers)]
    traces = [trace for batch in run_parallel(_escape_batch, tasks, workers) for trace in batch]

    visited: Dict[bytes, SpinConfiguration] = {}
    for trace in traces:
        visited.update(trace.visited)
    steps = np.array([t.steps for t in traces if t.escaped], dtype=np.float64)
    escaped = int(steps.size)
    if escaped == 0:
        rate, stderr = 0.0, 0.0
    else:
        mean = float(steps.mean())
        rate = 1.0 / mean
        # delta method on 1/mean
        stderr = float(steps.std(ddof=1) / math.sqrt(escaped) / mean ** 2) if escaped > 1 else rate
    result = EscapeRate(temperature, rate, stderr, chains, escaped, chains - escaped)
    return result, visited


def estimate_escape_rate(
    model: IsingModel,
    lm: SpinConfiguration,
    temperature: float,
    chains: int,
    rng: RandomSource,
    jump_cap: int = 1_000_000,
    workers: int = 1,
) -> EscapeRate:
    """Inverse mean number of Monte Carlo steps before leaving lm's basin.

    A step is one attempted single-spin move. Chains that reach ``jump_cap`` steps
    without escaping are reported as capped; if every chain is capped the rate is 0.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if chains < 1:
        raise ValueError("at least one chain is required")
    if lm.n != model.n:
        raise DimensionMismatchError(model.n, lm.n)
    if not is_local_minimum(model, lm):
        raise NotAMinimumError(f"{lm.to_string()} is not a local minimum")
    rate, _ = _run_escape_chains(model, lm, temperature, chains, rng, jump_cap, workers)
    return rate


def fit_arrhenius(points: Sequence[Sequence[float]]) -> ArrheniusFit:
    """Least squares of ln(rate) against 1/T; e_act is the negated slope."""
    usable = [
        (float(p[0]), float(p[1]))
        for p in points
        if p[0] > 0 and p[1] > 0 and math.isfinite(p[0]) and math.isfinite(p[1])
    ]
    excluded = len(points) - len(usable)
    if len({t for t, _ in usable}) < 3:
        raise ArrheniusFitError(
            f"need 3 points with positive rate at distinct temperatures, got {len(usable)} ({excluded} excluded)"
        )
    x = np.array([1.0 / t for t, _ in usable])
    y = np.log([r for _, r in usable])
    fit = stats.linregress(x, y)
    residual = float(np.sqrt(np.mean((y - (fit.slope * x + fit.intercept)) ** 2)))
    return ArrheniusFit(
        e_act=-float(fit.slope),
        intercept=float(fit.intercept),
        residual=residual,
        points_used=len(usable),
        excluded=excluded,
    )


def square_well_width(n_low: int, e_act: float) -> Optional[float]:
    """N_low divided by the well depth."""
    return n_low / e_act if e_act > 0 else None


def bottom_dos(energies: Sequence[float], e_lm: float, window: float) -> float:
    """Distinct states with energy in [e_lm, e_lm + window], per unit energy."""
    if window <= 0:
        raise ValueError("DOS window must be positive")
    count = sum(1 for e in energies if e_lm <= e <= e_lm + window)
    return count / window


def dos_window(e_act: Optional[float], energies: Sequence[float], fraction: float = 0.1) -> Optional[float]:
    """``fraction * e_act``, floored at the smallest gap between sampled energies."""
    levels = np.unique(np.asarray(energies, dtype=np.float64))
    smallest_gap = float(np.diff(levels).min()) if levels.size > 1 else 0.0
    window = max(fraction * (e_act or 0.0), smallest_gap)
    return window if window > 0 else None


def characterize_valley(
    model: IsingModel,
    lm: SpinConfiguration,
    cfg: WarmingConfig,
    rng: RandomSource,
    workers: int = 1,
) -> ValleyRecord:
    """Warm the valley over a geometric temperature ladder and derive its parameters.

    The ladder starts at ``t0_fraction`` times the median |dE| of random flips and
    stops once a rung adds no new in-valley state while every chain escaped, provided
    enough rungs produced a positive rate for the fit.
    """
    if lm.n != model.n:
        raise DimensionMismatchError(model.n, lm.n)
    if not is_local_minimum(model, lm):
        raise NotAMinimumError(f"{lm.to_string()} is not a local minimum")
    e_lm = energy(model, lm)
    temperature = cfg.t0_fraction * calibration_scale(model, rng.child(0), cfg.calibration_trials)

    visited: Dict[bytes, SpinConfiguration] = {lm.key: lm}
    points: List[ArrheniusPoint] = []
    by_rung: List[int] = []
    for rung in range(cfg.max_rungs):
        rate, found = _run_escape_chains(model, lm, temperature, cfg.chains, rng.child(1, rung), cfg.jump_cap, workers)
        new = 0
        for key, state in found.items():
            if key not in visited:
                visited[key] = state
                new += 1
        points.append(ArrheniusPoint(temperature, rate.rate, rate.chains))
        by_rung.append(len(visited))
        logger.debug(
            "valley %s rung %d T=%.4g rate=%.4g new=%d capped=%d",
            lm.to_string(), rung, temperature, rate.rate, new, rate.capped,
        )
        positive = sum(1 for p in points if p.rate > 0)
        if new == 0 and rate.capped == 0 and positive >= cfg.min_fit_points:
            break
        temperature *= cfg.ladder_factor
    else:
        logger.warning("valley %s: temperature ladder stopped at max_rungs=%d", lm.to_string(), cfg.max_rungs)

    energies = tuple(sorted(energy(model, s) for s in visited.values()))
    n_lv = len(energies)
    e_max_sampled = energies[-1] - e_lm
    e_max = e_max_sampled

    # Fit on the activated regime (rate at most fit_rate_per_spin / n) when it has enough points.
    ceiling = cfg.fit_rate_per_spin / max(model.n, 1)
    activated = [p for p in points if 0 < p.rate <= ceiling]
    candidates = activated if len({p.temperature for p in activated}) >= cfg.min_fit_points else points
    fit: Optional[ArrheniusFit] = None
    try:
        fit = fit_arrhenius(candidates)
    except ArrheniusFitError as exc:
        logger.warning("valley %s: e_act unavailable (%s)", lm.to_string(), exc)
    if fit is not None and fit.e_act < 0:
        logger.warning("valley %s: negative Arrhenius slope, e_act unavailable", lm.to_string())

    e_act = fit.e_act if fit is not None and fit.e_act >= 0 else None
    n_low = n_up = None
    width_w = width_intercept = dos = None
    if e_act is not None:
        threshold = e_lm + cfg.threshold_multiplier * e_act
        n_low = sum(1 for e in energies if e < threshold)
        n_up = n_lv - n_low
        width_w = square_well_width(n_low, e_act)
        width_intercept = math.exp(-fit.intercept)
        window = dos_window(e_act, energies, cfg.dos_fraction)
        dos = bottom_dos(energies, e_lm, window) if window else None
        # the sampled maximum is only a lower bound on the true escape energy
        e_max = max(e_max, e_act)

    return ValleyRecord(
        lm=lm,
        e_lm=e_lm,
        e_act=e_act,
        e_max=e_max,
        n_lv=n_lv,
        n_low=n_low,
        n_up=n_up,
        width_w=width_w,
        width_intercept=width_intercept,
        dos_bottom=dos,
        arrhenius=tuple(points),
        fit_residual=fit.residual if fit is not None else None,
        sampled_energies=energies,
        n_lv_by_rung=tuple(by_rung),
        e_max_sampled=e_max_sampled,
    )


def zero_energy_links(
    model: IsingModel, minima: Sequence[SpinConfiguration], limit: int = 10_000
) -> Dict[SpinConfiguration, Tuple[SpinConfiguration, ...]]:
    """Other minima reachable from each minimum through dE == 0 flips only.

    Each search explores at most ``limit`` states of the flat region.
    """
    known = set(minima)
    links: Dict[SpinConfiguration, Tuple[SpinConfiguration, ...]] = {}
    for lm in minima:
        seen = {lm}
        queue = deque([lm])
        partners = set()
        while queue and len(seen) < limit:
            state = queue.popleft()
            spins = state.array.astype(np.float64)
            delta = 2.0 * spins * model.local_fields(spins)
            for k in np.flatnonzero(delta == 0.0):
                nxt = state.flip(int(k))
                if nxt in seen:
                    continue
                seen.add(nxt)
                queue.append(nxt)
                if nxt in known:
                    partners.add(nxt)
        if partners:
            links[lm] = tuple(sorted(partners, key=SpinConfiguration.to_string))
    return links


@dataclass
class ValleyEntry:
    lm: SpinConfiguration
    e_lm: float
    first_seen: Dict[str, Optional[int]] = field(default_factory=dict)
    record: Optional[ValleyRecord] = None
    flat_links: Tuple[SpinConfiguration, ...] = ()

    @property
    def tags(self) -> Tuple[str, ...]:
        return tuple(sorted(self.first_seen))

    def found_by(self, sampler: str, cut: Optional[int] = None) -> bool:
        """Whether ``sampler`` found this valley, within ``cut`` cycles when timed."""
        if sampler not in self.first_seen:
            return False
        cycle = self.first_seen[sampler]
        return cut is None or cycle is None or cycle < cut


class ValleyRegistry:
    """Valleys keyed by their minimum, tagged with the samplers that found them."""

    def __init__(self, samplers: Sequence[str] = ()):
        self._samplers: set = set()
        self._entries: Dict[SpinConfiguration, ValleyEntry] = {}
        for name in samplers:
            self.register_sampler(name)

    def register_sampler(self, name: str) -> None:
        if not name or any(c in name for c in ";,=:| \t") or name.startswith("#"):
            raise ValueError(f"invalid sampler name {name!r}")
        self._samplers.add(name)

    @property
    def samplers(self) -> Tuple[str, ...]:
        return tuple(sorted(self._samplers))

    def add(self, lm: SpinConfiguration, e_lm: float, sampler: str, cycle: Optional[int] = None) -> ValleyEntry:
        if sampler not in self._samplers:
            raise ValueError(f"sampler {sampler!r} is not registered")
        entry = self._entries.get(lm)
        if entry is None:
            entry = self._entries[lm] = ValleyEntry(lm=lm, e_lm=e_lm)
        if sampler not in entry.first_seen:
            entry.first_seen[sampler] = cycle
        else:
            previous = entry.first_seen[sampler]
            if previous is None:
                entry.first_seen[sampler] = cycle
            elif cycle is not None:
                entry.first_seen[sampler] = min(previous, cycle)
        return entry

    def attach(self, record: ValleyRecord) -> None:
        entry = self._entries.get(record.lm)
        if entry is None:
            raise KeyError(f"valley {record.lm.to_string()} is not registered")
        entry.record = record

    def get(self, lm: SpinConfiguration) -> Optional[ValleyEntry]:
        return self._entries.get(lm)

    def keys(self) -> List[SpinConfiguration]:
        return sorted(self._entries, key=SpinConfiguration.to_string)

    def tagged(self, sampler: str, cut: Optional[int] = None) -> List[SpinConfiguration]:
        if sampler not in self._samplers:
            raise ValueError(f"sampler {sampler!r} is not registered")
        return [lm for lm in self.keys() if self._entries[lm].found_by(sampler, cut)]

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, lm: object) -> bool:
        return lm in self._entries

    def __iter__(self) -> Iterator[ValleyEntry]:
        return (self._entries[lm] for lm in self.keys())

    def to_frame(self) -> pd.DataFrame:
        """One row per valley, every cell pre-formatted as exact text."""
        rows = []
        for entry in self:
            rec = entry.record
            rows.append(
                {
                    "lm": entry.lm.to_string(),
                    "e_lm": _fmt(entry.e_lm),
                    "e_act": _fmt(rec.e_act if rec else None),
                    "e_max": _fmt(rec.e_max if rec else None),
                    "e_max_sampled": _fmt(rec.e_max_sampled if rec else None),
                    "n_lv": _fmt(rec.n_lv if rec else None),
                    "n_low": _fmt(rec.n_low if rec else None),
                    "n_up": _fmt(rec.n_up if rec else None),
                    "width_w": _fmt(rec.width_w if rec else None),
                    "width_intercept": _fmt(rec.width_intercept if rec else None),
                    "dos_bottom": _fmt(rec.dos_bottom if rec else None),
                    "discovered_by": ";".join(entry.tags),
                    "first_cycle": ";".join(f"{name}={_fmt(entry.first_seen[name])}" for name in entry.tags),
                    "arrhenius_points": _fmt(len(rec.arrhenius) if rec else None),
                    "fit_residual": _fmt(rec.fit_residual if rec else None),
                    "arrhenius": "|".join(
                        f"{_fmt(p.temperature)}:{_fmt(p.rate)}:{p.chains}" for p in (rec.arrhenius if rec else ())
                    ),
                    "flat_links": ";".join(s.to_string() for s in entry.flat_links),
                }
            )
        return pd.DataFrame(rows, columns=VALLEY_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            handle.write(f"# samplers={';'.join(self.samplers)}\n")
            self.to_frame().to_csv(handle, index=False, lineterminator="\n")

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "ValleyRegistry":
        path = Path(path)
        if not path.exists():
            raise DataError(f"valley registry not found: {path}")
        with open(path, encoding="utf-8") as handle:
            header = handle.readline().strip()
            if not header.startswith("# samplers="):
                raise DataError(f"{path}: missing '# samplers=' header")
            names = [s for s in header[len("# samplers="):].split(";") if s]
            frame = pd.read_csv(handle, dtype=str, keep_default_na=False)
        missing = set(VALLEY_COLUMNS) - set(frame.columns)
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        registry = cls(names)
        for row in frame.to_dict("records"):
            try:
                registry._load_row(row)
            except ValueError as exc:
                raise DataError(f"{path}: valley {row['lm']}: {exc}") from exc
        return registry

    def _load_row(self, row: Mapping[str, str]) -> None:
        lm = SpinConfiguration.from_string(row["lm"])
        e_lm = float(row["e_lm"])
        for item in filter(None, row["first_cycle"].split(";")):
            name, _, cycle = item.partition("=")
            self.register_sampler(name)
            self.add(lm, e_lm, name, int(cycle) if cycle else None)
        entry = self._entries[lm]
        entry.flat_links = tuple(SpinConfiguration.from_string(s) for s in filter(None, row["flat_links"].split(";")))
        if row["n_lv"] == "":
            return
        points = []
        for item in filter(None, row["arrhenius"].split("|")):
            t, r, c = item.split(":")
            points.append(ArrheniusPoint(float(t), float(r), int(c)))
        entry.record = ValleyRecord(
            lm=lm,
            e_lm=e_lm,
            e_act=_opt_float(row["e_act"]),
            e_max=float(row["e_max"]),
            e_max_sampled=_opt_float(row["e_max_sampled"]),
            n_lv=int(row["n_lv"]),
            n_low=_opt_int(row["n_low"]),
            n_up=_opt_int(row["n_up"]),
            width_w=_opt_float(row["width_w"]),
            width_intercept=_opt_float(row["width_intercept"]),
            dos_bottom=_opt_float(row["dos_bottom"]),
            arrhenius=tuple(points),
            fit_residual=_opt_float(row["fit_residual"]),
        )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _opt_float(text: str) -> Optional[float]:
    return float(text) if text != "" else None


def _opt_int(text: str) -> Optional[int]:
    return int(text) if text != "" else None


def _completed(state: SpinConfiguration, rbm: Optional[Rbm]) -> SpinConfiguration:
    """Replace the hidden half of a joint read by its zero-temperature completion."""
    if rbm is None:
        return state
    return joint_state(rbm, (state.array[: rbm.n_visible] > 0).astype(np.int8))


def _check_rbm(model: IsingModel, rbm: Optional[Rbm]) -> None:
    if rbm is not None and rbm.n_visible + rbm.n_hidden != model.n:
        raise DimensionMismatchError(model.n, rbm.n_visible + rbm.n_hidden, "RBM unit count")


def register_sample(
    registry: ValleyRegistry, states: SampleSet, model: IsingModel, rbm: Optional[Rbm] = None
) -> ValleyRegistry:
    """Descend every distinct read and tag the resulting valley with the sampler name.

    With ``rbm`` given, only a read's visible units count: the hidden units are
    recomputed by ``joint_state`` before the descent. An empty sample leaves the
    registry untouched.
    """
    if states.n != model.n:
        raise DimensionMismatchError(model.n, states.n, f"sample '{states.sampler_name}'")
    _check_rbm(model, rbm)
    if not states.reads:
        return registry
    registry.register_sampler(states.sampler_name)
    for state, _count in states.reads:
        lm = descend_zero_t(model, _completed(state, rbm))
        registry.add(lm, energy(model, lm), states.sampler_name)
    return registry


def register_campaign(
    registry: ValleyRegistry,
    result: CampaignResult,
    model: IsingModel,
    sampler: str,
    rbm: Optional[Rbm] = None,
) -> ValleyRegistry:
    """Tag campaign minima with their first-discovery cycle; ``rbm`` as in ``register_sample``."""
    _check_rbm(model, rbm)
    registry.register_sampler(sampler)
    for lm, cycle in result.minima.items():
        if rbm is not None:
            lm = descend_zero_t(model, _completed(lm, rbm))
        registry.add(lm, energy(model, lm), sampler, cycle)
    return registry
