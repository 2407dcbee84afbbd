"""Monte Carlo dynamics.

Metropolis single-flip sweeps, temperature schedules, simulated annealing and
multi-regime annealing campaigns, deterministic zero-temperature descent, simulated
warming and the constant-temperature escape chains used for kinetics.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, FrozenSet, List, Mapping, MutableMapping, Optional, Sequence, Tuple

import numpy as np

from components.ising import IsingModel, RandomSource, RngLike, SpinConfiguration, as_generator, energy
from utils.errors import DimensionMismatchError, NotAMinimumError
from utils.parallel import chunked, run_parallel

logger = logging.getLogger(__name__)

GEOMETRIC_FLOOR = 1e-3
DEFAULT_COOLING_RATES = (0.99, 0.999, 0.9999, 0.99999, 0.999999)


class ScheduleKind(str, Enum):
    GEOMETRIC_COOLING = "geometric-cooling"
    LINEAR_COOLING = "linear-cooling"
    LINEAR_WARMING = "linear-warming"
    CONSTANT = "constant"


_COOLING = (ScheduleKind.GEOMETRIC_COOLING, ScheduleKind.LINEAR_COOLING)


@dataclass(frozen=True)
class Schedule:
    """Temperature per sweep, ``steps`` sweeps long."""

    kind: ScheduleKind
    t_start: float
    t_end: float
    steps: int

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        object.__setattr__(self, "t_start", float(self.t_start))
        object.__setattr__(self, "t_end", float(self.t_end))
        for name in ("t_start", "t_end"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValueError(f"{name} must be a finite temperature >= 0, got {value}")
        if self.steps < 1:
            raise ValueError(f"schedule needs at least one sweep, got {self.steps}")
        if self.kind in _COOLING and self.t_end > self.t_start:
            raise ValueError("cooling schedule must not end hotter than it starts")
        if self.kind is ScheduleKind.LINEAR_WARMING and self.t_end < self.t_start:
            raise ValueError("warming schedule must not end colder than it starts")
        if self.kind is ScheduleKind.CONSTANT and self.t_end != self.t_start:
            raise ValueError("constant schedule needs t_start == t_end")

    @classmethod
    def geometric(cls, t_start: float, rate: float, t_end: float = 0.0) -> "Schedule":
        """Geometric cooling at ``rate`` per sweep; a final T=0 sweep when t_end is 0."""
        if not 0.0 < rate < 1.0:
            raise ValueError(f"cooling rate must lie in (0, 1), got {rate}")
        if t_start <= 0.0:
            raise ValueError("geometric cooling needs t_start > 0")
        floor = t_end if t_end > 0 else t_start * GEOMETRIC_FLOOR
        steps = max(1, int(math.ceil(math.log(floor / t_start) / math.log(rate))) + 1)
        if t_end == 0:
            steps += 1
        return cls(ScheduleKind.GEOMETRIC_COOLING, t_start, t_end, steps)

    @classmethod
    def linear(cls, t_start: float, t_end: float, steps: int) -> "Schedule":
        return cls(ScheduleKind.LINEAR_COOLING, t_start, t_end, steps)

    @classmethod
    def constant(cls, temperature: float, steps: int) -> "Schedule":
        return cls(ScheduleKind.CONSTANT, temperature, temperature, steps)

    @classmethod
    def warming(cls, t_start: float, t_end: float, steps: int) -> "Schedule":
        return cls(ScheduleKind.LINEAR_WARMING, t_start, t_end, steps)

    @property
    def is_cooling(self) -> bool:
        return self.kind in _COOLING

    def temperatures(self) -> np.ndarray:
        if self.kind is ScheduleKind.CONSTANT:
            return np.full(self.steps, self.t_start)
        if self.steps == 1:
            return np.array([self.t_end])
        if self.kind is not ScheduleKind.GEOMETRIC_COOLING:
            return np.linspace(self.t_start, self.t_end, self.steps)
        if self.t_end > 0:
            return np.geomspace(self.t_start, self.t_end, self.steps)
        if self.t_start == 0:
            return np.zeros(self.steps)
        head = np.geomspace(self.t_start, self.t_start * GEOMETRIC_FLOOR, self.steps - 1)
        return np.append(head, 0.0)

    def to_text(self) -> str:
        return f"{self.kind.value}:{self.t_start!r}:{self.t_end!r}:{self.steps}"

    @classmethod
    def from_text(cls, text: str) -> "Schedule":
        kind, t_start, t_end, steps = text.strip().split(":")
        return cls(ScheduleKind(kind), float(t_start), float(t_end), int(steps))


@dataclass(frozen=True)
class ChainResult:
    final_state: SpinConfiguration
    trajectory_samples: Optional[Tuple[Tuple[SpinConfiguration, float], ...]]
    jump_count: int
    attempted: int


@dataclass(frozen=True)
class WarmSample:
    """One recorded state of a warming chain."""

    state: SpinConfiguration
    energy: float
    in_valley: bool
    steps_before_escape: Optional[int]
    jumps: int
    temperature: float


class _Chain:
    """Single-spin-flip chain with incrementally maintained local fields."""

    __slots__ = ("neighbor_lists", "spins", "field")

    def __init__(self, model: IsingModel, spins: np.ndarray):
        self.neighbor_lists = model.neighbor_lists
        self.spins = [int(v) for v in spins]
        self.field = model.local_fields(np.asarray(spins)).tolist()

    def flip(self, k: int) -> None:
        s = -self.spins[k]
        self.spins[k] = s
        field = self.field
        nbrs, weights = self.neighbor_lists[k]
        for j, w in zip(nbrs, weights):
            field[j] += 2.0 * w * s

    def attempt(self, k: int, temperature: float, u: float) -> bool:
        delta = 2.0 * self.spins[k] * self.field[k]
        if temperature <= 0.0:
            accept = delta < 0.0
        else:
            accept = delta <= 0.0 or u < math.exp(-delta / temperature)
        if accept:
            self.flip(k)
        return accept

    def sweep(self, temperature: float, uniforms: Sequence[float]) -> int:
        accepted = 0
        for k in range(len(self.spins)):
            if self.attempt(k, temperature, uniforms[k]):
                accepted += 1
        return accepted

    def config(self) -> SpinConfiguration:
        return SpinConfiguration(self.spins)


def _check_size(model: IsingModel, s: SpinConfiguration) -> None:
    if s.n != model.n:
        raise DimensionMismatchError(model.n, s.n)


def metropolis_sweep(
    model: IsingModel, s: SpinConfiguration, temperature: float, rng: RngLike
) -> Tuple[SpinConfiguration, int]:
    """One Metropolis attempt per spin in ascending index order.

    One uniform is drawn per attempt whether or not it is needed, so the random stream
    advances identically for every temperature.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    _check_size(model, s)
    generator = as_generator(rng)
    chain = _Chain(model, s.array)
    accepted = chain.sweep(temperature, generator.random(model.n).tolist())
    return chain.config(), accepted


def _steepest_descent(
    model: IsingModel,
    spins: np.ndarray,
    generator: Optional[np.random.Generator] = None,
    path: Optional[List[np.ndarray]] = None,
) -> np.ndarray:
    s = np.array(spins, dtype=np.float64)
    if s.size == 0:
        return s.astype(np.int8)
    field = model.local_fields(s)
    adj = model.adjacency
    while True:
        delta = 2.0 * s * field
        if generator is None:
            k = int(np.argmin(delta))
            if not delta[k] < 0.0:
                break
        else:
            downhill = np.flatnonzero(delta < 0.0)
            if downhill.size == 0:
                break
            k = int(downhill[generator.integers(downhill.size)])
        s[k] = -s[k]
        lo, hi = adj.indptr[k], adj.indptr[k + 1]
        field[adj.indices[lo:hi]] += 2.0 * adj.data[lo:hi] * s[k]
        if path is not None:
            path.append(s.astype(np.int8))
    return s.astype(np.int8)


def descend_zero_t(
    model: IsingModel,
    s: SpinConfiguration,
    *,
    stochastic: bool = False,
    rng: Optional[RngLike] = None,
) -> SpinConfiguration:
    """Steepest descent to the valley's local minimum.

    Flips the spin with the most negative energy change, lowest index on ties, until
    no flip lowers the energy; zero-change plateaus are not traversed. With
    ``stochastic=True`` a uniformly chosen downhill flip is taken instead.
    """
    _check_size(model, s)
    generator = None
    if stochastic:
        if rng is None:
            raise ValueError("stochastic descent needs a random source")
        generator = as_generator(rng)
    return SpinConfiguration(_steepest_descent(model, s.array, generator))


def descent_path(model: IsingModel, s: SpinConfiguration) -> List[SpinConfiguration]:
    """All states visited by ``descend_zero_t``, starting with ``s``."""
    _check_size(model, s)
    path = [s.array.copy()]
    _steepest_descent(model, s.array, path=path)
    return [SpinConfiguration(p) for p in path]


def is_local_minimum(model: IsingModel, s: SpinConfiguration) -> bool:
    _check_size(model, s)
    spins = s.array.astype(np.float64)
    return bool(np.all(2.0 * spins * model.local_fields(spins) >= 0.0))


def _random_flip_deltas(model: IsingModel, generator: np.random.Generator, trials: int) -> np.ndarray:
    """Energy changes of random single flips from random states."""
    states = (2 * generator.integers(0, 2, size=(trials, model.n)) - 1).astype(np.float64)
    ks = generator.integers(0, model.n, size=trials)
    rows = np.arange(trials)
    fields = model.biases[ks] + np.asarray(model.adjacency[ks].multiply(states).sum(axis=1)).ravel()
    return 2.0 * states[rows, ks] * fields


def calibration_scale(model: IsingModel, rng: RngLike, trials: int = 1000) -> float:
    """Median |dE| over random flips; 1.0 when every sampled flip is free."""
    if model.n == 0:
        return 1.0
    deltas = np.abs(_random_flip_deltas(model, as_generator(rng), trials))
    scale = float(np.median(deltas))
    return scale if scale > 0 else 1.0


def calibrate_t_start(model: IsingModel, rng: RngLike, target: float = 0.95, trials: int = 1000) -> float:
    """Lowest temperature whose mean Metropolis acceptance on random flips reaches ``target``."""
    if not 0.0 < target < 1.0:
        raise ValueError("target acceptance must lie in (0, 1)")
    if model.n == 0:
        return 1.0
    deltas = _random_flip_deltas(model, as_generator(rng), trials)
    uphill = deltas[deltas > 0]
    if uphill.size == 0:
        return model.energy_scale()
    free = trials - uphill.size

    def acceptance(t: float) -> float:
        return (float(np.exp(-uphill / t).sum()) + free) / trials

    hi = float(np.median(uphill))
    while acceptance(hi) < target:
        hi *= 2.0
    lo = hi
    while acceptance(lo) >= target and lo > 1e-12:
        lo /= 2.0
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if acceptance(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def default_regimes(t_start: float, rates: Sequence[float] = DEFAULT_COOLING_RATES) -> List[Schedule]:
    """Geometric cooling regimes from very fast to very slow."""
    return [Schedule.geometric(t_start, rate) for rate in rates]


def simulated_anneal(
    model: IsingModel,
    schedule: Schedule,
    rng: RngLike,
    trajectory_stride: Optional[int] = None,
) -> ChainResult:
    """One annealing chain from a uniformly random state down to T=0."""
    if not schedule.is_cooling or schedule.t_end != 0.0:
        raise ValueError(f"simulated annealing needs a cooling schedule ending at T=0, got {schedule.to_text()}")
    if trajectory_stride is not None and trajectory_stride < 1:
        raise ValueError("trajectory stride must be >= 1")
    generator = as_generator(rng)
    chain = _Chain(model, SpinConfiguration.random(model.n, generator).array)
    trajectory = [] if trajectory_stride else None
    jumps = 0
    for step, temperature in enumerate(schedule.temperatures().tolist()):
        jumps += chain.sweep(temperature, generator.random(model.n).tolist())
        if trajectory is not None and (step + 1) % trajectory_stride == 0:
            state = chain.config()
            trajectory.append((state, energy(model, state)))
    return ChainResult(
        final_state=chain.config(),
        trajectory_samples=tuple(trajectory) if trajectory is not None else None,
        jump_count=jumps,
        attempted=schedule.steps * model.n,
    )


@dataclass(frozen=True)
class Budget:
    """Campaign caps; ``None`` means unlimited. Zero caps are rejected."""

    max_sweeps: Optional[int] = None
    max_seconds: Optional[float] = None

    def __post_init__(self):
        if self.max_sweeps is not None and self.max_sweeps <= 0:
            raise ValueError("sweep budget must be positive")
        if self.max_seconds is not None and self.max_seconds <= 0:
            raise ValueError("wall-clock budget must be positive")


@dataclass
class CampaignState:
    """Progress of a campaign; minima keyed to their first-discovery cycle."""

    cycles_done: int = 0
    sweeps_used: int = 0
    first_seen: Dict[SpinConfiguration, int] = field(default_factory=dict)

    def merge(self, found: Mapping[SpinConfiguration, int]) -> None:
        # min over cycles: associative and commutative, so merge order is irrelevant
        for lm, cycle in found.items():
            previous = self.first_seen.get(lm)
            if previous is None or cycle < previous:
                self.first_seen[lm] = cycle


@dataclass(frozen=True)
class CampaignResult:
    minima: Mapping[SpinConfiguration, int]
    cycles_requested: int
    cycles_completed: int
    sweeps_used: int
    budget_exhausted: bool

    def found_by(self, cut: int) -> FrozenSet[SpinConfiguration]:
        """Minima first discovered within the first ``cut`` cycles."""
        return frozenset(lm for lm, cycle in self.minima.items() if cycle < cut)

    def counts_at(self, cuts: Sequence[int]) -> List[int]:
        return [len(self.found_by(cut)) for cut in cuts]


def _campaign_cycles(
    model: IsingModel, regimes: Sequence[Schedule], rng: RandomSource, cycles: Sequence[int]
) -> Dict[SpinConfiguration, int]:
    found: Dict[SpinConfiguration, int] = {}
    for cycle in cycles:
        for r, schedule in enumerate(regimes):
            result = simulated_anneal(model, schedule, rng.child(cycle, r))
            lm = descend_zero_t(model, result.final_state)
            found.setdefault(lm, cycle)
    return found


def sa_campaign(
    model: IsingModel,
    regimes: Sequence[Schedule],
    cycles: int,
    rng: RandomSource,
    budget: Optional[Budget] = None,
    *,
    workers: int = 1,
    batch_cycles: Optional[int] = None,
    state: Optional[CampaignState] = None,
    on_batch: Optional[Callable[[CampaignState], None]] = None,
) -> CampaignResult:
    """Repeat the regime series for ``cycles`` rounds or until the budget runs out.

    Chain (cycle, regime) always draws from ``rng.child(cycle, regime)``, so serial,
    parallel and resumed campaigns produce the same minima set. Budgets are checked
    between batches only.
    """
    if not regimes:
        raise ValueError("at least one annealing regime is required")
    if cycles < 0:
        raise ValueError("cycle count must be non-negative")
    budget = budget or Budget()
    state = state or CampaignState()
    sweeps_per_cycle = sum(s.steps for s in regimes)
    batch_size = batch_cycles or max(1, 16 * workers)
    started = time.monotonic()
    exhausted = False

    while state.cycles_done < cycles:
        batch = min(batch_size, cycles - state.cycles_done)
        if budget.max_sweeps is not None:
            affordable = (budget.max_sweeps - state.sweeps_used) // sweeps_per_cycle
            batch = min(batch, affordable)
        if batch <= 0 or (budget.max_seconds is not None and time.monotonic() - started >= budget.max_seconds):
            exhausted = True
            break
        todo = list(range(state.cycles_done, state.cycles_done + batch))
        tasks = [(model, regimes, rng, chunk) for chunk in chunked(todo, workers)]
        for found in run_parallel(_campaign_cycles, tasks, workers):
            state.merge(found)
        state.cycles_done += batch
        state.sweeps_used += batch * sweeps_per_cycle
        logger.info("campaign: %d/%d cycles, %d minima", state.cycles_done, cycles, len(state.first_seen))
        if on_batch is not None:
            on_batch(state)

    if exhausted:
        logger.warning("campaign budget exhausted after %d of %d cycles", state.cycles_done, cycles)
    ordered = dict(sorted(state.first_seen.items(), key=lambda item: item[0].to_string()))
    return CampaignResult(
        minima=ordered,
        cycles_requested=cycles,
        cycles_completed=state.cycles_done,
        sweeps_used=state.sweeps_used,
        budget_exhausted=exhausted,
    )


def simulated_warm(
    model: IsingModel,
    lm: SpinConfiguration,
    schedule: Schedule,
    rng: RngLike,
    sample_stride: int = 1,
) -> List[WarmSample]:
    """Warm a chain up from ``lm``, recording every ``sample_stride``-th accepted jump.

    Every jump is checked for basin membership; the first state that descends to
    another minimum is always recorded and ends the run. ``steps_before_escape``
    counts attempted single-spin moves.
    """
    if schedule.kind not in (ScheduleKind.LINEAR_WARMING, ScheduleKind.CONSTANT):
        raise ValueError("simulated warming needs a warming or constant schedule")
    if sample_stride < 1:
        raise ValueError("sample stride must be >= 1")
    _check_size(model, lm)
    if not is_local_minimum(model, lm):
        raise NotAMinimumError(f"{lm.to_string()} is not a local minimum")
    generator = as_generator(rng)
    chain = _Chain(model, lm.array)
    memo: Dict[bytes, bytes] = {lm.key: lm.key}
    samples: List[WarmSample] = []
    jumps = steps = 0
    for temperature in schedule.temperatures().tolist():
        uniforms = generator.random(model.n).tolist()
        for k in range(model.n):
            steps += 1
            if not chain.attempt(k, temperature, uniforms[k]):
                continue
            jumps += 1
            state = chain.config()
            in_valley = _basin_key(model, state.array, memo) == lm.key
            if in_valley and jumps % sample_stride:
                continue
            samples.append(
                WarmSample(
                    state=state,
                    energy=energy(model, state),
                    in_valley=in_valley,
                    steps_before_escape=None if in_valley else steps,
                    jumps=jumps,
                    temperature=temperature,
                )
            )
            if not in_valley:
                return samples
    return samples


def _basin_key(model: IsingModel, spins: np.ndarray, memo: MutableMapping[bytes, bytes]) -> bytes:
    key = np.asarray(spins, dtype=np.int8).tobytes()
    lm_key = memo.get(key)
    if lm_key is None:
        lm_key = _steepest_descent(model, spins).tobytes()
        memo[key] = lm_key
    return lm_key


@dataclass
class EscapeTrace:
    """Outcome of one constant-temperature chain started at a minimum."""

    steps: int
    escaped: bool
    visited: Dict[bytes, SpinConfiguration]
    exit_state: Optional[SpinConfiguration] = None


def escape_chain(
    model: IsingModel,
    lm: SpinConfiguration,
    temperature: float,
    generator: np.random.Generator,
    step_cap: int,
    memo: Optional[MutableMapping[bytes, bytes]] = None,
) -> EscapeTrace:
    """Run fixed-scan Metropolis at ``temperature`` until the state leaves lm's basin.

    Rejected attempts are skipped in bulk: from the current scan position the number of
    fully rejected sweeps is geometric and the first accepted index follows the
    conditional first-success law, so the step count has exactly the distribution of
    the attempt-by-attempt chain while costing O(n) per accepted jump.
    """
    if temperature <= 0:
        raise ValueError("escape chains need a positive temperature")
    n = model.n
    memo = memo if memo is not None else {}
    spins = lm.array.astype(np.float64)
    field = model.local_fields(spins)
    adj = model.adjacency
    visited = {lm.key: lm}
    steps = 0
    pos = 0
    while True:
        order = np.roll(np.arange(n), -pos)
        delta = 2.0 * spins[order] * field[order]
        p = np.exp(-np.maximum(delta, 0.0) / temperature)
        with np.errstate(divide="ignore"):
            log_fail = np.log1p(-p)
        log_q = float(log_fail.sum())
        if log_q == 0.0:
            return EscapeTrace(step_cap, False, visited)
        u = 1.0 - generator.random()
        rounds = 0 if log_q == -math.inf else math.floor(math.log(u) / log_q)
        if rounds * n >= step_cap:
            return EscapeTrace(step_cap, False, visited)
        survive = np.exp(np.concatenate(([0.0], np.cumsum(log_fail)[:-1])))
        cdf = np.cumsum(survive * p)
        j = min(int(np.searchsorted(cdf, generator.random() * cdf[-1], side="right")), n - 1)
        advance = rounds * n + j + 1
        if steps + advance > step_cap:
            return EscapeTrace(step_cap, False, visited)
        steps += advance
        k = int(order[j])
        spins[k] = -spins[k]
        lo, hi = adj.indptr[k], adj.indptr[k + 1]
        field[adj.indices[lo:hi]] += 2.0 * adj.data[lo:hi] * spins[k]
        pos = (k + 1) % n
        state = spins.astype(np.int8)
        if _basin_key(model, state, memo) != lm.key:
            return EscapeTrace(steps, True, visited, SpinConfiguration(state))
        key = state.tobytes()
        if key not in visited:
            visited[key] = SpinConfiguration(state)
