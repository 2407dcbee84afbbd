"""Sample sources producing SampleSets.

Three kinds of reads feed the valley registry: a classical simulated-annealing sampler,
a simulated-quantum-annealing (path-integral Monte Carlo) surrogate standing in for an
annealer, and externally produced reads ingested from the sample file format. Reads are
generated in fixed-size batches, each with its own random stream, so the output does not
depend on how batches are spread over workers.
"""
import hashlib
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from components.ising import IsingModel, RandomSource, SpinConfiguration
from components.mc_kernels import Schedule
from utils.errors import DataError, DimensionMismatchError, ResourceCapError, SampleFormatError
from utils.parallel import run_parallel

logger = logging.getLogger(__name__)

READ_BATCH = 500
A_EPSILON = 1e-12
EXHAUSTIVE_LIMIT = 20
_HEADER = re.compile(r"^#\s*sample\s+sampler=(\S+)\s+n=(\d+)\s+format=pm1\s*$")
_META = re.compile(r"^#\s*meta\s+([^=\s]+)=(.*)$")
_SPIN_TOKENS = {"+1": 1, "-1": -1}


@dataclass(frozen=True)
class SampleSet:
    """Distinct reads with occurrence counts, ordered by spin string."""

    sampler_name: str
    n: int
    reads: Tuple[Tuple[SpinConfiguration, int], ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sampler_name or any(c.isspace() for c in self.sampler_name):
            raise ValueError(f"invalid sampler name {self.sampler_name!r}")
        seen = set()
        for state, count in self.reads:
            if state.n != self.n:
                raise DimensionMismatchError(self.n, state.n, f"read of '{self.sampler_name}'")
            if count < 1:
                raise ValueError("occurrence counts must be >= 1")
            if state in seen:
                raise ValueError(f"duplicate read {state.to_string()}; aggregate before building a SampleSet")
            seen.add(state)
        ordered = tuple(sorted(self.reads, key=lambda item: item[0].to_string()))
        object.__setattr__(self, "reads", ordered)
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in sorted(self.metadata.items())})

    @classmethod
    def from_states(
        cls,
        sampler_name: str,
        n: int,
        states: Iterable[SpinConfiguration],
        metadata: Optional[Mapping[str, str]] = None,
    ) -> "SampleSet":
        counts = Counter(states)
        return cls(sampler_name, n, tuple(counts.items()), metadata or {})

    @property
    def total_reads(self) -> int:
        return sum(count for _, count in self.reads)

    @property
    def distinct(self) -> int:
        return len(self.reads)

    def states(self) -> List[SpinConfiguration]:
        return [state for state, _ in self.reads]

    def modal(self) -> SpinConfiguration:
        """Most frequent read; the lowest spin string wins ties."""
        if not self.reads:
            raise ValueError("empty sample set has no modal read")
        return max(self.reads, key=lambda item: item[1])[0]

    def frequencies(self) -> Dict[SpinConfiguration, float]:
        total = self.total_reads
        return {state: count / total for state, count in self.reads}


@dataclass(frozen=True)
class AnnealFunctions:
    """Tabulated driver strength A(s) and problem strength B(s) on s in [0, 1].

    Values between table points are linearly interpolated. ``min_ratio`` bounds
    A(0)/B(0) and B(1)/A(1) from below; ``None`` disables the check.
    """

    s: Tuple[float, ...]
    a: Tuple[float, ...]
    b: Tuple[float, ...]
    min_ratio: Optional[float] = 100.0

    def __post_init__(self):
        for name in ("s", "a", "b"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not (len(self.s) == len(self.a) == len(self.b) >= 2):
            raise ValueError("anneal table needs at least two points with matching lengths")
        s = np.array(self.s)
        a = np.array(self.a)
        b = np.array(self.b)
        if s[0] != 0.0 or s[-1] != 1.0 or np.any(np.diff(s) <= 0):
            raise ValueError("anneal fractions must increase strictly from 0 to 1")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))) or np.any(a < 0) or np.any(b < 0):
            raise ValueError("anneal functions must be finite and non-negative")
        if np.any(np.diff(a) > 0) or np.any(np.diff(b) < 0):
            raise ValueError("A(s) must be non-increasing and B(s) non-decreasing")
        if self.min_ratio is not None:
            if a[0] < self.min_ratio * b[0] or b[-1] < self.min_ratio * a[-1]:
                raise ValueError(
                    f"anneal endpoints violate ratio bound {self.min_ratio}: "
                    f"A(0)={a[0]}, B(0)={b[0]}, A(1)={a[-1]}, B(1)={b[-1]}"
                )

    @classmethod
    def linear(
        cls,
        a_start: float = 10.0,
        a_end: float = 0.01,
        b_start: float = 0.01,
        b_end: float = 10.0,
        min_ratio: Optional[float] = 100.0,
    ) -> "AnnealFunctions":
        return cls((0.0, 1.0), (a_start, a_end), (b_start, b_end), min_ratio)

    @classmethod
    def classical(cls, b: float = 1.0) -> "AnnealFunctions":
        """No driver at all: A == 0, B constant."""
        return cls((0.0, 1.0), (0.0, 0.0), (b, b), None)

    def at(self, fraction: Union[float, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        return np.interp(fraction, self.s, self.a), np.interp(fraction, self.s, self.b)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"s": self.s, "A": self.a, "B": self.b})


def read_anneal_table(path: Union[str, Path], min_ratio: Optional[float] = 100.0) -> AnnealFunctions:
    """Load an anneal table from a CSV with columns s, A, B."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"anneal table not found: {path}")
    frame = pd.read_csv(path)
    missing = {"s", "A", "B"} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    try:
        return AnnealFunctions(tuple(frame["s"]), tuple(frame["A"]), tuple(frame["B"]), min_ratio)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def transverse_coupling(a: float, temperature: float, slices: int, eps: float = A_EPSILON) -> Tuple[float, bool]:
    """Replica coupling -(T*P/2) ln tanh(A/(T*P)); A below ``eps`` is clamped to ``eps``.

    Returns the coupling and whether the clamp applied.
    """
    pt = temperature * slices
    clamped = a <= eps
    t = math.tanh(max(a, eps) / pt)
    return -0.5 * pt * math.log(t), clamped


def _batches(reads: int) -> List[Tuple[int, int]]:
    return [(b, min(READ_BATCH, reads - b * READ_BATCH)) for b in range((reads + READ_BATCH - 1) // READ_BATCH)]


def _sa_batch(model: IsingModel, temperatures: np.ndarray, rng: RandomSource, size: int) -> np.ndarray:
    generator = rng.generator()
    n = model.n
    spins = (2 * generator.integers(0, 2, size=(size, n)) - 1).astype(np.float64)
    fields = model.biases + (model.adjacency @ spins.T).T
    nbr = [(np.array(idx, dtype=np.int64), np.array(w)) for idx, w in model.neighbor_lists]
    for temperature in temperatures.tolist():
        uniforms = generator.random((size, n))
        for k in range(n):
            delta = 2.0 * spins[:, k] * fields[:, k]
            if temperature <= 0.0:
                accept = delta < 0.0
            else:
                accept = (delta <= 0.0) | (uniforms[:, k] < np.exp(-np.maximum(delta, 0.0) / temperature))
            rows = np.flatnonzero(accept)
            if rows.size == 0:
                continue
            spins[rows, k] = -spins[rows, k]
            idx, w = nbr[k]
            if idx.size:
                fields[rows[:, None], idx[None, :]] += 2.0 * spins[rows, k][:, None] * w[None, :]
    return spins.astype(np.int8)


def sample_sa(
    model: IsingModel,
    reads: int,
    schedule: Schedule,
    rng: RandomSource,
    *,
    name: str = "sa",
    workers: int = 1,
) -> SampleSet:
    """``reads`` independent annealing chains; each read is a chain's final state.

    Chains start uniformly at random and sweep spins in ascending order with the
    same acceptance rule as ``simulated_anneal``. A batch of chains advances together
    and draws its uniforms as one block per sweep, so a read is not the state
    ``simulated_anneal`` would reach from the same stream.
    """
    if reads < 1:
        raise ValueError("reads must be >= 1")
    if not schedule.is_cooling:
        raise ValueError("the SA sampler needs a cooling schedule")
    temperatures = schedule.temperatures()
    tasks = [(model, temperatures, rng.child(b), size) for b, size in _batches(reads)]
    finals = run_parallel(_sa_batch, tasks, workers)
    states = [SpinConfiguration(row) for batch in finals for row in batch]
    logger.info("sampler %s: %d reads, %d distinct", name, reads, len(set(states)))
    metadata = {"kind": "sa", "reads": reads, "schedule": schedule.to_text()}
    return SampleSet.from_states(name, model.n, states, metadata)


def _slice_groups(slices: int) -> List[np.ndarray]:
    """Partition of the replica ring into groups without ring-adjacent members."""
    if slices % 2 == 0:
        return [np.arange(0, slices, 2), np.arange(1, slices, 2)]
    return [np.arange(0, slices - 1, 2), np.arange(1, slices, 2), np.array([slices - 1])]


def _sqa_batch(
    model: IsingModel,
    a_values: np.ndarray,
    b_values: np.ndarray,
    slices: int,
    temperature: float,
    read_slice: int,
    global_moves: bool,
    rng: RandomSource,
    size: int,
) -> np.ndarray:
    generator = rng.generator()
    n = model.n
    pt = slices * temperature
    # every replica starts from the read's random state
    start = 2 * generator.integers(0, 2, size=(size, 1, n)) - 1
    spins = np.repeat(start, slices, axis=1).astype(np.float64)
    fields = model.biases + np.einsum("rpj,jk->rpk", spins, model.dense_couplings)
    nbr = [(np.array(idx, dtype=np.int64), np.array(w)) for idx, w in model.neighbor_lists]
    groups = _slice_groups(slices)
    ring_up = [(g + 1) % slices for g in groups]
    ring_down = [(g - 1) % slices for g in groups]

    for a, b in zip(a_values.tolist(), b_values.tolist()):
        j_perp, _ = transverse_coupling(a, temperature, slices)
        uniforms = generator.random((size, slices, n))
        for k in range(n):
            idx, w = nbr[k]
            for g, up, down in zip(groups, ring_up, ring_down):
                s = spins[:, g, k]
                action = (b * 2.0 * s * fields[:, g, k] + 2.0 * j_perp * s * (spins[:, up, k] + spins[:, down, k])) / pt
                accept = (action <= 0.0) | (uniforms[:, g, k] < np.exp(-np.maximum(action, 0.0)))
                change = np.where(accept, -2.0 * s, 0.0)
                spins[:, g, k] = s + change
                if idx.size:
                    fields[:, g[:, None], idx[None, :]] += change[:, :, None] * w[None, None, :]
        if not global_moves:
            continue
        # flipping one spin in every replica leaves the replica coupling unchanged
        uniforms = generator.random((size, n))
        for k in range(n):
            s = spins[:, :, k]
            action = b * (2.0 * s * fields[:, :, k]).sum(axis=1) / pt
            accept = (action <= 0.0) | (uniforms[:, k] < np.exp(-np.maximum(action, 0.0)))
            rows = np.flatnonzero(accept)
            if rows.size == 0:
                continue
            spins[rows, :, k] = -spins[rows, :, k]
            idx, w = nbr[k]
            if idx.size:
                fields[rows[:, None, None], np.arange(slices)[None, :, None], idx[None, None, :]] += (
                    2.0 * spins[rows, :, k][:, :, None] * w[None, None, :]
                )
    return spins[:, read_slice, :].astype(np.int8)


def sample_sqa(
    model: IsingModel,
    reads: int,
    anneal: AnnealFunctions,
    trotter_slices: int,
    sweeps: int,
    base_temperature: float,
    rng: RandomSource,
    *,
    name: str = "sqa",
    read_slice: int = 0,
    global_moves: bool = True,
    workers: int = 1,
) -> SampleSet:
    """Simulated quantum annealing surrogate over ``trotter_slices`` coupled replicas.

    Each replica carries the problem energy scaled by B(s) at slice temperature P*T;
    neighbouring replicas on the imaginary-time ring are coupled ferromagnetically by
    ``transverse_coupling(A(s))``. Sweep t runs at s = t / (sweeps - 1). A sweep is a
    local pass over every spin of every replica followed, unless disabled, by a pass of
    moves that flip one spin in all replicas together. Each read reports replica
    ``read_slice`` at s = 1.
    """
    if reads < 1:
        raise ValueError("reads must be >= 1")
    if trotter_slices < 2:
        raise ValueError("the surrogate needs at least two Trotter slices")
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    if not base_temperature > 0:
        raise ValueError("base temperature must be positive")
    if not 0 <= read_slice < trotter_slices:
        raise ValueError(f"read slice {read_slice} outside 0..{trotter_slices - 1}")
    fractions = np.linspace(0.0, 1.0, sweeps) if sweeps > 1 else np.ones(1)
    a_values, b_values = anneal.at(fractions)
    clamped = int(np.count_nonzero(a_values <= A_EPSILON))
    if clamped:
        logger.info("sampler %s: driver clamped to %g on %d of %d sweeps", name, A_EPSILON, clamped, sweeps)

    tasks = [
        (model, a_values, b_values, trotter_slices, base_temperature, read_slice, global_moves, rng.child(b), size)
        for b, size in _batches(reads)
    ]
    finals = run_parallel(_sqa_batch, tasks, workers)
    states = [SpinConfiguration(row) for batch in finals for row in batch]
    logger.info("sampler %s: %d reads, %d distinct", name, reads, len(set(states)))
    metadata = {
        "kind": "sqa",
        "reads": reads,
        "sweeps": sweeps,
        "trotter_slices": trotter_slices,
        "base_temperature": repr(float(base_temperature)),
        "read_slice": read_slice,
        "global_moves": str(global_moves).lower(),
        "clamped_sweeps": clamped,
        "a_epsilon": repr(A_EPSILON),
    }
    return SampleSet.from_states(name, model.n, states, metadata)


def sample_exhaustive(model: IsingModel, name: str = "exhaustive") -> SampleSet:
    """Every state exactly once."""
    if model.n > EXHAUSTIVE_LIMIT:
        raise ResourceCapError(f"exhaustive sampling of 2^{model.n} states exceeds the n <= {EXHAUSTIVE_LIMIT} cap")
    states = [SpinConfiguration.from_index(i, model.n) for i in range(1 << model.n)]
    return SampleSet.from_states(name, model.n, states, {"kind": "exhaustive", "reads": 1 << model.n})


def parse_reads(text: str, expected_n: Optional[int] = None, source: str = "<text>") -> SampleSet:
    """Parse the ``# sample sampler=<name> n=<N> format=pm1`` format."""
    name = None
    n = None
    metadata: Dict[str, str] = {}
    counts: Counter = Counter()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if name is None:
            match = _HEADER.match(line)
            if not match:
                raise SampleFormatError("expected header '# sample sampler=<name> n=<N> format=pm1'", source, lineno)
            name, n = match.group(1), int(match.group(2))
            if expected_n is not None and n != expected_n:
                raise DimensionMismatchError(expected_n, n, f"sample file {source}")
            continue
        if line.startswith("#"):
            meta = _META.match(line)
            if meta:
                metadata[meta.group(1)] = meta.group(2).strip()
            continue
        tokens = line.split()
        if len(tokens) != n + 1:
            raise SampleFormatError(f"expected {n} spins and a count, got {len(tokens)} tokens", source, lineno)
        try:
            spins = [_SPIN_TOKENS[t] for t in tokens[:-1]]
        except KeyError as exc:
            raise SampleFormatError(f"invalid spin token {exc.args[0]!r}", source, lineno) from None
        if not tokens[-1].isdigit() or int(tokens[-1]) < 1:
            raise SampleFormatError(f"count must be a positive integer, got {tokens[-1]!r}", source, lineno)
        counts[SpinConfiguration(spins)] += int(tokens[-1])
    if name is None:
        raise SampleFormatError("empty sample file", source)
    if not counts:
        raise SampleFormatError("sample file contains no reads", source)
    return SampleSet(name, n, tuple(counts.items()), metadata)


def ingest_reads(path: Union[str, Path], expected_n: Optional[int] = None) -> SampleSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"sample file not found: {path}")
    return parse_reads(path.read_text(encoding="utf-8"), expected_n, str(path))


def format_reads(samples: SampleSet) -> str:
    lines = [f"# sample sampler={samples.sampler_name} n={samples.n} format=pm1"]
    lines += [f"# meta {key}={value}" for key, value in samples.metadata.items()]
    for state, count in samples.reads:
        lines.append(" ".join("+1" if v > 0 else "-1" for v in state) + f" {count}")
    return "\n".join(lines) + "\n"


def write_reads(samples: SampleSet, path: Union[str, Path]) -> None:
    Path(path).write_text(format_reads(samples), encoding="utf-8")


def total_variation(p: Mapping[SpinConfiguration, float], q: Mapping[SpinConfiguration, float]) -> float:
    """Half the L1 distance between two distributions over states."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def boltzmann_distribution(model: IsingModel, temperature: float) -> Dict[SpinConfiguration, float]:
    """Exact Boltzmann weights by enumeration (n <= 20)."""
    if model.n > EXHAUSTIVE_LIMIT:
        raise ResourceCapError(f"enumerating 2^{model.n} states exceeds the n <= {EXHAUSTIVE_LIMIT} cap")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    states = [SpinConfiguration.from_index(i, model.n) for i in range(1 << model.n)]
    spins = np.array([s.array for s in states], dtype=np.float64)
    energies = -(0.5 * np.einsum("si,ij,sj->s", spins, model.dense_couplings, spins) + spins @ model.biases)
    weights = np.exp(-(energies - energies.min()) / temperature)
    weights /= weights.sum()
    return dict(zip(states, weights.tolist()))


def config_digest(items: Sequence[Tuple[str, str]]) -> str:
    """Stable digest of key/value settings, stored in sample metadata by the pipeline."""
    payload = "\n".join(f"{k}={v}" for k, v in sorted(items))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
