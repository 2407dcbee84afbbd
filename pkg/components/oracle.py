"""Exhaustive ground truth for small instances (n <= 20).

Every state's energy, its steepest-descent successor (same tie rule as
``descend_zero_t``), its basin, and for every minimum the exact lowest escape barrier
obtained by growing single-flip connectivity in ascending energy order.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from components.ising import IsingModel, SpinConfiguration
from utils.errors import DimensionMismatchError, NotAMinimumError, ResourceCapError
from utils.parallel import run_parallel

logger = logging.getLogger(__name__)

MAX_SPINS = 20
NO_ESCAPE = math.inf
_CHUNK = 1 << 14


def _state_block(n: int, start: int, stop: int) -> np.ndarray:
    index = np.arange(start, stop, dtype=np.int64)
    return (2 * ((index[:, None] >> np.arange(n)) & 1) - 1).astype(np.float64)


def _fill_block(model: IsingModel, start: int, stop: int) -> Tuple[np.ndarray, np.ndarray]:
    """Energies and steepest-descent successors for states start..stop-1."""
    spins = _state_block(model.n, start, stop)
    fields = spins @ model.dense_couplings + model.biases
    energies = -(0.5 * np.sum(spins @ model.dense_couplings * spins, axis=1) + spins @ model.biases)
    delta = 2.0 * spins * fields
    k = np.argmin(delta, axis=1)
    index = np.arange(start, stop, dtype=np.int64)
    downhill = delta[np.arange(stop - start), k] < 0.0
    successor = np.where(downhill, index ^ (np.int64(1) << k), index)
    return energies, successor


class _Components:
    """Union-find over state indices; each root knows its basin or that it spans several."""

    def __init__(self, size: int):
        self.parent = np.arange(size, dtype=np.int64)
        self.rank = np.zeros(size, dtype=np.int8)
        self.basin: Dict[int, int] = {}
        self.mixed: Dict[int, bool] = {}
        self.pending: Dict[int, List[int]] = {}

    def find(self, a: int) -> int:
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return int(root)

    def add(self, x: int, basin: int, is_minimum: bool) -> None:
        self.basin[x] = basin
        self.mixed[x] = False
        self.pending[x] = [x] if is_minimum else []

    def union(self, a: int, b: int) -> Tuple[int, List[int]]:
        """Merge the sets of a and b; returns the root and minima that just escaped."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra, []
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        mixed = self.mixed.pop(rb) or self.mixed[ra] or self.basin[ra] != self.basin[rb]
        self.basin.pop(rb)
        pending = self.pending[ra] + self.pending.pop(rb)
        self.mixed[ra] = mixed
        if mixed:
            self.pending[ra] = []
            return ra, pending
        self.pending[ra] = pending
        return ra, []


@dataclass
class ExactLandscape:
    model: IsingModel
    energies: np.ndarray
    successor: np.ndarray
    basin: np.ndarray
    minima: Tuple[int, ...]
    barriers: Dict[int, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.model.n

    def _index(self, s: SpinConfiguration) -> int:
        if s.n != self.n:
            raise DimensionMismatchError(self.n, s.n)
        return s.index()

    def state(self, index: int) -> SpinConfiguration:
        return SpinConfiguration.from_index(int(index), self.n)

    def energy_of(self, s: SpinConfiguration) -> float:
        return float(self.energies[self._index(s)])

    def basin_of(self, s: SpinConfiguration) -> SpinConfiguration:
        return self.state(self.basin[self._index(s)])

    def minimum_states(self) -> List[SpinConfiguration]:
        """Minima ordered by spin string."""
        return sorted((self.state(m) for m in self.minima), key=SpinConfiguration.to_string)

    def basin_sizes(self) -> Dict[int, int]:
        values, counts = np.unique(self.basin, return_counts=True)
        return dict(zip(values.tolist(), counts.tolist()))

    def basin_fraction(self, lm: SpinConfiguration) -> float:
        index = self._require_minimum(lm)
        return float(np.count_nonzero(self.basin == index)) / self.basin.size

    def _require_minimum(self, lm: SpinConfiguration) -> int:
        index = self._index(lm)
        if self.successor[index] != index:
            raise NotAMinimumError(f"{lm.to_string()} is not a local minimum")
        return index

    def to_frame(self) -> pd.DataFrame:
        """Landscape dump: one row per state."""
        index = np.arange(self.energies.size)
        return pd.DataFrame({"index": index, "energy": self.energies, "basin": self.basin})

    def minima_frame(self) -> pd.DataFrame:
        sizes = self.basin_sizes()
        rows = []
        for lm in self.minimum_states():
            m = lm.index()
            rows.append(
                {
                    "lm": lm.to_string(),
                    "index": m,
                    "e_lm": float(self.energies[m]),
                    "basin_size": sizes[m],
                    "basin_fraction": sizes[m] / self.basin.size,
                    "barrier": self.barriers.get(m, NO_ESCAPE),
                }
            )
        return pd.DataFrame(rows, columns=["lm", "index", "e_lm", "basin_size", "basin_fraction", "barrier"])

    def write_dump(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _compute_barriers(energies: np.ndarray, basin: np.ndarray, minima: Tuple[int, ...], n: int) -> Dict[int, float]:
    """Barrier of every minimum in one ascending-energy sweep, ties in index order."""
    order = np.lexsort((np.arange(energies.size), energies))
    is_minimum = np.zeros(energies.size, dtype=bool)
    is_minimum[list(minima)] = True
    active = np.zeros(energies.size, dtype=bool)
    components = _Components(energies.size)
    barriers: Dict[int, float] = {}
    bits = [1 << k for k in range(n)]
    for x in order.tolist():
        components.add(x, int(basin[x]), bool(is_minimum[x]))
        active[x] = True
        level = float(energies[x])
        for bit in bits:
            y = x ^ bit
            if not active[y]:
                continue
            _, escaped = components.union(x, y)
            for m in escaped:
                barriers[m] = level - float(energies[m])
    for m in minima:
        barriers.setdefault(m, NO_ESCAPE)
    return barriers


def enumerate_landscape(model: IsingModel, workers: int = 1) -> ExactLandscape:
    """Evaluate all 2^n states, their descent basins and every minimum's barrier."""
    if model.n > MAX_SPINS:
        raise ResourceCapError(
            f"exhaustive enumeration needs 2^{model.n} states; only n <= {MAX_SPINS} is supported"
        )
    size = 1 << model.n
    blocks = [(model, start, min(start + _CHUNK, size)) for start in range(0, size, _CHUNK)]
    filled = run_parallel(_fill_block, blocks, workers)
    energies = np.concatenate([e for e, _ in filled])
    successor = np.concatenate([s for _, s in filled])

    basin = successor.copy()
    while True:
        jumped = basin[basin]
        if np.array_equal(jumped, basin):
            break
        basin = jumped
    minima = tuple(np.flatnonzero(successor == np.arange(size)).tolist())
    barriers = _compute_barriers(energies, basin, minima, model.n)
    logger.info("landscape n=%d: %d minima", model.n, len(minima))
    return ExactLandscape(model, energies, successor, basin, minima, barriers)


def exact_barrier(landscape: ExactLandscape, lm: SpinConfiguration) -> float:
    """Lowest energy above e_lm at which lm's connected region reaches another basin.

    ``NO_ESCAPE`` (infinity) when the landscape has a single basin.
    """
    return landscape.barriers[landscape._require_minimum(lm)]


def exact_bottom_dos(landscape: ExactLandscape, lm: SpinConfiguration, window: float) -> float:
    """Basin states with energy in [e_lm, e_lm + window], per unit energy."""
    if window <= 0:
        raise ValueError("DOS window must be positive")
    index = landscape._require_minimum(lm)
    e_lm = landscape.energies[index]
    members = landscape.basin == index
    inside = (landscape.energies >= e_lm) & (landscape.energies <= e_lm + window)
    return float(np.count_nonzero(members & inside)) / window


def rank_agreement(estimates: Mapping[SpinConfiguration, float], exact: Mapping[SpinConfiguration, float]) -> Optional[float]:
    """Spearman correlation over the minima present in both mappings; None below 3 pairs."""
    shared = sorted(set(estimates) & set(exact), key=SpinConfiguration.to_string)
    if len(shared) < 3:
        return None
    rho = stats.spearmanr([estimates[lm] for lm in shared], [exact[lm] for lm in shared]).correlation
    return None if rho is None or math.isnan(rho) else float(rho)


def global_minimum(landscape: ExactLandscape) -> Optional[SpinConfiguration]:
    """Lowest-energy state, lowest index on ties."""
    if landscape.energies.size == 0:
        return None
    return landscape.state(int(np.argmin(landscape.energies)))
