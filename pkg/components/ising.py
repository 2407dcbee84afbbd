"""Ising spin-glass model, energy evaluation and single-flip neighborhood.

E(s) = -sum_{i<j} J_ij s_i s_j - sum_j h_j s_j, spins in {-1, +1}.
"""
import logging
import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from utils.errors import DimensionMismatchError, ModelFormatError

logger = logging.getLogger(__name__)

_SEED_LIMIT = 2 ** 64
_HEADER = re.compile(r"^#\s*ising\s+n=(\d+)\s*$")


class SpinConfiguration:
    """One immutable state s in {-1,+1}^N, compared bit-exactly."""

    __slots__ = ("_spins", "_key")

    def __init__(self, spins: Union[Sequence[int], np.ndarray]):
        arr = np.asarray(spins)
        if arr.ndim != 1:
            raise ValueError("spins must be a one-dimensional sequence")
        if arr.size and not np.all((arr == 1) | (arr == -1)):
            raise ValueError("every spin must be exactly -1 or +1")
        arr = np.array(arr, dtype=np.int8)
        arr.setflags(write=False)
        self._spins = arr
        self._key = arr.tobytes()

    @classmethod
    def from_string(cls, text: str) -> "SpinConfiguration":
        """Parse the compact ``+-+`` form used in reports."""
        mapping = {"+": 1, "-": -1}
        try:
            return cls([mapping[c] for c in text.strip()])
        except KeyError as exc:
            raise ValueError(f"invalid spin character {exc.args[0]!r} in {text!r}") from None

    @classmethod
    def from_index(cls, index: int, n: int) -> "SpinConfiguration":
        """State whose bit k of ``index`` is set iff spin k is +1."""
        bits = (index >> np.arange(n)) & 1
        return cls(2 * bits - 1)

    @classmethod
    def random(cls, n: int, generator: np.random.Generator) -> "SpinConfiguration":
        return cls(2 * generator.integers(0, 2, size=n) - 1)

    @property
    def array(self) -> np.ndarray:
        """Read-only int8 view of the spins."""
        return self._spins

    @property
    def key(self) -> bytes:
        return self._key

    @property
    def n(self) -> int:
        return self._spins.size

    def index(self) -> int:
        return int(sum(1 << k for k, v in enumerate(self._spins) if v > 0))

    def flip(self, k: int) -> "SpinConfiguration":
        if not 0 <= k < self.n:
            raise IndexError(f"spin index {k} out of range for n={self.n}")
        arr = self._spins.copy()
        arr[k] = -arr[k]
        return SpinConfiguration(arr)

    def to_string(self) -> str:
        return "".join("+" if v > 0 else "-" for v in self._spins)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, k: int) -> int:
        return int(self._spins[k])

    def __iter__(self) -> Iterator[int]:
        return (int(v) for v in self._spins)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpinConfiguration):
            return NotImplemented
        return self._key == other._key and self.n == other.n

    def __hash__(self) -> int:
        return hash(self._key)

    def __neg__(self) -> "SpinConfiguration":
        return SpinConfiguration(-self._spins)

    def __repr__(self) -> str:
        return f"SpinConfiguration('{self.to_string()}')"


class IsingModel:
    """Sparse symmetric couplings J_ij (i<j) and biases h_j.

    Instances are treated as immutable; derived adjacency structures are cached.
    """

    def __init__(self, n: int, couplings: Mapping[Tuple[int, int], float], biases: Sequence[float]):
        if n < 0:
            raise ValueError("spin count must be non-negative")
        h = np.array(biases, dtype=np.float64)
        if h.shape != (n,):
            raise DimensionMismatchError(n, h.size, "bias vector")
        if not np.all(np.isfinite(h)):
            raise ValueError("biases must be finite")

        canonical = {}
        for (i, j), value in couplings.items():
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-coupling ({i},{j}) is not allowed")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"coupling ({i},{j}) out of range for n={n}")
            pair = (min(i, j), max(i, j))
            if pair in canonical:
                raise ValueError(f"duplicate coupling for pair {pair}")
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"coupling {pair} must be finite")
            canonical[pair] = value

        pairs = sorted(canonical)
        self._n = n
        self._h = h
        self._h.setflags(write=False)
        self._pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        self._values = np.array([canonical[p] for p in pairs], dtype=np.float64)
        self._pairs.setflags(write=False)
        self._values.setflags(write=False)

    @property
    def n(self) -> int:
        return self._n

    @property
    def biases(self) -> np.ndarray:
        return self._h

    @property
    def pairs(self) -> np.ndarray:
        """(m, 2) array of coupled pairs in ascending (i, j) order."""
        return self._pairs

    @property
    def coupling_values(self) -> np.ndarray:
        return self._values

    @property
    def couplings(self) -> dict:
        return {(int(i), int(j)): float(v) for (i, j), v in zip(self._pairs, self._values)}

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric CSR coupling matrix; row k holds the neighbors of spin k."""
        rows = np.concatenate([self._pairs[:, 0], self._pairs[:, 1]])
        cols = np.concatenate([self._pairs[:, 1], self._pairs[:, 0]])
        data = np.concatenate([self._values, self._values])
        matrix = sparse.csr_matrix((data, (rows, cols)), shape=(self._n, self._n))
        matrix.sort_indices()
        return matrix

    @cached_property
    def dense_couplings(self) -> np.ndarray:
        return self.adjacency.toarray()

    @cached_property
    def neighbor_lists(self) -> Tuple[Tuple[Tuple[int, ...], Tuple[float, ...]], ...]:
        """Per-spin (neighbor indices, weights) as plain tuples for tight Python loops."""
        adj = self.adjacency
        out = []
        for k in range(self._n):
            lo, hi = adj.indptr[k], adj.indptr[k + 1]
            out.append((tuple(int(j) for j in adj.indices[lo:hi]), tuple(float(w) for w in adj.data[lo:hi])))
        return tuple(out)

    def local_fields(self, spins: np.ndarray) -> np.ndarray:
        """h_k + sum_j J_kj s_j for every k."""
        return self._h + self.adjacency @ np.asarray(spins, dtype=np.float64)

    def energy_scale(self) -> float:
        """Largest absolute coupling or bias; 1.0 for an all-zero model."""
        values = np.concatenate([np.abs(self._values), np.abs(self._h)])
        scale = float(values.max()) if values.size else 0.0
        return scale if scale > 0 else 1.0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IsingModel):
            return NotImplemented
        return (
            self._n == other._n
            and np.array_equal(self._h, other._h)
            and np.array_equal(self._pairs, other._pairs)
            and np.array_equal(self._values, other._values)
        )

    def __repr__(self) -> str:
        return f"IsingModel(n={self._n}, couplings={len(self._values)})"


@dataclass(frozen=True)
class RandomSource:
    """Reproducible random stream identified by (seed, stream id, child path)."""

    seed: int
    stream: int = 0
    path: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed < _SEED_LIMIT:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.stream < 0 or any(p < 0 for p in self.path):
            raise ValueError("stream ids must be non-negative")

    def child(self, *index: int) -> "RandomSource":
        """Independent sub-stream, e.g. one per chain or per read."""
        return RandomSource(self.seed, self.stream, self.path + tuple(int(i) for i in index))

    def generator(self) -> np.random.Generator:
        """Fresh generator; every call replays the same draw sequence."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream, *self.path))
        return np.random.default_rng(seq)


RngLike = Union[RandomSource, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, RandomSource):
        return rng.generator()
    return rng


def _check_size(model: IsingModel, s: SpinConfiguration) -> None:
    if s.n != model.n:
        raise DimensionMismatchError(model.n, s.n)


def energy(model: IsingModel, s: SpinConfiguration) -> float:
    """Energy of ``s``.

    Terms are taken in ascending (i, j) order, then ascending j for biases, and summed
    with ``math.fsum`` so the result is exactly rounded and reproducible.
    """
    _check_size(model, s)
    spins = s.array.astype(np.float64)
    pair_terms = model.coupling_values * spins[model.pairs[:, 0]] * spins[model.pairs[:, 1]]
    bias_terms = model.biases * spins
    return -math.fsum(np.concatenate([pair_terms, bias_terms]).tolist())


def delta_energy(model: IsingModel, s: SpinConfiguration, k: int) -> float:
    """E(s with spin k flipped) - E(s), in O(degree of k)."""
    _check_size(model, s)
    if not 0 <= k < model.n:
        raise IndexError(f"spin index {k} out of range for n={model.n}")
    neighbors, weights = model.neighbor_lists[k]
    spins = s.array
    field = model.biases[k] + math.fsum(w * spins[j] for j, w in zip(neighbors, weights))
    return float(2.0 * spins[k] * field)


def neighbors(s: SpinConfiguration) -> Iterator[SpinConfiguration]:
    """The N single-flip neighbors of ``s`` in ascending flip-index order."""
    for k in range(s.n):
        yield s.flip(k)


def random_model(
    n: int,
    rng: RngLike,
    density: float = 1.0,
    integer: bool = False,
    scale: float = 1.0,
) -> IsingModel:
    """Random spin glass; ``integer=True`` draws half-integers in [-2, 2] for exact arithmetic."""
    generator = as_generator(rng)

    def draw(size):
        if integer:
            return generator.integers(-4, 5, size=size) / 2.0
        return generator.normal(0.0, scale, size=size)

    couplings = {}
    for i in range(n):
        for j in range(i + 1, n):
            if generator.random() < density:
                couplings[(i, j)] = float(draw(None))
    return IsingModel(n, couplings, draw(n))


def parse_model(text: str, source: str = "<text>") -> IsingModel:
    """Parse the ``# ising n=<N>`` text format."""
    n = None
    biases = {}
    couplings = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if n is None:
            match = _HEADER.match(line)
            if not match:
                raise ModelFormatError("expected header '# ising n=<N>'", source, lineno)
            n = int(match.group(1))
            continue
        if line.startswith("#"):
            continue
        tokens = line.split()
        try:
            if tokens[0] == "h" and len(tokens) == 3:
                j, value = int(tokens[1]), float(tokens[2])
                if j in biases:
                    raise ModelFormatError(f"duplicate bias for spin {j}", source, lineno)
                if not 0 <= j < n:
                    raise ModelFormatError(f"spin index {j} out of range", source, lineno)
                biases[j] = value
            elif tokens[0] == "J" and len(tokens) == 4:
                i, j, value = int(tokens[1]), int(tokens[2]), float(tokens[3])
                pair = (min(i, j), max(i, j))
                if pair in couplings:
                    raise ModelFormatError(f"duplicate coupling {pair}", source, lineno)
                couplings[pair] = value
            else:
                raise ModelFormatError(f"unknown directive {line!r}", source, lineno)
        except ValueError as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(str(exc), source, lineno) from exc
    if n is None:
        raise ModelFormatError("empty model file", source)
    try:
        return IsingModel(n, couplings, [biases.get(j, 0.0) for j in range(n)])
    except ValueError as exc:
        raise ModelFormatError(str(exc), source) from exc


def format_model(model: IsingModel) -> str:
    lines: List[str] = [f"# ising n={model.n}"]
    lines += [f"h {j} {float(v)!r}" for j, v in enumerate(model.biases)]
    lines += [f"J {int(i)} {int(j)} {float(v)!r}" for (i, j), v in zip(model.pairs, model.coupling_values)]
    return "\n".join(lines) + "\n"


def read_model(path: Union[str, Path]) -> IsingModel:
    path = Path(path)
    return parse_model(path.read_text(encoding="utf-8"), str(path))


def write_model(model: IsingModel, path: Union[str, Path]) -> None:
    Path(path).write_text(format_model(model), encoding="utf-8")
