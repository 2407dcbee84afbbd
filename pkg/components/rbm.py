"""Restricted Boltzmann machines: CD-k training, file formats and Ising conversion.

E(v, h) = -v^T W h - a^T v - b^T h over binary units v in {0,1}^V, h in {0,1}^H.
"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from components.ising import IsingModel, RandomSource, RngLike, SpinConfiguration, as_generator
from utils.errors import DataError, DimensionMismatchError, ModelFormatError, ParseError, TrainingDivergedError

logger = logging.getLogger(__name__)

TRAINING_STREAM = 1
_HEADER = re.compile(r"^#\s*rbm\s+nv=(\d+)\s+nh=(\d+)\s*$")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Binary training patterns, one row per pattern."""

    patterns: np.ndarray

    def __post_init__(self):
        arr = np.array(self.patterns, dtype=np.uint8)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError("a dataset needs at least one pattern of a common length")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("patterns must be 0/1 valued")
        arr.setflags(write=False)
        object.__setattr__(self, "patterns", arr)

    @property
    def size(self) -> int:
        return self.patterns.shape[0]

    @property
    def width(self) -> int:
        return self.patterns.shape[1]


def parse_dataset(text: str, source: str = "<text>") -> Dataset:
    rows: List[List[int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if set(line) - {"0", "1"}:
            raise ParseError("patterns may only contain '0' and '1'", source, lineno)
        if rows and len(line) != len(rows[0]):
            raise ParseError(f"pattern length {len(line)} differs from {len(rows[0])}", source, lineno)
        rows.append([int(c) for c in line])
    if not rows:
        raise ParseError("dataset is empty", source)
    return Dataset(np.array(rows))


def read_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    return parse_dataset(path.read_text(encoding="utf-8"), str(path))


def write_dataset(data: Dataset, path: Union[str, Path]) -> None:
    lines = ["".join(str(int(v)) for v in row) for row in data.patterns]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def synthetic_dataset(
    n_visible: int,
    prototypes: int,
    per_prototype: int,
    flip_probability: float,
    rng: RngLike,
) -> Dataset:
    """Random prototype patterns, each copied ``per_prototype`` times with bit-flip noise."""
    if n_visible < 1 or prototypes < 1 or per_prototype < 1:
        raise ValueError("n_visible, prototypes and per_prototype must be positive")
    if not 0.0 <= flip_probability <= 0.5:
        raise ValueError("flip probability must lie in [0, 0.5]")
    generator = as_generator(rng)
    centers = generator.integers(0, 2, size=(prototypes, n_visible))
    patterns = np.repeat(centers, per_prototype, axis=0)
    noise = generator.random(patterns.shape) < flip_probability
    return Dataset(np.where(noise, 1 - patterns, patterns))


@dataclass(frozen=True)
class Rbm:
    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        a = np.array(self.visible_bias, dtype=np.float64)
        b = np.array(self.hidden_bias, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("weights must be a matrix")
        if a.shape != (w.shape[0],):
            raise DimensionMismatchError(w.shape[0], a.size, "visible bias")
        if b.shape != (w.shape[1],):
            raise DimensionMismatchError(w.shape[1], b.size, "hidden bias")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("RBM parameters must be finite")
        for name, arr in (("weights", w), ("visible_bias", a), ("hidden_bias", b)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, n_visible: int, n_hidden: int) -> "Rbm":
        return cls(np.zeros((n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_hidden))

    @classmethod
    def random(cls, n_visible: int, n_hidden: int, rng: RngLike, scale: float = 0.01) -> "Rbm":
        generator = as_generator(rng)
        return cls(generator.normal(0.0, scale, (n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_hidden))

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    def energy(self, visible: Sequence[int], hidden: Sequence[int]) -> float:
        v = np.asarray(visible, dtype=np.float64)
        h = np.asarray(hidden, dtype=np.float64)
        if v.shape != (self.n_visible,):
            raise DimensionMismatchError(self.n_visible, v.size, "visible vector")
        if h.shape != (self.n_hidden,):
            raise DimensionMismatchError(self.n_hidden, h.size, "hidden vector")
        return -float(v @ self.weights @ h + self.visible_bias @ v + self.hidden_bias @ h)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Rbm):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.visible_bias, other.visible_bias)
            and np.array_equal(self.hidden_bias, other.hidden_bias)
        )


def format_rbm(rbm: Rbm) -> str:
    """Header, one row of weights per visible unit, then visible and hidden bias lines."""
    lines = [f"# rbm nv={rbm.n_visible} nh={rbm.n_hidden}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in rbm.weights]
    lines.append(" ".join(repr(float(x)) for x in rbm.visible_bias))
    lines.append(" ".join(repr(float(x)) for x in rbm.hidden_bias))
    return "\n".join(lines) + "\n"


def parse_rbm(text: str, source: str = "<text>") -> Rbm:
    lines = [(i, raw.strip()) for i, raw in enumerate(text.splitlines(), start=1) if raw.strip()]
    if not lines:
        raise ModelFormatError("empty RBM file", source)
    match = _HEADER.match(lines[0][1])
    if not match:
        raise ModelFormatError("expected header '# rbm nv=<V> nh=<H>'", source, lines[0][0])
    nv, nh = int(match.group(1)), int(match.group(2))
    body = [(i, line) for i, line in lines[1:] if not line.startswith("#")]
    if len(body) != nv + 2:
        raise ModelFormatError(f"expected {nv} weight rows and 2 bias lines, got {len(body)} lines", source)

    def row(index: int, width: int) -> np.ndarray:
        lineno, line = body[index]
        try:
            values = np.array([float(t) for t in line.split()])
        except ValueError as exc:
            raise ModelFormatError(str(exc), source, lineno) from exc
        if values.size != width:
            raise ModelFormatError(f"expected {width} values, got {values.size}", source, lineno)
        return values

    weights = np.array([row(i, nh) for i in range(nv)]).reshape(nv, nh)
    try:
        return Rbm(weights, row(nv, nv), row(nv + 1, nh))
    except ValueError as exc:
        raise ModelFormatError(str(exc), source) from exc


def read_rbm(path: Union[str, Path]) -> Rbm:
    path = Path(path)
    return parse_rbm(path.read_text(encoding="utf-8"), str(path))


def write_rbm(rbm: Rbm, path: Union[str, Path]) -> None:
    Path(path).write_text(format_rbm(rbm), encoding="utf-8")


@dataclass(frozen=True)
class TrainingConfig:
    """Contrastive-divergence settings; ``snapshot_epochs`` defaults to the last epoch."""

    cd_k: int = 1
    learning_rate: float = 0.05
    epochs: int = 1
    batch_size: int = 10
    seed: int = 0
    snapshot_epochs: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.cd_k < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("cd_k, epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        snapshots = tuple(sorted(set(self.snapshot_epochs))) or (self.epochs,)
        if snapshots[0] < 1 or snapshots[-1] > self.epochs:
            raise ValueError(f"snapshot epochs must lie in 1..{self.epochs}")
        object.__setattr__(self, "snapshot_epochs", snapshots)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    reconstruction_error: float
    presentations: int


@dataclass
class TrainingResult:
    final: Rbm
    snapshots: Dict[int, Rbm] = field(default_factory=dict)
    history: List[EpochStats] = field(default_factory=list)

    @property
    def presentations(self) -> int:
        return self.history[-1].presentations if self.history else 0


def train_cd(rbm: Rbm, data: Dataset, cfg: TrainingConfig) -> TrainingResult:
    """CD-k over shuffled mini-batches, every pattern presented once per epoch.

    The negative phase uses reconstruction probabilities rather than samples. A
    snapshot is kept after every epoch in ``cfg.snapshot_epochs``.
    """
    if data.width != rbm.n_visible:
        raise DimensionMismatchError(rbm.n_visible, data.width, "training pattern")
    generator = RandomSource(cfg.seed, TRAINING_STREAM).generator()
    w = rbm.weights.copy()
    a = rbm.visible_bias.copy()
    b = rbm.hidden_bias.copy()
    patterns = data.patterns.astype(np.float64)
    wanted = set(cfg.snapshot_epochs)
    result = TrainingResult(final=rbm)
    presentations = 0

    for epoch in range(1, cfg.epochs + 1):
        order = generator.permutation(data.size)
        squared_error = 0.0
        for start in range(0, data.size, cfg.batch_size):
            v0 = patterns[order[start:start + cfg.batch_size]]
            ph0 = expit(v0 @ w + b)
            h = (generator.random(ph0.shape) < ph0).astype(np.float64)
            for step in range(cfg.cd_k):
                pv = expit(h @ w.T + a)
                if step + 1 < cfg.cd_k:
                    v = (generator.random(pv.shape) < pv).astype(np.float64)
                    ph = expit(v @ w + b)
                    h = (generator.random(ph.shape) < ph).astype(np.float64)
            phk = expit(pv @ w + b)

            m = v0.shape[0]
            w += cfg.learning_rate * (v0.T @ ph0 - pv.T @ phk) / m
            a += cfg.learning_rate * (v0 - pv).mean(axis=0)
            b += cfg.learning_rate * (ph0 - phk).mean(axis=0)
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise TrainingDivergedError(
                    f"non-finite RBM parameters at epoch {epoch}, batch starting at {start}; "
                    f"lower the learning rate (now {cfg.learning_rate})"
                )
            squared_error += float(((v0 - pv) ** 2).sum())
            presentations += m

        stats = EpochStats(epoch, squared_error / data.size, presentations)
        result.history.append(stats)
        logger.debug("epoch %d: reconstruction error %.6f", epoch, stats.reconstruction_error)
        if epoch in wanted:
            result.snapshots[epoch] = Rbm(w.copy(), a.copy(), b.copy())

    result.final = Rbm(w, a, b)
    return result


def rbm_to_ising(rbm: Rbm) -> Tuple[IsingModel, float]:
    """Ising model over (visible, hidden) spins and the constant with E_rbm = E_ising + constant.

    Units map to spins by s = 2u - 1; visible spins take indices 0..V-1 and hidden
    spins V..V+H-1. Every visible/hidden pair is coupled, zero weights included.
    """
    nv, nh = rbm.n_visible, rbm.n_hidden
    w = rbm.weights
    couplings = {(i, nv + j): float(w[i, j]) / 4.0 for i in range(nv) for j in range(nh)}
    h_visible = rbm.visible_bias / 2.0 + w.sum(axis=1) / 4.0
    h_hidden = rbm.hidden_bias / 2.0 + w.sum(axis=0) / 4.0
    constant = -(float(w.sum()) / 4.0 + float(rbm.visible_bias.sum()) / 2.0 + float(rbm.hidden_bias.sum()) / 2.0)
    return IsingModel(nv + nh, couplings, np.concatenate([h_visible, h_hidden])), constant


def units_to_spins(visible: Sequence[int], hidden: Sequence[int]) -> SpinConfiguration:
    units = np.concatenate([np.asarray(visible), np.asarray(hidden)]).astype(np.int8)
    return SpinConfiguration(2 * units - 1)


def joint_state(rbm: Rbm, visible: Sequence[int]) -> SpinConfiguration:
    """Complete a visible vector with each hidden unit's most likely value at zero temperature.

    A hidden unit is on iff its net input is strictly positive.
    """
    v = np.asarray(visible, dtype=np.float64)
    if v.shape != (rbm.n_visible,):
        raise DimensionMismatchError(rbm.n_visible, v.size, "visible vector")
    hidden = (v @ rbm.weights + rbm.hidden_bias > 0).astype(np.int8)
    return units_to_spins(v.astype(np.int8), hidden)


def snapshot_name(epoch: int) -> str:
    return f"rbm_epoch_{epoch}.txt"


def load_snapshot(directory: Union[str, Path], epoch: Optional[int] = None) -> Rbm:
    """Snapshot for ``epoch``, or the highest-epoch snapshot in ``directory``."""
    directory = Path(directory)
    if epoch is None:
        epochs = sorted(int(m.group(1)) for p in directory.glob("rbm_epoch_*.txt")
                        if (m := re.match(r"rbm_epoch_(\d+)\.txt$", p.name)))
        if not epochs:
            raise DataError(f"no RBM snapshots in {directory}")
        epoch = epochs[-1]
    path = directory / snapshot_name(epoch)
    if not path.exists():
        raise DataError(f"missing RBM snapshot {path}")
    return read_rbm(path)
