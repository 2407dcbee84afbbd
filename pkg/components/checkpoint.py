"""Restartable SA-campaign checkpoints.

Plain text, written atomically. Each minimum record is length-prefixed and the file
ends with an ``end`` line, so a truncated or edited file is detected on load. The
digest ties a checkpoint to its model, regimes and random stream.
"""
import hashlib
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from components.ising import IsingModel, RandomSource, SpinConfiguration, format_model
from components.mc_kernels import CampaignState, Schedule
from utils.errors import CheckpointError, ConfigError

logger = logging.getLogger(__name__)

MAGIC = "# valley-checkpoint v1"


def campaign_digest(model: IsingModel, regimes: Sequence[Schedule], rng: RandomSource) -> str:
    payload = "\n".join(
        [format_model(model), *(s.to_text() for s in regimes), f"{rng.seed} {rng.stream} {rng.path}"]
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Checkpoint:
    digest: str
    n: int
    seed: int
    stream: int
    regimes: Tuple[str, ...]
    state: CampaignState


def format_checkpoint(checkpoint: Checkpoint) -> str:
    state = checkpoint.state
    lines = [
        MAGIC,
        f"digest {checkpoint.digest}",
        f"n {checkpoint.n}",
        f"seed {checkpoint.seed} stream {checkpoint.stream}",
        *(f"regime {text}" for text in checkpoint.regimes),
        f"cycle {state.cycles_done}",
        f"sweeps {state.sweeps_used}",
        f"minima {len(state.first_seen)}",
    ]
    for lm, cycle in sorted(state.first_seen.items(), key=lambda item: item[0].to_string()):
        payload = f"{lm.to_string()} {cycle}"
        lines.append(f"{len(payload)} {payload}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(
    path: Union[str, Path],
    model: IsingModel,
    regimes: Sequence[Schedule],
    rng: RandomSource,
    state: CampaignState,
) -> None:
    """Write through a temporary file and rename, so readers never see a partial file."""
    path = Path(path)
    checkpoint = Checkpoint(
        digest=campaign_digest(model, regimes, rng),
        n=model.n,
        seed=rng.seed,
        stream=rng.stream,
        regimes=tuple(s.to_text() for s in regimes),
        state=state,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(format_checkpoint(checkpoint))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("checkpoint %s: cycle %d, %d minima", path, state.cycles_done, len(state.first_seen))


def parse_checkpoint(text: str, source: str = "<checkpoint>") -> Checkpoint:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    cursor = 0

    def take(prefix: str) -> List[str]:
        nonlocal cursor
        if cursor >= len(lines):
            raise CheckpointError(f"{source}: truncated before '{prefix}'")
        tokens = lines[cursor].split(" ")
        if tokens[0] != prefix:
            raise CheckpointError(f"{source}:{cursor + 1}: expected '{prefix}', found {lines[cursor]!r}")
        cursor += 1
        return tokens[1:]

    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{source}: not a valley checkpoint")
    cursor = 1
    try:
        (digest,) = take("digest")
        n = int(take("n")[0])
        seed_tokens = take("seed")
        seed, stream = int(seed_tokens[0]), int(seed_tokens[2])
        regimes = []
        while cursor < len(lines) and lines[cursor].startswith("regime "):
            regimes.append(" ".join(take("regime")))
        cycles_done = int(take("cycle")[0])
        sweeps_used = int(take("sweeps")[0])
        count = int(take("minima")[0])
        first_seen = {}
        for _ in range(count):
            if cursor >= len(lines):
                raise CheckpointError(f"{source}: truncated after {len(first_seen)} of {count} minima")
            length, _, payload = lines[cursor].partition(" ")
            if int(length) != len(payload):
                raise CheckpointError(f"{source}:{cursor + 1}: record length mismatch")
            spins, cycle = payload.split(" ")
            lm = SpinConfiguration.from_string(spins)
            if lm.n != n:
                raise CheckpointError(f"{source}:{cursor + 1}: minimum has {lm.n} spins, expected {n}")
            first_seen[lm] = int(cycle)
            cursor += 1
        take("end")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{source}:{cursor + 1}: {exc}") from exc
    if cursor != len(lines):
        raise CheckpointError(f"{source}:{cursor + 1}: trailing data after 'end'")
    state = CampaignState(cycles_done=cycles_done, sweeps_used=sweeps_used, first_seen=first_seen)
    return Checkpoint(digest, n, seed, stream, tuple(regimes), state)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_text(encoding="utf-8"), str(path))


def resume_state(
    path: Union[str, Path], model: IsingModel, regimes: Sequence[Schedule], rng: RandomSource
) -> CampaignState:
    """Campaign progress from ``path``, refusing checkpoints of a different campaign."""
    checkpoint = load_checkpoint(path)
    if checkpoint.digest != campaign_digest(model, regimes, rng):
        raise ConfigError(
            f"checkpoint {path} belongs to a different model, regime list or seed; refusing to resume"
        )
    logger.info("resuming from %s at cycle %d", path, checkpoint.state.cycles_done)
    return checkpoint.state
