import pytest

from components.checkpoint import (
    Checkpoint,
    format_checkpoint,
    load_checkpoint,
    parse_checkpoint,
    resume_state,
    save_checkpoint,
)
from components.ising import RandomSource, SpinConfiguration
from components.mc_kernels import CampaignState, default_regimes
from utils.errors import CheckpointError, ConfigError

S = SpinConfiguration.from_string


@pytest.fixture
def state() -> CampaignState:
    return CampaignState(cycles_done=6, sweeps_used=72, first_seen={S("++"): 0, S("--"): 3})


def test_checkpoint_round_trip(tmp_path, ferro2, state):
    regimes = default_regimes(2.0, rates=(0.5, 0.8))
    path = tmp_path / "search.ckpt"
    save_checkpoint(path, ferro2, regimes, RandomSource(7, 20), state)
    loaded = load_checkpoint(path)
    assert loaded.n == 2
    assert (loaded.seed, loaded.stream) == (7, 20)
    assert loaded.regimes == tuple(s.to_text() for s in regimes)
    assert loaded.state == state
    assert resume_state(path, ferro2, regimes, RandomSource(7, 20)) == state
    assert [p.name for p in tmp_path.iterdir()] == ["search.ckpt"]


def test_truncated_checkpoint_is_rejected(state):
    text = format_checkpoint(Checkpoint("abc", 2, 0, 0, (), state))
    lines = text.splitlines()
    with pytest.raises(CheckpointError, match="truncated"):
        parse_checkpoint("\n".join(lines[:-3]) + "\n")
    with pytest.raises(CheckpointError):
        parse_checkpoint("\n".join(lines[:-1]) + "\n")


def test_edited_record_is_rejected(state):
    text = format_checkpoint(Checkpoint("abc", 2, 0, 0, (), state))
    with pytest.raises(CheckpointError, match="length"):
        parse_checkpoint(text.replace("++ 0", "++ 10"))
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(text + "extra\n")
    with pytest.raises(CheckpointError, match="not a valley checkpoint"):
        parse_checkpoint("hello\n")


def test_checkpoint_of_other_campaign_is_refused(tmp_path, ferro2, state):
    regimes = default_regimes(2.0, rates=(0.5,))
    path = tmp_path / "search.ckpt"
    save_checkpoint(path, ferro2, regimes, RandomSource(7), state)
    with pytest.raises(ConfigError, match="refusing to resume"):
        resume_state(path, ferro2, regimes, RandomSource(8))
    with pytest.raises(ConfigError):
        resume_state(path, ferro2, default_regimes(2.0, rates=(0.6,)), RandomSource(7))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nothing.ckpt")
