import itertools

import numpy as np
import pytest

from components.ising import RandomSource, energy
from components.rbm import (
    Dataset,
    Rbm,
    TrainingConfig,
    joint_state,
    load_snapshot,
    parse_dataset,
    parse_rbm,
    rbm_to_ising,
    read_rbm,
    snapshot_name,
    synthetic_dataset,
    train_cd,
    units_to_spins,
    write_rbm,
)
from utils.errors import DataError, DimensionMismatchError, ModelFormatError, ParseError


def _all_units(width):
    return [np.array(bits) for bits in itertools.product((0, 1), repeat=width)]


@pytest.mark.parametrize("nv,nh", [(3, 2), (1, 1)])
def test_ising_conversion_preserves_energy_up_to_constant(nv, nh):
    rbm = Rbm(
        np.random.default_rng(nv).normal(size=(nv, nh)),
        np.random.default_rng(10 + nv).normal(size=nv),
        np.random.default_rng(20 + nh).normal(size=nh),
    )
    model, constant = rbm_to_ising(rbm)
    assert model.n == nv + nh
    for v in _all_units(nv):
        for h in _all_units(nh):
            s = units_to_spins(v, h)
            assert rbm.energy(v, h) == pytest.approx(energy(model, s) + constant, abs=1e-12)


def test_zero_rbm_maps_to_flat_landscape():
    model, constant = rbm_to_ising(Rbm.zeros(2, 3))
    assert constant == 0.0
    assert len(model.couplings) == 6
    assert all(value == 0.0 for value in model.couplings.values())
    assert np.all(model.biases == 0.0)


def test_joint_state_breaks_ties_towards_off():
    assert joint_state(Rbm.zeros(2, 2), [1, 0]).to_string() == "+---"


def test_joint_state_minimizes_energy_over_hidden_units():
    rbm = Rbm(np.random.default_rng(4).normal(size=(3, 3)), np.zeros(3), np.random.default_rng(5).normal(size=3))
    model, _ = rbm_to_ising(rbm)
    for v in _all_units(3):
        best = min(energy(model, units_to_spins(v, h)) for h in _all_units(3))
        assert energy(model, joint_state(rbm, v)) == pytest.approx(best)


def test_training_presents_every_pattern_every_epoch():
    data = synthetic_dataset(4, prototypes=2, per_prototype=50, flip_probability=0.1, rng=RandomSource(1))
    result = train_cd(Rbm.zeros(4, 3), data, TrainingConfig(epochs=5, batch_size=10, snapshot_epochs=(1, 5)))
    assert result.presentations == 500
    assert [s.epoch for s in result.history] == [1, 2, 3, 4, 5]
    assert sorted(result.snapshots) == [1, 5]
    assert result.snapshots[5] == result.final


def test_training_on_all_ones_raises_visible_biases():
    data = Dataset(np.ones((20, 3), dtype=np.uint8))
    result = train_cd(Rbm.zeros(3, 2), data, TrainingConfig(epochs=1, batch_size=5))
    assert np.all(result.final.visible_bias > 0)


def test_training_is_deterministic_for_a_seed():
    data = synthetic_dataset(5, 3, 10, 0.1, RandomSource(2))
    start = Rbm.random(5, 4, RandomSource(3), scale=0.1)
    cfg = TrainingConfig(cd_k=2, epochs=3, batch_size=4, seed=9)
    assert train_cd(start, data, cfg).final == train_cd(start, data, cfg).final


def test_training_rejects_mismatched_patterns():
    with pytest.raises(DimensionMismatchError):
        train_cd(Rbm.zeros(4, 2), Dataset(np.ones((3, 5), dtype=np.uint8)), TrainingConfig())


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(cd_k=0)
    with pytest.raises(ValueError, match="snapshot"):
        TrainingConfig(epochs=2, snapshot_epochs=(3,))
    assert TrainingConfig(epochs=4).snapshot_epochs == (4,)


def test_rbm_file_round_trip(tmp_path):
    rbm = Rbm.random(3, 2, RandomSource(8), scale=1.0)
    path = tmp_path / snapshot_name(2)
    write_rbm(rbm, path)
    assert read_rbm(path) == rbm
    assert load_snapshot(tmp_path) == rbm


def test_load_snapshot_without_files(tmp_path):
    with pytest.raises(DataError, match="no RBM snapshots"):
        load_snapshot(tmp_path)


def test_parse_rbm_errors():
    with pytest.raises(ModelFormatError, match="header"):
        parse_rbm("1 2\n")
    with pytest.raises(ModelFormatError, match=":3:"):
        parse_rbm("# rbm nv=2 nh=2\n0 0\n0 x\n0 0\n0 0\n")
    with pytest.raises(ModelFormatError, match="expected 2 weight rows"):
        parse_rbm("# rbm nv=2 nh=1\n0\n0 0\n")


def test_parse_dataset_errors():
    assert parse_dataset("# patterns\n0101\n1100\n").size == 2
    with pytest.raises(ParseError, match=":2:"):
        parse_dataset("010\n012\n")
    with pytest.raises(ParseError, match=":2:"):
        parse_dataset("010\n0101\n")
    with pytest.raises(ParseError, match="empty"):
        parse_dataset("\n")
