import numpy as np
import pytest

from components.ising import (
    IsingModel,
    RandomSource,
    SpinConfiguration,
    delta_energy,
    energy,
    format_model,
    neighbors,
    parse_model,
    random_model,
    read_model,
    write_model,
)
from utils.errors import DimensionMismatchError, ModelFormatError


def _term_by_term(model: IsingModel, s: SpinConfiguration) -> float:
    total = 0.0
    for (i, j), value in model.couplings.items():
        total -= value * s[i] * s[j]
    for j in range(model.n):
        total -= model.biases[j] * s[j]
    return total


def test_energy_of_cancelling_biases_is_zero():
    model = IsingModel(2, {}, [1.0, -1.0])
    assert energy(model, SpinConfiguration([1, 1])) == 0.0


def test_energy_of_single_bond(ferro2):
    assert energy(ferro2, SpinConfiguration([1, 1])) == -1.0
    assert energy(ferro2, SpinConfiguration([1, -1])) == 1.0


def test_energy_matches_term_by_term_sum():
    generator = np.random.default_rng(3)
    model = random_model(8, generator)
    for _ in range(20):
        s = SpinConfiguration.random(8, generator)
        assert energy(model, s) == pytest.approx(_term_by_term(model, s), abs=1e-12)


def test_energy_rejects_wrong_size(ferro2):
    with pytest.raises(DimensionMismatchError, match="size mismatch"):
        energy(ferro2, SpinConfiguration([1, 1, 1]))


def test_energy_is_deterministic(glass8):
    s = SpinConfiguration.from_index(77, 8)
    assert energy(glass8, s) == energy(glass8, s)


def test_delta_energy_single_spin(single_spin):
    assert delta_energy(single_spin, SpinConfiguration([1]), 0) == 2.0


def test_delta_energy_matches_full_evaluation_exactly():
    model = random_model(10, RandomSource(5), integer=True)
    for index in (0, 1, 511, 1023, 600):
        s = SpinConfiguration.from_index(index, 10)
        for k in range(10):
            assert delta_energy(model, s, k) == energy(model, s.flip(k)) - energy(model, s)


def test_delta_energy_is_an_involution(glass8):
    s = SpinConfiguration.from_index(201, 8)
    for k in range(8):
        assert delta_energy(glass8, s, k) + delta_energy(glass8, s.flip(k), k) == 0.0


def test_delta_energy_rejects_bad_index(ferro2):
    with pytest.raises(IndexError):
        delta_energy(ferro2, SpinConfiguration([1, 1]), 2)


def test_neighbors_in_flip_order():
    assert list(neighbors(SpinConfiguration([1]))) == [SpinConfiguration([-1])]
    assert list(neighbors(SpinConfiguration([1, -1]))) == [
        SpinConfiguration([-1, -1]),
        SpinConfiguration([1, 1]),
    ]


def test_neighbor_relation_is_symmetric():
    n = 12
    for index in range(0, 1 << n, 37):
        s = SpinConfiguration.from_index(index, n)
        for t in neighbors(s):
            assert s in set(neighbors(t))


def test_flip_symmetry_without_fields():
    model = IsingModel(5, {(0, 1): 1.5, (1, 4): -0.5, (2, 3): 2.0}, [0.0] * 5)
    for index in range(32):
        s = SpinConfiguration.from_index(index, 5)
        assert energy(model, s) == energy(model, -s)


def test_configuration_identity_and_strings():
    s = SpinConfiguration.from_string("+-+")
    assert s == SpinConfiguration([1, -1, 1])
    assert hash(s) == hash(SpinConfiguration([1, -1, 1]))
    assert s.to_string() == "+-+"
    assert SpinConfiguration.from_index(s.index(), 3) == s
    with pytest.raises(ValueError):
        SpinConfiguration([1, 0, -1])


def test_model_rejects_invalid_couplings():
    with pytest.raises(ValueError, match="self-coupling"):
        IsingModel(2, {(1, 1): 1.0}, [0.0, 0.0])
    with pytest.raises(ValueError, match="duplicate"):
        IsingModel(2, {(0, 1): 1.0, (1, 0): 2.0}, [0.0, 0.0])
    with pytest.raises(ValueError, match="finite"):
        IsingModel(2, {(0, 1): float("nan")}, [0.0, 0.0])
    with pytest.raises(DimensionMismatchError):
        IsingModel(3, {}, [0.0, 0.0])


def test_random_source_reproduces_draws():
    a = RandomSource(99, stream=3).child(4, 1).generator().random(5)
    b = RandomSource(99, stream=3).child(4, 1).generator().random(5)
    c = RandomSource(99, stream=3).child(4, 2).generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_model_file_round_trip(tmp_path, glass8):
    path = tmp_path / "model.txt"
    write_model(glass8, path)
    assert read_model(path) == glass8


def test_parse_model_reports_line_numbers():
    text = "# ising n=2\nh 0 1.0\nK 0 1 2.0\n"
    with pytest.raises(ModelFormatError, match=":3:"):
        parse_model(text)
    with pytest.raises(ModelFormatError, match="header"):
        parse_model("J 0 1 1.0\n")
    with pytest.raises(ModelFormatError, match="duplicate"):
        parse_model("# ising n=2\nJ 0 1 1.0\nJ 1 0 1.0\n")


def test_format_model_lists_biases_then_couplings(ferro2):
    assert format_model(ferro2).splitlines() == ["# ising n=2", "h 0 0.0", "h 1 0.0", "J 0 1 1.0"]
