import math

import numpy as np
import pytest

from components.ising import IsingModel, RandomSource, SpinConfiguration, energy, neighbors, random_model
from components.mc_kernels import (
    Budget,
    CampaignState,
    Schedule,
    ScheduleKind,
    calibrate_t_start,
    calibration_scale,
    default_regimes,
    descend_zero_t,
    descent_path,
    escape_chain,
    is_local_minimum,
    metropolis_sweep,
    sa_campaign,
    simulated_anneal,
    simulated_warm,
)
from components.oracle import enumerate_landscape
from components.samplers import boltzmann_distribution, total_variation
from utils.errors import NotAMinimumError

S = SpinConfiguration.from_string


def test_geometric_schedule_ends_with_zero_temperature_sweep():
    schedule = Schedule.geometric(1.0, 0.5)
    temps = schedule.temperatures()
    assert schedule.steps == 12
    assert temps[0] == 1.0
    assert temps[-1] == 0.0
    assert np.all(np.diff(temps) <= 0)


def test_schedule_validation_and_text_form():
    with pytest.raises(ValueError):
        Schedule.geometric(1.0, 1.0)
    with pytest.raises(ValueError, match="cooling"):
        Schedule(ScheduleKind.GEOMETRIC_COOLING, 1.0, 2.0, 5)
    with pytest.raises(ValueError, match="warming"):
        Schedule.warming(2.0, 1.0, 5)
    schedule = Schedule.warming(0.1, 2.0, 7)
    assert Schedule.from_text(schedule.to_text()) == schedule
    assert np.allclose(schedule.temperatures(), np.linspace(0.1, 2.0, 7))


def test_zero_temperature_sweep_only_goes_downhill(ferro2):
    state, accepted = metropolis_sweep(ferro2, S("+-"), 0.0, RandomSource(1))
    assert state == S("--")
    assert accepted == 1
    state, accepted = metropolis_sweep(ferro2, S("++"), 0.0, RandomSource(1))
    assert state == S("++")
    assert accepted == 0


def test_sweep_rejects_negative_temperature(ferro2):
    with pytest.raises(ValueError):
        metropolis_sweep(ferro2, S("++"), -1.0, RandomSource(1))


def test_descent_flips_lowest_index_on_ties(ferro2):
    assert descend_zero_t(ferro2, S("+-")) == S("--")
    assert descend_zero_t(ferro2, S("-+")) == S("++")
    assert descent_path(ferro2, S("+-")) == [S("+-"), S("--")]


def test_descent_stops_on_plateaus():
    flat = IsingModel(3, {}, [0.0, 0.0, 0.0])
    s = S("+-+")
    assert descend_zero_t(flat, s) == s
    assert is_local_minimum(flat, s)


def test_descent_reaches_local_minima(glass8):
    for index in range(0, 256, 5):
        lm = descend_zero_t(glass8, SpinConfiguration.from_index(index, 8))
        assert is_local_minimum(glass8, lm)
        assert all(energy(glass8, t) >= energy(glass8, lm) for t in neighbors(lm))


def test_stochastic_descent_needs_random_source(glass8):
    s = SpinConfiguration.from_index(3, 8)
    with pytest.raises(ValueError):
        descend_zero_t(glass8, s, stochastic=True)
    assert is_local_minimum(glass8, descend_zero_t(glass8, s, stochastic=True, rng=RandomSource(4)))


def test_calibration_scale_of_uniform_bonds(ferro2):
    assert calibration_scale(ferro2, RandomSource(0)) == 2.0
    assert calibration_scale(IsingModel(2, {}, [0.0, 0.0]), RandomSource(0)) == 1.0


def test_calibrated_start_grows_with_target_acceptance(glass8):
    low = calibrate_t_start(glass8, RandomSource(0), target=0.6)
    high = calibrate_t_start(glass8, RandomSource(0), target=0.95)
    assert 0.0 < low < high
    with pytest.raises(ValueError):
        calibrate_t_start(glass8, RandomSource(0), target=1.0)


def test_annealing_finds_ground_states_of_ferro2(ferro2):
    schedule = Schedule.geometric(2.0, 0.9)
    for i in range(10):
        result = simulated_anneal(ferro2, schedule, RandomSource(3).child(i), trajectory_stride=5)
        assert result.final_state in (S("++"), S("--"))
        assert result.attempted == schedule.steps * 2
        assert len(result.trajectory_samples) == schedule.steps // 5


def test_annealing_needs_cooling_to_zero(ferro2):
    with pytest.raises(ValueError):
        simulated_anneal(ferro2, Schedule.constant(1.0, 10), RandomSource(0))


def test_campaign_is_independent_of_workers_and_batches(glass8):
    regimes = default_regimes(3.0, rates=(0.8, 0.9))
    serial = sa_campaign(glass8, regimes, 6, RandomSource(21), workers=1, batch_cycles=6)
    parallel = sa_campaign(glass8, regimes, 6, RandomSource(21), workers=2, batch_cycles=2)
    assert dict(serial.minima) == dict(parallel.minima)
    assert list(serial.minima) == sorted(serial.minima, key=lambda lm: lm.to_string())
    assert all(is_local_minimum(glass8, lm) for lm in serial.minima)


def test_campaign_resume_matches_uninterrupted_run(glass8):
    regimes = default_regimes(3.0, rates=(0.8,))
    full = sa_campaign(glass8, regimes, 8, RandomSource(5), batch_cycles=4)
    snapshots = []
    sa_campaign(
        glass8, regimes, 4, RandomSource(5), batch_cycles=4,
        on_batch=lambda st: snapshots.append(CampaignState(st.cycles_done, st.sweeps_used, dict(st.first_seen))),
    )
    resumed = sa_campaign(glass8, regimes, 8, RandomSource(5), batch_cycles=4, state=snapshots[-1])
    assert dict(resumed.minima) == dict(full.minima)
    assert resumed.sweeps_used == full.sweeps_used


def test_campaign_stops_when_sweep_budget_runs_out(ferro2):
    regimes = default_regimes(2.0, rates=(0.5,))
    per_cycle = regimes[0].steps
    result = sa_campaign(ferro2, regimes, 10, RandomSource(1), Budget(max_sweeps=3 * per_cycle), batch_cycles=2)
    assert result.budget_exhausted
    assert result.cycles_completed == 3
    assert result.sweeps_used == 3 * per_cycle
    assert result.counts_at([1, 3]) == [len(result.found_by(1)), len(result.found_by(3))]


def test_budget_rejects_zero_caps():
    with pytest.raises(ValueError):
        Budget(max_sweeps=0)


def test_warming_escapes_and_records_steps(ferro2):
    samples = simulated_warm(ferro2, S("++"), Schedule.constant(1.0, 1000), RandomSource(2))
    assert not samples[-1].in_valley
    assert samples[-1].steps_before_escape is not None
    assert all(s.in_valley for s in samples[:-1])


def test_warming_requires_a_minimum(ferro2):
    with pytest.raises(NotAMinimumError):
        simulated_warm(ferro2, S("+-"), Schedule.constant(1.0, 10), RandomSource(2))


def test_escape_chain_mean_matches_exact_value(ferro2):
    # from ++ each two-step scan escapes with probability 2p - p^2, p = exp(-2/T)
    temperature = 1.0
    p = math.exp(-2.0 / temperature)
    expected = 2.0 / (2.0 * p - p * p)
    generator = np.random.default_rng(11)
    memo = {}
    traces = [escape_chain(ferro2, S("++"), temperature, generator, 10_000, memo) for _ in range(4000)]
    assert all(t.escaped and t.steps % 2 == 0 for t in traces)
    mean = sum(t.steps for t in traces) / len(traces)
    assert mean == pytest.approx(expected, rel=0.05)


def test_escape_chain_respects_step_cap(ring4):
    trace = escape_chain(ring4, S("++++"), 0.05, np.random.default_rng(0), 100)
    assert not trace.escaped
    assert trace.steps == 100


def test_linear_cooling_schedule():
    schedule = Schedule.linear(2.0, 0.0, 5)
    assert schedule.is_cooling
    assert list(schedule.temperatures()) == [2.0, 1.5, 1.0, 0.5, 0.0]


def test_fixed_temperature_sweeps_sample_boltzmann():
    model = IsingModel(3, {(0, 1): 1.0, (1, 2): -0.5}, [0.3, 0.0, -0.2])
    temperature = 1.5
    generator = np.random.default_rng(2)
    s = S("+++")
    counts = {}
    for _ in range(500):
        s, _ = metropolis_sweep(model, s, temperature, generator)
    sweeps = 20_000
    for _ in range(sweeps):
        s, _ = metropolis_sweep(model, s, temperature, generator)
        counts[s] = counts.get(s, 0) + 1
    exact = boltzmann_distribution(model, temperature)
    observed = {state: c / sweeps for state, c in counts.items()}
    assert total_variation(observed, exact) < 0.03


@pytest.mark.slow
def test_fixed_temperature_sweeps_sample_boltzmann_over_a_million_sweeps():
    model = IsingModel(3, {(0, 1): 1.0, (1, 2): -0.5}, [0.3, 0.0, -0.2])
    generator = np.random.default_rng(5)
    s = S("+++")
    counts = {}
    sweeps = 1_000_000
    for _ in range(sweeps):
        s, _ = metropolis_sweep(model, s, 1.0, generator)
        counts[s] = counts.get(s, 0) + 1
    observed = {state: c / sweeps for state, c in counts.items()}
    assert total_variation(observed, boltzmann_distribution(model, 1.0)) < 0.02


def test_sweeps_accept_nearly_every_flip_at_huge_temperature(single_spin):
    generator = np.random.default_rng(0)
    s = S("+")
    accepted = 0
    for _ in range(10_000):
        s, a = metropolis_sweep(single_spin, s, 1e9, generator)
        accepted += a
    assert accepted / 10_000 == pytest.approx(1.0, abs=0.01)


def test_campaign_without_cycles_finds_nothing(ferro2):
    result = sa_campaign(ferro2, default_regimes(2.0), 0, RandomSource(1))
    assert dict(result.minima) == {}
    assert result.cycles_completed == 0
    assert not result.budget_exhausted


def test_campaign_cut_points_nest_inside_the_oracle_minima():
    model = random_model(10, RandomSource(3), integer=True)
    result = sa_campaign(model, default_regimes(3.0, rates=(0.9,)), 100, RandomSource(4), workers=2, batch_cycles=25)
    exact = set(enumerate_landscape(model).minimum_states())
    early, middle, late = (result.found_by(cut) for cut in (10, 30, 100))
    assert early <= middle <= late <= exact
    assert result.counts_at([10, 30, 100]) == [len(early), len(middle), len(late)]


@pytest.mark.slow
def test_campaign_finds_every_minimum_with_a_sizable_basin():
    model = random_model(10, RandomSource(41))
    landscape = enumerate_landscape(model)
    sizable = {lm for lm in landscape.minimum_states() if landscape.basin_fraction(lm) >= 1e-2}
    result = sa_campaign(model, default_regimes(3.0, rates=(0.5, 0.9)), 5000, RandomSource(42), workers=2)
    assert sizable
    assert sizable <= set(result.minima)


def test_zero_temperature_warming_never_leaves_a_minimum(glass8):
    lm = descend_zero_t(glass8, SpinConfiguration.from_index(0, 8))
    assert simulated_warm(glass8, lm, Schedule.constant(0.0, 50), RandomSource(1)) == []


def test_warming_checks_every_jump_for_escape(ferro2):
    schedule = Schedule.constant(1.0, 1000)
    every = simulated_warm(ferro2, S("++"), schedule, RandomSource(2))
    sparse = simulated_warm(ferro2, S("++"), schedule, RandomSource(2), sample_stride=1000)
    assert not sparse[-1].in_valley
    assert sparse[-1].jumps == every[-1].jumps
    assert sparse[-1].steps_before_escape == every[-1].steps_before_escape
    assert all(s.jumps % 1000 == 0 for s in sparse[:-1])


def test_recorded_warming_states_descend_to_the_start(glass8):
    landscape = enumerate_landscape(glass8)
    for lm in landscape.minimum_states()[:4]:
        samples = simulated_warm(glass8, lm, Schedule.warming(0.2, 3.0, 200), RandomSource(6).child(lm.index()))
        for sample in samples:
            assert (landscape.basin_of(sample.state) == lm) == sample.in_valley
