import numpy as np
import pytest

from gridcast.dataset import (Dataset, DatasetGenerationError, GenerationOptions, dispatch, generate_dataset)
from gridcast.powerflow import BASE_MVA
from gridcast.profiles import ProfileSeries, clear_sky, synthesize_profiles


def test_solar_zero_at_night(nrel):
    prof = synthesize_profiles(nrel, 49, seed=3)
    hours = np.arange(49) % 24
    night = (hours <= 5) | (hours >= 20)
    assert np.all(prof.solar[:, night] == 0.0)
    assert prof.solar[:, ~night].max() > 0


def test_horizon_24_rejected_below_window(nrel):
    with pytest.raises(ValueError):
        synthesize_profiles(nrel, 24, seed=0)
    assert np.all(clear_sky(np.r_[0:6, 20:24]) == 0.0)


def test_profiles_deterministic_and_nonnegative(nrel):
    a = synthesize_profiles(nrel, 200, seed=5)
    b = synthesize_profiles(nrel, 200, seed=5)
    c = synthesize_profiles(nrel, 200, seed=6)
    for x, y in ((a.load, b.load), (a.wind, b.wind), (a.solar, b.solar)):
        np.testing.assert_array_equal(x, y)
        assert np.all(x >= 0)
    assert not np.array_equal(a.load, c.load)


def test_annual_mean_load_near_base(nrel):
    prof = synthesize_profiles(nrel, 8760, seed=11)
    base = np.zeros(nrel.n_region)
    np.add.at(base, nrel.regions, nrel.base_load[:, 0])
    ratio = prof.load.mean(axis=1) / base
    assert np.all(np.abs(ratio - 1.0) < 0.10)


def test_profiles_csv_round_trip(tmp_path, nrel):
    prof = synthesize_profiles(nrel, 60, seed=1)
    path = tmp_path / "profiles.csv"
    path.write_text(prof.to_csv(), encoding="utf-8")
    assert prof.to_csv().splitlines()[0] == "t,region,load_mw,wind_mw,solar_mw"
    back = ProfileSeries.from_csv(path)
    np.testing.assert_array_equal(back.load, prof.load)
    np.testing.assert_array_equal(back.solar, prof.solar)


def test_dispatch_rules(nrel):
    prof = synthesize_profiles(nrel, 72, seed=2)
    plan = dispatch(nrel, prof, GenerationOptions(seed=2))
    gen = plan.p_mw + 0  # net injection
    for g in nrel.generators:
        if g.bus != nrel.slack and g.technology in ("wind", "solar"):
            # renewable output never exceeds capacity
            load_here = nrel.base_load[g.bus, 0]
            assert np.all(gen[:, g.bus] <= g.p_max + 1e-9 + 0 * load_here)
    assert plan.p_mw.shape == (72, nrel.n_bus)


@pytest.fixture(scope="module")
def small_dataset(nrel):
    prof = synthesize_profiles(nrel, 49, seed=4)
    return generate_dataset(nrel, prof, GenerationOptions(seed=4))


def test_dataset_shapes(small_dataset, nrel):
    assert len(small_dataset) == 49
    snap = small_dataset[0]
    assert snap.node.shape == (118, 4)
    assert snap.edge.shape == (179, 5)
    assert small_dataset.node.shape == (49, 118, 4)


def test_dataset_losses_consistent(small_dataset):
    for snap in small_dataset:
        losses = snap.edge[:, 0].sum() + snap.edge[:, 2].sum()
        assert abs(snap.node[:, 2].sum() - losses) / BASE_MVA < 1e-6


def test_zero_load_gives_flat_snapshots(nrel):
    zero = ProfileSeries(np.zeros((3, 49)), np.zeros((3, 49)), np.zeros((3, 49)))
    data = generate_dataset(nrel, zero, GenerationOptions(bus_noise=0.0))
    from gridcast.powerflow import InjectionSet, solve_ac_power_flow
    v = dispatch(nrel, zero, GenerationOptions(bus_noise=0.0)).v_setpoint
    flat = solve_ac_power_flow(nrel, InjectionSet(np.zeros(118), np.zeros(118), v))
    for snap in data:
        np.testing.assert_array_equal(snap.node, flat.node_features())
        np.testing.assert_array_equal(snap.edge, flat.edge_features())


def test_dataset_save_load(tmp_path, small_dataset):
    small_dataset.save(tmp_path)
    back = Dataset.load(tmp_path)
    np.testing.assert_array_equal(back.node, small_dataset.node)
    np.testing.assert_array_equal(back.edge, small_dataset.edge)
    assert (tmp_path / "bus_states.csv").read_text().splitlines()[0] == "t,bus,v_mag,v_ang_deg,p_mw,q_mvar"
    assert (tmp_path / "branch_states.csv").read_text().splitlines()[0] == \
        "t,branch,p_from,q_from,p_to,q_to,loading_pct"


def test_dataset_generation_deterministic(nrel, small_dataset):
    prof = synthesize_profiles(nrel, 49, seed=4)
    again = generate_dataset(nrel, prof, GenerationOptions(seed=4))
    assert again.bus_csv() == small_dataset.bus_csv()


def test_failing_timesteps_retried_then_reported(two_bus):
    # a load far beyond the transfer limit fails even after three 0.95 rescalings
    from gridcast.dataset import InjectionPlan
    p = np.array([[0.0, -50.0], [0.0, -5000.0], [0.0, -60.0]])
    plan = InjectionPlan(p, np.zeros_like(p), np.ones(2))
    prof = ProfileSeries(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(DatasetGenerationError) as info:
        generate_dataset(two_bus, prof, plan=plan)
    assert list(info.value.failures) == [1]


def test_marginal_timestep_rescaled_and_flagged(two_bus):
    from gridcast.dataset import InjectionPlan
    from gridcast.powerflow import InjectionSet, PowerFlowError, solve_ac_power_flow
    # find a load just beyond the nose point that 0.95 scaling rescues
    lo, hi = 100.0, 2000.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        try:
            solve_ac_power_flow(two_bus, InjectionSet(np.array([0.0, -mid]), np.zeros(2), np.ones(2)))
            lo = mid
        except PowerFlowError:
            hi = mid
    p = np.array([[0.0, -hi * 1.01]])
    plan = InjectionPlan(p, np.zeros_like(p), np.ones(2))
    prof = ProfileSeries(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    data = generate_dataset(two_bus, prof, plan=plan)
    assert data.flags[0] >= 1
    assert data[0].flagged
