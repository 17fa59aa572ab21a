import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nslsysid.datagen import (
    Dataset,
    InputSignalSpec,
    SignalTemplate,
    build_dataset,
    integrate,
    load_dataset,
    multisine,
    power_balance_residual,
    save_dataset,
    simulate_trajectories,
    split_trajectory_count,
)
from nslsysid.dynamics import SYSTEM_NAMES, get_system, hamiltonian, linear_test_system
from nslsysid.errors import DatasetError, DivergedTrajectoryError, InvalidArgumentError


def test_multisine_by_hand():
    sig = InputSignalSpec(0.5, 0.1, 3, [0.0, np.pi / 2, 1.0])
    t = 0.7
    expected = 0.5 * sum(np.sin(2 * np.pi * k * 0.1 * t + p) for k, p in zip((1, 2, 3), (0.0, np.pi / 2, 1.0)))
    assert multisine(sig, t) == pytest.approx(expected, rel=1e-14)
    assert multisine(sig, 0.0) == pytest.approx(0.5 * (1.0 + np.sin(1.0)), rel=1e-14)
    with pytest.raises(InvalidArgumentError):
        InputSignalSpec(0.5, 0.1, 3, [0.0, 1.0])


@pytest.mark.parametrize(
    "n_t, expected",
    [(1.0, (1, 0)), (0.002, (0, 2)), (2.35, (2, 350)), (0.01, (0, 10)), (3.9999, (3, 999))],
)
def test_fractional_split(n_t, expected):
    assert split_trajectory_count(n_t) == expected


@given(st.floats(0.001, 60.0))
def test_split_row_count(n_t):
    a, b = split_trajectory_count(n_t)
    assert 0 <= b < 1000
    assert a * 1000 + b == int(np.floor(n_t * 1000 + 1e-6))


def test_split_rejects_nonpositive():
    with pytest.raises(InvalidArgumentError):
        split_trajectory_count(0.0)


def test_dataset_sizes_and_prefix_property():
    spec = get_system("ball")
    assert build_dataset(spec, 0.002, 0).K == 2
    small, large = build_dataset(spec, 2.35, 7), build_dataset(spec, 3.0, 7)
    assert small.K == 2350 and large.K == 3000
    for a, b in zip((small.X, small.U, small.Xdot, small.Y), (large.X, large.U, large.Xdot, large.Y)):
        np.testing.assert_array_equal(a, b[: small.K])


def test_trajectories_independent_of_batch():
    spec = get_system("spring")
    together = simulate_trajectories(spec, 3, 5)
    alone = simulate_trajectories(spec, 1, 5, start=2)[0]
    np.testing.assert_array_equal(together[2].states, alone.states)
    assert not np.array_equal(together[0].states, together[1].states)


def test_determinism_and_seed_sensitivity():
    spec = get_system("motor")
    a, b, c = build_dataset(spec, 0.5, 3), build_dataset(spec, 0.5, 3), build_dataset(spec, 0.5, 4)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.U, b.U)
    assert not np.array_equal(a.X, c.X)


def test_recorded_derivatives_are_exact_vector_field():
    spec = get_system("spring")
    ds = build_dataset(spec, 0.3, 0)
    from nslsysid.dynamics import ph_output, ph_rhs

    np.testing.assert_array_equal(ds.Xdot, ph_rhs(spec, ds.X, ds.U))
    np.testing.assert_array_equal(ds.Y, ph_output(spec, ds.X))
    np.testing.assert_allclose(ds.sigma, ds.Xdot.std(axis=0), rtol=1e-15)


def test_initial_states_within_box():
    spec = get_system("ball")
    for tr in simulate_trajectories(spec, 20, 1, horizon=0.05):
        assert np.all(tr.states[0] >= spec.x_min) and np.all(tr.states[0] <= spec.x_max)


def test_rk4_order_on_linear_system():
    spec = linear_test_system()
    sig = [InputSignalSpec(0.5, 0.1, 1, [0.0])]
    errs = []
    for dt in (0.1, 0.05):
        tr = integrate(spec, [1.0], sig, horizon=2.0, dt=dt)
        errs.append(np.max(np.abs(tr.states[:, 0] - np.exp(-tr.times))))
    assert errs[0] / errs[1] >= 12


@pytest.mark.parametrize("name", SYSTEM_NAMES)
def test_power_balance(name):
    spec = get_system(name)
    for tr in simulate_trajectories(spec, 20, 11):
        h0 = hamiltonian(spec, tr.states[0])
        assert power_balance_residual(spec, tr) <= 1e-3 * max(1.0, h0)


def test_trapezoid_residual_is_second_order():
    spec = get_system("spring")
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, 4)
    sigs = SignalTemplate().draw(rng), SignalTemplate().draw(rng)
    r = [power_balance_residual(spec, integrate(spec, x0, sigs, 5.0, dt), "trapezoid") for dt in (0.02, 0.01)]
    assert 3.0 < r[0] / r[1] < 5.0
    with pytest.raises(InvalidArgumentError):
        power_balance_residual(spec, integrate(spec, x0, sigs, 1.0), "simpson")


def test_divergence_raises():
    spec = linear_test_system(damping=-500.0)
    with pytest.raises(DivergedTrajectoryError) as info:
        integrate(spec, [1.0], [InputSignalSpec(0.5, 0.1, 1, [0.0])])
    assert 0 < info.value.step < 1000


def test_save_load_roundtrip(tmp_path):
    ds = build_dataset(get_system("motor"), 0.25, 2)
    path = save_dataset(ds, tmp_path / "d.nsld")
    back = load_dataset(path)
    for name in ("X", "U", "Xdot", "Y", "sigma"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    assert back.meta["system"] == "motor" and back.dt == ds.dt
    (tmp_path / "bad.nsld").write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "bad.nsld")


def test_degenerate_dataset_rejected():
    X = np.ones((5, 2))
    with pytest.raises(DatasetError):
        Dataset.from_arrays(X, np.ones((5, 1)), np.ones((5, 2)), np.ones((5, 1)))


def test_signal_template_validation():
    with pytest.raises(InvalidArgumentError):
        SignalTemplate(amplitude=0.0)
