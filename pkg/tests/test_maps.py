import numpy as np
import pytest

from app.core.errors import ContractViolation
from app.models.schemas import RPM_TO_RAD
from app.sim.maps import ComponentRatings, build_default_maps, efficiency_bump, emit_maps, load_maps


def test_efficiency_bump_peaks_at_rated_point():
    eta = efficiency_bump(1300.0, 1200.0, (1300.0, 1200.0), 0.42, 0.25, (1000.0, 700.0))
    assert eta == pytest.approx(0.42)
    far = efficiency_bump(0.0, 0.0, (1300.0, 1200.0), 0.42, 0.25, (100.0, 100.0))
    assert 0.25 <= far < 0.26


def test_engine_fuel_follows_willans_relation(model):
    r = ComponentRatings()
    omega, torque = 1300.0, 1200.0
    expected = torque * omega * RPM_TO_RAD / (r.engine_peak[2] * r.fuel_lhv) * 1000.0
    assert model.engine_fuel(omega, torque) == pytest.approx(expected, rel=1e-9)


def test_engine_fuel_never_drops_below_idle(model):
    values = model.engine_fuel.values
    assert np.all(values >= values[:, :1])
    r = ComponentRatings()
    assert model.engine_fuel(1000.0, 50.0) >= r.idle_fuel_per_rpm * 1000.0 - 1e-12


def test_rated_power_fits_under_the_curves(model):
    r = ComponentRatings()
    t_rated = r.engine_power_max / (r.engine_power_speed * RPM_TO_RAD)
    assert model.engine_fuel.max_torque(r.engine_power_speed) == pytest.approx(t_rated)
    assert model.engine_fuel.max_torque(1300.0) == r.engine_torque_max
    assert model.genset_speed_max == r.engine_power_speed


def test_query_outside_grid(model):
    with pytest.raises(ContractViolation):
        model.em_eff(10_000.0, 10.0)


def test_emitted_maps_reload_identically(model, tmp_path):
    paths = emit_maps(model, tmp_path)
    assert sorted(p.name for p in paths) == sorted(
        f"{n}.{ext}" for n in ("engine_fuel", "generator_eff", "em_eff") for ext in ("csv", "json"))
    reloaded = load_maps(tmp_path, vehicle=model.vehicle, battery=model.battery)
    for name in ("engine_fuel", "generator_eff", "em_eff"):
        a, b = getattr(model, name), getattr(reloaded, name)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.speed_axis, b.speed_axis)
        assert np.array_equal(a.torque_axis, b.torque_axis)
        assert np.array_equal(a.curve_torque, b.curve_torque)


def test_custom_ratings_shrink_the_genset():
    small = build_default_maps(ComponentRatings(engine_power_max=150e3))
    assert small.engine_fuel.max_torque(2300.0) < build_default_maps().engine_fuel.max_torque(2300.0)
