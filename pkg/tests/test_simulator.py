import numpy as np
import pytest

from ics_seq2seq.dataset import ACTUATOR
from ics_seq2seq.simulator import (
    CLOSED,
    OPEN,
    AttackScript,
    PlantSpec,
    ProcessSpec,
    ScriptedAttack,
    SpecError,
    attack_labels,
    default_plant,
    inject,
    load_plant,
    load_script,
    save_plant,
    save_script,
    simulate,
)


def one_tank(**kw):
    base = dict(process_id=1, inflow_rate=0.0, pump_rate=0.0, initial_level=500.0)
    base.update(kw)
    return PlantSpec([ProcessSpec(**base)], noise_frac=0.0, demand_variation=0.0)


def test_zero_flows_keep_level_constant():
    s = simulate(one_tank(), 300)
    np.testing.assert_array_equal(s.column("LIT-101"), 500.0)


def test_inflow_one_unit_per_second_raises_level_ten_units():
    spec = one_tank(inflow_rate=1.0, valve_low=900, valve_high=950, pump_on=990, pump_off=980)
    s = simulate(spec, 11)
    assert s.column("LIT-101")[10] - s.column("LIT-101")[0] == 10.0
    np.testing.assert_array_equal(s.column("FIT-101"), 1.0)


def test_same_seed_identical_and_different_seed_differs():
    a = simulate(default_plant(3), 2000)
    b = simulate(default_plant(3), 2000)
    c = simulate(default_plant(4), 2000)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_schema_shape_and_naming():
    schema = default_plant().schema()
    assert len(schema) == 18 and schema.processes == [1, 2, 3]
    assert schema.process_tags(2) == ["FIT-201", "MV-201", "LIT-201", "P-201", "FIT-202", "AIT-201"]
    assert [t.name for t in schema.tags if t.kind == ACTUATOR] == \
        ["MV-101", "P-101", "MV-201", "P-201", "MV-301", "P-301"]


def test_volume_conservation_noise_free():
    spec = default_plant(1).noise_free()
    s = simulate(spec, 6000)
    for k in (1, 2, 3):
        level = s.column(f"LIT-{k}01")
        inflow, outflow = s.column(f"FIT-{k}01"), s.column(f"FIT-{k}02")
        cap = spec.processes[k - 1].capacity
        interior = (level[1:] > 0) & (level[1:] < cap)
        np.testing.assert_allclose(np.diff(level)[interior], (inflow - outflow)[:-1][interior], atol=1e-9)
        assert level.min() >= 0 and level.max() <= cap


def test_every_actuator_cycles_in_normal_operation():
    s = simulate(default_plant(0), 20000)
    for name in ("MV-101", "P-101", "MV-201", "P-201", "MV-301", "P-301"):
        col = s.column(name)
        assert set(np.unique(col)) == {CLOSED, OPEN}, name


def test_sensor_noise_scale():
    spec = default_plant(0)
    noisy = simulate(spec, 3000)
    clean = simulate(PlantSpec(spec.processes, spec.seed, spec.start, 0.0, spec.demand_variation), 3000)
    resid = noisy.column("LIT-101") - clean.column("LIT-101")
    # sigma = 0.5 % of the 1000-unit tank
    assert resid.std() == pytest.approx(5.0, rel=0.1)
    np.testing.assert_array_equal(noisy.column("P-101"), clean.column("P-101"))
    assert np.abs(resid).max() < 6 * 5.0


@pytest.mark.parametrize("mutate", [
    lambda s: setattr(s.processes[0], "capacity", 0.0),
    lambda s: setattr(s.processes[0], "valve_low", 900.0),
    lambda s: setattr(s.processes[0], "initial_level", 2000.0),
    lambda s: setattr(s.processes[1], "process_id", 5),
    lambda s: setattr(s, "noise_frac", -1.0),
])
def test_spec_validation(mutate):
    spec = default_plant()
    mutate(spec)
    with pytest.raises(SpecError):
        simulate(spec, 10)


def test_duration_must_be_positive():
    with pytest.raises(SpecError):
        simulate(default_plant(), 0)


def test_plant_and_script_files_round_trip(tmp_path):
    spec = default_plant(5)
    save_plant(spec, tmp_path / "p.json")
    assert load_plant(tmp_path / "p.json") == spec
    script = AttackScript([ScriptedAttack(10, 200, "sensor-offset", "LIT-101", 50.0)])
    save_script(script, tmp_path / "a.json")
    assert load_script(tmp_path / "a.json") == script


# -- attacks ---------------------------------------------------------------


@pytest.fixture(scope="module")
def plant():
    spec = default_plant(2)
    return spec, simulate(spec, 3000)


def test_empty_script_changes_nothing(plant):
    spec, s = plant
    out = inject(s, AttackScript(), spec)
    np.testing.assert_array_equal(out.values, s.values)
    assert not out.labels.any()


def test_sensor_spoof_leaves_physics(plant):
    spec, s = plant
    out = inject(s, AttackScript([ScriptedAttack(1000, 300, "sensor-spoof-constant", "LIT-101", 1000.0)]))
    np.testing.assert_array_equal(out.column("LIT-101")[1000:1300], 1000.0)
    other = [i for i, n in enumerate(s.schema.names) if n != "LIT-101"]
    np.testing.assert_array_equal(out.values[:, other], s.values[:, other])
    np.testing.assert_array_equal(out.labels, (np.arange(3000) >= 1000) & (np.arange(3000) < 1300))


def test_sensor_freeze_and_offset(plant):
    spec, s = plant
    script = AttackScript([ScriptedAttack(500, 150, "sensor-freeze", "FIT-201"),
                           ScriptedAttack(900, 120, "sensor-offset", "AIT-301", 4.0)])
    out = inject(s, script)
    np.testing.assert_array_equal(out.column("FIT-201")[500:650], s.column("FIT-201")[500])
    np.testing.assert_array_equal(out.column("AIT-301")[900:1020], s.column("AIT-301")[900:1020] + 4.0)
    assert out.labels.sum() == 270


def test_forced_pump_close_stops_downstream_flow(plant):
    spec, s = plant
    on = np.flatnonzero(s.column("FIT-102") > 1.0)
    start = int(on[on > 200][0])
    out = inject(s, AttackScript([ScriptedAttack(start, 200, "actuator-force-close", "P-101")]), spec)
    np.testing.assert_array_equal(out.column("P-101")[start:start + 200], CLOSED)
    # the pump's flow meter reads zero (plus sensor noise) from the first forced second
    assert np.all(np.abs(out.column("FIT-102")[start:start + 200]) < 0.2)
    np.testing.assert_array_equal(out.values[:start], s.values[:start])


def test_script_validation():
    schema = default_plant().schema()
    bad = [
        [ScriptedAttack(0, 60, "sensor-offset", "LIT-101")],
        [ScriptedAttack(0, 200, "melt", "LIT-101")],
        [ScriptedAttack(0, 200, "sensor-offset", "P-101")],
        [ScriptedAttack(0, 200, "actuator-force-open", "LIT-101")],
        [ScriptedAttack(0, 200, "sensor-offset", "XIT-901")],
        [ScriptedAttack(2900, 200, "sensor-offset", "LIT-101")],
        [ScriptedAttack(0, 200, "sensor-offset", "LIT-101"), ScriptedAttack(150, 200, "sensor-freeze", "LIT-101")],
    ]
    for attacks in bad:
        with pytest.raises(SpecError):
            AttackScript(attacks).validate(schema, 3000)
    AttackScript([ScriptedAttack(0, 200, "sensor-offset", "LIT-101"),
                  ScriptedAttack(150, 200, "sensor-freeze", "LIT-201")]).validate(schema, 3000)


def test_actuator_attack_needs_spec(plant):
    _, s = plant
    with pytest.raises(SpecError, match="plant spec"):
        inject(s, AttackScript([ScriptedAttack(100, 200, "actuator-force-open", "MV-101")]))


def test_attack_labels(plant):
    spec, s = plant
    script = AttackScript([ScriptedAttack(900, 120, "sensor-offset", "AIT-301", 4.0),
                           ScriptedAttack(100, 200, "actuator-force-open", "MV-201")])
    labels = attack_labels(script, inject(s, script, spec))
    assert [lab.id for lab in labels] == [1, 2]
    assert labels[0].target_tags == ["MV-201"] and labels[0].target_processes == {2}
    assert (labels[0].end - labels[0].start).total_seconds() == 199
