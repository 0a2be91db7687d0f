import pytest

from services.clock import VirtualClock
from services.records import ActuationRecord, NodeRecord
from simulation.environment import EnvironmentConfig, RoomEnvironment, synth_environment

LIGHT_ON = NodeRecord('L1', 'actuator', 'office-1', 'light', 'on')
FAN_ON = NodeRecord('F1', 'actuator', 'office-1', 'fan', 'on')
FAN_OFF = NodeRecord('F1', 'actuator', 'office-1', 'fan', 'off')
TEMP = NodeRecord('T1', 'sensor', 'office-1', 'temperature')
LUX = NodeRecord('I1', 'sensor', 'office-1', 'illuminance')


def test_light_adds_fixed_lux():
    dark = RoomEnvironment(['office-1'], seed=3)
    lit = RoomEnvironment(['office-1'], seed=3)
    lit.set_actuators('office-1', [LIGHT_ON], 0.0)
    assert lit.illuminance('office-1', 120.0) - dark.illuminance('office-1', 120.0) == pytest.approx(200.0)


def test_curtain_only_helps_in_daytime():
    env = RoomEnvironment(['office-1'], cfg=EnvironmentConfig(drift_illuminance=0.0))
    env.set_actuators('office-1', [NodeRecord('C1', 'actuator', 'office-1', 'curtain', 'up')], 0.0)
    assert env.illuminance('office-1', 0.0) == pytest.approx(600.0)
    night = 12 * 3600.0  # 21:00
    assert not env.is_daytime(night)
    assert env.illuminance('office-1', night) == pytest.approx(300.0)


def test_fan_cools_the_room():
    kwargs = dict(seed=1, initial_excess={'office-1': 2.0})
    cooled = RoomEnvironment(['office-1'], **kwargs)
    still = RoomEnvironment(['office-1'], **kwargs)
    cooled.set_actuators('office-1', [FAN_ON], 0.0)
    drop = still.temperature('office-1', 600.0) - cooled.temperature('office-1', 600.0)
    assert drop >= 1.0 - 1e-9
    assert cooled.rooms['office-1'].excess == pytest.approx(1.0)


def test_excess_never_goes_negative():
    env = RoomEnvironment(['office-1'], initial_excess={'office-1': 0.5})
    env.set_actuators('office-1', [FAN_ON], 0.0)
    env.temperature('office-1', 3600.0)
    assert env.rooms['office-1'].excess == 0.0


def test_occupants_heat_the_room():
    env = RoomEnvironment(['office-1'])
    env.set_occupants('office-1', 3, 0.0)
    env.temperature('office-1', 600.0)
    assert env.rooms['office-1'].excess == pytest.approx(3 * 0.02 / 60.0 * 600.0)


def test_synth_environment_ticks_and_actuations():
    clock = VirtualClock()
    readings = synth_environment(
        ['office-1'], [TEMP, LUX], clock=clock, interval=60.0, duration=600.0, seed=2,
        actuations=[ActuationRecord(0.0, 'F1', 'off', 'on')], actuators=[FAN_OFF],
        initial_excess={'office-1': 2.0})
    assert len(readings) == 20
    assert readings[0].t == 60.0
    assert clock.now() == pytest.approx(600.0)
    temps = [r.value for r in readings if r.metric == 'temperature']
    # fan removes 0.9 °C between the first and last tick; drift moves at most 0.4
    assert temps[0] - temps[-1] >= 0.9 - 2 * 0.2 - 1e-9


def test_synth_environment_is_deterministic():
    args = (['office-1', 'office-2'], [TEMP, LUX])
    assert synth_environment(*args, seed=5) == synth_environment(*args, seed=5)
