import json
import math

import numpy as np
import pytest

from engine.fingerprint import train
from services.errors import GatewayUnavailableError
from services.gateway_client import LocalGatewayClient
from services.gateway_service import GatewayService
from services.store_service import StoreService
from simulation.experiment import (CheckpointResult, MobileAgent, aggregate, checkpoint_times, room_kinds,
                                   run_experiment, verify_actuation)
from simulation.scenario import BatteryTimeline, PhoneProfile
from simulation.simulator import survey_rng, synth_bundle, synth_survey

CLEAN = PhoneProfile('clean', rss_noise_sigma=0.0, imu_accel_noise_sigma=0.0)


def _models(scenario, profiles=None):
    db = synth_survey(scenario.plan, scenario.true_calibrations, profiles or scenario.profiles,
                      scenario.points_per_room, survey_rng(scenario.rng_seed))
    return train(db, k=3)


@pytest.fixture(scope='module')
def clean_scenario(demo_scenario):
    return demo_scenario.with_overrides(profiles=(CLEAN,), runs=2)


@pytest.fixture(scope='module')
def clean_models(clean_scenario):
    return _models(clean_scenario)


# ===== timing and aggregation =====

def test_checkpoint_times(demo_scenario):
    expected = [9.0, 16.0, 28.0, 35.0, 42.0, 51.5, 61.0, 61.0 + math.hypot(3.5, 1.0)]
    assert checkpoint_times(demo_scenario) == pytest.approx(expected)


def _trial(profile, checkpoint, expected, recognized, ok, run=0):
    return CheckpointResult(profile, run, checkpoint, expected, recognized, 1, ok)


def test_aggregate_counts():
    trials = [
        _trial('p2', 2, 'corridor', None, False),
        _trial('p1', 1, 'office-1', 'office-1', True),
        _trial('p1', 2, 'corridor', 'office-1', True),
        _trial('p2', 1, 'office-1', 'office-1', False),
    ]
    kinds = {'office-1': 'office', 'corridor': 'corridor'}
    m = aggregate(trials, kinds)
    assert [(t.profile, t.checkpoint) for t in m.trials] == [('p1', 1), ('p1', 2), ('p2', 1), ('p2', 2)]
    assert m.overall_accuracy == 0.5
    assert m.checkpoint_accuracy == {1: 1.0, 2: 0.0}
    assert m.actuation_success_rate == 0.5
    assert m.office_accuracy == 1.0
    assert m.corridor_accuracy == 0.0
    assert m.per_profile['p1']['accuracy'] == 0.5
    assert m.per_profile['p2']['actuation_success_rate'] == 0.0


def test_aggregate_empty():
    m = aggregate([])
    assert m.is_empty
    assert m.overall_accuracy == 0.0
    assert m.actuation_success_rate == 0.0
    assert m.office_accuracy is None


def test_room_kinds(demo_plan):
    kinds = room_kinds(demo_plan)
    assert kinds['corridor'] == 'corridor'
    assert sum(k == 'office' for k in kinds.values()) == 4


# ===== black-box checks =====

def test_verify_actuation(gateway):
    client = LocalGatewayClient(gateway)
    assert not verify_actuation(client, 'office-1', None)
    gateway.mediate('office-1-light', 'on')
    gateway.mediate('office-1-fan', 'on')
    assert verify_actuation(client, 'office-1', None)
    gateway.mediate('corridor-light-1', 'on')
    assert not verify_actuation(client, 'office-1', 'corridor')


def test_movement_gate_skips_without_steps(clean_scenario, clean_models):
    bundle = synth_bundle(clean_scenario, CLEAN, np.random.default_rng(0))
    agent = MobileAgent(clean_scenario, CLEAN, bundle, *clean_models, np.random.default_rng(1), movement_gate=True)
    cp = clean_scenario.checkpoints[0]
    first = agent.relocate(cp, 9.0)
    assert agent.relocate(cp, 9.0) is first
    assert agent.skipped == 1
    assert agent.moved_since_last(16.0)


# ===== full runs =====

def test_zero_noise_scenario_is_perfect(clean_scenario, clean_models, gateway):
    metrics = run_experiment(clean_scenario, *clean_models, gateway, track=True)
    assert len(metrics.trials) == 2 * 8
    assert metrics.overall_accuracy == 1.0
    assert metrics.actuation_success_rate == 1.0
    assert all(t.scans_used >= 1 for t in metrics.trials)


def test_movement_gate_does_not_change_a_walking_run(clean_scenario, clean_models, demo_plan, demo_nodes, clock):
    results = []
    for gate in (False, True):
        gw = GatewayService(StoreService(), clock, demo_plan)
        gw.load_nodes(demo_nodes)
        results.append(run_experiment(clean_scenario, *clean_models, gw, movement_gate=gate).trials)
    assert results[0] == results[1]


def test_critical_battery_disables_recognition(clean_scenario, clean_models, gateway):
    drained = clean_scenario.with_overrides(battery=BatteryTimeline(start=10.0))
    metrics = run_experiment(drained, *clean_models, gateway)
    assert all(t.recognized_room is None and t.scans_used == 0 for t in metrics.trials)
    assert metrics.overall_accuracy == 0.0
    assert gateway.actuations() == []


def test_unavailable_gateway_aborts(clean_scenario, clean_models, tmp_path, clock):
    gw = GatewayService(StoreService(tmp_path), clock)
    gw.close()
    with pytest.raises(GatewayUnavailableError):
        run_experiment(clean_scenario, *clean_models, gw)


def test_tracking_runs_under_floor_plan_audit(clean_scenario, clean_models, gateway):
    metrics = run_experiment(clean_scenario.with_overrides(runs=1), *clean_models, gateway, track=True)
    error = metrics.tracking_error['clean']
    assert math.isfinite(error)
    assert error < 3.0


def _moved(t, room, vacated=None):
    if room == 'corridor':
        on = ['corridor-light-1', 'corridor-light-2']
    else:
        on = [f'{room}-fan', f'{room}-light']
    off = [] if vacated is None else (['corridor-light-1', 'corridor-light-2'] if vacated == 'corridor'
                                      else [f'{vacated}-fan', f'{vacated}-light'])
    actions = [{'node': n, 'status': 'on'} for n in on] + [{'node': n, 'status': 'off'} for n in off]
    return {'t': t, 'user': 'user-1', 'cause': 'location_change', 'actions': actions,
            'results': [dict(a, ok=True) for a in actions]}


def test_four_office_walk_journal(clean_scenario, clean_models, gateway, tmp_path):
    journal = tmp_path / 'journal.jsonl'
    run_experiment(clean_scenario.with_overrides(runs=1), *clean_models, gateway, journal_path=str(journal))
    entries = [json.loads(line) for line in journal.read_text().splitlines()]
    expected = [
        _moved(9.0, 'office-3'),
        _moved(16.0, 'corridor', 'office-3'),
        _moved(28.0, 'office-1', 'corridor'),
        _moved(35.0, 'corridor', 'office-1'),
        _moved(42.0, 'office-2', 'corridor'),
        _moved(51.5, 'corridor', 'office-2'),
        _moved(61.0, 'office-4', 'corridor'),
        _moved(61.0 + math.hypot(3.5, 1.0), 'office-4'),
    ]
    assert [e['t'] for e in entries] == pytest.approx([e['t'] for e in expected])
    assert [dict(e, t=None) for e in entries] == [dict(e, t=None) for e in expected]


def test_demo_scenario_accuracy(demo_scenario, gateway):
    knn, svm = _models(demo_scenario)
    metrics = run_experiment(demo_scenario, knn, svm, gateway, track=True)
    assert len(metrics.trials) == 20 * 3 * 8
    assert metrics.overall_accuracy >= 0.90
    assert metrics.office_accuracy >= 0.95
    assert metrics.actuation_success_rate == 1.0
    assert set(metrics.per_profile) == {'phone-a', 'phone-b', 'phone-c'}
    assert set(metrics.tracking_error) == {'phone-a', 'phone-b', 'phone-c'}
    assert all(math.isfinite(e) for e in metrics.tracking_error.values())
