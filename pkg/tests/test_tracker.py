import io
import json
import math

import numpy as np
import pytest
from scipy.optimize import least_squares

from engine.floorplan import Point2D, crosses_walls, in_allowed_space, load_floorplan
from engine.motion import MotionVector, PdrConfig
from engine.ranging import ApCalibration, RangeEstimate
from engine.tracker import (LocationEstimate, NoiseModel, ParticleSet, PointPrior, Tracker, TrackerConfig,
                            apply_floorplan, compass_to_map_angle, estimate, init, multilaterate, predict,
                            resample, systematic_indices, track, weight_wifi, write_estimates_csv)
from services.errors import CollapseError, ContractError, InitializationError, UnderdeterminedError
from simulation.scenario import PhoneProfile, Scenario
from simulation.simulator import GroundTruthStep, synth_bundle, synth_imu

SILENT = NoiseModel(sigma_theta=0.0, sigma_ell=0.0, sigma_range=2.0)


def _set(xy, weights=None):
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    n = len(xy)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    return ParticleSet(xy=xy, theta=np.zeros(n), ell=np.full(n, 0.7), weights=w)


# ===== init =====

def test_uniform_prior_stays_in_allowed_space(demo_plan):
    pset = init(demo_plan, TrackerConfig(n_particles=2000, rng_seed=1))
    assert len(pset) == 2000
    assert np.all(in_allowed_space(demo_plan, pset.xy))
    assert pset.is_normalized()
    assert np.all((pset.theta >= -math.pi) & (pset.theta < math.pi))
    assert np.all(pset.ell == 0.7)


def test_point_prior_radius(demo_plan):
    start = Point2D(1.0, 7.5)
    pset = init(demo_plan, TrackerConfig(rng_seed=2), PointPrior(start, 0.5))
    assert np.all(np.linalg.norm(pset.xy - np.array([1.0, 7.5]), axis=1) <= 0.5 + 1e-9)


def test_single_particle(demo_plan):
    pset = init(demo_plan, TrackerConfig(n_particles=1))
    assert pset.weights.tolist() == [1.0]


def test_prior_in_not_allowed_space():
    plan = load_floorplan(json.dumps({
        'bounds': [0, 0, 4, 4],
        'rooms': [{'id': 'a', 'vertices': [[0, 0], [2, 0], [2, 2], [0, 2]]}],
    }))
    with pytest.raises(InitializationError):
        init(plan, TrackerConfig(), PointPrior(Point2D(3.5, 3.5), 0.2))
    with pytest.raises(InitializationError):
        init(plan, TrackerConfig(), PointPrior(Point2D(3.5, 3.5), 0.0))
    with pytest.raises(InitializationError):
        init(plan, TrackerConfig(), PointPrior(Point2D(9.0, 9.0), 0.5))


# ===== predict =====

@pytest.mark.parametrize('theta, expected', [(0.0, (0.7, 0.0)), (math.pi / 2, (0.0, 0.7))])
def test_noiseless_predict(theta, expected):
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 10, size=(50, 2))
    out = predict(_set(xy), MotionVector(theta, 0.7), NoiseModel(0.0, 0.0, 1.0), rng)
    np.testing.assert_allclose(out.xy - xy, np.tile(expected, (50, 1)), atol=1e-12)
    assert np.all(out.ell == 0.7)


def test_noisy_predict_matches_gaussian_moment():
    n = 100_000
    rng = np.random.default_rng(42)
    out = predict(_set(np.zeros((n, 2))), MotionVector(0.0, 0.7), NoiseModel(0.1, 0.05, 1.0), rng)
    dx, dy = out.xy[:, 0], out.xy[:, 1]
    se_x = dx.std() / math.sqrt(n)
    se_y = dy.std() / math.sqrt(n)
    assert abs(dx.mean() - 0.7 * math.exp(-0.005)) < 3 * se_x
    assert abs(dy.mean()) < 3 * se_y
    assert np.all(out.ell > 0)


def test_predict_keeps_stride_positive():
    rng = np.random.default_rng(5)
    out = predict(_set(np.zeros((5000, 2))), MotionVector(0.0, 0.05), NoiseModel(0.0, 0.1, 1.0), rng)
    assert np.all(out.ell > 0)


# ===== floor plan =====

def test_wall_crossing_particle_loses_weight(demo_plan):
    previous = np.array([[11.5, 4.0], [10.0, 4.0]])
    moved = _set([[12.5, 4.0], [11.0, 4.0]])
    out = apply_floorplan(moved, demo_plan, previous)
    assert out.weights.tolist() == [0.0, 1.0]
    assert out.diagnostics['rejected'] == 1


def test_corridor_moves_keep_weights(demo_plan):
    previous = np.array([[13.0, 1.0], [13.0, 4.0], [13.0, 8.0]])
    moved = _set(previous + [0.0, 0.7], [0.2, 0.3, 0.5])
    out = apply_floorplan(moved, demo_plan, previous)
    np.testing.assert_allclose(out.weights, [0.2, 0.3, 0.5])


def test_all_particles_crossing_collapses(demo_plan):
    previous = np.array([[11.5, 4.0], [13.6, 6.0]])
    with pytest.raises(CollapseError):
        apply_floorplan(_set([[12.5, 4.0], [14.4, 6.0]]), demo_plan, previous)


def test_misaligned_previous_positions(demo_plan):
    with pytest.raises(ContractError):
        apply_floorplan(_set([[1.0, 5.0]]), demo_plan, np.zeros((2, 2)))


# ===== WiFi weighting =====

def test_residual_weight_ratio(demo_plan):
    sigma, r = 2.0, 0.8
    ap = np.array([4.0, 8.0])
    pset = _set([ap + [2.0 + r, 0.0], ap + [2.0 + 2 * r, 0.0]])
    out = weight_wifi(pset, [RangeEstimate('ap-1', 0.0, 2.0)], demo_plan, NoiseModel(sigma_range=sigma))
    assert out.weights[0] / out.weights[1] == pytest.approx(math.exp(3 * r * r / (2 * sigma * sigma)))


def test_zero_residual_is_maximal(demo_plan):
    ap = np.array([4.0, 8.0])
    pset = _set([ap + [2.0, 0.0], ap + [2.5, 0.0], ap + [1.0, 0.0]])
    out = weight_wifi(pset, [RangeEstimate('ap-1', 0.0, 2.0)], demo_plan, NoiseModel())
    assert int(np.argmax(out.weights)) == 0


def test_unknown_ap_is_contract_error(demo_plan):
    with pytest.raises(ContractError):
        weight_wifi(_set([[1.0, 5.0]]), [RangeEstimate('ap-99', 0.0, 2.0)], demo_plan, NoiseModel())


def _ranges_from(point, plan, ap_ids):
    return [RangeEstimate(ap, 0.0, point.distance_to(plan.ap_position(ap))) for ap in ap_ids]


def test_wifi_weighted_cloud_finds_the_point(demo_plan):
    truth = Point2D(8.0, 7.0)
    pset = init(demo_plan, TrackerConfig(n_particles=20_000, rng_seed=9))
    ranges = _ranges_from(truth, demo_plan, ['ap-1', 'ap-3', 'ap-5'])
    out = weight_wifi(pset, ranges, demo_plan, NoiseModel(sigma_range=0.5))
    est = estimate(out, demo_plan, 0.0)
    assert est.position.distance_to(truth) < 0.2


# ===== multilateration and resampling =====

def test_multilaterate_matches_independent_solve(demo_plan):
    truth = Point2D(17.0, 2.5)
    ranges = _ranges_from(truth, demo_plan, demo_plan.ap_ids)
    fix = multilaterate(ranges, demo_plan)
    aps = np.array([demo_plan.ap_position(a).as_tuple() for a in demo_plan.ap_ids])
    d = np.array([r.d for r in ranges])
    oracle = least_squares(lambda p: np.linalg.norm(aps - p, axis=1) - d, x0=[13.0, 5.0]).x
    assert fix.distance_to(truth) < 1e-6
    assert fix.distance_to(Point2D(*oracle)) < 1e-6


def test_multilaterate_needs_three_aps(demo_plan):
    with pytest.raises(UnderdeterminedError):
        multilaterate(_ranges_from(Point2D(5.0, 5.0), demo_plan, ['ap-1', 'ap-2']), demo_plan)


def test_equal_weights_are_not_resampled(demo_plan):
    pset = init(demo_plan, TrackerConfig(n_particles=200, rng_seed=4))
    out = resample(pset, TrackerConfig(n_particles=200), None, demo_plan, np.random.default_rng(0))
    assert out.diagnostics['resampled'] is False
    np.testing.assert_array_equal(out.xy, pset.xy)
    np.testing.assert_array_equal(out.weights, pset.weights)


def test_degenerate_set_resamples_to_one_state(demo_plan):
    rng = np.random.default_rng(1)
    xy = rng.uniform(0, 10, size=(100, 2))
    weights = np.zeros(100)
    weights[17] = 1.0
    out = resample(_set(xy, weights), TrackerConfig(n_particles=100), None, demo_plan, rng)
    assert out.diagnostics['resampled'] is True
    np.testing.assert_array_equal(out.xy, np.tile(xy[17], (100, 1)))
    np.testing.assert_allclose(out.weights, 0.01)


def test_wifi_redraw_fraction(demo_plan):
    truth = Point2D(8.0, 8.0)
    rng = np.random.default_rng(3)
    weights = np.zeros(1000)
    weights[0] = 1.0
    pset = _set(np.tile([2.0, 7.5], (1000, 1)), weights)
    cfg = TrackerConfig(n_particles=1000, wifi_resample_fraction=0.1)
    out = resample(pset, cfg, _ranges_from(truth, demo_plan, demo_plan.ap_ids), demo_plan, rng,
                   NoiseModel(sigma_range=1.0))
    assert out.diagnostics['redrawn'] == 100
    assert out.diagnostics['fix'].distance_to(truth) < 1e-6
    moved = np.any(out.xy != [2.0, 7.5], axis=1)
    assert int(moved.sum()) == 100
    assert np.all(in_allowed_space(demo_plan, out.xy))


def test_redraw_skipped_without_enough_aps(demo_plan):
    weights = np.zeros(10)
    weights[0] = 1.0
    out = resample(_set(np.tile([2.0, 7.5], (10, 1)), weights), TrackerConfig(n_particles=10),
                   _ranges_from(Point2D(2.0, 7.5), demo_plan, ['ap-1']), demo_plan, np.random.default_rng(0))
    assert 'redraw_skipped' in out.diagnostics


def test_resampling_preserves_weighted_mean(demo_plan):
    base = np.random.default_rng(100)
    xy = base.uniform(0, 26, size=(500, 2))
    weights = base.exponential(size=500) ** 3
    weights /= weights.sum()
    target = float(weights @ xy[:, 0])
    cfg = TrackerConfig(n_particles=500, ess_threshold=1.0)
    means = [resample(_set(xy, weights), cfg, None, demo_plan, np.random.default_rng(s)).xy[:, 0].mean()
             for s in range(100)]
    se = np.std(means) / math.sqrt(len(means))
    assert abs(np.mean(means) - target) < 4 * se + 1e-12


def test_systematic_indices_are_sorted_and_in_range():
    w = np.array([0.1, 0.2, 0.3, 0.4])
    idx = systematic_indices(w, np.random.default_rng(0))
    assert len(idx) == 4
    assert list(idx) == sorted(idx)
    assert idx.min() >= 0 and idx.max() <= 3


# ===== estimate =====

def test_estimate_examples(demo_plan):
    assert estimate(_set([[3.0, 4.0]] * 5), demo_plan, 1.0).position.distance_to(Point2D(3.0, 4.0)) < 1e-12
    assert estimate(_set([[0.0, 0.0], [2.0, 0.0]]), demo_plan, 1.0).position == Point2D(1.0, 0.0)
    c = demo_plan.room('office-2').centroid
    cloud = [[c.x + dx, c.y + dy] for dx, dy in [(-1, 0), (1, 0), (0, -1), (0, 1)]]
    assert estimate(_set(cloud), demo_plan, 1.0).room == 'office-2'


def test_collapsed_set_has_no_estimate(demo_plan):
    pset = _set([[1.0, 5.0]])
    pset.collapsed = True
    with pytest.raises(CollapseError):
        estimate(pset, demo_plan, 0.0)


# ===== pipeline =====

def test_compass_to_map_angle():
    assert compass_to_map_angle(0.0) == pytest.approx(math.pi / 2)
    assert compass_to_map_angle(math.pi / 2) == pytest.approx(0.0)


def test_empty_imu_trace(demo_plan):
    assert track(demo_plan, [], []) == []


def _hall_scenario():
    plan = load_floorplan(json.dumps({
        'bounds': [0, 0, 80, 10],
        'rooms': [{'id': 'hall', 'kind': 'corridor', 'vertices': [[0, 0], [80, 0], [80, 10], [0, 10]]}],
        'aps': [{'id': 'ap-1', 'position': [5, 9]}, {'id': 'ap-2', 'position': [40, 1]},
                {'id': 'ap-3', 'position': [75, 9]}],
    }))
    cals = tuple(ApCalibration(ap, 0.3, -0.06) for ap in plan.ap_ids)
    clean = PhoneProfile('clean', rss_bias=0.0, rss_noise_sigma=0.0, imu_accel_noise_sigma=0.0)
    return Scenario(plan=plan, true_calibrations=cals, waypoints=(Point2D(2.0, 5.0), Point2D(72.0, 5.0)),
                    checkpoints=(), profiles=(clean,), runs=1)


def test_dead_reckoning_round_trip():
    scenario = _hall_scenario()
    bundle = synth_bundle(scenario, scenario.profiles[0], np.random.default_rng(0))
    assert len(bundle.ground_truth) == 100
    estimates = track(scenario.plan, scenario.true_calibrations, bundle.imu, (),
                      TrackerConfig(n_particles=50), SILENT, prior=PointPrior(bundle.start, 0.0))
    assert len(estimates) == 100
    for est, truth in zip(estimates, bundle.ground_truth):
        assert est.position.distance_to(truth.position) <= 0.35


def test_pipeline_is_deterministic(demo_scenario):
    bundle = synth_bundle(demo_scenario, demo_scenario.profiles[0], np.random.default_rng(5))
    runs = [track(demo_scenario.plan, demo_scenario.true_calibrations, bundle.imu, bundle.rss,
                  TrackerConfig(n_particles=300, rng_seed=8), prior=PointPrior(bundle.start))
            for _ in range(2)]
    assert runs[0] == runs[1]


def test_observer_sees_only_valid_particles(demo_scenario):
    plan = demo_scenario.plan
    bundle = synth_bundle(demo_scenario, demo_scenario.profiles[1], np.random.default_rng(6))
    stages = []

    def observer(stage, particles, previous):
        alive = particles.weights > 0
        assert np.all(in_allowed_space(plan, particles.xy[alive]))
        if stage == 'floorplan':
            assert not np.any(crosses_walls(plan, np.asarray(previous)[alive], particles.xy[alive]))
        assert particles.is_normalized()
        stages.append(stage)

    tracker = Tracker(plan, demo_scenario.true_calibrations, TrackerConfig(n_particles=300, rng_seed=1),
                      prior=PointPrior(bundle.start), observer=observer)
    estimates = tracker.run(bundle.imu, bundle.rss)
    assert len(estimates) == len(bundle.ground_truth)
    assert stages.count('resample') == len(estimates)
    assert all(plan.bounds.contains(e.position) for e in estimates)


def test_collapse_reinitializes_and_is_recorded(demo_plan):
    steps = [GroundTruthStep(t=0.7 * k, position=Point2D(11.5 + 0.7 * k, 4.0), room=None, heading=math.pi / 2)
             for k in range(1, 4)]
    clean = PhoneProfile('clean', rss_noise_sigma=0.0, imu_accel_noise_sigma=0.0)
    imu = synth_imu(steps, clean, PdrConfig(), np.random.default_rng(0))
    tracker = Tracker(demo_plan, [], TrackerConfig(n_particles=100), SILENT,
                      prior=PointPrior(Point2D(11.5, 4.0), 0.0))
    estimates = tracker.run(imu)
    assert len(estimates) == 3
    assert tracker.events[0]['event'] == 'collapse'
    assert tracker.events[0]['reinit'] == 'uniform'


def test_estimates_csv():
    buf = io.StringIO()
    write_estimates_csv([LocationEstimate(0.7, Point2D(1.5, 5.0), 'corridor')], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == 't,x,y,room'
    assert lines[1] == '0.700,1.5000,5.0000,corridor'
