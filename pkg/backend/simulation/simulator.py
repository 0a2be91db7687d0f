"""
Trace synthesis - ground-truth walks, IMU and RSS traces, fingerprint surveys

Everything is generated from a seeded numpy Generator, so identical seeds and
scenarios give bit-identical traces.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from engine.fingerprint import FingerprintDb, fingerprint_vector
from engine.floorplan import FloorPlan, Point2D, room_at, sample_points_in
from engine.motion import ImuSample, PdrConfig, write_imu_trace
from engine.ranging import ApCalibration, RssSample, write_rss_trace
from services.errors import ValidationError
from simulation.scenario import PhoneProfile, Scenario, validate_scenario

logger = logging.getLogger(__name__)

STEP_ACCEL_AMPLITUDE = 3.0   # m/s², peak of the per-step oscillation
MAG_HORIZONTAL = 20.0        # µT
MAG_VERTICAL = 40.0          # µT, pointing down
MIN_DISTANCE = 0.01          # m, keeps ln(d) finite at an AP
PATH_LOSS_EXPONENT = 2.2     # log-distance mismatch generator
STEP_TOLERANCE = 1e-9
SURVEY_STREAM = 0x5EED


@dataclass(frozen=True)
class GroundTruthStep:
    t: float
    position: Point2D
    room: Optional[str]
    heading: float  # compass, 0 = +y


@dataclass
class TraceBundle:
    imu: List[ImuSample]
    rss: List[RssSample]
    ground_truth: List[GroundTruthStep]
    battery: List[Tuple[float, float]]
    start: Point2D


# ===== Walk =====

def _next_on_segment(p: np.ndarray, a: np.ndarray, b: np.ndarray, s_min: float, stride: float) -> Optional[float]:
    """Largest s in [s_min, 1] with |a + s(b-a) - p| = stride"""
    d = b - a
    f = a - p
    qa = float(d @ d)
    qb = 2.0 * float(f @ d)
    qc = float(f @ f) - stride ** 2
    disc = qb * qb - 4 * qa * qc
    if qa == 0 or disc < 0:
        return None
    s = (-qb + math.sqrt(disc)) / (2 * qa)
    if s_min - STEP_TOLERANCE <= s <= 1 + STEP_TOLERANCE:
        return min(max(s, s_min), 1.0)
    return None


def synth_walk(scenario: Scenario) -> List[GroundTruthStep]:
    """
    Constant-speed traversal of the waypoints in steps of the configured stride.

    Each step lands exactly one stride (straight-line) from the previous one on
    the path, so turning corners never shortens a step. Step k happens at
    k * stride / speed; a final partial stride is dropped.
    """
    validate_scenario(scenario)
    points = [np.array(p.as_tuple(), dtype=float) for p in scenario.waypoints]
    if len(points) < 2:
        return []
    stride = scenario.stride_length
    period = stride / scenario.walk_speed

    steps = []
    current = points[0]
    seg, s_min = 0, 0.0
    while seg < len(points) - 1:
        s = _next_on_segment(current, points[seg], points[seg + 1], s_min, stride)
        if s is None:
            seg, s_min = seg + 1, 0.0
            continue
        nxt = points[seg] + s * (points[seg + 1] - points[seg])
        dx, dy = nxt - current
        position = Point2D(float(nxt[0]), float(nxt[1]))
        steps.append(GroundTruthStep(t=len(steps) * period + period, position=position,
                                     room=room_at(scenario.plan, position), heading=math.atan2(dx, dy)))
        current, s_min = nxt, s

    for step in steps:
        if step.room is None:
            raise ValidationError(f"walk leaves allowed space at ({step.position.x:.3f}, {step.position.y:.3f})")
    logger.debug(f"Synthesized walk: {len(steps)} steps over {len(points)} waypoints")
    return steps


# ===== IMU =====

def synth_imu(ground_truth: Sequence[GroundTruthStep], profile: PhoneProfile, pdr_cfg: PdrConfig,
              rng: np.random.Generator) -> List[ImuSample]:
    """
    Flat-held phone: one cosine accel oscillation per step, peaking at the step
    time, and a geomagnetic vector encoding the heading of the nearest step.
    """
    if not ground_truth:
        return []
    period = ground_truth[0].t
    t_last = ground_truth[-1].t
    n = int(round((t_last + period) * pdr_cfg.sample_rate)) + 1
    t = np.arange(n) / pdr_cfg.sample_rate

    active = (t >= period / 2) & (t <= t_last + period / 2)
    vertical = pdr_cfg.gravity + np.where(active, STEP_ACCEL_AMPLITUDE * np.cos(2 * math.pi * t / period), 0.0)
    accel = np.column_stack([np.zeros(n), np.zeros(n), vertical])
    if profile.imu_accel_noise_sigma > 0:
        accel = accel + rng.normal(0.0, profile.imu_accel_noise_sigma, size=accel.shape)

    headings = np.array([s.heading for s in ground_truth])
    step_index = np.clip(np.rint(t / period).astype(int), 1, len(ground_truth)) - 1
    psi = headings[step_index]
    mag = np.column_stack([MAG_HORIZONTAL * np.sin(psi), MAG_HORIZONTAL * np.cos(psi), np.full(n, -MAG_VERTICAL)])

    return [ImuSample(float(t[i]), tuple(map(float, accel[i])), tuple(map(float, mag[i]))) for i in range(n)]


# ===== RSS =====

def _check_calibrations(plan: FloorPlan, cals: Sequence[ApCalibration]) -> Dict[str, ApCalibration]:
    by_ap = {c.ap_id: c for c in cals}
    for ap_id in plan.ap_ids:
        cal = by_ap.get(ap_id)
        if cal is None:
            raise ValidationError(f"no true calibration for access point '{ap_id}'")
        if cal.beta == 0:
            raise ValidationError(f"calibration '{ap_id}' has beta = 0, the model is not invertible")
    return by_ap


def true_rss(d, cal: ApCalibration, model: str = 'nlr'):
    """Noise-free rss at distance d (vectorized)"""
    d = np.maximum(np.asarray(d, dtype=float), MIN_DISTANCE)
    if model == 'log_distance':
        at_1m = math.log(1.0 / cal.alpha) / cal.beta
        return at_1m - 10.0 * PATH_LOSS_EXPONENT * np.log10(d)
    return np.log(d / cal.alpha) / cal.beta


def rss_at(point: Point2D, plan: FloorPlan, cals: Dict[str, ApCalibration], profile: PhoneProfile,
           rng: np.random.Generator, model: str = 'nlr') -> Dict[str, float]:
    """One scan at a fixed position: {ap_id: rss}"""
    scan = {}
    for ap_id in plan.ap_ids:
        d = point.distance_to(plan.ap_position(ap_id))
        value = float(true_rss(d, cals[ap_id], model)) + profile.rss_bias
        if profile.rss_noise_sigma > 0:
            value += float(rng.normal(0.0, profile.rss_noise_sigma))
        scan[ap_id] = value
    return scan


def synth_rss(ground_truth: Sequence[GroundTruthStep], plan: FloorPlan, true_calibrations: Sequence[ApCalibration],
              profile: PhoneProfile, rng: np.random.Generator, model: str = 'nlr',
              start: Optional[Point2D] = None) -> List[RssSample]:
    """One RssSample per AP at every scan tick up to the last step"""
    cals = _check_calibrations(plan, true_calibrations)
    if not ground_truth:
        return []
    origin = start or ground_truth[0].position
    times = np.array([0.0] + [s.t for s in ground_truth])
    xs = np.array([origin.x] + [s.position.x for s in ground_truth])
    ys = np.array([origin.y] + [s.position.y for s in ground_truth])

    trace = []
    k = 1
    while k * profile.scan_interval <= ground_truth[-1].t + STEP_TOLERANCE:
        tick = k * profile.scan_interval
        p = Point2D(float(np.interp(tick, times, xs)), float(np.interp(tick, times, ys)))
        for ap_id, value in rss_at(p, plan, cals, profile, rng, model).items():
            trace.append(RssSample(ap_id, tick, value))
        k += 1
    return trace


def scan_source(point: Point2D, plan: FloorPlan, true_calibrations: Sequence[ApCalibration],
                profile: PhoneProfile, rng: np.random.Generator, model: str = 'nlr'):
    """Callable producing a fresh FingerprintVector at point on every call"""
    cals = _check_calibrations(plan, true_calibrations)
    return lambda: fingerprint_vector(rss_at(point, plan, cals, profile, rng, model), plan.ap_ids)


# ===== Survey =====

def synth_survey(plan: FloorPlan, true_calibrations: Sequence[ApCalibration], profiles: Sequence[PhoneProfile],
                 points_per_room: int, rng: np.random.Generator, model: str = 'nlr') -> FingerprintDb:
    """Uniform survey positions per room, one vector each, profiles taken in turn"""
    if points_per_room < 1:
        raise ValidationError(f"points_per_room must be >= 1, got {points_per_room}")
    cals = _check_calibrations(plan, true_calibrations)
    entries = []
    i = 0
    for room_id in plan.room_ids:
        for x, y in sample_points_in(plan.room(room_id).shape, points_per_room, rng):
            profile = profiles[i % len(profiles)]
            scan = rss_at(Point2D(float(x), float(y)), plan, cals, profile, rng, model)
            entries.append((fingerprint_vector(scan, plan.ap_ids), room_id))
            i += 1
    logger.info(f"Synthesized survey: {len(entries)} vectors over {len(plan.room_ids)} rooms")
    return FingerprintDb.from_entries(plan.ap_ids, entries)


# ===== Bundles =====

def run_rng(seed: int, run: int, profile_index: int) -> np.random.Generator:
    """Independent stream per (seed, run, profile)"""
    return np.random.default_rng([seed, run, profile_index])


def survey_rng(seed: int) -> np.random.Generator:
    """Survey stream, separate from every run stream"""
    return np.random.default_rng([seed, SURVEY_STREAM])


def synth_bundle(scenario: Scenario, profile: PhoneProfile, rng: np.random.Generator,
                 pdr_cfg: Optional[PdrConfig] = None) -> TraceBundle:
    pdr_cfg = pdr_cfg or PdrConfig(stride_length=scenario.stride_length)
    walk = synth_walk(scenario)
    imu = synth_imu(walk, profile, pdr_cfg, rng)
    rss = synth_rss(walk, scenario.plan, scenario.true_calibrations, profile, rng,
                    model=scenario.rss_model, start=scenario.waypoints[0])
    ticks = sorted({s.t for s in rss})
    battery = [(t, scenario.battery.at(t)) for t in ticks]
    return TraceBundle(imu=imu, rss=rss, ground_truth=walk, battery=battery, start=scenario.waypoints[0])


def write_ground_truth_csv(ground_truth: Sequence[GroundTruthStep], f):
    writer = csv.writer(f)
    writer.writerow(['t', 'x', 'y', 'room'])
    for s in ground_truth:
        writer.writerow([f"{s.t:.3f}", f"{s.position.x:.4f}", f"{s.position.y:.4f}", s.room or ''])


def write_bundle(bundle: TraceBundle, directory) -> Path:
    """imu.jsonl, rss.jsonl and ground_truth.csv"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / 'imu.jsonl', 'w', encoding='utf-8') as f:
        write_imu_trace(bundle.imu, f)
    with open(directory / 'rss.jsonl', 'w', encoding='utf-8') as f:
        write_rss_trace(bundle.rss, f)
    with open(directory / 'ground_truth.csv', 'w', encoding='utf-8', newline='') as f:
        write_ground_truth_csv(bundle.ground_truth, f)
    return directory
