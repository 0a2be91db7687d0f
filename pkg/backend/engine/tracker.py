"""
Data Fusion - particle filter over PDR, WiFi ranges and the floor plan

State per particle is [x, y, theta, ell]. Prediction follows

    X_t = F . X_{t-1} + eta

where F keeps (x, y) and zeroes (theta, ell), and eta injects the noisy motion
vector of the current step. Heading memory therefore lives in the motion vector
stream, not in the particle state.

Measurement model: independent Gaussian kernel on range residuals,
    w *= prod_j exp(-(|p - ap_j| - d_j)^2 / (2 sigma_range^2))

Resampling: systematic, triggered when ESS = 1 / sum(w^2) drops below
ess_threshold * N. On a resampling step with a WiFi scan available, a fraction
of the particles is redrawn around the WiFi-only multilateration fix.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import scipy.linalg
from scipy.optimize import least_squares
from shapely.geometry import Point

from engine.floorplan import (FloorPlan, Point2D, crosses_walls, in_allowed_space, room_at,
                              sample_points_in)
from engine.motion import MotionVector, PdrConfig, motion_vectors, normalize_angle
from engine.ranging import ApCalibration, RangeEstimate, RssSample, range_from_rss
from services.errors import (CollapseError, ContractError, InitializationError, UnderdeterminedError,
                             ValidationError)

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TrackState:
    x: float
    y: float
    theta: float
    ell: float


@dataclass(frozen=True)
class Particle:
    state: TrackState
    weight: float


@dataclass(frozen=True)
class NoiseModel:
    sigma_theta: float = 0.1
    sigma_ell: float = 0.05
    sigma_range: float = 2.0

    def __post_init__(self):
        if min(self.sigma_theta, self.sigma_ell, self.sigma_range) < 0:
            raise ValidationError("noise sigmas must be >= 0")


@dataclass(frozen=True)
class TrackerConfig:
    n_particles: int = 1000
    ess_threshold: float = 0.5
    wifi_resample_fraction: float = 0.1
    rng_seed: int = 0
    stride_length: float = 0.7

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValidationError(f"n_particles must be >= 1, got {self.n_particles}")
        if not 0 < self.ess_threshold <= 1:
            raise ValidationError(f"ess_threshold must be in (0, 1], got {self.ess_threshold}")
        if not 0 <= self.wifi_resample_fraction <= 1:
            raise ValidationError(f"wifi_resample_fraction must be in [0, 1], got {self.wifi_resample_fraction}")


@dataclass(frozen=True)
class UniformPrior:
    pass


@dataclass(frozen=True)
class PointPrior:
    point: Point2D
    radius: float = 0.5


Prior = Union[UniformPrior, PointPrior]


@dataclass(frozen=True)
class LocationEstimate:
    t: float
    position: Point2D
    room: Optional[str]


@dataclass
class ParticleSet:
    """Particles as parallel arrays; operations return new sets"""
    xy: np.ndarray
    theta: np.ndarray
    ell: np.ndarray
    weights: np.ndarray
    collapsed: bool = False
    diagnostics: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.weights)

    @property
    def particles(self) -> List[Particle]:
        return [
            Particle(TrackState(float(x), float(y), float(th), float(l)), float(w))
            for (x, y), th, l, w in zip(self.xy, self.theta, self.ell, self.weights)
        ]

    @property
    def ess(self) -> float:
        total = float(np.sum(np.square(self.weights)))
        return 1.0 / total if total > 0 else 0.0

    def copy(self, **changes) -> 'ParticleSet':
        fields = dict(xy=self.xy.copy(), theta=self.theta.copy(), ell=self.ell.copy(),
                      weights=self.weights.copy(), collapsed=self.collapsed, diagnostics={})
        fields.update(changes)
        return ParticleSet(**fields)

    def is_normalized(self) -> bool:
        return abs(float(np.sum(self.weights)) - 1.0) <= WEIGHT_TOLERANCE


def _normalized(weights: np.ndarray) -> np.ndarray:
    total = float(np.sum(weights))
    if total <= 0 or not math.isfinite(total):
        raise CollapseError("all particle weights are zero")
    return weights / total


# ===== Initialization =====

def init(plan: FloorPlan, cfg: TrackerConfig, prior: Prior = UniformPrior(),
         rng: Optional[np.random.Generator] = None) -> ParticleSet:
    """N equal-weight particles inside allowed space"""
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    n = cfg.n_particles

    if isinstance(prior, PointPrior):
        if not plan.bounds.contains(prior.point):
            raise InitializationError(f"prior point ({prior.point.x}, {prior.point.y}) is outside the plan")
        if prior.radius <= 0:
            if not in_allowed_space(plan, [prior.point.as_tuple()])[0]:
                raise InitializationError("prior point lies in not-allowed space")
            xy = np.tile(prior.point.as_tuple(), (n, 1)).astype(float)
        else:
            region = Point(prior.point.x, prior.point.y).buffer(prior.radius).intersection(plan.allowed_shape)
            if region.is_empty or region.area <= 0:
                raise InitializationError("prior region lies entirely in not-allowed space")
            xy = sample_points_in(region, n, rng)
    else:
        xy = sample_points_in(plan.allowed_shape, n, rng)

    return ParticleSet(
        xy=xy,
        theta=rng.uniform(-math.pi, math.pi, n),
        ell=np.full(n, cfg.stride_length),
        weights=np.full(n, 1.0 / n),
    )


# ===== Prediction =====

def predict(pset: ParticleSet, mv: MotionVector, noise: NoiseModel, rng: np.random.Generator) -> ParticleSet:
    n = len(pset)
    eps_theta = rng.normal(0.0, noise.sigma_theta, n) if noise.sigma_theta > 0 else np.zeros(n)
    theta = mv.theta + eps_theta

    ell = mv.ell + (rng.normal(0.0, noise.sigma_ell, n) if noise.sigma_ell > 0 else np.zeros(n))
    bad = ell <= 0
    for _ in range(100):
        if not np.any(bad):
            break
        ell[bad] = mv.ell + rng.normal(0.0, noise.sigma_ell, int(bad.sum()))
        bad = ell <= 0
    if np.any(bad):
        raise ValidationError(f"cannot draw a positive stride around {mv.ell}")

    xy = pset.xy.copy()
    xy[:, 0] += ell * np.cos(theta)
    xy[:, 1] += ell * np.sin(theta)
    return pset.copy(xy=xy, theta=normalize_angle(theta), ell=ell)


# ===== Floor plan constraint =====

def apply_floorplan(pset: ParticleSet, plan: FloorPlan, previous_positions) -> ParticleSet:
    """Zero the weight of particles that crossed a wall or left every room"""
    previous = np.asarray(
        [p.as_tuple() if isinstance(p, Point2D) else p for p in previous_positions], dtype=float
    ).reshape(-1, 2)
    if len(previous) != len(pset):
        raise ContractError(f"{len(previous)} previous positions for {len(pset)} particles")

    weights = pset.weights.copy()
    alive = weights > 0
    violated = np.zeros(len(pset), dtype=bool)
    if np.any(alive):
        violated[alive] = (crosses_walls(plan, previous[alive], pset.xy[alive])
                           | ~in_allowed_space(plan, pset.xy[alive]))
    weights[violated] = 0.0

    out = pset.copy(weights=weights)
    out.diagnostics['rejected'] = int(violated.sum())
    if not np.any(weights > 0):
        out.collapsed = True
        raise CollapseError(f"all {len(pset)} particles violated the floor plan")
    out.weights = _normalized(weights)
    return out


# ===== WiFi weighting =====

def _ap_positions(ranges: Sequence[RangeEstimate], plan: FloorPlan) -> np.ndarray:
    positions = []
    for r in ranges:
        pos = plan.ap_position(r.ap_id)
        if pos is None:
            raise ContractError(f"range from unknown access point '{r.ap_id}'")
        positions.append(pos.as_tuple())
    return np.asarray(positions, dtype=float).reshape(-1, 2)


def weight_wifi(pset: ParticleSet, ranges: Sequence[RangeEstimate], plan: FloorPlan,
                noise: NoiseModel) -> ParticleSet:
    if not ranges:
        return pset.copy()
    aps = _ap_positions(ranges, plan)
    d = np.array([r.d for r in ranges], dtype=float)

    # (N, J) residuals
    dist = np.linalg.norm(pset.xy[:, None, :] - aps[None, :, :], axis=2)
    sq = np.sum(np.square(dist - d[None, :]), axis=1)

    with np.errstate(divide='ignore'):
        log_w = np.log(pset.weights)
    if noise.sigma_range > 0:
        log_w = log_w - sq / (2.0 * noise.sigma_range ** 2)
    else:
        # zero-width kernel keeps only the best-fitting live particles
        best = np.min(sq[np.isfinite(log_w)]) if np.any(np.isfinite(log_w)) else 0.0
        log_w = np.where(sq <= best, log_w, -np.inf)

    if not np.any(np.isfinite(log_w)):
        raise CollapseError("no particle has positive weight after WiFi weighting")
    weights = np.exp(log_w - np.max(log_w))
    return pset.copy(weights=_normalized(weights))


def multilaterate(ranges: Sequence[RangeEstimate], plan: FloorPlan) -> Point2D:
    """
    WiFi-only least-squares position fix.

    Linearized solution (subtracting the first range equation) seeds a
    nonlinear least-squares refinement of the range residuals.
    """
    latest: Dict[str, RangeEstimate] = {}
    for r in ranges:
        latest[r.ap_id] = r
    usable = list(latest.values())
    if len(usable) < 3:
        raise UnderdeterminedError(f"multilateration needs 3 access points, got {len(usable)}")

    aps = _ap_positions(usable, plan)
    d = np.array([r.d for r in usable])

    a = 2.0 * (aps[1:] - aps[0])
    b = (d[0] ** 2 - d[1:] ** 2) + np.sum(aps[1:] ** 2, axis=1) - np.sum(aps[0] ** 2)
    try:
        guess, *_ = scipy.linalg.lstsq(a, b)
    except (ValueError, scipy.linalg.LinAlgError):
        guess = aps.mean(axis=0)
    if not np.all(np.isfinite(guess)):
        guess = aps.mean(axis=0)

    result = least_squares(lambda p: np.linalg.norm(aps - p, axis=1) - d, guess, method='lm')
    b_ = plan.bounds
    x = float(np.clip(result.x[0], b_.min_x, b_.max_x))
    y = float(np.clip(result.x[1], b_.min_y, b_.max_y))
    return Point2D(x, y)


# ===== Resampling =====

def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side='right').clip(0, n - 1)


def resample(pset: ParticleSet, cfg: TrackerConfig, ranges: Optional[Sequence[RangeEstimate]],
             plan: FloorPlan, rng: np.random.Generator, noise: NoiseModel = NoiseModel()) -> ParticleSet:
    n = len(pset)
    if pset.ess >= cfg.ess_threshold * n:
        out = pset.copy()
        out.diagnostics['resampled'] = False
        return out

    idx = systematic_indices(pset.weights, rng)
    out = ParticleSet(xy=pset.xy[idx].copy(), theta=pset.theta[idx].copy(), ell=pset.ell[idx].copy(),
                      weights=np.full(n, 1.0 / n))
    out.diagnostics['resampled'] = True

    if ranges:
        try:
            fix = multilaterate(ranges, plan)
        except UnderdeterminedError as e:
            out.diagnostics['redraw_skipped'] = str(e)
            logger.debug(f"Skipping WiFi redraw: {e}")
            return out
        k = int(round(cfg.wifi_resample_fraction * n))
        chosen = rng.choice(n, size=k, replace=False) if k > 0 else np.zeros(0, dtype=int)
        drawn = _draw_around(fix, noise.sigma_range, len(chosen), plan, rng)
        out.xy[chosen[:len(drawn)]] = drawn
        out.diagnostics['fix'] = fix
        out.diagnostics['redrawn'] = int(len(drawn))
        out.diagnostics['redrawn_indices'] = chosen[:len(drawn)]
    return out


def _draw_around(fix: Point2D, sigma: float, k: int, plan: FloorPlan, rng: np.random.Generator,
                 max_rounds: int = 200) -> np.ndarray:
    """Gaussian draws around fix, rejecting not-allowed positions"""
    if k == 0:
        return np.zeros((0, 2))
    accepted = []
    count = 0
    for _ in range(max_rounds):
        batch = rng.normal(fix.as_tuple(), sigma, size=(max(2 * (k - count), 8), 2))
        keep = batch[in_allowed_space(plan, batch)]
        accepted.append(keep)
        count += len(keep)
        if count >= k:
            break
    drawn = np.concatenate(accepted)[:k] if accepted else np.zeros((0, 2))
    if len(drawn) < k:
        logger.warning(f"Only {len(drawn)}/{k} WiFi redraws landed in allowed space")
    return drawn


# ===== Estimation =====

def estimate(pset: ParticleSet, plan: FloorPlan, t: float) -> LocationEstimate:
    if pset.collapsed or float(np.sum(pset.weights)) <= 0:
        raise CollapseError("cannot estimate from a collapsed particle set")
    w = pset.weights / np.sum(pset.weights)
    x, y = (w[:, None] * pset.xy).sum(axis=0)
    position = Point2D(float(x), float(y))
    return LocationEstimate(t=t, position=position, room=room_at(plan, position))


# ===== Pipeline =====

def compass_to_map_angle(compass: float) -> float:
    """Compass heading (0 = +y, clockwise) to the map angle used by predict (0 = +x, counter-clockwise)"""
    return normalize_angle(math.pi / 2 - compass)


def _group_scans(rss: Sequence[RssSample]) -> List[tuple]:
    """[(t, [samples...]), ...] sorted by scan time"""
    scans: Dict[float, List[RssSample]] = {}
    for s in rss:
        scans.setdefault(s.t, []).append(s)
    return sorted(scans.items())


class Tracker:
    """
    One tracking session. Owns its particle set and random stream.

    ``observer`` (optional) is called after every filter update as
    observer(stage, particle_set, previous_positions).
    """

    def __init__(self, plan: FloorPlan, calibrations: Sequence[ApCalibration],
                 cfg: TrackerConfig = TrackerConfig(), noise: NoiseModel = NoiseModel(),
                 pdr_cfg: PdrConfig = PdrConfig(), prior: Prior = UniformPrior(),
                 observer: Optional[Callable] = None):
        self.plan = plan
        self.calibrations = {c.ap_id: c for c in calibrations}
        self.cfg = replace(cfg, stride_length=pdr_cfg.stride_length)
        self.noise = noise
        self.pdr_cfg = pdr_cfg
        self.prior = prior
        self.observer = observer
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.events: List[Dict] = []
        self.particles: Optional[ParticleSet] = None

    def _ranges(self, scan: Sequence[RssSample]) -> List[RangeEstimate]:
        ranges = []
        for s in scan:
            cal = self.calibrations.get(s.ap_id)
            if cal is None:
                raise ContractError(f"no calibration for access point '{s.ap_id}'")
            ranges.append(range_from_rss(s, cal))
        return ranges

    def _reinitialize(self, t: float, ranges: Optional[List[RangeEstimate]]):
        prior: Prior = UniformPrior()
        source = 'uniform'
        if ranges:
            try:
                fix = multilaterate(ranges, self.plan)
                prior = PointPrior(fix, max(self.noise.sigma_range, 0.5))
                source = 'wifi'
            except UnderdeterminedError:
                pass
        try:
            self.particles = init(self.plan, self.cfg, prior, self.rng)
        except InitializationError:
            self.particles = init(self.plan, self.cfg, UniformPrior(), self.rng)
            source = 'uniform'
        self.events.append({'t': t, 'event': 'collapse', 'reinit': source})
        logger.warning(f"Filter collapse at t={t:.2f}s, re-initialized from {source} prior")

    def _notify(self, stage: str, previous):
        if self.observer is not None:
            self.observer(stage, self.particles, previous)

    def run(self, imu, rss: Sequence[RssSample] = ()) -> List[LocationEstimate]:
        steps = motion_vectors(imu, self.pdr_cfg)
        if not steps:
            return []
        if self.particles is None:
            self.particles = init(self.plan, self.cfg, self.prior, self.rng)

        scans = _group_scans(rss)
        scan_i = 0
        last_t = -math.inf
        estimates = []
        for step, mv in steps:
            # most recent scan completed since the previous step
            scan = None
            while scan_i < len(scans) and scans[scan_i][0] <= step.t:
                if scans[scan_i][0] > last_t:
                    scan = scans[scan_i][1]
                scan_i += 1
            ranges = self._ranges(scan) if scan else None

            previous = self.particles.xy.copy()
            self.particles = predict(self.particles, MotionVector(compass_to_map_angle(mv.theta), mv.ell),
                                     self.noise, self.rng)
            try:
                self.particles = apply_floorplan(self.particles, self.plan, previous)
                self._notify('floorplan', previous)
            except CollapseError:
                self._reinitialize(step.t, ranges)
                previous = self.particles.xy.copy()

            if ranges:
                self.particles = weight_wifi(self.particles, ranges, self.plan, self.noise)
            self.particles = resample(self.particles, self.cfg, ranges, self.plan, self.rng, self.noise)
            self._notify('resample', previous)

            estimates.append(estimate(self.particles, self.plan, step.t))
            last_t = step.t
        logger.info(f"Tracked {len(estimates)} steps ({len(self.events)} collapse events)")
        return estimates


def track(plan: FloorPlan, cal: Sequence[ApCalibration], imu, rss: Sequence[RssSample] = (),
          cfg: TrackerConfig = TrackerConfig(), noise: NoiseModel = NoiseModel(),
          pdr_cfg: PdrConfig = PdrConfig(), prior: Prior = UniformPrior()) -> List[LocationEstimate]:
    """Run the full per-step pipeline and return one estimate per detected step"""
    return Tracker(plan, cal, cfg, noise, pdr_cfg, prior).run(imu, rss)


def write_estimates_csv(estimates: Sequence[LocationEstimate], f):
    writer = csv.writer(f)
    writer.writerow(['t', 'x', 'y', 'room'])
    for e in estimates:
        writer.writerow([f"{e.t:.3f}", f"{e.position.x:.4f}", f"{e.position.y:.4f}", e.room or ''])
