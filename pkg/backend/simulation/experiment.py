"""
Checkpoint experiment - repeated walks per phone profile with room recognition
at every checkpoint, fed through the automation loop and verified black-box on
the gateway.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from shapely.geometry import Point
from shapely.ops import substring

from engine.fingerprint import KnnModel, Recognition, SvmModel, recognize
from engine.floorplan import FloorPlan, crosses_walls, in_allowed_space
from engine.motion import PdrConfig, detect_steps
from engine.tracker import NoiseModel, PointPrior, Tracker, TrackerConfig
from services.automation_service import AutomationService, BatteryPolicy, LocationChange, effective_polling
from services.errors import ContractError, GatewayUnavailableError
from services.gateway_client import LocalGatewayClient
from services.gateway_service import GatewayService
from simulation.scenario import Checkpoint, PhoneProfile, Scenario, validate_scenario
from simulation.simulator import TraceBundle, run_rng, scan_source, synth_bundle

logger = logging.getLogger(__name__)

OCCUPANCY_CAPABILITIES = ('light', 'fan')


@dataclass(frozen=True)
class CheckpointResult:
    profile: str
    run: int
    checkpoint: int
    expected_room: str
    recognized_room: Optional[str]
    scans_used: int
    actuation_ok: bool

    @property
    def correct(self) -> bool:
        return self.recognized_room == self.expected_room

    def to_dict(self) -> Dict:
        return {'profile': self.profile, 'run': self.run, 'checkpoint': self.checkpoint,
                'expected_room': self.expected_room, 'recognized_room': self.recognized_room,
                'scans_used': self.scans_used, 'actuation_ok': self.actuation_ok}


@dataclass
class Metrics:
    trials: List[CheckpointResult] = field(default_factory=list)
    checkpoint_accuracy: Dict[int, float] = field(default_factory=dict)
    overall_accuracy: float = 0.0
    actuation_success_rate: float = 0.0
    office_accuracy: Optional[float] = None
    corridor_accuracy: Optional[float] = None
    per_profile: Dict[str, Dict] = field(default_factory=dict)
    tracking_error: Dict[str, float] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not self.trials


def _fraction(hits: int, total: int) -> float:
    return hits / total if total else 0.0


def _accuracy(trials: Sequence[CheckpointResult]) -> float:
    return _fraction(sum(t.correct for t in trials), len(trials))


def _actuation_rate(trials: Sequence[CheckpointResult]) -> float:
    correct = [t for t in trials if t.correct]
    return _fraction(sum(t.actuation_ok for t in correct), len(correct))


def _split(trials: Sequence[CheckpointResult], room_kinds: Optional[Dict[str, str]], kind: str) -> Optional[float]:
    if room_kinds is None:
        return None
    subset = [t for t in trials if room_kinds.get(t.expected_room) == kind]
    return _accuracy(subset) if subset else None


def aggregate(trials: Sequence[CheckpointResult], room_kinds: Optional[Dict[str, str]] = None,
              tracking_error: Optional[Dict[str, float]] = None) -> Metrics:
    """
    Metrics recomputed from the full trial list.

    room_kinds maps room id -> 'office' | 'corridor' and enables the in-office /
    corridor split. Actuation success only counts correctly recognized trials.
    """
    trials = sorted(trials, key=lambda t: (t.profile, t.run, t.checkpoint))
    by_checkpoint: Dict[int, List[CheckpointResult]] = {}
    by_profile: Dict[str, List[CheckpointResult]] = {}
    for t in trials:
        by_checkpoint.setdefault(t.checkpoint, []).append(t)
        by_profile.setdefault(t.profile, []).append(t)

    tracking_error = dict(tracking_error or {})
    per_profile = {}
    for name, subset in sorted(by_profile.items()):
        per_profile[name] = {
            'trials': len(subset),
            'accuracy': _accuracy(subset),
            'actuation_success_rate': _actuation_rate(subset),
            'office_accuracy': _split(subset, room_kinds, 'office'),
            'corridor_accuracy': _split(subset, room_kinds, 'corridor'),
        }
        if name in tracking_error:
            per_profile[name]['mean_tracking_error'] = tracking_error[name]

    return Metrics(
        trials=trials,
        checkpoint_accuracy={cp: _accuracy(ts) for cp, ts in sorted(by_checkpoint.items())},
        overall_accuracy=_accuracy(trials),
        actuation_success_rate=_actuation_rate(trials),
        office_accuracy=_split(trials, room_kinds, 'office'),
        corridor_accuracy=_split(trials, room_kinds, 'corridor'),
        per_profile=per_profile,
        tracking_error=tracking_error,
    )


def room_kinds(plan: FloorPlan) -> Dict[str, str]:
    return {r.id: r.kind for r in plan.rooms}


# ===== Checkpoint timing =====

def checkpoint_times(scenario: Scenario) -> List[float]:
    """
    Walk time at which each checkpoint is reached.

    Checkpoints are matched in order along the path, so a point the path
    passes several times resolves to the pass after the previous checkpoint.
    """
    path = scenario.path
    if path is None:
        return [0.0 for _ in scenario.checkpoints]
    times = []
    arc = 0.0
    for cp in scenario.checkpoints:
        remaining = substring(path, arc, path.length)
        if remaining.length > 0:
            arc += remaining.project(Point(cp.point.as_tuple()))
        times.append(arc / scenario.walk_speed)
    return times


# ===== Floor plan audit =====

class FloorPlanAudit:
    """Tracker observer: no positive-weight particle off the plan or through a wall"""

    def __init__(self, plan: FloorPlan):
        self.plan = plan
        self.checks = 0

    def __call__(self, stage: str, particles, previous):
        alive = particles.weights > 0
        xy = particles.xy[alive]
        if not np.all(in_allowed_space(self.plan, xy)):
            raise ContractError(f"positive-weight particle outside allowed space after {stage}")
        if stage == 'floorplan' and np.any(crosses_walls(self.plan, np.asarray(previous)[alive], xy)):
            raise ContractError("positive-weight particle crossed a wall on its last move")
        self.checks += 1


def tracking_error(estimates, bundle: TraceBundle) -> float:
    """Mean distance between estimates and the ground truth interpolated at their times"""
    if not estimates or not bundle.ground_truth:
        return math.nan
    gt_t = np.array([0.0] + [s.t for s in bundle.ground_truth])
    gt_x = np.array([bundle.start.x] + [s.position.x for s in bundle.ground_truth])
    gt_y = np.array([bundle.start.y] + [s.position.y for s in bundle.ground_truth])
    t = np.array([e.t for e in estimates])
    est = np.array([e.position.as_tuple() for e in estimates])
    truth = np.column_stack([np.interp(t, gt_t, gt_x), np.interp(t, gt_t, gt_y)])
    return float(np.mean(np.linalg.norm(est - truth, axis=1)))


# ===== Mobile agent =====

class MobileAgent:
    """
    The phone side of one run: relocates at checkpoints under the battery policy.

    With movement_gate on, a relocate is skipped (previous result carried over)
    when no step was detected since the last one.
    """

    def __init__(self, scenario: Scenario, profile: PhoneProfile, bundle: TraceBundle,
                 knn: KnnModel, svm: SvmModel, rng: np.random.Generator, policy: BatteryPolicy = BatteryPolicy(),
                 movement_gate: bool = False, max_retries: int = 3):
        self.scenario = scenario
        self.profile = profile
        self.knn = knn
        self.svm = svm
        self.rng = rng
        self.policy = policy
        self.movement_gate = movement_gate
        self.max_retries = max_retries
        self.step_times = np.array([s.t for s in detect_steps(bundle.imu, PdrConfig(
            stride_length=scenario.stride_length))]) if movement_gate else np.zeros(0)
        self.last_t: Optional[float] = None
        self.last: Optional[Recognition] = None
        self.skipped = 0

    def moved_since_last(self, t: float) -> bool:
        if self.last_t is None:
            return True
        return bool(np.any((self.step_times > self.last_t) & (self.step_times <= t)))

    def relocate(self, cp: Checkpoint, t: float) -> Optional[Recognition]:
        """Recognition at the checkpoint; None when the battery policy disables sensing"""
        if effective_polling(self.scenario.battery.at(t), self.policy) is None:
            return None
        if self.movement_gate and self.last is not None and not self.moved_since_last(t):
            self.skipped += 1
            return self.last
        source = scan_source(cp.point, self.scenario.plan, self.scenario.true_calibrations, self.profile,
                             self.rng, self.scenario.rss_model)
        self.last = recognize(source, self.knn, self.svm, self.max_retries)
        self.last_t = t
        return self.last


# ===== Black-box verification =====

def verify_actuation(client, room: str, vacated: Optional[str]) -> bool:
    """Lights and fans on in room, off in the vacated room; read from the gateway only"""
    for node in client.list_nodes(room=room):
        if node.capability in OCCUPANCY_CAPABILITIES and node.status != 'on':
            return False
    if vacated is not None and vacated != room:
        for node in client.list_nodes(room=vacated):
            if node.capability in OCCUPANCY_CAPABILITIES and node.status != 'off':
                return False
    return True


# ===== Experiment =====

def _tracker_seed(seed: int, run: int, profile_index: int) -> int:
    return int(np.random.SeedSequence([seed, run, profile_index, 1]).generate_state(1)[0])


def run_experiment(scenario: Scenario, knn: KnnModel, svm: SvmModel, gateway, track: bool = False,
                   movement_gate: bool = False, policy: BatteryPolicy = BatteryPolicy(),
                   max_retries: int = 3, journal_path: Optional[str] = None) -> Metrics:
    """
    Walk the scenario path runs x profiles times.

    At each checkpoint the agent recognizes its room, the automation service
    receives the location change, and actuation is verified through the
    gateway client. gateway may be a GatewayService or any gateway client.
    """
    validate_scenario(scenario)
    client = LocalGatewayClient(gateway) if isinstance(gateway, GatewayService) else gateway
    if not client.is_available():
        raise GatewayUnavailableError("gateway is not reachable, experiment aborted",
                                      gateway=getattr(client, 'base_url', 'in-process'))

    automation = AutomationService(client, rooms=scenario.plan.room_ids, journal_path=journal_path)
    times = checkpoint_times(scenario)
    pdr_cfg = PdrConfig(stride_length=scenario.stride_length)
    trials: List[CheckpointResult] = []
    errors: Dict[str, List[float]] = {}
    believed_room: Optional[str] = None

    logger.info(f"🧪 Experiment: {scenario.runs} runs x {len(scenario.profiles)} profiles x "
                f"{len(scenario.checkpoints)} checkpoints (track={track}, movement_gate={movement_gate})")
    try:
        for pi, profile in enumerate(scenario.profiles):
            for run in range(scenario.runs):
                rng = run_rng(scenario.rng_seed, run, pi)
                bundle = synth_bundle(scenario, profile, rng, pdr_cfg)
                agent = MobileAgent(scenario, profile, bundle, knn, svm, rng, policy, movement_gate, max_retries)

                for cp, t in zip(scenario.checkpoints, times):
                    recognition = agent.relocate(cp, t)
                    if recognition is None or recognition.is_unknown:
                        trials.append(CheckpointResult(profile.name, run, cp.index, cp.expected_room, None,
                                                       recognition.scans_used if recognition else 0, False))
                        continue
                    vacated = believed_room if believed_room != recognition.room else None
                    automation.handle_location(LocationChange(t, scenario.user, recognition.room))
                    believed_room = recognition.room
                    ok = verify_actuation(client, cp.expected_room, vacated)
                    trials.append(CheckpointResult(profile.name, run, cp.index, cp.expected_room,
                                                   recognition.room, recognition.scans_used, ok))

                if track:
                    audit = FloorPlanAudit(scenario.plan)
                    tracker = Tracker(scenario.plan, scenario.true_calibrations,
                                      TrackerConfig(rng_seed=_tracker_seed(scenario.rng_seed, run, pi)),
                                      NoiseModel(), pdr_cfg, PointPrior(bundle.start), observer=audit)
                    estimates = tracker.run(bundle.imu, bundle.rss)
                    errors.setdefault(profile.name, []).append(tracking_error(estimates, bundle))
                    logger.debug(f"{profile.name} run {run}: {audit.checks} floor-plan checks passed")
            logger.info(f"📱 Profile {profile.name} finished ({scenario.runs} runs)")
    finally:
        automation.close()

    expected = scenario.runs * len(scenario.profiles) * len(scenario.checkpoints)
    if len(trials) != expected:
        raise ContractError(f"recorded {len(trials)} trials, expected {expected}")

    mean_errors = {name: float(np.nanmean(values)) for name, values in errors.items()}
    metrics = aggregate(trials, room_kinds(scenario.plan), mean_errors)
    logger.info(f"✅ Experiment finished: accuracy {metrics.overall_accuracy:.3f}, "
                f"actuation {metrics.actuation_success_rate:.3f}")
    return metrics
