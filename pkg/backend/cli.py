#!/usr/bin/env python3
"""
Syndesi command line - calibration, survey, training, tracking, the gateway,
the automation loop and the checkpoint experiment.

Exit codes: 0 success, 1 domain error, 2 usage error or missing input file.
Errors are printed to stderr as {"ok": false, "error": code, "message": ...}.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import config
from app import serve
from engine.fingerprint import dump_db, dump_models, load_db, load_models, train
from engine.floorplan import Point2D, load_floorplan_file
from engine.motion import PdrConfig, read_imu_trace
from engine.ranging import dump_calibrations, fit_all, load_calibrations, load_pairs, read_rss_trace
from engine.tracker import NoiseModel, PointPrior, Tracker, TrackerConfig, UniformPrior, write_estimates_csv
from services.automation_service import AutomationService, read_location_stream
from services.clock import VirtualClock, make_clock
from services.errors import NotFoundError, SyndesiError
from services.gateway_client import HttpGatewayClient
from services.gateway_service import GatewayService, load_node_fixture
from services.records import SensorReading
from services.store_service import StoreService
from simulation.experiment import room_kinds, run_experiment
from simulation.report import FORMATS, load_metrics, report
from simulation.scenario import load_scenario_file
from simulation.simulator import run_rng, survey_rng, synth_bundle, synth_survey, write_bundle

logger = logging.getLogger(__name__)

FIXTURES_DIR = Path(__file__).resolve().parent / 'fixtures'
DEFAULT_NODES = FIXTURES_DIR / 'demo_nodes.json'

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


# ===== Helpers =====

def _read_path(path) -> Path:
    if not Path(path).is_file():
        raise NotFoundError(f"file not found: {path}", path=str(path))
    return Path(path)


def _read(path) -> str:
    return _read_path(path).read_text(encoding='utf-8')


def _write(text: str, out: Optional[str]):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        logger.info(f"💾 Wrote {out}")
    else:
        sys.stdout.write(text)


def _scenario(args):
    scenario = load_scenario_file(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_overrides(rng_seed=args.seed)
    if getattr(args, 'runs', None) is not None:
        scenario = scenario.with_overrides(runs=args.runs)
    return scenario


def _models(args, scenario):
    if args.models:
        return load_models(_read(args.models))
    db = synth_survey(scenario.plan, scenario.true_calibrations, scenario.profiles, scenario.points_per_room,
                      survey_rng(scenario.rng_seed), scenario.rss_model)
    return train(db, k=args.k)


def _gateway(plan, nodes_path, clock=None, data_dir=None) -> GatewayService:
    gateway = GatewayService(StoreService(data_dir), clock or VirtualClock(), plan)
    if nodes_path:
        gateway.load_nodes(load_node_fixture(_read(nodes_path)))
    return gateway


# ===== Subcommands =====

def cmd_calibrate(args) -> int:
    cals = fit_all(load_pairs(_read(args.pairs)))
    for c in cals:
        logger.info(f"📡 {c.ap_id}: alpha={c.alpha:.6g} beta={c.beta:.6g}")
    _write(dump_calibrations(cals) + '\n', args.out)
    return EXIT_OK


def cmd_survey(args) -> int:
    scenario = _scenario(args)
    points = args.points or scenario.points_per_room
    db = synth_survey(scenario.plan, scenario.true_calibrations, scenario.profiles, points,
                      survey_rng(scenario.rng_seed), scenario.rss_model)
    _write(dump_db(db) + '\n', args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    db = load_db(_read(args.db))
    if args.plan:
        db.validate_against(load_floorplan_file(_read_path(args.plan)))
    knn, svm = train(db, k=args.k)
    _write(dump_models(knn, svm) + '\n', args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = _scenario(args)
    index = next((i for i, p in enumerate(scenario.profiles) if p.name == args.profile), None)
    if index is None:
        raise NotFoundError(f"unknown phone profile '{args.profile}'")
    bundle = synth_bundle(scenario, scenario.profiles[index], run_rng(scenario.rng_seed, args.run, index))
    write_bundle(bundle, args.out)
    logger.info(f"📦 Trace bundle: {len(bundle.ground_truth)} steps, {len(bundle.rss)} RSS samples")
    return EXIT_OK


def cmd_track(args) -> int:
    plan = load_floorplan_file(_read_path(args.plan))
    cals = load_calibrations(_read(args.calibrations))
    imu = read_imu_trace(_read(args.imu).splitlines())
    rss = read_rss_trace(_read(args.rss).splitlines()) if args.rss else []
    prior = PointPrior(Point2D(*args.start)) if args.start else UniformPrior()
    tracker = Tracker(plan, cals, TrackerConfig(n_particles=args.particles, rng_seed=args.seed or 0),
                      NoiseModel(), PdrConfig(stride_length=args.stride), prior)
    estimates = tracker.run(imu, rss)
    if args.out:
        with open(args.out, 'w', encoding='utf-8', newline='') as f:
            write_estimates_csv(estimates, f)
        logger.info(f"💾 Wrote {args.out}")
    else:
        write_estimates_csv(estimates, sys.stdout)
    return EXIT_OK


def cmd_serve(args) -> int:
    plan = load_floorplan_file(_read_path(args.plan)) if args.plan else None
    gateway = _gateway(plan, args.nodes, make_clock(args.clock or config.CLOCK), config.DATA_DIR)
    serve(gateway, port=args.port, poll_interval=args.poll_interval)
    return EXIT_OK


def cmd_automate(args) -> int:
    client = HttpGatewayClient(args.gateway or config.GATEWAY_URL)
    locations = read_location_stream(_read(args.locations).splitlines())
    readings: List[SensorReading] = []
    if args.readings:
        for line in _read(args.readings).splitlines():
            if line.strip():
                readings.append(SensorReading.from_dict(json.loads(line)))
    plan = load_floorplan_file(_read_path(args.plan)) if args.plan else None
    automation = AutomationService(client, rooms=plan.room_ids if plan else None, journal_path=args.journal)
    try:
        journal = automation.run(locations, readings)
    finally:
        automation.close()
    failed = sum(1 for entry in journal for r in entry['results'] if not r['ok'])
    logger.info(f"🏠 Automation processed {len(journal)} events ({failed} failed actuations)")
    return EXIT_OK if failed == 0 else EXIT_ERROR


def cmd_experiment(args) -> int:
    scenario = _scenario(args)
    knn, svm = _models(args, scenario)
    if args.port:
        target = HttpGatewayClient(f"http://localhost:{args.port}")
    else:
        target = _gateway(scenario.plan, args.nodes or DEFAULT_NODES)
    metrics = run_experiment(scenario, knn, svm, target, track=args.track, movement_gate=args.movement_gate,
                             journal_path=args.journal)
    _write(report(metrics, args.format), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    kinds = None
    if args.scenario:
        kinds = room_kinds(load_scenario_file(args.scenario).plan)
    elif args.plan:
        kinds = room_kinds(load_floorplan_file(_read_path(args.plan)))
    metrics = load_metrics(_read(args.input), kinds)
    _write(report(metrics, args.format), args.out)
    return EXIT_OK


# ===== Parser =====

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='syndesi', description='Indoor localization and WSAN automation toolkit')
    parser.add_argument('--log-level', default=None, help='override SYNDESI_LOG_LEVEL')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('calibrate', help='fit AP calibrations from (rss, distance) pairs')
    p.add_argument('pairs', help='calibration pairs JSON')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser('survey', help='synthesize a fingerprint database')
    p.add_argument('--scenario', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--points', type=int, help='points per room')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_survey)

    p = sub.add_parser('train', help='train the KNN and SVM room classifiers')
    p.add_argument('--db', required=True)
    p.add_argument('--plan')
    p.add_argument('--k', type=int, default=3)
    p.add_argument('--out')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('simulate', help='write one synthesized trace bundle')
    p.add_argument('--scenario', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--profile', default='phone-a')
    p.add_argument('--run', type=int, default=0)
    p.add_argument('--out', required=True, help='output directory')
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('track', help='run the particle filter over trace files')
    p.add_argument('--plan', required=True)
    p.add_argument('--calibrations', required=True)
    p.add_argument('--imu', required=True)
    p.add_argument('--rss')
    p.add_argument('--start', type=float, nargs=2, metavar=('X', 'Y'))
    p.add_argument('--particles', type=int, default=1000)
    p.add_argument('--stride', type=float, default=0.7)
    p.add_argument('--seed', type=int)
    p.add_argument('--out')
    p.set_defaults(handler=cmd_track)

    p = sub.add_parser('serve', help='run the gateway HTTP API')
    p.add_argument('--plan')
    p.add_argument('--nodes')
    p.add_argument('--port', type=int)
    p.add_argument('--clock', choices=('real', 'virtual'))
    p.add_argument('--poll-interval', type=float, help='environmental polling interval in seconds')
    p.set_defaults(handler=cmd_serve)

    p = sub.add_parser('automate', help='run the automation loop against a gateway')
    p.add_argument('--gateway', help='gateway base URL')
    p.add_argument('--locations', required=True, help='JSON-lines location changes')
    p.add_argument('--readings', help='JSON-lines sensor readings')
    p.add_argument('--plan')
    p.add_argument('--journal')
    p.set_defaults(handler=cmd_automate)

    p = sub.add_parser('experiment', help='checkpoint walks, recognition and actuation checks')
    p.add_argument('--scenario', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--runs', type=int)
    p.add_argument('--models', help='trained model file (default: survey and train in-process)')
    p.add_argument('--k', type=int, default=3)
    p.add_argument('--nodes', help='node fixture for the in-process gateway')
    p.add_argument('--port', type=int, help='use a running gateway on localhost:PORT')
    p.add_argument('--track', action='store_true', help='also run the particle filter and audit the floor plan')
    p.add_argument('--movement-gate', action='store_true')
    p.add_argument('--journal')
    p.add_argument('--format', choices=FORMATS, default='csv')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser('report', help='re-render a metrics file')
    p.add_argument('input', help='metrics CSV or JSON')
    p.add_argument('--scenario')
    p.add_argument('--plan')
    p.add_argument('--format', choices=FORMATS, default='json')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_report)
    return parser


def _fail(e: SyndesiError) -> int:
    sys.stderr.write(json.dumps(e.to_dict()) + '\n')
    return EXIT_USAGE if isinstance(e, NotFoundError) else EXIT_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config.configure_logging(args.log_level)
    try:
        return args.handler(args)
    except SyndesiError as e:
        logger.error(f"{args.command} failed: [{e.code}] {e}")
        return _fail(e)
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        sys.stderr.write(json.dumps({'ok': False, 'error': 'internal', 'message': str(e)}) + '\n')
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
