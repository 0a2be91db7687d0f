import json

import pytest

import cli
from cli import build_parser, main
from conftest import FIXTURES
from engine.ranging import load_calibrations
from services.gateway_client import LocalGatewayClient
from simulation.report import CSV_COLUMNS

SCENARIO = str(FIXTURES / 'demo_scenario.json')


def test_calibrate(tmp_path, demo_scenario):
    out = tmp_path / 'cals.json'
    assert main(['calibrate', str(FIXTURES / 'demo_calibration_pairs.json'), '--out', str(out)]) == 0
    fitted = {c.ap_id: c for c in load_calibrations(out.read_text())}
    for true in demo_scenario.true_calibrations:
        assert fitted[true.ap_id].alpha == pytest.approx(true.alpha, rel=1e-3)
        assert fitted[true.ap_id].beta == pytest.approx(true.beta, rel=1e-3)


def test_experiment_writes_metrics(tmp_path):
    out = tmp_path / 'metrics.csv'
    assert main(['experiment', '--scenario', SCENARIO, '--runs', '1', '--out', str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ','.join(CSV_COLUMNS)
    assert len(lines) == 1 + 3 * 8


def test_same_seed_same_bytes(tmp_path):
    outputs = []
    for name in ('a.json', 'b.json'):
        out = tmp_path / name
        assert main(['experiment', '--scenario', SCENARIO, '--runs', '1', '--seed', '11',
                     '--format', 'json', '--out', str(out)]) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_missing_scenario_exits_2(tmp_path, capsys):
    assert main(['experiment', '--scenario', str(tmp_path / 'nope.json')]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err['ok'] is False
    assert err['error'] == 'not-found'


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(['experiment'])
    assert exc.value.code == 2


def test_survey_train_and_report(tmp_path):
    db = tmp_path / 'db.json'
    models = tmp_path / 'models.json'
    metrics = tmp_path / 'metrics.csv'
    summary = tmp_path / 'summary.json'
    assert main(['survey', '--scenario', SCENARIO, '--points', '30', '--out', str(db)]) == 0
    assert len(json.loads(db.read_text())['entries']) == 150
    assert main(['train', '--db', str(db), '--plan', str(FIXTURES / 'demo_plan.json'), '--out', str(models)]) == 0
    assert main(['experiment', '--scenario', SCENARIO, '--runs', '1', '--models', str(models),
                 '--out', str(metrics)]) == 0
    assert main(['report', str(metrics), '--scenario', SCENARIO, '--out', str(summary)]) == 0
    doc = json.loads(summary.read_text())
    assert doc['trials'] == 24
    assert doc['office_accuracy'] is not None


def test_simulate_then_track(tmp_path):
    bundle = tmp_path / 'bundle'
    cals = tmp_path / 'cals.json'
    estimates = tmp_path / 'estimates.csv'
    assert main(['simulate', '--scenario', SCENARIO, '--profile', 'phone-b', '--out', str(bundle)]) == 0
    assert main(['calibrate', str(FIXTURES / 'demo_calibration_pairs.json'), '--out', str(cals)]) == 0
    assert main(['track', '--plan', str(FIXTURES / 'demo_plan.json'), '--calibrations', str(cals),
                 '--imu', str(bundle / 'imu.jsonl'), '--rss', str(bundle / 'rss.jsonl'),
                 '--start', '13', '0.5', '--particles', '200', '--out', str(estimates)]) == 0
    rows = estimates.read_text().splitlines()
    truth = (bundle / 'ground_truth.csv').read_text().splitlines()
    assert rows[0] == 't,x,y,room'
    assert len(rows) > len(truth) // 2
    assert all(float(r.split(',')[0]) > 0 for r in rows[1:])


def test_unknown_profile(tmp_path):
    assert main(['simulate', '--scenario', SCENARIO, '--profile', 'phone-z', '--out', str(tmp_path)]) == 2


def test_parser_defaults():
    args = build_parser().parse_args(['experiment', '--scenario', SCENARIO])
    assert args.format == 'csv'
    assert args.track is False
    assert args.k == 3


def test_automate_against_gateway(tmp_path, gateway, monkeypatch):
    monkeypatch.setattr(cli, 'HttpGatewayClient', lambda url: LocalGatewayClient(gateway))
    locations = tmp_path / 'locations.jsonl'
    locations.write_text('{"t": 1, "user": "u1", "room": "office-1"}\n'
                         '{"t": 9, "user": "u1", "room": "office-2"}\n')
    journal = tmp_path / 'journal.jsonl'
    assert main(['automate', '--locations', str(locations), '--plan', str(FIXTURES / 'demo_plan.json'),
                 '--journal', str(journal)]) == 0
    assert gateway.get_node('office-1-light').status == 'off'
    assert gateway.get_node('office-2-light').status == 'on'
    assert len(journal.read_text().splitlines()) == 2


def test_unexpected_failure_is_reported_as_internal(monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise RuntimeError('disk on fire')

    monkeypatch.setattr(cli, '_gateway', broken)
    assert main(['serve', '--clock', 'virtual']) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err == {'ok': False, 'error': 'internal', 'message': 'disk on fire'}


def test_serve_passes_gateway_and_poll_interval(monkeypatch):
    calls = []
    monkeypatch.setattr(cli.config, 'DATA_DIR', None)
    monkeypatch.setattr(cli, 'serve', lambda gateway, **kwargs: calls.append((gateway, kwargs)))
    assert main(['serve', '--plan', str(FIXTURES / 'demo_plan.json'), '--nodes', str(FIXTURES / 'demo_nodes.json'),
                 '--clock', 'virtual', '--port', '5055', '--poll-interval', '30']) == 0
    gateway, kwargs = calls[0]
    assert kwargs == {'port': 5055, 'poll_interval': 30.0}
    assert gateway.clock.mode == 'virtual'
    assert gateway.health()['nodes'] == 28
