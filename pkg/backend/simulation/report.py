"""
Metrics reports - per-trial CSV and a summary JSON document
"""

import csv
import io
import json
import logging
from typing import Dict, List, Optional

from services.errors import ParseError, ValidationError
from simulation.experiment import CheckpointResult, Metrics, aggregate

logger = logging.getLogger(__name__)

CSV_COLUMNS = ['profile', 'run', 'checkpoint', 'expected_room', 'recognized_room', 'scans_used', 'actuation_ok']
REPORT_FORMAT = 'syndesi-metrics'
REPORT_VERSION = 1
FORMATS = ('csv', 'json')


def _csv(metrics: Metrics) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(CSV_COLUMNS)
    for t in metrics.trials:
        writer.writerow([t.profile, t.run, t.checkpoint, t.expected_room, t.recognized_room or 'unknown',
                         t.scans_used, 'true' if t.actuation_ok else 'false'])
    return out.getvalue()


def to_document(metrics: Metrics) -> Dict:
    return {
        'format': REPORT_FORMAT,
        'version': REPORT_VERSION,
        'trials': len(metrics.trials),
        'overall_accuracy': metrics.overall_accuracy,
        'actuation_success_rate': metrics.actuation_success_rate,
        'office_accuracy': metrics.office_accuracy,
        'corridor_accuracy': metrics.corridor_accuracy,
        'checkpoints': [
            {'checkpoint': cp, 'accuracy': acc,
             'trials': sum(1 for t in metrics.trials if t.checkpoint == cp)}
            for cp, acc in sorted(metrics.checkpoint_accuracy.items())
        ],
        'profiles': [dict(profile=name, **stats) for name, stats in sorted(metrics.per_profile.items())],
        'results': [t.to_dict() for t in metrics.trials],
    }


def report(metrics: Metrics, fmt: str = 'csv') -> str:
    """Render metrics as 'csv' (one row per trial) or 'json' (summary plus trials)"""
    if fmt == 'csv':
        return _csv(metrics)
    if fmt == 'json':
        return json.dumps(to_document(metrics), indent=2, sort_keys=True) + '\n'
    raise ValidationError(f"unknown report format '{fmt}', expected one of {', '.join(FORMATS)}")


# ===== Reading reports back =====

_FRACTION_KEYS = ('overall_accuracy', 'actuation_success_rate')
_OPTIONAL_FRACTION_KEYS = ('office_accuracy', 'corridor_accuracy')


def _check_fraction(value, where: str, optional: bool = False):
    if value is None and optional:
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
        raise ValidationError(f"{where} must be a fraction in [0, 1], got {value!r}")


def validate_document(doc: Dict) -> None:
    """Schema check for the JSON report"""
    if not isinstance(doc, dict):
        raise ValidationError("metrics report must be a JSON object")
    if doc.get('format') != REPORT_FORMAT or doc.get('version') != REPORT_VERSION:
        raise ValidationError(f"not a {REPORT_FORMAT} v{REPORT_VERSION} document")
    for key in _FRACTION_KEYS:
        _check_fraction(doc.get(key), key)
    for key in _OPTIONAL_FRACTION_KEYS:
        _check_fraction(doc.get(key), key, optional=True)
    for entry in doc.get('checkpoints', []):
        _check_fraction(entry.get('accuracy'), f"checkpoint {entry.get('checkpoint')} accuracy")
    for entry in doc.get('profiles', []):
        for key in ('accuracy', 'actuation_success_rate'):
            _check_fraction(entry.get(key), f"profile {entry.get('profile')} {key}")
    results = doc.get('results')
    if not isinstance(results, list) or len(results) != doc.get('trials'):
        raise ValidationError("results must list every trial")
    for r in results:
        missing = [c for c in CSV_COLUMNS if c not in r]
        if missing:
            raise ValidationError(f"result entry missing {', '.join(missing)}")


def read_trials_csv(text: str) -> List[CheckpointResult]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_COLUMNS:
        raise ParseError(f"metrics CSV header must be {','.join(CSV_COLUMNS)}")
    trials = []
    for n, row in enumerate(reader, 2):
        try:
            recognized = row['recognized_room']
            trials.append(CheckpointResult(
                profile=row['profile'], run=int(row['run']), checkpoint=int(row['checkpoint']),
                expected_room=row['expected_room'],
                recognized_room=None if recognized == 'unknown' else recognized,
                scans_used=int(row['scans_used']), actuation_ok=row['actuation_ok'] == 'true',
            ))
        except (TypeError, ValueError) as e:
            raise ParseError(f"metrics CSV line {n}: {e}")
    return trials


def load_metrics(text: str, room_kinds: Optional[Dict[str, str]] = None) -> Metrics:
    """Metrics from a report in either format (recomputed from its trials)"""
    stripped = text.lstrip()
    if stripped.startswith('{'):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"metrics report: {e}")
        validate_document(doc)
        trials = [CheckpointResult(**{c: r[c] for c in CSV_COLUMNS}) for r in doc['results']]
        tracking = {p['profile']: p['mean_tracking_error'] for p in doc.get('profiles', [])
                    if 'mean_tracking_error' in p}
        return aggregate(trials, room_kinds, tracking)
    return aggregate(read_trials_csv(text), room_kinds)
