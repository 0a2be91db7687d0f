"""
WiFi ranging - RSS to distance with the non-linear regression model

    d = alpha * exp(rss * beta)

alpha and beta are per access point environmental constants. They are fitted
by least squares on the log-linear form ln d = ln alpha + beta * rss, which
has a closed-form solution.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from services.errors import ContractError, ParseError, UnderdeterminedError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RssSample:
    ap_id: str
    t: float
    rss: float

    def __post_init__(self):
        if not math.isfinite(self.rss):
            raise ValidationError(f"non-finite rss from '{self.ap_id}'")


@dataclass(frozen=True)
class ApCalibration:
    ap_id: str
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError(f"calibration '{self.ap_id}': alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class RangeEstimate:
    ap_id: str
    t: float
    d: float


def distance_from_rss(rss, alpha: float, beta: float):
    """Vectorized model evaluation"""
    return alpha * np.exp(np.asarray(rss, dtype=float) * beta)


def range_from_rss(s: RssSample, cal: ApCalibration) -> RangeEstimate:
    if s.ap_id != cal.ap_id:
        raise ContractError(f"sample from '{s.ap_id}' evaluated with calibration of '{cal.ap_id}'")
    return RangeEstimate(s.ap_id, s.t, cal.alpha * math.exp(s.rss * cal.beta))


def fit_calibration(pairs: Sequence[Tuple[float, float]], ap_id: str) -> ApCalibration:
    """
    Fit (alpha, beta) from (rss, true_distance) pairs.

    Raises:
        ValidationError: a distance is not positive
        UnderdeterminedError: fewer than two distinct rss values
    """
    data = np.asarray(pairs, dtype=float).reshape(-1, 2)
    rss, d = data[:, 0], data[:, 1]
    if np.any(d <= 0) or not np.all(np.isfinite(data)):
        raise ValidationError(f"calibration '{ap_id}': distances must be positive and finite")
    if len(np.unique(rss)) < 2:
        raise UnderdeterminedError(f"calibration '{ap_id}': need at least 2 distinct rss values")

    design = np.column_stack([np.ones_like(rss), rss])
    (ln_alpha, beta), *_ = np.linalg.lstsq(design, np.log(d), rcond=None)
    cal = ApCalibration(ap_id, float(math.exp(ln_alpha)), float(beta))
    logger.info(f"Fitted {ap_id}: alpha={cal.alpha:.4f} beta={cal.beta:.5f} from {len(rss)} pairs")
    return cal


def fit_all(pairs_by_ap: Dict[str, Sequence[Tuple[float, float]]]) -> List[ApCalibration]:
    return [fit_calibration(pairs, ap_id) for ap_id, pairs in sorted(pairs_by_ap.items())]


# ===== Files =====

def load_calibrations(text: str) -> List[ApCalibration]:
    try:
        raw = json.loads(text)
        return [ApCalibration(str(c['ap_id']), float(c['alpha']), float(c['beta'])) for c in raw]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ParseError(f"calibration file: {e}")


def dump_calibrations(cals: Iterable[ApCalibration]) -> str:
    return json.dumps([{'ap_id': c.ap_id, 'alpha': c.alpha, 'beta': c.beta} for c in cals], indent=2)


def load_pairs(text: str) -> Dict[str, List[Tuple[float, float]]]:
    """
    Calibration pairs document:
        {"pairs": [{"ap_id": "ap-1", "rss": -52.0, "distance": 3.1}, ...]}
    """
    try:
        raw = json.loads(text)
        grouped: Dict[str, List[Tuple[float, float]]] = {}
        for p in raw['pairs']:
            grouped.setdefault(str(p['ap_id']), []).append((float(p['rss']), float(p['distance'])))
        return grouped
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ParseError(f"calibration pairs file: {e}")


def read_rss_trace(lines: Iterable[str]) -> List[RssSample]:
    trace = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
            trace.append(RssSample(str(raw['ap_id']), float(raw['t']), float(raw['rss'])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"RSS trace line {n}: {e}")
    return trace


def write_rss_trace(trace: Sequence[RssSample], f):
    for s in trace:
        f.write(json.dumps({'t': s.t, 'ap_id': s.ap_id, 'rss': s.rss}) + '\n')
