"""
Room Recognition - WiFi fingerprinting with two classifiers

Training phase builds the fingerprint database (RSS vectors labelled with the
surveyed room). Recognition classifies a fresh vector with both KNN and a
linear one-vs-rest SVM; the room is reported only when they agree, otherwise
a new vector is collected and the attempt repeated.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from services.errors import ParseError, TrainingError, ValidationError

logger = logging.getLogger(__name__)

MISSING_RSS = -100.0
MODEL_FORMAT = 'syndesi-fingerprint-model'
MODEL_VERSION = 1

# SVM training
SVM_ITERATIONS = 500
SVM_LEARNING_RATE = 0.1
SVM_LAMBDA = 1e-3

SCORE_TIE_TOLERANCE = 1e-9


def fingerprint_vector(readings: Mapping[str, float], ap_order: Sequence[str]) -> np.ndarray:
    """One slot per known AP in ap_order; absent APs get MISSING_RSS"""
    values = [readings.get(ap, MISSING_RSS) for ap in ap_order]
    return np.clip(np.asarray(values, dtype=float), MISSING_RSS, 0.0)


def _check_vector(v, dims: int) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if len(v) != dims:
        raise ValidationError(f"fingerprint has {len(v)} values, expected {dims}")
    return v


@dataclass(frozen=True, eq=False)
class FingerprintDb:
    ap_order: Tuple[str, ...]
    vectors: np.ndarray
    labels: Tuple[str, ...]

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float).reshape(-1, len(self.ap_order))
        if len(vectors) != len(self.labels):
            raise ValidationError(f"{len(vectors)} vectors for {len(self.labels)} labels")
        if np.any(vectors > 0) or np.any(vectors < MISSING_RSS):
            raise ValidationError(f"fingerprint values must lie in [{MISSING_RSS}, 0]")
        object.__setattr__(self, 'vectors', vectors)

    def __len__(self):
        return len(self.labels)

    @property
    def rooms(self) -> List[str]:
        return sorted(set(self.labels))

    def validate_against(self, plan) -> None:
        """Every label must be a room of the plan and the AP order must match"""
        unknown = [r for r in self.rooms if not plan.has_room(r)]
        if unknown:
            raise ValidationError(f"fingerprint labels not in floor plan: {', '.join(unknown)}")
        if list(self.ap_order) != plan.ap_ids:
            raise ValidationError("fingerprint AP order differs from the floor plan")

    @classmethod
    def from_entries(cls, ap_order: Sequence[str], entries: Iterable[Tuple[Sequence[float], str]]) -> 'FingerprintDb':
        entries = list(entries)
        vectors = np.array([np.asarray(v, dtype=float) for v, _ in entries]).reshape(-1, len(ap_order))
        return cls(tuple(ap_order), vectors, tuple(label for _, label in entries))


@dataclass(frozen=True, eq=False)
class KnnModel:
    db: FingerprintDb
    k: int = 3

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValidationError(f"k must be a positive odd number, got {self.k}")
        if self.k > len(self.db):
            raise ValidationError(f"k={self.k} exceeds database size {len(self.db)}")


@dataclass(frozen=True, eq=False)
class SvmModel:
    labels: Tuple[str, ...]
    weights: np.ndarray  # (n_labels, dims)
    biases: np.ndarray   # (n_labels,)
    mean: np.ndarray
    scale: np.ndarray

    def decision_values(self, v: np.ndarray) -> np.ndarray:
        z = (np.asarray(v, dtype=float) - self.mean) / self.scale
        return self.weights @ z + self.biases


# ===== Training =====

def _fit_binary(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, float]:
    """Sub-gradient descent on the L2-regularized hinge loss, averaged over the samples"""
    n, dims = x.shape
    sample_weight = np.full(n, 1.0 / n)
    w = np.zeros(dims)
    b = 0.0
    for t in range(1, SVM_ITERATIONS + 1):
        eta = SVM_LEARNING_RATE / math.sqrt(t)
        active = y * (x @ w + b) < 1
        coeff = sample_weight * y * active
        grad_w = SVM_LAMBDA * w - coeff @ x
        grad_b = -float(np.sum(coeff))
        w = w - eta * grad_w
        b = b - eta * grad_b
    return w, b


def train_svm(db: FingerprintDb) -> SvmModel:
    labels = tuple(db.rooms)
    x = db.vectors
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale

    weights, biases = [], []
    label_array = np.asarray(db.labels)
    for label in labels:
        y = np.where(label_array == label, 1.0, -1.0)
        w, b = _fit_binary(z, y)
        weights.append(w)
        biases.append(b)
    return SvmModel(labels, np.array(weights), np.array(biases), mean, scale)


def train(db: FingerprintDb, k: int = 3) -> Tuple[KnnModel, SvmModel]:
    """Build both classifiers from the fingerprint database"""
    if len(db) == 0:
        raise TrainingError("fingerprint database is empty")
    if len(db.rooms) < 2:
        raise TrainingError(f"need at least 2 rooms to classify, got {db.rooms}")

    knn = KnnModel(db, k)
    svm = train_svm(db)
    accuracy = np.mean([classify_svm(v, svm) == label for v, label in zip(db.vectors, db.labels)])
    logger.info(f"Trained fingerprint models: {len(db)} vectors, {len(db.rooms)} rooms, "
                f"k={k}, SVM training accuracy {accuracy:.1%}")
    return knn, svm


# ===== Classification =====

def classify_knn(v, m: KnnModel) -> str:
    """
    Majority label of the k nearest database entries.

    Distance ties resolve by database order; vote ties by the smallest mean
    distance, then by the lowest room id.
    """
    v = _check_vector(v, len(m.db.ap_order))
    dist = np.linalg.norm(m.db.vectors - v, axis=1)
    nearest = np.argsort(dist, kind='stable')[:m.k]

    votes: Dict[str, List[float]] = {}
    for i in nearest:
        votes.setdefault(m.db.labels[i], []).append(float(dist[i]))
    return min(votes, key=lambda label: (-len(votes[label]), float(np.mean(votes[label])), label))


def classify_svm(v, m: SvmModel) -> str:
    """Label whose scorer has the highest decision value (ties go to the lowest room id)"""
    v = _check_vector(v, len(m.mean))
    scores = m.decision_values(v)
    best = float(np.max(scores))
    for label, score in zip(m.labels, scores):
        if score >= best - SCORE_TIE_TOLERANCE:
            return label
    return m.labels[int(np.argmax(scores))]


@dataclass
class Recognition:
    room: Optional[str]
    scans_used: int
    knn_label: Optional[str] = None
    svm_label: Optional[str] = None
    history: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def is_unknown(self) -> bool:
        return self.room is None


VectorSource = Union[Callable[[], Optional[Sequence[float]]], Iterator, Iterable]


def _puller(scan: VectorSource) -> Callable[[], Optional[Sequence[float]]]:
    if callable(scan):
        return scan
    it = iter(scan)
    return lambda: next(it, None)


def recognize(scan: VectorSource, knn: KnnModel, svm: SvmModel, max_retries: int = 3) -> Recognition:
    """
    Dual-classifier agreement protocol.

    Pulls up to max_retries vectors. A label is returned only when both
    classifiers agree on the same vector; exhaustion yields an unknown result
    carrying the last pair of labels.
    """
    pull = _puller(scan)
    result = Recognition(room=None, scans_used=0)
    for _ in range(max(max_retries, 0)):
        v = pull()
        if v is None:
            break
        result.scans_used += 1
        result.knn_label = classify_knn(v, knn)
        result.svm_label = classify_svm(v, svm)
        result.history.append((result.knn_label, result.svm_label))
        if result.knn_label == result.svm_label:
            result.room = result.knn_label
            return result
        logger.debug(f"Classifier mismatch: knn={result.knn_label} svm={result.svm_label}")
    return result


# ===== Files =====

def load_db(text: str) -> FingerprintDb:
    """{"ap_order": [...], "entries": [{"room": ..., "rss": [...]}]}"""
    try:
        raw = json.loads(text)
        ap_order = [str(a) for a in raw['ap_order']]
        entries = [(e['rss'], str(e['room'])) for e in raw['entries']]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ParseError(f"fingerprint database: {e}")
    for rss, room in entries:
        if len(rss) != len(ap_order):
            raise ValidationError(f"entry for '{room}' has {len(rss)} values, expected {len(ap_order)}")
    return FingerprintDb.from_entries(ap_order, entries)


def dump_db(db: FingerprintDb) -> str:
    return json.dumps({
        'ap_order': list(db.ap_order),
        'entries': [{'room': label, 'rss': [float(x) for x in v]}
                    for v, label in zip(db.vectors, db.labels)],
    })


def dump_models(knn: KnnModel, svm: SvmModel) -> str:
    return json.dumps({
        'format': MODEL_FORMAT,
        'version': MODEL_VERSION,
        'knn': {'k': knn.k, 'db': json.loads(dump_db(knn.db))},
        'svm': {
            'labels': list(svm.labels),
            'weights': svm.weights.tolist(),
            'biases': svm.biases.tolist(),
            'mean': svm.mean.tolist(),
            'scale': svm.scale.tolist(),
        },
    })


def load_models(text: str) -> Tuple[KnnModel, SvmModel]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"model file: {e}")
    if not isinstance(raw, dict) or raw.get('format') != MODEL_FORMAT:
        raise ParseError("model file: missing or foreign format header")
    if raw.get('version') != MODEL_VERSION:
        raise ParseError(f"model file: unsupported version {raw.get('version')}")
    try:
        knn = KnnModel(load_db(json.dumps(raw['knn']['db'])), int(raw['knn']['k']))
        s = raw['svm']
        svm = SvmModel(tuple(s['labels']), np.array(s['weights'], dtype=float), np.array(s['biases'], dtype=float),
                       np.array(s['mean'], dtype=float), np.array(s['scale'], dtype=float))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"model file: {e}")
    return knn, svm
