"""
Gateway Service - WSAN node registry, actuation and sensor-data ingestion

All mutations go through one lock so that concurrent register/mediate/list
calls are linearizable. Status changes are recorded as ActuationRecords;
replaying them from the registered initial states reproduces every node's
current status.
"""

import json
import logging
import math
import threading
from typing import Callable, Dict, List, Optional

from services.clock import RealClock
from services.errors import (ConflictError, InvalidStatusError, InvalidTargetError, NotFoundError, ParseError,
                             ValidationError)
from services.records import (ActuationRecord, NodeRecord, SensorReading, UserRecord, initial_status,
                              valid_statuses)
from services.store_service import StoreService

logger = logging.getLogger(__name__)

ACTUATION_CAUSES = ('manual', 'automation')


class GatewayService:
    def __init__(self, store: Optional[StoreService] = None, clock=None, plan=None):
        self.store = store or StoreService()
        self.clock = clock or RealClock()
        self.plan = plan
        self._lock = threading.RLock()
        self._reading_listeners: List[Callable[[SensorReading], None]] = []
        logger.info(f"Gateway service initialized ({len(self.store.nodes)} nodes, clock={self.clock.mode})")

    def is_available(self):
        return self.store.is_available()

    def add_reading_listener(self, listener: Callable[[SensorReading], None]):
        """Hook called with every ingested reading (the automation engine subscribes here)"""
        self._reading_listeners.append(listener)

    def _check_room(self, room: str):
        if self.plan is not None and not self.plan.has_room(room):
            raise ValidationError(f"unknown room '{room}'")

    # ===== Node registry =====

    def register_node(self, node: NodeRecord) -> Dict:
        self._check_room(node.room)
        with self._lock:
            if node.id in self.store.nodes:
                raise ConflictError(f"node '{node.id}' is already registered", node=node.id)
            record = NodeRecord(node.id, node.kind, node.room, node.capability, initial_status(node.capability))
            self.store.append('node', record.to_dict())
        logger.debug(f"Registered {record.capability} node {record.id} in {record.room}")
        return {'ok': True, 'node': record.to_dict()}

    def get_node(self, node_id: str) -> NodeRecord:
        with self._lock:
            node = self.store.nodes.get(node_id)
        if node is None:
            raise NotFoundError(f"unknown node '{node_id}'", node=node_id)
        return node

    def list_nodes(self, room: Optional[str] = None) -> List[NodeRecord]:
        with self._lock:
            nodes = list(self.store.nodes.values())
        if room is not None:
            nodes = [n for n in nodes if n.room == room]
        return sorted(nodes, key=lambda n: n.id)

    def mediate(self, node_id: str, status: str, cause: str = 'manual') -> Dict:
        """
        Set an actuator's status.

        Setting the current status is acknowledged without a new record.
        """
        if cause not in ACTUATION_CAUSES:
            raise ValidationError(f"unknown actuation cause '{cause}'")
        with self._lock:
            node = self.store.nodes.get(node_id)
            if node is None:
                raise NotFoundError(f"unknown node '{node_id}'", node=node_id)
            if not node.is_actuator:
                raise InvalidTargetError(f"node '{node_id}' is a sensor", node=node_id)
            if status not in valid_statuses(node.capability):
                raise InvalidStatusError(
                    f"status '{status}' is not valid for {node.capability} '{node_id}'",
                    node=node_id, allowed=list(valid_statuses(node.capability)))
            if node.status == status:
                return {'ok': True, 'node': node_id, 'status': status, 'changed': False}

            record = ActuationRecord(self.clock.now(), node_id, node.status, status, cause)
            self.store.append('actuation', record.to_dict())
        logger.info(f"Mediate {node_id}: {record.old} -> {record.new} ({cause})")
        return {'ok': True, 'node': node_id, 'status': status, 'changed': True}

    def actuations(self, node: Optional[str] = None) -> List[ActuationRecord]:
        with self._lock:
            records = list(self.store.actuations)
        return [r for r in records if node is None or r.node == node]

    def replay_statuses(self) -> Dict[str, Optional[str]]:
        """Node statuses rebuilt from initial states and the actuation log"""
        with self._lock:
            statuses = {n.id: initial_status(n.capability) for n in self.store.nodes.values()}
            for record in self.store.actuations:
                if record.node in statuses:
                    statuses[record.node] = record.new
        return statuses

    # ===== Sensor data =====

    def ingest_reading(self, reading: SensorReading) -> Dict:
        self._check_room(reading.room)
        with self._lock:
            self.store.append('reading', reading.to_dict())
        for listener in list(self._reading_listeners):
            try:
                listener(reading)
            except Exception as e:
                logger.error(f"Reading listener failed for {reading.source}: {e}")
        return {'ok': True}

    def query_readings(self, room: Optional[str] = None, metric: Optional[str] = None,
                       t_from: float = 0.0, t_to: float = math.inf) -> List[SensorReading]:
        if t_from > t_to:
            raise ValidationError(f"inverted time range [{t_from}, {t_to}]")
        with self._lock:
            readings = list(self.store.readings)
        matched = [
            r for r in readings
            if (room is None or r.room == room) and (metric is None or r.metric == metric)
            and t_from <= r.t <= t_to
        ]
        # stable: equal timestamps keep ingestion order
        return sorted(matched, key=lambda r: r.t)

    # ===== Users =====

    def register_user(self, user: UserRecord) -> Dict:
        with self._lock:
            if user.id in self.store.users:
                raise ConflictError(f"user '{user.id}' already exists", user=user.id)
            self.store.append('user', user.to_dict())
        logger.info(f"Registered user {user.id}")
        return {'ok': True, 'user': user.to_dict()}

    def get_user(self, user_id: str) -> UserRecord:
        with self._lock:
            user = self.store.users.get(user_id)
        if user is None:
            raise NotFoundError(f"unknown user '{user_id}'", user=user_id)
        return user

    def list_users(self) -> List[UserRecord]:
        with self._lock:
            return sorted(self.store.users.values(), key=lambda u: u.id)

    # ===== Lifecycle =====

    def health(self) -> Dict:
        with self._lock:
            return {
                'status': 'healthy',
                'clock': self.clock.mode,
                'nodes': len(self.store.nodes),
                'users': len(self.store.users),
                'readings': len(self.store.readings),
                'actuations': len(self.store.actuations),
                'persistent': self.store.persistent,
            }

    def load_nodes(self, nodes: List[NodeRecord]) -> int:
        """Register a fixture, skipping nodes already known (restart over a persisted store)"""
        added = 0
        for node in nodes:
            try:
                self.register_node(node)
                added += 1
            except ConflictError:
                pass
        logger.info(f"Loaded {added} nodes ({len(nodes) - added} already registered)")
        return added

    def close(self):
        self.store.close()


def load_node_fixture(text: str) -> List[NodeRecord]:
    """Node fixture file: JSON array of NodeRecords"""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"node fixture: {e}")
    if not isinstance(raw, list):
        raise ParseError("node fixture must be a JSON array")
    return [NodeRecord.from_dict(n) for n in raw]
