"""
Store Service - append-only event log plus in-memory state tables

Every accepted write (node registration, status change, user record, sensor
reading) is appended to ``events.jsonl`` before it becomes visible. State
tables are rebuilt on start from ``snapshot.json`` and the log entries written
after it. Without a data directory the store is memory-only.
"""

import json
import logging
import os
import threading
from pathlib import Path
from typing import Dict, List, Optional

from services.records import ActuationRecord, NodeRecord, SensorReading, UserRecord

logger = logging.getLogger(__name__)

LOG_NAME = 'events.jsonl'
SNAPSHOT_NAME = 'snapshot.json'


class StoreService:
    def __init__(self, data_dir: Optional[str] = None, fsync: bool = False):
        self.data_dir = Path(data_dir) if data_dir else None
        self.fsync = fsync
        self._lock = threading.RLock()
        self._log = None
        self._offset = 0

        self.nodes: Dict[str, NodeRecord] = {}
        self.users: Dict[str, UserRecord] = {}
        self.readings: List[SensorReading] = []
        self.actuations: List[ActuationRecord] = []

        if self.data_dir is not None:
            self._open()

    def is_available(self):
        return self.data_dir is None or self._log is not None

    @property
    def persistent(self) -> bool:
        return self.data_dir is not None

    # ===== Recovery =====

    def _open(self):
        self.data_dir.mkdir(parents=True, exist_ok=True)
        snapshot_offset = self._load_snapshot()
        log_path = self.data_dir / LOG_NAME
        if log_path.exists():
            with open(log_path, 'r', encoding='utf-8') as f:
                for n, line in enumerate(f):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        event = json.loads(line)
                    except json.JSONDecodeError:
                        # torn final write from a crash
                        logger.warning(f"Ignoring unreadable log entry #{n} in {log_path}")
                        self._offset = n + 1
                        continue
                    self._apply(event, replay_tables=n >= snapshot_offset)
                    self._offset = n + 1
            logger.info(f"Recovered store from {log_path}: {self._offset} events, "
                        f"{len(self.nodes)} nodes, {len(self.users)} users, {len(self.readings)} readings")
        torn = log_path.exists() and log_path.stat().st_size > 0 and not log_path.read_bytes().endswith(b'\n')
        self._log = open(log_path, 'a', encoding='utf-8')
        if torn:
            # new events must not be glued onto the torn fragment
            self._log.write('\n')
            self._log.flush()

    def _load_snapshot(self) -> int:
        path = self.data_dir / SNAPSHOT_NAME
        if not path.exists():
            return 0
        with open(path, 'r', encoding='utf-8') as f:
            snap = json.load(f)
        self.nodes = {n['id']: NodeRecord.from_dict(n) for n in snap.get('nodes', [])}
        self.users = {u['id']: UserRecord.from_dict(u) for u in snap.get('users', [])}
        return int(snap.get('offset', 0))

    def _apply(self, event: Dict, replay_tables: bool = True):
        """Apply one log event; state-table events before the snapshot offset are already in the tables"""
        kind = event['type']
        body = event['body']
        if kind == 'reading':
            self.readings.append(SensorReading.from_dict(body))
        elif kind == 'actuation':
            record = ActuationRecord.from_dict(body)
            self.actuations.append(record)
            if replay_tables and record.node in self.nodes:
                old = self.nodes[record.node]
                self.nodes[record.node] = NodeRecord(old.id, old.kind, old.room, old.capability, record.new)
        elif kind == 'node' and replay_tables:
            node = NodeRecord.from_dict(body)
            self.nodes[node.id] = node
        elif kind == 'user' and replay_tables:
            user = UserRecord.from_dict(body)
            self.users[user.id] = user

    # ===== Writes =====

    def append(self, kind: str, body: Dict):
        """Log then apply; the caller holds the gateway write lock"""
        event = {'type': kind, 'body': body}
        with self._lock:
            if self._log is not None:
                self._log.write(json.dumps(event) + '\n')
                self._log.flush()
                if self.fsync:
                    os.fsync(self._log.fileno())
            self._apply(event)
            self._offset += 1

    def snapshot(self) -> Optional[Path]:
        """Write the state tables with the current log offset"""
        if self.data_dir is None:
            return None
        with self._lock:
            snap = {
                'offset': self._offset,
                'nodes': [n.to_dict() for n in self.nodes.values()],
                'users': [u.to_dict() for u in self.users.values()],
            }
            path = self.data_dir / SNAPSHOT_NAME
            tmp = path.with_suffix('.tmp')
            with open(tmp, 'w', encoding='utf-8') as f:
                json.dump(snap, f)
            os.replace(tmp, path)
        logger.info(f"Store snapshot written at offset {snap['offset']}")
        return path

    def close(self):
        with self._lock:
            if self._log is not None:
                self.snapshot()
                self._log.close()
                self._log = None
