"""
Gateway clients - one interface for the in-process service and the HTTP API

The automation loop and the experiment harness talk to the gateway only through
these clients, so actuation checks stay black-box.
"""

import logging
from typing import Dict, List, Optional

import requests

from services import errors
from services.errors import GatewayUnavailableError, SyndesiError
from services.records import NodeRecord, SensorReading, UserRecord

logger = logging.getLogger(__name__)

_ERRORS_BY_CODE = {
    cls.code: cls for cls in vars(errors).values()
    if isinstance(cls, type) and issubclass(cls, SyndesiError)
}


class LocalGatewayClient:
    """Calls a GatewayService in the same process"""

    def __init__(self, gateway):
        self.gateway = gateway

    def is_available(self):
        return self.gateway.is_available()

    def list_nodes(self, room: Optional[str] = None) -> List[NodeRecord]:
        return self.gateway.list_nodes(room)

    def mediate(self, node: str, status: str, cause: str = 'manual') -> Dict:
        return self.gateway.mediate(node, status, cause)

    def get_user(self, user_id: str) -> UserRecord:
        return self.gateway.get_user(user_id)

    def ingest_reading(self, reading: SensorReading) -> Dict:
        return self.gateway.ingest_reading(reading)

    def health(self) -> Dict:
        return self.gateway.health()


class HttpGatewayClient:
    """Talks to a gateway over its JSON HTTP API"""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip('/')
        self.timeout = timeout
        self.session = requests.Session()

    def _call(self, method: str, path: str, **kwargs) -> Dict:
        url = f"{self.base_url}{path}"
        try:
            response = self.session.request(method, url, timeout=self.timeout, **kwargs)
        except requests.exceptions.RequestException as e:
            logger.error(f"Gateway request {method} {path} failed: {e}")
            raise GatewayUnavailableError(f"gateway at {self.base_url} is unreachable: {e}")

        try:
            body = response.json()
        except ValueError:
            raise GatewayUnavailableError(f"gateway answered {response.status_code} without JSON")
        if not body.get('ok', False):
            cls = _ERRORS_BY_CODE.get(body.get('error'), SyndesiError)
            raise cls(body.get('message', ''), **body.get('details', {}))
        return body

    def is_available(self):
        try:
            return self._call('GET', '/health').get('status') == 'healthy'
        except SyndesiError:
            return False

    def list_nodes(self, room: Optional[str] = None) -> List[NodeRecord]:
        params = {'room': room} if room is not None else None
        body = self._call('GET', '/nodes', params=params)
        return [NodeRecord.from_dict(n) for n in body['nodes']]

    def mediate(self, node: str, status: str, cause: str = 'manual') -> Dict:
        return self._call('GET', '/mediate', params={'node': node, 'status': status, 'cause': cause})

    def get_user(self, user_id: str) -> UserRecord:
        return UserRecord.from_dict(self._call('GET', f'/users/{user_id}')['user'])

    def ingest_reading(self, reading: SensorReading) -> Dict:
        return self._call('POST', '/data', json=reading.to_dict())

    def health(self) -> Dict:
        return self._call('GET', '/health')
