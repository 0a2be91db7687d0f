#!/usr/bin/env python3
"""
Syndesi Gateway - Flask Backend
Node registry, actuation (mediate), sensor-data ingestion and location-driven automation for the WSAN
"""

import logging
import math
from datetime import datetime, timezone
from typing import Optional

from flask import Flask, jsonify, request
from flask_cors import CORS

import config
from engine.floorplan import load_floorplan_file
from services.automation_service import AutomationService, LocationChange
from services.clock import make_clock
from services.errors import SyndesiError, ValidationError
from services.gateway_client import LocalGatewayClient
from services.gateway_service import GatewayService, load_node_fixture
from services.polling_service import PollingService
from services.records import NodeRecord, SensorReading, UserRecord
from services.store_service import StoreService
from simulation.environment import RoomEnvironment

logger = logging.getLogger(__name__)


def _error(e: SyndesiError, where: str):
    logger.error(f"Error in {where}: [{e.code}] {e}")
    return jsonify(e.to_dict()), e.status


def _internal(e: Exception, where: str):
    logger.error(f"Error in {where}: {e}")
    return jsonify({'ok': False, 'error': 'internal', 'message': str(e)}), 500


def _float_arg(name: str, default: float) -> float:
    raw = request.args.get(name)
    if raw is None or raw == '':
        return default
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(f"query parameter '{name}' must be a number, got '{raw}'")


def create_app(gateway: GatewayService = None, automation: AutomationService = None) -> Flask:
    """Flask app serving one gateway instance and its automation service"""
    if gateway is None:
        gateway = GatewayService(StoreService(config.DATA_DIR), make_clock(config.CLOCK))
    if automation is None:
        automation = attach_automation(gateway)

    app = Flask(__name__)
    CORS(app)  # phones on the same network post readings directly
    app.config['GATEWAY'] = gateway
    app.config['CLOCK'] = gateway.clock
    app.config['AUTOMATION'] = automation

    @app.route('/health', methods=['GET'])
    def health_check():
        """Health check endpoint"""
        body = {'ok': True, 'service': 'Syndesi Gateway', 'version': '1.0.0',
                'timestamp': datetime.now(timezone.utc).isoformat()}
        body.update(gateway.health())
        return jsonify(body)

    @app.route('/nodes', methods=['GET'])
    def list_nodes():
        """Registered WSAN nodes, optionally filtered by ?room="""
        try:
            nodes = gateway.list_nodes(request.args.get('room'))
            return jsonify({'ok': True, 'nodes': [n.to_dict() for n in nodes]})
        except SyndesiError as e:
            return _error(e, '/nodes')
        except Exception as e:
            return _internal(e, '/nodes')

    @app.route('/nodes', methods=['POST'])
    def register_node():
        """
        Register a node

        Request (JSON):
        {"id": "L1", "kind": "actuator", "room": "office-1", "capability": "light"}
        """
        try:
            node = NodeRecord.from_dict(request.get_json(silent=True))
            return jsonify(gateway.register_node(node)), 201
        except SyndesiError as e:
            return _error(e, 'POST /nodes')
        except Exception as e:
            return _internal(e, 'POST /nodes')

    @app.route('/mediate', methods=['GET', 'POST'])
    def mediate():
        """
        Set an actuator status: /mediate?node=<id>&status=<on|off|up|down>

        POST accepts the same fields as a JSON body.
        """
        try:
            params = dict(request.args)
            if request.method == 'POST':
                params.update(request.get_json(silent=True) or {})
            node, status = params.get('node'), params.get('status')
            if not node or not status:
                raise ValidationError("mediate needs 'node' and 'status'")
            return jsonify(gateway.mediate(str(node), str(status), str(params.get('cause', 'manual'))))
        except SyndesiError as e:
            return _error(e, '/mediate')
        except Exception as e:
            return _internal(e, '/mediate')

    @app.route('/data', methods=['POST'])
    def ingest():
        """
        Sensor data upload (motes and phones)

        Body is one SensorReading or a JSON array of them (batched upload).
        """
        try:
            payload = request.get_json(silent=True)
            if payload is None:
                raise ValidationError("body must be JSON")
            batch = payload if isinstance(payload, list) else [payload]
            readings = [SensorReading.from_dict(r) for r in batch]
            for r in readings:
                gateway.ingest_reading(r)
            return jsonify({'ok': True, 'accepted': len(readings)})
        except SyndesiError as e:
            return _error(e, '/data')
        except Exception as e:
            return _internal(e, '/data')

    @app.route('/location', methods=['POST'])
    def report_location():
        """
        Room-level location from a phone; drives occupancy automation

        Request (JSON):
        {"user": "user-1", "room": "office-2", "t": 120.0}   (t defaults to the gateway clock)
        """
        try:
            body = request.get_json(silent=True)
            if not isinstance(body, dict) or not body.get('user') or not body.get('room'):
                raise ValidationError("location needs 'user' and 'room'")
            try:
                t = float(body['t']) if 't' in body else gateway.clock.now()
            except (TypeError, ValueError):
                raise ValidationError(f"location 't' must be a number, got {body['t']!r}")
            event = automation.handle_location(LocationChange(t, str(body['user']), str(body['room'])))
            return jsonify({'ok': True, 'user': event.user, 'room': str(body['room']),
                            'actions': event.to_dict()['actions']})
        except SyndesiError as e:
            return _error(e, '/location')
        except Exception as e:
            return _internal(e, '/location')

    @app.route('/readings', methods=['GET'])
    def query_readings():
        """Readings filtered by ?room=&metric=&from=&to= in ascending time"""
        try:
            readings = gateway.query_readings(
                room=request.args.get('room'),
                metric=request.args.get('metric'),
                t_from=_float_arg('from', 0.0),
                t_to=_float_arg('to', math.inf),
            )
            return jsonify({'ok': True, 'readings': [r.to_dict() for r in readings]})
        except SyndesiError as e:
            return _error(e, '/readings')
        except Exception as e:
            return _internal(e, '/readings')

    @app.route('/users', methods=['POST'])
    def register_user():
        try:
            user = UserRecord.from_dict(request.get_json(silent=True))
            return jsonify(gateway.register_user(user)), 201
        except SyndesiError as e:
            return _error(e, '/users')
        except Exception as e:
            return _internal(e, '/users')

    @app.route('/users/<user_id>', methods=['GET'])
    def get_user(user_id):
        try:
            return jsonify({'ok': True, 'user': gateway.get_user(user_id).to_dict()})
        except SyndesiError as e:
            return _error(e, f'/users/{user_id}')
        except Exception as e:
            return _internal(e, f'/users/{user_id}')

    @app.route('/actuations', methods=['GET'])
    def actuations():
        """Actuation record log, optionally for one ?node="""
        try:
            records = gateway.actuations(request.args.get('node'))
            return jsonify({'ok': True, 'actuations': [r.to_dict() for r in records]})
        except SyndesiError as e:
            return _error(e, '/actuations')
        except Exception as e:
            return _internal(e, '/actuations')

    return app


# ===== Service wiring =====

def attach_automation(gateway: GatewayService) -> AutomationService:
    """Automation service subscribed to every reading the gateway ingests"""
    rooms = gateway.plan.room_ids if gateway.plan is not None else None
    journal = str(gateway.store.data_dir / 'automation.jsonl') if gateway.store.data_dir else None
    automation = AutomationService(LocalGatewayClient(gateway), rooms, journal)
    gateway.add_reading_listener(automation.handle_reading)
    return automation


def polling_for(gateway: GatewayService, automation: AutomationService,
                interval: Optional[float] = None) -> PollingService:
    """Polling over the simulated room environment behind the gateway's sensor nodes"""
    client = LocalGatewayClient(gateway)
    if gateway.plan is not None:
        rooms = gateway.plan.room_ids
    else:
        rooms = sorted({n.room for n in gateway.list_nodes()})
    env = RoomEnvironment(rooms)
    sampler = env.sampler(client, occupancy=lambda: automation.occupancy)
    return PollingService(client, gateway.clock, sampler, interval or config.POLL_INTERVAL)


def start_polling(gateway: GatewayService, automation: AutomationService,
                  interval: Optional[float] = None) -> Optional[PollingService]:
    """Background polling on a real clock; a virtual clock is driven by its owner instead"""
    if gateway.clock.mode != 'real':
        logger.info("⏱️  Virtual clock: background polling not started")
        return None
    polling = polling_for(gateway, automation, interval)
    polling.start()
    return polling


def serve(gateway: GatewayService, host: str = None, port: int = None, debug: bool = None,
          poll_interval: Optional[float] = None):
    automation = attach_automation(gateway)
    polling = start_polling(gateway, automation, poll_interval)
    app = create_app(gateway, automation)
    host = host or config.HOST
    port = port or config.PORT
    logger.info("🚀 Starting Syndesi Gateway")
    logger.info(f"🗄️  Store: {gateway.store.data_dir or 'memory'} ({gateway.health()['nodes']} nodes)")
    logger.info(f"⏱️  Clock: {gateway.clock.mode}")
    logger.info(f"🌐 Server starting on http://{host}:{port}")
    logger.info(f"📱 Phones can connect at: http://YOUR_IP:{port}")
    try:
        app.run(host=host, port=port, debug=config.DEBUG if debug is None else debug)
    finally:
        if polling is not None:
            polling.stop()
        automation.close()
        gateway.close()


def gateway_from_config() -> GatewayService:
    """Gateway built from SYNDESI_* settings, with the optional plan and node fixtures"""
    plan = load_floorplan_file(config.PLAN_FILE) if config.PLAN_FILE else None
    gateway = GatewayService(StoreService(config.DATA_DIR), make_clock(config.CLOCK), plan)
    if config.NODES_FILE:
        with open(config.NODES_FILE, 'r', encoding='utf-8') as f:
            gateway.load_nodes(load_node_fixture(f.read()))
    return gateway


def create_gateway_app() -> Flask:
    """gunicorn entry point: gunicorn 'app:create_gateway_app()'"""
    config.configure_logging()
    gateway = gateway_from_config()
    automation = attach_automation(gateway)
    start_polling(gateway, automation)
    return create_app(gateway, automation)


if __name__ == '__main__':
    config.configure_logging()
    serve(gateway_from_config())
