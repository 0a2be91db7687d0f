"""
Gateway and harness settings, read from the environment (.env supported)
"""

import logging
import os

from dotenv import load_dotenv

load_dotenv()

HOST = os.getenv('SYNDESI_HOST', '0.0.0.0')  # reachable from phones on the same network
PORT = int(os.getenv('SYNDESI_PORT', 5000))
DEBUG = os.getenv('SYNDESI_DEBUG', 'False') == 'True'

DATA_DIR = os.getenv('SYNDESI_DATA_DIR', 'storage/syndesi')
CLOCK = os.getenv('SYNDESI_CLOCK', 'real')
LOG_LEVEL = os.getenv('SYNDESI_LOG_LEVEL', 'INFO')

POLL_INTERVAL = float(os.getenv('SYNDESI_POLL_INTERVAL', 60))
GATEWAY_URL = os.getenv('SYNDESI_GATEWAY_URL', f'http://localhost:{PORT}')

# fixtures loaded by the standalone gateway runner
NODES_FILE = os.getenv('SYNDESI_NODES_FILE', '')
PLAN_FILE = os.getenv('SYNDESI_PLAN_FILE', '')

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level: str = None):
    """Configure root logging once for an entry point"""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOG_FORMAT
    )
