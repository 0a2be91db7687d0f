#!/usr/bin/env python3
"""
Syndesi command line launcher

Usage: python syndesi.py <subcommand> [options]   (see backend/cli.py)
"""

import os
import sys

# Add backend directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'backend'))

from cli import main  # noqa: E402

if __name__ == '__main__':
    sys.exit(main())
