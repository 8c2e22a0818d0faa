#!/usr/bin/env python3
"""
Conformer search runner

Usage: python run.py <command> [options]; see `python run.py --help`.
"""

import sys

from conformer_nas.main import main

if __name__ == "__main__":
    sys.exit(main())
