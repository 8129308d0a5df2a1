#!/usr/bin/env python3
"""
MVLT scene-text recognition toolkit

Main executable script.

Usage:
    python mvlt_str.py gen-data --out data/train --n 256 --seed 1
    python mvlt_str.py pretrain --data data/train --run-dir runs/pre
    python mvlt_str.py finetune --data data/train --init runs/pre/pretrain_final.ckpt
    python mvlt_str.py eval --checkpoint runs/finetune/finetune_final.ckpt --data data/test
    python mvlt_str.py gradcheck

Environment variables (.env file supported):
    MVLT_CONFIG     - JSON run config file
    MVLT_SEED       - Run seed
    MVLT_LOG_LEVEL  - Logging level
    MVLT_LOG_DIR    - Directory for run log files (default: ./logs)
"""

import sys
import os

# Add the src directory to Python path so we can import the package
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from mvlt_str.main import main

if __name__ == "__main__":
    sys.exit(main())
