"""
Environment configuration for elastoscan.
Values come from the process environment, optionally seeded by a .env file.
"""

import logging
import os

from dotenv import load_dotenv

load_dotenv()

OUTPUT_DIR = os.getenv('ELASTOSCAN_OUTPUT_DIR', './out')
DB_PATH = os.getenv('ELASTOSCAN_DB_PATH', './data/elastoscan.db')
WORKERS = int(os.getenv('ELASTOSCAN_WORKERS', '4'))
LOG_LEVEL = os.getenv('ELASTOSCAN_LOG_LEVEL', 'INFO')
RESONANCE_THRESHOLD = float(os.getenv('ELASTOSCAN_RESONANCE_THRESHOLD', '1e12'))

# Measurement bands in Hz where the plate is excited without resonance
ANALYSIS_BANDS_HZ = ((20.0, 27.0), (40.0, 45.0), (55.0, 57.0))

_configured = False


def configure_logging(level: str = None):
    """Install the root handler once; later calls only adjust the level."""
    global _configured
    level = (level or LOG_LEVEL).upper()
    if not _configured:
        logging.basicConfig(
            level=level,
            format='%(asctime)s %(levelname)s %(name)s: %(message)s'
        )
        _configured = True
    logging.getLogger().setLevel(level)


def in_analysis_band(frequency_hz: float) -> bool:
    """True when the frequency lies in one of the measurement bands."""
    return any(lo <= frequency_hz <= hi for lo, hi in ANALYSIS_BANDS_HZ)


def describe_bands() -> str:
    return ', '.join(f"{lo:g}-{hi:g} Hz" for lo, hi in ANALYSIS_BANDS_HZ)
