#!/usr/bin/env python3
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Logging
LOG_LEVEL = os.getenv('BGLDOWN_LOG_LEVEL', 'INFO').upper()
LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"

# Worker threads for per-season fitting and per-month prediction
DEFAULT_THREADS = int(os.getenv('BGLDOWN_THREADS', '1'))

# Seed used when neither the config nor --seed provides one
DEFAULT_SEED = int(os.getenv('BGLDOWN_SEED', '0'))

# API settings
API_HOST = os.getenv('API_HOST', "127.0.0.1")
API_PORT = int(os.getenv('API_PORT', '8000'))

# Default season map (Southern Hemisphere)
DEFAULT_SEASON_MAP = {
    "summer": [12, 1, 2],
    "autumn": [3, 4, 5],
    "winter": [6, 7, 8],
    "spring": [9, 10, 11],
}
SEASON_ORDER = ["summer", "autumn", "winter", "spring"]
