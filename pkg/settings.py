# settings.py

import os
import logging

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv(override=True)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

# Read runtime settings
WORKDIR   = os.getenv("DPR_WORKDIR", os.path.join("runs", "default"))
LOG_LEVEL = os.getenv("DPR_LOG_LEVEL", "INFO").upper()
SEED      = int(os.getenv("DPR_SEED", "7"))
HOST      = os.getenv("DPR_HOST", "0.0.0.0")
PORT      = int(os.getenv("DPR_PORT", "8080"))


def configure_logging(level: str | None = None) -> None:
    """Configure the root logger once for CLI and app entry points."""
    logging.basicConfig(level=(level or LOG_LEVEL), format=LOG_FORMAT)
