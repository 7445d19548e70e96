import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

RUNS_DIR = Path(os.getenv("RDLAB_RUNS_DIR", "./runs"))
REPORTS_DIR = Path(os.getenv("RDLAB_REPORTS_DIR", "./reports"))
WORKERS = int(os.getenv("RDLAB_WORKERS", "1"))
LOG_LEVEL = os.getenv("RDLAB_LOG_LEVEL", "INFO").upper()

# Hard limits shared across services
MAX_TABLE_CELLS = 2 ** 24
PROBABILITY_TOLERANCE = 1e-12
IDENTITY_TOLERANCE = 1e-10
