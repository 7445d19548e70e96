import os
import json
import hashlib
import logging
from typing import Any, Dict, List, Optional

# Configure logging
logging.basicConfig(
    level=os.getenv("RDLAB_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

logger = logging.getLogger("rdlab")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class LabError(Exception):
    """Base class for every domain failure raised by the lab"""
    exit_code = EXIT_FAILURE
    kind = "lab-error"


class InvalidArgument(LabError):
    kind = "invalid-argument"


class ConfigError(LabError):
    exit_code = EXIT_USAGE
    kind = "config-error"


class InvariantViolation(LabError):
    kind = "invariant-violation"


class ResourceLimit(LabError):
    kind = "resource-limit"


class TrainingDiverged(LabError):
    kind = "training-diverged"

    def __init__(self, message: str, parameter: Optional[str] = None):
        super().__init__(message)
        self.parameter = parameter


class ModelDiverged(LabError):
    kind = "model-diverged"


class NoFeasibleCodec(LabError):
    kind = "no-feasible-codec"


class NoOverlap(LabError):
    kind = "no-overlap"


def get_logger(name: str) -> logging.Logger:
    """Child logger under the package logger"""
    return logger.getChild(name)


def ensure_directory_exists(directory_path: str) -> None:
    """Ensure that a directory exists, creating it if necessary"""
    if not os.path.exists(directory_path):
        os.makedirs(directory_path, exist_ok=True)
        logger.info(f"Created directory: {directory_path}")


def validate_file_extension(filename: str, allowed_extensions: List[str]) -> bool:
    """Validate if a file has an allowed extension"""
    ext = os.path.splitext(filename)[1].lower()
    return ext in allowed_extensions


def canonical_json(payload: Any) -> str:
    """JSON with sorted keys and compact separators; stable across runs"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def content_hash(payload: Any, length: int = 16) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:length]


def format_float(value: float) -> str:
    """Shortest repr that round-trips; used for every CSV cell"""
    return repr(float(value))


def log_error(error: Exception, context: str = "") -> None:
    """Log an error with optional context"""
    if context:
        logger.error(f"{context}: {str(error)}")
    else:
        logger.error(str(error))


def handle_exception(e: Exception, context: str = "") -> int:
    """Log an exception and map it to a process exit code"""
    log_error(e, context)
    if isinstance(e, LabError):
        return e.exit_code
    return EXIT_FAILURE


def error_payload(e: Exception) -> Dict[str, Any]:
    """Create a standardized error document"""
    return {
        "success": False,
        "error": {
            "kind": getattr(e, "kind", type(e).__name__),
            "message": str(e)
        }
    }
