"""Named trainable parameters, the Adam update, and on-disk checkpoints."""
import json
import hashlib
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from rdlab.engine.tensor import Tensor, stop_gradient
from rdlab.utils.common import (
    InvalidArgument,
    InvariantViolation,
    TrainingDiverged,
    ensure_directory_exists,
    get_logger,
)

logger = get_logger("engine")

CHECKPOINT_FORMAT = "rdlab-params/1"


class ParamStore:
    """Ordered collection of named leaf tensors plus their optimizer state"""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.state: Dict[str, Dict[str, Any]] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise InvalidArgument(f"Parameter {name!r} already registered")
        tensor = Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def get(self, name: str, frozen: bool = False) -> Tensor:
        tensor = self._params[name]
        return stop_gradient(tensor) if frozen else tensor

    @property
    def num_parameters(self) -> int:
        return int(sum(t.values.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.values))
            for name, t in self._params.items()
        }

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._params.items()}

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        for name, array in values.items():
            if name not in self._params:
                raise InvalidArgument(f"Unknown parameter {name!r}")
            array = np.asarray(array, dtype=np.float64)
            if array.shape != self._params[name].shape:
                raise InvalidArgument(f"Shape mismatch for {name}: {array.shape} vs {self._params[name].shape}")
            self._params[name].values = array.copy()

    def flat_values(self) -> np.ndarray:
        return np.concatenate([t.values.ravel() for t in self._params.values()]) if self._params else np.zeros(0)


def adam_step(params: ParamStore, grads: Optional[Mapping[str, np.ndarray]] = None, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected Adam update applied in place; returns the same store"""
    grads = params.grads() if grads is None else grads
    missing = [name for name in params if name not in grads]
    if missing:
        raise InvalidArgument(f"No gradient for parameters: {missing}")
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDiverged(f"Non-finite gradient for parameter {name}", parameter=name)

    for name, tensor in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != tensor.shape:
            raise InvalidArgument(f"Gradient shape {g.shape} does not match parameter {name} {tensor.shape}")
        state = params.state.get(name)
        if state is None:
            state = {"m": np.zeros_like(tensor.values), "v": np.zeros_like(tensor.values), "t": 0}
            params.state[name] = state

        state["t"] += 1
        t = state["t"]
        state["m"] = beta1 * state["m"] + (1.0 - beta1) * g
        state["v"] = beta2 * state["v"] + (1.0 - beta2) * (g * g)
        m_hat = state["m"] / (1.0 - beta1 ** t)
        v_hat = state["v"] / (1.0 - beta2 ** t)
        tensor.values = tensor.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def _digest(array: np.ndarray) -> Tuple[bytes, str]:
    blob = np.ascontiguousarray(array, dtype="<f8").tobytes()
    return blob, hashlib.sha256(blob).hexdigest()


def save_checkpoint(params: ParamStore, directory, header: Optional[Dict[str, Any]] = None) -> Path:
    """Write manifest.json plus one little-endian float64 blob per tensor"""
    directory = Path(directory)
    ensure_directory_exists(str(directory))
    entries = []
    for index, (name, tensor) in enumerate(params.items()):
        arrays = [("param", tensor.values)]
        state = params.state.get(name)
        if state is not None:
            arrays += [("adam_m", state["m"]), ("adam_v", state["v"])]
        for role, array in arrays:
            blob, digest = _digest(array)
            filename = f"{index:04d}.{role}.bin"
            (directory / filename).write_bytes(blob)
            entries.append({
                "name": name,
                "role": role,
                "shape": list(array.shape),
                "file": filename,
                "sha256": digest,
            })
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "header": header or {},
        "tensors": entries,
        "adam_steps": {name: state["t"] for name, state in params.state.items()},
        "checksum": hashlib.sha256("".join(e["sha256"] for e in entries).encode()).hexdigest(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory) -> Dict[str, Any]:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise InvalidArgument(f"No checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgument(f"Unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(params: ParamStore, directory) -> Dict[str, Any]:
    """Fill `params` (and its Adam state) from disk; returns the header"""
    directory = Path(directory)
    manifest = read_manifest(directory)
    expected = hashlib.sha256("".join(e["sha256"] for e in manifest["tensors"]).encode()).hexdigest()
    if expected != manifest["checksum"]:
        raise InvariantViolation(f"Checkpoint checksum mismatch in {directory}")

    values, moments = {}, {}
    for entry in manifest["tensors"]:
        blob = (directory / entry["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise InvariantViolation(f"Corrupt tensor {entry['name']} ({entry['role']}) in {directory}")
        array = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        if entry["role"] == "param":
            values[entry["name"]] = array
        else:
            moments.setdefault(entry["name"], {})[entry["role"]] = array
    params.load_values(values)
    params.state = {
        name: {"m": m["adam_m"], "v": m["adam_v"], "t": int(manifest["adam_steps"][name])}
        for name, m in moments.items()
    }
    logger.debug(f"Loaded {len(values)} tensors from {directory}")
    return manifest["header"]
