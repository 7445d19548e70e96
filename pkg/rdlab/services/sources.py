"""Vector sources: synthetic families, ingested data, and domain shifts."""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from rdlab.schemas.training import GaussComponent, ShiftConfig, SourceConfig
from rdlab.utils.common import InvalidArgument, get_logger, validate_file_extension

logger = get_logger("sources")


@dataclass
class SourceBatch:
    """A batch of N-dimensional real vectors plus the domain it came from"""
    values: np.ndarray
    domain: str = "base"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidArgument(f"SourceBatch needs a (batch, N) array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("SourceBatch entries must be finite")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def slice(self, start: int, stop: int) -> "SourceBatch":
        return SourceBatch(self.values[start:stop], self.domain)


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix"""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


class VectorSource:
    """Base class for samplers of N-dimensional vectors"""

    def __init__(self, dim: int, domain: str = "base"):
        self.dim = dim
        self.domain = domain

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError("Subclasses must implement draw")

    def sample(self, count: int, rng: np.random.Generator) -> SourceBatch:
        if count < 1:
            raise InvalidArgument("sample count must be >= 1")
        return SourceBatch(self.draw(count, rng), self.domain)

    @property
    def center(self) -> np.ndarray:
        return np.zeros(self.dim)


class GaussMixSource(VectorSource):
    def __init__(self, config: SourceConfig):
        super().__init__(config.dim)
        components = config.components or default_components(config.dim, config.seed)
        weights = np.array([c.weight for c in components], dtype=np.float64)
        self.weights = weights / weights.sum()
        self.means = np.array([c.mean for c in components], dtype=np.float64)
        self.scales = np.array([c.scales for c in components], dtype=np.float64)
        self.rotations = [
            random_rotation(config.dim, np.random.default_rng(c.rotation_seed))
            if c.rotation_seed is not None else np.eye(config.dim)
            for c in components
        ]

    @property
    def center(self) -> np.ndarray:
        return self.weights @ self.means

    def draw_components(self, count: int, rng: np.random.Generator, weights: Optional[np.ndarray] = None) -> np.ndarray:
        weights = self.weights if weights is None else weights
        labels = rng.choice(len(weights), size=count, p=weights)
        z = rng.standard_normal((count, self.dim))
        out = np.empty((count, self.dim))
        for k in range(len(weights)):
            rows = labels == k
            out[rows] = self.means[k] + (z[rows] * self.scales[k]) @ self.rotations[k].T
        return out

    def draw(self, count, rng):
        return self.draw_components(count, rng)


def default_components(dim: int, seed: int, count: int = 3) -> List[GaussComponent]:
    """A low-intrinsic-dimension mixture: decaying principal scales under random rotations"""
    rng = np.random.default_rng(seed)
    decay = 1.5 * 0.55 ** np.arange(dim)
    components = []
    for k in range(count):
        components.append(GaussComponent(
            weight=float(rng.uniform(0.5, 1.5)),
            mean=(rng.standard_normal(dim) * 1.5).tolist(),
            scales=(decay * rng.uniform(0.7, 1.3, size=dim)).tolist(),
            rotation_seed=int(seed * 1000 + k),
        ))
    return components


class BananaSource(VectorSource):
    """Curved 2-D density embedded in N dimensions with small isotropic noise"""

    def __init__(self, config: SourceConfig):
        super().__init__(config.dim)
        self.rotation = random_rotation(config.dim, np.random.default_rng(config.seed))

    def draw(self, count, rng):
        z = np.zeros((count, self.dim))
        t = rng.standard_normal(count) * 1.5
        z[:, 0] = t
        if self.dim > 1:
            z[:, 1] = 0.4 * t * t - 0.9 + rng.standard_normal(count) * 0.3
        if self.dim > 2:
            z[:, 2:] = rng.standard_normal((count, self.dim - 2)) * 0.05
        return z @ self.rotation.T


def synthetic_field(seed: int, size: int = 128) -> np.ndarray:
    """Smooth 8-bit-like image: a few sinusoids plus Gaussian blobs, values in [0, 1]"""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(4):
        fx, fy = rng.uniform(0.5, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    for _ in range(6):
        cx, cy = rng.uniform(0, 1, size=2)
        width = rng.uniform(0.03, 0.15)
        field += rng.uniform(-1.5, 1.5) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width ** 2))
    field -= field.min()
    return field / max(field.max(), 1e-12)


def load_pgm(path: str) -> np.ndarray:
    """8-bit grayscale image as floats in [0, 1]"""
    if not validate_file_extension(path, [".pgm", ".png"]):
        raise InvalidArgument(f"Unsupported image file: {path}")
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("L"), dtype=np.float64) / 255.0
    except OSError as e:
        raise InvalidArgument(f"Error reading image {path}: {str(e)}") from e


class PatchSource(VectorSource):
    """Random patches of an image, standardized by the image's statistics"""

    def __init__(self, config: SourceConfig):
        super().__init__(config.dim)
        self.patch_shape = tuple(config.patch_shape) if config.patch_shape else _default_patch_shape(config.dim)
        image = load_pgm(config.path) if config.path else synthetic_field(config.seed)
        ph, pw = self.patch_shape
        if image.shape[0] < ph or image.shape[1] < pw:
            raise InvalidArgument(f"Image {image.shape} smaller than patch {self.patch_shape}")
        self.image = (image - image.mean()) / max(image.std(), 1e-12)

    def draw(self, count, rng):
        ph, pw = self.patch_shape
        rows = rng.integers(0, self.image.shape[0] - ph + 1, size=count)
        cols = rng.integers(0, self.image.shape[1] - pw + 1, size=count)
        offsets_r, offsets_c = np.mgrid[0:ph, 0:pw]
        patches = self.image[rows[:, None, None] + offsets_r, cols[:, None, None] + offsets_c]
        return patches.reshape(count, ph * pw)


def _default_patch_shape(dim: int):
    height = int(np.floor(np.sqrt(dim)))
    while dim % height:
        height -= 1
    return height, dim // height


def load_raw_vectors(path: str, dim: int) -> np.ndarray:
    """Headerless little-endian float64 vectors"""
    data = np.fromfile(Path(path), dtype="<f8")
    if data.size == 0 or data.size % dim:
        raise InvalidArgument(f"{path} holds {data.size} values, not a multiple of dimension {dim}")
    vectors = data.reshape(-1, dim).astype(np.float64)
    if not np.all(np.isfinite(vectors)):
        raise InvalidArgument(f"{path} contains non-finite values")
    return vectors


class RawSource(VectorSource):
    """Resamples rows of an ingested float64 file"""

    def __init__(self, config: SourceConfig):
        super().__init__(config.dim)
        self.vectors = load_raw_vectors(config.path, config.dim)

    @property
    def center(self):
        return self.vectors.mean(axis=0)

    def draw(self, count, rng):
        return self.vectors[rng.integers(0, len(self.vectors), size=count)]


class ShiftedSource(VectorSource):
    """Out-of-domain variant of a base source"""

    def __init__(self, base: VectorSource, shift: ShiftConfig):
        super().__init__(base.dim, domain=shift.kind)
        self.base = base
        self.shift = shift
        shift_rng = np.random.default_rng(shift.seed)
        direction = shift_rng.standard_normal(base.dim)
        self.direction = direction / np.linalg.norm(direction)
        self.rotation = _plane_rotation(base.dim, shift.magnitude, shift_rng)
        if shift.kind == "heavy_tail" and shift.magnitude <= 0:
            raise InvalidArgument("heavy_tail needs positive degrees of freedom")

    def draw(self, count, rng):
        kind, magnitude = self.shift.kind, self.shift.magnitude
        if kind == "identity":
            return self.base.draw(count, rng)
        if kind == "mean_shift":
            return self.base.draw(count, rng) + magnitude * self.direction
        center = self.base.center
        if kind == "rotate":
            return (self.base.draw(count, rng) - center) @ self.rotation.T + center
        if kind == "heavy_tail":
            x = self.base.draw(count, rng)
            scale = np.sqrt(magnitude / rng.chisquare(magnitude, size=(count, 1)))
            return center + (x - center) * scale
        if kind == "reweight":
            if isinstance(self.base, GaussMixSource):
                tilt = np.exp(magnitude * np.linspace(-1.0, 1.0, len(self.base.weights)))
                weights = self.base.weights * tilt
                return self.base.draw_components(count, rng, weights / weights.sum())
            pool = self.base.draw(4 * count, rng)
            logits = magnitude * ((pool - center) @ self.direction)
            probs = np.exp(logits - logits.max())
            return pool[rng.choice(len(pool), size=count, p=probs / probs.sum())]
        raise InvalidArgument(f"Unknown shift kind: {kind}")


def _plane_rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by `angle` radians within a random 2-D plane"""
    if dim < 2:
        return np.eye(dim)
    basis = random_rotation(dim, rng)[:, :2]
    c, s = np.cos(angle), np.sin(angle)
    return np.eye(dim) + basis @ np.array([[c - 1, -s], [s, c - 1]]) @ basis.T


def create_source(config: SourceConfig, shift: Optional[ShiftConfig] = None) -> VectorSource:
    """Factory function to create the configured source"""
    sources = {
        "gauss_mix": GaussMixSource,
        "banana": BananaSource,
        "patches": PatchSource,
        "raw": RawSource,
    }
    source = sources[config.kind](config)
    logger.debug(f"Created {config.kind} source with dim={config.dim}")
    return ShiftedSource(source, shift) if shift is not None else source


def build_dataset(config: SourceConfig, validation_fraction: float = 0.1):
    """Fixed dataset from the source seed, split train/validation"""
    samples = create_source(config).sample(config.num_samples, np.random.default_rng(config.seed))
    cut = int(round(len(samples) * (1.0 - validation_fraction)))
    return samples.slice(0, cut), samples.slice(cut, len(samples))
