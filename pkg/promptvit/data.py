"""
Synthetic datasets, Gaussian-noise corruption, and a raw on-disk format.

Every generator is a pure function of its parameters and seed. Images are float64
[H, W, C] arrays in [0, 1].
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from promptvit.errors import DataError, DataGenerationError
from promptvit.logger import logger
from promptvit.schemas import DatasetSpec, ModelConfig, NoiseModel, NoiseSpec, Task

BACKGROUND = (0.0, 0.25)
FOREGROUND = (0.8, 1.0)
MAX_COUNT_OBJECTS = 6
SQUARE = 2  # side of a counted object, pixels
PLACEMENT_TRIES = 200
SAMPLE_RESTARTS = 20
MANIFEST_NAME = "manifest.json"


@dataclass
class Sample:
    image: np.ndarray  # [H, W, C]
    label: int


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ([B, H, W, C] images, [B] int64 labels)."""
    if not samples:
        return np.zeros((0, 0, 0, 0)), np.zeros(0, dtype=np.int64)
    images = np.stack([s.image for s in samples]).astype(np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels


def derive_seed(base: int, index: int, stream: int = 0) -> np.random.SeedSequence:
    """Per-sample seed from (base, stream, index); subsetting a dataset does not reshuffle noise."""
    return np.random.SeedSequence([base, stream, index])


def _balanced_labels(n: int, num_labels: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_labels)


def _to_channels(plane: np.ndarray, channels: int) -> np.ndarray:
    return np.repeat(plane[:, :, None], channels, axis=2)


# ========== Pattern task ==========

def glyph(label: int, size: int) -> np.ndarray:
    """Boolean size x size mask of the class glyph."""
    mask = np.zeros((size, size), dtype=bool)
    mid = size // 2
    diagonal = np.eye(size, dtype=bool)
    anti = np.fliplr(diagonal)
    if label == 0:
        mask[mid, :] = True  # horizontal bar
    elif label == 1:
        mask[:, mid] = True  # vertical bar
    elif label == 2:
        mask = diagonal
    elif label == 3:
        mask = anti
    elif label == 4:
        mask[:, :] = True  # filled square
    elif label == 5:
        mask[[0, -1], :] = True  # hollow square
        mask[:, [0, -1]] = True
    elif label == 6:
        mask[mid, :] = True  # plus
        mask[:, mid] = True
    elif label == 7:
        mask = diagonal | anti
    else:
        raise DataGenerationError(f"no glyph for class {label}")
    return mask


def gen_pattern_task(
    n: int,
    num_classes: int,
    seed: int | np.random.SeedSequence,
    image_size: tuple[int, int] = (16, 16),
    channels: int = 1,
    patch_size: int = 4,
) -> list[Sample]:
    """
    Class c draws glyph c, one patch in size, at a random patch-aligned cell of a dim noisy
    background. Class counts differ by at most one.
    """
    if not 2 <= num_classes <= 8:
        raise DataGenerationError(f"pattern task supports 2..8 classes, got {num_classes}")
    if patch_size < 3:
        raise DataGenerationError(f"glyphs need a patch of at least 3 pixels, got {patch_size}")
    height, width = image_size
    rows, cols = height // patch_size, width // patch_size
    masks = [glyph(c, patch_size) for c in range(num_classes)]

    rng = np.random.default_rng(seed)
    samples = []
    for label in _balanced_labels(n, num_classes, rng):
        plane = rng.uniform(*BACKGROUND, size=(height, width))
        r = rng.integers(rows) * patch_size
        c = rng.integers(cols) * patch_size
        cell = plane[r:r + patch_size, c:c + patch_size]
        cell[masks[label]] = rng.uniform(*FOREGROUND)
        samples.append(Sample(image=_to_channels(plane, channels), label=int(label)))
    return samples


# ========== Count task ==========

def _place_squares(count: int, height: int, width: int, rng: np.random.Generator) -> Optional[list[tuple[int, int]]]:
    placed: list[tuple[int, int]] = []
    for _ in range(count):
        for _ in range(PLACEMENT_TRIES):
            r = int(rng.integers(height - SQUARE + 1))
            c = int(rng.integers(width - SQUARE + 1))
            # at least one pixel of background between any two squares, diagonals included
            if all(abs(r - pr) > SQUARE or abs(c - pc) > SQUARE for pr, pc in placed):
                placed.append((r, c))
                break
        else:
            return None
    return placed


def gen_count_task(
    n: int,
    max_objects: int,
    seed: int | np.random.SeedSequence,
    image_size: tuple[int, int] = (16, 16),
    channels: int = 1,
) -> list[Sample]:
    """Label = number of separated 2x2 bright squares, balanced over 0..max_objects."""
    if not 1 <= max_objects <= MAX_COUNT_OBJECTS:
        raise DataGenerationError(f"count task supports 1..{MAX_COUNT_OBJECTS} objects, got {max_objects}")
    height, width = image_size
    rng = np.random.default_rng(seed)
    samples = []
    for index, label in enumerate(_balanced_labels(n, max_objects + 1, rng)):
        for _ in range(SAMPLE_RESTARTS):
            positions = _place_squares(int(label), height, width, rng)
            if positions is not None:
                break
        else:
            raise DataGenerationError(
                f"could not place {label} objects in a {height}x{width} image", index=index
            )
        plane = rng.uniform(*BACKGROUND, size=(height, width))
        for r, c in positions:
            plane[r:r + SQUARE, c:c + SQUARE] = rng.uniform(*FOREGROUND)
        samples.append(Sample(image=_to_channels(plane, channels), label=int(label)))
    return samples


# ========== Corruption ==========

def corrupt(sample: Sample, spec: NoiseSpec, index: int = 0, stream: int = 0) -> Sample:
    """
    blend:    clip((1 - rho) * x + rho * g, 0, 1)
    additive: clip(x + rho * (g - 0.5), 0, 1)

    with g ~ N(0.5, sigma^2) per pixel, seeded from (spec.seed, stream, index).
    """
    if spec.rho == 0.0:
        return Sample(image=sample.image.copy(), label=sample.label)
    rng = np.random.default_rng(derive_seed(spec.seed, index, stream))
    g = rng.normal(0.5, spec.sigma, size=sample.image.shape)
    if spec.model == NoiseModel.BLEND:
        noisy = (1.0 - spec.rho) * sample.image + spec.rho * g
    else:
        noisy = sample.image + spec.rho * (g - 0.5)
    return Sample(image=np.clip(noisy, 0.0, 1.0), label=sample.label)


def corrupt_dataset(samples: Sequence[Sample], spec: NoiseSpec, stream: int = 0) -> list[Sample]:
    return [corrupt(s, spec, index=i, stream=stream) for i, s in enumerate(samples)]


# ========== Raw format ==========

def save_raw_dataset(samples: Sequence[Sample], directory: str | Path) -> Path:
    """One headerless little-endian f64 buffer per sample, listed in manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        name = f"{i:06d}.f64"
        (directory / name).write_bytes(np.ascontiguousarray(sample.image, dtype="<f8").tobytes())
        entries.append({"file": name, "label": int(sample.label)})
    manifest = directory / MANIFEST_NAME
    manifest.write_text(json.dumps(entries, indent=2))
    logger.info("dataset_saved", path=str(manifest), samples=len(entries))
    return manifest


def load_raw_dataset(
    manifest_path: str | Path,
    image_shape: tuple[int, int, int] = (16, 16, 1),
    num_classes: Optional[int] = None,
) -> list[Sample]:
    manifest_path = Path(manifest_path)
    try:
        entries = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {manifest_path}") from exc

    expected_bytes = int(np.prod(image_shape)) * 8
    samples = []
    if not isinstance(entries, list):
        raise DataError(f"manifest must be a list of entries: {manifest_path}")
    for position, entry in enumerate(entries):
        try:
            name, label = str(entry["file"]), int(entry["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(
                f"malformed entry {position} in {manifest_path}: {exc!r}", path=str(manifest_path)
            ) from exc
        path = manifest_path.parent / name
        if not path.is_file():
            raise DataError(f"missing image file {name}", path=str(path))
        raw = path.read_bytes()
        if len(raw) != expected_bytes:
            raise DataError(
                f"size mismatch in {name}: {len(raw)} bytes, expected {expected_bytes}",
                path=str(path),
            )
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise DataError(f"label {label} of {name} outside [0, {num_classes})")
        image = np.frombuffer(raw, dtype="<f8").reshape(image_shape).astype(np.float64)
        samples.append(Sample(image=image, label=label))
    return samples


def split(samples: Sequence[Sample], n_train: int) -> tuple[list[Sample], list[Sample]]:
    """First n_train samples train, the rest evaluate."""
    return list(samples[:n_train]), list(samples[n_train:])


def build_datasets(spec: DatasetSpec, model: ModelConfig) -> tuple[list[Sample], list[Sample]]:
    """(train, eval) for an experiment: a raw dataset when a manifest is given, else generated."""
    if spec.manifest is not None:
        samples = load_raw_dataset(spec.manifest, (*model.image_size, model.channels), model.num_classes)
        return split(samples, spec.n_train)

    def generate(n: int, stream: int) -> list[Sample]:
        seed = np.random.SeedSequence([spec.seed, stream])
        if spec.task == Task.PATTERN:
            return gen_pattern_task(n, spec.num_classes, seed, model.image_size, model.channels, model.patch_size)
        return gen_count_task(n, spec.max_objects, seed, model.image_size, model.channels)

    return generate(spec.n_train, 0), generate(spec.n_eval, 1)
