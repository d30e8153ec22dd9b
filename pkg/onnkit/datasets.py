"""Dataset generation, file formats and ingestion"""
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field

from .errors import DatasetError
from .evalmetrics import denormalize, normalize, snr
from .logger import setup_logger
from .models import TaskKind

logger = setup_logger("onnkit.datasets")

Array = NDArray[np.float64]
PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"
INPUTS_DIR = "inputs"
TARGETS_DIR = "targets"
RAW_HEADER = np.dtype("<u4")
RAW_DATA = np.dtype("<f8")
RESIZE_METHOD = "bilinear"
IMAGE_SUFFIXES = {".pgm", ".ppm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class DatasetPair(BaseModel):
    """One normalised (input, target) item"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str = Field(..., description="Item identifier, also the file stem")
    input: Array = Field(..., description="Input maps (C, M, N) in [-1, 1]")
    target: Array = Field(..., description="Target maps (C_out, M, N); masks in {-1, 1}")


class DatasetManifest(BaseModel):
    """Metadata written next to every dataset"""
    task: TaskKind = Field(..., description="Experiment family")
    source: str = Field("generated", description="generated or external")
    seed: Optional[int] = Field(None, description="Generator seed")
    size: int = Field(..., description="Side of every map")
    ids: List[str] = Field(default_factory=list, description="Item ids in order")
    normalization: str = Field("[0,255] -> [-1,1]", description="Pixel scaling")
    resize: Optional[str] = Field(None, description="Resampling used on external images")


# =========================================================================
# File formats
# =========================================================================

def write_raw(path: PathLike, data) -> None:
    """Lossless map file: uint32 rows, uint32 cols (little-endian), then float64 pixels"""
    array = np.asarray(data, dtype=np.float64)
    if array.ndim != 2:
        raise DatasetError(f"raw files hold one 2D map, got shape {array.shape}")
    with open(path, "wb") as f:
        f.write(np.asarray(array.shape, dtype=RAW_HEADER).tobytes())
        f.write(np.ascontiguousarray(array, dtype=RAW_DATA).tobytes())


def read_raw(path: PathLike) -> Array:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}")
    if len(payload) < 8:
        raise DatasetError(f"{path}: truncated header")
    rows, cols = (int(v) for v in np.frombuffer(payload[:8], dtype=RAW_HEADER))
    if len(payload) != 8 + rows * cols * 8:
        raise DatasetError(
            f"{path}: header says {rows}x{cols}, payload has {len(payload) - 8} bytes"
        )
    return np.frombuffer(payload[8:], dtype=RAW_DATA).reshape(rows, cols).astype(np.float64)


def write_pgm(path: PathLike, data) -> None:
    """8-bit binary PGM preview of a [-1, 1] map"""
    pixels = np.clip(np.rint(denormalize(data)), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def read_image(path: PathLike, size: Optional[int] = None) -> Array:
    """Gray-scale pixels in [0, 255], optionally resized to size x size"""
    try:
        with Image.open(path) as image:
            gray = image.convert("L")
            if size is not None and gray.size != (size, size):
                gray = gray.resize((size, size), Image.Resampling.BILINEAR)
            return np.asarray(gray, dtype=np.float64)
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}")


# =========================================================================
# Patterns
# =========================================================================

class PatternGenerator:
    """Clean test images in [-1, 1]"""

    @staticmethod
    def checkerboard(size: int, cell: int = 4) -> Array:
        idx = np.arange(size) // max(cell, 1)
        return np.where((idx[:, None] + idx[None, :]) % 2 == 0, 1.0, -1.0)

    @staticmethod
    def stripes(size: int, period: float, angle: float) -> Array:
        rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
        phase = rows * np.sin(angle) + cols * np.cos(angle)
        return np.sin(2.0 * np.pi * phase / period)

    @staticmethod
    def disk(size: int, center: Tuple[float, float], radius: float) -> Array:
        rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
        inside = (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius**2
        return np.where(inside, 1.0, -1.0)

    @staticmethod
    def rings(size: int, center: Tuple[float, float], period: float) -> Array:
        rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
        radius = np.hypot(rows - center[0], cols - center[1])
        return np.cos(2.0 * np.pi * radius / period)

    @staticmethod
    def blob(size: int, center: Tuple[float, float], width: float) -> Array:
        rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
        r2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
        return 2.0 * np.exp(-r2 / (2.0 * width**2)) - 1.0

    @classmethod
    def random(cls, size: int, rng: np.random.Generator) -> Array:
        """One of the pattern families with random parameters"""
        kind = int(rng.integers(5))
        center = (float(rng.uniform(0.25, 0.75) * size), float(rng.uniform(0.25, 0.75) * size))
        if kind == 0:
            return cls.checkerboard(size, int(rng.integers(2, max(3, size // 2))))
        if kind == 1:
            period, angle = float(rng.uniform(3.0, size / 2)), float(rng.uniform(0, np.pi))
            return cls.stripes(size, period, angle)
        if kind == 2:
            return cls.disk(size, center, float(rng.uniform(0.15, 0.35) * size))
        if kind == 3:
            return cls.rings(size, center, float(rng.uniform(3.0, size / 2)))
        return cls.blob(size, center, float(rng.uniform(0.1, 0.3) * size))


def zero_db_noise(clean: Array, rng: np.random.Generator) -> Array:
    """White Gaussian noise, mean removed and scaled to the variance of ``clean``"""
    noise = rng.standard_normal(clean.shape)
    noise -= noise.mean()
    return noise * np.sqrt(np.var(clean) / np.var(noise))


# =========================================================================
# Generation
# =========================================================================

def _item(index: int, inputs: Array, target: Array) -> DatasetPair:
    return DatasetPair(id=f"item{index:03d}", input=inputs[None], target=target[None])


def generate(
    kind: Union[TaskKind, str], seed: int, size: int = 16, items: int = 4
) -> List[DatasetPair]:
    """
    Desk-scale dataset of one experiment family

    denoise: pattern + 0 dB white Gaussian noise -> pattern
    synth: white Gaussian noise -> pattern
    segment: noisy shape -> {-1, 1} mask
    transform: pattern A -> pattern B, every odd item the inverse of the one before

    Args:
        kind: Experiment family
        seed: Generator seed; the same seed gives identical items
        size: Side of every map
        items: Number of items

    Returns:
        List of DatasetPair
    """
    kind = TaskKind(kind)
    if size < 2 or items < 1:
        raise DatasetError(f"need size >= 2 and items >= 1, got {size} and {items}")
    rng = np.random.default_rng(seed)
    pairs: List[DatasetPair] = []
    for index in range(items):
        if kind == TaskKind.DENOISE:
            clean = PatternGenerator.random(size, rng)
            while np.var(clean) == 0.0:
                clean = PatternGenerator.random(size, rng)
            pairs.append(_item(index, clean + zero_db_noise(clean, rng), clean))
        elif kind == TaskKind.SYNTH:
            noise = np.clip(rng.normal(0.0, 0.5, size=(size, size)), -1.0, 1.0)
            pairs.append(_item(index, noise, PatternGenerator.random(size, rng)))
        elif kind == TaskKind.SEGMENT:
            center = (float(rng.uniform(0.3, 0.7) * size), float(rng.uniform(0.3, 0.7) * size))
            mask = PatternGenerator.disk(size, center, float(rng.uniform(0.2, 0.35) * size))
            background = 0.3 * PatternGenerator.random(size, rng)
            image = np.clip(0.5 * mask + background + rng.normal(0.0, 0.2, (size, size)), -1, 1)
            pairs.append(_item(index, image, mask))
        elif index % 2 == 1:
            previous = pairs[-1]
            pairs.append(_item(index, previous.target[0], previous.input[0]))
        else:
            a = PatternGenerator.random(size, rng)
            pairs.append(_item(index, a, PatternGenerator.random(size, rng)))
    return pairs


def make_data(
    kind: Union[TaskKind, str], seed: int, out_dir: PathLike, size: int = 16, items: int = 4
) -> DatasetManifest:
    """Generate a dataset and write raw maps, PGM previews and the manifest"""
    pairs = generate(kind, seed, size, items)
    root = Path(out_dir)
    (root / INPUTS_DIR).mkdir(parents=True, exist_ok=True)
    (root / TARGETS_DIR).mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        for folder, maps in ((INPUTS_DIR, pair.input), (TARGETS_DIR, pair.target)):
            write_raw(root / folder / f"{pair.id}.raw", maps[0])
            write_pgm(root / folder / f"{pair.id}.pgm", maps[0])

    manifest = DatasetManifest(
        task=TaskKind(kind), seed=seed, size=size, ids=[p.id for p in pairs], normalization="raw"
    )
    (root / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n")
    if manifest.task == TaskKind.DENOISE:
        levels = [snr(p.target, p.input) for p in pairs]
        logger.info(f"Denoise inputs: SNR {min(levels):.4f}..{max(levels):.4f} dB")
    logger.info(f"Wrote {len(pairs)} {manifest.task.value} items to {root}")
    return manifest


# =========================================================================
# Loading
# =========================================================================

def _image_files(folder: Path) -> List[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _load_external(root: Path, size: Optional[int], task: Optional[TaskKind]) -> List[DatasetPair]:
    inputs_dir, targets_dir = root / INPUTS_DIR, root / TARGETS_DIR
    if not inputs_dir.is_dir() or not targets_dir.is_dir():
        raise DatasetError(f"{root} needs '{INPUTS_DIR}/' and '{TARGETS_DIR}/' directories")
    targets = {p.stem: p for p in _image_files(targets_dir)}
    pairs = []
    for path in _image_files(inputs_dir):
        if path.stem not in targets:
            raise DatasetError(f"no target image for input {path.name}")
        target = normalize(read_image(targets[path.stem], size))
        if task == TaskKind.SEGMENT:
            target = np.where(target >= 0.0, 1.0, -1.0)
        pairs.append(
            DatasetPair(
                id=path.stem, input=normalize(read_image(path, size))[None], target=target[None]
            )
        )
    if not pairs:
        raise DatasetError(f"no images found in {inputs_dir}")
    logger.info(f"Ingested {len(pairs)} external items from {root}")
    return pairs


def read_manifest(path: PathLike) -> DatasetManifest:
    try:
        return DatasetManifest.model_validate_json(Path(path).read_text())
    except OSError as e:
        raise DatasetError(f"cannot read manifest {path}: {e}")


def load_dataset(
    path: PathLike, size: Optional[int] = None, task: Optional[TaskKind] = None
) -> List[DatasetPair]:
    """
    Load a generated dataset (manifest + raw maps) or an external image directory

    Args:
        path: Dataset directory
        size: Side external images are resized to
        task: Segmentation targets are binarised to {-1, 1}

    Returns:
        List of DatasetPair with consistent dims
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    if (root / MANIFEST_NAME).exists():
        manifest = read_manifest(root / MANIFEST_NAME)
        pairs = [
            DatasetPair(
                id=item,
                input=read_raw(root / INPUTS_DIR / f"{item}.raw")[None],
                target=read_raw(root / TARGETS_DIR / f"{item}.raw")[None],
            )
            for item in manifest.ids
        ]
    else:
        pairs = _load_external(root, size, task)
    if not pairs:
        raise DatasetError(f"dataset {root} is empty")
    shapes = {(p.input.shape, p.target.shape) for p in pairs}
    if len(shapes) != 1:
        raise DatasetError(f"dataset {root} mixes dims: {sorted(shapes)}")
    logger.debug(f"Loaded {len(pairs)} items from {root}")
    return pairs


def dataset_manifest(
    path: PathLike, pairs: List[DatasetPair], task: Optional[TaskKind] = None
) -> DatasetManifest:
    """Manifest of a loaded dataset; external directories record the resize method"""
    root = Path(path)
    if (root / MANIFEST_NAME).exists():
        return read_manifest(root / MANIFEST_NAME)
    return DatasetManifest(
        task=task or TaskKind.DENOISE,
        source="external",
        size=int(pairs[0].input.shape[-1]),
        ids=[p.id for p in pairs],
        resize=RESIZE_METHOD,
    )


def training_pairs(pairs: List[DatasetPair]) -> List[Tuple[Array, Array]]:
    return [(p.input, p.target) for p in pairs]
