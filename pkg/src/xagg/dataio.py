"""Dataset loading, the synthetic corpus, and binary/text codecs."""
from __future__ import annotations

import csv
import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
HEATMAP_MAGIC = b"XAGH"
HEATMAP_VERSION = 1
SEGMENT_MAGIC = b"XAGS"

DATA_ENV = "XAGG_DATA_DIR"

DATASET_DIRS = {"mnist": "mnist", "fashion": "fashion", "fashion-mnist": "fashion", "fashionmnist": "fashion"}
SPLIT_PREFIX = {"train": "train", "test": "t10k"}


class FormatError(ValueError):
    """Base class for malformed files."""


class MagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionError(FormatError):
    pass


class VersionError(FormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"
    split: str = ""
    channel_mean: tuple = field(default=())

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DimensionError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("dataset images must lie in [0, 1]")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)
        if not self.channel_mean:
            object.__setattr__(self, "channel_mean", tuple(float(m) for m in channel_mean(self.images)))

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index].copy(), self.labels[index].copy(), self.name, self.split, self.channel_mean)


def channel_mean(images: np.ndarray) -> np.ndarray:
    if images.size == 0:
        return np.zeros(images.shape[1] if images.ndim > 1 else 0)
    return images.mean(axis=(0, 2, 3))


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedError("file shorter than the IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise MagicError(f"IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header < count:
        raise TruncatedError(f"IDX payload has {len(raw) - header} bytes, expected {count}")
    if len(raw) - header > count:
        raise DimensionError(f"IDX payload has {len(raw) - header} bytes, dimensions say {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header, count=count).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx", split: str = "") -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped) scaled to [0, 1]."""
    pixels = parse_idx(_read_bytes(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC)
    if pixels.ndim != 3:
        raise DimensionError(f"image file has {pixels.ndim} dimensions, expected 3")
    if labels.ndim != 1:
        raise DimensionError(f"label file has {labels.ndim} dimensions, expected 1")
    if len(pixels) != len(labels):
        raise DimensionError(f"{len(pixels)} images but {len(labels)} labels")
    images = (pixels.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), name, split)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data in IDX layout (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset root given and {DATA_ENV} is not set")
    return Path(root)


def load_dataset(name: str, split: str = "test", root=None) -> Dataset:
    """Load MNIST or FashionMNIST from ``<root>/<mnist|fashion>/``."""
    try:
        folder = DATASET_DIRS[name.lower()]
        prefix = SPLIT_PREFIX[split]
    except KeyError:
        raise ValueError(f"unknown dataset/split {name!r}/{split!r}") from None
    base = data_root(root) / folder
    paths = []
    for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
        p = base / f"{prefix}-{kind}"
        if not p.exists() and p.with_name(p.name + ".gz").exists():
            p = p.with_name(p.name + ".gz")
        if not p.exists():
            raise FileNotFoundError(f"missing {p}")
        paths.append(p)
    return load_idx(paths[0], paths[1], name=folder, split=split)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    block: int = 6
    noise: float = 0.1
    intensity: float = 0.9
    seed: int = 0
    size: int = 28

    def block_origins(self) -> list[tuple[int, int]]:
        """Top-left corners of the class blocks on a regular grid."""
        per_row = int(np.ceil(np.sqrt(self.n_classes)))
        gap = (self.size - per_row * self.block) // (per_row + 1)
        if gap < 0:
            raise ValueError("class blocks do not fit the image")
        origins = []
        for c in range(self.n_classes):
            r, k = divmod(c, per_row)
            origins.append((gap + r * (self.block + gap), gap + k * (self.block + gap)))
        return origins


def make_synthetic(spec: SyntheticSpec, n: int) -> tuple[Dataset, np.ndarray]:
    """Noisy images where only the class block carries signal.

    Returns the dataset and the (n, H, W) ground-truth relevance masks.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    labels = rng.integers(0, spec.n_classes, size=n)
    images = spec.noise * rng.random((n, 1, spec.size, spec.size))
    masks = np.zeros((n, spec.size, spec.size))
    origins = spec.block_origins()
    for i, c in enumerate(labels):
        r, k = origins[c]
        images[i, 0, r:r + spec.block, k:k + spec.block] += spec.intensity
        masks[i, r:r + spec.block, k:k + spec.block] = 1.0
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), "synthetic", "all"), masks


# -- heatmap / segment codecs ------------------------------------------------

def encode_heatmap(values: np.ndarray, provenance: dict | None = None) -> bytes:
    values = np.asarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError("heatmap must be 2-d")
    h, w = values.shape
    trailer = json.dumps(provenance or {}, sort_keys=True).encode("utf-8")
    return b"".join([
        HEATMAP_MAGIC,
        struct.pack("<B", HEATMAP_VERSION),
        struct.pack("<II", h, w),
        values.tobytes(order="C"),
        struct.pack("<I", len(trailer)),
        trailer,
    ])


def decode_heatmap(raw: bytes) -> tuple[np.ndarray, dict]:
    if raw[:4] != HEATMAP_MAGIC:
        raise MagicError(f"heatmap magic {raw[:4]!r}")
    if len(raw) < 13:
        raise TruncatedError("heatmap header truncated")
    version = raw[4]
    if version != HEATMAP_VERSION:
        raise VersionError(f"heatmap version {version}, expected {HEATMAP_VERSION}")
    h, w = struct.unpack("<II", raw[5:13])
    end = 13 + 8 * h * w
    if len(raw) < end + 4:
        raise TruncatedError("heatmap payload truncated")
    values = np.frombuffer(raw, dtype="<f8", count=h * w, offset=13).reshape(h, w).astype(np.float64)
    (n,) = struct.unpack("<I", raw[end:end + 4])
    if len(raw) != end + 4 + n:
        raise TruncatedError("heatmap provenance truncated")
    return values, json.loads(raw[end + 4:].decode("utf-8"))


def encode_segments(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    h, w = labels.shape
    s = int(labels.max()) + 1 if labels.size else 0
    return SEGMENT_MAGIC + struct.pack("<III", h, w, s) + labels.astype("<u4").tobytes(order="C")


def decode_segments(raw: bytes) -> np.ndarray:
    if raw[:4] != SEGMENT_MAGIC:
        raise MagicError(f"segment map magic {raw[:4]!r}")
    if len(raw) < 16:
        raise TruncatedError("segment header truncated")
    h, w, s = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * h * w:
        raise TruncatedError("segment payload length mismatch")
    labels = np.frombuffer(raw, dtype="<u4", offset=16).reshape(h, w).astype(np.int64)
    if labels.size and labels.max() + 1 != s:
        raise DimensionError(f"header says {s} segments, labels have {labels.max() + 1}")
    return labels


def write_heatmap(path, values, provenance=None) -> None:
    Path(path).write_bytes(encode_heatmap(values, provenance))


def read_heatmap(path):
    return decode_heatmap(Path(path).read_bytes())


def write_segments(path, labels) -> None:
    Path(path).write_bytes(encode_segments(labels))


def read_segments(path) -> np.ndarray:
    return decode_segments(Path(path).read_bytes())


# -- rendering ---------------------------------------------------------------

def to_gray8(values: np.ndarray, clip_percentile: float | None = None) -> np.ndarray:
    """Map [min, max] (or [min, percentile]) linearly onto 0..255."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min()
    hi = np.percentile(values, clip_percentile) if clip_percentile is not None else values.max()
    if hi <= lo:
        return np.zeros(values.shape, np.uint8)
    scaled = (np.clip(values, lo, hi) - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path, values, clip_percentile: float | None = None) -> None:
    pixels = to_gray8(values, clip_percentile)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise MagicError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_png(path, values, clip_percentile: float | None = None) -> None:
    from PIL import Image

    Image.fromarray(to_gray8(values, clip_percentile), mode="L").save(path)


# -- CSV -----------------------------------------------------------------------

IROF_COLUMNS = ("method", "image_id", "score")
SENSN_COLUMNS = ("method", "n", "mean_pcc", "n_excluded")
PAIRWISE_COLUMNS = ("method_a", "method_b", "ratio")
ATTACK_COLUMNS = (
    "image_id", "attacked_method", "evaluated_method", "metric",
    "value_before", "value_after", "metric_diff", "input_mse", "label_preserved",
)


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write rows with a fixed column order; floats keep full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"row has {len(row)} cells, expected {len(columns)}")
            writer.writerow([_cell(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
