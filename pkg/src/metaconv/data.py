"""Dataset ingestion (IDX), checksum-gated fetching, and report artifacts."""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
import sys
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import (
    DegenerateInputError,
    DimensionError,
    FetchError,
    FormatError,
    IntegrityError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATASET_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def default_cache_dir() -> Path:
    env = os.environ.get("METACONV_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "metaconv"


@dataclass
class LabeledDataset:
    """Images in [0,1] with integer labels 0-9."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""
    checksum: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DimensionError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DimensionError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.images)

    def subset(self, n: int, offset: int = 0) -> "LabeledDataset":
        return LabeledDataset(self.images[offset:offset + n],
                              self.labels[offset:offset + n],
                              self.split, self.checksum)


def _read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic_raw = fh.read(4)
        if len(magic_raw) < 4:
            raise FormatError(f"{path}: too short for an IDX header")
        (magic,) = struct.unpack(">I", magic_raw)
        if magic == IDX_IMAGES_MAGIC:
            n, rows, cols = struct.unpack(">III", fh.read(12))
            payload = fh.read()
            if len(payload) < n * rows * cols:
                raise FormatError(
                    f"{path}: truncated image payload "
                    f"({len(payload)} < {n * rows * cols} bytes)")
            return np.frombuffer(payload, np.uint8,
                                 count=n * rows * cols).reshape(n, rows, cols)
        if magic == IDX_LABELS_MAGIC:
            (n,) = struct.unpack(">I", fh.read(4))
            payload = fh.read()
            if len(payload) < n:
                raise FormatError(f"{path}: truncated label payload")
            return np.frombuffer(payload, np.uint8, count=n)
    raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")


def load_idx(images_path, labels_path, split: str = "") -> LabeledDataset:
    """Parse an IDX image/label file pair into a dataset.

    Big-endian magic and dimensions, unsigned byte pixels divided by 255.
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path} does not contain image data")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path} does not contain label data")
    if len(images) != len(labels):
        raise FormatError(
            f"image count {len(images)} != label count {len(labels)}")
    digest = hashlib.sha256()
    for p in (images_path, labels_path):
        digest.update(Path(p).read_bytes())
    return LabeledDataset(images.astype(np.float64) / 255.0,
                          labels.astype(np.int64), split, digest.hexdigest())


def load_split(name: str, split: str, cache_dir: Optional[Path] = None) -> LabeledDataset:
    base = (cache_dir or default_cache_dir()) / "datasets" / name
    img, lbl = DATASET_FILES[split]
    return load_idx(base / img, base / lbl, split)


def dataset_available(name: str, cache_dir: Optional[Path] = None) -> bool:
    base = (cache_dir or default_cache_dir()) / "datasets" / name
    return all((base / f).exists() for pair in DATASET_FILES.values() for f in pair)


def _load_manifest() -> dict:
    from importlib.resources import files
    text = files("metaconv").joinpath("dataset_manifest.toml").read_text()
    return tomllib.loads(text)


def _default_transport(url: str) -> bytes:
    with urllib.request.urlopen(url, timeout=60) as resp:
        return resp.read()


class _CacheLock:
    """Exclusive lock file so concurrent fetches do not race."""

    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(600):
            try:
                self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                return self
            except FileExistsError:
                time.sleep(0.1)
        raise FetchError(f"could not acquire cache lock {self.path}")

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.path)


def fetch_dataset(name: str, cache_dir: Optional[Path] = None,
                  transport: Optional[Callable[[str], bytes]] = None,
                  manifest: Optional[dict] = None) -> Dict[str, Path]:
    """Download, verify and unpack a dataset into the cache; idempotent.

    Pins cover the decompressed IDX payload (gzip blobs vary across
    mirrors); a mismatch quarantines the download (.gz.bad suffix) and
    nothing partial ever enters the cache (write-then-rename).  A warm
    cache performs no network traffic.  Corrupted cached files are
    detected against the pin and re-downloaded.
    """
    manifest = manifest if manifest is not None else _load_manifest()
    if name not in manifest:
        raise FetchError(f"unknown dataset {name!r}; manifest has {sorted(manifest)}")
    transport = transport or _default_transport
    base = (cache_dir or default_cache_dir()) / "datasets" / name
    base.mkdir(parents=True, exist_ok=True)
    out: Dict[str, Path] = {}
    with _CacheLock(base):
        for fname, entry in manifest[name]["files"].items():
            final = base / fname
            out[fname] = final
            if final.exists():
                digest = hashlib.sha256(final.read_bytes()).hexdigest()
                if digest == entry["sha256"]:
                    continue
                final.unlink()              # corrupted cache entry: re-download
            try:
                blob = transport(entry["url"])
            except Exception as exc:
                raise FetchError(f"download failed for {entry['url']}: {exc}") from exc
            try:
                data = gzip.decompress(blob)
            except (OSError, EOFError) as exc:
                raise FormatError(f"{fname}: not a gzip stream: {exc}") from exc
            digest = hashlib.sha256(data).hexdigest()
            if digest != entry["sha256"]:
                quarantine = base / (fname + ".gz.bad")
                quarantine.write_bytes(blob)
                raise IntegrityError(
                    f"{fname}: payload sha256 {digest} != pinned {entry['sha256']}; "
                    f"download quarantined at {quarantine}")
            tmp = base / (fname + ".tmp")
            tmp.write_bytes(data)           # write-then-rename: no partial files
            tmp.rename(final)
    return out


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (10, 10):
            raise DimensionError("confusion matrix must be 10x10")
        self.counts = c

    @property
    def per_class_accuracy(self) -> np.ndarray:
        totals = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore"):
            acc = np.diag(self.counts) / totals
        return np.where(totals > 0, acc, np.nan)

    @property
    def overall_accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())


def confusion(predict_fn, dataset: LabeledDataset) -> ConfusionMatrix:
    """Count argmax predictions against labels for a dataset subset."""
    if len(dataset) == 0:
        raise DegenerateInputError("cannot build a confusion matrix from no samples")
    preds = np.asarray(predict_fn(dataset.images))
    counts = np.zeros((10, 10), dtype=np.int64)
    np.add.at(counts, (dataset.labels, preds), 1)
    return ConfusionMatrix(counts)


def confusion_to_csv(cm: ConfusionMatrix, path) -> None:
    header = "label," + ",".join(f"pred_{j}" for j in range(10))
    rows = [",".join([str(i)] + [str(int(v)) for v in cm.counts[i]])
            for i in range(10)]
    Path(path).write_text(header + "\n" + "\n".join(rows) + "\n")


def confusion_to_svg(cm: ConfusionMatrix, path, title: str = "") -> None:
    """Heat-map rendering of an existing matrix; no computation here."""
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    frac = cm.counts / np.maximum(cm.counts.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(5, 4.4))
    im = ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_xticks(range(10))
    ax.set_yticks(range(10))
    if title:
        ax.set_title(title)
    for i in range(10):
        for j in range(10):
            if cm.counts[i, j]:
                ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                        fontsize=6, color="black" if frac[i, j] < 0.6 else "white")
    fig.colorbar(im, ax=ax, label="row fraction")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
