"""Binary datasets: CSV ingestion, batching, missingness masks, synthetic data."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SPLITS = ("train", "valid", "test")

# The twenty standard binary density-estimation benchmarks (DEBD layout:
# <root>/<name>/<name>.{train,valid,test}.data).
DEBD_NAMES = (
    "nltcs", "msnbc", "kdd", "plants", "baudio", "jester", "bnetflix",
    "accidents", "tretail", "pumsb_star", "dna", "kosarek", "msweb", "book",
    "tmovie", "cwebkb", "cr52", "c20ng", "bbc", "ad",
)


class DataError(ValueError):
    """Malformed or inconsistent data file."""


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *stream)``.

    Every (seed, stream) pair gets an independent Philox stream, so e.g. the
    shuffle of epoch 7 can be reproduced without replaying epochs 0-6.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(frozen=True)
class BinaryDataset:
    rows: np.ndarray
    split_tag: str = "train"
    num_vars: int = field(init=False)

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[0] == 0 or rows.shape[1] == 0:
            raise DataError(f"expected a nonempty 2-D array of rows, got shape {rows.shape}")
        if not np.isin(rows, (0, 1)).all():
            raise DataError("rows must contain only 0/1 values")
        if self.split_tag not in SPLITS:
            raise DataError(f"unknown split tag {self.split_tag!r}")
        rows = rows.astype(np.uint8, copy=True)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "num_vars", rows.shape[1])

    def __len__(self):
        return self.rows.shape[0]

    def as_float(self) -> np.ndarray:
        return self.rows.astype(np.float64)


@dataclass(frozen=True)
class MissingMask:
    """Per-entry observedness flags, ``True`` = observed."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=bool)
        if entries.ndim != 2:
            raise DataError("mask must be 2-D")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def shape(self):
        return self.entries.shape

    def check_matches(self, data: BinaryDataset):
        if self.entries.shape != data.rows.shape:
            raise DataError(f"mask shape {self.entries.shape} does not match data shape {data.rows.shape}")


def _parse_binary_csv(path, what="data") -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        tokens = [t.strip() for t in line.split(",")]
        if any(t not in ("0", "1") for t in tokens):
            bad = next(t for t in tokens if t not in ("0", "1"))
            raise DataError(f"{path}:{lineno}: non-binary token {bad!r} in {what} file")
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise DataError(f"{path}:{lineno}: ragged row ({len(tokens)} tokens, expected {width})")
        rows.append([t == "1" for t in tokens])
    if not rows:
        raise DataError(f"{path}: no rows")
    return np.array(rows, dtype=np.uint8)


def load_dataset(path, expected_vars: Optional[int] = None, split_tag: str = "train") -> BinaryDataset:
    """Load a comma-separated 0/1 file (one row per line, no header).

    Ragged or non-binary lines raise :class:`DataError` instead of being
    truncated or coerced.
    """
    rows = _parse_binary_csv(path)
    if expected_vars is not None and rows.shape[1] != expected_vars:
        raise DataError(f"{path}: expected {expected_vars} variables, found {rows.shape[1]}")
    return BinaryDataset(rows, split_tag=split_tag)


def save_dataset(data: BinaryDataset, path) -> None:
    _write_binary_csv(data.rows, path)


def load_mask(path, like: Optional[BinaryDataset] = None) -> MissingMask:
    mask = MissingMask(_parse_binary_csv(path, what="mask").astype(bool))
    if like is not None:
        mask.check_matches(like)
    return mask


def save_mask(mask: MissingMask, path) -> None:
    _write_binary_csv(mask.entries.astype(np.uint8), path)


def _write_binary_csv(arr: np.ndarray, path) -> None:
    lines = [",".join("1" if v else "0" for v in row) for row in arr]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def debd_root() -> Path:
    return Path(os.environ.get("CONTMIX_DEBD_DIR", Path(__file__).resolve().parents[2] / "data" / "debd"))


def load_debd(name: str, root=None) -> dict:
    """Load the train/valid/test splits of one DEBD benchmark.

    ``root`` defaults to ``$CONTMIX_DEBD_DIR`` or ``<repo>/data/debd``.
    """
    root = Path(root) if root is not None else debd_root()
    splits = {}
    for split in SPLITS:
        splits[split] = load_dataset(root / name / f"{name}.{split}.data", split_tag=split)
    widths = {d.num_vars for d in splits.values()}
    if len(widths) != 1:
        raise DataError(f"{name}: splits disagree on the number of variables {sorted(widths)}")
    return splits


def mnist_root() -> Path:
    return Path(os.environ.get("CONTMIX_MNIST_DIR", Path(__file__).resolve().parents[2] / "data" / "binary_mnist"))


def load_binary_mnist(root=None) -> dict:
    """Load the fixed binarisation of MNIST (``binarized_mnist_{split}.amat``, space separated)."""
    root = Path(root) if root is not None else mnist_root()
    splits = {}
    for split in SPLITS:
        path = root / f"binarized_mnist_{split}.amat"
        try:
            rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if rows.shape[1] != 28 * 28:
            raise DataError(f"{path}: expected 784 columns, found {rows.shape[1]}")
        splits[split] = BinaryDataset(rows, split_tag=split)
    return splits


def make_batches(data, batch_size: int, shuffle_seed: Optional[int] = None, epoch: int = 0) -> list:
    """Partition row indices into batches; the last batch may be smaller.

    Without a seed the order is sequential. With a seed the permutation is
    drawn from the ``(shuffle_seed, epoch)`` stream.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    m = len(data)
    if shuffle_seed is None:
        order = np.arange(m)
    else:
        order = rng_for(shuffle_seed, epoch).permutation(m)
    return [order[i:i + batch_size] for i in range(0, m, batch_size)]


def apply_random_block_mask(data: BinaryDataset, block_shape: Sequence[int], image_shape: Sequence[int],
                            seed: int) -> MissingMask:
    """Hide one uniformly placed ``h x w`` block per row of flattened images."""
    h, w = map(int, block_shape)
    H, W = map(int, image_shape)
    if H * W != data.num_vars:
        raise DataError(f"image shape {H}x{W} does not match {data.num_vars} variables")
    if not (0 <= h <= H and 0 <= w <= W):
        raise DataError(f"block {h}x{w} does not fit in a {H}x{W} image")
    m = len(data)
    rng = rng_for(seed)
    tops = rng.integers(0, H - h + 1, size=m)
    lefts = rng.integers(0, W - w + 1, size=m)
    rr = np.arange(H)[None, :, None]
    cc = np.arange(W)[None, None, :]
    hidden = ((rr >= tops[:, None, None]) & (rr < tops[:, None, None] + h)
              & (cc >= lefts[:, None, None]) & (cc < lefts[:, None, None] + w))
    return MissingMask(~hidden.reshape(m, H * W))


def generate_synthetic(ground_truth, count: int, seed: int, split_tag: str = "train") -> BinaryDataset:
    """Draw ``count`` i.i.d. ancestral samples from a compiled PC."""
    from .circuits import sample

    data = sample(ground_truth, count, seed)
    return BinaryDataset(data.rows, split_tag=split_tag)
