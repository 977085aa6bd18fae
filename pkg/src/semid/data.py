"""Embedding matrices, interaction logs, and history samples.

Binary embedding layout (little-endian)::

    b"SEMB" | version u32 | modality u8 | n_items u64 | dim u32
    item_ids  u64[n_items]
    values    f32[n_items, dim]   (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MODALITIES = ("textual", "audio", "visual", "joint")
EMB_MAGIC = b"SEMB"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIBQI")

# Reserved item id for leading history padding. Real ids are non-negative.
PAD_ITEM = -1


class DataFormatError(ValueError):
    """Raised for malformed on-disk data. ``code`` is a stable short tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class EmbeddingMatrix:
    modality: str
    item_ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataFormatError("bad_modality", f"unknown modality {self.modality!r}")
        ids = np.asarray(self.item_ids, dtype=np.int64).reshape(-1)
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise DataFormatError("bad_shape", f"values must be 2-D, got shape {vals.shape}")
        if vals.shape[0] != ids.shape[0]:
            raise DataFormatError(
                "row_count_mismatch",
                f"row count mismatch: {ids.shape[0]} ids vs {vals.shape[0]} rows",
            )
        if vals.shape[1] < 1:
            raise DataFormatError("bad_dim", "dim must be positive")
        if (ids < 0).any():
            raise DataFormatError("bad_item_id", "item ids must be non-negative")
        if np.unique(ids).shape[0] != ids.shape[0]:
            raise DataFormatError("duplicate_item_id", "item ids must be unique")
        vals = np.ascontiguousarray(vals, dtype=np.float32)
        bad = np.argwhere(~np.isfinite(vals))
        if bad.size:
            r, c = bad[0]
            raise DataFormatError("non_finite", f"non-finite value at ({r},{c})")
        ids.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "item_ids", ids)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return int(self.item_ids.shape[0])

    def reorder(self, item_ids: Sequence[int]) -> "EmbeddingMatrix":
        """Return the rows for ``item_ids`` in that order."""
        pos = {int(i): r for r, i in enumerate(self.item_ids)}
        try:
            rows = [pos[int(i)] for i in item_ids]
        except KeyError as e:
            raise DataFormatError("missing_item", f"item {e.args[0]} has no {self.modality} embedding")
        return EmbeddingMatrix(self.modality, np.asarray(item_ids), self.values[rows])


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    n, d = matrix.values.shape
    header = _EMB_HEADER.pack(
        EMB_MAGIC, EMB_VERSION, MODALITIES.index(matrix.modality), n, d
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(matrix.item_ids.astype("<u8").tobytes())
        f.write(matrix.values.astype("<f4").tobytes())


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise DataFormatError("bad_header", "file shorter than header")
    magic, version, mod, n, d = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise DataFormatError("bad_header", f"bad magic {magic!r}")
    if version != EMB_VERSION:
        raise DataFormatError("bad_header", f"unsupported version {version}")
    if mod >= len(MODALITIES):
        raise DataFormatError("bad_header", f"bad modality tag {mod}")
    if d == 0:
        raise DataFormatError("bad_dim", "dim must be positive")
    body = len(raw) - _EMB_HEADER.size
    if body % 4 or body < 8 * n:
        raise DataFormatError("row_count_mismatch", "row count mismatch: truncated id block")
    n_floats = (body - 8 * n) // 4
    if n_floats != n * d:
        if n_floats % d:
            raise DataFormatError(
                "dim_mismatch", f"dimension mismatch: {n_floats} floats not divisible by dim {d}"
            )
        raise DataFormatError(
            "row_count_mismatch", f"row count mismatch: header says {n}, found {n_floats // d}"
        )
    off = _EMB_HEADER.size
    ids = np.frombuffer(raw, dtype="<u8", count=n, offset=off).astype(np.int64)
    vals = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off + 8 * n).reshape(n, d)
    return EmbeddingMatrix(MODALITIES[mod], ids, vals.astype(np.float32))


@dataclass(frozen=True)
class Event:
    user_id: int
    item_id: int
    timestamp: int
    label: int


@dataclass
class InteractionDataset:
    """Time-ordered interaction events for one split.

    Events are stably re-sorted by ``(user_id, timestamp)`` on construction,
    so ties keep their input (file) order.
    """

    events: list[Event]
    split: str = "train"
    interaction_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        for e in self.events:
            if e.label not in (0, 1):
                raise DataFormatError("bad_label", f"label must be 0 or 1, got {e.label}")
        self.events = sorted(self.events, key=lambda e: (e.user_id, e.timestamp))
        if not self.interaction_counts and self.split == "train":
            counts: dict[int, int] = {}
            for e in self.events:
                counts[e.item_id] = counts.get(e.item_id, 0) + 1
            self.interaction_counts = counts

    def __len__(self) -> int:
        return len(self.events)

    @property
    def item_ids(self) -> set[int]:
        return {e.item_id for e in self.events}


def load_interactions(path: str | Path, split: str = "train") -> InteractionDataset:
    events = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError("bad_row", f"line {lineno}: expected 4 tab-separated fields")
            try:
                u, i, t, y = (int(p) for p in parts)
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise DataFormatError("bad_row", f"line {lineno}: non-integer field")
            events.append(Event(u, i, t, y))
    return InteractionDataset(events, split=split)


def save_interactions(dataset: InteractionDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("user_id\titem_id\ttimestamp\tlabel\n")
        for e in dataset.events:
            f.write(f"{e.user_id}\t{e.item_id}\t{e.timestamp}\t{e.label}\n")


@dataclass(frozen=True)
class Sample:
    user_id: int
    history: tuple[int, ...]  # most recent last, no padding
    target_item: int
    label: int
    timestamp: int = 0

    @property
    def history_len(self) -> int:
        return len(self.history)


def build_samples(
    dataset: InteractionDataset,
    max_len: int = 20,
    prior: InteractionDataset | None = None,
) -> list[Sample]:
    """One sample per event of ``dataset``.

    The history of an event is the user's positive items with a strictly
    earlier timestamp, truncated to the ``max_len`` most recent. Positives
    from ``prior`` (typically the train split when building test samples)
    count as history too, but produce no samples.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    tagged = [(e, True) for e in dataset.events]
    if prior is not None:
        tagged += [(e, False) for e in prior.events]
    # prior events go after dataset events on ties so that file order within
    # each split is preserved; ties never enter each other's history anyway
    tagged.sort(key=lambda p: (p[0].user_id, p[0].timestamp))

    samples = []
    user = None
    positives: list[tuple[int, int]] = []  # (timestamp, item)
    for e, emit in tagged:
        if e.user_id != user:
            user, positives = e.user_id, []
        if emit:
            hist = [i for t, i in positives if t < e.timestamp][-max_len:]
            samples.append(Sample(e.user_id, tuple(hist), e.item_id, e.label, e.timestamp))
        if e.label == 1:
            positives.append((e.timestamp, e.item_id))
    return samples


def mark_cold_items(dataset: InteractionDataset, threshold: int = 30) -> set[int]:
    """Items with fewer than ``threshold`` interactions in ``dataset``.

    Only items that appear in the dataset's counts can be reported; use
    :func:`cold_items_among` to include never-seen catalog items.
    """
    if threshold < 1:
        raise ValueError("threshold must be positive")
    return {i for i, c in dataset.interaction_counts.items() if c < threshold}


def cold_items_among(
    dataset: InteractionDataset, catalog: Iterable[int], threshold: int = 30
) -> set[int]:
    counts = dataset.interaction_counts
    return {int(i) for i in catalog if counts.get(int(i), 0) < threshold}
