"""Interaction-log ingestion, filtering, temporal splitting and
per-user environment slicing.

The pipeline is: parse delimited text into records, keep positive
ratings and iterate k-core filtering to a fixpoint, split each user's
chronological history 80/10/10 into train/validation/test, then slice
the training portion into T contiguous environments of (near-)equal
interaction counts. A compact binary format ("CDRD") round-trips the
split dataset.
"""

from __future__ import annotations

import io
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"CDRD"
FORMAT_VERSION = 1

TRAIN, VALIDATION, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VALIDATION: "validation", TEST: "test"}


class InsufficientInteractions(ValueError):
    """A user has fewer training interactions than requested environments."""


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    rating: float
    timestamp: int


@dataclass(frozen=True)
class FormatSpec:
    """Column layout of a delimited interaction file."""

    delimiter: str = "\t"
    columns: tuple[str, ...] = ("user", "item", "rating", "timestamp")
    skip_header: bool = False

    def indices(self) -> dict[str, int]:
        required = {"user", "item", "rating", "timestamp"}
        missing = required - set(self.columns)
        if missing:
            raise ValueError(f"format spec is missing columns: {sorted(missing)}")
        return {name: self.columns.index(name) for name in required}


@dataclass
class LoadResult:
    records: list[InteractionRecord]
    skipped: int


def load_interactions(path, spec: FormatSpec = FormatSpec()) -> LoadResult:
    """Parse a delimited interaction file; malformed rows are counted, not fatal."""
    idx = spec.indices()
    records: list[InteractionRecord] = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if spec.skip_header and lineno == 0:
                continue
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(spec.delimiter)
            try:
                rec = InteractionRecord(
                    user=parts[idx["user"]].strip(),
                    item=parts[idx["item"]].strip(),
                    rating=float(parts[idx["rating"]]),
                    timestamp=int(float(parts[idx["timestamp"]])),
                )
                if not rec.user or not rec.item or rec.timestamp < 0:
                    raise ValueError("empty key or negative timestamp")
            except (IndexError, ValueError):
                skipped += 1
                continue
            records.append(rec)
    if skipped:
        log.warning("skipped %d malformed line(s) in %s", skipped, path)
    if not records:
        raise ValueError(f"no valid interaction rows in {path}")
    return LoadResult(records, skipped)


def kcore_filter(records: list[InteractionRecord], min_user_deg: int,
                 min_item_deg: int, rating_threshold: float) -> list[InteractionRecord]:
    """Keep positive-rating records, then drop low-degree users/items to a fixpoint."""
    if min_user_deg < 1 or min_item_deg < 1:
        raise ValueError("degree thresholds must be >= 1")
    kept = [r for r in records if r.rating >= rating_threshold]
    while True:
        user_deg = Counter(r.user for r in kept)
        item_deg = Counter(r.item for r in kept)
        filtered = [r for r in kept
                    if user_deg[r.user] >= min_user_deg and item_deg[r.item] >= min_item_deg]
        if len(filtered) == len(kept):
            break
        kept = filtered
    if not kept:
        raise ValueError("k-core filtering removed every record; thresholds too strict")
    return kept


@dataclass
class Dataset:
    """Id-remapped interactions with per-user chronological order and split tags.

    Interactions are stored user-major: `offsets[u]:offsets[u+1]` indexes
    user u's rows of the parallel arrays, already sorted by (timestamp,
    original file order).
    """

    user_keys: list[str]
    item_keys: list[str]
    user_of: np.ndarray      # int32, user index per interaction
    item_of: np.ndarray      # int32
    rating_of: np.ndarray    # float64
    timestamp_of: np.ndarray  # int64
    split_of: np.ndarray     # uint8
    offsets: np.ndarray      # int64, len U+1

    def __post_init__(self):
        self.user_index = {k: i for i, k in enumerate(self.user_keys)}
        self.item_index = {k: i for i, k in enumerate(self.item_keys)}

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.item_keys)

    @property
    def n_interactions(self) -> int:
        return len(self.item_of)

    def _rows(self, user: int, split: int) -> np.ndarray:
        lo, hi = self.offsets[user], self.offsets[user + 1]
        rows = np.arange(lo, hi)
        return rows[self.split_of[lo:hi] == split]

    def split_items(self, user: int, split: int) -> np.ndarray:
        """Item indices of one user within one split, chronological order."""
        return self.item_of[self._rows(user, split)]

    def train_items(self, user: int) -> np.ndarray:
        return self.split_items(user, TRAIN)

    def relevant_set(self, user: int, split: int) -> np.ndarray:
        """Deduplicated item indices of the split, for metric computation."""
        return np.unique(self.split_items(user, split))


def temporal_split(records: list[InteractionRecord],
                   ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Dataset:
    """Chronological 80/10/10 split per user; rounding remainder goes to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    user_keys = sorted({r.user for r in records})
    item_keys = sorted({r.item for r in records})
    uidx = {k: i for i, k in enumerate(user_keys)}
    iidx = {k: i for i, k in enumerate(item_keys)}

    per_user: list[list[tuple[int, int, float, int]]] = [[] for _ in user_keys]
    for order, r in enumerate(records):
        per_user[uidx[r.user]].append((r.timestamp, order, r.rating, iidx[r.item]))

    users, items, ratings, stamps, splits = [], [], [], [], []
    offsets = [0]
    for u, rows in enumerate(per_user):
        rows.sort(key=lambda t: (t[0], t[1]))  # ties broken by file order
        n = len(rows)
        if n < 3:
            raise ValueError(
                f"user {user_keys[u]!r} has {n} interactions; need >= 3 to split "
                "(run k-core filtering first)")
        n_val = int(np.floor(ratios[1] * n))
        n_test = int(np.floor(ratios[2] * n))
        n_train = n - n_val - n_test
        for pos, (ts, _, rating, item) in enumerate(rows):
            users.append(u)
            items.append(item)
            ratings.append(rating)
            stamps.append(ts)
            if pos < n_train:
                splits.append(TRAIN)
            elif pos < n_train + n_val:
                splits.append(VALIDATION)
            else:
                splits.append(TEST)
        offsets.append(len(users))

    return Dataset(
        user_keys=user_keys,
        item_keys=item_keys,
        user_of=np.asarray(users, dtype=np.int32),
        item_of=np.asarray(items, dtype=np.int32),
        rating_of=np.asarray(ratings, dtype=np.float64),
        timestamp_of=np.asarray(stamps, dtype=np.int64),
        split_of=np.asarray(splits, dtype=np.uint8),
        offsets=np.asarray(offsets, dtype=np.int64),
    )


@dataclass
class EnvSlices:
    """One user's training history as T multi-hot environments.

    `slices[t]` holds the sorted distinct item indices of environment t;
    `counts[t]` is its size (N_t). Earlier environments absorb the
    division remainder.
    """

    slices: list[np.ndarray]
    counts: np.ndarray

    @property
    def n_envs(self) -> int:
        return len(self.slices)


def divide_environments(train_items: np.ndarray, n_envs: int) -> EnvSlices:
    """Slice a chronological item sequence into contiguous environments."""
    n = len(train_items)
    if n < n_envs:
        raise InsufficientInteractions(
            f"{n} training interactions < {n_envs} environments")
    base, rem = divmod(n, n_envs)
    sizes = [base + 1 if t < rem else base for t in range(n_envs)]
    slices = []
    start = 0
    for size in sizes:
        chunk = np.unique(np.asarray(train_items[start:start + size], dtype=np.int64))
        slices.append(chunk)
        start += size
    return EnvSlices(slices, np.asarray([len(s) for s in slices], dtype=np.int64))


def to_multihot(indices: np.ndarray, n_items: int) -> np.ndarray:
    """Dense {0,1} vector with ones exactly at `indices`."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= n_items):
        raise IndexError(f"item index out of range for I={n_items}")
    vec = np.zeros(n_items, dtype=np.float64)
    vec[indices] = 1.0
    return vec


def environmentize(dataset: Dataset, n_envs: int) -> tuple[list[int], list[EnvSlices]]:
    """EnvSlices for every user with enough training interactions.

    Returns (kept user indices, slices); users below `n_envs` training
    interactions are skipped with a warning.
    """
    kept, slices = [], []
    skipped = 0
    for u in range(dataset.n_users):
        items = dataset.train_items(u)
        try:
            slices.append(divide_environments(items, n_envs))
            kept.append(u)
        except InsufficientInteractions:
            skipped += 1
    if skipped:
        log.warning("skipped %d user(s) with < %d training interactions",
                    skipped, n_envs)
    return kept, slices


# ---------------------------------------------------------------------------
# binary dataset file

def _write_keys(fh, keys: list[str]) -> None:
    for key in keys:
        raw = key.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def _read_keys(fh, count: int) -> list[str]:
    keys = []
    for _ in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        keys.append(fh.read(n).decode("utf-8"))
    return keys


def save_dataset(path, dataset: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(struct.pack("<QQQ", dataset.n_users, dataset.n_items,
                             dataset.n_interactions))
        _write_keys(fh, dataset.user_keys)
        _write_keys(fh, dataset.item_keys)
        fh.write(dataset.offsets.astype("<i8").tobytes())
        fh.write(dataset.user_of.astype("<i4").tobytes())
        fh.write(dataset.item_of.astype("<i4").tobytes())
        fh.write(dataset.rating_of.astype("<f8").tobytes())
        fh.write(dataset.timestamp_of.astype("<i8").tobytes())
        fh.write(dataset.split_of.astype("u1").tobytes())


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated dataset file")
    return raw


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a dataset file (bad magic)")
        (version,) = struct.unpack("<B", _read_exact(fh, 1))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        n_users, n_items, n_inter = struct.unpack("<QQQ", _read_exact(fh, 24))
        user_keys = _read_keys(fh, n_users)
        item_keys = _read_keys(fh, n_items)
        offsets = np.frombuffer(_read_exact(fh, 8 * (n_users + 1)), dtype="<i8")
        user_of = np.frombuffer(_read_exact(fh, 4 * n_inter), dtype="<i4")
        item_of = np.frombuffer(_read_exact(fh, 4 * n_inter), dtype="<i4")
        rating_of = np.frombuffer(_read_exact(fh, 8 * n_inter), dtype="<f8")
        timestamp_of = np.frombuffer(_read_exact(fh, 8 * n_inter), dtype="<i8")
        split_of = np.frombuffer(_read_exact(fh, n_inter), dtype="u1")
    return Dataset(user_keys, item_keys,
                   user_of.astype(np.int32), item_of.astype(np.int32),
                   rating_of.astype(np.float64), timestamp_of.astype(np.int64),
                   split_of.astype(np.uint8), offsets.astype(np.int64))


def dataset_stats(dataset: Dataset) -> str:
    counts = Counter(dataset.split_of.tolist())
    lines = [
        f"users = {dataset.n_users}",
        f"items = {dataset.n_items}",
        f"interactions = {dataset.n_interactions}",
        f"density = {dataset.n_interactions / max(1, dataset.n_users * dataset.n_items):.6f}",
    ]
    for split, name in SPLIT_NAMES.items():
        lines.append(f"{name}_interactions = {counts.get(split, 0)}")
    return "\n".join(lines) + "\n"
