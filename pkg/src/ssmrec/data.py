"""Interaction data: parsing, k-core filtering, leave-one-out splits and
next-item training samples.

Item and user ids are remapped to dense integers starting at 1; 0 is the
padding slot.  Vocabulary sizes reported by :func:`summary` include that
slot, so a dataset with 6040 users and 3416 items reports 6041 / 3417.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .models import pad_batch

FORMATS = ("movielens-100k", "movielens-1m", "amazon-csv")
DEFAULT_MIN_INTERACTIONS = 5


class DatasetError(ValueError):
    pass


@dataclass
class InteractionSequence:
    user: int
    items: list[int]
    ratings: list[float]
    timestamps: list[int]

    def __post_init__(self):
        if not len(self.items) == len(self.ratings) == len(self.timestamps):
            raise ValueError("items, ratings and timestamps must have equal length")
        if any(b < a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError(f"user {self.user}: timestamps are not chronological")

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Dataset:
    sequences: list[InteractionSequence]
    user_ids: list[str]  # raw id of dense user u is user_ids[u - 1]
    item_ids: list[str]  # raw id of dense item i is item_ids[i - 1]
    format: str = ""

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def __iter__(self) -> Iterator[InteractionSequence]:
        return iter(self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)


# ---------------------------------------------------------------- parsing


def _parse_rows(path: Path, fmt: str) -> list[tuple[str, str, float, int]]:
    rows = []
    with open(path, newline="", encoding="utf-8", errors="replace") as fh:
        if fmt == "amazon-csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DatasetError(f"{path}: empty dataset")
            header = [h.strip().lower() for h in header]
            want = ("user", "item", "rating", "timestamp")
            if tuple(header[:4]) != want:
                raise DatasetError(f"{path}:1: expected header {','.join(want)}, got {','.join(header)}")
            lines = ((reader.line_num, rec) for rec in reader)
        else:
            sep = "\t" if fmt == "movielens-100k" else "::"
            lines = ((n, line.rstrip("\r\n").split(sep)) for n, line in enumerate(fh, start=1))
        for lineno, parts in lines:
            if not parts or parts == [""]:
                continue
            if len(parts) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            user, item, rating, ts = (p.strip() for p in parts)
            try:
                r = float(rating)
                t = int(float(ts))
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: malformed rating or timestamp") from None
            if not user or not item:
                raise DatasetError(f"{path}:{lineno}: empty user or item id")
            if not 1.0 <= r <= 5.0:
                raise DatasetError(f"{path}:{lineno}: rating {rating} outside [1, 5]")
            rows.append((user, item, r, t))
    return rows


def _id_key(raw: str):
    # numeric ids sort numerically, anything else lexicographically after them
    return (0, int(raw), "") if raw.isdigit() else (1, 0, raw)


def kcore(rows: list[tuple[str, str, float, int]], k: int) -> list[tuple[str, str, float, int]]:
    """Repeatedly drop users and items with fewer than ``k`` interactions."""
    if k <= 1:
        return rows
    while True:
        users = Counter(r[0] for r in rows)
        items = Counter(r[1] for r in rows)
        kept = [r for r in rows if users[r[0]] >= k and items[r[1]] >= k]
        if len(kept) == len(rows):
            return kept
        rows = kept


def detect_format(path: str | Path) -> str:
    name = Path(path).name.lower()
    if name.endswith(".csv"):
        return "amazon-csv"
    if name.endswith(".dat"):
        return "movielens-1m"
    return "movielens-100k"


def load_dataset(
    path: str | Path,
    fmt: str | None = None,
    min_interactions: int = DEFAULT_MIN_INTERACTIONS,
) -> Dataset:
    """Parse a ratings file into per-user chronological sequences.

    Users and items with fewer than ``min_interactions`` events are removed
    iteratively (k-core); pass 1 to keep everything.
    """
    path = Path(path)
    fmt = fmt or detect_format(path)
    if fmt not in FORMATS:
        raise DatasetError(f"unknown dataset format {fmt!r}; expected one of {', '.join(FORMATS)}")
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such dataset file")
    rows = kcore(_parse_rows(path, fmt), min_interactions)
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    user_ids = sorted({r[0] for r in rows}, key=_id_key)
    item_ids = sorted({r[1] for r in rows}, key=_id_key)
    umap = {u: i for i, u in enumerate(user_ids, start=1)}
    imap = {v: i for i, v in enumerate(item_ids, start=1)}
    per_user: dict[int, list[tuple[int, int, float]]] = {}
    for user, item, rating, ts in rows:
        per_user.setdefault(umap[user], []).append((ts, imap[item], rating))
    sequences = []
    for u in sorted(per_user):
        events = sorted(per_user[u], key=lambda e: e[0])  # stable: file order breaks ties
        sequences.append(
            InteractionSequence(
                user=u,
                items=[e[1] for e in events],
                ratings=[e[2] for e in events],
                timestamps=[e[0] for e in events],
            )
        )
    return Dataset(sequences=sequences, user_ids=user_ids, item_ids=item_ids, format=fmt)


def summary(dataset: Dataset) -> dict[str, int]:
    """Vocabulary sizes (padding slot included) and interaction count."""
    return {"users": dataset.n_users + 1, "items": dataset.n_items + 1, "reviews": dataset.n_interactions}


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class EvalCase:
    user: int
    history: tuple[int, ...]
    target: int


@dataclass
class Split:
    train: list[InteractionSequence]
    valid: list[EvalCase]
    test: list[EvalCase]
    dropped: int = 0
    n_items: int = 0

    def __iter__(self):
        return iter((self.train, self.valid, self.test))


def leave_one_out_split(sequences: Sequence[InteractionSequence], min_length: int = 3) -> Split:
    """Last item is the test target, the one before it the validation target."""
    if min_length < 3:
        raise ValueError("min_length must be at least 3")
    train, valid, test = [], [], []
    dropped = 0
    n_items = 0
    for s in sequences:
        if len(s) < min_length:
            dropped += 1
            continue
        n_items = max(n_items, max(s.items))
        train.append(InteractionSequence(s.user, s.items[:-2], s.ratings[:-2], s.timestamps[:-2]))
        valid.append(EvalCase(s.user, tuple(s.items[:-2]), s.items[-2]))
        test.append(EvalCase(s.user, tuple(s.items[:-1]), s.items[-1]))
    if isinstance(sequences, Dataset):
        n_items = sequences.n_items
    return Split(train=train, valid=valid, test=test, dropped=dropped, n_items=n_items)


@dataclass
class TrainingSamples:
    ids: np.ndarray  # [S, L] left-padded histories
    targets: np.ndarray  # [S]
    users: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.targets)


def build_training_samples(train: Sequence[InteractionSequence], max_len: int, stride: int = 1) -> TrainingSamples:
    """Every prefix of each training sequence predicts the item after it.

    With ``stride > 1`` only every ``stride``-th cut point is kept, counted
    back from the end so the full sequence is always used.
    """
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    histories, targets, users = [], [], []
    for s in train:
        for cut in range(len(s.items) - 1, 0, -stride):
            histories.append(s.items[:cut])
            targets.append(s.items[cut])
            users.append(s.user)
    return TrainingSamples(
        ids=pad_batch(histories, max_len),
        targets=np.asarray(targets, dtype=np.int64),
        users=np.asarray(users, dtype=np.int64),
    )
