"""Interaction-log ingestion, k-core filtering, leave-one-out splits,
normalized bipartite adjacency and training batches."""

from __future__ import annotations

import csv
import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
SNAPSHOT_MAGIC = "GSAU-DATASET"
MALFORMED_LIMIT = 0.01
DELIMITERS = {"tsv": "\t", "csv": ","}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int


def ingest(
    path: str | Path,
    fmt: str = "tsv",
    columns: Sequence[int] = (0, 1, 2),
    delimiter: str | None = None,
) -> list[Interaction]:
    """Parse a delimited (user, item, timestamp) log.

    ``columns`` gives the field positions of user, item and timestamp. Records
    come back in file order with duplicate (user, item) pairs collapsed onto
    their earliest timestamp (first occurrence on ties).
    """
    if delimiter is None:
        if fmt not in DELIMITERS:
            raise DataError(f"unknown format {fmt!r}; expected one of {sorted(DELIMITERS)}")
        delimiter = DELIMITERS[fmt]
    ucol, icol, tcol = columns
    need = max(columns) + 1

    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    records: list[Interaction] = []
    bad: list[tuple[int, str]] = []
    n_lines = 0
    with fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            n_lines += 1
            if len(row) < need:
                bad.append((lineno, delimiter.join(row)))
                continue
            try:
                ts = int(row[tcol])
            except ValueError:
                bad.append((lineno, delimiter.join(row)))
                continue
            user, item = row[ucol].strip(), row[icol].strip()
            if not user or not item:
                bad.append((lineno, delimiter.join(row)))
                continue
            records.append(Interaction(user, item, ts))

    if bad:
        log.warning("%s: %d malformed line(s) skipped", path, len(bad))
        if len(bad) > MALFORMED_LIMIT * n_lines:
            head = "; ".join(f"line {n}: {text!r}" for n, text in bad[:5])
            raise DataError(f"{len(bad)}/{n_lines} malformed lines in {path}: {head}")
    if not records:
        raise DataError(f"no interactions in {path}")
    return dedupe(records)


def dedupe(records: Sequence[Interaction]) -> list[Interaction]:
    first: dict[tuple[str, str], int] = {}
    for pos, r in enumerate(records):
        key = (r.user, r.item)
        prev = first.get(key)
        if prev is None or r.timestamp < records[prev].timestamp:
            first[key] = pos
    return [records[p] for p in sorted(first.values())]


def five_core_filter(interactions: Sequence[Interaction], k: int = 5) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions until none remain."""
    if not interactions:
        raise DataError("no interactions")
    kept = list(interactions)
    while True:
        ucount = Counter(r.user for r in kept)
        icount = Counter(r.item for r in kept)
        nxt = [r for r in kept if ucount[r.user] >= k and icount[r.item] >= k]
        if len(nxt) == len(kept):
            break
        kept = nxt
    if not kept:
        raise DataError(f"{k}-core filtering removed every interaction")
    return kept


@dataclass
class Dataset:
    n_users: int
    n_items: int
    user_ids: list[str]
    item_ids: list[str]
    # per-user chronological item indices / timestamps (full history)
    sequences: list[np.ndarray]
    timestamps: list[np.ndarray]
    train: list[np.ndarray] = field(init=False)
    valid: np.ndarray = field(init=False)
    test: np.ndarray = field(init=False)

    def __post_init__(self):
        self.train, self.valid, self.test = leave_one_out_split(self.sequences)
        self.user_index = {u: n for n, u in enumerate(self.user_ids)}
        self.item_index = {i: n for n, i in enumerate(self.item_ids)}

    @property
    def n_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def train_pairs(self) -> np.ndarray:
        """[n, 2] array of (user, item) training edges."""
        users = np.concatenate([np.full(len(s), u) for u, s in enumerate(self.train)])
        items = np.concatenate(self.train)
        return np.stack([users, items], axis=1).astype(np.int64)

    def train_matrix(self) -> sp.csr_matrix:
        pairs = self.train_pairs()
        data = np.ones(len(pairs), dtype=np.float32)
        return sp.csr_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(self.n_users, self.n_items))

    def history(self, user: int, split: str) -> np.ndarray:
        """Items the model may see before predicting ``split``'s target."""
        if split == "valid":
            return self.train[user]
        if split == "test":
            return np.append(self.train[user], self.valid[user])
        raise ValueError(f"unknown split {split!r}")

    def target(self, split: str) -> np.ndarray:
        return {"valid": self.valid, "test": self.test}[split]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.n_users},{self.n_items}".encode())
        for seq in self.sequences:
            h.update(np.asarray(seq, dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]

    def summary(self) -> dict:
        n = self.n_interactions
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": n,
            "density": n / (self.n_users * self.n_items),
        }


def build_dataset(interactions: Sequence[Interaction]) -> Dataset:
    """Index users/items by first appearance and order each user's items by
    timestamp; equal timestamps keep input order."""
    if not interactions:
        raise DataError("no interactions")
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    per_user: dict[int, list[tuple[int, int, int]]] = {}
    for pos, r in enumerate(interactions):
        u = users.setdefault(r.user, len(users))
        i = items.setdefault(r.item, len(items))
        per_user.setdefault(u, []).append((r.timestamp, pos, i))
    seqs, stamps = [], []
    for u in range(len(users)):
        rows = sorted(per_user[u])
        stamps.append(np.array([t for t, _, _ in rows], dtype=np.int64))
        seqs.append(np.array([i for _, _, i in rows], dtype=np.int64))
    return Dataset(len(users), len(items), list(users), list(items), seqs, stamps)


def leave_one_out_split(sequences: Sequence[np.ndarray]):
    """Last item -> test, second to last -> validation, rest -> train."""
    train, valid, test = [], [], []
    for u, seq in enumerate(sequences):
        if len(seq) < 3:
            raise DataError(f"user {u} has {len(seq)} interactions; need at least 3")
        train.append(np.asarray(seq[:-2], dtype=np.int64))
        valid.append(int(seq[-2]))
        test.append(int(seq[-1]))
    return train, np.array(valid, dtype=np.int64), np.array(test, dtype=np.int64)


def build_normalized_adjacency(pairs: np.ndarray, n_users: int, n_items: int) -> sp.csr_matrix:
    """Symmetric D^-1/2 A D^-1/2 over users (rows 0..N) then items (N..N+M).

    Nodes without edges keep all-zero rows.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs):
        if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n_users:
            raise DataError("user index out of range")
        if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= n_items:
            raise DataError("item index out of range")
    pairs = np.unique(pairs, axis=0)
    n = n_users + n_items
    rows = np.concatenate([pairs[:, 0], n_users + pairs[:, 1]])
    cols = np.concatenate([n_users + pairs[:, 1], pairs[:, 0]])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    w = 1.0 / np.sqrt(deg[rows] * deg[cols])
    return sp.csr_matrix((w, (rows, cols)), shape=(n, n))


@dataclass
class Batch:
    users: np.ndarray       # [B]
    prefixes: np.ndarray    # [B, T] item indices, left-padded with 0
    mask: np.ndarray        # [B, T] True where a real item sits
    targets: np.ndarray     # [B]
    lengths: np.ndarray     # [B]

    def __len__(self):
        return len(self.users)


def pad_left(seqs: Sequence[np.ndarray], width: int | None = None):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if width is None else width
    out = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        if len(s):
            out[r, width - len(s):] = s
            mask[r, width - len(s):] = True
    return out, mask, lengths


def training_instances(dataset: Dataset, mode: str = "per-prefix") -> np.ndarray:
    """[n, 2] array of (user, position of target in the train sequence)."""
    rows = []
    for u, seq in enumerate(dataset.train):
        if mode == "per-prefix":
            rows.extend((u, t) for t in range(1, len(seq)))
        elif mode == "last-only":
            if len(seq) >= 2:
                rows.append((u, len(seq) - 1))
        else:
            raise ValueError(f"unknown instance mode {mode!r}")
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def make_batches(
    dataset: Dataset,
    batch_size: int,
    max_seq_len: int,
    seed: int,
    mode: str = "per-prefix",
    instances: np.ndarray | None = None,
) -> Iterator[Batch]:
    """Shuffle the training instances with ``seed`` and yield padded batches."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    if instances is None:
        instances = training_instances(dataset, mode)
    order = np.random.default_rng(seed).permutation(len(instances))
    bounds = list(range(0, len(order), batch_size)) + [len(order)]
    tail = instances[order[bounds[-2]:]] if len(bounds) > 2 else None
    if tail is not None and _degenerate(dataset, tail):
        # uniformity needs two distinct users and items; fold a degenerate tail into its predecessor
        del bounds[-2]
    for start, stop in zip(bounds[:-1], bounds[1:]):
        chunk = instances[order[start:stop]]
        prefixes, targets = [], []
        for u, t in chunk:
            seq = dataset.train[u]
            prefixes.append(seq[max(0, t - max_seq_len):t])
            targets.append(seq[t])
        pref, mask, lengths = pad_left(prefixes)
        yield Batch(chunk[:, 0].copy(), pref, mask, np.array(targets, dtype=np.int64), lengths)


def _degenerate(dataset: Dataset, chunk: np.ndarray) -> bool:
    targets = {int(dataset.train[u][t]) for u, t in chunk}
    return len(np.unique(chunk[:, 0])) < 2 or len(targets) < 2


def save_snapshot(dataset: Dataset, path: str | Path) -> None:
    lengths = np.array([len(s) for s in dataset.sequences], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            magic=np.array(SNAPSHOT_MAGIC),
            version=np.array(SNAPSHOT_VERSION, dtype=np.int64),
            user_ids=np.array(dataset.user_ids, dtype=str),
            item_ids=np.array(dataset.item_ids, dtype=str),
            lengths=lengths,
            items=np.concatenate(dataset.sequences),
            timestamps=np.concatenate(dataset.timestamps),
        )


def is_snapshot(path: str | Path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == b"PK\x03\x04"
    except OSError:
        return False


def load_snapshot(path: str | Path) -> Dataset:
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read snapshot {path}: {exc}") from exc
    with z:
        if "magic" not in z or str(z["magic"]) != SNAPSHOT_MAGIC:
            raise DataError(f"{path} is not a dataset snapshot")
        version = int(z["version"])
        if version != SNAPSHOT_VERSION:
            raise DataError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
        bounds = np.cumsum(z["lengths"])[:-1]
        seqs = np.split(z["items"], bounds)
        stamps = np.split(z["timestamps"], bounds)
        return Dataset(
            len(z["user_ids"]),
            len(z["item_ids"]),
            [str(u) for u in z["user_ids"]],
            [str(i) for i in z["item_ids"]],
            [s.astype(np.int64) for s in seqs],
            [t.astype(np.int64) for t in stamps],
        )


def load_dataset(
    path: str | Path,
    fmt: str = "tsv",
    columns: Sequence[int] = (0, 1, 2),
    delimiter: str | None = None,
    core: int = 5,
) -> Dataset:
    """Load a snapshot directly, or ingest + filter a raw log."""
    if is_snapshot(path):
        return load_snapshot(path)
    return build_dataset(five_core_filter(ingest(path, fmt, columns, delimiter), core))


def subsample_users(interactions: Sequence[Interaction], n_users: int, seed: int) -> list[Interaction]:
    users = sorted({r.user for r in interactions})
    if n_users >= len(users):
        return list(interactions)
    rng = np.random.default_rng(seed)
    keep = set(rng.choice(users, size=n_users, replace=False).tolist())
    return [r for r in interactions if r.user in keep]
