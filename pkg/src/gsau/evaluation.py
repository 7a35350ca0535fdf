"""Full-catalog leave-one-out ranking with Recall@k and NDCG@k."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_KS = (10, 20, 50)

ScoreFn = Callable[[np.ndarray, list], np.ndarray]


def recall_at_k(rank: int, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def rank_items(scores: np.ndarray, exclude: Sequence[int] = ()) -> np.ndarray:
    """Item indices by descending score, ties by ascending index, ``exclude`` removed."""
    keep = np.ones(len(scores), dtype=bool)
    keep[np.asarray(exclude, dtype=np.int64)] = False
    idx = np.flatnonzero(keep)
    return idx[np.lexsort((idx, -scores[idx]))]


def target_ranks(scores: np.ndarray, targets: np.ndarray, excludes: Sequence[np.ndarray]) -> np.ndarray:
    """1-based rank of each row's target among non-excluded items."""
    scores = np.array(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValueError("NaN score")
    B, M = scores.shape
    rows = np.arange(B)
    t_score = scores[rows, targets]
    for b, ex in enumerate(excludes):
        ex = np.asarray(ex, dtype=np.int64)
        scores[b, ex[ex != targets[b]]] = -np.inf
    cols = np.arange(M)[None, :]
    ahead = (scores > t_score[:, None]) | ((scores == t_score[:, None]) & (cols < targets[:, None]))
    return ahead.sum(axis=1) + 1


@dataclass
class MetricsReport:
    split: str
    epoch: int | None
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        d["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        return json.dumps(d, sort_keys=True)

    def row(self, ks: Sequence[int] = (10, 50)) -> dict[str, float]:
        out = {f"R@{k}": self.recall[k] for k in ks}
        out.update({f"N@{k}": self.ndcg[k] for k in ks})
        return out


def format_table(reports: dict[str, MetricsReport], ks: Sequence[int] = (10, 50)) -> str:
    """Plain-text table with one row per named report."""
    cols = [f"R@{k}" for k in ks] + [f"N@{k}" for k in ks]
    width = max([len("Method")] + [len(n) for n in reports]) + 2
    lines = ["Method".ljust(width) + "".join(c.rjust(9) for c in cols)]
    for name, rep in reports.items():
        row = rep.row(ks)
        lines.append(name.ljust(width) + "".join(f"{row[c]:9.4f}" for c in cols))
    return "\n".join(lines)


def evaluate(
    dataset,
    split: str,
    score_fn: ScoreFn,
    ks: Sequence[int] = DEFAULT_KS,
    batch_size: int = 256,
    workers: int = 1,
    epoch: int | None = None,
    meta: dict | None = None,
) -> MetricsReport:
    """Mean per-user Recall@k / NDCG@k on the ``valid`` or ``test`` split.

    Candidates are the whole catalog minus the user's history (train items,
    plus the validation item when scoring test); the target is never masked.
    """
    targets = dataset.target(split)
    n = len(targets)
    if n == 0:
        raise ValueError("empty split")
    chunks = [np.arange(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]

    def run(users):
        hist = [dataset.history(int(u), split) for u in users]
        return target_ranks(score_fn(users, hist), targets[users], hist)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            ranks = np.concatenate(list(pool.map(run, chunks)))
    else:
        ranks = np.concatenate([run(c) for c in chunks])
    return metrics_from_ranks(ranks, ks, split, epoch, meta)


def metrics_from_ranks(ranks, ks=DEFAULT_KS, split="test", epoch=None, meta=None) -> MetricsReport:
    ranks = np.asarray(ranks)
    recall = {k: float(np.mean(ranks <= k)) for k in ks}
    ndcg = {k: float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0))) for k in ks}
    return MetricsReport(split, epoch, recall, ndcg, len(ranks), dict(meta or {}))
