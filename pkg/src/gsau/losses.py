"""Alignment / uniformity losses on the unit hypersphere and their
graph-side and sequence-side combinations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sequential import score_all_items

VARIANTS = ("gsau", "gsau_rec")
POOLINGS = ("average", "union")
ABLATIONS = ("none", "without_graph", "without_sequential", "without_rec", "without_ui_uniform")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.1
    variant: str = "gsau_rec"
    without_graph: bool = False
    without_sequential: bool = False
    without_ui_uniform: bool = False
    graph_pooling: str = "average"
    seq_pooling: str = "union"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.without_graph and self.without_sequential:
            raise ValueError("without_graph and without_sequential cannot both be set")
        if self.graph_pooling not in POOLINGS or self.seq_pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")

    @classmethod
    def from_ablation(cls, ablation: str = "none", **kwargs) -> "LossConfig":
        ablation = ablation.replace("-", "_")
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}")
        if ablation == "without_rec":
            kwargs["variant"] = "gsau"
        elif ablation != "none":
            kwargs[ablation] = True
        return cls(**kwargs)

    @property
    def uses_graph(self) -> bool:
        return not self.without_graph

    @property
    def uses_sequential(self) -> bool:
        return not self.without_sequential


@dataclass
class LossBreakdown:
    graph_align: Tensor | None
    seq_align: Tensor | None   # L_SA, or CE for the gsau_rec variant
    graph_uniform: Tensor | None
    seq_uniform: Tensor | None
    total: Tensor

    def values(self) -> dict[str, float]:
        def f(t):
            return 0.0 if t is None else float(t.data)

        return {
            "graph_align": f(self.graph_align),
            "seq_align": f(self.seq_align),
            "graph_uniform": f(self.graph_uniform),
            "seq_uniform": f(self.seq_uniform),
            "total": f(self.total),
        }


def alignment_loss(x: Tensor, x_pos: Tensor) -> Tensor:
    """Mean squared distance between unit-normalized paired rows."""
    if x.shape[0] == 0:
        raise ValueError("alignment_loss: no pairs")
    return ad.mean(ad.squared_row_distance(ad.l2_normalize(x), ad.l2_normalize(x_pos)))


def _within_terms(x: Tensor) -> Tensor | None:
    n = x.shape[0]
    if n < 2:
        return None
    xn = ad.l2_normalize(x)
    i, j = np.triu_indices(n, k=1)
    return ad.scale(ad.take(ad.pairwise_sq_dist(xn, xn), i * n + j), -2.0)


def _cross_terms(x: Tensor, y: Tensor, cross_mask: np.ndarray | None) -> Tensor | None:
    n, m = x.shape[0], y.shape[0]
    if cross_mask is None:
        cross_mask = np.ones((n, m), dtype=bool)
    if cross_mask.shape != (n, m):
        raise ad.ShapeError(f"cross mask {cross_mask.shape} vs pair grid {(n, m)}")
    flat = np.flatnonzero(cross_mask)
    if flat.size == 0:
        return None
    d = ad.pairwise_sq_dist(ad.l2_normalize(x), ad.l2_normalize(y))
    return ad.scale(ad.take(d, flat), -2.0)


def uniformity_terms(
    x: Tensor,
    y: Tensor | None = None,
    mode: str = "within_x",
    cross_mask: np.ndarray | None = None,
) -> list[Tensor]:
    """Per-subset vectors of -2 * ||f(a) - f(b)||^2 over the requested pairs.

    within_* use every unordered pair of distinct rows; cross uses (x_r, y_c)
    wherever ``cross_mask[r, c]`` is set (all pairs by default); union is
    all three.
    """
    if mode not in ("within_x", "within_y", "cross", "union"):
        raise ValueError(f"unknown pair mode {mode!r}")
    if mode != "within_x" and y is None:
        raise ValueError(f"pair mode {mode!r} needs a second set")
    parts = []
    if mode in ("within_x", "union"):
        parts.append(_within_terms(x))
    if mode in ("within_y", "union"):
        parts.append(_within_terms(y))
    if mode in ("cross", "union"):
        parts.append(_cross_terms(x, y, cross_mask))
    return [p for p in parts if p is not None]


def pooled_uniformity(parts: list[Tensor], pooling: str) -> Tensor:
    """``union``: one log-mean-exp over all pair terms; ``average``: mean of
    per-subset log-mean-exps."""
    if not parts:
        raise ValueError("uniformity: no pairs")
    if pooling == "union":
        return ad.log_mean_exp(parts[0] if len(parts) == 1 else ad.concat(parts))
    total = ad.log_mean_exp(parts[0])
    for p in parts[1:]:
        total = ad.add(total, ad.log_mean_exp(p))
    return ad.scale(total, 1.0 / len(parts))


def uniformity_loss(
    x: Tensor,
    y: Tensor | None = None,
    mode: str = "within_x",
    cross_mask: np.ndarray | None = None,
) -> Tensor:
    return pooled_uniformity(uniformity_terms(x, y, mode, cross_mask), "union")


def graph_losses(
    user_out: Tensor,
    item_out: Tensor,
    users: np.ndarray,
    items: np.ndarray,
    pooling: str = "average",
) -> tuple[Tensor, Tensor]:
    """(L_GA, L_GU) for a batch of observed (users[b], items[b]) edges.

    ``user_out`` / ``item_out`` are the full propagated user and item blocks.
    Uniformity pairs come from the distinct users and distinct items of the batch.
    """
    align = alignment_loss(ad.embedding_lookup(user_out, users), ad.embedding_lookup(item_out, items))
    uu, ui = np.unique(users), np.unique(items)
    if len(uu) < 2 or len(ui) < 2:
        raise ValueError("graph uniformity needs at least two distinct users and two distinct items")
    parts = [
        _within_terms(ad.embedding_lookup(user_out, uu)),
        _within_terms(ad.embedding_lookup(item_out, ui)),
    ]
    return align, pooled_uniformity(parts, pooling)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    B, M = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (B,):
        raise ad.ShapeError(f"cross_entropy: {targets.shape} targets for {B} rows")
    picked = ad.take(ad.log_softmax(logits), np.arange(B) * M + targets)
    return ad.scale(ad.mean(picked), -1.0)


def sequential_losses(
    seq_reps: Tensor,
    item_table: Tensor,
    targets: np.ndarray,
    history_mask: np.ndarray | None,
    config: LossConfig,
) -> tuple[Tensor, Tensor]:
    """(L_SA or CE, L_SU) for a batch of encoded prefixes.

    ``history_mask[b, k]`` is True when the k-th distinct batch target
    (``np.unique(targets)`` order) belongs to instance b's user history; those
    item-sequence pairs are left out of the cross subset.
    """
    if config.variant == "gsau_rec":
        first = cross_entropy(score_all_items(seq_reps, item_table), targets)
    else:
        first = alignment_loss(seq_reps, ad.embedding_lookup(item_table, targets))

    items = np.unique(targets)
    item_rows = ad.embedding_lookup(item_table, items)
    parts = [_within_terms(item_rows), _within_terms(seq_reps)]
    if not config.without_ui_uniform:
        cross_ok = None if history_mask is None else ~history_mask.T
        parts.append(_cross_terms(item_rows, seq_reps, cross_ok))
    parts = [p for p in parts if p is not None]
    return first, pooled_uniformity(parts, config.seq_pooling)


def total_loss(
    graph_align: Tensor | None,
    seq_align: Tensor | None,
    graph_uniform: Tensor | None,
    seq_uniform: Tensor | None,
    config: LossConfig,
) -> LossBreakdown:
    """L_GA + L_SA + gamma * (L_GU + L_SU), dropping terms disabled by ablation."""
    if config.without_graph:
        graph_align = graph_uniform = None
    if config.without_sequential:
        seq_align = seq_uniform = None

    def _sum(ts):
        ts = [t for t in ts if t is not None]
        if not ts:
            return None
        out = ts[0]
        for t in ts[1:]:
            out = ad.add(out, t)
        return out

    aligned = _sum([graph_align, seq_align])
    uniform = _sum([graph_uniform, seq_uniform])
    if uniform is not None:
        uniform = ad.scale(uniform, config.gamma)
    total = _sum([aligned, uniform])
    if total is None:
        raise ValueError("total_loss: no active loss terms")
    return LossBreakdown(graph_align, seq_align, graph_uniform, seq_uniform, total)
