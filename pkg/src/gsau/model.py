"""Shared embedding table plus graph and sequence encoders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import Batch, pad_left
from .graph import GraphEncoderConfig, propagate, user_item_split
from .losses import LossBreakdown, LossConfig, graph_losses, sequential_losses, total_loss
from .sequential import SeqEncoderConfig, encode, init_seq_params, truncated_normal

SCORING_HEADS = ("sequential", "graph", "sum")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    graph: GraphEncoderConfig = field(default_factory=GraphEncoderConfig)
    seq: SeqEncoderConfig = field(default_factory=SeqEncoderConfig)

    def __post_init__(self):
        if self.seq.hidden_dim != self.dim:
            raise ValueError(f"sequence hidden_dim {self.seq.hidden_dim} != embedding dim {self.dim}")


def init_parameters(n_users: int, n_items: int, config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Embedding table (users then items) and encoder weights, all truncated N(0, 0.02)."""
    if n_users < 1 or n_items < 1:
        raise ValueError("need at least one user and one item")
    rng = np.random.default_rng(seed)
    params = {"emb": Tensor(truncated_normal(rng, (n_users + n_items, config.dim), dtype=dtype), requires_grad=True)}
    params.update(init_seq_params(config.seq, rng, dtype=dtype))
    return params


class GSAUModel:
    def __init__(
        self,
        n_users: int,
        n_items: int,
        adj: sp.spmatrix,
        config: ModelConfig = ModelConfig(),
        seed: int = 0,
        dtype=np.float32,
        train_matrix: sp.spmatrix | None = None,
    ):
        self.n_users, self.n_items = n_users, n_items
        self.adj = adj.astype(dtype).tocsr()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = init_parameters(n_users, n_items, config, seed, dtype)
        # user x item membership of training histories, for the cross uniformity subset
        self.train_matrix = None if train_matrix is None else sp.csr_matrix(train_matrix, dtype=bool)

    @classmethod
    def for_dataset(cls, dataset, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        from .data import build_normalized_adjacency

        adj = build_normalized_adjacency(dataset.train_pairs(), dataset.n_users, dataset.n_items)
        return cls(dataset.n_users, dataset.n_items, adj, config, seed, dtype, dataset.train_matrix())

    @property
    def emb(self) -> Tensor:
        return self.params["emb"]

    def item_table(self) -> Tensor:
        return ad.slice_rows(self.emb, self.n_users, self.n_users + self.n_items)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def propagated(self) -> tuple[Tensor, Tensor]:
        return user_item_split(propagate(self.emb, self.adj, self.config.graph), self.n_users)

    def encode(self, prefixes: np.ndarray, mask: np.ndarray, rng=None, item_table: Tensor | None = None) -> Tensor:
        if item_table is None:
            item_table = self.item_table()
        return encode(self.params, item_table, prefixes, mask, self.config.seq, rng)

    def history_mask(self, users: np.ndarray, items: np.ndarray) -> np.ndarray | None:
        if self.train_matrix is None:
            return None
        return self.train_matrix[users][:, items].toarray()

    def losses(self, batch: Batch, config: LossConfig, rng: np.random.Generator | None = None) -> LossBreakdown:
        parts = {}
        try:
            ga = gu = sa = su = None
            if config.uses_graph:
                users_out, items_out = self.propagated()
                ga, gu = graph_losses(users_out, items_out, batch.users, batch.targets, config.graph_pooling)
                parts.update(graph_align=ga.item(), graph_uniform=gu.item())
            if config.uses_sequential:
                table = self.item_table()
                reps = self.encode(batch.prefixes, batch.mask, rng, table)
                hist = self.history_mask(batch.users, np.unique(batch.targets))
                sa, su = sequential_losses(reps, table, batch.targets, hist, config)
                parts.update(seq_align=sa.item(), seq_uniform=su.item())
            return total_loss(ga, sa, gu, su, config)
        except NumericError as exc:
            raise NumericError(f"{exc}; component losses so far: {parts}") from exc

    def scorer(self, head: str = "sequential", cosine: bool = False):
        """Return ``score(users, histories) -> [B, M]`` over a frozen snapshot.

        The graph head is always cosine; ``cosine`` applies to the sequence head.
        """
        if head not in SCORING_HEADS:
            raise ValueError(f"unknown scoring head {head!r}")
        max_len = self.config.seq.max_seq_len
        with ad.no_grad():
            items = self.item_table().data
            if head in ("graph", "sum"):
                u_out, i_out = self.propagated()
                u_unit = _unit(u_out.data)
                i_unit = _unit(i_out.data)
        seq_items = _unit(items) if cosine else items

        def score(users: np.ndarray, histories: list[np.ndarray]) -> np.ndarray:
            total = np.zeros((len(users), self.n_items), dtype=np.float64)
            if head in ("sequential", "sum"):
                pref, mask, _ = pad_left([h[-max_len:] for h in histories])
                with ad.no_grad():
                    reps = self.encode(pref, mask).data
                if cosine:
                    reps = _unit(reps)
                total += reps @ seq_items.T
            if head in ("graph", "sum"):
                total += u_unit[users] @ i_unit.T
            return total

        return score


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n < ad.NORM_EPS, 1, n)
