"""LightGCN propagation over the shared embedding table."""

from __future__ import annotations

from dataclasses import dataclass

import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class GraphEncoderConfig:
    n_layers: int = 2
    layer_combination: str = "mean"  # or "last"

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.layer_combination not in ("mean", "last"):
            raise ValueError(f"unknown layer_combination {self.layer_combination!r}")


def propagate(emb: Tensor, adj: sp.spmatrix, config: GraphEncoderConfig = GraphEncoderConfig()) -> Tensor:
    """E^(l+1) = adj @ E^(l); returns the mean over layers 0..L (or layer L)."""
    if adj.shape != (emb.shape[0], emb.shape[0]):
        raise ad.ShapeError(f"propagate: adjacency {adj.shape} vs embeddings {emb.shape}")
    layers = [emb]
    for _ in range(config.n_layers):
        layers.append(ad.spmm(adj, layers[-1]))
    if config.layer_combination == "last" or config.n_layers == 0:
        return layers[-1]
    total = layers[0]
    for layer in layers[1:]:
        total = ad.add(total, layer)
    return ad.scale(total, 1.0 / len(layers))


def user_item_split(x: Tensor, n_users: int) -> tuple[Tensor, Tensor]:
    return ad.slice_rows(x, 0, n_users), ad.slice_rows(x, n_users, x.shape[0])
