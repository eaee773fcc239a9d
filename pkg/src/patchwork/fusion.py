"""Graph fusion of modality latents, and the product-of-experts baseline.

Each conditional modality is a node of a complete graph. Every modality to be
imputed joins as a virtual node wired to all conditional nodes (never to other
virtual nodes) and starts from a standard-normal draw. A stack of identical
blocks then runs

    grouped GCN conv -> channel shuffle -> FFN (residual) -> LayerNorm

and the final virtual-node features are the imputed latents.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, PreconditionError
from .numeric import (DimensionError, Parameter, Tensor, add, as_tensor, concat, div, einsum2,
                      exp, layer_norm, left_matmul, linear, log, mul, permute_last, relu,
                      reshape, take_rows)


@dataclass
class FusionGraph:
    node_ids: list[int]
    cond_count: int
    target_count: int
    adjacency: np.ndarray = field(repr=False)


def build_graph(cond_ids: Iterable[int], target_ids: Iterable[int] = ()) -> FusionGraph:
    """Complete graph over ``cond_ids`` plus one virtual node per target id.

    Nodes are ordered conditionals first, each group sorted. Self-loops are
    added to every node before symmetric normalization.
    """
    cond, target = sorted(set(cond_ids)), sorted(set(target_ids))
    if not cond:
        raise PreconditionError("fusion needs at least one conditional modality")
    if set(cond) & set(target):
        raise PreconditionError(f"modalities {sorted(set(cond) & set(target))} are both conditional and target")
    c, t = len(cond), len(target)
    A = np.zeros((c + t, c + t))
    A[:c, :c] = 1.0
    A[c:, :c] = 1.0
    A[:c, c:] = 1.0
    A[np.diag_indices(c + t)] = 1.0
    inv_sqrt = 1.0 / np.sqrt(A.sum(axis=1))
    return FusionGraph(cond + target, c, t, A * inv_sqrt[:, None] * inv_sqrt[None, :])


def init_target_nodes(target_count: int, d: int, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """Standard-normal virtual-node features, shape (target_count, d) or (target_count, batch, d)."""
    if d < 1:
        raise ConfigurationError("latent dim must be >= 1")
    shape = (target_count, d) if batch is None else (target_count, batch, d)
    return rng.standard_normal(shape)


def shuffle_permutation(d: int, groups: int) -> np.ndarray:
    if groups < 1 or d % groups:
        raise ConfigurationError(f"groups ({groups}) must divide the channel count ({d})")
    return np.arange(d).reshape(groups, d // groups).T.reshape(-1)


def channel_shuffle(H: Tensor, groups: int) -> Tensor:
    """Reshape channels to (groups, d/groups), transpose, flatten."""
    H = as_tensor(H)
    return permute_last(H, shuffle_permutation(H.shape[-1], groups))


def grouped_gcn(H: Tensor, adjacency: np.ndarray, W: Tensor) -> Tensor:
    """``ReLU(Â H_k W_k)`` for each channel group ``k``, groups concatenated.

    ``H`` is (N, d) or (N, batch, d) with nodes on the first axis; ``W`` holds
    one square block per group, shape (g, d/g, d/g).
    """
    H = as_tensor(H)
    g, c, c2 = W.shape
    d = H.shape[-1]
    if c != c2 or g * c != d:
        raise ConfigurationError(f"group weights {W.shape} do not tile {d} channels")
    N = H.shape[0]
    if adjacency.shape != (N, N):
        raise DimensionError(f"adjacency {adjacency.shape} does not match {N} nodes")
    rows = int(np.prod(H.shape[:-1]))
    mixed = einsum2("pgi,gij->pgj", reshape(H, (rows, g, c)), W)
    propagated = left_matmul(adjacency, reshape(mixed, (N, rows // N * d)))
    return relu(reshape(propagated, H.shape))


class FusionStack:
    """``n_blocks`` identical fusion blocks over ``latent_dim`` channels.

    Parameter names are ``fusion.block<k>.<conv|ffn1|ffn2|norm>.<...>``.
    """

    def __init__(self, latent_dim: int = 16, n_blocks: int = 2, groups: int = 4,
                 ffn_hidden: int | None = None, rng: np.random.Generator | None = None):
        if n_blocks < 1:
            raise ConfigurationError("n_blocks must be >= 1")
        if groups < 1 or latent_dim % groups:
            raise ConfigurationError("groups must divide latent_dim")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.n_blocks = n_blocks
        self.groups = groups
        self.ffn_hidden = ffn_hidden or 2 * latent_dim
        d, c, h = latent_dim, latent_dim // groups, self.ffn_hidden
        self.params: dict[str, Parameter] = {}

        def add_param(name, value):
            self.params[name] = Parameter(name, value)

        for k in range(n_blocks):
            p = f"fusion.block{k}"
            add_param(f"{p}.conv.W", rng.standard_normal((groups, c, c)) * np.sqrt(2.0 / c))
            add_param(f"{p}.ffn1.W", rng.standard_normal((d, h)) * np.sqrt(2.0 / d))
            add_param(f"{p}.ffn1.b", np.zeros(h))
            add_param(f"{p}.ffn2.W", rng.standard_normal((h, d)) * np.sqrt(1.0 / h))
            add_param(f"{p}.ffn2.b", np.zeros(d))
            add_param(f"{p}.norm.gamma", np.ones(d))
            add_param(f"{p}.norm.beta", np.zeros(d))

    def block(self, k: int, H: Tensor, adjacency: np.ndarray) -> Tensor:
        P = self.params
        p = f"fusion.block{k}"
        H = channel_shuffle(grouped_gcn(H, adjacency, P[f"{p}.conv.W"]), self.groups)
        hidden = relu(linear(H, P[f"{p}.ffn1.W"], P[f"{p}.ffn1.b"]))
        H = add(H, linear(hidden, P[f"{p}.ffn2.W"], P[f"{p}.ffn2.b"]))
        return layer_norm(H, P[f"{p}.norm.gamma"], P[f"{p}.norm.beta"])

    def forward(self, H: Tensor, graph: FusionGraph) -> Tensor:
        for k in range(self.n_blocks):
            H = self.block(k, H, graph.adjacency)
        return H


def fuse(stack: FusionStack, cond_latents: Mapping[int, Tensor], target_ids: Iterable[int],
         rng: np.random.Generator) -> dict[int, Tensor]:
    """Impute a latent for every id in ``target_ids`` from the conditional latents.

    Each latent is (batch, d); the same graph is used for every row of the batch.
    """
    if not cond_latents:
        raise PreconditionError("fusion needs at least one conditional modality")
    graph = build_graph(cond_latents.keys(), target_ids)
    first = as_tensor(next(iter(cond_latents.values())))
    batch, d = first.shape
    if d != stack.latent_dim:
        raise DimensionError(f"latent width {d} does not match fusion width {stack.latent_dim}")
    nodes = [reshape(as_tensor(cond_latents[m]), (1, batch, d)) for m in graph.node_ids[:graph.cond_count]]
    if graph.target_count:
        nodes.append(Tensor(init_target_nodes(graph.target_count, d, rng, batch)))
    out = stack.forward(concat(nodes, axis=0), graph)
    c = graph.cond_count
    return {m: reshape(take_rows(out, c + i, c + i + 1), (batch, d))
            for i, m in enumerate(graph.node_ids[c:])}


def poe_fuse(experts: Sequence[tuple[Tensor, Tensor]], include_prior: bool = True) -> tuple[Tensor, Tensor]:
    """Product of Gaussian experts given as (mu, logvar) pairs.

    Precisions add; the mean is the precision-weighted average. With
    ``include_prior`` a standard-normal expert joins the product.
    """
    if not experts:
        raise PreconditionError("poe_fuse needs at least one expert")
    precisions = [exp(mul(as_tensor(lv), -1.0)) for _, lv in experts]
    weighted = [mul(as_tensor(mu), prec) for (mu, _), prec in zip(experts, precisions)]
    total, num = precisions[0], weighted[0]
    for prec, w in zip(precisions[1:], weighted[1:]):
        total, num = add(total, prec), add(num, w)
    if include_prior:
        total = add(total, 1.0)
    return div(num, total), mul(log(total), -1.0)
