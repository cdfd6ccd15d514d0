"""Per-example label graphs, graph attention over them, and attention fusion.

Every label is a node with a trainable feature row.  For one example the
graph connects exactly the labels of its Top-k set (self-loops included),
so attention for a member node ranges over the Top-k members only.  The
batched functions exploit that: they gather the member rows directly
instead of masking a dense ``N x N`` adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from klg import tensor as T
from klg.errors import ConfigError, ContractError
from klg.tensor import Tensor

ACTIVATIONS = {"tanh": T.tanh, "identity": T.identity, "sigmoid": T.sigmoid}


def build_label_graph(topk, n_labels: int) -> np.ndarray:
    """Symmetric boolean adjacency linking every pair of Top-k labels, self-loops included."""
    labels = np.asarray(topk.labels if hasattr(topk, "labels") else topk, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_labels):
        raise ContractError(f"label id out of range for {n_labels} labels")
    if len(set(labels.tolist())) != labels.size:
        raise ContractError("Top-k labels must be distinct")
    member = np.zeros(n_labels, dtype=bool)
    member[labels] = True
    return np.outer(member, member)


def edge_count(adjacency: np.ndarray) -> int:
    """Unordered edges, each self-loop counted once."""
    return int(np.triu(adjacency).sum())


@dataclass
class GraphParams:
    nodes: Tensor  # [N, d] label features
    gat_w: Tensor  # [d, d]
    gat_a: Tensor  # [2d]
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    final_w: Tensor  # [2d, N]
    final_b: Tensor
    heads: int = 4
    sigma: str = "tanh"

    @property
    def hidden(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_labels(self) -> int:
        return self.nodes.shape[0]

    def tensors(self, prefix: str = "") -> dict[str, Tensor]:
        names = ("nodes", "gat_w", "gat_a", "wq", "wk", "wv", "wo", "bo", "final_w", "final_b")
        return {f"{prefix}{n}": getattr(self, n) for n in names}

    def class_weights(self) -> np.ndarray:
        return self.final_w.data.T.copy()


def init_graph_params(
    n_labels: int, hidden: int, rng: np.random.Generator, heads: int = 4, sigma: str = "tanh", node_std: float = 0.02
) -> GraphParams:
    if hidden % heads:
        raise ConfigError(f"hidden size {hidden} is not divisible by {heads} heads")
    if sigma not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {sigma!r}; choose from {sorted(ACTIVATIONS)}")

    def mat(rows, cols):
        return Tensor(rng.normal(0.0, (1.0 / rows) ** 0.5, (rows, cols)), requires_grad=True)

    return GraphParams(
        nodes=Tensor(rng.normal(0.0, node_std, (n_labels, hidden)), requires_grad=True),
        gat_w=mat(hidden, hidden),
        gat_a=Tensor(rng.normal(0.0, (1.0 / hidden) ** 0.5, 2 * hidden), requires_grad=True),
        wq=mat(hidden, hidden),
        wk=mat(hidden, hidden),
        wv=mat(hidden, hidden),
        wo=mat(hidden, hidden),
        bo=Tensor(np.zeros(hidden), requires_grad=True),
        final_w=mat(2 * hidden, n_labels),
        final_b=Tensor(np.zeros(n_labels), requires_grad=True),
        heads=heads,
        sigma=sigma,
    )


def gat_score(params: GraphParams, h_u: Tensor, h_v: Tensor) -> Tensor:
    """``LeakyReLU(a . [W h_u || W h_v])`` for a single pair of nodes."""
    d = params.hidden
    if h_u.shape != (d,) or h_v.shape != (d,):
        raise ContractError(f"node vectors must have shape ({d},)")
    wu = T.matmul(T.reshape(h_u, (1, d)), params.gat_w)
    wv = T.matmul(T.reshape(h_v, (1, d)), params.gat_w)
    joined = T.concat([wu, wv])
    score = T.matmul(joined, T.reshape(params.gat_a, (2 * d, 1)))
    return T.reshape(T.leaky_relu(score), ())


def gat_attend_batch(params: GraphParams, member_labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Graph attention for a batch of Top-k sets of equal size.

    ``member_labels`` is ``[B, k]``.  Returns the updated member features
    ``[B, k, d]`` in Top-k order and the attention weights ``[B, k, k]``.
    """
    labels = np.asarray(member_labels, dtype=np.int64)
    if labels.ndim != 2 or labels.shape[1] == 0:
        raise ContractError("gat_attend needs a non-empty Top-k set per example")
    b, k = labels.shape
    d = params.hidden
    h = T.take_rows(params.nodes, labels.reshape(-1))
    wh = T.matmul(h, params.gat_w)  # [B*k, d]
    # a . [Wh_u || Wh_v] splits into a[:d] . Wh_u + a[d:] . Wh_v
    a_pair = T.reshape(params.gat_a, (2, d)).T  # [d, 2]
    proj = T.reshape(T.matmul(wh, a_pair), (b, k, 2))
    src, dst = proj[:, :, 0], proj[:, :, 1]
    scores = T.leaky_relu(T.outer_sum(src, dst))  # [B, k, k]
    alpha = T.softmax(scores)
    updated = T.bmm(alpha, T.reshape(wh, (b, k, d)))
    return ACTIVATIONS[params.sigma](updated), alpha.data


def gat_attend(params: GraphParams, graph: np.ndarray, topk) -> Tensor:
    """Updated features ``[k, d]`` for the Top-k members, in Top-k order."""
    labels = np.asarray(topk.labels if hasattr(topk, "labels") else topk, dtype=np.int64)
    if labels.size == 0:
        raise ContractError("gat_attend needs a non-empty Top-k set")
    rows = np.flatnonzero(graph.any(axis=1))
    if set(rows.tolist()) != set(labels.tolist()):
        raise ContractError("graph was not built from this Top-k set")
    out, _ = gat_attend_batch(params, labels[None, :])
    return T.reshape(out, (labels.size, params.hidden))


def fuse_batch(params: GraphParams, r: Tensor, members: Tensor) -> Tensor:
    """Multi-head attention with query ``r [B, d]`` over keys/values ``members [B, k, d]``."""
    b, k, d = members.shape
    h = params.heads
    if d % h:
        raise ConfigError(f"hidden size {d} is not divisible by {h} heads")
    dh = d // h
    flat = T.reshape(members, (b * k, d))
    q = T.transpose(T.reshape(T.matmul(r, params.wq), (b, 1, h, dh)), (0, 2, 1, 3))
    keys = T.transpose(T.reshape(T.matmul(flat, params.wk), (b, k, h, dh)), (0, 2, 3, 1))
    values = T.transpose(T.reshape(T.matmul(flat, params.wv), (b, k, h, dh)), (0, 2, 1, 3))
    weights = T.softmax(T.scale(T.bmm(q, keys), 1.0 / np.sqrt(dh)))  # [B, h, 1, k]
    context = T.bmm(weights, values)  # [B, h, 1, dh]
    merged = T.reshape(T.transpose(context, (0, 2, 1, 3)), (b, d))
    return T.add_bias(T.matmul(merged, params.wo), params.bo)


def fuse(params: GraphParams, r: Tensor, members: Tensor) -> Tensor:
    d = params.hidden
    k = members.shape[0]
    out = fuse_batch(params, T.reshape(r, (1, d)), T.reshape(members, (1, k, d)))
    return T.reshape(out, (d,))


def final_logits(params: GraphParams, r: Tensor, r_hat: Tensor) -> Tensor:
    return T.add_bias(T.matmul(T.concat([r, r_hat]), params.final_w), params.final_b)


def classify_final(params: GraphParams, r: Tensor, r_hat: Tensor) -> Tensor:
    """Distribution over all labels from ``[r || r_hat]``."""
    d = params.hidden
    logits = final_logits(params, T.reshape(r, (1, d)), T.reshape(r_hat, (1, d)))
    return T.reshape(T.softmax(logits), (params.n_labels,))
