"""Dynamic-k label-graph training with a graph contrastive loss, and inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from klg import tensor as T
from klg.base_model import (
    EncoderParams,
    SpanBatch,
    TopKSet,
    encoder_from_arrays,
    featurize,
    init_encoder,
    relation_rep,
)
from klg.data import Corpus, Example, token_index
from klg.errors import ConfigError, ContractError
from klg.label_graph import (
    GraphParams,
    final_logits,
    fuse_batch,
    gat_attend_batch,
    init_graph_params,
)
from klg.metrics import micro_f1_excl
from klg.serialize import load_checkpoint, save_checkpoint
from klg.tensor import Tensor
from klg.training import FitResult, fit


@dataclass
class KlgConfig:
    k: int = 6
    tau: float = 0.05
    alpha: float = 0.9
    batch_size: int = 16
    epochs: int = 40
    seed: int = 0
    learning_rate: float = 0.1
    hidden: int = 32
    heads: int = 4
    sigma: str = "tanh"
    dynamic_k: bool = True
    normalize: bool = False
    use_types: bool = True

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")


@dataclass
class KlgParams:
    encoder: EncoderParams
    graph: GraphParams

    def tensors(self) -> dict[str, Tensor]:
        return {**self.encoder.tensors("enc."), **self.graph.tensors("graph.")}


# ---------------------------------------------------------------------------
# losses


def k_prime_range(k: int, n_labels: int) -> tuple[int, int]:
    """Inclusive bounds ``[ceil(k/2), min(ceil(3k/2), n_labels)]``."""
    if not 1 <= k <= n_labels:
        raise ContractError(f"k must lie in [1, {n_labels}], got {k}")
    return (k + 1) // 2, min((3 * k + 1) // 2, n_labels)


def sample_k_prime(k: int, n_labels: int, rng: np.random.Generator) -> int:
    lo, hi = k_prime_range(k, n_labels)
    return int(rng.integers(lo, hi + 1))


def _contrastive_from_similarity(sim: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over anchors of ``-1/|P(i)| sum_j log(e^s_ij / (e^s_ij + sum_q e^s_iq))``.

    ``j`` ranges over the anchor's positives (same label, not itself) and ``q``
    over its negatives (different label).  Anchors without positives are skipped.
    """
    s = sim.data
    m = s.shape[0]
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(m, dtype=bool)
    neg = ~same
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        raise ContractError("no anchor in the batch has a positive example")
    masked = np.where(neg, s, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    safe_max = np.where(np.isfinite(row_max), row_max, 0.0)
    with np.errstate(divide="ignore"):
        neg_lse = np.log(np.exp(masked - safe_max).sum(axis=1, keepdims=True)) + safe_max
    denom = np.logaddexp(s, neg_lse)  # [m, m], meaningful where pos
    coef = np.where(anchors, 1.0 / np.maximum(n_pos, 1), 0.0) / anchors.sum()
    terms = np.where(pos, s - denom, 0.0)
    loss = -(coef * terms.sum(axis=1)).sum()

    def backward(g):
        # d/ds_ij of -(s_ij - denom_ij) = -(1 - e^{s_ij - denom_ij})
        share = np.where(pos, np.exp(s - denom), 0.0)
        grad = np.where(pos, -(1.0 - share), 0.0) * coef[:, None]
        # d/ds_iq (q negative) = sum_j coef_i * e^{s_iq - denom_ij}
        outer = np.where(pos, np.exp(neg_lse - denom), 0.0).sum(axis=1, keepdims=True)
        neg_share = np.exp(np.where(neg, s - np.where(np.isfinite(neg_lse), neg_lse, 0.0), -np.inf))
        grad = grad + neg_share * outer * coef[:, None]
        return (g * grad,)

    return T.custom_op(np.array(loss), (sim,), backward, "contrastive")


def gcl_loss(reps: Tensor, labels, tau: float, normalize: bool = False) -> Tensor:
    """Graph contrastive loss over ``2B`` representations.

    Rows ``i`` and ``i + B`` are two views of the same example.  Dot products
    are raw unless ``normalize`` is set.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    labels = np.asarray(labels, dtype=np.int64)
    if reps.ndim != 2 or reps.shape[0] != labels.shape[0]:
        raise ContractError(f"{reps.shape} representations vs {labels.shape} labels")
    x = T.l2_normalize_rows(reps) if normalize else reps
    sim = T.scale(T.matmul(x, T.transpose(x)), 1.0 / tau)
    return _contrastive_from_similarity(sim, labels)


def combined_loss(ce: Tensor, gcl: Tensor, alpha: float) -> Tensor:
    """``alpha * ce + (1 - alpha) * gcl``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return T.add(T.scale(ce, alpha), T.scale(gcl, 1.0 - alpha))


# ---------------------------------------------------------------------------
# forward


def klg_forward(params: KlgParams, r: Tensor, members: np.ndarray) -> tuple[Tensor, Tensor]:
    """Enhanced representation and final logits for a batch sharing one set size."""
    updated, _ = gat_attend_batch(params.graph, members)
    r_hat = fuse_batch(params.graph, r, updated)
    return r_hat, final_logits(params.graph, r, r_hat)


def topk_matrix(examples: Sequence[Example], topk: Mapping[str, TopKSet], min_k: int) -> np.ndarray:
    rows = []
    for ex in examples:
        s = topk.get(ex.id)
        if s is None:
            raise ContractError(f"no Top-k set for example {ex.id!r}")
        if len(s.labels) < min_k:
            raise ContractError(f"Top-k set for {ex.id!r} has {len(s.labels)} < {min_k} labels")
        rows.append(s.labels)
    width = min(len(r) for r in rows) if rows else min_k
    return np.array([r[:width] for r in rows], dtype=np.int64).reshape(len(rows), width)


def predict_klg_probs(params: KlgParams, feats: SpanBatch, members: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    if members.shape[1] < k:
        raise ContractError(f"Top-k sets hold {members.shape[1]} labels, fewer than k={k}")
    out = []
    with T.no_grad():
        for start in range(0, feats.n, chunk):
            rows = np.arange(start, min(feats.n, start + chunk))
            sub = feats.subset(rows) if feats.n > chunk else feats
            r = relation_rep(params.encoder, sub)
            _, logits = klg_forward(params, r, members[rows, :k])
            out.append(T.softmax(logits).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.graph.n_labels))


def infer_klg(params: KlgParams, example: Example, topk: TopKSet, k: int, use_types: bool = True) -> int:
    """Label predicted from the fixed Top-k graph; ties go to the lower id."""
    if len(topk.labels) < k:
        raise ContractError(f"Top-k set for {example.id!r} has fewer than k={k} labels")
    feats = featurize(params.encoder, [example], use_types)
    probs = predict_klg_probs(params, feats, np.asarray([topk.labels[:k]]), k)
    return int(np.argmax(probs[0]))


# ---------------------------------------------------------------------------
# training


@dataclass
class KlgRun:
    params: KlgParams
    fit: FitResult
    k_primes: list[int] = field(default_factory=list)


def init_klg(corpus: Corpus, config: KlgConfig, rng: np.random.Generator) -> KlgParams:
    n = len(corpus.vocab)
    encoder = init_encoder(token_index(corpus), n, config.hidden, rng)
    graph = init_graph_params(n, config.hidden, rng, heads=config.heads, sigma=config.sigma)
    return KlgParams(encoder, graph)


def train_klg(
    corpus: Corpus,
    topk: Mapping[str, TopKSet],
    config: KlgConfig,
    k_sampler: Callable[[int, int, np.random.Generator], int] | None = None,
) -> KlgRun:
    """Train a fresh encoder plus label-graph head on Top-k sets from the base model.

    With ``config.dynamic_k`` every step builds a second graph from a
    resampled set size and adds the contrastive term; otherwise the loss is
    plain cross-entropy on the fixed-k graph.
    """
    config.validate()
    n_labels = len(corpus.vocab)
    if config.k > n_labels:
        raise ConfigError(f"k={config.k} exceeds the {n_labels} labels")
    rng = np.random.default_rng(config.seed)
    k_rng = np.random.default_rng([config.seed, 1])
    sampler = k_sampler or sample_k_prime
    params = init_klg(corpus, config, rng)
    need = k_prime_range(config.k, n_labels)[1] if config.dynamic_k else config.k
    train_members = topk_matrix(corpus.train, topk, need)
    dev_members = topk_matrix(corpus.dev, topk, config.k)
    train_feats = featurize(params.encoder, corpus.train, config.use_types)
    dev_feats = featurize(params.encoder, corpus.dev, config.use_types)
    golds = np.array([ex.label for ex in corpus.train], dtype=np.int64)
    dev_golds = np.array([ex.label for ex in corpus.dev], dtype=np.int64)
    k_primes: list[int] = []

    def batch_loss(idx, _rng):
        r = relation_rep(params.encoder, train_feats.subset(idx))
        r_hat, logits = klg_forward(params, r, train_members[idx, : config.k])
        ce = T.cross_entropy(logits, golds[idx])
        if not config.dynamic_k:
            return ce
        k2 = sampler(config.k, n_labels, k_rng)
        k_primes.append(k2)
        r_hat2, _ = klg_forward(params, r, train_members[idx, :k2])
        reps = T.concat([r_hat, r_hat2], axis=0)
        labels = np.concatenate([golds[idx], golds[idx]])
        gcl = gcl_loss(reps, labels, config.tau, config.normalize)
        return combined_loss(ce, gcl, config.alpha)

    def dev_score():
        probs = predict_klg_probs(params, dev_feats, dev_members, config.k)
        return micro_f1_excl(np.argmax(probs, axis=1), dev_golds, corpus.vocab.no_relation_id)

    result = fit(
        params.tensors(),
        batch_loss,
        len(corpus.train),
        dev_score,
        config.epochs,
        config.batch_size,
        config.learning_rate,
        rng,
    )
    return KlgRun(params, result, k_primes)


def predict_klg(params: KlgParams, examples: Sequence[Example], topk: Mapping[str, TopKSet], k: int, use_types: bool = True) -> np.ndarray:
    feats = featurize(params.encoder, examples, use_types)
    return predict_klg_probs(params, feats, topk_matrix(examples, topk, k), k)


def save_klg(params: KlgParams, path, meta: Mapping | None = None) -> None:
    save_checkpoint(
        path,
        {name: t.data for name, t in params.tensors().items()},
        {
            "kind": "klg",
            "tokens": params.encoder.tokens,
            "heads": params.graph.heads,
            "sigma": params.graph.sigma,
            **(meta or {}),
        },
    )


def load_klg(path) -> tuple[KlgParams, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "klg":
        raise ContractError(f"{path} is not a label-graph checkpoint")
    encoder = encoder_from_arrays(meta["tokens"], arrays, "enc.")
    names = ("nodes", "gat_w", "gat_a", "wq", "wk", "wv", "wo", "bo", "final_w", "final_b")
    graph = GraphParams(
        **{n: Tensor(arrays[f"graph.{n}"], requires_grad=True) for n in names},
        heads=int(meta["heads"]),
        sigma=str(meta["sigma"]),
    )
    return KlgParams(encoder, graph), meta
