"""Base relation classifier, Top-k prediction sets, and the k-choice rule.

The encoder is deliberately tiny: trainable token embeddings, max-pooled
over each entity span, followed by one tanh layer that produces the relation
representation and a linear classification layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from klg import tensor as T
from klg.data import Corpus, Example, apply_prompt, encode_with_spans
from klg.errors import ConfigError, ContractError
from klg.metrics import micro_f1_excl
from klg.serialize import load_checkpoint, save_checkpoint
from klg.tensor import Tensor
from klg.training import FitResult, fit

UNK = "<unk>"


@dataclass(frozen=True)
class TopKSet:
    example_id: str
    labels: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.probs) or not self.labels:
            raise ContractError(f"{self.example_id}: labels and probs must be non-empty and aligned")
        if len(set(self.labels)) != len(self.labels):
            raise ContractError(f"{self.example_id}: duplicate labels in Top-k set")

    @property
    def k(self) -> int:
        return len(self.labels)

    def prefix(self, k: int) -> "TopKSet":
        if not 1 <= k <= len(self.labels):
            raise ContractError(f"{self.example_id}: cannot take Top-{k} of {len(self.labels)} labels")
        return TopKSet(self.example_id, self.labels[:k], self.probs[:k])


@dataclass
class EncoderParams:
    tokens: list[str]
    embed: Tensor
    rel_w: Tensor
    rel_b: Tensor
    cls_w: Tensor
    cls_b: Tensor
    _index: dict = field(default=None, repr=False)

    @property
    def hidden(self) -> int:
        return self.embed.shape[1]

    @property
    def n_labels(self) -> int:
        return self.cls_w.shape[1]

    def tensors(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}embed": self.embed,
            f"{prefix}rel_w": self.rel_w,
            f"{prefix}rel_b": self.rel_b,
            f"{prefix}cls_w": self.cls_w,
            f"{prefix}cls_b": self.cls_b,
        }

    def token_id(self, token: str) -> int:
        if self._index is None:
            self._index = {t: i for i, t in enumerate(self.tokens)}
        return self._index.get(token, 0)

    def class_weights(self) -> np.ndarray:
        """Classifier weights with one row per class."""
        return self.cls_w.data.T.copy()


def init_encoder(tokens: Sequence[str], n_labels: int, hidden: int, rng: np.random.Generator) -> EncoderParams:
    vocab = [UNK] + [t for t in tokens if t != UNK]
    return EncoderParams(
        tokens=vocab,
        embed=Tensor(rng.normal(0.0, 1.0, (len(vocab), hidden)), requires_grad=True),
        rel_w=Tensor(rng.normal(0.0, (1.0 / (2 * hidden)) ** 0.5, (2 * hidden, hidden)), requires_grad=True),
        rel_b=Tensor(np.zeros(hidden), requires_grad=True),
        cls_w=Tensor(rng.normal(0.0, (1.0 / hidden) ** 0.5, (hidden, n_labels)), requires_grad=True),
        cls_b=Tensor(np.zeros(n_labels), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# span features


@dataclass(frozen=True)
class SpanBatch:
    """Token ids of every entity span in a batch, flattened segment by segment.

    Segment ``2i`` is example ``i``'s head span and ``2i + 1`` its tail span;
    ``offsets[s]:offsets[s + 1]`` indexes segment ``s`` inside ``ids``.
    """

    ids: np.ndarray
    offsets: np.ndarray

    @property
    def n(self) -> int:
        return (len(self.offsets) - 1) // 2

    @property
    def segments(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.offsets) - 1), np.diff(self.offsets))

    @classmethod
    def from_spans(cls, spans: Sequence[Sequence[int]]) -> "SpanBatch":
        lengths = [len(s) for s in spans]
        ids = np.fromiter((t for s in spans for t in s), dtype=np.int64, count=sum(lengths))
        return cls(ids, np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64))

    def subset(self, rows: Sequence[int]) -> "SpanBatch":
        rows = np.asarray(rows, dtype=np.int64)
        segs = np.stack([2 * rows, 2 * rows + 1], axis=1).reshape(-1)
        starts, ends = self.offsets[segs], self.offsets[segs + 1]
        lengths = ends - starts
        pos = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
        pos = pos + np.arange(lengths.sum())
        return SpanBatch(self.ids[pos], np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64))


def span_token_ids(params: EncoderParams, encoded: Sequence[str], head_span, tail_span):
    out = []
    for s, e in (head_span, tail_span):
        if not 0 <= s < e <= len(encoded):
            raise ContractError(f"span [{s}, {e}) is empty or outside the encoded input")
        out.append([params.token_id(t) for t in encoded[s:e]])
    return out


def featurize(params: EncoderParams, examples: Sequence[Example], use_types: bool = True, prompts=None) -> SpanBatch:
    """Encode examples with markers (and optional prompt suffix) and collect span token ids.

    Spans cover the original entity tokens only; markers and type tokens are
    not pooled.
    """
    spans = []
    for i, ex in enumerate(examples):
        encoded, head, tail = encode_with_spans(ex, use_types)
        if prompts is not None:
            encoded = prompts[i](encoded)
        spans.extend(span_token_ids(params, encoded, head, tail))
    return SpanBatch.from_spans(spans)


def relation_rep(params: EncoderParams, batch: SpanBatch) -> Tensor:
    """``r = tanh(W [e1 || e2] + b)`` for every example, shape ``[B, d]``."""
    emb = T.take_rows(params.embed, batch.ids)
    pooled = T.segment_max(emb, batch.segments, 2 * batch.n)
    pair = T.reshape(pooled, (batch.n, 2 * params.hidden))
    return T.tanh(T.add_bias(T.matmul(pair, params.rel_w), params.rel_b))


def classify(params: EncoderParams, r: Tensor) -> Tensor:
    return T.add_bias(T.matmul(r, params.cls_w), params.cls_b)


def forward_relation_rep(params: EncoderParams, encoded: Sequence[str], head_span, tail_span) -> tuple[Tensor, Tensor]:
    """Relation representation and logits for one marker-encoded input."""
    head, tail = span_token_ids(params, encoded, head_span, tail_span)
    batch = SpanBatch.from_spans([head, tail])
    r = relation_rep(params, batch)
    logits = classify(params, r)
    return T.reshape(r, (params.hidden,)), T.reshape(logits, (params.n_labels,))


# ---------------------------------------------------------------------------
# losses


def smoothing_weights(gold: int, topk_labels: Sequence[int], gamma: float, n_labels: int) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    if len(topk_labels) == 0:
        raise ContractError("label smoothing needs a non-empty Top-k set")
    w = np.zeros(n_labels)
    w[gold] += gamma
    w[list(topk_labels)] += (1.0 - gamma) / len(topk_labels)
    return w


def label_smoothing_loss(logits: Tensor, gold: int, topk: TopKSet, gamma: float) -> Tensor:
    """``gamma * CE(gold) + (1 - gamma) / k * sum of CE(j) over the Top-k labels``."""
    w = smoothing_weights(gold, topk.labels, gamma, logits.shape[-1])
    return T.weighted_nll(logits, w)


# ---------------------------------------------------------------------------
# training


@dataclass
class BaseConfig:
    hidden: int = 32
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 0.1
    seed: int = 0
    use_types: bool = True
    method: str = "base"  # "base", "base-ls" or "base-prompt"
    gamma: float = 0.9
    k: int = 6


@dataclass
class BaseRun:
    params: EncoderParams
    fit: FitResult


def predict_probs(params: EncoderParams, batch: SpanBatch, chunk: int = 1024) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, batch.n, chunk):
            sub = batch.subset(range(start, min(batch.n, start + chunk))) if batch.n > chunk else batch
            out.append(T.softmax(classify(params, relation_rep(params, sub))).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.n_labels))


def prompt_fns(examples: Sequence[Example], topk: Mapping[str, TopKSet], k: int, vocab, rng) -> list:
    fns = []
    for ex in examples:
        if ex.id not in topk:
            raise ContractError(f"no Top-k set for example {ex.id!r}")
        s = topk[ex.id].prefix(k)
        fns.append(lambda enc, s=s: apply_prompt(enc, s, vocab, rng))
    return fns


def train_base(corpus: Corpus, config: BaseConfig, topk: Mapping[str, TopKSet] | None = None) -> BaseRun:
    """Train the base classifier by mini-batch gradient descent.

    ``config.method`` picks the objective: plain cross-entropy, Top-k label
    smoothing, or cross-entropy on inputs carrying the Top-k prompt.  The
    latter two need ``topk`` sets for the training and dev examples.
    """
    if not corpus.train or not corpus.dev:
        raise ContractError("train_base needs non-empty train and dev splits")
    if config.method not in ("base", "base-ls", "base-prompt"):
        raise ConfigError(f"unknown base method {config.method!r}")
    if config.method != "base" and topk is None:
        raise ContractError(f"{config.method} needs Top-k sets")
    from klg.data import token_index

    rng = np.random.default_rng(config.seed)
    n_labels = len(corpus.vocab)
    params = init_encoder(token_index(corpus), n_labels, config.hidden, rng)
    prompt_rng = np.random.default_rng(config.seed + 1)

    def feats(examples):
        prompts = None
        if config.method == "base-prompt":
            prompts = prompt_fns(examples, topk, config.k, corpus.vocab, prompt_rng)
        return featurize(params, examples, config.use_types, prompts)

    train_feats = feats(corpus.train)
    dev_feats = feats(corpus.dev)
    golds = np.array([ex.label for ex in corpus.train])
    dev_golds = np.array([ex.label for ex in corpus.dev])
    weights = None
    if config.method == "base-ls":
        weights = np.stack(
            [
                smoothing_weights(ex.label, _lookup(topk, ex).labels[: config.k], config.gamma, n_labels)
                for ex in corpus.train
            ]
        )

    def batch_loss(idx, _rng):
        logits = classify(params, relation_rep(params, train_feats.subset(idx)))
        if weights is not None:
            return T.weighted_nll(logits, weights[idx])
        return T.cross_entropy(logits, golds[idx])

    def dev_score():
        preds = np.argmax(predict_probs(params, dev_feats), axis=1)
        return micro_f1_excl(preds, dev_golds, corpus.vocab.no_relation_id)

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
    return BaseRun(params, result)


def _lookup(topk: Mapping[str, TopKSet], ex: Example) -> TopKSet:
    try:
        return topk[ex.id]
    except KeyError:
        raise ContractError(f"no Top-k set for example {ex.id!r}") from None


# ---------------------------------------------------------------------------
# Top-k sets and recall


def rank_labels(probs: np.ndarray) -> np.ndarray:
    """Label ids by descending probability, ties broken by ascending id."""
    return np.argsort(-probs, axis=-1, kind="stable")


def topk_from_probs(ids: Sequence[str], probs: np.ndarray, k: int) -> list[TopKSet]:
    n = probs.shape[1]
    if not 1 <= k <= n:
        raise ConfigError(f"k must lie in [1, {n}], got {k}")
    order = rank_labels(probs)[:, :k]
    return [
        TopKSet(eid, tuple(int(c) for c in row), tuple(float(probs[i, c]) for c in row))
        for i, (eid, row) in enumerate(zip(ids, order))
    ]


def predict_topk(params: EncoderParams, examples: Sequence[Example], k: int, use_types: bool = True) -> list[TopKSet]:
    if not 1 <= k <= params.n_labels:
        raise ConfigError(f"k must lie in [1, {params.n_labels}], got {k}")
    probs = predict_probs(params, featurize(params, examples, use_types))
    return topk_from_probs([ex.id for ex in examples], probs, k)


def topk_recall_curve(sets: Sequence[TopKSet], golds: Mapping[str, int]) -> list[float]:
    """Entry ``k - 1`` is the fraction of examples whose gold label is in the Top-k prefix."""
    if not sets:
        return []
    n = len(sets[0].labels)
    hits = np.zeros(n, dtype=np.int64)
    for s in sets:
        if s.example_id not in golds:
            raise ContractError(f"no gold label for example {s.example_id!r}")
        if len(s.labels) != n:
            raise ContractError("every Top-k set must cover all labels")
        gold = golds[s.example_id]
        if gold in s.labels:
            hits[s.labels.index(gold)] += 1
    if len(golds) != len(sets):
        raise ContractError(f"{len(sets)} Top-k sets vs {len(golds)} gold labels")
    return list(np.cumsum(hits) / len(sets))


def choose_k(recall_curve: Sequence[float], threshold: float = 0.99) -> tuple[int, bool]:
    """Smallest k whose recall reaches ``threshold``.

    Returns ``(k, fallback)``; ``fallback`` is True when no k qualifies and
    the full label count is returned instead.
    """
    if len(recall_curve) == 0:
        raise ContractError("choose_k needs a non-empty recall curve")
    for k, value in enumerate(recall_curve, start=1):
        if value >= threshold:
            return k, False
    return len(recall_curve), True


# ---------------------------------------------------------------------------
# checkpoints


def save_encoder(params: EncoderParams, path, meta: Mapping | None = None) -> None:
    save_checkpoint(
        path,
        {name: t.data for name, t in params.tensors().items()},
        {"kind": "base", "tokens": params.tokens, **(meta or {})},
    )


def encoder_from_arrays(tokens: Sequence[str], arrays: Mapping[str, np.ndarray], prefix: str = "") -> EncoderParams:
    return EncoderParams(
        tokens=list(tokens),
        **{
            name: Tensor(arrays[f"{prefix}{name}"], requires_grad=True)
            for name in ("embed", "rel_w", "rel_b", "cls_w", "cls_b")
        },
    )


def load_encoder(path) -> tuple[EncoderParams, dict]:
    arrays, meta = load_checkpoint(path)
    return encoder_from_arrays(meta["tokens"], arrays), meta
