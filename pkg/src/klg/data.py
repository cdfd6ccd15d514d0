"""Synthetic long-tailed relation corpus, dataset files, and input encoding."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from klg.errors import ConfigError, ContractError, ParseError, VocabularyError

NO_RELATION = "no_relation"
HEAD_MARKER = "@"
TAIL_MARKER = "#"
PROMPT_PREFIX = ("Choose", "a", "relation", "from", "{")
SPLITS = ("train", "dev", "test")

_FAMILIES = (
    ("per", "PERSON", "TITLE"),
    ("org", "ORGANIZATION", "PERSON"),
    ("loc", "LOCATION", "CITY"),
    ("evt", "EVENT", "DATE"),
    ("gpe", "COUNTRY", "NUMBER"),
    ("art", "WORK", "MISC"),
)
_FUNCTION_WORDS = ("the", "of", "a", "in", "was", "said", "to", "and", ",", ".", "by", "for")


@dataclass(frozen=True)
class LabelVocab:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise VocabularyError("label names must be unique")
        if NO_RELATION not in self.names:
            raise VocabularyError(f"label vocabulary lacks {NO_RELATION!r}")

    @property
    def no_relation_id(self) -> int:
        return self.names.index(NO_RELATION)

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise VocabularyError(f"unknown label {name!r}") from None

    @property
    def _index(self) -> dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {n: i for i, n in enumerate(self.names)}
            object.__setattr__(self, "_cache", cache)
        return cache


@dataclass(frozen=True)
class Example:
    id: str
    tokens: tuple[str, ...]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    head_type: str
    tail_type: str
    label: int

    def validate(self, n_labels: int) -> None:
        n = len(self.tokens)
        for s, e in (self.head_span, self.tail_span):
            if not 0 <= s < e <= n:
                raise ContractError(f"{self.id}: span [{s}, {e}) invalid for {n} tokens")
        (hs, he), (ts, te) = self.head_span, self.tail_span
        if hs < te and ts < he:
            raise ContractError(f"{self.id}: head and tail spans overlap")
        if not 0 <= self.label < n_labels:
            raise ContractError(f"{self.id}: label id {self.label} out of range")

    @property
    def head_tokens(self) -> tuple[str, ...]:
        return self.tokens[self.head_span[0] : self.head_span[1]]

    @property
    def tail_tokens(self) -> tuple[str, ...]:
        return self.tokens[self.tail_span[0] : self.tail_span[1]]


@dataclass(frozen=True)
class Corpus:
    vocab: LabelVocab
    train: tuple[Example, ...]
    dev: tuple[Example, ...]
    test: tuple[Example, ...]
    seed: int = 0

    def split(self, name: str) -> tuple[Example, ...]:
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)

    def label_counts(self, split: str = "train") -> np.ndarray:
        counts = np.zeros(len(self.vocab), dtype=np.int64)
        for ex in self.split(split):
            counts[ex.label] += 1
        return counts


# ---------------------------------------------------------------------------
# generation


@dataclass
class _LabelSpec:
    family: int
    head_words: list[str]
    tail_words: list[str]
    templates: list[list[str]] = field(default_factory=list)


def _label_names(n_labels: int) -> list[str]:
    names = [NO_RELATION]
    for i in range(1, n_labels):
        prefix = _FAMILIES[(i - 1) % len(_FAMILIES)][0]
        names.append(f"{prefix}:relation_{i:02d}")
    return names


def _build_specs(n_labels: int, rng: np.random.Generator):
    n_families = min(len(_FAMILIES), max(3, (n_labels - 1) // 4))
    fam_head = [[f"fh{f}_{j}" for j in range(4)] for f in range(n_families)]
    fam_tail = [[f"ft{f}_{j}" for j in range(4)] for f in range(n_families)]
    specs = {}
    for c in range(1, n_labels):
        fam = (c - 1) % n_families
        ctx = [f"w{c:02d}_{j}" for j in range(6)]
        spec = _LabelSpec(
            family=fam,
            head_words=[f"h{c:02d}_{j}" for j in range(3)],
            tail_words=[f"t{c:02d}_{j}" for j in range(3)],
        )
        for _ in range(3):
            pool = ctx + list(_FUNCTION_WORDS)
            left, mid, right = (
                [str(w) for w in rng.choice(pool, size=int(rng.integers(lo, 4)))] for lo in (0, 1, 1)
            )
            slots = ["<HEAD>", "<TAIL>"] if rng.random() < 0.7 else ["<TAIL>", "<HEAD>"]
            spec.templates.append(left + [slots[0]] + mid + [slots[1]] + right)
        specs[c] = spec
    all_words = sorted(
        {w for s in specs.values() for w in s.head_words + s.tail_words}
        | {w for ws in fam_head + fam_tail for w in ws}
        | {w for s in specs.values() for t in s.templates for w in t if not w.startswith("<")}
        | set(_FUNCTION_WORDS)
    )
    return specs, fam_head, fam_tail, all_words, n_families


def _entity(own: list[str], family: list[str], rng: np.random.Generator) -> list[str]:
    words = [str(rng.choice(family)), str(rng.choice(own))]
    if rng.random() < 0.3:
        words.append(str(rng.choice(family)))
    rng.shuffle(words)
    return words


def generate_corpus(
    n_labels: int = 21,
    zipf_exponent: float = 1.2,
    sizes: Sequence[int] = (4000, 1000, 1000),
    template_noise: float = 0.3,
    seed: int = 0,
    no_relation_rate: float = 0.3,
) -> Corpus:
    """Sample a relation corpus whose positive labels follow a Zipf law.

    Positive label ``c`` has frequency rank ``c``.  Each entity span holds
    one label-specific word and one or two words shared by the label's
    family; ``no_relation`` pairs a head entity of one label with a tail
    entity of a label from another family.  ``template_noise`` is the per-token probability of
    replacing a token with a uniformly drawn corpus word.
    """
    if n_labels < 12:
        raise ConfigError(f"n_labels must be at least 12, got {n_labels}")
    if len(sizes) != 3 or any(int(s) <= 0 for s in sizes):
        raise ConfigError(f"sizes must be three positive integers, got {sizes}")
    if not 0.0 <= template_noise <= 1.0:
        raise ConfigError("template_noise must lie in [0, 1]")
    if not 0.0 <= no_relation_rate < 1.0:
        raise ConfigError("no_relation_rate must lie in [0, 1)")
    if zipf_exponent < 0:
        raise ConfigError("zipf_exponent must be non-negative")

    rng = np.random.default_rng(seed)
    names = _label_names(n_labels)
    vocab = LabelVocab(tuple(names))
    specs, fam_head, fam_tail, all_words, _ = _build_specs(n_labels, rng)
    ranks = np.arange(1, n_labels, dtype=np.float64)
    zipf = ranks ** (-zipf_exponent)
    zipf /= zipf.sum()
    labels = np.arange(1, n_labels)
    families = np.array([specs[c].family for c in labels])

    def make(split: str, i: int) -> Example:
        if rng.random() < no_relation_rate:
            a = int(rng.choice(labels, p=zipf))
            other = zipf * (families != specs[a].family)
            b = int(rng.choice(labels, p=other / other.sum()))
            label = vocab.no_relation_id
        else:
            a = b = int(rng.choice(labels, p=zipf))
            label = a
        sa, sb = specs[int(a)], specs[int(b)]
        template = sa.templates[int(rng.integers(len(sa.templates)))]
        head = _entity(sa.head_words, fam_head[sa.family], rng)
        tail = _entity(sb.tail_words, fam_tail[sb.family], rng)
        tokens: list[str] = []
        head_span = tail_span = (0, 0)
        for w in template:
            if w == "<HEAD>":
                head_span = (len(tokens), len(tokens) + len(head))
                tokens.extend(head)
            elif w == "<TAIL>":
                tail_span = (len(tokens), len(tokens) + len(tail))
                tokens.extend(tail)
            else:
                tokens.append(w)
        if template_noise > 0:
            hit = rng.random(len(tokens)) < template_noise
            for pos in np.flatnonzero(hit):
                tokens[pos] = all_words[int(rng.integers(len(all_words)))]
        return Example(
            id=f"{split}-{i:05d}",
            tokens=tuple(tokens),
            head_span=head_span,
            tail_span=tail_span,
            head_type=_FAMILIES[sa.family][1],
            tail_type=_FAMILIES[sb.family][2],
            label=int(label),
        )

    splits = {name: tuple(make(name, i) for i in range(int(n))) for name, n in zip(SPLITS, sizes)}
    return Corpus(vocab=vocab, seed=int(seed), **splits)


# ---------------------------------------------------------------------------
# encoding


def encode_with_spans(
    ex: Example, use_types: bool = True
) -> tuple[list[str], tuple[int, int], tuple[int, int]]:
    """Insert entity (and type) markers; return tokens plus the shifted entity spans.

    The returned spans cover the original entity tokens only, never markers.
    """
    opens = {ex.head_span[0]: (ex.head_type, HEAD_MARKER), ex.tail_span[0]: (ex.tail_type, TAIL_MARKER)}
    closes = {ex.head_span[1]: HEAD_MARKER, ex.tail_span[1]: TAIL_MARKER}
    out: list[str] = []
    starts: dict[str, int] = {}
    ends: dict[str, int] = {}
    for pos in range(len(ex.tokens) + 1):
        if pos in closes:
            marker = closes[pos]
            ends[marker] = len(out)
            out.append(marker)
        if pos == len(ex.tokens):
            break
        if pos in opens:
            etype, marker = opens[pos]
            if use_types and etype:
                out.append(etype)
            out.append(marker)
            starts[marker] = len(out)
        out.append(ex.tokens[pos])
    head = (starts[HEAD_MARKER], ends[HEAD_MARKER])
    tail = (starts[TAIL_MARKER], ends[TAIL_MARKER])
    return out, head, tail


def encode_example(ex: Example, vocab: LabelVocab | None = None, use_types: bool = True) -> list[str]:
    """Tokens with ``@ head @`` and ``# tail #`` markers, type tokens optional."""
    return encode_with_spans(ex, use_types)[0]


def prompt_tokens(head: Sequence[str], tail: Sequence[str], label_names: Sequence[str]) -> list[str]:
    out = list(PROMPT_PREFIX)
    for i, name in enumerate(label_names):
        if i:
            out.append(",")
        out.append(name)
    out += ["}", "for", "the", *head, "and", "the", *tail]
    return out


def marked_entity(encoded: Sequence[str], marker: str) -> list[str]:
    """Tokens between the first two occurrences of ``marker``."""
    pos = [i for i, t in enumerate(encoded) if t == marker][:2]
    if len(pos) != 2:
        raise ContractError(f"encoded input lacks a {marker!r} marker pair")
    return list(encoded[pos[0] + 1 : pos[1]])


def apply_prompt(encoded: Sequence[str], topk, vocab: LabelVocab, rng) -> list[str]:
    """Append ``Choose a relation from {..} for the e1 and the e2`` with shuffled labels.

    The entity surface forms are read back from the marker pairs in ``encoded``.
    """
    labels = list(topk.labels)
    if not labels:
        raise ContractError("apply_prompt needs a non-empty Top-k set")
    order = rng.permutation(len(labels))
    names = [vocab.names[labels[i]] for i in order]
    head = marked_entity(encoded, HEAD_MARKER)
    tail = marked_entity(encoded, TAIL_MARKER)
    return list(encoded) + prompt_tokens(head, tail, names)


# ---------------------------------------------------------------------------
# files


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def example_to_record(ex: Example, vocab: LabelVocab) -> dict:
    return {
        "id": ex.id,
        "tokens": list(ex.tokens),
        "head": list(ex.head_span),
        "tail": list(ex.tail_span),
        "head_type": ex.head_type,
        "tail_type": ex.tail_type,
        "label": vocab.names[ex.label],
    }


_FIELDS = ("id", "tokens", "head", "tail", "head_type", "tail_type", "label")


def record_to_example(rec: dict, vocab: LabelVocab, path=None, line=None) -> Example:
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", path, line)
    for key in _FIELDS:
        if key not in rec:
            raise ParseError(f"missing field {key!r}", path, line)
    try:
        head = tuple(int(x) for x in rec["head"])
        tail = tuple(int(x) for x in rec["tail"])
        tokens = tuple(str(t) for t in rec["tokens"])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad field value: {exc}", path, line) from None
    if len(head) != 2 or len(tail) != 2:
        raise ParseError("spans must be two-integer arrays", path, line)
    ex = Example(
        id=str(rec["id"]),
        tokens=tokens,
        head_span=head,
        tail_span=tail,
        head_type=str(rec["head_type"]),
        tail_type=str(rec["tail_type"]),
        label=vocab.id_of(rec["label"]),
    )
    try:
        ex.validate(len(vocab))
    except ContractError as exc:
        raise ParseError(str(exc), path, line) from None
    return ex


def write_examples(examples: Sequence[Example], vocab: LabelVocab, path) -> None:
    lines = [json.dumps(example_to_record(ex, vocab), ensure_ascii=False) for ex in examples]
    _atomic_write_text(Path(path), "".join(line + "\n" for line in lines))


def read_examples(path, vocab: LabelVocab) -> tuple[Example, ...]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path, lineno) from None
            out.append(record_to_example(rec, vocab, path, lineno))
    return tuple(out)


def write_vocab(vocab: LabelVocab, path) -> None:
    _atomic_write_text(Path(path), json.dumps(list(vocab.names), ensure_ascii=False) + "\n")


def read_vocab(path) -> LabelVocab:
    try:
        names = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ParseError("vocabulary must be a JSON array of strings", path)
    return LabelVocab(tuple(names))


def write_corpus(corpus: Corpus, path) -> None:
    """Write ``vocab.json``, ``meta.json`` and one JSONL file per split under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_vocab(corpus.vocab, root / "vocab.json")
    _atomic_write_text(root / "meta.json", json.dumps({"seed": corpus.seed}) + "\n")
    for name in SPLITS:
        write_examples(corpus.split(name), corpus.vocab, root / f"{name}.jsonl")


def read_corpus(path) -> Corpus:
    root = Path(path)
    vocab = read_vocab(root / "vocab.json")
    seed = 0
    meta = root / "meta.json"
    if meta.exists():
        seed = int(json.loads(meta.read_text(encoding="utf-8")).get("seed", 0))
    splits = {}
    for name in SPLITS:
        f = root / f"{name}.jsonl"
        splits[name] = read_examples(f, vocab) if f.exists() else ()
    ids = [ex.id for name in SPLITS for ex in splits[name]]
    if len(set(ids)) != len(ids):
        raise ParseError("example ids are not unique across splits", root)
    return Corpus(vocab=vocab, seed=seed, **splits)


def token_index(corpus: Corpus) -> list[str]:
    """Sorted list of every token the encoder may see, markers and prompt words included."""
    toks = {HEAD_MARKER, TAIL_MARKER, "}", ",", "and", "the", "for", *PROMPT_PREFIX}
    toks.update(corpus.vocab.names)
    for name in SPLITS:
        for ex in corpus.split(name):
            toks.update(ex.tokens)
            toks.add(ex.head_type)
            toks.add(ex.tail_type)
    toks.discard("")
    return sorted(toks)
