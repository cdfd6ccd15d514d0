"""Relation-classification metrics, head/tail breakdown, and plot-data emission."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from klg.errors import ConfigError, ContractError

N_HEAD = 10
N_TAIL = 10


def _arrays(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    g = np.asarray(golds, dtype=np.int64).reshape(-1)
    if p.shape != g.shape:
        raise ContractError(f"{len(p)} predictions vs {len(g)} gold labels")
    return p, g


def _f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def class_counts(preds, golds, n_labels: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class TP, FP and FN arrays."""
    p, g = _arrays(preds, golds)
    hit = p == g
    tp = np.bincount(g[hit], minlength=n_labels)
    fp = np.bincount(p[~hit], minlength=n_labels)
    fn = np.bincount(g[~hit], minlength=n_labels)
    return tp, fp, fn


def micro_prf_excl(preds, golds, no_relation_id: int) -> tuple[float, float, float]:
    p, g = _arrays(preds, golds)
    tp = int(np.sum((p == g) & (g != no_relation_id)))
    fp = int(np.sum((p != no_relation_id) & (p != g)))
    fn = int(np.sum((g != no_relation_id) & (p != g)))
    return _f1(tp, fp, fn)


def micro_f1_excl(preds, golds, no_relation_id: int) -> float:
    """Micro-F1 over every class except ``no_relation``."""
    return micro_prf_excl(preds, golds, no_relation_id)[2]


def macro_f1(preds, golds, exclude=(), n_labels: int | None = None) -> float:
    """Unweighted mean F1 over the non-excluded classes.

    Classes that never occur and are never predicted score 0 and still count.
    """
    p, g = _arrays(preds, golds)
    if n_labels is None:
        n_labels = int(max(p.max(initial=-1), g.max(initial=-1))) + 1
    classes = [c for c in range(n_labels) if c not in set(exclude)]
    if not classes:
        raise ContractError("macro_f1: every class is excluded")
    tp, fp, fn = class_counts(p, g, n_labels)
    return float(np.mean([_f1(tp[c], fp[c], fn[c])[2] for c in classes]))


@dataclass
class ClassScore:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class BlockScore:
    precision: float | None
    recall: float | None
    micro_f1: float | None
    support: int
    tp: int
    fp: int
    fn: int

    @property
    def defined(self) -> bool:
        return self.support > 0


@dataclass
class MetricsReport:
    micro_f1: float
    macro_f1: float
    precision: float
    recall: float
    per_class: list[ClassScore]
    head_block: BlockScore | None = None
    tail_block: BlockScore | None = None
    head_labels: list[int] = field(default_factory=list)
    tail_labels: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def head_tail_labels(train_counts, no_relation_id: int, n_head: int = N_HEAD, n_tail: int = N_TAIL):
    """Most and least frequent positive classes by training count (ties: lower id first)."""
    counts = np.asarray(train_counts)
    positives = [c for c in range(len(counts)) if c != no_relation_id]
    if len(positives) < n_head + n_tail:
        raise ConfigError(
            f"head/tail split needs {n_head + n_tail} positive classes, have {len(positives)}"
        )
    ranked = sorted(positives, key=lambda c: (-counts[c], c))
    return ranked[:n_head], ranked[len(ranked) - n_tail :]


def block_score(preds, golds, labels: Sequence[int], n_labels: int) -> BlockScore:
    """Micro scores pooled over the per-class counts of ``labels``.

    A block without gold examples has undefined scores (``None``), not zero.
    """
    tp, fp, fn = class_counts(preds, golds, n_labels)
    idx = list(labels)
    t, f_p, f_n = int(tp[idx].sum()), int(fp[idx].sum()), int(fn[idx].sum())
    support = t + f_n
    if support == 0:
        return BlockScore(None, None, None, 0, t, f_p, f_n)
    precision, recall, f1 = _f1(t, f_p, f_n)
    return BlockScore(precision, recall, f1, support, t, f_p, f_n)


def head_tail_report(preds, golds, train_counts, no_relation_id: int) -> tuple[BlockScore, BlockScore, list, list]:
    head, tail = head_tail_labels(train_counts, no_relation_id)
    n = len(train_counts)
    return block_score(preds, golds, head, n), block_score(preds, golds, tail, n), head, tail


def evaluate(preds, golds, label_names: Sequence[str], no_relation_id: int, train_counts=None) -> MetricsReport:
    """Full report; the head/tail blocks need ``train_counts`` and at least 20 positive classes."""
    n = len(label_names)
    p, g = _arrays(preds, golds)
    tp, fp, fn = class_counts(p, g, n)
    per_class = []
    for c in range(n):
        pr, rc, f1 = _f1(int(tp[c]), int(fp[c]), int(fn[c]))
        per_class.append(ClassScore(label_names[c], pr, rc, f1, int(tp[c] + fn[c])))
    precision, recall, micro = micro_prf_excl(p, g, no_relation_id)
    report = MetricsReport(
        micro_f1=micro,
        macro_f1=macro_f1(p, g, exclude={no_relation_id}, n_labels=n),
        precision=precision,
        recall=recall,
        per_class=per_class,
    )
    if train_counts is not None:
        head, tail, hl, tl = head_tail_report(p, g, train_counts, no_relation_id)
        report.head_block, report.tail_block = head, tail
        report.head_labels, report.tail_labels = list(map(int, hl)), list(map(int, tl))
    return report


def weight_norm_report(weights, order: Sequence[int], no_relation_id: int | None = None) -> list[tuple[int, float]]:
    """Euclidean norm of each class's weight row, listed in ``order``.

    ``weights`` holds one row per class.  ``no_relation`` is dropped.
    """
    w = np.asarray(weights, dtype=np.float64)
    return [
        (int(c), float(np.sqrt(np.sum(w[c] * w[c]))))
        for c in order
        if no_relation_id is None or c != no_relation_id
    ]


def frequency_order(train_counts, no_relation_id: int) -> list[int]:
    counts = np.asarray(train_counts)
    return sorted((c for c in range(len(counts)) if c != no_relation_id), key=lambda c: (-counts[c], c))


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def emit_csv(rows: Sequence[Sequence], columns: Sequence[str], path) -> None:
    """Write ``rows`` as CSV; the first line is a ``#``-prefixed header naming ``columns``."""
    buf = io.StringIO()
    buf.write("# " + ",".join(columns) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        if len(row) != len(columns):
            raise ContractError(f"row {row!r} does not match columns {list(columns)}")
        writer.writerow([_fmt(v) for v in row])
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(buf.getvalue(), encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ContractError(f"{path}: missing header comment")
        columns = header[1:].strip().split(",")
        rows = list(csv.reader(fh))
    return columns, rows
