import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from klg.errors import ConfigError, ContractError
from klg.metrics import (
    block_score,
    emit_csv,
    evaluate,
    frequency_order,
    head_tail_labels,
    macro_f1,
    micro_f1_excl,
    read_csv,
    weight_norm_report,
)


def confusion_oracle(preds, golds, n):
    m = np.zeros((n, n), dtype=int)
    for p, g in zip(preds, golds):
        m[g, p] += 1
    return m


def f1(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def micro_oracle(preds, golds, n, nr):
    m = confusion_oracle(preds, golds, n)
    keep = [c for c in range(n) if c != nr]
    tp = sum(m[c, c] for c in keep)
    fp = sum(m[:, c].sum() - m[c, c] for c in keep)
    fn = sum(m[c, :].sum() - m[c, c] for c in keep)
    return f1(tp, fp, fn)


class TestMicroF1:
    def test_perfect(self):
        assert micro_f1_excl([0, 1, 2, 0], [0, 1, 2, 0], 0) == 1.0

    def test_all_no_relation(self):
        assert micro_f1_excl([0, 0, 0], [1, 2, 0], 0) == 0.0

    def test_hand_built_confusion(self):
        golds = [0, 1, 1, 2, 2, 0]
        preds = [1, 1, 0, 2, 1, 0]
        # tp = 2 (ex 1, 3); fp = 2 (ex 0 predicted 1, ex 4 predicted 1); fn = 2 (ex 2, 4)
        assert abs(micro_f1_excl(preds, golds, 0) - 0.5) <= 1e-12
        assert abs(micro_f1_excl(preds, golds, 0) - micro_oracle(preds, golds, 3, 0)) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            micro_f1_excl([0, 1], [0], 0)

    @settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_random_against_oracle(self, data):
        n = data.draw(st.integers(2, 8))
        size = data.draw(st.integers(1, 40))
        preds = data.draw(st.lists(st.integers(0, n - 1), min_size=size, max_size=size))
        golds = data.draw(st.lists(st.integers(0, n - 1), min_size=size, max_size=size))
        nr = data.draw(st.integers(0, n - 1))
        assert abs(micro_f1_excl(preds, golds, nr) - micro_oracle(preds, golds, n, nr)) <= 1e-12

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(0)
        preds, golds = rng.integers(0, 6, 100), rng.integers(0, 6, 100)
        perm = np.concatenate([[0], 1 + rng.permutation(5)])
        assert micro_f1_excl(perm[preds], perm[golds], 0) == micro_f1_excl(preds, golds, 0)


class TestMacroF1:
    def test_perfect(self):
        assert macro_f1([1, 2, 3], [1, 2, 3], exclude={0}, n_labels=4) == 1.0

    def test_mean_of_two(self):
        assert macro_f1([1, 1], [1, 2], exclude={0}, n_labels=3) == pytest.approx((2 / 3 + 0.0) / 2)

    def test_exact_half(self):
        assert macro_f1([1, 1, 0], [1, 1, 2], exclude={0}, n_labels=3) == 0.5

    def test_zero_support_counts_as_zero(self):
        # class 3 never appears and is never predicted
        assert macro_f1([1, 2], [1, 2], exclude={0}, n_labels=4) == pytest.approx(2 / 3)

    def test_all_excluded(self):
        with pytest.raises(ContractError):
            macro_f1([0], [0], exclude={0}, n_labels=1)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            preds, golds = rng.integers(0, n, 60), rng.integers(0, n, 60)
            m = confusion_oracle(preds, golds, n)
            scores = [f1(m[c, c], m[:, c].sum() - m[c, c], m[c, :].sum() - m[c, c]) for c in range(1, n)]
            assert abs(macro_f1(preds, golds, exclude={0}, n_labels=n) - np.mean(scores)) <= 1e-12

    def test_equal_classes_macro_equals_micro(self):
        golds = [1, 1, 2, 2, 3, 3]
        preds = [1, 0, 2, 0, 3, 0]
        assert macro_f1(preds, golds, exclude={0}, n_labels=4) == pytest.approx(micro_f1_excl(preds, golds, 0))


def counts_21():
    return np.array([900] + [int(1000 * r**-1.2) for r in range(1, 21)])


class TestHeadTail:
    def test_labels(self):
        head, tail = head_tail_labels(counts_21(), 0)
        assert head == list(range(1, 11)) and tail == list(range(11, 21))
        assert not set(head) & set(tail)

    def test_ties_by_id(self):
        counts = np.array([5] + [3] * 20)
        head, tail = head_tail_labels(counts, 0)
        assert head == list(range(1, 11)) and tail == list(range(11, 21))

    def test_too_few_labels(self):
        with pytest.raises(ConfigError):
            head_tail_labels(np.ones(20), 0)

    def test_partition_additivity(self):
        rng = np.random.default_rng(2)
        n = 25
        counts = np.concatenate([[500], rng.permutation(np.arange(1, n) * 7)])
        head, tail = head_tail_labels(counts, 0)
        middle = [c for c in range(1, n) if c not in head and c not in tail]
        preds, golds = rng.integers(0, n, 400), rng.integers(0, n, 400)
        blocks = [block_score(preds, golds, labels, n) for labels in (head, tail, middle)]
        m = confusion_oracle(preds, golds, n)
        assert sum(b.tp for b in blocks) == sum(m[c, c] for c in range(1, n))

    def test_covering_blocks_reproduce_pooled(self):
        rng = np.random.default_rng(3)
        n = 21
        counts = counts_21()
        preds, golds = rng.integers(0, n, 300), rng.integers(0, n, 300)
        head, tail = head_tail_labels(counts, 0)
        both = block_score(preds, golds, head + tail, n)
        assert both.micro_f1 == pytest.approx(micro_f1_excl(preds, golds, 0), abs=1e-12)

    def test_empty_tail_is_undefined(self):
        golds = [1, 2, 3, 0]
        report = evaluate(golds, golds, [f"c{i}" if i else "no_relation" for i in range(21)], 0, counts_21())
        assert report.tail_block.support == 0
        assert report.tail_block.micro_f1 is None and not report.tail_block.defined
        assert report.head_block.micro_f1 == 1.0


class TestEvaluate:
    def test_report_fields(self):
        rng = np.random.default_rng(4)
        names = ["no_relation"] + [f"r{i}" for i in range(1, 21)]
        preds, golds = rng.integers(0, 21, 200), rng.integers(0, 21, 200)
        report = evaluate(preds, golds, names, 0, counts_21())
        assert sum(c.support for c in report.per_class) == 200
        for c in report.per_class:
            assert 0 <= c.precision <= 1 and 0 <= c.recall <= 1 and 0 <= c.f1 <= 1
        assert report.micro_f1 == micro_f1_excl(preds, golds, 0)
        d = report.to_dict()
        assert d["head_labels"] == list(range(1, 11)) and d["per_class"][0]["label"] == "no_relation"


class TestWeightNorms:
    def test_three_four_five(self):
        assert weight_norm_report(np.array([[3.0, 4.0]]), [0]) == [(0, 5.0)]

    def test_zero(self):
        assert all(v == 0.0 for _, v in weight_norm_report(np.zeros((4, 3)), [0, 1, 2, 3]))

    def test_oracle_and_order(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(21, 16))
        w[7] = 0.0
        order = frequency_order(counts_21(), 0)
        rows = weight_norm_report(w, order, no_relation_id=0)
        assert [c for c, _ in rows] == order and 0 not in order
        for c, v in rows:
            assert abs(v - np.sqrt(sum(x * x for x in w[c]))) <= 1e-12
            assert (v == 0.0) == (c == 7)


class TestCsv:
    def test_recall_curve_lines(self, tmp_path):
        curve = [0.5, 0.75, 0.875, 1.0]
        emit_csv(list(enumerate(curve, start=1)), ("k", "recall"), tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert len(lines) == 5 and lines[0] == "# k,recall" and lines[1] == "1,0.5"

    def test_round_trip_six_digits(self, tmp_path):
        rng = np.random.default_rng(6)
        values = rng.normal(scale=100.0, size=50)
        emit_csv([(f"c{i}", v) for i, v in enumerate(values)], ("label", "norm"), tmp_path / "n.csv")
        columns, rows = read_csv(tmp_path / "n.csv")
        assert columns == ["label", "norm"]
        for (label, text), v in zip(rows, values):
            assert float(text) == pytest.approx(v, rel=5e-6)
            assert float(text) == float(f"{v:.6g}")

    def test_empty(self, tmp_path):
        emit_csv([], ("k", "recall"), tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text() == "# k,recall\n"

    def test_row_width(self, tmp_path):
        with pytest.raises(ContractError):
            emit_csv([(1, 2, 3)], ("k", "recall"), tmp_path / "x.csv")

    def test_unwritable_path_named(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            emit_csv([], ("k",), blocker / "sub" / "x.csv")
