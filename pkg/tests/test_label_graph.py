import numpy as np
import pytest

from klg import tensor as T
from klg.base_model import TopKSet
from klg.errors import ConfigError, ContractError
from klg.label_graph import (
    build_label_graph,
    classify_final,
    edge_count,
    final_logits,
    fuse,
    fuse_batch,
    gat_attend,
    gat_attend_batch,
    gat_score,
    init_graph_params,
)
from klg.tensor import Tensor


def params(d=8, n=12, seed=0, **kw):
    return init_graph_params(n, d, np.random.default_rng(seed), node_std=0.5, **kw)


def topk(labels):
    return TopKSet("x", tuple(labels), tuple(1.0 / (i + 1) for i in range(len(labels))))


def dense_gat_oracle(p, adjacency, members):
    """Masked dense attention written directly from the pairwise score."""
    x = p.nodes.data
    w = p.gat_w.data
    a = p.gat_a.data
    d = x.shape[1]
    out = []
    for u in members:
        scores = np.full(x.shape[0], -np.inf)
        for v in range(x.shape[0]):
            if adjacency[u, v]:
                s = a[:d] @ (x[u] @ w) + a[d:] @ (x[v] @ w)
                scores[v] = s if s >= 0 else 0.2 * s
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        out.append(np.tanh(alpha @ (x @ w)))
    return np.array(out)


class TestBuildLabelGraph:
    def test_three_members(self):
        a = build_label_graph(topk([4, 1, 7]), 10)
        pairs = {(u, v) for u in range(10) for v in range(u, 10) if a[u, v]}
        assert pairs == {(1, 1), (1, 4), (1, 7), (4, 4), (4, 7), (7, 7)}
        assert edge_count(a) == 6

    def test_single_self_loop(self):
        a = build_label_graph(topk([3]), 5)
        assert edge_count(a) == 1 and a[3, 3] and a.sum() == 1

    def test_five_members(self):
        assert edge_count(build_label_graph(topk([0, 2, 4, 6, 8]), 9)) == 15

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            build_label_graph(topk([2, 12]), 12)

    def test_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(1, 25))
            k = int(rng.integers(1, n + 1))
            members = rng.permutation(n)[:k]
            a = build_label_graph(topk(members), n)
            assert (a == a.T).all()
            inside = np.zeros(n, bool)
            inside[members] = True
            assert (a[~inside].sum() == 0) and (a[:, ~inside].sum() == 0)
            assert a[np.ix_(members, members)].all()
            assert edge_count(a) == k * (k + 1) // 2
            assert (build_label_graph(topk(members), n) == a).all()


class TestGatScore:
    def test_hand_computed(self):
        p = params(d=2, n=3, heads=1)
        p.gat_w.data[...] = [[1.0, 2.0], [0.0, 1.0]]
        p.gat_a.data[...] = [1.0, -1.0, 2.0, -3.0]
        # h_u @ W = [1, 2], h_v @ W = [0, 1]; a . [1, 2, 0, 1] = -4 -> LeakyReLU gives -0.8
        assert gat_score(p, Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(-0.8, abs=1e-15)
        # positive branch: h_u = h_v = [0, 1] -> a . [0, 1, 0, 1] = 3
        p.gat_a.data[...] = [0.0, 1.0, 0.0, 2.0]
        assert gat_score(p, Tensor([0.0, 1.0]), Tensor([0.0, 1.0])).item() == pytest.approx(3.0, abs=1e-15)

    def test_zero_a(self):
        p = params()
        p.gat_a.data[...] = 0.0
        rng = np.random.default_rng(1)
        assert gat_score(p, Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))).item() == 0.0

    def test_zero_w(self):
        p = params()
        p.gat_w.data[...] = 0.0
        rng = np.random.default_rng(1)
        assert gat_score(p, Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))).item() == 0.0

    def test_shape(self):
        with pytest.raises(ContractError):
            gat_score(params(), Tensor(np.ones(3)), Tensor(np.ones(8)))

    def test_batched_scores_match_pairwise(self):
        p = params(seed=3)
        members = np.array([[5, 0, 9, 2]])
        _, alpha = gat_attend_batch(p, members)
        for i, u in enumerate(members[0]):
            s = np.array([gat_score(p, p.nodes[int(u)], p.nodes[int(v)]).item() for v in members[0]])
            e = np.exp(s - s.max())
            np.testing.assert_allclose(alpha[0, i], e / e.sum(), atol=1e-14)


class TestGatAttend:
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            p = params(seed=trial)
            k = int(rng.integers(1, 9))
            members = rng.permutation(12)[:k]
            graph = build_label_graph(topk(members), 12)
            got = gat_attend(p, graph, topk(members)).data
            np.testing.assert_allclose(got, dense_gat_oracle(p, graph, members), atol=1e-13)

    def test_single_member(self):
        p = params()
        got = gat_attend(p, build_label_graph(topk([6]), 12), topk([6])).data
        np.testing.assert_allclose(got[0], np.tanh(p.nodes.data[6] @ p.gat_w.data), atol=1e-15)

    def test_identical_features_give_uniform_attention(self):
        p = params()
        p.nodes.data[...] = p.nodes.data[0]
        _, alpha = gat_attend_batch(p, np.array([[1, 4, 7, 9, 11]]))
        np.testing.assert_allclose(alpha, np.full((1, 5, 5), 0.2), atol=1e-15)

    def test_attention_rows_normalised(self):
        p = params(seed=8)
        _, alpha = gat_attend_batch(p, np.random.default_rng(0).permuted(np.tile(np.arange(12), (6, 1)), axis=1)[:, :7])
        np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-12)

    def test_permutation_equivariant(self):
        p = params(seed=2)
        members = np.array([3, 8, 0, 5])
        perm = np.array([2, 0, 3, 1])
        out, _ = gat_attend_batch(p, members[None])
        out_p, _ = gat_attend_batch(p, members[perm][None])
        np.testing.assert_allclose(out_p.data[0], out.data[0][perm], atol=1e-14)

    @pytest.mark.parametrize("sigma", ["identity", "sigmoid"])
    def test_alternative_activations(self, sigma):
        p = params(sigma=sigma)
        out = gat_attend(p, build_label_graph(topk([2]), 12), topk([2])).data[0]
        pre = p.nodes.data[2] @ p.gat_w.data
        expected = pre if sigma == "identity" else 1 / (1 + np.exp(-pre))
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            params(sigma="elu")

    def test_graph_must_match(self):
        with pytest.raises(ContractError):
            gat_attend(params(), build_label_graph(topk([1, 2]), 12), topk([1, 3]))

    def test_empty(self):
        with pytest.raises(ContractError):
            gat_attend_batch(params(), np.zeros((1, 0), dtype=int))


class TestFuse:
    def test_single_key(self):
        p = params()
        rng = np.random.default_rng(5)
        r, x = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=(1, 8)))
        expected = (x.data[0] @ p.wv.data) @ p.wo.data + p.bo.data
        np.testing.assert_allclose(fuse(p, r, x).data, expected, atol=1e-14)

    def test_identical_rows_independent_of_k(self):
        p = params()
        rng = np.random.default_rng(6)
        r, row = Tensor(rng.normal(size=8)), rng.normal(size=8)
        outs = [fuse(p, r, Tensor(np.tile(row, (k, 1)))).data for k in (1, 2, 5)]
        np.testing.assert_allclose(outs[1], outs[0], atol=1e-14)
        np.testing.assert_allclose(outs[2], outs[0], atol=1e-14)

    def test_key_order_irrelevant(self):
        p = params()
        rng = np.random.default_rng(7)
        r, x = Tensor(rng.normal(size=8)), rng.normal(size=(4, 8))
        a = fuse(p, r, Tensor(x)).data
        b = fuse(p, r, Tensor(x[[3, 1, 0, 2]])).data
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_multi_head_oracle(self):
        p = params()
        rng = np.random.default_rng(9)
        r, x = rng.normal(size=8), rng.normal(size=(3, 8))
        q, k, v = r @ p.wq.data, x @ p.wk.data, x @ p.wv.data
        heads = []
        for h in range(4):
            sl = slice(2 * h, 2 * h + 2)
            s = k[:, sl] @ q[sl] / np.sqrt(2)
            w = np.exp(s - s.max())
            heads.append((w / w.sum()) @ v[:, sl])
        expected = np.concatenate(heads) @ p.wo.data + p.bo.data
        np.testing.assert_allclose(fuse(p, Tensor(r), Tensor(x)).data, expected, atol=1e-14)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            params(d=6, heads=4)

    def test_gradient(self):
        p = params()
        rng = np.random.default_rng(10)
        r = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 8)))
        loss = lambda: T.sum_all(T.mul(fuse_batch(p, r, x), w))
        assert T.grad_check(loss, [r, x, p.wq, p.wk, p.wv, p.wo, p.bo], tol=1e-4)


class TestClassifyFinal:
    def test_sums_to_one(self):
        p = params()
        rng = np.random.default_rng(11)
        probs = classify_final(p, Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))).data
        assert probs.shape == (12,) and abs(probs.sum() - 1.0) <= 1e-12

    def test_zero_head_uniform(self):
        p = params()
        p.final_w.data[...] = 0.0
        probs = classify_final(p, Tensor(np.ones(8)), Tensor(np.ones(8))).data
        np.testing.assert_allclose(probs, np.full(12, 1 / 12), atol=1e-15)

    def test_argmax_outside_topk_allowed(self):
        p = params()
        members = np.array([[0, 1, 2]])
        p.final_w.data[...] = 0.0
        p.final_b.data[...] = 0.0
        p.final_b.data[9] = 5.0
        r = Tensor(np.ones((1, 8)))
        updated, _ = gat_attend_batch(p, members)
        r_hat = fuse_batch(p, r, updated)
        probs = classify_final(p, Tensor(r.data[0]), Tensor(r_hat.data[0])).data
        assert int(np.argmax(probs)) == 9 and 9 not in members[0]

    def test_end_to_end_gradient(self):
        p = params(d=8, n=12)
        rng = np.random.default_rng(12)
        r = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        members = np.array([[3, 7, 1], [0, 11, 5]])

        def loss():
            updated, _ = gat_attend_batch(p, members)
            r_hat = fuse_batch(p, r, updated)
            return T.cross_entropy(final_logits(p, r, r_hat), [7, 2])

        assert T.grad_check(loss, [r, *p.tensors().values()], tol=1e-4)
