import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphdoc import gradcore as gc
from graphdoc.docmodel import Document, GraphDocModel, ModelConfig
from graphdoc.errors import DataError, DimensionError, UsageError
from graphdoc.taskheads import (ClassificationConfig, ClassifierHead, accuracy, classification_loss,
                                cluster_eval, finetune_classification, kmeans, nmi, predict, purity)

from conftest import TINY

labels_st = st.lists(st.integers(0, 3), min_size=2, max_size=40)


def two_class_docs(n=12):
    """Class x uses only x-words, class y only y-words."""
    rng = np.random.default_rng(0)
    docs = []
    for i in range(n):
        label = "x" if i % 2 == 0 else "y"
        vocab = [f"{label}{j}" for j in range(6)]
        secs = [[" ".join(rng.choice(vocab, 5)) for _ in range(2)]]
        docs.append(Document(f"c{i:02d}", secs, label=label))
    return docs


class TestAccuracy:
    def test_examples(self):
        assert accuracy(list("abcd"), list("abcd")) == 1.0
        assert accuracy(list("bbbb"), list("aaaa")) == 0.0
        assert accuracy(list("abca"), list("abcd")) == 0.75

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            accuracy(["a"], ["a", "b"])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from("ab"), st.sampled_from("ab")), min_size=1, max_size=20),
           st.randoms())
    def test_permutation_invariant(self, pairs, rnd):
        p, l = zip(*pairs)
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        sp, sl = zip(*shuffled)
        assert accuracy(p, l) == accuracy(sp, sl)


class TestClassifierHead:
    def test_sorted_labels(self):
        head = ClassifierHead(["b", "a", "c", "a"], 4)
        assert head.labels == ["a", "b", "c"]
        assert head.params["head.weight"].shape == (3, 4)

    def test_needs_two_labels(self):
        with pytest.raises(UsageError):
            ClassifierHead(["a", "a"], 4)

    def test_unknown_label(self):
        head = ClassifierHead(["a", "b"], 4)
        with pytest.raises(DataError):
            head.targets([Document("d", [["w"]], label="zz")])

    def test_inits(self):
        assert np.all(ClassifierHead(["a", "b"], 4).params["head.weight"].data == 0)
        w = ClassifierHead(["a", "b"], 16, init="uniform").params["head.weight"].data
        assert np.all(np.abs(w) <= 0.25) and np.any(w != 0)
        with pytest.raises(UsageError):
            ClassifierHead(["a", "b"], 4, init="normal")

    def test_argmax_shift_invariant(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(10, 4))
        assert np.array_equal(np.argmax(logits, 1), np.argmax(logits + 3.7, 1))

    def test_gradient_through_head_and_model(self, tiny_model):
        docs = two_class_docs(4)
        head = ClassifierHead(["x", "y"], TINY["d_model"], seed=1, init="uniform")
        store = tiny_model.params.merged(head.params)
        assert gc.check_gradients(lambda: classification_loss(tiny_model, head, docs), store) < 1e-4


class TestFinetune:
    def test_separable_classes(self):
        docs = two_class_docs()
        model = GraphDocModel(ModelConfig(**dict(TINY, vocab_buckets=256)), seed=0)
        head = ClassifierHead(["x", "y"], TINY["d_model"])
        res = finetune_classification(model, head, docs, ClassificationConfig(lr=0.05, batch_size=4, epochs=20),
                                      val=docs)
        assert accuracy(predict(model, head, docs), [d.label for d in docs]) >= 0.99
        assert res.epochs_to_reach(0.99) is not None and len(res.val_accuracy) == 20

    def test_frozen_model_head_only(self):
        docs = two_class_docs()
        model = GraphDocModel(ModelConfig(**TINY), seed=0)
        before = model.params.snapshot()
        head = ClassifierHead(["x", "y"], TINY["d_model"])
        cfg = ClassificationConfig(lr=1e-2, batch_size=12, epochs=100, warmup=0.0, schedule="constant",
                                   weight_decay=0.0, freeze_model=True)
        res = finetune_classification(model, head, docs, cfg)
        losses = [l for _, _, l in res.log]
        assert len(losses) == 100
        # full batch, fixed order: the convex head problem decreases every step
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]
        for p, arr in before.items():
            np.testing.assert_array_equal(model.params[p].data, arr)

    def test_epochs_to_reach(self):
        from graphdoc.taskheads import ClassificationResult
        res = ClassificationResult(None, None, val_accuracy=[0.5, 0.92, 0.95])
        assert res.epochs_to_reach(0.9) == 2 and res.epochs_to_reach(0.99) is None


class TestKmeans:
    def test_single_cluster_is_mean(self):
        pts = np.random.default_rng(0).normal(size=(20, 3))
        fit = kmeans(pts, 1)
        np.testing.assert_allclose(fit.centroids[0], pts.mean(axis=0), atol=1e-12)

    def test_two_blobs(self):
        pts = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.0, 10.1]])
        lab = kmeans(pts, 2, seed=3).labels
        assert lab[0] == lab[1] and lab[2] == lab[3] and lab[0] != lab[2]

    @pytest.mark.parametrize("seed", range(5))
    def test_inertia_non_increasing(self, seed):
        pts = np.random.default_rng(seed).normal(size=(60, 4))
        hist = kmeans(pts, 5, seed=seed).inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_deterministic_and_valid(self):
        pts = np.random.default_rng(1).normal(size=(30, 2))
        a, b = kmeans(pts, 4, seed=9), kmeans(pts, 4, seed=9)
        assert np.array_equal(a.labels, b.labels)
        assert a.labels.max() < 4 and np.all(np.isfinite(a.centroids))

    def test_duplicate_points_fill_every_cluster(self):
        pts = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
        fit = kmeans(pts, 3, seed=0)
        assert np.all(np.isfinite(fit.centroids))

    def test_too_few_points(self):
        with pytest.raises(DataError):
            kmeans(np.zeros((2, 2)), 3)


class TestClusterScores:
    def test_identical(self):
        assert nmi([0, 0, 1, 1], list("aabb")) == 1.0
        assert purity([0, 0, 1, 1], list("aabb")) == 1.0

    def test_single_cluster(self):
        assert nmi([0, 0, 0, 0], list("aabb")) == 0.0
        assert purity([0, 0, 0, 0], list("aabb")) == 0.5

    def test_both_trivial(self):
        assert nmi([0, 0], list("aa")) == 1.0

    def test_independent(self):
        assert abs(nmi([0, 0, 1, 1], list("abab"))) < 1e-15
        assert purity([0, 0, 1, 1], list("abab")) == 0.5

    def test_hand_value(self):
        # contingency [[2,0],[1,1]]; entropies from the marginals (3,1) and (2,2)
        a, l = [0, 0, 1, 1], list("aaab")
        mi = 0.5 * math.log(0.5 / (0.5 * 0.75)) + 0.25 * math.log(0.25 / (0.5 * 0.75)) \
            + 0.25 * math.log(0.25 / (0.5 * 0.25))
        hc = math.log(2)
        hl = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert abs(nmi(a, l) - mi / math.sqrt(hc * hl)) < 1e-12
        assert abs(nmi(a, l, "arithmetic") - mi / (0.5 * (hc + hl))) < 1e-12
        assert purity(a, l) == 0.75

    def test_errors(self):
        with pytest.raises(DimensionError):
            nmi([0], [0, 1])
        with pytest.raises(DataError):
            purity([], [])
        with pytest.raises(UsageError):
            nmi([0, 1], [0, 1], "max")

    @settings(max_examples=100, deadline=None)
    @given(labels_st, st.randoms())
    def test_against_sklearn(self, labels, rnd):
        metrics = pytest.importorskip("sklearn.metrics")
        assign = [rnd.randrange(3) for _ in labels]
        if len(set(assign)) < 2 or len(set(labels)) < 2:
            return
        for avg in ("geometric", "arithmetic"):
            ref = metrics.normalized_mutual_info_score(labels, assign, average_method=avg)
            assert abs(nmi(assign, labels, avg) - ref) < 1e-10

    @settings(max_examples=100, deadline=None)
    @given(labels_st, st.permutations(range(4)))
    def test_relabel_invariant(self, labels, perm):
        assign = [(x * 7 + 1) % 3 for x in labels]
        renamed = [perm[a] for a in assign]
        assert abs(nmi(assign, labels) - nmi(renamed, labels)) < 1e-12
        assert purity(assign, labels) == purity(renamed, labels)
        assert 0.0 <= nmi(assign, labels) <= 1.0 and 0.0 < purity(assign, labels) <= 1.0


class TestClusterEval:
    def test_runs_and_default_k(self, small_corpus, tiny_model):
        out = cluster_eval(tiny_model, small_corpus.train, small_corpus.test, seed=0)
        assert set(out) == {"nmi", "purity"}
        assert 0 <= out["nmi"] <= 1 and 0 < out["purity"] <= 1
        again = cluster_eval(tiny_model, small_corpus.train, small_corpus.test, seed=0)
        assert again == out
        cluster_eval(tiny_model, small_corpus.train, small_corpus.test, k=2, normalize=True)
