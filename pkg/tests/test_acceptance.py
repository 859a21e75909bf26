"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Experiment settings come from ``configs/desk.ini``. Criteria 6, 7 and 10
share one pretraining run per seed.
"""
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from graphdoc import gradcore as gc
from graphdoc import retrieval as R
from graphdoc.cli import main as cli_main
from graphdoc.config import Config
from graphdoc.contrastive import gradient_check, nce_loss, nce_loss_one_sided, pretrain
from graphdoc.corpusio import generate_synthetic
from graphdoc.docmodel import Document, GatLayerParams, GraphDocModel, ModelConfig, build_graph, gat_layer
from graphdoc.taskheads import ClassifierHead, accuracy, cluster_eval, finetune_classification, predict

from conftest import TINY, make_doc
from test_retrieval import brute_bm25

DESK = Config.load(Path(__file__).resolve().parents[1] / "configs" / "desk.ini")
SEEDS = (0, 1, 2)
N_LABELLED = 50


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return emit


def desk(seed, **overrides):
    cfg = Config(dict(DESK.values))
    cfg.set("seed", seed)
    for k, v in overrides.items():
        cfg.set(k, v)
    return cfg


# ---------------------------------------------------------------- 1-5: exact checks


def test_c01_gradient_fidelity(report):
    t = time.perf_counter()
    err = gradient_check()
    elapsed = time.perf_counter() - t
    report(1, err < 1e-4 and elapsed < 60,
           f"max relative error {err:.3e} (< 1e-4) in {elapsed:.1f} s (< 60 s), d_model=8 H=2 T=2, 3 docs x 4 passages")


def test_c02_nce_identities(report):
    one = nce_loss(gc.Tensor(np.array([[0.3, 1.2]])), gc.Tensor(np.array([[2.0, -1.0]]))).item()
    worst_ln = 0.0
    for n in (2, 3, 5, 16, 32):
        rows = np.tile(np.random.default_rng(n).normal(size=4), (n, 1))
        worst_ln = max(worst_ln, abs(nce_loss(gc.Tensor(rows), gc.Tensor(rows)).item() - math.log(n)))
    closed = math.log(1 + math.exp(-1))
    eye = gc.Tensor(np.eye(2))
    worst_cf = max(abs(nce_loss(eye, eye).item() - closed), abs(nce_loss_one_sided(eye, eye).item() - closed))
    ok = one == 0.0 and worst_ln < 1e-9 and worst_cf < 1e-9
    report(2, ok, f"N=1 loss {one!r}; |loss - ln N| max {worst_ln:.1e}; closed form error {worst_cf:.1e}")


def test_c03_gat_correctness(report):
    rng = np.random.default_rng(0)
    worst_row = 0.0
    for _ in range(100):
        sizes = [(int(n),) for n in rng.integers(1, 7, int(rng.integers(1, 4)))]
        topology = ["full", "section"][int(rng.integers(2))]
        g = build_graph(make_doc(sections=sizes, seed=int(rng.integers(1 << 30))), topology, bool(rng.integers(2)))
        indptr, _ = g.csr()
        layer = GatLayerParams([gc.Tensor(rng.normal(size=(4, 8))) for _ in range(2)],
                               [gc.Tensor(rng.normal(size=8)) for _ in range(2)])
        _, alphas = gat_layer(layer, g, gc.Tensor(rng.normal(size=(g.node_count, 8))))
        for a in alphas:
            worst_row = max(worst_row, float(np.abs(np.add.reduceat(a, indptr[:-1]) - 1).max()))

    indptr, indices = np.array([0, 2, 5, 7]), np.array([0, 1, 0, 1, 2, 1, 2])
    hand = GatLayerParams([gc.Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))], [gc.Tensor(np.array([1.0, -1.0, 0.5, 1.0]))])
    out, alphas = gat_layer(hand, (indptr, indices), gc.Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])))
    # softmax of LeakyReLU scores over each neighbourhood, worked by hand
    s1 = [1.0, -2.0, -1.0]
    s2 = [0.5, 2.0, 2.5]
    expected_alpha, expected_out = [], []
    z = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 2.0]])
    v = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    for i, nb in enumerate([[0, 1], [0, 1, 2], [1, 2]]):
        e = [s1[i] + s2[j] for j in nb]
        e = [x if x > 0 else 0.2 * x for x in e]
        w = [math.exp(x) for x in e]
        al = [x / sum(w) for x in w]
        expected_alpha += al
        agg = sum(a * z[j] for a, j in zip(al, nb))
        expected_out.append([x if x > 0 else math.expm1(x) for x in agg] + v[i])
    hand_err = max(float(np.abs(alphas[0] - expected_alpha).max()), float(np.abs(out.data - expected_out).max()))

    worst_perm = 0.0
    for seed in range(20):
        model = GraphDocModel(ModelConfig(**TINY), seed=seed)
        doc = make_doc(sections=[(int(rng.integers(2, 9)),)], seed=seed)
        shuffled = Document("p", [list(np.array(doc.passages)[rng.permutation(doc.n_passages)])])
        worst_perm = max(worst_perm, float(np.abs(model.encode_document(doc).data
                                                  - model.encode_document(shuffled).data).max()))
    ok = worst_row < 1e-9 and hand_err < 1e-9 and worst_perm < 1e-10
    report(3, ok, f"row-sum error {worst_row:.1e} on 100 graphs; hand example error {hand_err:.1e}; "
                  f"permutation drift {worst_perm:.1e}")


def _metric_cases():
    """20 constructed runs with values worked out by hand."""
    l3 = math.log2(3)
    l4 = 2.0
    cases = [
        ({"q": [("a", 3), ("b", 2), ("c", 1)]}, {"q": {"a": 1}}, {"mrr@10": 1.0, "p@1": 1.0, "ndcg@3": 1.0}),
        ({"q": [("x", 3), ("y", 2), ("a", 1)]}, {"q": {"a": 1}}, {"mrr@10": 1 / 3, "p@3": 1 / 3, "ndcg@3": 0.5}),
        ({"q": [("b", 3), ("a", 2), ("c", 1)]}, {"q": {"a": 3, "b": 2}},
         {"ndcg@3": (2 + 3 / l3) / (3 + 2 / l3), "mrr@10": 1.0, "p@2": 1.0}),
        ({"q": [("x", 3), ("a", 2)]}, {"q": {"a": 1}}, {"mrr@1": 0.0, "mrr@2": 0.5, "ndcg@2": 1 / l3}),
        ({"q": [("x", 3), ("y", 2), ("z", 1), ("a", 0)]}, {"q": {"a": 2}}, {"ndcg@4": 1 / math.log2(5), "p@4": 0.25}),
        ({"q": [("a", 2), ("x", 1), ("b", 0)]}, {"q": {"a": 1, "b": 1}},
         {"ndcg@3": (1 + 0.5) / (1 + 1 / l3), "p@3": 2 / 3}),
        ({"q1": [("a", 1)], "q2": [("x", 1)]}, {"q1": {"a": 1}, "q2": {"b": 1}}, {"mrr@10": 0.5, "p@1": 0.5}),
        ({"q1": [("a", 1)]}, {"q1": {"a": 1}, "q2": {"b": 1}}, {"ndcg@5": 0.5}),
        ({"q1": [("a", 1)], "q2": [("a", 1)]}, {"q1": {"a": 1}}, {"mrr@10": 0.5}),
        ({"q": [("x", 4), ("y", 3), ("a", 2), ("b", 1)]}, {"q": {"a": 1, "b": 1}},
         {"ndcg@4": (0.5 + 1 / math.log2(5)) / (1 + 1 / l3), "mrr@10": 1 / 3}),
        ({"q": [("a", 1), ("b", 0)]}, {"q": {"a": 1, "b": 3}},
         {"ndcg@2": (1 + 3 / l3) / (3 + 1 / l3)}),
        ({"q": [("a", 1), ("b", 0)]}, {"q": {"a": 1, "b": 3}},
         {"ndcg@1": 1 / 3}),
        ({"q": [("c", 3), ("b", 2), ("a", 1)]}, {"q": {"a": 3, "b": 2, "c": 1}},
         {"ndcg@3": (1 + 2 / l3 + 3 / l4) / (3 + 2 / l3 + 1 / l4)}),
        ({"q": [(f"d{i}", -i) for i in range(10)]}, {"q": {"d9": 1}}, {"mrr@10": 0.1, "p@10": 0.1}),
        ({"q": [(f"d{i}", -i) for i in range(10)]}, {"q": {"d9": 1}}, {"mrr@9": 0.0, "ndcg@9": 0.0}),
        ({"q": []}, {"q": {"a": 1}}, {"mrr@10": 0.0, "ndcg@10": 0.0, "p@10": 0.0}),
        ({"q": [("a", 1), ("b", 0)]}, {"q": {"a": 0, "b": 0}}, {"ndcg@2": 0.0, "mrr@2": 0.0}),
        ({"q": [("a", 1), ("b", 0)]}, {"q": {"a": 2, "b": 2}}, {"ndcg@2": 1.0, "p@2": 1.0}),
        ({"q": [("b", 1), ("a", 0)]}, {"q": {"a": 2}}, {"ndcg@2": 1 / l3, "p@1": 0.0}),
        ({"q": [("a", 3), ("b", 2), ("c", 1)]}, {"q": {"a": 1, "b": 1, "c": 1}}, {"ndcg@3": 1.0, "p@3": 1.0}),
    ]
    return cases


def test_c04_bm25_and_metric_oracles(report):
    rng = np.random.default_rng(4)
    vocab = "a b c d e f g h".split()
    mismatches = 0
    for _ in range(1000):
        n_docs = int(rng.integers(1, 15))
        texts = [" ".join(rng.choice(vocab, int(rng.integers(1, 9)))) for _ in range(n_docs)]
        ids = [f"d{i:02d}" for i in rng.permutation(n_docs)]
        docs = [Document(i, [[t]]) for i, t in zip(ids, texts)]
        idx = R.bm25_build(docs)
        query = " ".join(rng.choice(vocab, int(rng.integers(1, 4))))
        for k in (1, 3, n_docs + 2):
            if R.bm25_search(idx, query, k) != brute_bm25(texts, ids, query, k):
                mismatches += 1
    single = R.bm25_build([Document("d", [["a b a"]])])
    hand_err = abs(R.bm25_score(single, "a", "d") - math.log(4 / 3) * 2 / 2.9)

    cases = _metric_cases()
    worst = 0.0
    for run, qrels, expected in cases:
        for metric, value in expected.items():
            worst = max(worst, abs(R.evaluate(run, qrels, metric) - value))
    perfect = {"q": [("a", 2.0), ("b", 1.0)]}
    perfect_ok = R.ndcg_at_k(perfect, {"q": {"a": 2, "b": 1}}, 2) == 1.0 and R.mrr_at_k(perfect, {"q": {"a": 1}}, 2) == 1.0
    ok = mismatches == 0 and hand_err < 1e-6 and worst < 1e-9 and perfect_ok and len(cases) == 20
    report(4, ok, f"{mismatches} brute-force mismatches over 1000 corpora; single-doc error {hand_err:.1e}; "
                  f"worst metric error {worst:.1e} over {len(cases)} runs; perfect ranking -> 1: {perfect_ok}")


def test_c05_fusion_identities(report):
    rng = np.random.default_rng(5)
    bad = 0
    for trial in range(100):
        runs = []
        for _ in range(2):
            run = {}
            for q in range(int(rng.integers(1, 5))):
                docs = rng.choice(30, int(rng.integers(1, 15)), replace=False)
                scores = rng.integers(0, 5, len(docs)) if trial % 2 else rng.normal(size=len(docs))
                run[f"q{q}"] = sorted(((f"d{d:02d}", float(s)) for d, s in zip(docs, scores)),
                                      key=lambda x: (-x[1], x[0]))
            runs.append(run)
        dense, lex = runs
        ranks = lambda r: {q: [d for d, _ in v] for q, v in r.items() if v}
        for mode in ("minmax", "raw"):
            bad += ranks(R.fuse(dense, lex, 0.0, 100, mode)) != ranks(lex)
            bad += ranks(R.fuse(dense, lex, 1.0, 100, mode)) != ranks(dense)
    report(5, bad == 0, f"{bad} endpoint mismatches over 100 random run pairs x 2 normalisations")


# ---------------------------------------------------------------- 6, 7, 10: pretraining effects


@pytest.fixture(scope="module")
def topic_runs():
    """Per seed: corpus, random-init and pretrained parameters, pretraining log."""
    out = {}
    for seed in SEEDS:
        cfg = desk(seed)
        c = generate_synthetic(topics=cfg["topics"], vocab_per_topic=cfg["vocab_per_topic"],
                               background_vocab=cfg["background_vocab"], docs=cfg["docs"],
                               dev_docs=cfg["dev_docs"], test_docs=cfg["test_docs"], seed=seed)
        model = GraphDocModel(cfg.model(), seed=seed)
        init = model.params.snapshot()
        t = time.perf_counter()
        res = pretrain(c.train, model, cfg.pretrain())
        out[seed] = dict(cfg=cfg, corpus=c, init=init, pre=model.params.snapshot(), log=res.log,
                         seconds=time.perf_counter() - t)
    return out


def test_c06_clustering_benefit(report, topic_runs):
    t = time.perf_counter()
    rows = []
    for seed, r in topic_runs.items():
        c = r["corpus"]
        nmis = []
        for params in (r["init"], r["pre"]):
            model = GraphDocModel(r["cfg"].model(), gc.ParamStore(params))
            nmis.append(cluster_eval(model, c.train, c.test, seed=seed)["nmi"])
        rows.append((seed, nmis[0], nmis[1]))
    elapsed = time.perf_counter() - t + sum(r["seconds"] for r in topic_runs.values())
    ok = all(p - rnd >= 0.15 for _, rnd, p in rows) and elapsed < 900
    detail = "; ".join(f"seed {s}: random {rnd:.3f} -> pretrained {p:.3f}" for s, rnd, p in rows)
    report(6, ok, f"test NMI gap >= 0.15 ({detail}); {elapsed:.0f} s")


def test_c07_finetuning_speed(report, topic_runs):
    rows = []
    for seed, r in topic_runs.items():
        c, cfg = r["corpus"], r["cfg"]
        target = cfg["accuracy_target"]
        got = []
        for params in (r["init"], r["pre"]):
            model = GraphDocModel(cfg.model(), gc.ParamStore({k: v.copy() for k, v in params.items()}))
            head = ClassifierHead([d.label for d in c.train], cfg["d_model"], seed=seed)
            res = finetune_classification(model, head, c.train[:N_LABELLED], cfg.classification(), val=c.dev)
            test_acc = accuracy(predict(model, head, c.test), [d.label for d in c.test])
            got.append((res.epochs_to_reach(target), test_acc))
        rows.append((seed, got[0], got[1]))

    def fewer(pre, rnd):
        return pre is not None and (rnd is None or pre < rnd)

    ok = all(fewer(p[0], rnd[0]) and p[1] >= rnd[1] for _, rnd, p in rows)
    detail = "; ".join(f"seed {s}: epochs to 90% random {rnd[0]} vs pretrained {p[0]}, "
                       f"test acc {rnd[1]:.3f} vs {p[1]:.3f}" for s, rnd, p in rows)
    report(7, ok, f"{N_LABELLED} labelled docs; {detail}")


def test_c10_initial_loss(report, topic_runs):
    losses = [r["log"][0][2] for r in topic_runs.values()]
    for seed in (3, 4):
        cfg = desk(seed)
        c = generate_synthetic(topics=cfg["topics"], vocab_per_topic=cfg["vocab_per_topic"],
                               background_vocab=cfg["background_vocab"], docs=cfg["docs"], seed=seed)
        res = pretrain(c.train, GraphDocModel(cfg.model(), seed=seed), cfg.pretrain(), max_steps=1)
        losses.append(res.log[0][2])
    n = DESK["pretrain_batch_size"]
    ok = n == 32 and all(abs(l - math.log(n)) <= 0.15 * math.log(n) for l in losses)
    report(10, ok, f"step-0 losses {', '.join(f'{l:.4f}' for l in losses)} vs ln {n} = {math.log(n):.4f} +-15%")


# ---------------------------------------------------------------- 8: retrieval


def test_c08_retrieval(report):
    rows = []
    fusion_ok = True
    for seed in SEEDS:
        cfg = desk(seed)
        c = generate_synthetic(topics=cfg["topics"], vocab_per_topic=cfg["vocab_per_topic"],
                               background_vocab=cfg["background_vocab"], docs=cfg["docs"],
                               queries=(cfg["train_queries"], cfg["dev_queries"], cfg["test_queries"]), seed=seed)
        bm = R.bm25_build(c.train, cfg["bm25_k1"], cfg["bm25_b"])
        pairs = [(q, t, c.source_doc(q)) for q, t in c.queries["train"]]
        neg = R.bm25_run(bm, [(q, t) for q, t, _ in pairs], cfg["pool_size"])
        test, dev = c.queries["test"], c.queries["dev"]
        mrr = {}
        for label in ("random", "ict"):
            model = GraphDocModel(cfg.model(), seed=seed)
            if label == "ict":
                cfg.set("mode", "ict")
                pretrain(c.train, model, cfg.pretrain())
            R.finetune_retrieval(model, pairs, c.train, c.qrels, neg, cfg.retrieval_finetune())
            idx = R.encode_corpus(model, c.train)
            mrr[label] = R.evaluate(R.dense_run(model, idx, test, cfg["top_k"]),
                                    {q: c.qrels[q] for q, _ in test}, "mrr@10")
            if label == "ict":
                dev_qrels = {q: c.qrels[q] for q, _ in dev}
                w, table = R.tune_fusion_weight(R.dense_run(model, idx, dev, cfg["top_k"]),
                                                R.bm25_run(bm, dev, cfg["top_k"]), dev_qrels, cfg["metric"],
                                                cfg["fusion_step"], cfg["top_k"], cfg["fusion_normalize"])
                fusion_ok &= table[w] >= max(table[0.0], table[1.0])
                mrr["w"], mrr["fused"] = w, table[w]
                mrr["ends"] = (table[1.0], table[0.0])
        rows.append((seed, mrr))
    ok = fusion_ok and all(m["ict"] > m["random"] for _, m in rows)
    detail = "; ".join(f"seed {s}: test MRR@10 random {m['random']:.3f} vs ICT {m['ict']:.3f}, "
                       f"dev w*={m['w']:.2f} {m['fused']:.3f} vs dense {m['ends'][0]:.3f} / bm25 {m['ends'][1]:.3f}"
                       for s, m in rows)
    report(8, ok, detail)


# ---------------------------------------------------------------- 9: determinism


def _pipeline(root: Path) -> dict[str, bytes]:
    small = ["--topics", "3", "--vocab-per-topic", "40", "--background-vocab", "20", "--docs", "40",
             "--dev-docs", "10", "--test-docs", "10", "--train-queries", "16", "--dev-queries", "8",
             "--test-queries", "8"]
    model = ["--d-model", "16", "--d-tok", "16", "--vocab-buckets", "1024", "--seed", "3"]
    data = root / "data"
    steps = [
        ["synth", "--out", data, "--seed", "3"] + small,
        ["pretrain", "--corpus", data / "corpus.jsonl", "--out", root / "pre", "--pretrain-batch-size", "8",
         "--pretrain-epochs", "2", "--pretrain-lr", "0.003", "--checkpoint-every", "5"] + model,
        ["finetune-cls", "--init", root / "pre" / "model.ckpt", "--train", data / "corpus.jsonl",
         "--val", data / "dev.jsonl", "--out", root / "cls", "--cls-epochs", "2", "--cls-batch-size", "8",
         "--cls-lr", "0.01", "--seed", "3"],
        ["eval-cls", "--checkpoint", root / "cls" / "model.ckpt", "--corpus", data / "test.jsonl",
         "--out", root / "cls-eval"],
        ["finetune-ret", "--init", root / "pre" / "model.ckpt", "--corpus", data / "corpus.jsonl",
         "--queries", data / "queries.train.tsv", "--qrels", data / "qrels.txt", "--out", root / "ret",
         "--ret-batch-size", "4", "--ret-epochs", "2", "--ret-lr", "0.003", "--seed", "3"],
        ["index-bm25", "--corpus", data / "corpus.jsonl", "--out", root / "bm25.idx"],
        ["encode", "--checkpoint", root / "ret" / "model.ckpt", "--corpus", data / "corpus.jsonl",
         "--out", root / "dense.gdx", "--threads", "2"],
        ["search", "--system", "bm25", "--bm25-index", root / "bm25.idx", "--queries", data / "queries.test.tsv",
         "--out", root / "bm25.run"],
        ["search", "--system", "hybrid", "--w", "0.4", "--bm25-index", root / "bm25.idx",
         "--dense-index", root / "dense.gdx", "--checkpoint", root / "ret" / "model.ckpt",
         "--queries", data / "queries.test.tsv", "--out", root / "hybrid.run", "--threads", "2"],
        ["eval-ret", "--run", root / "hybrid.run", "--qrels", data / "qrels.txt",
         "--queries", data / "queries.test.tsv", "--out", root / "ret-metrics.json"],
        ["cluster", "--checkpoint", root / "pre" / "model.ckpt", "--train", data / "corpus.jsonl",
         "--test", data / "test.jsonl", "--out", root / "cluster", "--seed", "3"],
    ]
    for argv in steps:
        code = cli_main([str(a) for a in argv])
        if code != 0:
            raise AssertionError(f"{argv[0]} exited {code}")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c09_determinism(report, tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    kinds = Counter(Path(k).suffix or Path(k).name for k in a)
    ok = set(a) == set(b) and not differing
    report(9, ok, f"{len(a)} output files byte-identical across reruns "
                  f"({', '.join(f'{n} {k}' for k, n in sorted(kinds.items()))}); differing: {differing or 'none'}")
