"""Lexical and dense retrieval, score fusion, IR metrics, and retrieval finetuning.

Runs are ``{qid: [(doc_id, score), ...]}`` in rank order; qrels are
``{qid: {doc_id: grade}}``. Every ranking sorts by descending score and
breaks ties by ascending doc id, so runs are byte-reproducible.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .docmodel import Document, GraphDocModel, split_words
from .errors import DataError, DimensionError, UsageError

log = logging.getLogger(__name__)

Run = dict[str, list[tuple[str, float]]]
Qrels = dict[str, dict[str, int]]


def _rank(doc_ids: Sequence[str], scores: np.ndarray, candidates: np.ndarray, k: int,
          id_rank: np.ndarray) -> list[tuple[str, float]]:
    order = np.lexsort((id_rank[candidates], -scores[candidates]))[:k]
    return [(doc_ids[c], float(scores[c])) for c in candidates[order]]


def _id_rank(doc_ids: Sequence[str]) -> np.ndarray:
    order = sorted(range(len(doc_ids)), key=lambda i: doc_ids[i])
    rank = np.empty(len(doc_ids), dtype=np.int64)
    rank[order] = np.arange(len(doc_ids))
    return rank


# ---------------------------------------------------------------- BM25


@dataclass
class Bm25Index:
    doc_ids: list[str]
    doc_lens: np.ndarray
    postings: dict[str, tuple[np.ndarray, np.ndarray]]
    k1: float = 0.9
    b: float = 0.4
    _norm: np.ndarray = field(init=False, repr=False)
    _id_rank: np.ndarray = field(init=False, repr=False)
    _pos: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.doc_ids:
            raise DataError("cannot index an empty corpus")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise DataError("duplicate document ids in index")
        if self.avgdl <= 0:
            raise DataError("corpus has no indexable terms")
        k1, b, avgdl = self.k1, self.b, self.avgdl
        self._norm = np.array([k1 * (1 - b + b * float(dl) / avgdl) for dl in self.doc_lens])
        self._id_rank = _id_rank(self.doc_ids)
        self._pos = {d: i for i, d in enumerate(self.doc_ids)}

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def avgdl(self) -> float:
        return float(np.sum(self.doc_lens)) / len(self.doc_lens)

    def df(self, term: str) -> int:
        p = self.postings.get(term)
        return 0 if p is None else len(p[0])

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def tf(self, term: str, doc_id: str) -> int:
        p = self.postings.get(term)
        if p is None:
            return 0
        hit = np.nonzero(p[0] == self._pos[doc_id])[0]
        return int(p[1][hit[0]]) if hit.size else 0

    def to_bytes(self) -> bytes:
        obj = {
            "k1": self.k1,
            "b": self.b,
            "doc_ids": self.doc_ids,
            "doc_lens": [int(x) for x in self.doc_lens],
            "postings": {t: [p[0].tolist(), p[1].tolist()] for t, p in sorted(self.postings.items())},
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Bm25Index":
        obj = json.loads(raw.decode("utf-8"))
        postings = {t: (np.array(p[0], dtype=np.int64), np.array(p[1], dtype=np.int64))
                    for t, p in obj["postings"].items()}
        return cls(obj["doc_ids"], np.array(obj["doc_lens"], dtype=np.int64), postings, obj["k1"], obj["b"])


def query_terms(query) -> list[str]:
    """Distinct terms in first-occurrence order."""
    words = split_words(query) if isinstance(query, str) else list(query)
    return list(dict.fromkeys(words))


def bm25_build(corpus: Sequence[Document], k1: float = 0.9, b: float = 0.4) -> Bm25Index:
    if not corpus:
        raise DataError("cannot index an empty corpus")
    tmp: dict[str, tuple[list[int], list[int]]] = {}
    lens = []
    for i, doc in enumerate(corpus):
        words = split_words(" ".join(doc.passages))
        lens.append(len(words))
        counts: dict[str, int] = {}
        for w in words:
            counts[w] = counts.get(w, 0) + 1
        for w, c in counts.items():
            docs_, tfs = tmp.setdefault(w, ([], []))
            docs_.append(i)
            tfs.append(c)
    postings = {t: (np.array(d, dtype=np.int64), np.array(f, dtype=np.int64)) for t, (d, f) in tmp.items()}
    return Bm25Index([d.id for d in corpus], np.array(lens, dtype=np.int64), postings, k1, b)


def bm25_score(index: Bm25Index, query, doc_id: str) -> float:
    """Sum over distinct query terms of ``idf * tf / (tf + k1 * (1 - b + b * dl / avgdl))``."""
    if doc_id not in index._pos:
        raise DataError(f"unknown document id {doc_id!r}")
    pos = index._pos[doc_id]
    score = 0.0
    for term in query_terms(query):
        tf = index.tf(term, doc_id)
        if tf:
            score += index.idf(term) * tf / (tf + index._norm[pos])
    return float(score)


def bm25_search(index: Bm25Index, query, k: int) -> list[tuple[str, float]]:
    if k < 1:
        raise UsageError("k must be >= 1")
    scores = np.zeros(index.n_docs)
    matched = np.zeros(index.n_docs, dtype=bool)
    for term in query_terms(query):
        p = index.postings.get(term)
        if p is None:
            continue
        docs, tf = p
        scores[docs] += index.idf(term) * tf / (tf + index._norm[docs])
        matched[docs] = True
    return _rank(index.doc_ids, scores, np.nonzero(matched)[0], k, index._id_rank)


def bm25_run(index: Bm25Index, queries: Sequence[tuple[str, str]], k: int, threads: int = 1) -> Run:
    def one(q):
        return q[0], bm25_search(index, q[1], k)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return dict(ex.map(one, queries))
    return dict(map(one, queries))


# ---------------------------------------------------------------- dense


_DENSE_MAGIC = b"GDX1"


@dataclass
class DenseIndex:
    doc_ids: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        if len(self.doc_ids) != self.matrix.shape[0]:
            raise DimensionError("embedding rows do not match the id list")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise DataError("duplicate document ids in dense index")
        self._id_rank = _id_rank(self.doc_ids)

    def save(self, path) -> None:
        arr = np.ascontiguousarray(self.matrix, dtype="<f8")
        header = json.dumps({"doc_ids": self.doc_ids, "shape": list(arr.shape)},
                            separators=(",", ":")).encode("utf-8")
        Path(path).write_bytes(_DENSE_MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes())

    @classmethod
    def load(cls, path) -> "DenseIndex":
        raw = Path(path).read_bytes()
        if raw[:4] != _DENSE_MAGIC:
            raise DataError(f"{path}: not a dense index file")
        (hlen,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        shape = tuple(header["shape"])
        payload = raw[8 + hlen:]
        if len(payload) != 8 * int(np.prod(shape)):
            raise DataError(f"{path}: truncated dense index")
        return cls(header["doc_ids"], np.frombuffer(payload, dtype="<f8").reshape(shape).copy())


def dense_search(index: DenseIndex, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
    q = np.asarray(getattr(query_vec, "data", query_vec), dtype=np.float64).reshape(-1)
    if q.shape[0] != index.matrix.shape[1]:
        raise DimensionError(f"query dim {q.shape[0]} != index dim {index.matrix.shape[1]}")
    if k < 1:
        raise UsageError("k must be >= 1")
    scores = index.matrix @ q
    return _rank(index.doc_ids, scores, np.arange(len(index.doc_ids)), k, index._id_rank)


def encode_corpus(model: GraphDocModel, docs: Sequence[Document], batch_size: int = 64,
                  threads: int = 1) -> DenseIndex:
    chunks = [docs[i:i + batch_size] for i in range(0, len(docs), batch_size)]

    def one(chunk):
        return model.encode_documents(chunk, train=False).data

    with gc.no_grad():
        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                parts = list(ex.map(one, chunks))
        else:
            parts = [one(c) for c in chunks]
    matrix = np.concatenate(parts, axis=0) if parts else np.zeros((0, model.config.d_model))
    return DenseIndex([d.id for d in docs], matrix.astype(np.float64))


def encode_texts(model: GraphDocModel, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
    with gc.no_grad():
        parts = [model.encode_queries(texts[i:i + batch_size]).data for i in range(0, len(texts), batch_size)]
    return np.concatenate(parts, axis=0).astype(np.float64) if parts else np.zeros((0, model.config.d_model))


def dense_run(model: GraphDocModel, index: DenseIndex, queries: Sequence[tuple[str, str]], k: int,
              threads: int = 1) -> Run:
    vecs = encode_texts(model, [t for _, t in queries])

    def one(i):
        return queries[i][0], dense_search(index, vecs[i], k)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return dict(ex.map(one, range(len(queries))))
    return dict(one(i) for i in range(len(queries)))


# ---------------------------------------------------------------- fusion


def _normalise(scores: dict[str, float], pool: list[str], mode: str) -> dict[str, float]:
    if not scores:
        return {d: 0.0 for d in pool}
    lo = min(scores.values())
    hi = max(scores.values())
    if mode == "raw":
        return {d: scores.get(d, lo) for d in pool}
    span = hi - lo
    return {d: ((scores[d] - lo) / span if span > 0 else 0.0) if d in scores else 0.0 for d in pool}


def fuse(run_dense: Run, run_bm25: Run, w: float, k: int, normalize: str = "minmax") -> Run:
    """Per-query weighted average of normalised dense and BM25 scores.

    A candidate missing from one system takes that system's minimum. Only
    systems with positive weight contribute candidates, and equal fused
    scores prefer documents the weighted systems actually returned, so the
    end points of ``w`` reproduce the component rankings.
    """
    if not 0.0 <= w <= 1.0:
        raise UsageError(f"fusion weight {w} outside [0, 1]")
    if normalize not in ("minmax", "raw"):
        raise UsageError(f"unknown normalisation {normalize!r}")
    out: Run = {}
    for qid in sorted(set(run_dense) | set(run_bm25)):
        dense = dict(run_dense.get(qid, []))
        lex = dict(run_bm25.get(qid, []))
        pool = sorted((set(dense) if w > 0 else set()) | (set(lex) if w < 1 else set()))
        if not pool:
            out[qid] = []
            continue
        nd = _normalise(dense, pool, normalize)
        nb = _normalise(lex, pool, normalize)
        fused = [(w * nd[d] + (1.0 - w) * nb[d], w * (d in dense) + (1.0 - w) * (d in lex), d)
                 for d in pool]
        fused.sort(key=lambda x: (-x[0], -x[1], x[2]))
        out[qid] = [(d, score) for score, _, d in fused[:k]]
    return out


def fusion_grid(step: float = 0.05) -> list[float]:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def tune_fusion_weight(run_dense: Run, run_bm25: Run, qrels: Qrels, metric: str = "ndcg@20",
                       step: float = 0.05, k: int = 100, normalize: str = "minmax") -> tuple[float, dict]:
    """Grid-search the fusion weight; ties go to the smaller weight."""
    if not (set(run_dense) | set(run_bm25)):
        raise DataError("empty dev set")
    table = {}
    best_w, best = None, -math.inf
    for w in fusion_grid(step):
        value = evaluate(fuse(run_dense, run_bm25, w, k, normalize), qrels, metric)
        table[w] = value
        if value > best:
            best_w, best = w, value
    return best_w, table


# ---------------------------------------------------------------- metrics


def _query_ids(run: Run, qrels: Qrels) -> list[str]:
    return sorted(set(run) | set(qrels))


def _check_k(k: int) -> None:
    if k < 1:
        raise UsageError("k must be >= 1")


def precision_at_k(run: Run, qrels: Qrels, k: int) -> float:
    _check_k(k)
    qids = _query_ids(run, qrels)
    total = 0.0
    for q in qids:
        rel = qrels.get(q, {})
        total += sum(1 for d, _ in run.get(q, [])[:k] if rel.get(d, 0) > 0) / k
    return total / len(qids) if qids else 0.0


def mrr_at_k(run: Run, qrels: Qrels, k: int) -> float:
    _check_k(k)
    qids = _query_ids(run, qrels)
    total = 0.0
    for q in qids:
        rel = qrels.get(q, {})
        for rank, (d, _) in enumerate(run.get(q, [])[:k], start=1):
            if rel.get(d, 0) > 0:
                total += 1.0 / rank
                break
    return total / len(qids) if qids else 0.0


def _gain(grade: int, gain: str) -> float:
    return float(grade) if gain == "linear" else float(2 ** grade - 1)


def ndcg_at_k(run: Run, qrels: Qrels, k: int, gain: str = "linear") -> float:
    _check_k(k)
    if gain not in ("linear", "exp"):
        raise UsageError(f"unknown gain {gain!r}")
    qids = _query_ids(run, qrels)
    total = 0.0
    for q in qids:
        rel = qrels.get(q, {})
        dcg = sum(_gain(rel.get(d, 0), gain) / math.log2(r + 1)
                  for r, (d, _) in enumerate(run.get(q, [])[:k], start=1))
        ideal = sorted((g for g in rel.values() if g > 0), reverse=True)[:k]
        idcg = sum(_gain(g, gain) / math.log2(r + 1) for r, g in enumerate(ideal, start=1))
        total += dcg / idcg if idcg > 0 else 0.0
    return total / len(qids) if qids else 0.0


def evaluate(run: Run, qrels: Qrels, metric: str, gain: str = "linear") -> float:
    """Evaluate ``ndcg@k``, ``p@k`` or ``mrr@k``."""
    try:
        name, k_str = metric.lower().split("@")
        k = int(k_str)
    except ValueError:
        raise UsageError(f"metric must look like 'ndcg@20', got {metric!r}") from None
    if name == "ndcg":
        return ndcg_at_k(run, qrels, k, gain)
    if name == "p":
        return precision_at_k(run, qrels, k)
    if name == "mrr":
        return mrr_at_k(run, qrels, k)
    raise UsageError(f"unknown metric {name!r}")


# ---------------------------------------------------------------- file formats


def write_run(run: Run, path, tag: str = "graphdoc") -> None:
    with open(path, "w", newline="\n") as fh:
        for qid in sorted(run):
            for rank, (d, s) in enumerate(run[qid], start=1):
                fh.write(f"{qid} Q0 {d} {rank} {s:.6f} {tag}\n")


def read_run(path) -> Run:
    run: Run = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'")
            run.setdefault(parts[0], []).append((parts[2], float(parts[4])))
    return run


def write_qrels(qrels: Qrels, path) -> None:
    with open(path, "w", newline="\n") as fh:
        for qid in sorted(qrels):
            for d in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {d} {qrels[qid][d]}\n")


def read_qrels(path) -> Qrels:
    qrels: Qrels = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 'qid 0 docid grade'")
            grade = int(parts[3])
            if grade < 0:
                raise DataError(f"{path}:{lineno}: negative relevance grade")
            qrels.setdefault(parts[0], {})[parts[2]] = grade
    return qrels


# ---------------------------------------------------------------- hard negatives and finetuning


def mine_hard_negatives(run: Run, qrels: Qrels, rng: np.random.Generator, pool_size: int = 100,
                        corpus_ids: Sequence[str] = ()) -> dict[str, str]:
    """One non-relevant document per query from the top of ``run``.

    With no eligible candidate, falls back to a uniform draw over the
    corpus' non-relevant documents.
    """
    out = {}
    for qid in sorted(run):
        rel = qrels.get(qid, {})
        pool = [d for d, _ in run[qid][:pool_size] if rel.get(d, 0) == 0]
        if not pool:
            pool = [d for d in corpus_ids if rel.get(d, 0) == 0] or list(corpus_ids)
            if not pool:
                raise DataError(f"no negative candidates for query {qid!r}")
        out[qid] = pool[int(rng.integers(len(pool)))]
    return out


def retrieval_loss(queries: gc.Tensor, positives: gc.Tensor, negatives: gc.Tensor | None = None) -> gc.Tensor:
    """Mean ``-log softmax`` of each query's positive among all batch candidates."""
    cands = positives if negatives is None else gc.concat([positives, negatives], axis=0)
    return gc.softmax_cross_entropy(gc.matmul_nt(queries, cands), np.arange(queries.shape[0]))


@dataclass
class RetrievalFinetuneConfig:
    batch_size: int = 128
    epochs: int = 10
    lr: float = 5e-5
    warmup: float = 0.1
    schedule: str = "linear"
    weight_decay: float = 0.0
    pool_size: int = 100
    refresh: bool = True
    seed: int = 0


@dataclass
class FinetuneResult:
    model: GraphDocModel
    log: list[tuple[int, float, float]] = field(default_factory=list)


def finetune_retrieval(model: GraphDocModel, pairs: Sequence[tuple[str, str, str]],
                       corpus: Sequence[Document], qrels: Qrels, bm25_negative_run: Run,
                       config: RetrievalFinetuneConfig,
                       on_epoch: Callable[[GraphDocModel, int], None] | None = None) -> FinetuneResult:
    """Train on ``(qid, query text, positive doc id)`` with in-batch and hard negatives.

    The first half of the epochs draws hard negatives from
    ``bm25_negative_run``; with ``refresh`` the second half draws them from
    the model's own top results at the half-way point.
    """
    if config.batch_size < 2:
        raise UsageError("batch_size must be >= 2")
    by_id = {d.id: d for d in corpus}
    for qid, _, pos in pairs:
        if pos not in by_id:
            raise DataError(f"query {qid!r}: positive document {pos!r} not in corpus")
    if len(pairs) < config.batch_size:
        raise DataError(f"{len(pairs)} training pairs, batch size is {config.batch_size}")
    per_epoch = len(pairs) // config.batch_size
    total = per_epoch * config.epochs
    rng = np.random.default_rng(config.seed)
    state = gc.AdamState()
    result = FinetuneResult(model)
    neg_run = bm25_negative_run
    half = config.epochs // 2 if config.refresh else config.epochs
    corpus_ids = [d.id for d in corpus]
    step = 0
    for epoch in range(config.epochs):
        if epoch == half and config.refresh and epoch > 0:
            index = encode_corpus(model, corpus)
            neg_run = dense_run(model, index, [(q, t) for q, t, _ in pairs], config.pool_size)
        negatives = mine_hard_negatives({q: neg_run.get(q, []) for q, _, _ in pairs}, qrels, rng,
                                        config.pool_size, corpus_ids)
        order = np.random.default_rng(config.seed + epoch).permutation(len(pairs))
        for k in range(per_epoch):
            batch = [pairs[i] for i in order[k * config.batch_size:(k + 1) * config.batch_size]]
            q = model.encode_queries([t for _, t, _ in batch])
            n = len(batch)
            docs = [by_id[p] for _, _, p in batch] + [by_id[negatives[qid]] for qid, _, _ in batch]
            d = model.encode_documents(docs, train=True)
            loss = retrieval_loss(q, gc.slice_rows(d, 0, n), gc.slice_rows(d, n, 2 * n))
            grads = gc.backprop(loss, model.params)
            lr = gc.learning_rate(step, total, config.lr, config.warmup, config.schedule)
            gc.adam_step(model.params, grads, state, lr, weight_decay=config.weight_decay)
            result.log.append((step, lr, loss.item()))
            step += 1
        if on_epoch:
            on_epoch(model, epoch)
    return result
