"""Sub-document sampling, the in-batch NCE objective, and pretraining."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .docmodel import Document, GraphDocModel, ModelConfig
from .errors import DataError, DimensionError, UsageError

log = logging.getLogger(__name__)


class SkipDocument(Exception):
    """A document too short to split into two non-empty sub-documents."""


@dataclass(frozen=True)
class SubDocumentPair:
    doc_id: str
    a: tuple[int, ...]
    b: tuple[int, ...]

    def __post_init__(self):
        if not self.a or not self.b or set(self.a) & set(self.b):
            raise UsageError("sub-documents must be disjoint and non-empty")

    def documents(self, doc: Document) -> tuple[Document, Document]:
        return doc.subset(self.a), doc.subset(self.b)


def split_even(doc: Document, rng: np.random.Generator) -> SubDocumentPair:
    """Uniform random half (rounded down) against the rest."""
    n = doc.n_passages
    if n < 2:
        raise SkipDocument(doc.id)
    perm = rng.permutation(n)
    half = n // 2
    return SubDocumentPair(doc.id, tuple(sorted(int(i) for i in perm[:half])),
                           tuple(sorted(int(i) for i in perm[half:])))


def split_ict(doc: Document, rng: np.random.Generator, first_passage_prob: float = 0.5) -> SubDocumentPair:
    """One passage against the rest; the first passage is favoured."""
    n = doc.n_passages
    if n < 2:
        raise SkipDocument(doc.id)
    if rng.random() < first_passage_prob:
        pick = 0
    else:
        pick = int(rng.integers(n))
    return SubDocumentPair(doc.id, (pick,), tuple(i for i in range(n) if i != pick))


def _check_pair(a: gc.Tensor, b: gc.Tensor) -> None:
    if a.data.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"embedding batches differ: {a.shape} vs {b.shape}")


def nce_loss(emb_a: gc.Tensor, emb_b: gc.Tensor) -> gc.Tensor:
    """Symmetric in-batch NCE over raw dot products.

    Row ``i`` of each side is the positive for row ``i`` of the other;
    every other row of the opposite side is a negative.
    """
    _check_pair(emb_a, emb_b)
    targets = np.arange(emb_a.shape[0])
    forward = gc.softmax_cross_entropy(gc.matmul_nt(emb_a, emb_b), targets)
    backward = gc.softmax_cross_entropy(gc.matmul_nt(emb_b, emb_a), targets)
    return gc.scale(forward + backward, 0.5)


def nce_loss_one_sided(anchors: gc.Tensor, candidates: gc.Tensor) -> gc.Tensor:
    """Each anchor scored against every candidate; only that direction."""
    _check_pair(anchors, candidates)
    return gc.softmax_cross_entropy(gc.matmul_nt(anchors, candidates), np.arange(anchors.shape[0]))


@dataclass
class PretrainConfig:
    mode: str = "even"
    batch_size: int = 1536
    epochs: int = 10
    lr: float = 5e-5
    warmup: float = 0.1
    schedule: str = "linear"
    weight_decay: float = 0.0
    max_passages: int = 50
    first_passage_prob: float = 0.5
    cosine: bool = False
    temperature: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in ("even", "ict"):
            raise UsageError(f"unknown split mode {self.mode!r}")
        if self.batch_size < 2:
            raise UsageError("in-batch negatives need batch_size >= 2")


@dataclass
class PretrainResult:
    model: GraphDocModel
    log: list[tuple[int, float, float]] = field(default_factory=list)

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for step, lr, loss in self.log:
                fh.write(f"{step}\t{lr:.9g}\t{loss:.9f}\n")


def contrastive_scores(a: gc.Tensor, b: gc.Tensor, cosine: bool, temperature: float):
    if cosine:
        a = gc.scale(gc.normalize_rows(a), 1.0 / temperature)
        b = gc.normalize_rows(b)
    return a, b


def batch_loss(model: GraphDocModel, docs: Sequence[Document], pairs: Sequence[SubDocumentPair],
               config: PretrainConfig) -> gc.Tensor:
    """Encode both sides of every pair with the shared model and score them."""
    side_a, side_b = [], []
    for doc, pair in zip(docs, pairs):
        sa, sb = pair.documents(doc)
        side_a.append(sa)
        side_b.append(sb)
    emb = model.encode_documents(side_a + side_b, train=True)
    n = len(docs)
    emb_a = gc.slice_rows(emb, 0, n)
    emb_b = gc.slice_rows(emb, n, 2 * n)
    emb_a, emb_b = contrastive_scores(emb_a, emb_b, config.cosine, config.temperature)
    if config.mode == "ict":
        return nce_loss_one_sided(emb_a, emb_b)
    return nce_loss(emb_a, emb_b)


def pretrain(corpus: Sequence[Document], model: GraphDocModel, config: PretrainConfig,
             on_checkpoint: Callable[[GraphDocModel, int], None] | None = None,
             max_steps: int | None = None) -> PretrainResult:
    """Contrastive pretraining with Adam and a warmup schedule.

    Each epoch permutes the usable documents with seed ``seed + epoch`` and
    consumes them in full batches; the trailing partial batch is dropped.
    """
    docs = [d.truncated(config.max_passages) for d in corpus]
    docs = [d for d in docs if d.n_passages >= 2]
    skipped = len(corpus) - len(docs)
    if skipped:
        log.info("skipping %d single-passage documents", skipped)
    if len(docs) < config.batch_size:
        raise DataError(f"corpus has {len(docs)} usable documents, batch size is {config.batch_size}")
    per_epoch = len(docs) // config.batch_size
    total = per_epoch * config.epochs
    if max_steps is not None:
        total = min(total, max_steps)
    rng = np.random.default_rng(config.seed)
    state = gc.AdamState()
    result = PretrainResult(model)
    split = split_even if config.mode == "even" else (
        lambda d, r: split_ict(d, r, config.first_passage_prob))
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng(config.seed + epoch).permutation(len(docs))
        for k in range(per_epoch):
            if step >= total:
                return result
            batch = [docs[i] for i in order[k * config.batch_size:(k + 1) * config.batch_size]]
            pairs = [split(d, rng) for d in batch]
            loss = batch_loss(model, batch, pairs, config)
            grads = gc.backprop(loss, model.params)
            lr = gc.learning_rate(step, total, config.lr, config.warmup, config.schedule)
            gc.adam_step(model.params, grads, state, lr, weight_decay=config.weight_decay)
            result.log.append((step, lr, loss.item()))
            step += 1
            if on_checkpoint and config.checkpoint_every and step % config.checkpoint_every == 0:
                on_checkpoint(model, step)
        log.info("epoch %d done, last loss %.4f", epoch, result.log[-1][2])
    return result



GRADCHECK_MODEL = dict(d_model=8, d_tok=8, heads=2, layers=2, vocab_buckets=64, max_tokens=16, precision=64)


def gradient_check(seed: int = 0, mode: str = "even", eps: float = 1e-5,
                   n_docs: int = 3, n_passages: int = 4) -> float:
    """Max relative error of backprop against finite differences on a tiny batch.

    Covers every parameter of the full batch loss with a small 64-bit model.
    """
    from .corpusio import generate_synthetic

    corpus = generate_synthetic(topics=2, vocab_per_topic=20, background_vocab=10, docs=max(4, n_docs),
                                passages=(n_passages, n_passages), words_per_passage=(5, 9),
                                sections=(1, 2), seed=seed)
    docs = corpus.train[:n_docs]
    model = GraphDocModel(ModelConfig(**GRADCHECK_MODEL), seed=seed)
    config = PretrainConfig(mode=mode, batch_size=n_docs, seed=seed)
    rng = np.random.default_rng(seed)
    pairs = [split_even(d, rng) if mode == "even" else split_ict(d, rng) for d in docs]
    return gc.check_gradients(lambda: batch_loss(model, docs, pairs, config), model.params, eps)
