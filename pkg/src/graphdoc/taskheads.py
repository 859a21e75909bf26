"""Classification finetuning and clustering evaluation on document embeddings."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .docmodel import Document, GraphDocModel
from .errors import DataError, DimensionError, UsageError
from .retrieval import encode_corpus

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- classification


class ClassifierHead:
    """Affine layer + softmax over a sorted label vocabulary.

    ``init="zeros"`` (default) starts every logit at zero, so the encoder
    receives no gradient until the head has picked up a direction per
    label; ``"uniform"`` draws weights from +-1/sqrt(d_model).
    """

    def __init__(self, labels: Sequence[str], d_model: int, seed: int = 0, dtype=np.float64,
                 params: gc.ParamStore | None = None, init: str = "zeros"):
        self.labels = sorted(set(labels))
        if len(self.labels) < 2:
            raise UsageError("a classifier needs at least two labels")
        self.index = {l: i for i, l in enumerate(self.labels)}
        if params is None:
            shape = (len(self.labels), d_model)
            if init == "zeros":
                weight = np.zeros(shape, dtype=dtype)
            elif init == "uniform":
                bound = 1.0 / np.sqrt(d_model)
                weight = np.random.default_rng(seed).uniform(-bound, bound, shape).astype(dtype)
            else:
                raise UsageError(f"unknown head init {init!r}")
            params = gc.ParamStore()
            params.add("head.weight", weight)
            params.add("head.bias", np.zeros(len(self.labels), dtype=dtype))
        self.params = params
        if self.params["head.weight"].shape != (len(self.labels), d_model):
            raise DimensionError("head weight does not match labels x d_model")

    def logits(self, emb: gc.Tensor) -> gc.Tensor:
        return gc.affine(emb, self.params["head.weight"], self.params["head.bias"])

    def targets(self, docs: Sequence[Document]) -> np.ndarray:
        try:
            return np.array([self.index[d.label] for d in docs], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown label {exc.args[0]!r}") from None


def accuracy(predictions: Sequence, labels: Sequence) -> float:
    if len(predictions) != len(labels):
        raise DimensionError(f"{len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        return 0.0
    return sum(1 for p, l in zip(predictions, labels) if p == l) / len(labels)


def predict(model: GraphDocModel, head: ClassifierHead, docs: Sequence[Document],
            batch_size: int = 64) -> list[str]:
    emb = encode_corpus(model, docs, batch_size).matrix.astype(model.config.dtype)
    with gc.no_grad():
        logits = head.logits(gc.Tensor(emb)).data
    return [head.labels[i] for i in np.argmax(logits, axis=1)]


@dataclass
class ClassificationConfig:
    lr: float = 5e-5
    batch_size: int = 32
    epochs: int = 20
    warmup: float = 0.1
    weight_decay: float = 0.01
    schedule: str = "linear"
    freeze_model: bool = False
    seed: int = 0


@dataclass
class ClassificationResult:
    model: GraphDocModel
    head: ClassifierHead
    val_accuracy: list[float] = field(default_factory=list)
    log: list[tuple[int, float, float]] = field(default_factory=list)

    def epochs_to_reach(self, threshold: float) -> int | None:
        """1-based epoch at which validation accuracy first reaches ``threshold``."""
        for i, acc in enumerate(self.val_accuracy, start=1):
            if acc >= threshold:
                return i
        return None


def classification_loss(model: GraphDocModel, head: ClassifierHead, docs: Sequence[Document]) -> gc.Tensor:
    emb = model.encode_documents(docs, train=True)
    return gc.softmax_cross_entropy(head.logits(emb), head.targets(docs))


def finetune_classification(model: GraphDocModel, head: ClassifierHead, train: Sequence[Document],
                            config: ClassificationConfig,
                            val: Sequence[Document] = ()) -> ClassificationResult:
    """End-to-end softmax cross-entropy training; validation accuracy per epoch."""
    head.targets(train)
    params = head.params if config.freeze_model else model.params.merged(head.params)
    per_epoch = max(1, -(-len(train) // config.batch_size))
    total = per_epoch * config.epochs
    state = gc.AdamState()
    result = ClassificationResult(model, head)
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng(config.seed + epoch).permutation(len(train))
        for k in range(per_epoch):
            batch = [train[i] for i in order[k * config.batch_size:(k + 1) * config.batch_size]]
            loss = classification_loss(model, head, batch)
            grads = gc.backprop(loss, params)
            lr = gc.learning_rate(step, total, config.lr, config.warmup, config.schedule)
            gc.adam_step(params, grads, state, lr, weight_decay=config.weight_decay)
            result.log.append((step, lr, loss.item()))
            step += 1
        if val:
            acc = accuracy(predict(model, head, val), [d.label for d in val])
            result.val_accuracy.append(acc)
            log.info("epoch %d val accuracy %.4f", epoch + 1, acc)
    return result


# ---------------------------------------------------------------- clustering


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)

    def predict(self, points: np.ndarray) -> np.ndarray:
        return np.argmin(_sq_dist(points, self.centroids), axis=1)


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    centroids = [points[int(rng.integers(m))]]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(m, p=d2 / total)) if total > 0 else int(rng.integers(m))
        centroids.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def kmeans(points: np.ndarray, k: int, max_iters: int = 100, seed: int = 0) -> ClusterAssignment:
    """k-means++ seeding then Lloyd iterations until assignments stop changing."""
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if k < 1 or m < k:
        raise DataError(f"need at least k={k} points, got {m}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    labels = np.argmin(_sq_dist(points, centroids), axis=1)
    history = []
    for _ in range(max_iters):
        own = _sq_dist(points, centroids)[np.arange(m), labels]
        history.append(float(own.sum()))
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                centroids[j] = points[far]
                labels[far] = j
                own[far] = -np.inf
        new = np.argmin(_sq_dist(points, centroids), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    d = _sq_dist(points, centroids)
    history.append(float(d[np.arange(m), labels].sum()))
    return ClusterAssignment(labels, centroids, history)


def _contingency(assignment: Sequence, labels: Sequence) -> np.ndarray:
    if len(assignment) != len(labels):
        raise DimensionError(f"{len(assignment)} assignments for {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("empty assignment")
    _, ci = np.unique(np.asarray(assignment), return_inverse=True)
    _, li = np.unique(np.asarray(labels), return_inverse=True)
    table = np.zeros((ci.max() + 1, li.max() + 1))
    np.add.at(table, (ci, li), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignment: Sequence, labels: Sequence, average: str = "geometric") -> float:
    """Mutual information normalised by sqrt(H(C) H(L)) (or their mean)."""
    table = _contingency(assignment, labels)
    n = table.sum()
    hc = _entropy(table.sum(axis=1))
    hl = _entropy(table.sum(axis=0))
    if hc == 0 or hl == 0:
        return 1.0 if hc == 0 and hl == 0 else 0.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    if average == "geometric":
        denom = np.sqrt(hc * hl)
    elif average == "arithmetic":
        denom = 0.5 * (hc + hl)
    else:
        raise UsageError(f"unknown NMI normalisation {average!r}")
    return float(min(1.0, max(0.0, mi / denom)))


def purity(assignment: Sequence, labels: Sequence) -> float:
    table = _contingency(assignment, labels)
    return float(table.max(axis=1).sum() / table.sum())


def _l2_normalise(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def cluster_eval(model: GraphDocModel, train: Sequence[Document], test: Sequence[Document],
                 k: int | None = None, seed: int = 0, normalize: bool = False,
                 average: str = "geometric") -> dict[str, float]:
    """Fit k-means on train embeddings, assign test documents, score on test labels."""
    if k is None:
        k = len({d.label for d in train})
    xtr = encode_corpus(model, train).matrix
    xte = encode_corpus(model, test).matrix
    if normalize:
        xtr, xte = _l2_normalise(xtr), _l2_normalise(xte)
    fit = kmeans(xtr, k, seed=seed)
    assigned = fit.predict(xte)
    gold = [d.label for d in test]
    return {"nmi": nmi(assigned, gold, average), "purity": purity(assigned, gold)}
