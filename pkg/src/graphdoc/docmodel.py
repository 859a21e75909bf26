"""Documents, passage graphs, and the graph-attention document encoder.

A document becomes a graph with node 0 for the document and nodes
``1..n`` for its passages. Passage nodes start from a projected,
tanh-squashed pooled token vector; the document node starts from the mean
of its passages; ``layers`` multi-head graph-attention layers with skip
connections then update every node, and node 0's final state is the
document embedding.

Batches of documents are encoded as one block-diagonal graph: the ``B``
document nodes come first, followed by every document's passages in
order.
"""
from __future__ import annotations

import csv
import enum
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import gradcore as gc
from . import kernels
from .errors import DataError, DimensionError, InvalidGraphError, UsageError

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


# ---------------------------------------------------------------- text


def split_words(text: str) -> list[str]:
    """Lowercase alphanumeric runs; everything else separates."""
    return _WORD_RE.findall(text.lower())


@lru_cache(maxsize=1 << 18)
def _tokenize_cached(text: str, vocab_buckets: int, max_tokens: int) -> np.ndarray:
    words = split_words(text)
    if max_tokens > 0:
        words = words[:max_tokens]
    ids = kernels.hash_tokens(words, vocab_buckets)
    ids.setflags(write=False)
    return ids


def tokenize(text: str, vocab_buckets: int = 32768, max_tokens: int = 128) -> np.ndarray:
    """Hash each word with 64-bit FNV-1a into ``vocab_buckets`` ids.

    ``max_tokens <= 0`` disables truncation.
    """
    if vocab_buckets <= 0 or vocab_buckets & (vocab_buckets - 1):
        raise UsageError(f"vocab_buckets must be a power of two, got {vocab_buckets}")
    return _tokenize_cached(text, vocab_buckets, max_tokens)


def split_into_passages(text: str, target_words: int = 100) -> list[str]:
    """Greedily pack sentences into passages of about ``target_words`` words.

    A sentence longer than twice the target is cut into target-sized
    chunks at word boundaries.
    """
    if target_words < 1:
        raise UsageError("target_words must be >= 1")
    passages: list[str] = []
    current: list[str] = []
    for sentence in _SENTENCE_RE.split(text.strip()):
        words = sentence.split()
        if not words:
            continue
        if len(words) > 2 * target_words:
            if current:
                passages.append(" ".join(current))
                current = []
            for i in range(0, len(words), target_words):
                passages.append(" ".join(words[i:i + target_words]))
            continue
        if current and len(current) + len(words) > target_words:
            passages.append(" ".join(current))
            current = []
        current.extend(words)
    if current:
        passages.append(" ".join(current))
    return passages


# ---------------------------------------------------------------- documents


@dataclass
class Document:
    id: str
    sections: list[list[str]]
    label: str | None = None
    title: str | None = None

    def __post_init__(self):
        self.sections = [list(s) for s in self.sections if len(s) > 0]
        if not self.sections:
            raise DataError(f"document {self.id!r} has no passages")
        for sec in self.sections:
            for p in sec:
                if not p.strip():
                    raise DataError(f"document {self.id!r} has an empty passage")

    @property
    def passages(self) -> list[str]:
        return [p for sec in self.sections for p in sec]

    @property
    def n_passages(self) -> int:
        return sum(len(s) for s in self.sections)

    def section_sizes(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.sections)

    def subset(self, indices: Sequence[int]) -> "Document":
        """Sub-document over the given passage indices; empty sections vanish."""
        keep = set(int(i) for i in indices)
        out, k = [], 0
        for sec in self.sections:
            kept = []
            for p in sec:
                if k in keep:
                    kept.append(p)
                k += 1
            if kept:
                out.append(kept)
        return Document(self.id, out, self.label, self.title)

    def truncated(self, max_passages: int) -> "Document":
        if max_passages <= 0 or self.n_passages <= max_passages:
            return self
        return self.subset(range(max_passages))


class GraphTopology(str, enum.Enum):
    FULLY_CONNECTED = "full"
    SECTION = "section"


@dataclass
class DocumentGraph:
    """Undirected passage graph; node 0 is the document, every node has a self-loop."""

    node_count: int
    edges: list[tuple[int, int]]

    def adjacency(self) -> np.ndarray:
        adj = np.eye(self.node_count, dtype=bool)
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = True
        return adj

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        adj = self.adjacency()
        indptr = np.concatenate([[0], np.cumsum(adj.sum(axis=1))]).astype(np.int64)
        indices = np.nonzero(adj)[1].astype(np.int64)
        return indptr, indices

    def is_connected(self) -> bool:
        adj = self.adjacency()
        seen = {0}
        frontier = [0]
        while frontier:
            i = frontier.pop()
            for j in np.nonzero(adj[i])[0]:
                if int(j) not in seen:
                    seen.add(int(j))
                    frontier.append(int(j))
        return len(seen) == self.node_count


def _graph_from_sizes(sizes: tuple[int, ...], topology: GraphTopology,
                      section_clique: bool = True) -> DocumentGraph:
    n = sum(sizes)
    if n < 1:
        raise DataError("cannot build a graph for an empty document")
    topology = GraphTopology(topology)
    edges: set[tuple[int, int]] = set()
    if topology is GraphTopology.FULLY_CONNECTED:
        for i in range(n + 1):
            for j in range(i + 1, n + 1):
                edges.add((i, j))
    else:
        leads = []
        start = 1
        for size in sizes:
            nodes = range(start, start + size)
            leads.append(start)
            for i in nodes:
                for j in nodes:
                    if i < j:
                        edges.add((i, j))
            start += size
        hub = [0] + leads
        for a in range(len(hub)):
            for b in range(a + 1, len(hub)):
                if a == 0 or section_clique:
                    edges.add((hub[a], hub[b]))
    return DocumentGraph(n + 1, sorted(edges))


def build_graph(doc: Document, topology: GraphTopology | str = GraphTopology.FULLY_CONNECTED,
                section_clique: bool = True) -> DocumentGraph:
    return _graph_from_sizes(doc.section_sizes(), GraphTopology(topology), section_clique)


@lru_cache(maxsize=4096)
def _local_csr(sizes: tuple[int, ...], topology: str, section_clique: bool):
    indptr, indices = _graph_from_sizes(sizes, GraphTopology(topology), section_clique).csr()
    indptr.setflags(write=False)
    indices.setflags(write=False)
    return indptr, indices


@dataclass
class GraphBatch:
    """Block-diagonal union of document graphs plus flattened passage tokens."""

    n_docs: int
    passage_offsets: np.ndarray  # per document, into the passage rows
    token_ids: np.ndarray
    token_offsets: np.ndarray  # per passage, into token_ids
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def n_passages(self) -> int:
        return int(self.passage_offsets[-1])

    @property
    def n_nodes(self) -> int:
        return self.n_docs + self.n_passages

    def global_nodes(self, doc: int) -> np.ndarray:
        """Global row of each local node (0 = document) of document ``doc``."""
        lo, hi = self.passage_offsets[doc], self.passage_offsets[doc + 1]
        return np.concatenate([[doc], self.n_docs + np.arange(lo, hi)]).astype(np.int64)


def make_batch(docs: Sequence[Document], config: "ModelConfig") -> GraphBatch:
    B = len(docs)
    if B == 0:
        raise DataError("empty batch")
    sizes = [d.n_passages for d in docs]
    passage_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    token_chunks = [tokenize(p, config.vocab_buckets, config.max_tokens) for d in docs for p in d.passages]
    lens = np.fromiter((len(t) for t in token_chunks), dtype=np.int64, count=len(token_chunks))
    token_offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    token_ids = np.concatenate(token_chunks).astype(np.int64) if token_chunks else np.zeros(0, np.int64)

    # CSR over global rows: document nodes first, then passages per document
    degree = np.zeros(B + passage_offsets[-1], dtype=np.int64)
    local = []
    for b, d in enumerate(docs):
        indptr, indices = _local_csr(d.section_sizes(), config.topology, config.section_clique)
        mapping = np.concatenate([[b], B + passage_offsets[b] + np.arange(sizes[b])])
        local.append((mapping, indptr, indices))
        degree[mapping] = np.diff(indptr)
    g_indptr = np.concatenate([[0], np.cumsum(degree)]).astype(np.int64)
    g_indices = np.empty(g_indptr[-1], dtype=np.int64)
    for mapping, indptr, indices in local:
        for li, gi in enumerate(mapping):
            nb = np.sort(mapping[indices[indptr[li]:indptr[li + 1]]])
            g_indices[g_indptr[gi]:g_indptr[gi + 1]] = nb
    return GraphBatch(B, passage_offsets, token_ids, token_offsets, g_indptr, g_indices)


# ---------------------------------------------------------------- model


@dataclass
class ModelConfig:
    d_model: int = 512
    d_tok: int = 128
    heads: int = 2
    layers: int = 2
    vocab_buckets: int = 32768
    max_tokens: int = 128
    passage_words: int = 100
    max_passages_train: int = 50
    max_passages_infer: int = 100
    topology: str = "full"
    section_clique: bool = True
    attn_slope: float = 0.2
    precision: int = 64

    def __post_init__(self):
        self.topology = GraphTopology(self.topology).value
        if self.layers < 1:
            raise UsageError("at least one attention layer is required")
        if self.heads < 1 or self.d_model % self.heads:
            raise UsageError(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.vocab_buckets <= 0 or self.vocab_buckets & (self.vocab_buckets - 1):
            raise UsageError("vocab_buckets must be a power of two")
        if self.precision not in gc.DTYPES:
            raise UsageError(f"precision must be 64 or 32, got {self.precision}")

    @property
    def dtype(self):
        return gc.DTYPES[self.precision]

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ModelConfig, seed: int = 0) -> gc.ParamStore:
    rng = np.random.default_rng(seed)
    dt = config.dtype
    ps = gc.ParamStore()
    ps.add("encoder.embedding", _uniform(rng, (config.vocab_buckets, config.d_tok), config.d_tok, dt))
    ps.add("encoder.proj.weight", _uniform(rng, (config.d_model, config.d_tok), config.d_tok, dt))
    ps.add("encoder.proj.bias", np.zeros(config.d_model, dtype=dt))
    for t in range(config.layers):
        for h in range(config.heads):
            ps.add(f"gat.{t}.head.{h}.W", _uniform(rng, (config.d_head, config.d_model), config.d_model, dt))
            ps.add(f"gat.{t}.head.{h}.attn", _uniform(rng, (2 * config.d_head,), 2 * config.d_head, dt))
    return ps


@dataclass
class EncoderParams:
    embedding: gc.Tensor
    weight: gc.Tensor
    bias: gc.Tensor


@dataclass
class GatLayerParams:
    W: list[gc.Tensor]
    attn: list[gc.Tensor]
    slope: float = 0.2


class GraphDocModel:
    """All learnable parameters plus the configuration that shapes them."""

    def __init__(self, config: ModelConfig | None = None, params: gc.ParamStore | None = None,
                 seed: int = 0):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config, seed)
        expected = init_shapes(self.config)
        got = {p: t.shape for p, t in self.params.items()}
        if got != expected:
            raise DimensionError("parameter store does not match the model configuration")

    @property
    def encoder(self) -> EncoderParams:
        p = self.params
        return EncoderParams(p["encoder.embedding"], p["encoder.proj.weight"], p["encoder.proj.bias"])

    @property
    def layers(self) -> list[GatLayerParams]:
        c, p = self.config, self.params
        return [
            GatLayerParams(
                [p[f"gat.{t}.head.{h}.W"] for h in range(c.heads)],
                [p[f"gat.{t}.head.{h}.attn"] for h in range(c.heads)],
                c.attn_slope,
            )
            for t in range(c.layers)
        ]

    def encode_documents(self, docs: Sequence[Document], train: bool = False,
                         return_attention: bool = False):
        cap = self.config.max_passages_train if train else self.config.max_passages_infer
        docs = [d.truncated(cap) for d in docs]
        batch = make_batch(docs, self.config)
        return _forward(self, batch, return_attention)

    def encode_document(self, doc: Document, train: bool = False) -> gc.Tensor:
        return _row(self.encode_documents([doc], train), 0)

    def encode_queries(self, texts: Sequence[str]) -> gc.Tensor:
        c = self.config
        chunks = [tokenize(t, c.vocab_buckets, c.max_tokens) for t in texts]
        lens = np.fromiter((len(t) for t in chunks), dtype=np.int64, count=len(chunks))
        offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        ids = np.concatenate(chunks).astype(np.int64) if chunks else np.zeros(0, np.int64)
        return _passage_vectors(self.encoder, ids, offsets)


def init_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = {
        "encoder.embedding": (config.vocab_buckets, config.d_tok),
        "encoder.proj.weight": (config.d_model, config.d_tok),
        "encoder.proj.bias": (config.d_model,),
    }
    for t in range(config.layers):
        for h in range(config.heads):
            shapes[f"gat.{t}.head.{h}.W"] = (config.d_head, config.d_model)
            shapes[f"gat.{t}.head.{h}.attn"] = (2 * config.d_head,)
    return shapes


def _row(x: gc.Tensor, i: int) -> gc.Tensor:
    return gc.reshape(gc.slice_rows(x, i, i + 1), (x.shape[1],))


def _passage_vectors(enc: EncoderParams, ids: np.ndarray, offsets: np.ndarray) -> gc.Tensor:
    pooled = gc.embedding_bag(enc.embedding, ids, offsets)
    return gc.tanh(gc.affine(pooled, enc.weight, enc.bias))


def encode_passage(enc: EncoderParams, tokens) -> gc.Tensor:
    """``tanh(W . meanpool(embeddings[tokens]) + b)`` as a [d_model] tensor."""
    ids = np.asarray(tokens, dtype=np.int64)
    return _row(_passage_vectors(enc, ids, np.array([0, len(ids)], dtype=np.int64)), 0)


def init_doc_node(passage_vecs) -> gc.Tensor:
    """Arithmetic mean of the passage vectors, summed in node order.

    Accepts an [n, d] tensor or a sequence of [d] vectors.
    """
    if isinstance(passage_vecs, gc.Tensor):
        stacked = passage_vecs
    else:
        if len(passage_vecs) == 0:
            raise DataError("document node needs at least one passage vector")
        stacked = gc.Tensor(np.stack([np.asarray(getattr(v, "data", v)).reshape(-1) for v in passage_vecs]))
    n = stacked.shape[0]
    if n == 0:
        raise DataError("document node needs at least one passage vector")
    pooled = gc.embedding_bag(stacked, np.arange(n), np.array([0, n]))
    return gc.reshape(pooled, (stacked.shape[1],))


def gat_layer(layer: GatLayerParams, graph, states: gc.Tensor):
    """One multi-head attention layer with ELU and a skip connection.

    ``graph`` is a :class:`DocumentGraph` or an ``(indptr, indices)`` CSR
    pair. Returns the new states and the per-head edge attention.
    """
    indptr, indices = graph.csr() if isinstance(graph, DocumentGraph) else graph
    if indptr.shape[0] - 1 != states.shape[0]:
        raise DimensionError(f"graph has {indptr.shape[0] - 1} nodes, states have {states.shape[0]} rows")
    heads, alphas = [], []
    for W, a in zip(layer.W, layer.attn):
        z = gc.affine(states, W)
        out, alpha = gc.graph_attention(z, a, indptr, indices, layer.slope)
        heads.append(out)
        alphas.append(alpha)
    merged = heads[0] if len(heads) == 1 else gc.concat(heads, axis=1)
    return gc.elu(merged) + states, alphas


def _forward(model: GraphDocModel, batch: GraphBatch, return_attention: bool):
    passage_vecs = _passage_vectors(model.encoder, batch.token_ids, batch.token_offsets)
    doc_init = gc.embedding_bag(passage_vecs, np.arange(batch.n_passages), batch.passage_offsets)
    states = gc.concat([doc_init, passage_vecs], axis=0)
    attention = []
    for layer in model.layers:
        states, attention = gat_layer(layer, (batch.indptr, batch.indices), states)
    out = gc.slice_rows(states, 0, batch.n_docs)
    if return_attention:
        return out, batch, attention
    return out


def encode_document(model: GraphDocModel, doc: Document, train: bool = False) -> gc.Tensor:
    if doc.n_passages < 1:
        raise DataError("empty document")
    return model.encode_document(doc, train)


def encode_query(model: GraphDocModel, text: str) -> gc.Tensor:
    return _row(model.encode_queries([text]), 0)


def export_attention(model: GraphDocModel, doc: Document) -> np.ndarray:
    """Last-layer attention averaged over heads, as an (n+1)x(n+1) matrix."""
    with gc.no_grad():
        _, batch, alphas = model.encode_documents([doc], train=False, return_attention=True)
    n = batch.n_nodes
    mean_alpha = np.mean(np.stack(alphas), axis=0)
    dense = np.zeros((n, n))
    rows = np.repeat(np.arange(n), np.diff(batch.indptr))
    dense[rows, batch.indices] = mean_alpha
    order = batch.global_nodes(0)
    return dense[np.ix_(order, order)]


def write_attention_csv(matrix: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"node_{i}" for i in range(matrix.shape[0])])
        for row in matrix:
            w.writerow([repr(float(x)) for x in row])
