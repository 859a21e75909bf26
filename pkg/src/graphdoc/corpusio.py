"""Corpus files, the synthetic topic corpus, and binary checkpoints.

Checkpoint layout (all integers little-endian)::

    b"GDM1" | u32 version | u32 header length | JSON header | f32 payload

The header holds the model config, a parameter manifest (path, shape,
byte offset into the payload) and free-form metadata.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import gradcore as gc
from .docmodel import Document, GraphDocModel, ModelConfig, init_shapes, split_into_passages
from .errors import (
    CheckpointFormatError,
    CheckpointLengthError,
    CheckpointShapeError,
    DataError,
    UsageError,
)

MAGIC = b"GDM1"
VERSION = 1


# ---------------------------------------------------------------- corpus files


def parse_document(obj: dict, target_words: int = 100) -> Document:
    if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
        raise DataError("document needs a string 'id'")
    if "sections" in obj:
        sections = [[p for p in sec if isinstance(p, str) and p.strip()] for sec in obj["sections"]]
    elif "text" in obj:
        sections = [split_into_passages(str(obj["text"]), target_words)]
    else:
        raise DataError(f"document {obj['id']!r} has neither 'sections' nor 'text'")
    label = obj.get("label")
    return Document(obj["id"], sections, None if label is None else str(label), obj.get("title"))


def load_corpus(path, target_words: int = 100) -> list[Document]:
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                doc = parse_document(obj, target_words)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if doc.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate document id {doc.id!r}")
            seen.add(doc.id)
            docs.append(doc)
    return docs


def document_to_json(doc: Document) -> str:
    obj: dict = {"id": doc.id}
    if doc.label is not None:
        obj["label"] = doc.label
    if doc.title is not None:
        obj["title"] = doc.title
    obj["sections"] = doc.sections
    return json.dumps(obj, ensure_ascii=False)


def write_corpus(docs: Iterable[Document], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            fh.write(document_to_json(d) + "\n")


def read_queries(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected 'qid<TAB>text'")
            qid, text = line.split("\t", 1)
            out.append((qid, text))
    return out


def write_queries(queries: Sequence[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, text in queries:
            fh.write(f"{qid}\t{text}\n")


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class SyntheticCorpus:
    train: list[Document]
    dev: list[Document]
    test: list[Document]
    queries: dict[str, list[tuple[str, str]]]
    qrels: dict[str, dict[str, int]]
    topic_words: list[list[str]] = field(default_factory=list)
    background_words: list[str] = field(default_factory=list)

    def all_queries(self) -> list[tuple[str, str]]:
        return [q for split in ("train", "dev", "test") for q in self.queries.get(split, [])]

    def source_doc(self, qid: str) -> str:
        return next(d for d, g in self.qrels[qid].items() if g == 2)


_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "ch", "dr", "gl", "kr", "pl", "sh", "st", "th", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]


def _make_vocabulary(rng: np.random.Generator, size: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < size:
        n_syl = int(rng.integers(2, 5))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _sentences(words: list[str], rng: np.random.Generator, sentence_words: tuple[int, int]) -> str:
    out, i = [], 0
    while i < len(words):
        n = int(rng.integers(sentence_words[0], sentence_words[1] + 1))
        chunk = words[i:i + n]
        i += n
        out.append(" ".join([chunk[0].capitalize()] + chunk[1:]) + ".")
    return " ".join(out)


def generate_synthetic(topics: int = 5, vocab_per_topic: int = 300, background_vocab: int = 300,
                       docs: int = 500, dev_docs: int = 0, test_docs: int = 0,
                       passages: tuple[int, int] = (3, 8), words_per_passage: tuple[int, int] = (20, 40),
                       sections: tuple[int, int] = (1, 3), sentence_words: tuple[int, int] = (6, 12),
                       topic_prob: float = 0.8, queries: tuple[int, int, int] = (0, 0, 0),
                       query_words: tuple[int, int] = (8, 16), seed: int = 0) -> SyntheticCorpus:
    """Documents whose passages draw words from one topic plus shared background.

    Each query is a fresh passage drawn from the topic of a source document
    in ``train``; qrels give the source grade 2 and every other same-topic
    training document grade 1.
    """
    if topics < 2:
        raise UsageError("need at least two topics")
    if docs < 2 * topics:
        raise UsageError(f"need docs >= 2 * topics ({2 * topics}), got {docs}")
    if not 0 <= topic_prob <= 1:
        raise UsageError("topic_prob outside [0, 1]")
    for name, (lo, hi) in (("passages", passages), ("words_per_passage", words_per_passage),
                           ("sections", sections), ("sentence_words", sentence_words),
                           ("query_words", query_words)):
        if lo < 1 or hi < lo:
            raise UsageError(f"bad range for {name}: {(lo, hi)}")
    rng = np.random.default_rng(seed)
    vocab = _make_vocabulary(rng, topics * vocab_per_topic + background_vocab)
    topic_words = [vocab[t * vocab_per_topic:(t + 1) * vocab_per_topic] for t in range(topics)]
    background = vocab[topics * vocab_per_topic:]

    def passage_words(topic: int, n: int) -> list[str]:
        from_topic = rng.random(n) < topic_prob
        t_idx = rng.integers(len(topic_words[topic]), size=n)
        b_idx = rng.integers(max(len(background), 1), size=n)
        return [topic_words[topic][t] if ft or not background else background[b]
                for ft, t, b in zip(from_topic, t_idx, b_idx)]

    def make_doc(doc_id: str) -> tuple[Document, int]:
        topic = int(rng.integers(topics))
        n = int(rng.integers(passages[0], passages[1] + 1))
        texts = [_sentences(passage_words(topic, int(rng.integers(words_per_passage[0], words_per_passage[1] + 1))),
                            rng, sentence_words) for _ in range(n)]
        n_sec = int(rng.integers(sections[0], min(sections[1], n) + 1))
        cuts = sorted(int(c) for c in rng.choice(np.arange(1, n), size=n_sec - 1, replace=False)) if n_sec > 1 else []
        bounds = [0] + cuts + [n]
        secs = [texts[bounds[i]:bounds[i + 1]] for i in range(len(bounds) - 1)]
        return Document(doc_id, secs, label=f"topic{topic}"), topic

    def make_split(prefix: str, count: int) -> tuple[list[Document], list[int]]:
        width = max(5, len(str(count)))
        made = [make_doc(f"{prefix}{i:0{width}d}") for i in range(count)]
        return [d for d, _ in made], [t for _, t in made]

    train, train_topics = make_split("d", docs)
    dev, _ = make_split("dev", dev_docs)
    test, _ = make_split("test", test_docs)

    by_topic: dict[int, list[str]] = {}
    for d, t in zip(train, train_topics):
        by_topic.setdefault(t, []).append(d.id)
    query_sets: dict[str, list[tuple[str, str]]] = {}
    qrels: dict[str, dict[str, int]] = {}
    for split, count in zip(("train", "dev", "test"), queries):
        items = []
        for i in range(count):
            qid = f"{split}-q{i:05d}"
            src = int(rng.integers(len(train)))
            topic = train_topics[src]
            n = int(rng.integers(query_words[0], query_words[1] + 1))
            items.append((qid, " ".join(passage_words(topic, n))))
            judged = {did: 1 for did in by_topic[topic]}
            judged[train[src].id] = 2
            qrels[qid] = judged
        query_sets[split] = items
    return SyntheticCorpus(train, dev, test, query_sets, qrels, topic_words, background)


def write_synthetic(corpus: SyntheticCorpus, out_dir) -> dict[str, Path]:
    from .retrieval import write_qrels

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out / "corpus.jsonl",
        "dev": out / "dev.jsonl",
        "test": out / "test.jsonl",
        "queries": out / "queries.tsv",
        "qrels": out / "qrels.txt",
    }
    write_corpus(corpus.train, paths["corpus"])
    write_corpus(corpus.dev, paths["dev"])
    write_corpus(corpus.test, paths["test"])
    write_queries(corpus.all_queries(), paths["queries"])
    for split in ("train", "dev", "test"):
        paths[f"queries.{split}"] = out / f"queries.{split}.tsv"
        write_queries(corpus.queries.get(split, []), paths[f"queries.{split}"])
    write_qrels(corpus.qrels, paths["qrels"])
    return paths


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: gc.ParamStore
    meta: dict

    def model(self) -> GraphDocModel:
        shapes = init_shapes(self.config)
        store = gc.ParamStore({p: self.params[p] for p in shapes})
        return GraphDocModel(self.config, store)

    def extra_params(self) -> gc.ParamStore:
        shapes = init_shapes(self.config)
        return gc.ParamStore({p: t for p, t in self.params.items() if p not in shapes})


def checkpoint_bytes(model: GraphDocModel, extra: gc.ParamStore | None = None,
                     meta: dict | None = None) -> bytes:
    store = model.params if extra is None else model.params.merged(extra)
    manifest, chunks, offset = [], [], 0
    for path, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"path": path, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": model.config.to_dict(), "params": manifest, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(model: GraphDocModel, path, extra: gc.ParamStore | None = None,
                    meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra, meta))


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointFormatError("not a graphdoc checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if len(raw) < 12 + header_len:
        raise CheckpointLengthError("checkpoint header is truncated")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
        config = ModelConfig(**header["config"])
        manifest = header["params"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from None
    payload = raw[12 + header_len:]
    expected_len = sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in manifest)
    if len(payload) != expected_len:
        raise CheckpointLengthError(f"payload has {len(payload)} bytes, manifest needs {expected_len}")
    expected_shapes = init_shapes(config)
    store = gc.ParamStore()
    offset = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        if entry["path"] in expected_shapes and expected_shapes[entry["path"]] != shape:
            raise CheckpointShapeError(
                f"{entry['path']}: stored shape {shape}, config implies {expected_shapes[entry['path']]}")
        if entry["offset"] != offset:
            raise CheckpointFormatError(f"{entry['path']}: offset {entry['offset']} != {offset}")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        store.add(entry["path"], arr.astype(config.dtype))
        offset += 4 * n
    missing = set(expected_shapes) - set(store.paths())
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks parameters: {sorted(missing)}")
    return Checkpoint(config, store, header.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
