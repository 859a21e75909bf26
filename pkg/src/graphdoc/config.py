"""Sectioned key=value run configuration with flag overrides.

Every key is unique across sections so a bare ``--key value`` flag can
address it. Unknown sections and keys are rejected.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .contrastive import PretrainConfig
from .docmodel import ModelConfig
from .errors import UsageError
from .retrieval import RetrievalFinetuneConfig
from .taskheads import ClassificationConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in allowed:
            raise ValueError(f"{text!r} not one of {', '.join(allowed)}")
        return text
    parse.__name__ = "choice"
    return parse


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


_SCHEDULE = _choice("linear", "constant")

KEYS: list[Key] = [
    Key("run", "seed", int, 0, "master seed for every random choice"),
    # model
    Key("model", "d_model", int, 512, "node state width"),
    Key("model", "d_tok", int, 128, "token embedding width"),
    Key("model", "heads", int, 2, "attention heads per layer"),
    Key("model", "layers", int, 2, "graph attention layers"),
    Key("model", "vocab_buckets", int, 32768, "hashed vocabulary size (power of two)"),
    Key("model", "max_tokens", int, 128, "tokens kept per passage"),
    Key("model", "passage_words", int, 100, "target words per passage"),
    Key("model", "max_passages_train", int, 50, "passages kept per document when training"),
    Key("model", "max_passages_infer", int, 100, "passages kept per document at inference"),
    Key("model", "topology", _choice("full", "section"), "full", "document graph shape"),
    Key("model", "section_clique", _bool, True, "section graph: clique (true) or star (false) over section leads"),
    Key("model", "attn_slope", float, 0.2, "LeakyReLU slope in attention scores"),
    Key("model", "precision", int, 64, "training float width, 64 or 32"),
    # pretrain
    Key("pretrain", "mode", _choice("even", "ict"), "even", "sub-document split"),
    Key("pretrain", "pretrain_batch_size", int, 1536),
    Key("pretrain", "pretrain_epochs", int, 10),
    Key("pretrain", "pretrain_lr", float, 5e-5),
    Key("pretrain", "pretrain_warmup", float, 0.1),
    Key("pretrain", "pretrain_schedule", _SCHEDULE, "linear"),
    Key("pretrain", "pretrain_weight_decay", float, 0.0),
    Key("pretrain", "first_passage_prob", float, 0.5, "ict: chance the anchor is the first passage"),
    Key("pretrain", "cosine", _bool, False, "score with cosine similarity instead of raw dot products"),
    Key("pretrain", "temperature", float, 1.0, "cosine scoring temperature"),
    Key("pretrain", "checkpoint_every", int, 0, "write an intermediate checkpoint every n steps (0: never)"),
    # finetune
    Key("finetune", "cls_lr", float, 5e-5),
    Key("finetune", "cls_batch_size", int, 32),
    Key("finetune", "cls_epochs", int, 20),
    Key("finetune", "cls_warmup", float, 0.1),
    Key("finetune", "cls_weight_decay", float, 0.01),
    Key("finetune", "cls_schedule", _SCHEDULE, "linear"),
    Key("finetune", "freeze_model", _bool, False, "train only the classifier head"),
    Key("finetune", "ret_lr", float, 5e-5),
    Key("finetune", "ret_batch_size", int, 128),
    Key("finetune", "ret_epochs", int, 10),
    Key("finetune", "ret_warmup", float, 0.1),
    Key("finetune", "ret_weight_decay", float, 0.0),
    Key("finetune", "ret_schedule", _SCHEDULE, "linear"),
    Key("finetune", "pool_size", int, 100, "hard negatives come from this many top results"),
    Key("finetune", "refresh_negatives", _bool, True, "second half of training mines the model's own results"),
    # retrieval
    Key("retrieval", "bm25_k1", float, 0.9),
    Key("retrieval", "bm25_b", float, 0.4),
    Key("retrieval", "top_k", int, 100, "results kept per query"),
    Key("retrieval", "fusion_step", float, 0.05, "grid step for the fusion weight"),
    Key("retrieval", "fusion_normalize", _choice("minmax", "raw"), "minmax"),
    # eval
    Key("eval", "metric", str, "ndcg@20", "retrieval metric, e.g. ndcg@20, p@10, mrr@10"),
    Key("eval", "gain", _choice("linear", "exp"), "linear", "nDCG gain function"),
    Key("eval", "nmi_average", _choice("geometric", "arithmetic"), "geometric"),
    Key("eval", "cluster_k", int, 0, "k-means clusters (0: number of gold labels)"),
    Key("eval", "cluster_normalize", _bool, False, "L2-normalise embeddings before k-means"),
    Key("eval", "accuracy_target", float, 0.9, "validation accuracy used for epochs-to-target"),
    # synthetic corpus
    Key("synth", "topics", int, 5),
    Key("synth", "vocab_per_topic", int, 300),
    Key("synth", "background_vocab", int, 300),
    Key("synth", "docs", int, 500),
    Key("synth", "dev_docs", int, 200),
    Key("synth", "test_docs", int, 200),
    Key("synth", "train_queries", int, 200),
    Key("synth", "dev_queries", int, 100),
    Key("synth", "test_queries", int, 200),
    Key("synth", "topic_prob", float, 0.8, "chance a word comes from the document's topic"),
]

BY_NAME: dict[str, Key] = {k.name: k for k in KEYS}
SECTIONS: tuple[str, ...] = tuple(dict.fromkeys(k.section for k in KEYS))
assert len(BY_NAME) == len(KEYS), "config keys must be unique across sections"


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class Config:
    """Resolved values for every key; defaults fill anything unset."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k.name: k.default for k in KEYS}
        for name, value in (values or {}).items():
            self.set(name, value)

    def set(self, name: str, value: Any) -> None:
        key = BY_NAME.get(name)
        if key is None:
            raise UsageError(f"unknown config key {name!r}")
        if isinstance(value, str):
            try:
                value = key.parse(value)
            except ValueError as exc:
                raise UsageError(f"bad value for {name}: {exc}") from None
        self.values[name] = value

    def __getitem__(self, name: str) -> Any:
        return self.values[name]

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "Config":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise UsageError(f"{source}: {exc}".replace("\n", " ")) from None
        cfg = cls()
        for section in parser.sections():
            if section not in SECTIONS:
                raise UsageError(f"{source}: unknown section [{section}]")
            for name, raw in parser.items(section):
                key = BY_NAME.get(name)
                if key is None:
                    raise UsageError(f"{source}: unknown key {name!r} in [{section}]")
                if key.section != section:
                    raise UsageError(f"{source}: key {name!r} belongs in [{key.section}], not [{section}]")
                cfg.set(name, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_text(Path(path).read_text(), str(path))

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            lines += [f"{k.name} = {_format(self.values[k.name])}" for k in KEYS if k.section == section]
            lines.append("")
        return "\n".join(lines)

    def write_resolved(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved"
        path.write_text(self.to_text())
        return path

    # ------------------------------------------------------------ typed views

    def model(self) -> ModelConfig:
        names = ModelConfig.__dataclass_fields__
        return ModelConfig(**{n: self.values[n] for n in names})

    def pretrain(self) -> PretrainConfig:
        v = self.values
        return PretrainConfig(
            mode=v["mode"], batch_size=v["pretrain_batch_size"], epochs=v["pretrain_epochs"],
            lr=v["pretrain_lr"], warmup=v["pretrain_warmup"], schedule=v["pretrain_schedule"],
            weight_decay=v["pretrain_weight_decay"], max_passages=v["max_passages_train"],
            first_passage_prob=v["first_passage_prob"], cosine=v["cosine"],
            temperature=v["temperature"], seed=v["seed"], checkpoint_every=v["checkpoint_every"])

    def classification(self) -> ClassificationConfig:
        v = self.values
        return ClassificationConfig(
            lr=v["cls_lr"], batch_size=v["cls_batch_size"], epochs=v["cls_epochs"],
            warmup=v["cls_warmup"], weight_decay=v["cls_weight_decay"], schedule=v["cls_schedule"],
            freeze_model=v["freeze_model"], seed=v["seed"])

    def retrieval_finetune(self) -> RetrievalFinetuneConfig:
        v = self.values
        return RetrievalFinetuneConfig(
            batch_size=v["ret_batch_size"], epochs=v["ret_epochs"], lr=v["ret_lr"],
            warmup=v["ret_warmup"], schedule=v["ret_schedule"], weight_decay=v["ret_weight_decay"],
            pool_size=v["pool_size"], refresh=v["refresh_negatives"], seed=v["seed"])
