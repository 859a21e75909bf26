"""Command-line entry point: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage, 2 data, 3 check failure. Failures print a
single ``error<TAB>kind<TAB>message`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import contrastive, corpusio, retrieval, taskheads
from .config import KEYS, Config
from .docmodel import GraphDocModel, export_attention, write_attention_csv
from .errors import DataError, GraphDocError, UsageError

log = logging.getLogger("graphdoc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    for key in KEYS:
        value = getattr(args, f"cfg_{key.name}", None)
        if value is not None:
            cfg.set(key.name, value)
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _model(cfg: Config, checkpoint) -> tuple[GraphDocModel, corpusio.Checkpoint | None]:
    """Load ``checkpoint`` or build a fresh model from the config and seed.

    A checkpoint's model settings replace the configured ones so that
    ``config.resolved`` describes the model actually used.
    """
    if checkpoint:
        ck = corpusio.load_checkpoint(checkpoint)
        for name, value in ck.config.to_dict().items():
            cfg.set(name, value)
        return ck.model(), ck
    return GraphDocModel(cfg.model(), seed=cfg["seed"]), None


def _corpus(path, cfg: Config):
    return corpusio.load_corpus(path, cfg["passage_words"])


def _write_log(rows, path) -> None:
    with open(path, "w") as fh:
        for step, lr, loss in rows:
            fh.write(f"{step}\t{lr:.9g}\t{loss:.9f}\n")


def _positives(queries, qrels) -> list[tuple[str, str, str]]:
    """Highest-graded document per query (ties: smallest id)."""
    pairs = []
    for qid, text in queries:
        judged = {d: g for d, g in qrels.get(qid, {}).items() if g > 0}
        if not judged:
            log.info("query %s has no relevant document, skipped", qid)
            continue
        best = min(judged, key=lambda d: (-judged[d], d))
        pairs.append((qid, text, best))
    return pairs


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg: Config) -> int:
    out = _out_dir(args.out)
    corpus = corpusio.generate_synthetic(
        topics=cfg["topics"], vocab_per_topic=cfg["vocab_per_topic"], background_vocab=cfg["background_vocab"],
        docs=cfg["docs"], dev_docs=cfg["dev_docs"], test_docs=cfg["test_docs"], topic_prob=cfg["topic_prob"],
        queries=(cfg["train_queries"], cfg["dev_queries"], cfg["test_queries"]), seed=cfg["seed"])
    corpusio.write_synthetic(corpus, out)
    cfg.write_resolved(out)
    return EXIT_OK


def cmd_pretrain(args, cfg: Config) -> int:
    model, _ = _model(cfg, args.init)
    docs = _corpus(args.corpus, cfg)
    out = _out_dir(args.out)
    pcfg = cfg.pretrain()

    def on_checkpoint(m, step):
        corpusio.save_checkpoint(m, out / f"step{step:06d}.ckpt", meta={"stage": "pretrain", "step": step})

    result = contrastive.pretrain(docs, model, pcfg, on_checkpoint=on_checkpoint)
    corpusio.save_checkpoint(model, out / "model.ckpt", meta={"stage": "pretrain", "mode": pcfg.mode})
    _write_log(result.log, out / "loss.tsv")
    cfg.write_resolved(out)
    return EXIT_OK


def cmd_finetune_cls(args, cfg: Config) -> int:
    model, _ = _model(cfg, args.init)
    train = _corpus(args.train, cfg)
    val = _corpus(args.val, cfg) if args.val else []
    out = _out_dir(args.out)
    if any(d.label is None for d in train):
        raise DataError("every training document needs a label")
    head = taskheads.ClassifierHead([d.label for d in train], model.config.d_model, seed=cfg["seed"],
                                    dtype=model.config.dtype)
    result = taskheads.finetune_classification(model, head, train, cfg.classification(), val)
    corpusio.save_checkpoint(model, out / "model.ckpt", extra=head.params,
                             meta={"stage": "finetune-cls", "labels": head.labels})
    _write_log(result.log, out / "loss.tsv")
    target = cfg["accuracy_target"]
    _write_json({"val_accuracy": result.val_accuracy, "accuracy_target": target,
                 "epochs_to_target": result.epochs_to_reach(target) if val else None}, out / "metrics.json")
    cfg.write_resolved(out)
    return EXIT_OK


def _load_classifier(path) -> tuple[GraphDocModel, taskheads.ClassifierHead, corpusio.Checkpoint]:
    ck = corpusio.load_checkpoint(path)
    labels = ck.meta.get("labels")
    if not labels:
        raise DataError(f"{path}: checkpoint has no classifier head")
    model = ck.model()
    head = taskheads.ClassifierHead(labels, model.config.d_model, params=ck.extra_params())
    return model, head, ck


def cmd_eval_cls(args, cfg: Config) -> int:
    model, head, ck = _load_classifier(args.checkpoint)
    for name, value in ck.config.to_dict().items():
        cfg.set(name, value)
    docs = _corpus(args.corpus, cfg)
    out = _out_dir(args.out)
    preds = taskheads.predict(model, head, docs)
    with open(out / "predictions.tsv", "w") as fh:
        for d, p in zip(docs, preds):
            fh.write(f"{d.id}\t{p}\n")
    metrics = {"n": len(docs)}
    if all(d.label is not None for d in docs):
        metrics["accuracy"] = taskheads.accuracy(preds, [d.label for d in docs])
    _write_json(metrics, out / "metrics.json")
    cfg.write_resolved(out)
    return EXIT_OK


def cmd_finetune_ret(args, cfg: Config) -> int:
    model, _ = _model(cfg, args.init)
    docs = _corpus(args.corpus, cfg)
    queries = corpusio.read_queries(args.queries)
    qrels = retrieval.read_qrels(args.qrels)
    out = _out_dir(args.out)
    pairs = _positives(queries, qrels)
    index = retrieval.bm25_build(docs, cfg["bm25_k1"], cfg["bm25_b"])
    negatives = retrieval.bm25_run(index, [(q, t) for q, t, _ in pairs], cfg["pool_size"])
    result = retrieval.finetune_retrieval(model, pairs, docs, qrels, negatives, cfg.retrieval_finetune())
    corpusio.save_checkpoint(model, out / "model.ckpt", meta={"stage": "finetune-ret"})
    _write_log(result.log, out / "loss.tsv")
    cfg.write_resolved(out)
    return EXIT_OK


def cmd_index_bm25(args, cfg: Config) -> int:
    index = retrieval.bm25_build(_corpus(args.corpus, cfg), cfg["bm25_k1"], cfg["bm25_b"])
    Path(args.out).write_bytes(index.to_bytes())
    return EXIT_OK


def cmd_encode(args, cfg: Config) -> int:
    model, _ = _model(cfg, args.checkpoint)
    docs = _corpus(args.corpus, cfg)
    retrieval.encode_corpus(model, docs, threads=args.threads).save(args.out)
    return EXIT_OK


def _load_bm25(path) -> retrieval.Bm25Index:
    try:
        return retrieval.Bm25Index.from_bytes(Path(path).read_bytes())
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: unreadable BM25 index ({exc})") from None


def cmd_search(args, cfg: Config) -> int:
    queries = corpusio.read_queries(args.queries)
    k = cfg["top_k"]
    runs = {}
    if args.system in ("bm25", "hybrid"):
        if not args.bm25_index:
            raise UsageError(f"--system {args.system} needs --bm25-index")
        runs["bm25"] = retrieval.bm25_run(_load_bm25(args.bm25_index), queries, k, args.threads)
    if args.system in ("dense", "hybrid"):
        if not (args.dense_index and args.checkpoint):
            raise UsageError(f"--system {args.system} needs --dense-index and --checkpoint")
        model, _ = _model(cfg, args.checkpoint)
        index = retrieval.DenseIndex.load(args.dense_index)
        runs["dense"] = retrieval.dense_run(model, index, queries, k, args.threads)
    if args.system == "hybrid":
        if args.w is None:
            raise UsageError("--system hybrid needs --w")
        run = retrieval.fuse(runs["dense"], runs["bm25"], args.w, k, cfg["fusion_normalize"])
    else:
        run = runs[args.system]
    retrieval.write_run(run, args.out)
    return EXIT_OK


def _read_run(path) -> retrieval.Run:
    try:
        return retrieval.read_run(path)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed run file ({exc})") from None


def _restrict(run: retrieval.Run, qrels: retrieval.Qrels, queries_path):
    """Limit evaluation to the queries of one query file.

    Every listed query counts, including ones with no judgments or results.
    """
    if not queries_path:
        return run, qrels
    qids = [q for q, _ in corpusio.read_queries(queries_path)]
    keep = set(qids)
    return {q: r for q, r in run.items() if q in keep}, {q: qrels.get(q, {}) for q in qids}


def cmd_tune_fusion(args, cfg: Config) -> int:
    qrels = retrieval.read_qrels(args.qrels)
    dense, qrels = _restrict(_read_run(args.dense_run), qrels, args.queries)
    bm25, _ = _restrict(_read_run(args.bm25_run), qrels, args.queries)
    w, table = retrieval.tune_fusion_weight(
        dense, bm25, qrels, cfg["metric"],
        cfg["fusion_step"], cfg["top_k"], cfg["fusion_normalize"])
    if args.out:
        _write_json({"w": w, "metric": cfg["metric"], "table": {f"{k:.2f}": v for k, v in table.items()}},
                    args.out)
    print(w)
    return EXIT_OK


def cmd_eval_ret(args, cfg: Config) -> int:
    run, qrels = _restrict(_read_run(args.run), retrieval.read_qrels(args.qrels), args.queries)
    value = retrieval.evaluate(run, qrels, cfg["metric"], cfg["gain"])
    metrics = {cfg["metric"]: value}
    if args.out:
        _write_json(metrics, args.out)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_cluster(args, cfg: Config) -> int:
    model, _ = _model(cfg, args.checkpoint)
    train = _corpus(args.train, cfg)
    test = _corpus(args.test, cfg)
    out = _out_dir(args.out)
    k = cfg["cluster_k"] or None
    metrics = taskheads.cluster_eval(model, train, test, k=k, seed=cfg["seed"],
                                     normalize=cfg["cluster_normalize"], average=cfg["nmi_average"])
    _write_json(metrics, out / "metrics.json")
    cfg.write_resolved(out)
    return EXIT_OK


def cmd_export_emb(args, cfg: Config) -> int:
    model, _ = _model(cfg, args.checkpoint)
    index = retrieval.encode_corpus(model, _corpus(args.corpus, cfg), threads=args.threads)
    with open(args.out, "w") as fh:
        for doc_id, row in zip(index.doc_ids, index.matrix):
            fh.write(doc_id + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")
    return EXIT_OK


def cmd_export_att(args, cfg: Config) -> int:
    model, _ = _model(cfg, args.checkpoint)
    docs = {d.id: d for d in _corpus(args.corpus, cfg)}
    if args.doc_id not in docs:
        raise DataError(f"document {args.doc_id!r} not in {args.corpus}")
    write_attention_csv(export_attention(model, docs[args.doc_id]), args.out)
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    err = contrastive.gradient_check(seed=cfg["seed"], mode=cfg["mode"], eps=args.eps)
    print(f"max_relative_error\t{err:.6e}")
    if not err < GRADCHECK_TOLERANCE:
        print(f"error\tcheck\tmax relative error {err:.3e} >= {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (e.g. a previous config.resolved)")
    group = p.add_argument_group("config overrides")
    for key in KEYS:
        flags = [f"--{key.name}"]
        if "_" in key.name:
            flags.append(f"--{key.name.replace('_', '-')}")
        group.add_argument(*flags, dest=f"cfg_{key.name}", metavar=key.parse.__name__.upper(),
                           help=f"[{key.section}] {key.help} (default {key.default})".replace("%", "%%"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphdoc", description="Graph document encoder pipelines.")
    parser.add_argument("--log-level", default="WARNING", type=str.upper,
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="logging level for stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        _add_config_flags(p)
        return p

    p = add("synth", cmd_synth, "generate a synthetic topical corpus with queries and qrels")
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "contrastive pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")

    p = add("finetune-cls", cmd_finetune_cls, "end-to-end classification finetuning")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--init")
    p.add_argument("--out", required=True)

    p = add("eval-cls", cmd_eval_cls, "predict labels with a finetuned classifier")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("finetune-ret", cmd_finetune_ret, "retrieval finetuning with hard negatives")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--init")
    p.add_argument("--out", required=True)

    p = add("index-bm25", cmd_index_bm25, "build a BM25 index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("encode", cmd_encode, "encode a corpus into a dense index")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = add("search", cmd_search, "write a TREC run for a query file")
    p.add_argument("--system", choices=("bm25", "dense", "hybrid"), required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bm25-index")
    p.add_argument("--dense-index")
    p.add_argument("--checkpoint")
    p.add_argument("--w", type=float, help="hybrid weight on the dense score")
    p.add_argument("--threads", type=int, default=1)

    p = add("tune-fusion", cmd_tune_fusion, "grid-search the hybrid weight; prints w*")
    p.add_argument("--dense-run", required=True)
    p.add_argument("--bm25-run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", help="also write the full grid as JSON")
    p.add_argument("--queries", help="evaluate only these queries")

    p = add("eval-ret", cmd_eval_ret, "score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out")
    p.add_argument("--queries", help="evaluate only these queries")

    p = add("cluster", cmd_cluster, "k-means on train embeddings, NMI/purity on test")
    p.add_argument("--checkpoint", help="omit to evaluate a randomly initialised model")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)

    p = add("export-emb", cmd_export_emb, "document embeddings as TSV")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = add("export-att", cmd_export_att, "last-layer attention matrix of one document as CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--doc-id", required=True)
    p.add_argument("--out", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the pretraining loss on a tiny model")
    p.add_argument("--eps", type=float, default=1e-5)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    one_line = " ".join(str(message).split())
    print(f"error\t{kind}\t{one_line}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, _config(args))
    except UsageError as exc:
        return _fail(exc.kind, exc, EXIT_USAGE)
    except GraphDocError as exc:
        return _fail(exc.kind, exc, EXIT_DATA)
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}", EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
