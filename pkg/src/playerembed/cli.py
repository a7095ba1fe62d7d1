"""``playerembed`` command line: one subcommand per pipeline stage.

Stages hand off through files in their ``--out`` directories.  Each run
writes ``manifest.json`` holding the resolved settings and sha256 checksums
of inputs and outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import __version__
from . import analysis as A
from .checkpoint import CheckpointError
from .encoder import PRESETS, ConfigError, Encoder, ModelConfig, SequenceTooLongError
from .events import (FilterSpec, MalformedLogError, build_documents, default_filter_spec, parse_events,
                     read_documents, split_train_val, write_documents)
from .pipeline import DESK_TRAIN, cluster_embeddings, encode_docs, evaluate_docs, noisy_docs
from .synthgen import GeneratorConfig, bundled_config_path, generate_corpus
from .tokenizer import Vocabulary, build_vocab
from .trainer import TrainConfig, TrainingDiverged, train, write_summary

log = logging.getLogger("playerembed")

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad or missing input; reported without a traceback."""


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class Run:
    """Output bookkeeping: declared outputs are removed if the stage fails."""

    def __init__(self, command: str, out_dir, settings: dict):
        self.command = command
        self.out = Path(out_dir)
        self.settings = settings
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self._created_dir = not self.out.exists()

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"{self.command}: input file not found: {p}")
        self.inputs.append(p)
        return p

    def output(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.output(MANIFEST)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            missing = [str(p) for p in self.outputs if p.name != MANIFEST and not p.is_file()]
            if missing:
                raise RuntimeError(f"declared outputs not written: {missing}")
            self._write_manifest()
            return False
        for p in self.outputs + [p.with_name(p.name + ".tmp") for p in self.outputs]:
            p.unlink(missing_ok=True)
        if self._created_dir and self.out.is_dir() and not any(self.out.iterdir()):
            self.out.rmdir()
        return False

    def _write_manifest(self) -> None:
        manifest = {
            "subcommand": self.command,
            "version": __version__,
            "seed": self.settings.get("seed"),
            "config": self.settings,
            "inputs": {str(p): sha256(p) for p in self.inputs},
            "outputs": {p.name: sha256(p) for p in self.outputs if p.name != MANIFEST},
        }
        _write_atomic(self.out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- stages

def _gen_config_path(value: str) -> Path:
    p = Path(value)
    if p.is_file():
        return p
    bundled = bundled_config_path(Path(value).stem)
    if bundled.is_file():
        return bundled
    raise UsageError(f"generator config not found: {value} (give a JSON path or a bundled name: default, four)")


def cmd_generate(a, run: Run) -> None:
    overrides = {"seed": a.seed}
    if a.players is not None:
        overrides["players"] = a.players
    if a.days is not None:
        overrides["days"] = a.days
    cfg = GeneratorConfig.load(run.input(_gen_config_path(a.config)), **overrides)
    corpus = generate_corpus(cfg)
    for name in ("events.jsonl", "labels.tsv", "ground_truth.json"):
        run.output(name)
    corpus.write(run.out)
    log.info("generated %d events, %d sessions, %d players", len(corpus.events), corpus.n_sessions,
             len(corpus.labels))


def cmd_preprocess(a, run: Run) -> None:
    spec = FilterSpec.load(run.input(a.filter_spec)) if a.filter_spec else default_filter_spec()
    with open(run.input(a.events), encoding="utf-8") as fh:
        events, skipped = parse_events(fh)
    if not events:
        raise UsageError(f"{a.events}: no valid events")
    docs, sessions, stats = build_documents(events, spec, int(round(a.gap_minutes * 60_000)))
    if a.noise_p > 0:
        docs = noisy_docs(docs, a.noise_p, a.seed)
    tr, va = split_train_val(docs, a.train_fraction, a.seed)
    vocab = build_vocab(d.text for d in tr)
    write_documents(run.output("documents.tsv"), docs)
    write_documents(run.output("train.tsv"), tr)
    write_documents(run.output("val.tsv"), va)
    vocab.save(run.output("vocab.tsv"))
    n_sessions = sum(len(s) for s in sessions.values())
    info = {"n_events_parsed": len(events), "n_lines_skipped": skipped, "n_players": len(docs),
            "n_sessions": n_sessions, "n_train": len(tr), "n_val": len(va), "vocab_size": len(vocab),
            "fields_in": stats.fields_in, "fields_out": stats.fields_out, "field_reduction": stats.reduction,
            "events_dropped": stats.events_dropped,
            "sessions_per_player": {p: len(s) for p, s in sessions.items()}}
    run.output("preprocess.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    log.info("%d players, %d sessions, field reduction %.3f", len(docs), n_sessions, stats.reduction)


def _data_file(run: Run, data_dir, name: str) -> Path:
    p = Path(data_dir) / name
    if not p.is_file():
        raise UsageError(f"{p} missing; point --data at a `preprocess` output directory")
    return run.input(p)


def cmd_train(a, run: Run) -> None:
    vocab = Vocabulary.load(_data_file(run, a.data, "vocab.tsv"))
    tr = read_documents(_data_file(run, a.data, "train.tsv"))
    va = read_documents(_data_file(run, a.data, "val.tsv"))
    overrides = {k: getattr(a, k) for k in ("window", "dilation", "dropout", "block_size")
                 if getattr(a, k) is not None}
    cfg = ModelConfig.preset(a.preset, len(vocab), **overrides)
    tcfg = TrainConfig(epochs=a.epochs, micro_batch=a.micro_batch, accumulation=a.accumulation, lr=a.lr,
                       weight_decay=a.weight_decay, seed=a.seed, eval_every=a.eval_every,
                       max_steps=a.max_steps, time_budget_s=a.time_budget)
    model = Encoder(cfg, seed=a.seed)
    for name in ("metrics.csv", "model.b2v", "model.b2v.json", "summary.json", "vocab.tsv"):
        run.output(name)
    res = train(model, encode_docs(tr, vocab, cfg.block_size), tcfg, encode_docs(va, vocab, cfg.block_size),
                out_dir=run.out)
    vocab.save(run.out / "vocab.tsv")
    write_summary(run.out / "summary.json", res, tcfg)


def _load_model(run: Run, model_dir) -> tuple[Encoder, Vocabulary]:
    d = Path(model_dir)
    ckpt = d / "model.b2v"
    if not ckpt.is_file():
        raise UsageError(f"{ckpt} missing; point --model at a `train` output directory")
    run.input(ckpt)
    run.input(d / "model.b2v.json")
    return Encoder.load(ckpt), Vocabulary.load(run.input(d / "vocab.tsv"))


def cmd_eval(a, run: Run) -> None:
    model, vocab = _load_model(run, a.model)
    docs = read_documents(_data_file(run, a.data, f"{a.split}.tsv"))
    results = []
    for p in a.noise_p:
        rep = evaluate_docs(model, docs, vocab, p, noise_seed=a.seed, mask_seed=a.mask_seed)
        results.append({"noise_p": p, **rep.to_dict()})
        log.info("noise %.2f: acc %.4f ce %.4f ppl %.4f", p, rep.accuracy, rep.cross_entropy, rep.perplexity)
    run.output("eval.json").write_text(json.dumps({"split": a.split, "results": results}, indent=2) + "\n")


def cmd_embed(a, run: Run) -> None:
    model, vocab = _load_model(run, a.model)
    docs = read_documents(_data_file(run, a.data, f"{a.split}.tsv"))
    emb = A.embed_players(model, docs, vocab)
    out = run.output("embeddings.b2v")
    run.output(A.ids_path(out).name)
    csv_path = run.output("embeddings.csv") if a.csv else None
    emb.save(out, csv_path)


def cmd_cluster(a, run: Run) -> None:
    path = Path(a.embeddings)
    if path.is_dir():
        path = path / "embeddings.b2v"
    run.input(path)
    emb = A.EmbeddingMatrix.load(path)
    docs = None
    if a.data:
        by_id = {d.player_id: d for d in read_documents(_data_file(run, a.data, "documents.tsv"))}
        try:
            docs = [by_id[p] for p in emb.player_ids]
        except KeyError as e:
            raise UsageError(f"player {e} has an embedding but no document in {a.data}") from None
    if len(emb.player_ids) <= 3 * a.perplexity:
        raise UsageError(f"{len(emb.player_ids)} players is too few for perplexity {a.perplexity}; "
                         f"lower --perplexity below n/3")
    res = cluster_embeddings(emb, k=a.k, seed=a.seed, n_components=a.components, perplexity=a.perplexity,
                             n_iter=a.iters, restarts=a.restarts, space=a.space, docs=docs)
    for name in ("clusters.csv", "cluster_summary.json", "tsne.csv"):
        run.output(name)
    A.save_cluster_report(run.out, res.report, emb.player_ids)
    summary = json.loads((run.out / "cluster_summary.json").read_text())
    summary.update({"space": a.space, "tsne_kl_initial": res.extra["kl_initial"],
                    "tsne_kl_final": res.extra["kl_final"],
                    "pca_explained_variance_ratio": res.pca.explained_variance_ratio.tolist()})
    (run.out / "cluster_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if a.svg:
        A.write_scatter_svg(run.output("tsne.svg"), res.report.coords, res.report.assignments)
    for w in res.report.warnings:
        log.warning(w)


def _read_json(run: Run, path) -> dict:
    try:
        return json.loads(run.input(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from None


def cmd_report(a, run: Run) -> None:
    doc: dict = {}
    if a.train:
        doc["training"] = _read_json(run, Path(a.train) / "summary.json")
    if a.eval:
        doc["evaluation"] = [_read_json(run, Path(e) / "eval.json") for e in a.eval]
    if a.cluster:
        doc["clustering"] = _read_json(run, Path(a.cluster) / "cluster_summary.json")
    if a.data:
        pre = _read_json(run, Path(a.data) / "preprocess.json")
        pre.pop("sessions_per_player", None)
        doc["preprocessing"] = pre
    if not doc:
        raise UsageError("report: give at least one of --data, --train, --eval, --cluster")
    run.output("report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("--config", default=None,
                   help="JSON file of flag values (keys are flag names with underscores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="playerembed", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize an archetype-mixture event log")
    _add_common(p)
    p.set_defaults(config="default")
    p.add_argument("--players", type=int, default=None)
    p.add_argument("--days", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="filter, sessionize and render player documents")
    _add_common(p)
    p.add_argument("--events", required=True, help="JSONL event log")
    p.add_argument("--filter-spec", default=None, help="FilterSpec JSON (default: bundled)")
    p.add_argument("--gap-minutes", type=float, default=15.0)
    p.add_argument("--noise-p", type=float, default=0.0, help="within-session order noise probability")
    p.add_argument("--train-fraction", type=float, default=0.67)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="MLM pretraining")
    _add_common(p)
    p.add_argument("--data", required=True, help="preprocess output directory")
    p.add_argument("--preset", choices=sorted(PRESETS), default="small")
    p.add_argument("--epochs", type=int, default=DESK_TRAIN["epochs"])
    p.add_argument("--lr", type=float, default=DESK_TRAIN["lr"])
    p.add_argument("--micro-batch", type=int, default=4)
    p.add_argument("--accumulation", type=int, default=4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--eval-every", type=int, default=0, help="optimizer steps between evals (0: per epoch)")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--time-budget", type=float, default=None, help="seconds")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--dilation", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--block-size", type=int, default=None)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "masked-token metrics, optionally under order noise"),
                              ("embed", cmd_embed, "max-pooled player embeddings")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.add_argument("--model", required=True, help="train output directory")
        p.add_argument("--data", required=True, help="preprocess output directory")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--split", default="val", choices=["train", "val", "documents"])
            p.add_argument("--noise-p", type=float, nargs="+", default=[0.0])
            p.add_argument("--mask-seed", type=int, default=1234)
        else:
            p.add_argument("--split", default="documents", choices=["train", "val", "documents"])
            p.add_argument("--csv", action="store_true", help="also write embeddings.csv")

    p = sub.add_parser("cluster", help="PCA, t-SNE and GMM clustering with fingerprints")
    _add_common(p)
    p.add_argument("--embeddings", required=True, help="embed output directory or .b2v file")
    p.add_argument("--data", default=None, help="preprocess output directory (enables fingerprints)")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--components", type=int, default=50)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--space", choices=["tsne", "pca"], default="tsne")
    p.add_argument("--svg", action="store_true", help="write tsne.svg colored by cluster")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("report", help="merge stage outputs into report.json")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--train", default=None)
    p.add_argument("--eval", nargs="*", default=None)
    p.add_argument("--cluster", default=None)
    p.set_defaults(func=cmd_report)
    return ap


def _apply_config_file(ap: argparse.ArgumentParser, args: argparse.Namespace, argv) -> argparse.Namespace:
    """Fill flags not given on the command line from ``--config`` JSON."""
    if args.command == "generate" or args.config is None:
        return args
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"--config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from None
    explicit = {tok.split("=", 1)[0][2:].replace("-", "_") for tok in argv if tok.startswith("--")}
    unknown = sorted(set(values) - set(vars(args)))
    if unknown:
        raise UsageError(f"{path}: unknown keys {unknown}")
    for k, v in values.items():
        if k not in explicit:
            setattr(args, k, v)
    return args


def _settings(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "verbose", "threads")}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config_file(ap, args, argv)
        limits = nullcontext()
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            limits = threadpool_limits(limits=args.threads)
        with limits, Run(args.command, args.out, _settings(args)) as run:
            args.func(args, run)
    except (UsageError, MalformedLogError, CheckpointError, ConfigError, SequenceTooLongError,
            TrainingDiverged, FileNotFoundError, ValueError, KeyError) as e:
        print(f"playerembed {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
