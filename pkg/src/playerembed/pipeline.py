"""End-to-end helpers shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import analysis as A
from .encoder import Encoder, ModelConfig
from .events import (DEFAULT_GAP_MS, FilterSpec, FilterStats, PlayerDocument, build_documents,
                     default_filter_spec, inject_order_noise, split_train_val)
from .synthgen import Corpus, GeneratorConfig, generate_corpus
from .tokenizer import TokenSequence, Vocabulary, build_vocab, encode
from .trainer import MetricsReport, TrainConfig, TrainResult, evaluate, train

# Training settings for CPU-sized runs of the ``small`` preset.  The learning
# rate is well above the GPU-scale default because the desk corpus only
# affords a few hundred optimizer steps.
DESK_TRAIN = dict(epochs=40, lr=3e-3, micro_batch=4, accumulation=4)


@dataclass
class Prepared:
    corpus: Corpus
    docs: list[PlayerDocument]
    train: list[PlayerDocument]
    val: list[PlayerDocument]
    vocab: Vocabulary
    stats: FilterStats
    n_sessions: int

    @property
    def labels(self) -> dict[str, str]:
        return self.corpus.labels


def prepare(gen_cfg: GeneratorConfig, spec: FilterSpec | None = None, gap_ms: int = DEFAULT_GAP_MS,
            train_fraction: float = 0.67, split_seed: int = 0) -> Prepared:
    corpus = generate_corpus(gen_cfg)
    docs, sessions, stats = build_documents(corpus.events, spec or default_filter_spec(), gap_ms)
    tr, va = split_train_val(docs, train_fraction, split_seed)
    vocab = build_vocab(d.text for d in tr)
    return Prepared(corpus, docs, tr, va, vocab, stats, sum(len(s) for s in sessions.values()))


def encode_docs(docs: Sequence[PlayerDocument], vocab: Vocabulary, block_size: int) -> list[TokenSequence]:
    return [encode(d.text, vocab, block_size) for d in docs]


def noisy_docs(docs: Sequence[PlayerDocument], p: float, seed: int) -> list[PlayerDocument]:
    """Each document's sessions shuffled with probability ``p`` (seed per player index)."""
    out = []
    for i, d in enumerate(docs):
        toks = inject_order_noise(d.tokens, p, [seed, i])
        out.append(PlayerDocument(d.player_id, " ".join(toks), d.session_offsets))
    return out


def desk_train(prep: Prepared, preset: str = "small", seed: int = 0, model_overrides: dict | None = None,
               out_dir=None, **train_overrides) -> TrainResult:
    cfg = ModelConfig.preset(preset, len(prep.vocab), **(model_overrides or {}))
    model = Encoder(cfg, seed=seed)
    tcfg = TrainConfig(**{**DESK_TRAIN, "seed": seed, **train_overrides})
    return train(model, encode_docs(prep.train, prep.vocab, cfg.block_size), tcfg,
                 encode_docs(prep.val, prep.vocab, cfg.block_size), out_dir=out_dir)


def evaluate_docs(model: Encoder, docs: Sequence[PlayerDocument], vocab: Vocabulary, noise_p: float = 0.0,
                  noise_seed: int = 0, mask_seed: int = 1234) -> MetricsReport:
    if noise_p > 0:
        docs = noisy_docs(docs, noise_p, noise_seed)
    return evaluate(model, encode_docs(docs, vocab, model.cfg.block_size), mask_seed)


@dataclass
class ClusterRun:
    embeddings: A.EmbeddingMatrix
    pca: A.PCAResult
    report: A.ClusterReport
    ari: float | None = None
    extra: dict = field(default_factory=dict)


def cluster_embeddings(emb: A.EmbeddingMatrix, k: int = 8, seed: int = 0, n_components: int = 50,
                       perplexity: float = 30.0, n_iter: int = 1000, restarts: int = 10,
                       space: str = "tsne", docs: Sequence[PlayerDocument] | None = None) -> ClusterRun:
    """PCA → t-SNE → GMM on ``space`` ("tsne" coordinates or "pca" projections)."""
    if space not in ("tsne", "pca"):
        raise ValueError(f"space must be 'tsne' or 'pca', got {space!r}")
    n, d = emb.matrix.shape
    pca = A.pca_project(emb.matrix, min(n_components, n - 1, d))
    tsne = A.tsne_embed(pca.projected, perplexity=perplexity, n_iter=n_iter, seed=seed)
    X = tsne.coords if space == "tsne" else pca.projected
    report = A.gmm_fit(X, k=k, seed=seed, restarts=restarts)
    report.coords = tsne.coords
    if docs is not None:
        report.fingerprints = A.cluster_fingerprint(report.assignments, docs, k=k)
    return ClusterRun(emb, pca, report, extra={"kl_initial": tsne.kl_initial, "kl_final": tsne.kl_final})


def archetype_recovery(prep: Prepared, model: Encoder, k: int, seed: int = 0, **kw) -> ClusterRun:
    docs = prep.docs
    emb = A.embed_players(model, docs, prep.vocab)
    run = cluster_embeddings(emb, k=k, seed=seed, docs=docs, **kw)
    truth = [prep.labels[pid] for pid in emb.player_ids]
    run.ari = A.adjusted_rand_index(truth, run.report.assignments)
    return run


def mean_accuracy(reports: Sequence[MetricsReport]) -> float:
    return float(np.mean([r.accuracy for r in reports]))
