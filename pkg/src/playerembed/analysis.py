"""Player embeddings and their unsupervised structure.

max pooling → PCA → exact t-SNE → full-covariance GMM → per-cluster
event-class fingerprints.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .encoder import Encoder
from .events import DEFAULT_CLASSES
from .tokenizer import Vocabulary, encode

log = logging.getLogger(__name__)


# --------------------------------------------------------------- embeddings

def max_pool_embeddings(hidden: np.ndarray, validity) -> np.ndarray:
    valid = np.asarray(validity, dtype=bool)
    if not valid.any():
        raise ValueError("max pooling needs at least one valid position")
    return np.asarray(hidden)[valid[:len(hidden)]].max(axis=0)


@dataclass
class EmbeddingMatrix:
    player_ids: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        if len(self.player_ids) != len(self.matrix):
            raise ValueError("one embedding row per player required")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embeddings contain non-finite entries")

    def save(self, path, csv_path=None) -> None:
        path = Path(path)
        save_tensors(path, {"embeddings": self.matrix})
        ids_path(path).write_text("".join(f"{p}\n" for p in self.player_ids))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["player_id"] + [f"e{i}" for i in range(self.matrix.shape[1])])
                for pid, row in zip(self.player_ids, self.matrix):
                    w.writerow([pid] + [repr(float(x)) for x in row])

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        path = Path(path)
        mat = load_tensors(path)["embeddings"]
        ids = ids_path(path).read_text().split()
        return cls(ids, mat)


def ids_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".ids")


def embed_players(model: Encoder, docs, vocab: Vocabulary) -> EmbeddingMatrix:
    """Max-pooled last-layer states, one row per document."""
    rows, ids = [], []
    for d in docs:
        seq = encode(d.text, vocab, model.cfg.block_size).trimmed()
        hidden = model.forward(seq.ids, seq.valid).data
        rows.append(max_pool_embeddings(hidden, seq.valid))
        ids.append(d.player_id)
    dim = model.cfg.hidden_dim
    return EmbeddingMatrix(ids, np.vstack(rows) if rows else np.zeros((0, dim)))


# ---------------------------------------------------------------------- PCA

@dataclass
class PCAResult:
    projected: np.ndarray
    components: np.ndarray       # (d, k), orthonormal columns
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


def pca_project(X: np.ndarray, k: int = 50) -> PCAResult:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"k={k} out of range; need 1 <= k <= min(n-1, d) = {min(n - 1, d)}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    # fix signs so the largest-magnitude loading of each component is positive
    flip = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    vt *= np.where(flip == 0, 1.0, flip)[:, None]
    var = s ** 2 / (n - 1)
    total = var.sum()
    comps = vt[:k].T
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return PCAResult(Xc @ comps, comps, var[:k], ratio, mean)


# -------------------------------------------------------------------- t-SNE

def _sq_dists(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def conditional_probabilities(X: np.ndarray, perplexity: float = 30.0, tol: float = 1e-8,
                              max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic p(j|i) whose Shannon entropy (nats) is log(perplexity).

    Returns ``(P, beta)`` with ``beta = 1 / (2 sigma^2)`` per row, found by
    bisection.
    """
    D = _sq_dists(np.asarray(X, dtype=np.float64))
    n = len(D)
    target = math.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.delete(D[i], i)
        d = d - d.min()
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            z = w.sum()
            p = w / z
            H = math.log(z) + beta * float((p * d).sum())
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        P[i, np.arange(n) != i] = p
        betas[i] = beta
    return P, betas


def joint_probabilities(P_cond: np.ndarray) -> np.ndarray:
    n = len(P_cond)
    P = (P_cond + P_cond.T) / (2.0 * n)
    return np.maximum(P, 1e-12) * (1.0 - np.eye(n))


def _q_matrix(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + _sq_dists(Y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    Q, _ = _q_matrix(Y)
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))).sum())


@dataclass
class TSNEResult:
    coords: np.ndarray
    kl_initial: float
    kl_final: float
    P: np.ndarray


def tsne_embed(Y: np.ndarray, perplexity: float = 30.0, n_iter: int = 1000, seed: int = 0,
               learning_rate: float = 200.0, exaggeration: float = 12.0,
               exaggeration_iters: int = 250) -> TSNEResult:
    """Exact O(n^2) t-SNE with early exaggeration, momentum and gains."""
    Y = np.asarray(Y, dtype=np.float64)
    n = len(Y)
    if n <= 3 * perplexity:
        raise ValueError(f"t-SNE needs n > 3*perplexity; got n={n}, perplexity={perplexity}")
    P = joint_probabilities(conditional_probabilities(Y, perplexity)[0])
    rng = np.random.default_rng(seed)
    Z = rng.normal(0.0, 1e-4, size=(n, 2))
    kl0 = kl_divergence(P, Z)
    step = np.zeros_like(Z)
    gains = np.ones_like(Z)
    for it in range(n_iter):
        ex = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        Q, num = _q_matrix(Z)
        W = (ex * P - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Z - W @ Z)
        same = np.sign(grad) == np.sign(step)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        step = momentum * step - learning_rate * gains * grad
        Z = Z + step
        Z -= Z.mean(axis=0)
    return TSNEResult(Z, kl0, kl_divergence(P, Z), P)


# ---------------------------------------------------------------------- GMM

@dataclass
class ClusterReport:
    assignments: np.ndarray
    responsibilities: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: float
    ll_history: list[float]
    objective_history: list[float]
    restart_histories: list[list[float]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    coords: np.ndarray | None = None
    fingerprints: "Fingerprints | None" = None

    @property
    def k(self) -> int:
        return len(self.weights)


def _log_gauss(X: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    n, d = X.shape
    out = np.empty((n, len(means)))
    for j, (mu, S) in enumerate(zip(means, covs)):
        L = np.linalg.cholesky(S)
        z = np.linalg.solve(L, (X - mu).T)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, j] = -0.5 * ((z * z).sum(axis=0) + logdet + d * math.log(2.0 * math.pi))
    return out


def _e_step(X, weights, means, covs, reg):
    """Responsibilities, log-likelihood and the penalized EM objective."""
    lp = _log_gauss(X, means, covs) + np.log(np.maximum(weights, 1e-300))
    m = lp.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))
    ll = float(lse.sum())
    penalty = 0.5 * reg * sum(np.trace(np.linalg.inv(S)) for S in covs)
    return np.exp(lp - lse[:, None]), ll, ll - penalty


def _m_step(X, resp, reg):
    # Exact maximizer of loglik - reg/2 * sum_k tr(inv(cov_k)), which keeps
    # every covariance positive definite and EM exactly monotone.
    n, d = X.shape
    nk = resp.sum(axis=0)
    means = (resp.T @ X) / np.maximum(nk, 1e-300)[:, None]
    covs = np.empty((len(nk), d, d))
    for j in range(len(nk)):
        diff = X - means[j]
        covs[j] = ((resp[:, j, None] * diff).T @ diff + reg * np.eye(d)) / max(nk[j], 1e-300)
        covs[j] = 0.5 * (covs[j] + covs[j].T)
    return nk / n, means, covs


def _kmeanspp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = np.min([((X - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        idx = rng.integers(len(X)) if total <= 0 else rng.choice(len(X), p=d2 / total)
        centers.append(X[idx])
    return np.array(centers)


def gmm_fit(X: np.ndarray, k: int = 8, seed: int = 0, restarts: int = 10, max_iter: int = 500,
            tol: float = 1e-10, reg: float = 1e-6) -> ClusterReport:
    """EM for a full-covariance Gaussian mixture; keeps the best restart.

    Each restart seeds means by k-means++ and starts from the pooled
    covariance.  Covariances are regularized by a fixed prior adding
    ``reg * I`` to each component's scatter matrix; ``objective_history``
    tracks the penalized log-likelihood EM maximizes, which never decreases.
    EM stops when it gains less than ``tol`` per point.  Restarts are ranked
    by that objective.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    pooled = np.cov(X.T, bias=True).reshape(d, d) + reg * np.eye(d)
    best = None
    histories = []
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        means = _kmeanspp(X, k, rng)
        covs = np.repeat(pooled[None], k, axis=0)
        weights = np.full(k, 1.0 / k)
        resp, ll, obj = _e_step(X, weights, means, covs, reg)
        hist, objs = [ll], [obj]
        for _ in range(max_iter):
            weights, means, covs = _m_step(X, resp, reg)
            resp, ll, obj = _e_step(X, weights, means, covs, reg)
            hist.append(ll)
            objs.append(obj)
            if abs(objs[-1] - objs[-2]) / n < tol:
                break
        histories.append(objs)
        if best is None or obj > best[0]:
            best = (obj, ll, resp, weights, means, covs, hist, objs)
    _, ll, resp, weights, means, covs, hist, objs = best
    warnings = [f"component {j} is degenerate (weight {w:.3g} < 1/n)"
                for j, w in enumerate(weights) if w < 1.0 / n]
    return ClusterReport(resp.argmax(axis=1), resp, weights, means, covs, ll, hist, objs, histories,
                         warnings)


# -------------------------------------------------------------- fingerprints

@dataclass
class Fingerprints:
    classes: tuple[str, ...]
    histograms: np.ndarray       # (k, n_classes); rows of populated clusters sum to 1
    sizes: np.ndarray
    small: list[int]

    def top_class(self, cluster: int) -> str:
        return self.classes[int(self.histograms[cluster].argmax())]

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "sizes": self.sizes.tolist(), "small_clusters": self.small,
                "histograms": [dict(zip(self.classes, map(float, row))) for row in self.histograms]}


def cluster_fingerprint(assignments, documents: Sequence, k: int | None = None,
                        classes: Sequence[str] = DEFAULT_CLASSES, min_size: int | None = None) -> Fingerprints:
    """Normalized event-class histogram of each cluster's member documents.

    ``documents`` are token lists or objects with a ``tokens`` attribute.
    Clusters with fewer than ``min_size`` members (default: 2% of players,
    at least 2) are listed in ``small``.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    if len(assignments) != len(documents):
        raise ValueError("one assignment per document required")
    k = int(assignments.max(initial=-1)) + 1 if k is None else k
    classes = tuple(classes)
    col = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((k, len(classes)))
    for a, doc in zip(assignments, documents):
        toks = doc.tokens if hasattr(doc, "tokens") else doc
        for t in toks:
            j = col.get(t)
            if j is not None:
                counts[a, j] += 1
    sums = counts.sum(axis=1, keepdims=True)
    hist = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
    sizes = np.bincount(assignments, minlength=k)
    if min_size is None:
        min_size = max(2, int(math.ceil(0.02 * len(assignments))))
    small = [j for j in range(k) if sizes[j] < min_size or sums[j, 0] == 0]
    return Fingerprints(classes, hist, sizes, small)


# ---------------------------------------------------------------- utilities

def adjusted_rand_index(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if len(a) != len(b):
        raise ValueError("label arrays differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1))
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return (x * (x - 1) / 2.0).sum()

    index = comb2(table)
    ra, rb = comb2(table.sum(axis=1)), comb2(table.sum(axis=0))
    total = comb2(np.array([len(a)], dtype=float))
    expected = ra * rb / total if total else 0.0
    top = 0.5 * (ra + rb)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf")


def write_scatter_svg(path, coords: np.ndarray, labels, size: int = 600, radius: float = 3.0) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 20
    xy = pad + (coords - lo) / span * (size - 2 * pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">', f'<rect width="{size}" height="{size}" fill="white"/>']
    for (x, y), lab in zip(xy, labels):
        color = _PALETTE[int(lab) % len(_PALETTE)]
        parts.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="{radius}" fill="{color}" '
                     f'fill-opacity="0.8"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def report_summary(report: ClusterReport) -> dict:
    out = {"k": report.k, "log_likelihood": report.log_likelihood, "weights": report.weights.tolist(),
           "means": report.means.tolist(), "covariances": report.covariances.tolist(),
           "n_iter": len(report.ll_history) - 1, "warnings": report.warnings,
           "cluster_sizes": np.bincount(report.assignments, minlength=report.k).tolist()}
    if report.fingerprints is not None:
        out["fingerprints"] = report.fingerprints.to_dict()
    return out


def save_cluster_report(out_dir, report: ClusterReport, player_ids: Sequence[str]) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"clusters": out / "clusters.csv", "summary": out / "cluster_summary.json"}
    with open(paths["clusters"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["player_id", "cluster"])
        for pid, c in zip(player_ids, report.assignments):
            w.writerow([pid, int(c)])
    if report.coords is not None:
        paths["coords"] = out / "tsne.csv"
        with open(paths["coords"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["player_id", "x", "y"])
            for pid, (x, y) in zip(player_ids, report.coords[:, :2]):
                w.writerow([pid, repr(float(x)), repr(float(y))])
    paths["summary"].write_text(json.dumps(report_summary(report), indent=2, sort_keys=True) + "\n")
    return paths
