"""MLM pretraining loop, AdamW optimizer and intrinsic metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import Encoder
from .tokenizer import IGNORE, TokenSequence, apply_mlm_mask

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "accuracy", "cross_entropy", "perplexity")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    micro_batch: int = 4
    accumulation: int = 4
    lr: float = 2e-5
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    mask_rate: float = 0.15
    seed: int = 0
    eval_every: int = 0          # optimizer steps; 0 = once per epoch
    eval_mask_seed: int = 1234
    max_steps: int | None = None
    time_budget_s: float | None = None

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation


@dataclass
class MetricsReport:
    accuracy: float
    cross_entropy: float
    perplexity: float
    n_masked: int
    n_sequences: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Encoder
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, MetricsReport]] = field(default_factory=list)
    steps: int = 0
    epochs_run: int = 0
    seconds: float = 0.0


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, weight_decay: float = 1e-2,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _sequence_loss(model: Encoder, seq: TokenSequence, normalizer: float, rng) -> float:
    mask = seq.labels != IGNORE
    with T.Tape() as tape:
        hidden = model.forward(seq.ids, seq.valid, rng=rng)
        loss = T.cross_entropy_masked(model.logits(hidden), np.where(mask, seq.labels, 0), mask,
                                      normalizer=normalizer)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value}")
    tape.backward(loss)
    return value


def train_step(model: Encoder, opt: AdamW, batch: Sequence[TokenSequence], micro_batch: int, rng) -> float:
    """One optimizer update over ``batch`` (already masked).

    Every sequence's summed NLL is divided by the number of masked tokens in
    the whole batch, so the accumulated gradient equals that of one large
    batch regardless of how it is split into micro-batches.  Items inside a
    micro-batch are processed one after another.
    """
    n_masked = sum(int((s.labels != IGNORE).sum()) for s in batch)
    if n_masked == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(batch), micro_batch):
        for seq in batch[start:start + micro_batch]:
            if (seq.labels != IGNORE).any():
                total += _sequence_loss(model, seq, n_masked, rng)
    opt.step()
    opt.zero_grad()
    return total


def _write_metrics_row(path: Path, step: int, loss: float, rep: MetricsReport | None) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_HEADER)
        if rep is None:
            w.writerow([step, f"{loss:.10g}", "", "", ""])
        else:
            w.writerow([step, f"{loss:.10g}", f"{rep.accuracy:.10g}", f"{rep.cross_entropy:.10g}",
                        f"{rep.perplexity:.10g}"])


def train(model: Encoder, train_seqs: Sequence[TokenSequence], cfg: TrainConfig,
          val_seqs: Sequence[TokenSequence] | None = None, out_dir=None) -> TrainResult:
    """Pretrain ``model`` in place with the masked-token objective.

    With ``out_dir`` set, ``metrics.csv`` rows and ``model.b2v`` checkpoints
    are written at each evaluation.
    """
    if not train_seqs:
        raise ValueError("empty training split")
    seqs = [s.trimmed() for s in train_seqs]
    val = [s.trimmed() for s in val_seqs] if val_seqs else None
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.weights, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").unlink(missing_ok=True)
    res = TrainResult(model)
    vocab_size = model.cfg.vocab_size
    started = time.perf_counter()
    window_losses: list[float] = []

    def evaluate_now():
        loss_avg = float(np.mean(window_losses)) if window_losses else float("nan")
        window_losses.clear()
        rep = evaluate(model, val, cfg.eval_mask_seed, cfg.mask_rate) if val else None
        if rep is not None:
            res.evals.append((res.steps, rep))
            log.info("step %d loss %.4f acc %.4f ppl %.4f", res.steps, loss_avg, rep.accuracy, rep.perplexity)
        if out is not None:
            _write_metrics_row(out / "metrics.csv", res.steps, loss_avg, rep)
            model.save(out / "model.b2v")

    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        for start in range(0, len(order), cfg.effective_batch):
            batch = [apply_mlm_mask(seqs[i], rng, cfg.mask_rate, vocab_size)
                     for i in order[start:start + cfg.effective_batch]]
            loss = train_step(model, opt, batch, cfg.micro_batch, rng)
            if math.isnan(loss):
                continue
            res.steps += 1
            res.losses.append(loss)
            window_losses.append(loss)
            if cfg.eval_every and res.steps % cfg.eval_every == 0:
                evaluate_now()
            if cfg.max_steps is not None and res.steps >= cfg.max_steps:
                done = True
            elif cfg.time_budget_s is not None and time.perf_counter() - started > cfg.time_budget_s:
                log.warning("time budget reached after %d steps", res.steps)
                done = True
            if done:
                break
        res.epochs_run = epoch + 1
        if not cfg.eval_every or done:
            evaluate_now()
        if done:
            break
    res.seconds = time.perf_counter() - started
    return res


def masked_predictions(model: Encoder, seq: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    """Per masked position: ``(nll, correct)`` under ``model`` in eval mode."""
    mask = seq.labels != IGNORE
    if not mask.any():
        return np.zeros(0), np.zeros(0, dtype=bool)
    logits = model.logits(model.forward(seq.ids, seq.valid)).data[mask]
    targets = seq.labels[mask]
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    nll = lse - logits[np.arange(len(targets)), targets]
    return nll, logits.argmax(axis=1) == targets


def evaluate(model: Encoder, seqs: Sequence[TokenSequence], mask_seed: int = 1234,
             mask_rate: float = 0.15) -> MetricsReport:
    """Masked-token accuracy, cross-entropy and perplexity.

    Sequence ``i`` is masked with a generator seeded by ``(mask_seed, i)``,
    so results depend only on the model, the data and the seed.
    """
    if not seqs:
        raise ValueError("empty validation split")
    nlls, hits = [], []
    for i, seq in enumerate(seqs):
        seq = seq.trimmed() if seq.labels is None else seq
        masked = seq if seq.labels is not None else apply_mlm_mask(
            seq, np.random.default_rng([mask_seed, i]), mask_rate, model.cfg.vocab_size)
        nll, hit = masked_predictions(model, masked)
        nlls.append(nll)
        hits.append(hit)
    nll = np.concatenate(nlls)
    if nll.size == 0:
        raise ValueError("no masked positions in validation split")
    ce = float(nll.mean())
    return MetricsReport(accuracy=float(np.concatenate(hits).mean()), cross_entropy=ce,
                         perplexity=math.exp(ce), n_masked=int(nll.size), n_sequences=len(seqs))


def write_summary(path, result: TrainResult, cfg: TrainConfig) -> None:
    final = result.evals[-1][1].to_dict() if result.evals else None
    summary = {"train_config": asdict(cfg), "steps": result.steps, "epochs_run": result.epochs_run,
               "seconds": result.seconds, "final_loss": result.losses[-1] if result.losses else None,
               "final_eval": final}
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
