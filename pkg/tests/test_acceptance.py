"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the
"acceptance criteria" section at the end of the pytest run.
"""
import math
import time

import numpy as np
import pytest

from playerembed import analysis as A
from playerembed import pipeline as P
from playerembed import tensor as T
from playerembed.encoder import ModelConfig, build_attention_pattern, windowed_attention
from playerembed.events import DEFAULT_GAP_MS, group_by_player, sessionize
from playerembed.synthgen import bundled_config
from playerembed.tensor import Tensor, grad_check
from playerembed.tokenizer import IGNORE, MASK_ID, N_SPECIAL, TokenSequence, apply_mlm_mask
from playerembed.trainer import AdamW, train_step

from conftest import record
from test_encoder import dense_attention, encoder_gradcheck, random_case, reference_mask
from test_events import check_session_invariants, random_stream
from test_tensor import OPS

NOISE_SEEDS = (0, 1, 2)
NOISE_LEVELS = (0.0, 0.25, 0.5)


@pytest.fixture(scope="module")
def default_prep():
    return P.prepare(bundled_config("default"))


@pytest.fixture(scope="module")
def default_runs(default_prep):
    """One desk-scale training run per seed on the default corpus."""
    runs = {}
    for seed in NOISE_SEEDS:
        t0 = time.perf_counter()
        res = P.desk_train(default_prep, seed=seed)
        runs[seed] = (res, time.perf_counter() - t0)
    return runs


def test_c01_gradcheck_suite():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    errors = {}
    for name, (fn, shapes) in OPS.items():
        errors[name] = grad_check(fn, [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes])
    table = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
    errors["embedding"] = grad_check(lambda t: T.embedding(t, np.array([0, 3, 3, 6])), [table])
    logits = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    tgt, mask = rng.integers(0, 5, 6), np.array([1, 0, 1, 1, 0, 1], dtype=bool)
    errors["cross_entropy_masked"] = grad_check(lambda z: T.cross_entropy_masked(z, tgt, mask), [logits])
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    errors["dropout"] = grad_check(lambda a: T.dropout(a, 0.3, np.random.default_rng(2)), [x])
    for d in (1, 2, 3):
        pat = build_attention_pattern(14, 4, d, (0, 5), validity=np.arange(14) < 12)
        qkv = [Tensor(rng.standard_normal((14, 6)), requires_grad=True) for _ in range(3)]
        errors[f"windowed_attention_d{d}"] = grad_check(lambda a, b, c: windowed_attention(a, b, c, pat, 2), qkv)
    block = ModelConfig(vocab_size=11, hidden_layers=1, heads=1, hidden_dim=8, block_size=16, window=4,
                        dropout=0.0)
    errors["encoder_block"], bias1 = encoder_gradcheck(rng, block)
    wide = ModelConfig(vocab_size=13, hidden_layers=2, heads=2, hidden_dim=8, block_size=24, window=2,
                       dilation=3, global_positions=(0, 4), dropout=0.0)
    errors["encoder_two_blocks_dilated"], bias2 = encoder_gradcheck(rng, wide, n=24, n_valid=21)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and max(bias1, bias2) < 1e-10 and elapsed < 300
    record(1, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e}, "
                  f"key-bias grad {max(bias1, bias2):.1e}, {elapsed:.1f}s")
    assert ok


def test_c02_attention_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        n, w, d, g, valid = random_case(rng, 128)
        heads = int(rng.choice([1, 2, 4]))
        q, k, v = (rng.standard_normal((n, 4 * heads)) for _ in range(3))
        got = windowed_attention(Tensor(q), Tensor(k), Tensor(v), build_attention_pattern(n, w, d, g, valid),
                                 heads).data
        want = dense_attention(q, k, v, reference_mask(n, w, d, g, valid), heads)
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst < 1e-6
    record(2, ok, f"200 configs, max abs diff {worst:.2e}")
    assert ok


def test_c03_linear_scaling():
    ns = (256, 512, 1024, 2048)
    counts = {n: build_attention_pattern(n, 64, 1, (0,)).allowed_count() for n in ns}
    ratios = [counts[2 * n] / counts[n] for n in ns[:-1]]
    ok = max(ratios) <= 2.1
    record(3, ok, "count(2n)/count(n) = " + ", ".join(f"{r:.3f}" for r in ratios) + " (dense 4.0)")
    assert ok


def test_c04_metric_identity(default_runs):
    res, _ = default_runs[0]
    reports = [rep for _, rep in res.evals]
    worst = max(abs(r.perplexity - math.exp(r.cross_entropy)) for r in reports)
    anchor = math.exp(0.149)
    ok = worst <= 1e-9 and abs(anchor - 1.161) < 5e-4
    record(4, ok, f"{len(reports)} eval passes, max |ppl - exp(ce)| {worst:.1e}; exp(0.149) = {anchor:.4f}")
    assert ok


def test_c05_desk_training(default_prep, default_runs):
    res, seconds = default_runs[0]
    final = res.evals[-1][1]
    ok = (default_prep.n_sessions >= 2000 and len(default_prep.vocab) <= 512 and final.accuracy >= 0.60
          and final.perplexity <= 3.3 and seconds <= 7200)
    record(5, ok, f"{default_prep.n_sessions} sessions, vocab {len(default_prep.vocab)}, "
                  f"acc {final.accuracy:.4f}, ppl {final.perplexity:.4f}, {seconds:.0f}s")
    assert ok


def test_c06_accumulation_equivalence(default_prep):
    cfg = ModelConfig.preset("small", len(default_prep.vocab), dropout=0.0)
    seqs = [s.trimmed() for s in P.encode_docs(default_prep.train[:16], default_prep.vocab, cfg.block_size)]
    rng = np.random.default_rng(6)
    batch = [apply_mlm_mask(s, rng, 0.15, cfg.vocab_size) for s in seqs]
    states = []
    for micro in (4, 16):
        from playerembed.encoder import Encoder
        model = Encoder(cfg, seed=6)
        train_step(model, AdamW(model.weights, lr=1e-3), batch, micro, None)
        states.append(model.state())
    diff = max(float(np.abs(states[0][k] - states[1][k]).max()) for k in states[0])
    ok = diff < 1e-10
    record(6, ok, f"4x4 vs 1x16, max param diff {diff:.1e}")
    assert ok


def test_c07_sessionization(default_prep):
    rng = np.random.default_rng(7)
    for _ in range(1000):
        gap = int(rng.choice([1, 60_000, DEFAULT_GAP_MS]))
        stream = random_stream(rng, gap)
        check_session_invariants(stream, sessionize(stream, gap), gap)
    corpus = default_prep.corpus
    mismatched = [pid for pid, evs in group_by_player(corpus.events).items()
                  if [len(s.events) for s in sessionize(evs)] != corpus.session_lengths[pid]]
    ok = not mismatched and default_prep.n_sessions == corpus.n_sessions
    record(7, ok, f"1000 random streams ok; generator sessions {default_prep.n_sessions}/{corpus.n_sessions}, "
                  f"{len(mismatched)} players mismatched")
    assert ok


def test_c08_masking_statistics():
    rng = np.random.default_rng(8)
    V = 60
    cand = sel = to_mask = to_rand = kept = special_hits = 0
    while cand < 100_000:
        n = 512
        ids = rng.integers(N_SPECIAL, V, n)
        ids[rng.random(n) < 0.1] = rng.integers(0, N_SPECIAL)
        valid = np.ones(n, dtype=bool)
        valid[n - int(rng.integers(0, 50)):] = False
        seq = TokenSequence(ids, valid)
        out = apply_mlm_mask(seq, rng, 0.15, V)
        is_cand = valid & (ids >= N_SPECIAL)
        picked = out.labels != IGNORE
        special_hits += int((picked & ~is_cand).sum() + ((out.ids != ids) & ~is_cand).sum())
        cand += int(is_cand.sum())
        sel += int(picked.sum())
        to_mask += int((picked & (out.ids == MASK_ID)).sum())
        same = picked & (out.ids == ids)
        kept += int(same.sum())
        to_rand += int((picked & (out.ids != MASK_ID) & (out.ids != ids)).sum())
    rate = sel / cand
    # a random replacement equal to the original token counts as "unchanged"
    p_collide = 1.0 / (V - N_SPECIAL)
    f_mask, f_rand, f_keep = to_mask / sel, to_rand / sel, kept / sel
    ok = (abs(rate - 0.15) <= 0.01 and abs(f_mask - 0.8) <= 0.02 and abs(f_rand - 0.1 * (1 - p_collide)) <= 0.02
          and abs(f_keep - (0.1 + 0.1 * p_collide)) <= 0.02 and special_hits == 0)
    record(8, ok, f"{cand} candidates, rate {rate:.4f}, split {f_mask:.3f}/{f_rand:.3f}/{f_keep:.3f}, "
                  f"specials touched {special_hits}")
    assert ok


def test_c09_archetype_recovery():
    t0 = time.perf_counter()
    prep = P.prepare(bundled_config("four"))
    res = P.desk_train(prep, seed=0)
    run = P.archetype_recovery(prep, res.model, k=4, seed=0)
    seconds = time.perf_counter() - t0
    ok = run.ari >= 0.7 and seconds <= 4 * 3600
    record(9, ok, f"{len(prep.docs)} players, ARI {run.ari:.3f}, {seconds:.0f}s")
    assert ok


def test_c10_em_and_tsne_monotone():
    rng = np.random.default_rng(10)
    worst = worst_ll = math.inf
    for seed in range(100):
        k_true = int(rng.integers(2, 6))
        centers = rng.uniform(-10, 10, (k_true, 2))
        X = np.vstack([rng.normal(c, rng.uniform(0.3, 2.0), (40, 2)) for c in centers])
        rep = A.gmm_fit(X, k=int(rng.integers(2, 9)), seed=seed, restarts=1)
        worst = min(worst, float(np.diff(rep.objective_history).min(initial=0.0)))
        worst_ll = min(worst_ll, float(np.diff(rep.ll_history).min(initial=0.0)))
    kl_pairs = []
    for seed in range(5):
        X = np.vstack([rng.normal(0, 1, (40, 8)), rng.normal(6, 1, (40, 8))])
        r = A.tsne_embed(X, perplexity=20, n_iter=500, seed=seed)
        kl_pairs.append((r.kl_initial, r.kl_final))
    ok = worst >= -1e-9 and all(f < i for i, f in kl_pairs)
    record(10, ok, f"100 EM runs, min step: objective {worst:.2e}, plain loglik {worst_ll:.2e}; t-SNE KL "
                   + ", ".join(f"{i:.2f}->{f:.2f}" for i, f in kl_pairs))
    assert ok


def test_c11_noise_harness(default_prep, default_runs):
    acc = {p: [] for p in NOISE_LEVELS}
    for seed in NOISE_SEEDS:
        model = default_runs[seed][0].model
        for p in NOISE_LEVELS:
            rep = P.evaluate_docs(model, default_prep.val, default_prep.vocab, noise_p=p, noise_seed=seed)
            assert rep.n_masked > 0 and rep.perplexity == math.exp(rep.cross_entropy)
            acc[p].append(rep.accuracy)
    means = {p: float(np.mean(v)) for p, v in acc.items()}
    ok = means[0.0] >= means[0.5] - 0.02
    record(11, ok, "mean acc " + ", ".join(f"p={p}: {m:.4f}" for p, m in means.items()))
    assert ok


def test_c12_preprocessing_reduction(default_prep):
    r = default_prep.stats.reduction
    ok = r >= 0.9
    record(12, ok, f"fields {default_prep.stats.fields_in} -> {default_prep.stats.fields_out}, reduction {r:.4f}")
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
