import csv
import math

import numpy as np
import pytest

from playerembed.encoder import Encoder, ModelConfig
from playerembed.tokenizer import IGNORE, N_SPECIAL, TokenSequence, apply_mlm_mask
from playerembed.trainer import (METRICS_HEADER, AdamW, TrainConfig, TrainingDiverged, evaluate, train,
                                 train_step)


def tiny_model(V=14, seed=0, **kw):
    cfg = ModelConfig(vocab_size=V, hidden_layers=1, heads=2, hidden_dim=16, block_size=32, window=4,
                      dropout=kw.pop("dropout", 0.0), **kw)
    return Encoder(cfg, seed=seed)


def pattern_corpus(n=50, length=20, V=14, seed=0):
    """Sequences with a learnable periodic structure."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        start = int(rng.integers(0, V - N_SPECIAL))
        ids = N_SPECIAL + (start + np.arange(length)) % (V - N_SPECIAL)
        valid = np.ones(length, dtype=bool)
        k = int(rng.integers(0, 4))
        if k:
            valid[-k:] = False
            ids[-k:] = 0
        out.append(TokenSequence(ids.astype(np.int64), valid))
    return out


def test_effective_batch_default():
    assert TrainConfig().effective_batch == 16
    assert TrainConfig().lr == 2e-5


def test_lr_zero_leaves_weights_bit_identical():
    model = tiny_model()
    before = {k: v.copy() for k, v in model.state().items()}
    train(model, pattern_corpus(20), TrainConfig(epochs=2, lr=0.0))
    for k, v in model.state().items():
        assert np.array_equal(v, before[k])


def test_training_reduces_loss():
    model = tiny_model()
    data = pattern_corpus(50)
    res = train(model, data, TrainConfig(epochs=200, micro_batch=5, accumulation=2, lr=3e-3, max_steps=200))
    assert res.steps == 200
    assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])


def test_accumulation_equivalence():
    data = pattern_corpus(16, seed=3)
    rng = np.random.default_rng(0)
    batch = [apply_mlm_mask(s.trimmed(), rng, 0.3, 14) for s in data]
    models = []
    for micro in (4, 16, 1):
        m = tiny_model(seed=7)
        opt = AdamW(m.weights, lr=1e-3)
        train_step(m, opt, batch, micro, None)
        models.append(m.state())
    for other in models[1:]:
        for k in models[0]:
            assert np.abs(models[0][k] - other[k]).max() < 1e-10


def test_adamw_decoupled_decay():
    from playerembed.tensor import Tensor
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * 0.95, -4.0 * 0.95])
    p.grad = np.array([1.0, -1.0])
    opt.step()
    # first nonzero Adam step moves each coordinate by about lr
    assert p.data[0] < 1.9 * 0.95 and p.data[1] > -3.8 * 0.95 * 1.0 - 0.2


def test_non_finite_loss_aborts():
    model = tiny_model()
    model.weights["tok_emb"].data[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train(model, pattern_corpus(8), TrainConfig(epochs=1))


def test_empty_splits_error():
    with pytest.raises(ValueError):
        train(tiny_model(), [], TrainConfig())
    with pytest.raises(ValueError):
        evaluate(tiny_model(), [])


def test_evaluate_deterministic_and_exp_identity():
    model = tiny_model()
    data = pattern_corpus(12)
    a, b = evaluate(model, data, mask_seed=5), evaluate(model, data, mask_seed=5)
    assert a == b
    assert a.perplexity == math.exp(a.cross_entropy)
    assert 0 <= a.accuracy <= 1 and a.n_masked > 0


def test_evaluate_counts_only_masked_positions():
    model = tiny_model()
    seq = pattern_corpus(1)[0].trimmed()
    labels = np.full(len(seq), IGNORE)
    labels[3] = seq.ids[3]
    rep = evaluate(model, [TokenSequence(seq.ids, seq.valid, labels)])
    assert rep.n_masked == 1


def test_uniform_model_metrics():
    V = 100
    cfg = ModelConfig(vocab_size=V, hidden_layers=1, heads=2, hidden_dim=16, block_size=64, window=8)
    model = Encoder(cfg, seed=0)
    # input-independent, near-uniform logits (tied embeddings would otherwise
    # favour copying unchanged tokens)
    rng = np.random.default_rng(1)
    model.weights["tok_emb"].data[:] = 0.0
    model.weights["mlm.bias"].data[:] = rng.normal(0, 1e-3, V)
    seqs = [TokenSequence(rng.integers(N_SPECIAL, V, 64), np.ones(64, dtype=bool)) for _ in range(60)]
    rep = evaluate(model, seqs, mask_rate=0.5)
    assert rep.cross_entropy == pytest.approx(math.log(V), rel=0.02)
    assert abs(rep.accuracy - 1 / V) < 0.01


def test_perplexity_of_zero_ce_is_one():
    from playerembed.trainer import MetricsReport
    assert math.exp(0.0) == 1.0
    rep = MetricsReport(1.0, 0.0, math.exp(0.0), 1, 1)
    assert rep.perplexity == 1.0


def test_metrics_csv_and_checkpoint(tmp_path):
    model = tiny_model()
    data = pattern_corpus(10)
    res = train(model, data, TrainConfig(epochs=2, lr=1e-3, eval_every=1), val_seqs=data[:4], out_dir=tmp_path)
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == METRICS_HEADER
    assert len(rows) == 1 + res.steps == 1 + len(res.evals)
    for row in rows[1:]:
        assert float(row[4]) == pytest.approx(math.exp(float(row[3])), rel=1e-9)
    back = Encoder.load(tmp_path / "model.b2v")
    for k, v in back.state().items():
        assert np.array_equal(v, model.state()[k])


def test_training_same_seed_reproducible():
    a, b = tiny_model(dropout=0.1), tiny_model(dropout=0.1)
    cfg = TrainConfig(epochs=2, lr=1e-3, seed=4)
    train(a, pattern_corpus(20), cfg)
    train(b, pattern_corpus(20), cfg)
    for k in a.state():
        assert np.array_equal(a.state()[k], b.state()[k])
