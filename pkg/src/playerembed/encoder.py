"""Transformer encoder with dilated sliding-window plus global attention.

Attention never materializes an n x n score matrix for local queries.
The band is evaluated as dense blocks: every chunk of ``window / 2``
queries is scored against the three key chunks around it, so work per
query is ``1.5 * window + |globals|`` scores.  Dilation is handled by
splitting positions into residue classes, inside which the band is
contiguous.  Global queries attend densely, adding ``|globals| * n``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class SequenceTooLongError(ValueError):
    pass


PRESETS = {
    # layers, heads, hidden, block size
    "small": (2, 2, 128, 1024),
    "medium": (6, 6, 384, 2048),
    "large": (12, 12, 768, 4096),
}


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_layers: int = 2
    heads: int = 2
    hidden_dim: int = 128
    block_size: int = 1024
    window: int = 64
    dilation: int = 1
    global_positions: tuple[int, ...] = (0,)
    ffn_mult: int = 4
    dropout: float = 0.1
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        self.global_positions = tuple(int(g) for g in self.global_positions)
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.window % 2 or self.window < 0:
            raise ConfigError(f"window must be even and >= 0, got {self.window}")
        if self.dilation < 1:
            raise ConfigError("dilation must be >= 1")
        if self.window * self.dilation >= self.block_size:
            raise ConfigError(f"window*dilation ({self.window * self.dilation}) must be < block_size "
                              f"({self.block_size})")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @classmethod
    def preset(cls, name: str, vocab_size: int, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        layers, heads, hidden, block = PRESETS[name]
        kw = dict(hidden_layers=layers, heads=heads, hidden_dim=hidden, block_size=block)
        kw.update(overrides)
        return cls(vocab_size=vocab_size, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_positions"] = list(self.global_positions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ------------------------------------------------------------------ pattern

@dataclass
class AttentionPattern:
    """Allowed (query, key) pairs for one sequence.

    ``local_idx[i, s]`` is the key of band slot ``s`` for query ``i`` (or the
    sentinel ``n`` when the slot is not allowed); ``local_ok`` marks allowed
    band slots.  Global positions take part through separate slots:
    ``globals_`` are the valid global positions, non-global valid queries
    attend all of them, and global queries attend every valid key.
    """

    n: int
    window: int
    dilation: int
    valid: np.ndarray
    globals_: np.ndarray
    local_idx: np.ndarray
    local_ok: np.ndarray
    is_global: np.ndarray
    offsets: np.ndarray = field(repr=False, default=None)
    _chunks: object = field(repr=False, default=None)

    @property
    def chunks(self) -> "_ChunkLayout":
        if self._chunks is None:
            self._chunks = _chunk_layout(self)
        return self._chunks

    @property
    def global_key_ok(self) -> np.ndarray:
        """(n, |G|) mask of allowed global-key slots."""
        rows = self.valid & ~self.is_global
        return np.repeat(rows[:, None], len(self.globals_), axis=1)

    def allowed_count(self) -> int:
        g = len(self.globals_)
        n_valid = int(self.valid.sum())
        rows = int((self.valid & ~self.is_global).sum())
        return int(self.local_ok.sum()) + rows * g + g * n_valid

    def allowed_sets(self) -> list[set[int]]:
        out = []
        for i in range(self.n):
            if not self.valid[i]:
                out.append(set())
            elif self.is_global[i]:
                out.append(set(np.flatnonzero(self.valid).tolist()))
            else:
                s = set(self.local_idx[i][self.local_ok[i]].tolist())
                out.append(s | set(self.globals_.tolist()))
        return out

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n), dtype=bool)
        for i, keys in enumerate(self.allowed_sets()):
            dense[i, list(keys)] = True
        return dense


def build_attention_pattern(n: int, window: int, dilation: int = 1, globals_=(), validity=None,
                            strict: bool = False) -> AttentionPattern:
    if n < 1:
        raise ConfigError("sequence length must be >= 1")
    if window % 2 or window < 0:
        raise ConfigError(f"window must be even and >= 0, got {window}")
    if dilation < 1:
        raise ConfigError("dilation must be >= 1")
    if strict and window * dilation >= n:
        raise ConfigError(f"window*dilation ({window * dilation}) >= sequence length {n}")
    valid = np.ones(n, dtype=bool) if validity is None else np.asarray(validity, dtype=bool)[:n]
    if len(valid) != n:
        raise ConfigError("validity length does not match n")
    is_global = np.zeros(n, dtype=bool)
    g = np.array(sorted({int(x) for x in globals_ if 0 <= int(x) < n}), dtype=np.int64)
    if len(g):
        g = g[valid[g]]
        is_global[g] = True
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=np.int64) * dilation
    idx = np.arange(n)[:, None] + offsets[None, :]
    inside = (idx >= 0) & (idx < n)
    safe = np.where(inside, idx, 0)
    ok = inside & valid[:, None] & ~is_global[:, None] & valid[safe] & ~is_global[safe]
    local_idx = np.where(ok, idx, n)
    return AttentionPattern(n, window, dilation, valid, g, local_idx, ok, is_global, offsets)


# ---------------------------------------------------------------- attention

@dataclass
class _ChunkLayout:
    """Band as dense blocks: positions with equal residue mod ``dilation``
    form undilated streams; each stream is cut into chunks of ``c`` queries
    whose keys lie in the three surrounding chunks.  ``q_idx`` (d, nc, c)
    and ``k_idx`` (d, nc, 3c) hold original positions, sentinel ``n``.
    """

    c: int
    q_idx: np.ndarray
    k_idx: np.ndarray
    ok: np.ndarray


def _chunk_layout(p: AttentionPattern) -> _ChunkLayout:
    n, d, half = p.n, p.dilation, p.window // 2
    c = max(half, 1)
    L = -(-n // d)
    nc = -(-L // c)
    t = np.arange(nc * c)
    stream = np.arange(d)[:, None] + d * t[None, :]
    stream = np.where(stream < n, stream, n)
    q_idx = stream.reshape(d, nc, c)
    kt = (np.arange(nc)[:, None] - 1) * c + np.arange(3 * c)[None, :]
    kt_ok = (kt >= 0) & (kt < nc * c)
    k_idx = np.where(kt_ok[None], stream[:, np.clip(kt, 0, nc * c - 1)], n)
    qt = t.reshape(nc, c)
    near = np.abs(qt[:, :, None] - kt[:, None, :]) <= half
    usable = np.append(p.valid & ~p.is_global, False)
    ok = near[None] & usable[q_idx][..., None] & usable[k_idx][:, :, None, :]
    return _ChunkLayout(c, q_idx, k_idx, ok)


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, h, d // h).transpose(1, 0, 2)


def _merge(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * dh))


def _masked_softmax(s: np.ndarray, ok: np.ndarray) -> np.ndarray:
    s = np.where(ok, s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(ok, np.exp(s - m), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return e / np.where(z > 0, z, 1.0)


def _softmax_back(a: np.ndarray, da: np.ndarray) -> np.ndarray:
    return a * (da - (a * da).sum(axis=-1, keepdims=True))


def _pad_row(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.zeros((x.shape[0], 1, x.shape[2]))], axis=1)


def _scatter_keys(dest: np.ndarray, k_idx: np.ndarray, blocks: np.ndarray, c: int) -> None:
    # blocks: (h, d, nc, 3c, dh).  Key block b of chunk j is stream chunk
    # j - 1 + b, so within one b every real index is distinct.
    for b in range(3):
        dest[:, k_idx[:, :, b * c:(b + 1) * c]] += blocks[:, :, :, b * c:(b + 1) * c]


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, pattern: AttentionPattern, heads: int) -> Tensor:
    """Multi-head attention restricted to ``pattern``.

    Inputs are (n, hidden) projections; heads are split internally.  Scores
    are scaled by 1/sqrt(head_dim).  Queries with no allowed keys (padding)
    produce zeros.
    """
    n, dm = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise T.ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if pattern.n != n:
        raise T.ShapeError(f"pattern length {pattern.n} != sequence length {n}")
    h = heads
    dh = dm // h
    sc = 1.0 / math.sqrt(dh)
    lay = pattern.chunks
    qi, ki, c = lay.q_idx, lay.k_idx, lay.c
    G = pattern.globals_
    ng = len(G)
    Q, K, V = _heads(q.data, h), _heads(k.data, h), _heads(v.data, h)
    Qx, Kx, Vx = _pad_row(Q), _pad_row(K), _pad_row(V)
    Qc, Kc, Vc = Qx[:, qi], Kx[:, ki], Vx[:, ki]
    s = Qc @ Kc.swapaxes(-1, -2) * sc                      # (h, d, nc, c, 3c)
    ok = lay.ok
    if ng:
        Kg, Vg = K[:, G], V[:, G]                          # (h, g, dh)
        Kg5, Vg5 = Kg[:, None, None], Vg[:, None, None]
        s = np.concatenate([s, Qc @ Kg5.swapaxes(-1, -2) * sc], axis=-1)
        ok = np.concatenate([ok, np.broadcast_to(_row_ok(pattern, qi), ok.shape[:-1] + (ng,))], axis=-1)
    a = _masked_softmax(s, ok[None])
    w3 = 3 * c
    oc = a[..., :w3] @ Vc
    if ng:
        oc += a[..., w3:] @ Vg5
    outx = np.zeros((h, n + 1, dh))
    outx[:, qi] = oc
    out = outx[:, :n]
    if ng:
        ag = _masked_softmax(Q[:, G] @ K.swapaxes(-1, -2) * sc, pattern.valid[None, None, :])
        out[:, G] = ag @ V

    def back(gout):
        dO = _heads(gout, h)
        dOc = _pad_row(dO)[:, qi]
        dS = dOc @ Vc.swapaxes(-1, -2)
        if ng:
            dS = np.concatenate([dS, dOc @ Vg5.swapaxes(-1, -2)], axis=-1)
        dS = _softmax_back(a, dS) * sc
        dSl = dS[..., :w3]
        dQx = np.zeros((h, n + 1, dh))
        dKx = np.zeros((h, n + 1, dh))
        dVx = np.zeros((h, n + 1, dh))
        dQc = dSl @ Kc
        if ng:
            dQc += dS[..., w3:] @ Kg5
        dQx[:, qi] = dQc
        _scatter_keys(dKx, ki, dSl.swapaxes(-1, -2) @ Qc, c)
        _scatter_keys(dVx, ki, a[..., :w3].swapaxes(-1, -2) @ dOc, c)
        dQ, dK, dV = dQx[:, :n], dKx[:, :n], dVx[:, :n]
        if ng:
            dSg, ag_l = dS[..., w3:], a[..., w3:]
            dK[:, G] += np.einsum("hdjcg,hdjce->hge", dSg, Qc)
            dV[:, G] += np.einsum("hdjcg,hdjce->hge", ag_l, dOc)
            dOg = dO[:, G]
            dSgq = _softmax_back(ag, dOg @ V.swapaxes(-1, -2)) * sc
            dQ[:, G] += dSgq @ K
            dK += dSgq.swapaxes(-1, -2) @ Q[:, G]
            dV += ag.swapaxes(-1, -2) @ dOg
        return _merge(dQ), _merge(dK), _merge(dV)

    return T.custom("windowed_attention", (q, k, v), _merge(out), back)


def _row_ok(pattern: AttentionPattern, qi: np.ndarray) -> np.ndarray:
    rows = np.append(pattern.valid & ~pattern.is_global, False)
    return rows[qi][..., None]


# ------------------------------------------------------------------ weights

def init_weights(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = cfg.hidden_dim, cfg.hidden_dim * cfg.ffn_mult

    def normal(*shape):
        return rng.normal(0.0, cfg.init_std, size=shape)

    w = {
        "tok_emb": normal(cfg.vocab_size, d),
        "pos_emb": normal(cfg.block_size, d),
        "emb_ln.gain": np.ones(d),
        "emb_ln.bias": np.zeros(d),
    }
    for i in range(cfg.hidden_layers):
        p = f"layers.{i}."
        for name in ("q", "k", "v", "o"):
            w[p + f"attn.w{name}"] = normal(d, d)
            w[p + f"attn.b{name}"] = np.zeros(d)
        w[p + "ln1.gain"], w[p + "ln1.bias"] = np.ones(d), np.zeros(d)
        w[p + "ffn.w1"], w[p + "ffn.b1"] = normal(d, f), np.zeros(f)
        w[p + "ffn.w2"], w[p + "ffn.b2"] = normal(f, d), np.zeros(d)
        w[p + "ln2.gain"], w[p + "ln2.bias"] = np.ones(d), np.zeros(d)
    w["mlm.bias"] = np.zeros(cfg.vocab_size)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in w.items()}


def encoder_forward(ids, validity, cfg: ModelConfig, weights: dict[str, Tensor],
                    rng: np.random.Generator | None = None) -> Tensor:
    """Final hidden states, shape (n, hidden_dim).

    Dropout is applied only when ``rng`` is given.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    if n > cfg.block_size:
        raise SequenceTooLongError(f"sequence of length {n} exceeds block size {cfg.block_size}")
    pattern = build_attention_pattern(n, cfg.window, cfg.dilation, cfg.global_positions, validity)
    w = weights
    p_drop = cfg.dropout if rng is not None else 0.0
    x = T.add(T.embedding(w["tok_emb"], ids), T.embedding(w["pos_emb"], np.arange(n)))
    x = T.layer_norm(x, w["emb_ln.gain"], w["emb_ln.bias"], cfg.ln_eps)
    x = T.dropout(x, p_drop, rng)
    for i in range(cfg.hidden_layers):
        p = f"layers.{i}."
        q = T.add(T.matmul(x, w[p + "attn.wq"]), w[p + "attn.bq"])
        k = T.add(T.matmul(x, w[p + "attn.wk"]), w[p + "attn.bk"])
        v = T.add(T.matmul(x, w[p + "attn.wv"]), w[p + "attn.bv"])
        ctx = windowed_attention(q, k, v, pattern, cfg.heads)
        a = T.add(T.matmul(ctx, w[p + "attn.wo"]), w[p + "attn.bo"])
        x = T.layer_norm(T.add(x, T.dropout(a, p_drop, rng)), w[p + "ln1.gain"], w[p + "ln1.bias"], cfg.ln_eps)
        hdn = T.gelu(T.add(T.matmul(x, w[p + "ffn.w1"]), w[p + "ffn.b1"]))
        f = T.add(T.matmul(hdn, w[p + "ffn.w2"]), w[p + "ffn.b2"])
        x = T.layer_norm(T.add(x, T.dropout(f, p_drop, rng)), w[p + "ln2.gain"], w[p + "ln2.bias"], cfg.ln_eps)
    return x


def mlm_logits(hidden: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """Project onto the vocabulary with the (tied) token embedding table."""
    return T.add(T.matmul_t(hidden, weights["tok_emb"]), weights["mlm.bias"])


class Encoder:
    def __init__(self, cfg: ModelConfig, weights: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.weights = weights if weights is not None else init_weights(cfg, seed)

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.weights.values())

    def forward(self, ids, validity=None, rng=None) -> Tensor:
        if validity is None:
            validity = np.ones(len(ids), dtype=bool)
        return encoder_forward(ids, validity, self.cfg, self.weights, rng)

    def logits(self, hidden: Tensor) -> Tensor:
        return mlm_logits(hidden, self.weights)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.weights.items()}

    def copy(self) -> "Encoder":
        return Encoder(replace(self.cfg), {k: Tensor(t.data.copy(), True, k) for k, t in self.weights.items()})

    def save(self, path) -> None:
        path = Path(path)
        save_tensors(path, self.state())
        config_path(path).write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Encoder":
        path = Path(path)
        cfg = ModelConfig.from_dict(json.loads(config_path(path).read_text()))
        raw = load_tensors(path)
        expected = init_weights(replace(cfg, init_std=0.0))
        missing = set(expected) - set(raw)
        if missing:
            raise ValueError(f"{path}: checkpoint lacks tensors {sorted(missing)[:5]}")
        for name, t in expected.items():
            if raw[name].shape != t.shape:
                raise ValueError(f"{path}: tensor {name} has shape {raw[name].shape}, expected {t.shape}")
        return cls(cfg, {k: Tensor(raw[k], True, k) for k in expected})


def config_path(checkpoint_path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.name + ".json")
