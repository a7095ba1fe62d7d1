"""Synthetic player event logs with ground-truth archetypes.

Each player draws an archetype from the mixture, then for every day of the
horizon a session count from a geometric law on {0, 1, ...} with parameter
``p_act``.  Session lengths (events per session) are geometric on
{1, 2, ...} with parameter ``p_len``.  Within a session, the next event
class follows a shared successor grammar with probability ``structure``
and is otherwise a free draw from the archetype's class rates (with fixed
purchase/social shares).  Inter-event gaps are exponential with a capped
tail, inter-session gaps always exceed the sessionization threshold, so
splitting at that threshold recovers the generated sessions exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import DEFAULT_CLASSES, DEFAULT_GAP_MS, RawEvent

DAY_MS = 24 * 3600 * 1000
DEFAULT_START_MS = 1_672_531_200_000  # 2023-01-01T00:00:00Z

_DEVICES = ("px7", "gs23", "ip14", "ip13", "rn12", "op11", "mi13", "tab8")
_OS = ("android_13", "android_14", "ios_16", "ios_17")
_LOCALES = ("en_US", "en_GB", "de_DE", "sv_SE", "es_ES", "fr_FR", "ja_JP", "pt_BR")
_NETWORKS = ("wifi", "lte", "5g", "offline")
NOISE_FIELDS = (
    "device_model", "os_version", "app_version", "sdk_version", "build_id", "carrier",
    "locale", "tz_offset", "screen_w", "screen_h", "install_days", "session_uuid",
    "event_uuid", "seq_no", "battery_pct", "free_mem_mb", "fps", "ping_ms", "network",
    "client_ts_ms",
)

# categorical field options and their default weights; prefixed identifiers
# get a random numeric suffix
DEFAULT_VALUES = {
    "app_start.entry_point": {"icon": 0.6, "push": 0.3, "deeplink": 0.1},
    "game_start.mode": {"classic": 0.7, "tournament": 0.2, "event": 0.1},
    "round_start.booster": {"none": 0.7, "hammer": 0.2, "bomb": 0.1},
    "purchase.item_id": {"gem_pack": 0.5, "coin_bundle": 0.3, "booster_pack": 0.2},
    "purchase.price_usd": {"0.99": 0.6, "4.99": 0.3, "19.99": 0.1},
    "social.action_id": {"friend_gift": 0.5, "friend_invite": 0.2, "guild_chat": 0.3},
    "reward.reward_type": {"coins": 0.6, "booster": 0.3, "life": 0.1},
    "collect.item_kind": {"utility": 0.5, "card": 0.3, "sticker": 0.2},
    "quest.quest_id": {"daily": 0.6, "event": 0.3, "story": 0.1},
    "notification.channel": {"push": 0.7, "inbox": 0.3},
}
_SUFFIXED = {"app_start.entry_point": {"push", "deeplink"}, "purchase.item_id": None,
             "social.action_id": None, "collect.item_kind": None, "quest.quest_id": None}

DEFAULT_GRAMMAR = {
    "app_start": "game_start", "game_start": "round_start", "round_start": "round_end",
    "round_end": "reward", "purchase": "collect", "quest": "reward",
}


@dataclass
class Archetype:
    name: str
    rates: dict[str, float]
    p_len: float
    p_act: float
    purchase: float = 0.0
    social: float = 0.0
    skill: float = 0.5
    structure: float = 0.0
    values: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if any(w < 0 for w in self.rates.values()) or not any(w > 0 for w in self.rates.values()):
            raise ValueError(f"archetype {self.name!r}: rates must be nonnegative with one positive")
        if not (0 < self.p_len <= 1 and 0 < self.p_act <= 1):
            raise ValueError(f"archetype {self.name!r}: p_len and p_act must lie in (0, 1]")
        if self.purchase < 0 or self.social < 0 or self.purchase + self.social >= 1:
            raise ValueError(f"archetype {self.name!r}: need purchase, social >= 0 and sum < 1")
        if not 0 <= self.structure <= 1 or not 0 <= self.skill <= 1:
            raise ValueError(f"archetype {self.name!r}: structure and skill must lie in [0, 1]")

    @property
    def mean_session_length(self) -> float:
        return 1.0 / self.p_len

    def class_probs(self, classes) -> np.ndarray:
        """Distribution of a free (non-grammar) class draw."""
        w = np.array([self.rates.get(c, 0.0) for c in classes], dtype=np.float64)
        p = w / w.sum() * (1.0 - self.purchase - self.social)
        idx = {c: i for i, c in enumerate(classes)}
        if self.purchase and "purchase" in idx:
            p[idx["purchase"]] += self.purchase
        if self.social and "social" in idx:
            p[idx["social"]] += self.social
        return p / p.sum()

    def expected_session_counts(self, classes, opener=None, grammar=None) -> np.ndarray:
        """Expected events of each class in one session.

        Classes follow a Markov chain (grammar successor with probability
        ``structure``, else a free draw) and session length is geometric, so
        the counts are ``start @ inv(I - (1 - p_len) M)``.
        """
        classes = list(classes)
        free = self.class_probs(classes)
        grammar = grammar or {}
        M = np.tile(free, (len(classes), 1))
        for a, b in grammar.items():
            if a in classes and b in classes:
                i = classes.index(a)
                M[i] *= 1.0 - self.structure
                M[i, classes.index(b)] += self.structure
        start = np.zeros(len(classes))
        if opener is not None:
            start[classes.index(opener)] = 1.0
        else:
            start = free
        return start @ np.linalg.inv(np.eye(len(classes)) - (1.0 - self.p_len) * M)


@dataclass
class GeneratorConfig:
    archetypes: list[Archetype]
    weights: list[float]
    players: int = 400
    days: int = 15
    seed: int = 0
    mean_interval_s: float = 20.0
    start_ms: int = DEFAULT_START_MS
    opener: str | None = "app_start"
    grammar: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_GRAMMAR))
    classes: tuple[str, ...] = DEFAULT_CLASSES
    gap_ms: int = DEFAULT_GAP_MS

    def __post_init__(self):
        if len(self.weights) != len(self.archetypes) or not self.archetypes:
            raise ValueError("need one mixture weight per archetype")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must be nonnegative and sum to 1, got {self.weights}")
        if self.players < 0 or self.days < 1:
            raise ValueError("players must be >= 0 and days >= 1")
        # max in-session gap stays strictly below the split threshold
        if self.mean_interval_s * 1000 >= self.gap_ms:
            raise ValueError("mean_interval_s must be well below the session gap")

    def expected_class_counts(self) -> dict[str, np.ndarray]:
        """Per archetype: expected events of each class per player.

        Ignores the forced session of otherwise inactive players.
        """
        out = {}
        for a in self.archetypes:
            sessions = self.days * (1.0 - a.p_act) / a.p_act
            out[a.name] = sessions * a.expected_session_counts(self.classes, self.opener, self.grammar)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratorConfig":
        obj = dict(obj)
        raw = obj.pop("archetypes")
        arch = [Archetype(**{k: v for k, v in a.items() if k != "weight"}) for a in raw]
        weights = obj.pop("weights", None)
        if weights is None:
            w = np.array([a.get("weight", 1.0) for a in raw], dtype=np.float64)
            weights = (w / w.sum()).tolist()
        if "classes" in obj:
            obj["classes"] = tuple(obj["classes"])
        return cls(archetypes=arch, weights=[float(w) for w in weights], **obj)

    @classmethod
    def load(cls, path, **overrides) -> "GeneratorConfig":
        obj = json.loads(Path(path).read_text())
        obj.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(obj)


def bundled_config_path(name: str = "default") -> Path:
    return Path(__file__).parent / "data" / f"generator_{name}.json"


def bundled_config(name: str = "default", **overrides) -> GeneratorConfig:
    return GeneratorConfig.load(bundled_config_path(name), **overrides)


def sample_session_length(p_len: float, rng: np.random.Generator) -> int:
    """Geometric draw on {1, 2, ...} with success probability ``p_len``."""
    if not 0 < p_len <= 1:
        raise ValueError(f"p_len must lie in (0, 1], got {p_len}")
    return int(rng.geometric(p_len))


@dataclass
class Corpus:
    events: list[RawEvent]
    labels: dict[str, str]
    session_lengths: dict[str, list[int]]

    @property
    def n_sessions(self) -> int:
        return sum(len(v) for v in self.session_lengths.values())

    def jsonl_lines(self):
        for ev in self.events:
            yield ev.to_json() + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"events": out / "events.jsonl", "labels": out / "labels.tsv",
                 "truth": out / "ground_truth.json"}
        with open(paths["events"], "w", encoding="utf-8") as fh:
            fh.writelines(self.jsonl_lines())
        with open(paths["labels"], "w", encoding="utf-8") as fh:
            for pid, name in sorted(self.labels.items()):
                fh.write(f"{pid}\t{name}\n")
        truth = {"n_players": len(self.labels), "n_sessions": self.n_sessions,
                 "n_events": len(self.events), "session_lengths": self.session_lengths}
        paths["truth"].write_text(json.dumps(truth, sort_keys=True) + "\n")
        return paths


class _Player:
    """Per-player generator state; all draws come from the player's own stream."""

    def __init__(self, cfg: GeneratorConfig, index: int):
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, index])
        self.pid = f"p{index:05d}"
        self.arch_index = int(self.rng.choice(len(cfg.archetypes), p=np.asarray(cfg.weights)))
        self.arch = cfg.archetypes[self.arch_index]
        self.free_probs = self.arch.class_probs(cfg.classes)
        self.seq = 0
        r = self.rng
        self.static = {
            "device_model": str(r.choice(_DEVICES)), "os_version": str(r.choice(_OS)),
            "app_version": f"5.{int(r.integers(0, 12))}.{int(r.integers(0, 9))}",
            "sdk_version": f"2.{int(r.integers(0, 6))}", "build_id": f"b{int(r.integers(1000, 9999))}",
            "carrier": f"c{int(r.integers(0, 40))}", "locale": str(r.choice(_LOCALES)),
            "tz_offset": int(r.integers(-8, 10)) * 60, "screen_w": int(r.choice([720, 1080, 1170, 1440])),
            "screen_h": int(r.choice([1600, 2340, 2532, 3200])), "install_days": int(r.integers(0, 900)),
        }

    def _pick(self, key: str) -> str:
        table = self.arch.values.get(key) or DEFAULT_VALUES[key]
        opts = list(table)
        w = np.array([table[o] for o in opts], dtype=np.float64)
        opt = opts[int(self.rng.choice(len(opts), p=w / w.sum()))]
        suffixed = _SUFFIXED.get(key, ())
        if key in _SUFFIXED and (suffixed is None or opt in suffixed):
            return f"{opt}_{int(self.rng.integers(1, 100))}"
        return opt

    def _score(self) -> int:
        return max(0, int(self.rng.normal(300 + 600 * self.arch.skill, 120)))

    def _payload(self, cls: str, elapsed_s: float) -> dict:
        a, r = self.arch, self.rng
        if cls == "app_start":
            return {"entry_point": self._pick("app_start.entry_point")}
        if cls == "game_start":
            return {"mode": self._pick("game_start.mode")}
        if cls == "round_start":
            return {"level_id": int(r.integers(1, 50 + int(450 * a.skill))),
                    "booster": self._pick("round_start.booster")}
        if cls == "round_end":
            return {"result": "win" if r.random() < a.skill else "loss", "score": self._score()}
        if cls == "game_end":
            return {"duration_s": int(elapsed_s), "score": self._score()}
        if cls == "purchase":
            return {"item_id": self._pick("purchase.item_id"), "price_usd": float(self._pick("purchase.price_usd"))}
        if cls == "social":
            return {"action_id": self._pick("social.action_id")}
        if cls == "reward":
            return {"reward_type": self._pick("reward.reward_type")}
        if cls == "collect":
            return {"item_kind": self._pick("collect.item_kind")}
        if cls == "quest":
            return {"quest_id": self._pick("quest.quest_id"), "progress": int(r.integers(0, 101))}
        if cls == "popup":
            return {"popup_id": str(int(r.integers(1, 60)))}
        if cls == "notification":
            return {"channel": self._pick("notification.channel")}
        return {}

    def _event(self, cls: str, ts: int, session_uuid: str, elapsed_s: float) -> RawEvent:
        r = self.rng
        self.seq += 1
        fields = dict(self.static)
        fields.update({
            "session_uuid": session_uuid, "event_uuid": f"{int(r.integers(0, 2**62)):016x}",
            "seq_no": self.seq, "battery_pct": int(r.integers(5, 101)),
            "free_mem_mb": int(r.integers(200, 6000)), "fps": int(r.choice([30, 60, 120])),
            "ping_ms": int(r.integers(10, 400)), "network": str(r.choice(_NETWORKS)),
            "client_ts_ms": ts + int(r.integers(-500, 500)),
        })
        fields.update(self._payload(cls, elapsed_s))
        return RawEvent(self.pid, ts, cls, list(fields.items()))

    def _classes(self, length: int) -> list[str]:
        cfg, r = self.cfg, self.rng
        out = []
        for i in range(length):
            if i == 0 and cfg.opener is not None:
                out.append(cfg.opener)
                continue
            prev = out[-1] if out else None
            succ = cfg.grammar.get(prev) if prev is not None else None
            if succ is not None and r.random() < self.arch.structure:
                out.append(succ)
            else:
                out.append(cfg.classes[int(r.choice(len(cfg.classes), p=self.free_probs))])
        return out

    def generate(self) -> tuple[list[RawEvent], list[int]]:
        cfg, r = self.cfg, self.rng
        counts = r.geometric(self.arch.p_act, size=cfg.days) - 1
        if counts.sum() == 0:
            counts[0] = 1
        max_step = cfg.gap_ms - 1000
        events, lengths = [], []
        last_end = cfg.start_ms - cfg.gap_ms
        for day, count in enumerate(counts):
            for _ in range(int(count)):
                earliest = last_end + cfg.gap_ms + 1000
                candidate = cfg.start_ms + day * DAY_MS + int(r.uniform(7, 23) * 3600 * 1000)
                ts = max(earliest + int(r.exponential(1800 * 1000)), candidate)
                length = sample_session_length(self.arch.p_len, r)
                session_uuid = f"{int(r.integers(0, 2**62)):016x}"
                start = ts
                for i, cls in enumerate(self._classes(length)):
                    if i:
                        step = int(r.exponential(cfg.mean_interval_s * 1000)) + 1
                        ts += min(step, max_step)
                    events.append(self._event(cls, ts, session_uuid, (ts - start) / 1000.0))
                last_end = ts
                lengths.append(length)
        return events, lengths


def generate_corpus(cfg: GeneratorConfig) -> Corpus:
    """Generate the whole corpus; output depends only on ``cfg``.

    Events are merged across players by ``(ts_ms, player_id)`` to mimic one
    interleaved log stream.
    """
    events, labels, lengths = [], {}, {}
    for index in range(cfg.players):
        player = _Player(cfg, index)
        evs, lens = player.generate()
        events.extend(evs)
        labels[player.pid] = player.arch.name
        lengths[player.pid] = lens
    events.sort(key=lambda e: (e.ts_ms, e.player_id))
    return Corpus(events, labels, lengths)
