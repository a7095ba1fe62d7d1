"""Raw event logs to per-player token documents.

Stages: parse JSONL → filter fields and map values to terms → group by
player and split into sessions at inactivity gaps → render sessions as one
space-separated document per player.
"""
from __future__ import annotations

import bisect
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_CLASSES = (
    "app_start", "game_start", "round_start", "round_end", "game_end", "purchase",
    "social", "reward", "collect", "quest", "popup", "notification",
)
CLS, SEP = "[CLS]", "[SEP]"
DEFAULT_GAP_MS = 15 * 60 * 1000

_WS = re.compile(r"\s+")


class MalformedLogError(ValueError):
    pass


@dataclass
class RawEvent:
    player_id: str
    ts_ms: int
    cls: str
    fields: list[tuple[str, str | float | int]] = field(default_factory=list)

    def to_json(self) -> str:
        rec = {"player_id": self.player_id, "ts_ms": self.ts_ms, "class": self.cls,
               "fields": dict(self.fields)}
        return json.dumps(rec, separators=(",", ":"))


@dataclass
class Session:
    player_id: str
    events: list[RawEvent]

    @property
    def start_ms(self) -> int:
        return self.events[0].ts_ms

    @property
    def end_ms(self) -> int:
        return self.events[-1].ts_ms

    def __len__(self) -> int:
        return len(self.events)


@dataclass
class PlayerDocument:
    player_id: str
    text: str
    session_offsets: list[int] = field(default_factory=list)

    @property
    def tokens(self) -> list[str]:
        return self.text.split()

    def __len__(self) -> int:
        return len(self.tokens)


# ------------------------------------------------------------------ parsing

def _parse_line(line: str, classes) -> RawEvent:
    rec = json.loads(line)
    if not isinstance(rec, dict):
        raise ValueError("record is not an object")
    pid, ts, cls, fields = rec["player_id"], rec["ts_ms"], rec["class"], rec.get("fields", {})
    if not isinstance(pid, str) or not pid:
        raise ValueError("player_id must be a non-empty string")
    if isinstance(ts, bool) or not isinstance(ts, (int, float)) or not math.isfinite(ts):
        raise ValueError("ts_ms must be a number")
    if not isinstance(cls, str) or (classes is not None and cls not in classes):
        raise ValueError(f"unknown class {cls!r}")
    if not isinstance(fields, dict):
        raise ValueError("fields must be an object")
    items = []
    for k, v in fields.items():
        if isinstance(v, bool):
            v = str(v).lower()
        elif not isinstance(v, (str, int, float)):
            raise ValueError(f"field {k!r} has unsupported value type")
        items.append((k, v))
    return RawEvent(pid, int(ts), cls, items)


def parse_events(lines: Iterable[str], max_bad_fraction: float = 0.5,
                 classes: Sequence[str] | None = None) -> tuple[list[RawEvent], int]:
    """Parse JSONL records; returns ``(events, skipped)``.

    Blank lines are ignored.  Raises :class:`MalformedLogError` when more
    than ``max_bad_fraction`` of the non-blank lines fail to parse.
    """
    allowed = set(classes) if classes is not None else None
    events, bad, seen = [], 0, 0
    for line in lines:
        if not line.strip():
            continue
        seen += 1
        try:
            events.append(_parse_line(line, allowed))
        except (ValueError, KeyError, TypeError) as exc:
            bad += 1
            log.debug("skipping malformed line %d: %s", seen, exc)
    if seen and bad / seen > max_bad_fraction:
        raise MalformedLogError(f"{bad} of {seen} lines malformed (limit {max_bad_fraction:.0%})")
    return events, bad


# ------------------------------------------------------------- filter spec

@dataclass
class ValueRule:
    """Maps one raw field value to a whitespace-free term.

    kinds: ``bucket`` (numeric edges → labels), ``prefix`` (first matching
    prefix → term), ``exact`` (lookup table), ``passthrough``.
    """

    kind: str = "passthrough"
    edges: list[float] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    mapping: dict[str, str] = field(default_factory=dict)
    default: str | None = None
    rename: str | None = None

    def __post_init__(self):
        if self.kind not in ("bucket", "prefix", "exact", "passthrough"):
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.kind == "bucket":
            if len(self.labels) != len(self.edges) + 1:
                raise ValueError("bucket rule needs len(labels) == len(edges) + 1")
            if list(self.edges) != sorted(self.edges):
                raise ValueError("bucket edges must be sorted")

    def apply(self, value) -> str:
        if self.kind == "bucket":
            try:
                x = float(value)
            except (TypeError, ValueError):
                return _atom(self.default or "unknown")
            return self.labels[bisect.bisect_right(self.edges, x)]
        text = str(value)
        if self.kind == "prefix":
            for prefix, term in self.mapping.items():
                if text.startswith(prefix):
                    return _atom(term)
            return _atom(self.default if self.default is not None else text)
        if self.kind == "exact":
            return _atom(self.mapping.get(text, self.default if self.default is not None else text))
        return _atom(text)


def _atom(text: str) -> str:
    out = _WS.sub("_", str(text).strip())
    return out if out else "none"


@dataclass
class FilterSpec:
    """Per-class field allowlists plus value rules keyed by field name.

    A rule under ``"<class>.<field>"`` overrides one under ``"<field>"``.
    """

    keep: dict[str, list[str]]
    rules: dict[str, ValueRule] = field(default_factory=dict)

    def rule_for(self, cls: str, key: str) -> ValueRule:
        return self.rules.get(f"{cls}.{key}") or self.rules.get(key) or ValueRule()

    def validate(self) -> None:
        for cls, keys in self.keep.items():
            if ":" in cls or _WS.search(cls):
                raise ValueError(f"class name {cls!r} may not contain ':' or whitespace")
            if len(set(keys)) != len(keys):
                raise ValueError(f"duplicate allowlisted keys for class {cls!r}")
            names = [self.rule_for(cls, k).rename or k for k in keys]
            if len(set(names)) != len(names):
                raise ValueError(f"allowlisted keys of {cls!r} collide after renaming")

    @classmethod
    def from_dict(cls, obj: dict) -> "FilterSpec":
        rules = {}
        for key, r in obj.get("rules", {}).items():
            rules[key] = ValueRule(kind=r.get("type", "passthrough"), edges=list(r.get("edges", [])),
                                   labels=list(r.get("labels", [])), mapping=dict(r.get("map", {})),
                                   default=r.get("default"), rename=r.get("as"))
        spec = cls(keep={c: list(v.get("keep", [])) for c, v in obj["classes"].items()}, rules=rules)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "FilterSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_filter_spec() -> FilterSpec:
    return FilterSpec.load(Path(__file__).parent / "data" / "filter_spec.json")


@dataclass
class FilterStats:
    events_in: int = 0
    events_dropped: int = 0
    fields_in: int = 0
    fields_out: int = 0

    @property
    def reduction(self) -> float:
        return 1.0 - self.fields_out / self.fields_in if self.fields_in else 0.0


def filter_and_map(events: Iterable[RawEvent], spec: FilterSpec) -> tuple[list[RawEvent], FilterStats]:
    """Keep only allowlisted fields (in allowlist order) with mapped values.

    Events whose class the FilterSpec does not cover are dropped and counted.
    """
    stats = FilterStats()
    out = []
    for ev in events:
        stats.events_in += 1
        stats.fields_in += len(ev.fields)
        keys = spec.keep.get(ev.cls)
        if keys is None:
            stats.events_dropped += 1
            continue
        present = dict(ev.fields)
        kept = []
        for key in keys:
            if key not in present:
                continue
            rule = spec.rule_for(ev.cls, key)
            kept.append((_atom(rule.rename or key), rule.apply(present[key])))
        stats.fields_out += len(kept)
        out.append(RawEvent(ev.player_id, ev.ts_ms, ev.cls, kept))
    return out, stats


# ------------------------------------------------------------ sessionizing

def group_by_player(events: Iterable[RawEvent]) -> dict[str, list[RawEvent]]:
    groups: dict[str, list[RawEvent]] = {}
    for ev in events:
        groups.setdefault(ev.player_id, []).append(ev)
    return dict(sorted(groups.items()))


def sessionize(events: Sequence[RawEvent], gap_ms: int = DEFAULT_GAP_MS) -> list[Session]:
    """Stable-sort by timestamp and split where the gap exceeds ``gap_ms``."""
    if not events:
        return []
    ordered = sorted(events, key=lambda e: e.ts_ms)
    sessions = [Session(ordered[0].player_id, [ordered[0]])]
    for prev, ev in zip(ordered, ordered[1:]):
        if ev.ts_ms - prev.ts_ms > gap_ms:
            sessions.append(Session(ev.player_id, [ev]))
        else:
            sessions[-1].events.append(ev)
    return sessions


def event_tokens(ev: RawEvent) -> list[str]:
    return [ev.cls] + [f"{k}:{v}" for k, v in ev.fields]


def render_document(sessions: Sequence[Session], player_id: str | None = None) -> PlayerDocument:
    tokens = [CLS]
    offsets = []
    for s in sessions:
        offsets.append(len(tokens))
        for ev in s.events:
            tokens.extend(event_tokens(ev))
        tokens.append(SEP)
    if player_id is None:
        player_id = sessions[0].player_id if sessions else ""
    return PlayerDocument(player_id, " ".join(tokens), offsets)


# ------------------------------------------------------------------- noise

def split_events(tokens: Sequence[str]) -> list[list[list[str]]]:
    """Recover ``sessions -> events -> tokens`` from a rendered token list.

    A token without ``:`` that is not special opens a new event.
    """
    sessions: list[list[list[str]]] = []
    current: list[list[str]] = []
    for tok in tokens:
        if tok == CLS:
            continue
        if tok == SEP:
            sessions.append(current)
            current = []
        elif ":" in tok and current:
            current[-1].append(tok)
        else:
            current.append([tok])
    if current:
        sessions.append(current)
    return sessions


def inject_order_noise(tokens: Sequence[str], p: float, seed) -> list[str]:
    """Permute event order within each session with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"noise probability must be in [0, 1], got {p}")
    tokens = list(tokens)
    if p == 0.0:
        return tokens
    rng = np.random.default_rng(seed)
    trailing_sep = bool(tokens) and tokens[-1] == SEP
    out = [CLS] if tokens and tokens[0] == CLS else []
    sessions = split_events(tokens)
    for i, events in enumerate(sessions):
        if rng.random() < p and len(events) > 1:
            events = [events[j] for j in rng.permutation(len(events))]
        for ev in events:
            out.extend(ev)
        if i < len(sessions) - 1 or trailing_sep:
            out.append(SEP)
    return out


# ------------------------------------------------------------------- split

def split_train_val(docs: Sequence[PlayerDocument], train_fraction: float = 0.67,
                    seed=0) -> tuple[list[PlayerDocument], list[PlayerDocument]]:
    """Shuffle players and cut at ``max(1, floor(n * train_fraction))``.

    Both outputs keep player-id order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    ids = sorted({d.player_id for d in docs})
    n = len(ids)
    n_train = max(1, math.floor(n * train_fraction + 1e-9))
    if n_train >= n:
        raise ValueError(f"cannot split {n} players with fraction {train_fraction}: a split is empty")
    perm = np.random.default_rng(seed).permutation(n)
    train_ids = {ids[i] for i in perm[:n_train]}
    ordered = sorted(docs, key=lambda d: d.player_id)
    return ([d for d in ordered if d.player_id in train_ids],
            [d for d in ordered if d.player_id not in train_ids])


# --------------------------------------------------------------------- I/O

def build_documents(events: Iterable[RawEvent], spec: FilterSpec, gap_ms: int = DEFAULT_GAP_MS):
    """Run filter → sessionize → render for every player.

    Returns ``(documents, sessions_by_player, stats)``.
    """
    kept, stats = filter_and_map(events, spec)
    docs, sessions_by_player = [], {}
    for pid, evs in group_by_player(kept).items():
        sessions = sessionize(evs, gap_ms)
        sessions_by_player[pid] = sessions
        docs.append(render_document(sessions, pid))
    return docs, sessions_by_player, stats


def _session_offsets(tokens: Sequence[str]) -> list[int]:
    start = 1 if tokens and tokens[0] == CLS else 0
    if len(tokens) <= start:
        return []
    return [start] + [i + 1 for i, t in enumerate(tokens[:-1]) if t == SEP]


def write_documents(path, docs: Iterable[PlayerDocument]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(f"{d.player_id}\t{d.text}\n")


def read_documents(path) -> list[PlayerDocument]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise MalformedLogError(f"{path}:{n}: expected player_id<TAB>text")
            pid, text = line.split("\t", 1)
            docs.append(PlayerDocument(pid, text, _session_offsets(text.split())))
    return docs
