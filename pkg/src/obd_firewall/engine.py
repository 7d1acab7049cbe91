"""Rule evaluation: match decoded messages against the behaviour pool, pick the
strictest match and turn it into a verdict."""

from __future__ import annotations

import logging
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

from .codec import CodecError, SignalMap, encode
from .model import Action, DecodedMessage, Verdict
from .policy import Behaviour

log = logging.getLogger(__name__)

# lower rank is stricter and wins; change the order here and nowhere else
STRICTNESS = {"reject": 0, "replace": 1, "limit": 2}

NS_PER_MS = 1_000_000


def strictness_rank(behaviour_type: str) -> int:
    return STRICTNESS[behaviour_type]


class Match(NamedTuple):
    rank: int
    index: int
    behaviour: Behaviour


MatchSet = list  # list[Match], ascending rank, pool order within a rank


@dataclass
class EngineState:
    """Mutable per-epoch state.  Safe to share between worker threads."""

    epoch: int = 0
    pub_once_seen: set = field(default_factory=set)
    counters: Counter = field(default_factory=Counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def claim_once(self, index: int, identifier: str) -> bool:
        """Atomic check-and-set; True only for the first claim this epoch."""
        key = (index, identifier)
        with self._lock:
            if key in self.pub_once_seen:
                return False
            self.pub_once_seen.add(key)
            return True

    def count(self, name: str) -> None:
        with self._lock:
            self.counters[name] += 1

    def restart(self) -> None:
        """Begin a new epoch, as after a system start."""
        with self._lock:
            self.epoch += 1
            self.pub_once_seen.clear()
            self.counters.clear()

    def snapshot(self) -> dict:
        with self._lock:
            return {"epoch": self.epoch, "counters": dict(self.counters)}


def matches(b: Behaviour, m: DecodedMessage) -> bool:
    if m.identifier != b.identifier:
        bounds = b.id_bounds
        if bounds is None or not bounds[0] <= int(m.identifier, 16) <= bounds[1]:
            return False
    if b.val_range is not None and not b.val_range[0] <= m.value <= b.val_range[1]:
        return False
    if b.type == "reject" and b.value is not None and m.value != b.value:
        return False
    return True


def match_set(m: DecodedMessage, pool: Sequence[Behaviour]) -> MatchSet:
    found = [Match(STRICTNESS[b.type], i, b) for i, b in enumerate(pool) if matches(b, m)]
    found.sort()
    return found


def resolve(ms: MatchSet) -> Match:
    if not ms:
        raise ValueError("cannot resolve an empty match set")
    return min(ms, key=lambda x: (x.rank, x.index))


def schedule_delayed(verdict: Verdict, now: int) -> int:
    """Monotonic nanosecond time at which a delayed verdict's frame is due."""
    return now + (verdict.release_after or 0) * NS_PER_MS


def _rewrite(m: DecodedMessage, value: float, smap: SignalMap, delay: Optional[int], index: int) -> Verdict:
    try:
        frame = encode(replace(m, value=value), smap)
    except CodecError as exc:
        log.error("dropping %s: re-encode failed: %s", m.identifier, exc)
        return Verdict.drop(index, error=str(exc))
    return Verdict.modified(frame, value, delay, index)


def _apply(m: DecodedMessage, b: Behaviour, index: int, smap: SignalMap) -> Verdict:
    if b.type == "reject":
        return Verdict.drop(index)
    # requests have no value window; only reject applies to them
    if not m.has_value:
        return Verdict.forward(b.delay, index)
    if b.type == "replace":
        return _rewrite(m, b.value, smap, b.delay, index)
    if m.value <= b.value:
        return Verdict.forward(b.delay, index)
    return _rewrite(m, b.value, smap, b.delay, index)


def evaluate(m: DecodedMessage, pool: Sequence[Behaviour], state: EngineState, smap: SignalMap) -> Verdict:
    ms = match_set(m, pool)
    if not ms:
        verdict = Verdict.forward()
    else:
        rank, index, b = resolve(ms)
        if b.pub_once:
            if state.claim_once(index, m.identifier):
                # the one permitted message: reject lets it through untouched
                verdict = Verdict.forward(b.delay, index) if b.type == "reject" else _apply(m, b, index, smap)
            else:
                verdict = Verdict.drop(index)
        else:
            verdict = _apply(m, b, index, smap)
    state.count(verdict.action.value)
    if verdict.error:
        state.count("encode_error")
    return verdict


class Engine:
    """A behaviour pool bound to a signal map and its epoch state."""

    def __init__(
        self,
        pool: Sequence[Behaviour] = (),
        smap: Optional[SignalMap] = None,
        labels: Optional[Sequence[str]] = None,
        state: Optional[EngineState] = None,
    ) -> None:
        self.pool = tuple(pool)
        self.smap = dict(smap or {})
        self.labels = list(labels) if labels is not None else [f"#{i}" for i in range(len(self.pool))]
        if len(self.labels) != len(self.pool):
            raise ValueError("labels must align with the pool")
        self.state = state if state is not None else EngineState()

    def evaluate(self, m: DecodedMessage) -> Verdict:
        return evaluate(m, self.pool, self.state, self.smap)

    def label(self, index: int) -> str:
        return self.labels[index] if index >= 0 else ""

    def restart(self) -> None:
        self.state.restart()


__all__ = [
    "Action", "Engine", "EngineState", "Match", "STRICTNESS", "evaluate", "matches",
    "match_set", "resolve", "schedule_delayed", "strictness_rank",
]
