"""Epoch-tagged store of previous-epoch rollouts, keyed by (prompt, slot).

Each prompt owns a fixed number of group slots; a refresh replaces the slot's
entry outright, so the cache never accumulates history and its size is
constant once every slot has been written. There is no eviction: the whole
working set fits in memory at this scale, and persistence exists for restart,
not capacity.

Reads may happen concurrently; writes are batched at epoch boundaries under
exclusive access.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = ["CachedRollout", "RolloutCache", "CacheLoadError", "CACHE_FORMAT"]

CACHE_FORMAT = "rolloutlab-cache-v1"


class CacheLoadError(ValueError):
    """A snapshot file could not be parsed; the message names the line."""


@dataclass(frozen=True)
class CachedRollout:
    """A stored response with the per-token probabilities it was sampled at."""

    prompt_id: int
    response: tuple[int, ...]
    old_probs: np.ndarray
    epoch: int
    reward: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))
        probs = np.asarray(self.old_probs, dtype=np.float64)
        probs.setflags(write=False)
        object.__setattr__(self, "old_probs", probs)
        if len(self.response) == 0:
            raise ValueError("cached response must be non-empty")
        if len(probs) != len(self.response):
            raise ValueError(
                f"old_probs length {len(probs)} != response length {len(self.response)}"
            )
        if not ((probs > 0.0) & (probs <= 1.0)).all():
            raise ValueError("old_probs must lie in (0, 1]")


class RolloutCache:
    """Map (prompt_id, slot) -> the most recent CachedRollout for that slot."""

    def __init__(self) -> None:
        self._entries: dict[tuple[int, int], CachedRollout] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, prompt_id: int, slot: int) -> CachedRollout | None:
        """Stored entry, or None on a miss (first epoch, or never written)."""
        return self._entries.get((prompt_id, slot))

    def put(self, prompt_id: int, slot: int, rollout: CachedRollout) -> None:
        """Store ``rollout``, replacing whatever the slot held before."""
        if rollout.prompt_id != prompt_id:
            raise ValueError(
                f"rollout tagged prompt {rollout.prompt_id} stored under prompt {prompt_id}"
            )
        if slot < 0:
            raise ValueError(f"slot must be >= 0, got {slot}")
        self._entries[(prompt_id, slot)] = rollout

    def items(self) -> Iterator[tuple[tuple[int, int], CachedRollout]]:
        return iter(self._entries.items())

    # -- persistence ---------------------------------------------------------

    def persist(self, path: str | Path) -> None:
        """Write a line-delimited snapshot.

        Probabilities are serialized as hexadecimal floats so a load
        reproduces them bit-exactly.
        """
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CACHE_FORMAT + "\n")
            for (prompt_id, slot), entry in self._entries.items():
                record = {
                    "prompt_id": prompt_id,
                    "slot": slot,
                    "epoch": entry.epoch,
                    "reward": entry.reward,
                    "response": list(entry.response),
                    "old_probs": [float(p).hex() for p in entry.old_probs],
                }
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RolloutCache":
        cache = cls()
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != CACHE_FORMAT:
                raise CacheLoadError(f"line 1: expected header {CACHE_FORMAT!r}, got {header!r}")
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    entry = CachedRollout(
                        prompt_id=record["prompt_id"],
                        response=tuple(record["response"]),
                        old_probs=np.asarray(
                            [float.fromhex(p) for p in record["old_probs"]]
                        ),
                        epoch=int(record["epoch"]),
                        reward=float(record["reward"]),
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    raise CacheLoadError(f"line {lineno}: {exc}") from exc
                cache.put(record["prompt_id"], int(record["slot"]), entry)
        return cache
