"""Sender-side boundary logs for pipeline-local replay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

FWD = "fwd"  # activation sent downstream across boundary b (stage b -> b+1)
BWD = "bwd"  # gradient sent upstream across boundary b (stage b+1 -> b)


class LogKey(NamedTuple):
    iteration: int
    replica: int
    microbatch: int
    boundary: int
    direction: str


class MissingLogEntry(KeyError):
    def __init__(self, key: LogKey):
        self.key = key
        super().__init__(
            f"missing log entry: iteration={key.iteration} replica={key.replica} "
            f"micro-batch={key.microbatch} boundary={key.boundary} direction={key.direction}"
        )


@dataclass
class UpstreamLog:
    """Boundary tensors keyed by (iteration, replica, micro-batch, boundary, direction).

    ``owner`` records which stage sent (and therefore stores) each entry.
    ``capacity_bytes`` bounds host memory; recording past it raises.
    """

    entries: dict[LogKey, np.ndarray] = field(default_factory=dict)
    owner: dict[LogKey, int] = field(default_factory=dict)
    capacity_bytes: int | None = None

    def record(self, iteration, replica, microbatch, boundary, direction, tensor, owner: int) -> None:
        key = LogKey(int(iteration), int(replica), int(microbatch), int(boundary), direction)
        arr = np.array(tensor, copy=True)
        if self.capacity_bytes is not None and self.nbytes + arr.nbytes > self.capacity_bytes:
            raise MemoryError(f"upstream log exceeds host budget of {self.capacity_bytes} bytes")
        self.entries[key] = arr
        self.owner[key] = owner

    def get(self, iteration, replica, microbatch, boundary, direction) -> np.ndarray:
        key = LogKey(iteration, replica, microbatch, boundary, direction)
        try:
            return self.entries[key]
        except KeyError:
            raise MissingLogEntry(key) from None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return LogKey(*key) in self.entries

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.entries.values())

    def count(self, iteration: int, boundary: int, direction: str) -> int:
        return sum(1 for k in self.entries if k.iteration == iteration and k.boundary == boundary
                   and k.direction == direction)

    def iterations(self) -> set[int]:
        return {k.iteration for k in self.entries}

    def held_by(self, stage: int) -> "UpstreamLog":
        keep = {k: v for k, v in self.entries.items() if self.owner[k] == stage}
        return UpstreamLog(keep, {k: stage for k in keep}, self.capacity_bytes)

    def drop_owner(self, stage: int) -> "UpstreamLog":
        """Log after the worker running ``stage`` crashed and lost its host memory."""
        keep = {k: v for k, v in self.entries.items() if self.owner[k] != stage}
        return UpstreamLog(keep, {k: self.owner[k] for k in keep}, self.capacity_bytes)


def gc_logs(log: UpstreamLog, persisted_window_start: int) -> UpstreamLog:
    """Drop entries older than the last persisted sparse checkpoint's window start."""
    keep = {k: v for k, v in log.entries.items() if k.iteration >= persisted_window_start}
    return UpstreamLog(keep, {k: log.owner[k] for k in keep}, log.capacity_bytes)
