"""KV-cache occupancy bookkeeping: live slots, protected regions, budgets.

The cache tracks, per (layer, head), the strictly increasing list of live
token indices together with their key/value vectors. Eviction never
re-indexes survivors; original positions stay attached to the vectors so
positional geometry is preserved. A cache is owned by a single decode loop;
snapshots taken for reporting are plain immutable copies.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import BudgetInfeasible, ProtectedTokenEviction, UnknownToken
from .policy import EvictionPlan


@dataclass(frozen=True)
class ProtectedRegions:
    """Slots no policy may evict: the whole prompt and the recent window."""

    prompt_len: int
    recent_window: int

    def __post_init__(self) -> None:
        if self.prompt_len < 0 or self.recent_window < 0:
            raise ValueError("protected region sizes must be >= 0")


class BudgetMode(str, Enum):
    # Unbounded cache; a fixed number of tokens is evicted at each pruning round.
    PERIODIC = "periodic"
    # Hard cap on live non-prompt slots per (layer, head), enforced at every append.
    RATIO = "ratio"


@dataclass(frozen=True)
class CacheBudget:
    """Cache sizing policy; in ratio mode max_slots excludes prompt slots."""

    mode: BudgetMode
    ratio: float | None = None
    max_slots: int | None = None
    recent_window: int | None = None

    def __post_init__(self) -> None:
        if self.mode is BudgetMode.RATIO:
            if self.ratio is not None and not 0.0 < self.ratio <= 1.0:
                raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
            if self.max_slots is None or self.max_slots < 1:
                raise ValueError("ratio mode requires max_slots >= 1")
            if self.recent_window is None:
                object.__setattr__(self, "recent_window", self.max_slots // 2)
        elif self.ratio is not None or self.max_slots is not None:
            raise ValueError("periodic mode takes no ratio or max_slots")

    @classmethod
    def periodic(cls) -> "CacheBudget":
        return cls(BudgetMode.PERIODIC)

    @classmethod
    def from_ratio(cls, ratio: float, full_kv_len: float) -> "CacheBudget":
        """Resolve a compression ratio against a measured full-cache average length."""
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"ratio must be in (0, 1], got {ratio}")
        if full_kv_len <= 0:
            raise ValueError("full_kv_len must be positive")
        max_slots = max(1, int(ratio * full_kv_len))
        return cls(BudgetMode.RATIO, ratio=ratio, max_slots=max_slots)


@dataclass(frozen=True)
class CacheStats:
    """Snapshot of live occupancy across all (layer, head) slots."""

    live_counts: Mapping[tuple[int, int], int]
    average_live: float
    peak_live: int
    evicted_total: int

    def to_report_dict(self, num_layers: int, num_heads: int) -> dict:
        return {
            "avg_kv": self.average_live,
            "peak_kv": self.peak_live,
            "evicted_total": self.evicted_total,
            "per_layer": [
                [self.live_counts[(layer, head)] for head in range(num_heads)]
                for layer in range(num_layers)
            ],
        }


class _HeadSlots:
    """Live entries of one (layer, head): indices plus key/value vectors."""

    __slots__ = ("indices", "index_set", "keys", "values", "appended")

    def __init__(self) -> None:
        self.indices: list[int] = []
        self.index_set: set[int] = set()
        self.keys: list[np.ndarray] = []
        self.values: list[np.ndarray] = []
        self.appended = 0


@dataclass(frozen=True)
class CompactedHead:
    """Dense live arrays for one (layer, head) plus the old-to-new index map."""

    positions: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    remap: Mapping[int, int]


class KvCacheState:
    """Mutable per-(layer, head) live-slot bookkeeping for one decode loop."""

    def __init__(
        self,
        num_layers: int,
        num_heads: int,
        head_dim: int,
        protected: ProtectedRegions,
    ):
        if min(num_layers, num_heads, head_dim) < 1:
            raise ValueError("num_layers, num_heads and head_dim must be >= 1")
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.protected = protected
        self._slots = {
            (layer, head): _HeadSlots()
            for layer in range(num_layers)
            for head in range(num_heads)
        }
        self.next_index = 0
        self.evicted_total = 0

    @property
    def prompt_len(self) -> int:
        return self.protected.prompt_len

    def live_indices(self, layer: int, head: int) -> tuple[int, ...]:
        return tuple(self._slots[(layer, head)].indices)

    def live_count(self, layer: int, head: int) -> int:
        return len(self._slots[(layer, head)].indices)

    def live_nonprompt_count(self, layer: int, head: int) -> int:
        slots = self._slots[(layer, head)]
        return sum(1 for t in slots.indices if t >= self.prompt_len)

    def is_live(self, layer: int, head: int, token: int) -> bool:
        return token in self._slots[(layer, head)].index_set

    def is_protected(self, token: int, *, sequence_end: int | None = None) -> bool:
        """Prompt tokens always; recent-window tokens relative to sequence_end.

        sequence_end defaults to the current append position; pass the real
        sequence length while transient probe tokens occupy the tail.
        """
        if token < self.prompt_len:
            return True
        window = self.protected.recent_window
        if window == 0:
            return False
        end = self.next_index if sequence_end is None else sequence_end
        return token >= end - window

    def live_sets(self) -> dict[tuple[int, int], frozenset[int]]:
        """Immutable snapshot of every (layer, head) live index set."""
        return {key: frozenset(slots.index_set) for key, slots in self._slots.items()}

    def live_arrays(self, layer: int, head: int) -> tuple[list[int], np.ndarray, np.ndarray]:
        """Live indices plus stacked key/value matrices, oldest first."""
        slots = self._slots[(layer, head)]
        if not slots.indices:
            empty = np.zeros((0, self.head_dim), dtype=np.float64)
            return [], empty, empty
        return list(slots.indices), np.stack(slots.keys), np.stack(slots.values)

    def append(self, token_index: int, keys: np.ndarray, values: np.ndarray) -> None:
        """Commit one token's key/value vectors to every (layer, head).

        keys and values have shape (num_layers, num_heads, head_dim); the
        token index must be exactly the next unseen position.
        """
        if token_index != self.next_index:
            raise ValueError(
                f"appends must be sequential: expected {self.next_index}, got {token_index}"
            )
        for layer in range(self.num_layers):
            for head in range(self.num_heads):
                slots = self._slots[(layer, head)]
                slots.indices.append(token_index)
                slots.index_set.add(token_index)
                slots.keys.append(np.asarray(keys[layer, head], dtype=np.float64).copy())
                slots.values.append(np.asarray(values[layer, head], dtype=np.float64).copy())
                slots.appended += 1
        self.next_index += 1

    def apply_plan(self, plan: EvictionPlan, *, sequence_end: int | None = None) -> int:
        """Remove every planned token; validates the whole plan before mutating.

        Returns the number of entries removed. Raises ProtectedTokenEviction
        or UnknownToken (leaving the state untouched) if the plan is invalid.
        """
        if plan.num_layers != self.num_layers or plan.num_heads != self.num_heads:
            raise ValueError(
                f"plan dimensions ({plan.num_layers}, {plan.num_heads}) do not match "
                f"cache ({self.num_layers}, {self.num_heads})"
            )
        for (layer, head), victims in plan.evicted.items():
            slots = self._slots[(layer, head)]
            for token in sorted(victims):
                if self.is_protected(token, sequence_end=sequence_end):
                    raise ProtectedTokenEviction(
                        f"token {token} at ({layer}, {head}) is prompt or recent-window protected"
                    )
                if token not in slots.index_set:
                    raise UnknownToken(f"token {token} is not live at ({layer}, {head})")
        removed = 0
        for (layer, head), victims in plan.evicted.items():
            if not victims:
                continue
            slots = self._slots[(layer, head)]
            keep = [i for i, t in enumerate(slots.indices) if t not in victims]
            removed += len(slots.indices) - len(keep)
            slots.indices = [slots.indices[i] for i in keep]
            slots.keys = [slots.keys[i] for i in keep]
            slots.values = [slots.values[i] for i in keep]
            slots.index_set -= victims
        self.evicted_total += removed
        return removed

    def remove_suffix(self, start_index: int) -> int:
        """Drop every live entry at index >= start_index from all slots.

        Used to retract transient probe tokens; removals are not counted as
        evictions and next_index rolls back to start_index.
        """
        removed = 0
        for slots in self._slots.values():
            keep = [i for i, t in enumerate(slots.indices) if t < start_index]
            dropped = len(slots.indices) - len(keep)
            if dropped:
                slots.indices = [slots.indices[i] for i in keep]
                slots.keys = [slots.keys[i] for i in keep]
                slots.values = [slots.values[i] for i in keep]
                slots.index_set = {t for t in slots.index_set if t < start_index}
                slots.appended -= dropped
                removed += dropped
        self.next_index = min(self.next_index, start_index)
        return removed

    def appended_count(self, layer: int, head: int) -> int:
        return self._slots[(layer, head)].appended

    def compact_head(self, layer: int, head: int) -> CompactedHead:
        slots = self._slots[(layer, head)]
        positions = np.array(slots.indices, dtype=np.int64)
        if slots.indices:
            keys = np.stack(slots.keys)
            values = np.stack(slots.values)
        else:
            keys = np.zeros((0, self.head_dim), dtype=np.float64)
            values = np.zeros((0, self.head_dim), dtype=np.float64)
        remap = {old: new for new, old in enumerate(slots.indices)}
        return CompactedHead(positions, keys, values, remap)

    def compact(self) -> dict[tuple[int, int], CompactedHead]:
        """Dense live arrays plus old-to-new index maps for every (layer, head)."""
        return {
            (layer, head): self.compact_head(layer, head)
            for layer in range(self.num_layers)
            for head in range(self.num_heads)
        }

    def stats(self) -> CacheStats:
        counts = {key: len(slots.indices) for key, slots in self._slots.items()}
        values = list(counts.values())
        return CacheStats(
            live_counts=counts,
            average_live=sum(values) / len(values),
            peak_live=max(values),
            evicted_total=self.evicted_total,
        )


# (layer, head, eligible_tokens_oldest_first, count) -> tokens to evict
VictimSelector = Callable[[int, int, list[int], int], list[int]]


def enforce_budget(state: KvCacheState, budget: CacheBudget, select_victims: VictimSelector) -> int:
    """Make room for one incoming token under a ratio cache budget.

    If any (layer, head) would exceed max_slots non-prompt live entries
    after the next append, the selector picks exactly the overflow from the
    eligible (non-prompt, non-recent) tokens and those are evicted now.
    Returns the number of evicted entries.
    """
    if budget.mode is not BudgetMode.RATIO:
        raise ValueError("enforce_budget applies to ratio budgets only")
    recent = budget.recent_window or 0
    if budget.max_slots < recent:
        raise BudgetInfeasible(
            f"max_slots {budget.max_slots} cannot hold recent window {recent}"
        )
    recent_floor = state.next_index - recent
    evictions: dict[tuple[int, int], frozenset[int]] = {}
    any_overflow = False
    for layer in range(state.num_layers):
        for head in range(state.num_heads):
            overflow = state.live_nonprompt_count(layer, head) + 1 - budget.max_slots
            if overflow <= 0:
                evictions[(layer, head)] = frozenset()
                continue
            any_overflow = True
            eligible = [
                t
                for t in state.live_indices(layer, head)
                if t >= state.prompt_len and (recent == 0 or t < recent_floor)
            ]
            if len(eligible) < overflow:
                raise BudgetInfeasible(
                    f"(layer {layer}, head {head}) must evict {overflow} but only "
                    f"{len(eligible)} tokens are eligible"
                )
            victims = list(select_victims(layer, head, eligible, overflow))
            if len(victims) != overflow or not set(victims) <= set(eligible):
                raise ValueError("victim selector returned an invalid choice")
            evictions[(layer, head)] = frozenset(victims)
    if not any_overflow:
        return 0
    plan = EvictionPlan(state.num_layers, state.num_heads, evictions)
    return state.apply_plan(plan)
