"""Cache bookkeeping: plans, protected regions, budgets, compaction, stats."""

from __future__ import annotations

import numpy as np
import pytest

from thinkprune.cache import (
    BudgetMode,
    CacheBudget,
    KvCacheState,
    ProtectedRegions,
    enforce_budget,
)
from thinkprune.errors import (
    BudgetInfeasible,
    ProtectedTokenEviction,
    UnknownToken,
)
from thinkprune.policy import EvictionPlan


def fill_cache(num_layers, num_heads, head_dim, prompt_len, total, recent=0, seed=0):
    rng = np.random.default_rng(seed)
    state = KvCacheState(num_layers, num_heads, head_dim, ProtectedRegions(prompt_len, recent))
    for i in range(total):
        keys = rng.standard_normal((num_layers, num_heads, head_dim))
        values = rng.standard_normal((num_layers, num_heads, head_dim))
        state.append(i, keys, values)
    return state


class TestApplyPlan:
    def test_set_removal_other_slots_unchanged(self):
        state = fill_cache(2, 1, 4, prompt_len=2, total=10)
        plan = EvictionPlan(2, 1, {(0, 0): frozenset({5, 7}), (1, 0): frozenset()})
        removed = state.apply_plan(plan)
        assert removed == 2
        assert state.live_indices(0, 0) == (0, 1, 2, 3, 4, 6, 8, 9)
        assert state.live_indices(1, 0) == tuple(range(10))

    def test_empty_plan_leaves_state_unchanged(self):
        state = fill_cache(1, 2, 4, prompt_len=1, total=6)
        before = state.live_sets()
        before_keys = {key: [a.copy() for a in state._slots[key].keys] for key in before}
        state.apply_plan(EvictionPlan(1, 2, {}))
        assert state.live_sets() == before
        assert state.evicted_total == 0
        for key, arrays in before_keys.items():
            for a, b in zip(arrays, state._slots[key].keys):
                assert (a == b).all()

    def test_prompt_token_is_protected(self):
        state = fill_cache(1, 1, 4, prompt_len=2, total=6)
        with pytest.raises(ProtectedTokenEviction):
            state.apply_plan(EvictionPlan(1, 1, {(0, 0): frozenset({1})}))

    def test_recent_window_is_protected(self):
        state = fill_cache(1, 1, 4, prompt_len=1, total=8, recent=3)
        with pytest.raises(ProtectedTokenEviction):
            state.apply_plan(EvictionPlan(1, 1, {(0, 0): frozenset({6})}))

    def test_unknown_token(self):
        state = fill_cache(1, 1, 4, prompt_len=1, total=6)
        state.apply_plan(EvictionPlan(1, 1, {(0, 0): frozenset({4})}))
        with pytest.raises(UnknownToken):
            state.apply_plan(EvictionPlan(1, 1, {(0, 0): frozenset({4})}))

    def test_validation_happens_before_mutation(self):
        state = fill_cache(1, 1, 4, prompt_len=2, total=6)
        before = state.live_sets()
        with pytest.raises(ProtectedTokenEviction):
            state.apply_plan(EvictionPlan(1, 1, {(0, 0): frozenset({3, 1})}))
        assert state.live_sets() == before

    def test_evicted_token_never_reappears(self):
        state = fill_cache(1, 1, 4, prompt_len=0, total=4)
        state.apply_plan(EvictionPlan(1, 1, {(0, 0): frozenset({2})}))
        with pytest.raises(ValueError):
            state.append(2, np.zeros((1, 1, 4)), np.zeros((1, 1, 4)))

    def test_sequence_end_override_for_transient_suffix(self):
        # With probe tokens appended, protection is judged against the real
        # sequence end, not the inflated next_index.
        state = fill_cache(1, 1, 4, prompt_len=1, total=10, recent=2)
        # tokens 8, 9 are the protected recent window for a sequence of 10;
        # pretending two probe tokens exist must not unprotect them.
        with pytest.raises(ProtectedTokenEviction):
            state.apply_plan(
                EvictionPlan(1, 1, {(0, 0): frozenset({8})}), sequence_end=10
            )
        state.apply_plan(EvictionPlan(1, 1, {(0, 0): frozenset({7})}), sequence_end=10)


class TestConservation:
    def test_appends_minus_evictions_equals_live(self):
        state = fill_cache(2, 2, 4, prompt_len=1, total=12)
        plan = EvictionPlan(2, 2, {
            (0, 0): frozenset({3, 5}), (0, 1): frozenset({4, 6}),
            (1, 0): frozenset({2}), (1, 1): frozenset({9}),
        })
        state.apply_plan(plan)
        for layer in range(2):
            for head in range(2):
                live = state.live_count(layer, head)
                appended = state.appended_count(layer, head)
                evicted = len(plan.head_set(layer, head))
                assert appended - evicted == live

    def test_remove_suffix_rolls_back_appends(self):
        state = fill_cache(1, 1, 4, prompt_len=1, total=8)
        state.remove_suffix(5)
        assert state.live_indices(0, 0) == (0, 1, 2, 3, 4)
        assert state.next_index == 5
        assert state.appended_count(0, 0) == 5
        assert state.evicted_total == 0


class TestEnforceBudget:
    def test_overflow_evicts_from_oldest_non_recent(self):
        # Cap 8 non-prompt slots, recent window 4, 8 non-prompt live: the
        # next append must evict one of the 4 oldest non-recent tokens.
        state = fill_cache(1, 1, 4, prompt_len=2, total=10, recent=4)
        budget = CacheBudget(BudgetMode.RATIO, ratio=0.5, max_slots=8, recent_window=4)
        seen = {}

        def take_oldest(layer, head, eligible, count):
            seen["eligible"] = list(eligible)
            return eligible[:count]

        evicted = enforce_budget(state, budget, take_oldest)
        assert evicted == 1
        assert seen["eligible"] == [2, 3, 4, 5]
        assert state.live_indices(0, 0) == (0, 1, 3, 4, 5, 6, 7, 8, 9)
        state.append(10, np.zeros((1, 1, 4)), np.zeros((1, 1, 4)))
        assert state.live_nonprompt_count(0, 0) == 8

    def test_below_cap_appends_without_eviction(self):
        state = fill_cache(1, 1, 4, prompt_len=2, total=6, recent=2)
        budget = CacheBudget(BudgetMode.RATIO, ratio=0.5, max_slots=8, recent_window=2)
        assert enforce_budget(state, budget, lambda l, h, e, c: e[:c]) == 0

    def test_infeasible_window(self):
        state = fill_cache(1, 1, 4, prompt_len=1, total=4, recent=4)
        budget = CacheBudget(BudgetMode.RATIO, ratio=0.5, max_slots=2, recent_window=4)
        with pytest.raises(BudgetInfeasible):
            enforce_budget(state, budget, lambda l, h, e, c: e[:c])

    def test_periodic_budget_rejected(self):
        state = fill_cache(1, 1, 4, prompt_len=1, total=4)
        with pytest.raises(ValueError):
            enforce_budget(state, CacheBudget.periodic(), lambda l, h, e, c: e[:c])

    def test_ratio_resolution_and_default_window(self):
        budget = CacheBudget.from_ratio(0.25, 130.0)
        assert budget.max_slots == 32
        assert budget.recent_window == 16
        with pytest.raises(ValueError):
            CacheBudget.from_ratio(1.5, 100.0)


class TestCompact:
    def test_identity_mapping_without_evictions(self):
        state = fill_cache(1, 1, 4, prompt_len=0, total=5)
        head = state.compact_head(0, 0)
        assert head.remap == {i: i for i in range(5)}
        assert list(head.positions) == list(range(5))

    def test_mapping_after_evictions(self):
        state = fill_cache(1, 1, 4, prompt_len=0, total=4)
        state.apply_plan(EvictionPlan(1, 1, {(0, 0): frozenset({1})}))
        head = state.compact_head(0, 0)
        assert head.remap == {0: 0, 2: 1, 3: 2}
        assert list(head.positions) == [0, 2, 3]

    def test_compacted_attention_matches_masked_attention(self, rng):
        # Softmax over the dense live arrays equals softmax over the full
        # arrays with evicted positions masked to -inf.
        state = fill_cache(1, 2, 8, prompt_len=0, total=12, seed=5)
        full = {
            (0, h): (np.stack(state._slots[(0, h)].keys),
                     np.stack(state._slots[(0, h)].values))
            for h in range(2)
        }
        plan = EvictionPlan(1, 2, {(0, 0): frozenset({2, 7, 9}), (0, 1): frozenset({0, 3, 11})})
        state.apply_plan(plan)
        for head in range(2):
            query = rng.standard_normal(8)
            dense = state.compact_head(0, head)
            scores = dense.keys @ query
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            out_compact = weights @ dense.values

            keys_full, values_full = full[(0, head)]
            masked = keys_full @ query
            for victim in plan.head_set(0, head):
                masked[victim] = -np.inf
            w_full = np.exp(masked - masked.max())
            w_full /= w_full.sum()
            out_masked = w_full @ values_full
            assert np.max(np.abs(out_compact - out_masked)) < 1e-6 * max(1.0, np.max(np.abs(out_masked)))

    def test_compact_covers_all_slots(self):
        state = fill_cache(2, 2, 4, prompt_len=0, total=3)
        assert set(state.compact()) == {(l, h) for l in range(2) for h in range(2)}


class TestStats:
    def test_fresh_cache(self):
        state = fill_cache(1, 2, 4, prompt_len=10, total=10)
        stats = state.stats()
        assert stats.average_live == 10
        assert stats.peak_live == 10
        assert stats.evicted_total == 0

    def test_uniform_eviction_average(self):
        state = fill_cache(2, 2, 4, prompt_len=0, total=20)
        evictions = {
            (l, h): frozenset({5, 6, 7}) for l in range(2) for h in range(2)
        }
        state.apply_plan(EvictionPlan(2, 2, evictions))
        assert state.stats().average_live == 17

    def test_heterogeneous_counts_average_by_full_scan(self):
        state = fill_cache(2, 2, 4, prompt_len=0, total=16)
        state.apply_plan(EvictionPlan(2, 2, {
            (0, 0): frozenset({1, 2}), (0, 1): frozenset({3, 4}),
            (1, 0): frozenset({5}), (1, 1): frozenset({6}),
        }))
        stats = state.stats()
        scan = [len(state.live_indices(l, h)) for l in range(2) for h in range(2)]
        assert stats.average_live == sum(scan) / len(scan)
        assert stats.peak_live == max(scan)

    def test_report_dict_shape(self):
        state = fill_cache(1, 2, 4, prompt_len=2, total=5)
        report = state.stats().to_report_dict(1, 2)
        assert report["per_layer"] == [[5, 5]]
        assert report["evicted_total"] == 0
        assert report["avg_kv"] == 5.0
        assert report["peak_kv"] == 5


class TestProtectedRegions:
    def test_negative_sizes_rejected(self):
        with pytest.raises(ValueError):
            ProtectedRegions(-1, 0)
        with pytest.raises(ValueError):
            ProtectedRegions(0, -2)

    def test_prompt_always_protected(self):
        state = fill_cache(1, 1, 4, prompt_len=3, total=6)
        assert all(state.is_protected(t) for t in range(3))
        assert not state.is_protected(3)

    def test_recent_window_moves_with_appends(self):
        state = fill_cache(1, 1, 4, prompt_len=0, total=6, recent=2)
        assert state.is_protected(4) and state.is_protected(5)
        state.append(6, np.zeros((1, 1, 4)), np.zeros((1, 1, 4)))
        assert not state.is_protected(4)
        assert state.is_protected(5) and state.is_protected(6)
