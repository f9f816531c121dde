"""Autoregressive decode loop with periodic probe-and-prune rounds.

Every interval_p newly generated reasoning tokens, the summarization probe
is appended, one forward pass harvests the end-of-thinking attention rows,
scores and step scores are computed, the active policy's plan is applied,
and the probe tokens are removed again, leaving decoding conditioned on
the pruned original sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

from .cache import (
    BudgetMode,
    CacheBudget,
    KvCacheState,
    ProtectedRegions,
    enforce_budget,
)
from .errors import ProbeLeak
from .model import EOS_ID, StepOutput, TinyDecoder, TinyModelConfig, token_text, tokenize
from .policy import (
    EvictionBudget,
    H2OAccumulator,
    PolicyKind,
    allocate,
    h2o_scores,
    plan_from_allocation,
    plan_h2o,
    plan_oldest,
    plan_random,
)
from .scoring import (
    AttentionRow,
    ProbeConfig,
    ScoreTensor,
    StepScores,
    aggregate_step_scores,
    extract_token_scores,
)
from .trace import MarkerSet, ReasoningTrace, Segmentation, Token, default_marker_set, segment

FULL_KV_NAME = "full"


@dataclass(frozen=True)
class DecodeConfig:
    """Everything a run needs besides the model and the prompt."""

    max_new_tokens: int
    probe: ProbeConfig
    policy: PolicyKind | None = None
    budget: EvictionBudget | CacheBudget | None = None
    greedy: bool = True
    temperature: float = 0.6
    top_p: float = 0.95
    sampling_seed: int = 0
    eviction_seed: int = 0
    recent_window: int = 0
    keep_dumps: bool = False

    def __post_init__(self) -> None:
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        if not self.greedy and self.temperature <= 0:
            raise ValueError("temperature must be > 0 unless decoding greedily")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.recent_window < 0:
            raise ValueError("recent_window must be >= 0")
        if self.policy is None:
            if self.budget is not None:
                raise ValueError("a budget without a policy has no effect; drop one")
        else:
            if isinstance(self.budget, CacheBudget):
                if self.budget.mode is not BudgetMode.RATIO:
                    raise ValueError("periodic pruning takes an EvictionBudget, not a CacheBudget")
            elif not isinstance(self.budget, EvictionBudget):
                raise ValueError("an active policy requires an EvictionBudget or ratio CacheBudget")

    @property
    def policy_name(self) -> str:
        return FULL_KV_NAME if self.policy is None else self.policy.value


@dataclass
class ProbeRecord:
    """What one probe-and-prune round saw and did."""

    round_index: int
    reasoning_tokens: int
    ran_probe: bool = False
    skipped: bool = False
    skip_reason: str | None = None
    scores_digest: str | None = None
    scores: list | None = None
    step_scores: list | None = None
    allocation: list | None = None
    evicted: list | None = None
    plan_sizes: list | None = None
    evicted_total: int = 0
    dump: dict | None = None

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "reasoning_tokens": self.reasoning_tokens,
            "ran_probe": self.ran_probe,
            "skipped": self.skipped,
            "skip_reason": self.skip_reason,
            "scores_digest": self.scores_digest,
            "scores": self.scores,
            "step_scores": self.step_scores,
            "allocation": self.allocation,
            "evicted": self.evicted,
            "plan_sizes": self.plan_sizes,
            "evicted_total": self.evicted_total,
            "dump": self.dump,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeRecord":
        return cls(**data)


@dataclass
class ProbeArtifacts:
    """In-memory objects from a probe round, for callers that need more than JSON."""

    scores: ScoreTensor
    seg: Segmentation
    step_scores: StepScores


@dataclass
class RunRecord:
    """Full log of one decode run."""

    model: dict
    policy: str
    budget: dict | None
    prompt_len: int
    generated_ids: list[int]
    reasoning_len: int
    think_end_emitted: bool
    probe_records: list[ProbeRecord]
    # one row per decode step: [step, avg live per (layer, head), max live, non-prompt live]
    occupancy: list[list[float]]
    final_stats: dict
    avg_kv: float
    peak_kv: int
    evicted_total: int
    seeds: dict
    timings_ms: dict[str, float] = field(default_factory=dict)

    @property
    def probe_rounds(self) -> int:
        return len(self.probe_records)

    @property
    def tokens_generated(self) -> int:
        return len(self.generated_ids)

    def to_dict(self, include_timings: bool = False) -> dict:
        data = {
            "model": self.model,
            "policy": self.policy,
            "budget": self.budget,
            "prompt_len": self.prompt_len,
            "generated_ids": self.generated_ids,
            "reasoning_len": self.reasoning_len,
            "think_end_emitted": self.think_end_emitted,
            "probe_records": [rec.to_dict() for rec in self.probe_records],
            "occupancy": self.occupancy,
            "final_stats": self.final_stats,
            "avg_kv": self.avg_kv,
            "peak_kv": self.peak_kv,
            "evicted_total": self.evicted_total,
            "seeds": self.seeds,
        }
        if include_timings:
            data["timings_ms"] = self.timings_ms
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        data = dict(data)
        data["probe_records"] = [ProbeRecord.from_dict(r) for r in data.get("probe_records", [])]
        data.setdefault("timings_ms", {})
        return cls(**data)


def decode_step(state: KvCacheState, model: TinyDecoder, token_id: int, position: int) -> StepOutput:
    """Forward one token over the live keys and commit its K/V to the cache.

    Softmax runs only over live positions per (layer, head). Raises
    SequenceTooLong past the model's maximum length, before mutating.
    """
    out = model.forward_step(state, token_id, position)
    state.append(position, out.keys, out.values)
    return out


def requery_logits(state: KvCacheState, model: TinyDecoder, token_id: int, position: int) -> np.ndarray:
    """Recompute a token's logits over the current (possibly pruned) cache.

    Query-only pass: nothing is appended, the token's own K/V participate
    only where they are still live.
    """
    return model.forward_step(state, token_id, position, include_new_kv=False).logits


def eviction_candidates(state: KvCacheState, trace: ReasoningTrace, *, sequence_end: int):
    """Predicate for tokens a plan may touch: live reasoning tokens outside
    the prompt and recent window, before sequence_end (probe tokens excluded)."""
    reason_start = trace.reason_start

    def eligible(layer: int, head: int, token: int) -> bool:
        return (
            reason_start <= token < sequence_end
            and not state.is_protected(token, sequence_end=sequence_end)
            and state.is_live(layer, head, token)
        )

    return eligible


def _scores_to_lists(scores: ScoreTensor) -> list:
    return [
        [layer, head, [[t, s] for t, s in sorted(scores.head_scores(layer, head).items())]]
        for layer in range(scores.num_layers)
        for head in range(scores.num_heads)
    ]


def _step_scores_to_lists(step_scores: StepScores) -> list:
    return [
        [layer, [[sid, value] for sid, value in step_scores.layer_entries(layer)]]
        for layer in sorted(step_scores.by_layer)
    ]


def _plan_to_lists(plan) -> tuple[list, list]:
    evicted = [
        [layer, [sorted(plan.head_set(layer, head)) for head in range(plan.num_heads)]]
        for layer in range(plan.num_layers)
    ]
    sizes = [
        [layer, [len(plan.head_set(layer, head)) for head in range(plan.num_heads)]]
        for layer in range(plan.num_layers)
    ]
    return evicted, sizes


def _allocation_to_lists(allocation) -> list:
    return [
        [layer, [[sid, count] for sid, count in allocation.layer_order(layer)]]
        for layer in sorted(allocation.by_layer)
    ]


def _dense_dump(rows: dict[tuple[int, int], dict[int, float]],
                num_layers: int, num_heads: int, length: int, probe_position: int) -> dict:
    return {
        "layers": num_layers,
        "heads": num_heads,
        "probe_position": probe_position,
        "rows": [
            [
                [rows[(layer, head)].get(t, 0.0) for t in range(length)]
                for head in range(num_heads)
            ]
            for layer in range(num_layers)
        ],
    }


def probe_cycle(
    state: KvCacheState,
    model: TinyDecoder,
    trace: ReasoningTrace,
    markers: MarkerSet,
    probe: ProbeConfig,
    policy: PolicyKind,
    budget: EvictionBudget | None,
    *,
    h2o: H2OAccumulator | None = None,
    eviction_seed: int = 0,
    round_index: int = 0,
    keep_dump: bool = False,
) -> tuple[ProbeRecord, ProbeArtifacts | None]:
    """One probe-and-prune round; the cache is updated in place.

    Appends the probe, captures the end-of-thinking attention rows, scores
    and segments, plans per the active policy (skipped when budget is None,
    e.g. under a ratio cap where eviction happens at append time), applies
    the plan, then removes every probe token. If the model already produced
    its own end-of-thinking token the cycle is skipped entirely.
    """
    num_layers, num_heads = state.num_layers, state.num_heads
    reasoning_ids = [tok.id for tok in trace.tokens[trace.reason_start:]]
    record = ProbeRecord(round_index=round_index, reasoning_tokens=len(reasoning_ids))
    if probe.think_end_token_id in reasoning_ids:
        record.skipped = True
        record.skip_reason = "post-reasoning"
        return record, None

    probe_tokens = tokenize(probe.prompt_text, model.config.vocab_size)
    if probe_tokens[-1][0] != probe.think_end_token_id:
        raise ValueError("probe prompt does not tokenize to end with the end-of-thinking id")
    base = len(trace.tokens)
    pre_live = state.live_sets()
    last_rows: dict[tuple[int, int], dict[int, float]] | None = None
    try:
        for offset, (pid, _text) in enumerate(probe_tokens):
            out = decode_step(state, model, pid, base + offset)
            last_rows = out.rows
        record.ran_probe = True
        eligible = eviction_candidates(state, trace, sequence_end=base)
        rows = [AttentionRow(layer, head, last_rows[(layer, head)])
                for layer in range(num_layers) for head in range(num_heads)]
        scores = extract_token_scores(
            rows, trace, eligible, num_layers=num_layers, num_heads=num_heads, reason_end=base
        )
        seg = segment(trace, markers)
        step_scores = aggregate_step_scores(scores, seg, eligible)
        record.scores_digest = scores.digest()
        record.scores = _scores_to_lists(scores)
        record.step_scores = _step_scores_to_lists(step_scores)
        if keep_dump:
            record.dump = _dense_dump(
                last_rows, num_layers, num_heads,
                base + len(probe_tokens), base + len(probe_tokens) - 1,
            )
        if budget is not None:
            allocation = None
            if policy is PolicyKind.HIERARCHICAL:
                allocation = allocate(step_scores, seg, eligible, budget)
                plan = plan_from_allocation(scores, seg, eligible, allocation)
            elif policy is PolicyKind.RANDOM:
                plan = plan_random(num_layers, num_heads, base, eligible, budget,
                                   (eviction_seed, round_index))
            elif policy is PolicyKind.H2O:
                if h2o is None:
                    raise ValueError("the h2o policy needs an H2OAccumulator")
                acc = h2o_scores(h2o.history(), num_layers, num_heads, eligible)
                plan = plan_h2o(acc, base, eligible, budget)
            elif policy is PolicyKind.STREAMING:
                plan = plan_oldest(num_layers, num_heads, base, eligible, budget)
            else:
                raise ValueError(f"unknown policy {policy!r}")
            state.apply_plan(plan, sequence_end=base)
            if allocation is not None:
                record.allocation = _allocation_to_lists(allocation)
            record.evicted, record.plan_sizes = _plan_to_lists(plan)
            record.evicted_total = plan.total()
    finally:
        state.remove_suffix(base)

    post_live = state.live_sets()
    for key, live in post_live.items():
        if any(t >= base for t in live):
            raise ProbeLeak(f"probe token survived at (layer, head) {key}")
        if not live <= pre_live[key]:
            raise ProbeLeak(f"live set grew during the probe cycle at (layer, head) {key}")
    return record, ProbeArtifacts(scores, seg, step_scores)


class _ScoreContext:
    """Latest probe artifacts, consulted by ratio-mode victim selection."""

    def __init__(self) -> None:
        self.scores: ScoreTensor | None = None
        self.step_value: dict[tuple[int, int], float] = {}
        self.step_of: dict[int, int] = {}

    def update(self, artifacts: ProbeArtifacts) -> None:
        self.scores = artifacts.scores
        self.step_value = {
            (layer, sid): value
            for layer, entries in artifacts.step_scores.by_layer.items()
            for sid, value in entries
        }
        self.step_of = {
            token: sid
            for sid, step in enumerate(artifacts.seg.steps)
            for token in range(step.start, step.end)
        }


def _make_victim_selector(
    policy: PolicyKind,
    state: KvCacheState,
    h2o: H2OAccumulator,
    context: _ScoreContext,
    eviction_seed: int,
):
    """Per-append overflow victim choice for ratio budgets."""
    inf = float("inf")

    if policy is PolicyKind.STREAMING:
        def select(layer: int, head: int, eligible: list[int], count: int) -> list[int]:
            return eligible[:count]
    elif policy is PolicyKind.RANDOM:
        def select(layer: int, head: int, eligible: list[int], count: int) -> list[int]:
            rng = np.random.default_rng([eviction_seed, state.next_index, layer, head])
            picked = rng.choice(len(eligible), size=count, replace=False)
            return [eligible[int(i)] for i in picked]
    elif policy is PolicyKind.H2O:
        def select(layer: int, head: int, eligible: list[int], count: int) -> list[int]:
            acc = h2o.history()[(layer, head)]
            return sorted(eligible, key=lambda t: (acc.get(t, 0.0), t))[:count]
    elif policy is PolicyKind.HIERARCHICAL:
        def select(layer: int, head: int, eligible: list[int], count: int) -> list[int]:
            head_scores = context.scores.head_scores(layer, head) if context.scores else {}

            def rank(token: int):
                sid = context.step_of.get(token)
                step_c = context.step_value.get((layer, sid), inf) if sid is not None else inf
                return (step_c, head_scores.get(token, inf), token)

            return sorted(eligible, key=rank)[:count]
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return select


def _sample_token(logits: np.ndarray, config: DecodeConfig, rng: np.random.Generator) -> int:
    if config.greedy:
        return int(np.argmax(logits))
    z = logits / config.temperature
    z = z - z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    cut = int(np.searchsorted(np.cumsum(probs[order]), config.top_p)) + 1
    keep = order[:cut]
    kept = probs[keep] / probs[keep].sum()
    return int(rng.choice(keep, p=kept))


def run(
    model: TinyDecoder | TinyModelConfig,
    prompt: str | list[tuple[int, str]],
    config: DecodeConfig,
    *,
    markers: MarkerSet | None = None,
    on_step=None,
    on_probe=None,
) -> RunRecord:
    """Generate up to max_new_tokens, probing and pruning on schedule.

    Probe rounds fire after every interval_p newly generated reasoning
    tokens and never once the model has emitted its own end-of-thinking
    token. All randomness flows from the config seeds; repeated runs are
    bitwise identical. on_step(step, state) and on_probe(pre, post, record)
    are observation hooks for tests and reporting.
    """
    if isinstance(model, TinyModelConfig):
        model = TinyDecoder(model)
    cfg = model.config
    markers = markers if markers is not None else default_marker_set()
    if isinstance(prompt, str):
        prompt_tokens = tokenize(prompt, cfg.vocab_size)
    else:
        prompt_tokens = [(int(tid), str(text)) for tid, text in prompt]
    if not prompt_tokens:
        raise ValueError("the prompt must contain at least one token")

    ratio_budget = config.budget if isinstance(config.budget, CacheBudget) else None
    periodic_budget = config.budget if isinstance(config.budget, EvictionBudget) else None
    recent = ratio_budget.recent_window if ratio_budget is not None else config.recent_window
    protected = ProtectedRegions(len(prompt_tokens), recent)
    state = KvCacheState(cfg.num_layers, cfg.num_heads, cfg.head_dim, protected)
    h2o = H2OAccumulator(cfg.num_layers, cfg.num_heads)
    context = _ScoreContext()
    selector = (
        _make_victim_selector(config.policy, state, h2o, context, config.eviction_seed)
        if ratio_budget is not None
        else None
    )
    # Ratio caps evict at append time; probe rounds then only refresh scores,
    # which only the hierarchical policy consumes.
    probes_enabled = config.policy is not None and (
        periodic_budget is not None or config.policy is PolicyKind.HIERARCHICAL
    )

    rng = np.random.default_rng(config.sampling_seed)
    timings = {"prefill_ms": 0.0, "decode_ms": 0.0, "probe_ms": 0.0}
    tokens: list[Token] = []

    started = perf_counter()
    logits = None
    for i, (tid, text) in enumerate(prompt_tokens):
        logits = decode_step(state, model, tid, i).logits
        tokens.append(Token(i, tid, text))
    timings["prefill_ms"] = (perf_counter() - started) * 1e3

    generated: list[int] = []
    records: list[ProbeRecord] = []
    occupancy: list[list[float]] = []
    reasoning_active = True
    reason_len: int | None = None

    while len(generated) < config.max_new_tokens:
        next_id = _sample_token(logits, config, rng)
        position = len(tokens)
        step_started = perf_counter()
        if ratio_budget is not None:
            enforce_budget(state, ratio_budget, selector)
        out = decode_step(state, model, next_id, position)
        logits = out.logits
        timings["decode_ms"] += (perf_counter() - step_started) * 1e3
        tokens.append(Token(position, next_id, token_text(next_id)))
        generated.append(next_id)
        for (layer, head), row in out.rows.items():
            h2o.update(layer, head, row)
        if next_id == config.probe.think_end_token_id and reasoning_active:
            reasoning_active = False
            reason_len = len(generated) - 1
        if (
            next_id != EOS_ID
            and probes_enabled
            and reasoning_active
            and len(generated) % config.probe.interval_p == 0
        ):
            trace = ReasoningTrace(tuple(tokens), len(prompt_tokens))
            pre = state.live_sets() if on_probe is not None else None
            probe_started = perf_counter()
            record, artifacts = probe_cycle(
                state, model, trace, markers, config.probe, config.policy,
                periodic_budget,
                h2o=h2o,
                eviction_seed=config.eviction_seed,
                round_index=len(records),
                keep_dump=config.keep_dumps,
            )
            timings["probe_ms"] += (perf_counter() - probe_started) * 1e3
            records.append(record)
            if artifacts is not None:
                context.update(artifacts)
            if record.evicted_total > 0:
                logits = requery_logits(state, model, next_id, position)
            if on_probe is not None:
                on_probe(pre, state.live_sets(), record)
        snapshot = state.stats()
        occupancy.append([
            len(generated),
            snapshot.average_live,
            snapshot.peak_live,
            state.live_nonprompt_count(0, 0),
        ])
        if on_step is not None:
            on_step(len(generated), state)
        if next_id == EOS_ID:
            break

    if reasoning_active:
        reason_len = len(generated)
    final = state.stats()
    if occupancy:
        avg_kv = sum(row[1] for row in occupancy) / len(occupancy)
        peak_kv = int(max(row[2] for row in occupancy))
    else:
        avg_kv = final.average_live
        peak_kv = final.peak_live

    if ratio_budget is not None:
        budget_info = {
            "mode": "ratio",
            "ratio": ratio_budget.ratio,
            "max_slots": ratio_budget.max_slots,
            "recent_window": ratio_budget.recent_window,
        }
    elif periodic_budget is not None:
        budget_info = {"mode": "periodic", "k": periodic_budget.k}
    else:
        budget_info = None

    return RunRecord(
        model=cfg.to_dict(),
        policy=config.policy_name,
        budget=budget_info,
        prompt_len=len(prompt_tokens),
        generated_ids=generated,
        reasoning_len=reason_len,
        think_end_emitted=not reasoning_active,
        probe_records=records,
        occupancy=occupancy,
        final_stats=final.to_report_dict(cfg.num_layers, cfg.num_heads),
        avg_kv=avg_kv,
        peak_kv=peak_kv,
        evicted_total=state.evicted_total,
        seeds={
            "model": cfg.rng_seed,
            "sampling": config.sampling_seed,
            "eviction": config.eviction_seed,
        },
        timings_ms=timings,
    )
