"""Tokenized reasoning traces and marker-phrase step segmentation.

A trace is a prompt followed by generated reasoning text, kept token by
token so that character positions and token indices can be mapped both
ways. Segmentation slices the reasoning region into steps, opening a new
step wherever a marker phrase ("Wait", "Alternatively", ...) occurs at a
word boundary.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from .errors import EmptyReasoningRegion, InputFormatError, OffsetOutOfRange

# Reflection/sequencing markers that open a new reasoning step. Order is
# meaningful (first occurrence wins on duplicates) and several phrases use
# the right single quote U+2019 rather than an ASCII apostrophe.
DEFAULT_MARKER_PHRASES: tuple[str, ...] = (
    "Wait",
    "Alternatively",
    "Another angle",
    "Another approach",
    "But wait",
    "Hold on",
    "Hmm",
    "Maybe",
    "Looking back",
    "Okay",
    "Let me",
    "First",
    "Then",
    "Alright",
    "Compute",
    "Correct",
    "Good",
    "Got it",
    "I don’t see any errors",
    "I think",
    "Let me double-check",
    "Let’s see",
    "Now",
    "Remember",
    "Seems solid",
    "Similarly",
    "So",
    "Starting",
    "That’s correct",
    "That seems right",
    "Therefore",
    "Thus",
)

# Sentence punctuation that may directly precede a marker occurrence.
_BOUNDARY_PUNCT = ".,;:!?"


@dataclass(frozen=True)
class Token:
    """One vocabulary token at a fixed position in the full sequence."""

    index: int
    id: int
    text: str

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"token index must be non-negative, got {self.index}")
        if self.id < 0:
            raise ValueError(f"token id must be non-negative, got {self.id}")


@dataclass(frozen=True)
class ReasoningTrace:
    """A tokenized prompt plus the reasoning region generated after it.

    Tokens [0, prompt_len) belong to the problem prompt; the reasoning
    region is tokens[reason_start:] with reason_start == prompt_len.
    Instances are immutable and safe to share between threads.
    """

    tokens: tuple[Token, ...]
    prompt_len: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        for pos, tok in enumerate(self.tokens):
            if tok.index != pos:
                raise ValueError(
                    f"token indices must be contiguous from 0, found index {tok.index} at position {pos}"
                )
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise ValueError(
                f"prompt_len {self.prompt_len} outside [0, {len(self.tokens)}]"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def reason_start(self) -> int:
        return self.prompt_len

    @cached_property
    def full_text(self) -> str:
        """Concatenation of all token texts; reproduces the original text exactly."""
        return "".join(tok.text for tok in self.tokens)

    @cached_property
    def _char_ends(self) -> tuple[int, ...]:
        ends: list[int] = []
        total = 0
        for tok in self.tokens:
            total += len(tok.text)
            ends.append(total)
        return tuple(ends)

    @property
    def text_len(self) -> int:
        return self._char_ends[-1] if self.tokens else 0

    @property
    def reasoning_char_start(self) -> int:
        """Character offset where the reasoning region begins in full_text."""
        if self.prompt_len == 0:
            return 0
        return self._char_ends[self.prompt_len - 1]

    @property
    def reasoning_text(self) -> str:
        return self.full_text[self.reasoning_char_start:]

    def token_of_char(self, char_offset: int) -> int:
        """Index of the token whose text span contains char_offset.

        Zero-width tokens (empty text) never contain an offset.
        """
        if not 0 <= char_offset < self.text_len:
            raise OffsetOutOfRange(
                f"char offset {char_offset} outside [0, {self.text_len})"
            )
        return bisect_right(self._char_ends, char_offset)


@dataclass(frozen=True)
class MarkerSet:
    """Ordered set of marker phrases; duplicates dropped, first occurrence kept."""

    phrases: tuple[str, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        kept: list[str] = []
        for phrase in self.phrases:
            if not phrase:
                raise ValueError("marker phrases must be non-empty")
            if phrase not in seen:
                seen.add(phrase)
                kept.append(phrase)
        if not kept:
            raise ValueError("a marker set must contain at least one phrase")
        object.__setattr__(self, "phrases", tuple(kept))

    def __contains__(self, phrase: str) -> bool:
        return phrase in self.phrases

    def __len__(self) -> int:
        return len(self.phrases)


def default_marker_set() -> MarkerSet:
    """The built-in 32-phrase marker set, order preserved."""
    return MarkerSet(DEFAULT_MARKER_PHRASES)


@dataclass(frozen=True)
class Step:
    """A contiguous token span [start, end) of the reasoning region."""

    start: int
    end: int
    marker: str | None = None

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValueError(f"step span [{self.start}, {self.end}) is empty")

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Segmentation:
    """Ordered steps covering the reasoning region exactly, no gaps or overlaps."""

    steps: tuple[Step, ...]
    trace_len: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("a segmentation must contain at least one step")
        for left, right in zip(self.steps, self.steps[1:]):
            if left.end != right.start:
                raise ValueError(
                    f"steps must be contiguous: [{left.start},{left.end}) then [{right.start},{right.end})"
                )
        if self.steps[-1].end != self.trace_len:
            raise ValueError(
                f"last step ends at {self.steps[-1].end}, trace has {self.trace_len} tokens"
            )

    def step_of_token(self, token_index: int) -> int:
        """Step id containing token_index; raises if outside the reasoning region."""
        for sid, step in enumerate(self.steps):
            if step.start <= token_index < step.end:
                return sid
        raise ValueError(f"token {token_index} is not inside any step")


def _starts_word(text: str, pos: int) -> bool:
    if pos == 0:
        return True
    prev = text[pos - 1]
    return prev.isspace() or prev in _BOUNDARY_PUNCT


def _scan_marker_occurrences(text: str, phrases: tuple[str, ...]) -> list[tuple[int, str]]:
    """Left-to-right scan for marker occurrences.

    A match must start at a word boundary (start of text, after whitespace,
    or after sentence punctuation) and must not be followed by a letter.
    The longest phrase wins at a position, and no match may begin inside a
    match that was already consumed.
    """
    by_length = sorted(phrases, key=len, reverse=True)
    found: list[tuple[int, str]] = []
    pos = 0
    n = len(text)
    while pos < n:
        if _starts_word(text, pos):
            hit: str | None = None
            for phrase in by_length:
                end = pos + len(phrase)
                if text.startswith(phrase, pos) and (end >= n or not text[end].isalpha()):
                    hit = phrase
                    break
            if hit is not None:
                found.append((pos, hit))
                pos += len(hit)
                continue
        pos += 1
    return found


def segment(trace: ReasoningTrace, markers: MarkerSet) -> Segmentation:
    """Split the reasoning region into steps at marker occurrences.

    The first step always begins at reason_start, marker or not. A marker
    opens a step at the token containing the occurrence's first character;
    two occurrences inside one token open a single step (earliest phrase
    recorded).
    """
    n = len(trace.tokens)
    if trace.reason_start >= n:
        raise EmptyReasoningRegion("trace has an empty reasoning region")
    text = trace.reasoning_text
    base = trace.reasoning_char_start
    opened: dict[int, str] = {}
    for pos, phrase in _scan_marker_occurrences(text, markers.phrases):
        tok = trace.token_of_char(base + pos)
        opened.setdefault(tok, phrase)
    bounds = sorted(set(opened) | {trace.reason_start})
    steps = [
        Step(start, bounds[i + 1] if i + 1 < len(bounds) else n, opened.get(start))
        for i, start in enumerate(bounds)
    ]
    return Segmentation(tuple(steps), n)


# --- file formats -----------------------------------------------------------
#
# Trace file (JSON, UTF-8): {"prompt_len": int, "tokens": [{"id": int, "text": str}, ...]}
# Segmentation file:        {"steps": [{"start": int, "end": int, "marker": str|null}, ...]}
# Marker file:              JSON array of phrase strings.


def trace_from_dict(data: object) -> ReasoningTrace:
    if not isinstance(data, dict):
        raise InputFormatError("trace document must be a JSON object")
    prompt_len = data.get("prompt_len")
    if not isinstance(prompt_len, int) or isinstance(prompt_len, bool) or prompt_len < 0:
        raise InputFormatError('trace field "prompt_len" must be a non-negative integer')
    raw_tokens = data.get("tokens")
    if not isinstance(raw_tokens, list):
        raise InputFormatError('trace field "tokens" must be a list')
    tokens: list[Token] = []
    for i, item in enumerate(raw_tokens):
        if not isinstance(item, dict):
            raise InputFormatError(f'trace field "tokens[{i}]" must be an object')
        tid = item.get("id")
        if not isinstance(tid, int) or isinstance(tid, bool) or tid < 0:
            raise InputFormatError(f'trace field "tokens[{i}].id" must be a non-negative integer')
        text = item.get("text")
        if not isinstance(text, str):
            raise InputFormatError(f'trace field "tokens[{i}].text" must be a string')
        tokens.append(Token(i, tid, text))
    if prompt_len > len(tokens):
        raise InputFormatError('trace field "prompt_len" exceeds the number of tokens')
    return ReasoningTrace(tuple(tokens), prompt_len)


def trace_to_dict(trace: ReasoningTrace) -> dict:
    return {
        "prompt_len": trace.prompt_len,
        "tokens": [{"id": tok.id, "text": tok.text} for tok in trace.tokens],
    }


def load_trace(path: str | Path) -> ReasoningTrace:
    with open(path, encoding="utf-8") as fh:
        return trace_from_dict(json.load(fh))


def save_trace(trace: ReasoningTrace, path: str | Path) -> None:
    Path(path).write_text(json.dumps(trace_to_dict(trace), ensure_ascii=False), encoding="utf-8")


def markers_from_dict(data: object) -> MarkerSet:
    if not isinstance(data, list) or not all(isinstance(p, str) for p in data):
        raise InputFormatError("marker document must be a JSON array of strings")
    if not data or any(not p for p in data):
        raise InputFormatError("marker document must contain non-empty phrases")
    return MarkerSet(tuple(data))


def load_markers(path: str | Path) -> MarkerSet:
    with open(path, encoding="utf-8") as fh:
        return markers_from_dict(json.load(fh))


def segmentation_to_dict(seg: Segmentation) -> dict:
    return {
        "steps": [
            {"start": step.start, "end": step.end, "marker": step.marker}
            for step in seg.steps
        ]
    }


def segmentation_from_dict(data: object) -> Segmentation:
    if not isinstance(data, dict) or not isinstance(data.get("steps"), list):
        raise InputFormatError('segmentation document must be an object with a "steps" list')
    steps = []
    for i, item in enumerate(data["steps"]):
        try:
            steps.append(Step(item["start"], item["end"], item.get("marker")))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputFormatError(f'segmentation field "steps[{i}]" is malformed: {exc}') from exc
    if not steps:
        raise InputFormatError('segmentation field "steps" must be non-empty')
    return Segmentation(tuple(steps), steps[-1].end)
