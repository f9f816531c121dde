"""A tiny deterministic transformer decoder used as the attention provider.

Pre-norm blocks, rotary positions bound to original token indices (so
evicting a key never shifts the geometry of the survivors), multi-head
attention restricted to whatever the cache says is live. Weights are drawn
once from a seed and kept in float32, which is also the serialized form;
all arithmetic runs in float64 so the incremental and batch paths agree to
near machine precision.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputFormatError, SequenceTooLong
from .scoring import DEFAULT_THINK_END_TOKEN_ID, THINK_END_TEXT

PAD_ID = 0
THINK_END_ID = DEFAULT_THINK_END_TOKEN_ID
EOS_ID = 2
NUM_RESERVED_IDS = 4

ROPE_BASE = 10000.0
_RMS_EPS = 1e-6

# Surface forms for generated ids. Several single-word step markers and the
# pieces of multi-word ones ("But wait", "Hold on", "Let me") are included so
# toy generations segment into multiple steps.
_WORDS = (
    "Wait", "So", "First", "Then", "Now", "Maybe", "Hmm", "Okay", "Alright",
    "Compute", "Correct", "Good", "Thus", "Therefore", "Similarly", "Starting",
    "Remember", "Alternatively", "But", "wait", "Hold", "on", "Let", "me",
    "the", "a", "sum", "term", "value", "answer", "check", "again", "equals",
    "plus", "minus", "times", "two", "three", "four", "five", "six", "x", "y",
    "z", "step", "result", "so", "now", "then", "it", "is", "we", "get",
    "total", "number", "add", "half", "part", "count.", "done.",
)


def token_text(token_id: int) -> str:
    """Deterministic surface string for a generated token id."""
    if token_id == THINK_END_ID:
        return THINK_END_TEXT
    if token_id < NUM_RESERVED_IDS:
        return ""
    return " " + _WORDS[(token_id - NUM_RESERVED_IDS) % len(_WORDS)]


def tokenize(text: str, vocab_size: int) -> list[tuple[int, str]]:
    """Toy tokenizer: whitespace-attached chunks hashed into the vocabulary.

    The literal end-of-thinking string always maps to its reserved id, and
    concatenating the returned texts reproduces the input exactly.
    """
    if vocab_size <= NUM_RESERVED_IDS:
        raise ValueError(f"vocab_size must exceed {NUM_RESERVED_IDS}")
    span = vocab_size - NUM_RESERVED_IDS
    out: list[tuple[int, str]] = []
    parts = text.split(THINK_END_TEXT)
    for i, part in enumerate(parts):
        consumed = 0
        for match in re.finditer(r"\s*\S+", part):
            chunk = match.group(0)
            out.append((NUM_RESERVED_IDS + zlib.crc32(chunk.encode("utf-8")) % span, chunk))
            consumed = match.end()
        if consumed < len(part):
            out.append((PAD_ID, part[consumed:]))
        if i + 1 < len(parts):
            out.append((THINK_END_ID, THINK_END_TEXT))
    return out


@dataclass(frozen=True)
class TinyModelConfig:
    vocab_size: int = 64
    num_layers: int = 2
    num_heads: int = 2
    model_dim: int = 32
    head_dim: int = 16
    max_seq_len: int = 512
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.num_layers, self.num_heads, self.model_dim,
               self.head_dim, self.max_seq_len) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != num_heads {self.num_heads} x head_dim {self.head_dim}"
            )
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary positions")
        if self.vocab_size <= NUM_RESERVED_IDS:
            raise ValueError(f"vocab_size must exceed {NUM_RESERVED_IDS}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "model_dim": self.model_dim,
            "head_dim": self.head_dim,
            "max_seq_len": self.max_seq_len,
            "rng_seed": self.rng_seed,
        }


@dataclass
class StepOutput:
    """Result of running one token through the decoder."""

    logits: np.ndarray
    # (layer, head) -> {key token index: attention weight}
    rows: dict[tuple[int, int], dict[int, float]]
    keys: np.ndarray | None
    values: np.ndarray | None
    queries: np.ndarray | None = None


def _silu(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    ex = np.exp(shifted)
    return ex / ex.sum()


class TinyDecoder:
    """Deterministic numpy decoder; weights fully determined by the config seed."""

    def __init__(self, config: TinyModelConfig):
        self.config = config
        rng = np.random.default_rng(config.rng_seed)
        d, v, f = config.model_dim, config.vocab_size, 4 * config.model_dim

        def normal(*shape: int, scale: float) -> np.ndarray:
            return (rng.standard_normal(shape, dtype=np.float32) * np.float32(scale))

        weights: dict[str, np.ndarray] = {"embed": normal(v, d, scale=1.0)}
        for layer in range(config.num_layers):
            weights[f"layers.{layer}.attn_norm"] = np.ones(d, dtype=np.float32)
            weights[f"layers.{layer}.wq"] = normal(d, d, scale=1.0 / math.sqrt(d))
            weights[f"layers.{layer}.wk"] = normal(d, d, scale=1.0 / math.sqrt(d))
            weights[f"layers.{layer}.wv"] = normal(d, d, scale=1.0 / math.sqrt(d))
            weights[f"layers.{layer}.wo"] = normal(d, d, scale=1.0 / math.sqrt(d))
            weights[f"layers.{layer}.mlp_norm"] = np.ones(d, dtype=np.float32)
            weights[f"layers.{layer}.mlp_in"] = normal(d, f, scale=1.0 / math.sqrt(d))
            weights[f"layers.{layer}.mlp_out"] = normal(f, d, scale=1.0 / math.sqrt(f))
        weights["final_norm"] = np.ones(d, dtype=np.float32)
        weights["unembed"] = normal(d, v, scale=1.0 / math.sqrt(d))
        self._weights32 = weights
        self._refresh_working_copies()

    def _refresh_working_copies(self) -> None:
        self._w = {name: arr.astype(np.float64) for name, arr in self._weights32.items()}
        half = self.config.head_dim // 2
        self._inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / self.config.head_dim)

    def weight_names(self) -> list[str]:
        return list(self._weights32)

    # --- numerics ---------------------------------------------------------

    def _rms(self, x: np.ndarray, gain: np.ndarray) -> np.ndarray:
        scale = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _RMS_EPS)
        return x / scale * gain

    def _rope(self, heads: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Rotate per-head vectors by their original absolute positions.

        heads: (..., num_heads, head_dim); positions broadcast over the
        leading axes. First and second halves form the rotation pairs.
        """
        half = self.config.head_dim // 2
        angles = np.asarray(positions, dtype=np.float64)[..., None] * self._inv_freq
        cos = np.cos(angles)[..., None, :]
        sin = np.sin(angles)[..., None, :]
        x1 = heads[..., :half]
        x2 = heads[..., half:]
        return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    # --- incremental path ---------------------------------------------------

    def forward_step(
        self,
        cache,
        token_id: int,
        position: int,
        *,
        include_new_kv: bool = True,
        collect_queries: bool = False,
    ) -> StepOutput:
        """One token forward over the live cache entries.

        With include_new_kv the token's own key/value join the attention and
        are returned for the caller to commit; without it the token is
        assumed to be (possibly partially) represented in the cache already,
        and attention runs over the live entries alone.
        """
        cfg = self.config
        if position >= cfg.max_seq_len:
            raise SequenceTooLong(
                f"position {position} exceeds max_seq_len {cfg.max_seq_len}"
            )
        num_heads, head_dim = cfg.num_heads, cfg.head_dim
        x = self._w["embed"][token_id].copy()
        rows: dict[tuple[int, int], dict[int, float]] = {}
        new_keys = np.empty((cfg.num_layers, num_heads, head_dim)) if include_new_kv else None
        new_values = np.empty_like(new_keys) if include_new_kv else None
        queries = np.empty((cfg.num_layers, num_heads, head_dim)) if collect_queries else None
        inv_scale = 1.0 / math.sqrt(head_dim)
        for layer in range(cfg.num_layers):
            u = self._rms(x, self._w[f"layers.{layer}.attn_norm"])
            q = (u @ self._w[f"layers.{layer}.wq"]).reshape(num_heads, head_dim)
            k = (u @ self._w[f"layers.{layer}.wk"]).reshape(num_heads, head_dim)
            v = (u @ self._w[f"layers.{layer}.wv"]).reshape(num_heads, head_dim)
            q = self._rope(q, position)
            k = self._rope(k, position)
            if collect_queries:
                queries[layer] = q
            attn_out = np.empty((num_heads, head_dim))
            for head in range(num_heads):
                indices, key_mat, val_mat = cache.live_arrays(layer, head)
                if include_new_kv:
                    key_mat = np.vstack([key_mat, k[head][None, :]])
                    val_mat = np.vstack([val_mat, v[head][None, :]])
                    indices = indices + [position]
                if not indices:
                    raise ValueError(f"no live keys to attend to at ({layer}, {head})")
                weights = _softmax(key_mat @ q[head] * inv_scale)
                rows[(layer, head)] = dict(zip(indices, weights.tolist()))
                attn_out[head] = weights @ val_mat
            x = x + attn_out.reshape(cfg.model_dim) @ self._w[f"layers.{layer}.wo"]
            u2 = self._rms(x, self._w[f"layers.{layer}.mlp_norm"])
            x = x + _silu(u2 @ self._w[f"layers.{layer}.mlp_in"]) @ self._w[f"layers.{layer}.mlp_out"]
            if include_new_kv:
                new_keys[layer] = k
                new_values[layer] = v
        logits = self._rms(x, self._w["final_norm"]) @ self._w["unembed"]
        return StepOutput(logits, rows, new_keys, new_values, queries)

    # --- batch oracle path ----------------------------------------------------

    def reference_forward(
        self,
        token_ids,
        positions=None,
        key_mask: np.ndarray | None = None,
    ) -> np.ndarray:
        """Non-incremental forward with an arbitrary per-(layer, head) key mask.

        key_mask has shape (num_layers, num_heads, T, T); entry [l, h, i, j]
        True lets query i attend key j (always intersected with causality).
        Every query must at least see itself. Returns (T, vocab) logits.
        """
        cfg = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        t = len(ids)
        if t > cfg.max_seq_len:
            raise SequenceTooLong(f"sequence of {t} exceeds max_seq_len {cfg.max_seq_len}")
        pos = np.arange(t) if positions is None else np.asarray(positions, dtype=np.int64)
        causal = np.tril(np.ones((t, t), dtype=bool))
        if key_mask is None:
            key_mask = np.ones((cfg.num_layers, cfg.num_heads, t, t), dtype=bool)
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (cfg.num_layers, cfg.num_heads, t, t):
            raise ValueError(f"key_mask shape {key_mask.shape} does not match (L, H, T, T)")
        num_heads, head_dim = cfg.num_heads, cfg.head_dim
        inv_scale = 1.0 / math.sqrt(head_dim)
        x = self._w["embed"][ids]
        for layer in range(cfg.num_layers):
            u = self._rms(x, self._w[f"layers.{layer}.attn_norm"])
            q = self._rope((u @ self._w[f"layers.{layer}.wq"]).reshape(t, num_heads, head_dim), pos)
            k = self._rope((u @ self._w[f"layers.{layer}.wk"]).reshape(t, num_heads, head_dim), pos)
            v = (u @ self._w[f"layers.{layer}.wv"]).reshape(t, num_heads, head_dim)
            scores = np.einsum("qhd,khd->hqk", q, k) * inv_scale
            allow = causal[None, :, :] & key_mask[layer]
            if not np.all(allow.diagonal(axis1=1, axis2=2)):
                raise ValueError("every query must be allowed to attend to itself")
            scores = np.where(allow, scores, -np.inf)
            shifted = scores - scores.max(axis=-1, keepdims=True)
            ex = np.exp(shifted)
            weights = ex / ex.sum(axis=-1, keepdims=True)
            attn = np.einsum("hqk,khd->qhd", weights, v)
            x = x + attn.reshape(t, cfg.model_dim) @ self._w[f"layers.{layer}.wo"]
            u2 = self._rms(x, self._w[f"layers.{layer}.mlp_norm"])
            x = x + _silu(u2 @ self._w[f"layers.{layer}.mlp_in"]) @ self._w[f"layers.{layer}.mlp_out"]
        return self._rms(x, self._w["final_norm"]) @ self._w["unembed"]

    # --- serialization ----------------------------------------------------

    def save(self, path: str | Path) -> None:
        """One file: a JSON header line, then flat little-endian float32 data."""
        header = {
            "format": "tinydecoder-v1",
            "config": self.config.to_dict(),
            "order": self.weight_names(),
            "shapes": {name: list(arr.shape) for name, arr in self._weights32.items()},
        }
        blob = b"".join(self._weights32[name].astype("<f4").tobytes() for name in self.weight_names())
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8"))
            fh.write(b"\n")
            fh.write(blob)

    @classmethod
    def load(cls, path: str | Path) -> "TinyDecoder":
        raw = Path(path).read_bytes()
        newline = raw.find(b"\n")
        if newline < 0:
            raise InputFormatError('model file is missing the header line')
        try:
            header = json.loads(raw[:newline].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InputFormatError(f'model file header is not valid JSON: {exc}') from exc
        if header.get("format") != "tinydecoder-v1":
            raise InputFormatError('model file field "format" is not "tinydecoder-v1"')
        try:
            config = TinyModelConfig(**header["config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputFormatError(f'model file field "config" is malformed: {exc}') from exc
        model = cls(config)
        data = raw[newline + 1:]
        offset = 0
        for name in header.get("order", []):
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape))
            chunk = data[offset: offset + 4 * count]
            if len(chunk) != 4 * count:
                raise InputFormatError(f'model file is truncated at weight "{name}"')
            model._weights32[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
            offset += 4 * count
        if offset != len(data):
            raise InputFormatError("model file has trailing bytes after the declared weights")
        model._refresh_working_copies()
        return model
