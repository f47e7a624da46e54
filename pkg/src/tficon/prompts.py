"""Normal, null and exceptional prompt embeddings.

The exceptional prompt repeats one token id over the full context length and
skips the positional table, so every row of the embedding is the same vector.
Any cross-attention over it is uniform (``1 / l`` everywhere) whatever the
query, and its output adds the same vector to every patch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional, Protocol, Sequence

import numpy as np

from .attention import attention_maps
from .errors import ConfigError, ContractError

DEFAULT_TOKEN = 7788
FLAVORS = ("normal", "null", "exceptional")


class TextEncoderHandle(Protocol):
    vocab_size: int
    max_length: int
    sot_token: int
    eot_token: int
    pad_token: int

    def tokenize(self, text: str) -> list: ...

    def embed(self, ids: Sequence[int], positional: bool = True) -> np.ndarray: ...


@dataclass(frozen=True)
class PromptEmbedding:
    matrix: np.ndarray
    flavor: str
    token_value: Optional[int] = None
    positional_embeddings_applied: bool = True

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ContractError(f"unknown prompt flavor {self.flavor!r}")

    @property
    def length(self) -> int:
        return self.matrix.shape[0]


def build_exceptional(encoder: TextEncoderHandle, token_value: int = DEFAULT_TOKEN,
                      l: Optional[int] = None) -> PromptEmbedding:
    """``l`` copies of ``token_value`` with no special tokens and no positions."""
    l = encoder.max_length if l is None else l
    if l < 1:
        raise ConfigError(f"prompt length must be >= 1, got {l}")
    if not 0 <= token_value < encoder.vocab_size:
        raise ConfigError(f"token value {token_value} outside vocabulary [0, {encoder.vocab_size})")
    matrix = encoder.embed([int(token_value)] * l, positional=False)
    return PromptEmbedding(matrix, "exceptional", int(token_value), False)


def _special_layout(encoder: TextEncoderHandle, words: list, l: int) -> list:
    ids = [encoder.sot_token] + list(words)[: max(l - 2, 0)] + [encoder.eot_token]
    ids = ids[:l]
    return ids + [encoder.pad_token] * (l - len(ids))


def build_null(encoder: TextEncoderHandle, l: Optional[int] = None) -> PromptEmbedding:
    l = encoder.max_length if l is None else l
    ids = _special_layout(encoder, [], l)
    return PromptEmbedding(encoder.embed(ids, positional=True), "null")


def build_normal(encoder: TextEncoderHandle, text: str, l: Optional[int] = None) -> PromptEmbedding:
    """Embed ``text`` with start/end/pad tokens and positions; truncates with a warning."""
    l = encoder.max_length if l is None else l
    words = encoder.tokenize(text)
    if not words:
        return build_null(encoder, l)
    if len(words) > l - 2:
        warnings.warn(f"prompt has {len(words)} tokens, truncated to {l - 2}", stacklevel=2)
    ids = _special_layout(encoder, words, l)
    return PromptEmbedding(encoder.embed(ids, positional=True), "normal")


class CrossProjections(NamedTuple):
    query: np.ndarray
    key: np.ndarray
    value: Optional[np.ndarray] = None


def cross_attention(image_features, prompt: PromptEmbedding, projections: CrossProjections):
    """Text cross-attention map ``(s, l)`` and, when a value projection is given, output."""
    f = np.asarray(image_features, dtype=np.float64)
    T = np.asarray(prompt.matrix, dtype=np.float64)
    A = attention_maps(f @ projections.query, T @ projections.key)
    out = None if projections.value is None else A @ (T @ projections.value)
    return A, out


def uniform_cross_attention(image_features, prompt: PromptEmbedding,
                            projections: CrossProjections) -> np.ndarray:
    if prompt.flavor != "exceptional":
        raise ContractError("uniform_cross_attention needs an exceptional prompt; "
                            "use cross_attention for other flavors")
    return cross_attention(image_features, prompt, projections)[0]
