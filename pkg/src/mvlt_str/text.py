"""
Character vocabulary, label encoding and text mask planning.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CharsetError, ConfigError, LabelError, ShapeError
from .vision import mask_count


logger = logging.getLogger(__name__)

DEFAULT_SYMBOLS = "abcdefghijklmnopqrstuvwxyz0123456789"


@dataclass(frozen=True)
class Charset:
    """
    Ordered prediction symbols plus two special ids.

    Class ids ``0..len(symbols)-1`` are characters and ``eos_id`` ends a word;
    together they are the ``num_classes`` prediction classes. ``mask_id`` is an
    input-embedding row only and is never predicted.
    """

    symbols: str = DEFAULT_SYMBOLS

    def __post_init__(self):
        if not self.symbols:
            raise ConfigError("charset must contain at least one symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigError(f"charset has duplicate symbols: {self.symbols!r}")

    @property
    def eos_id(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        return len(self.symbols) + 1

    @property
    def mask_id(self) -> int:
        return self.num_classes

    def index(self, ch: str) -> int:
        try:
            return self.symbols.index(ch)
        except ValueError:
            raise CharsetError(f"character {ch!r} is not in the charset") from None

    def normalize(self, word: str) -> str:
        """Lower-case a word and check every character against the charset."""
        word = word.strip().lower()
        for ch in word:
            if ch not in self.symbols:
                raise CharsetError(f"character {ch!r} in {word!r} is not in the charset")
        return word


@dataclass(frozen=True)
class CharTargets:
    """Word characters, one EOS, then EOS padding to the fixed length."""

    indices: np.ndarray
    word_length: int

    @property
    def length(self) -> int:
        return int(self.indices.shape[0])


@dataclass(frozen=True)
class TextMaskPlan:
    masked: np.ndarray
    unmasked: np.ndarray
    ratio: float

    def __post_init__(self):
        length = self.masked.size + self.unmasked.size
        union = np.concatenate([self.masked, self.unmasked])
        if np.unique(union).size != length or (length and (union.min() < 0 or union.max() >= length)):
            raise ShapeError(f"text mask plan is not a partition of 0..{length - 1}")

    @property
    def length(self) -> int:
        return int(self.masked.size + self.unmasked.size)

    @classmethod
    def all_masked(cls, length: int) -> "TextMaskPlan":
        return cls(np.arange(length), np.arange(0), 1.0)

    @classmethod
    def none_masked(cls, length: int) -> "TextMaskPlan":
        return cls(np.arange(0), np.arange(length), 0.0)


def encode_label(word: str, charset: Charset, max_len: int) -> CharTargets:
    word = charset.normalize(word)
    if not word:
        raise LabelError("label is empty")
    if len(word) > max_len - 1:
        raise LabelError(f"label {word!r} has {len(word)} characters; at most {max_len - 1} fit")
    indices = np.full(max_len, charset.eos_id, dtype=np.int64)
    indices[:len(word)] = [charset.index(ch) for ch in word]
    return CharTargets(indices, len(word))


def decode_targets(indices: Sequence[int], charset: Charset) -> str:
    """Characters up to the first EOS."""
    chars = []
    for idx in np.asarray(indices).tolist():
        if idx == charset.eos_id:
            break
        if not 0 <= idx < len(charset.symbols):
            raise LabelError(f"class id {idx} is not a character")
        chars.append(charset.symbols[idx])
    return "".join(chars)


def decode_prediction(logits: np.ndarray, charset: Charset) -> str:
    """Per-position argmax (first index wins ties), truncated at the first EOS."""
    return decode_targets(np.argmax(np.asarray(logits), axis=-1), charset)


def sample_text_mask(word_len: int, ratio: float, max_len: int,
                     rng: np.random.Generator) -> TextMaskPlan:
    """
    Mask ``round(ratio * word_len)`` word positions plus every padding position.

    Ratio 1.0 masks all ``max_len`` positions.
    """
    if not 0 <= word_len <= max_len:
        raise ShapeError(f"word length {word_len} outside [0, {max_len}]")
    if ratio >= 1.0:
        return TextMaskPlan.all_masked(max_len)
    count = mask_count(word_len, ratio)
    chosen = rng.permutation(word_len)[:count]
    masked = np.sort(np.concatenate([chosen, np.arange(word_len, max_len)])).astype(np.int64)
    keep = np.ones(max_len, dtype=bool)
    keep[masked] = False
    return TextMaskPlan(masked, np.flatnonzero(keep), ratio)


def text_input_ids(targets: np.ndarray, plan: TextMaskPlan, charset: Charset) -> np.ndarray:
    """Target ids at unmasked positions, the MASK id elsewhere."""
    ids = np.full(plan.length, charset.mask_id, dtype=np.int64)
    ids[plan.unmasked] = np.asarray(targets)[plan.unmasked]
    return ids


def masked_input_ids(batch: int, length: int, charset: Charset) -> np.ndarray:
    return np.full((batch, length), charset.mask_id, dtype=np.int64)


def char_matches(prediction: str, label: str) -> int:
    """Positions of ``label`` that ``prediction`` reproduces."""
    return sum(1 for a, b in zip(prediction, label) if a == b)

