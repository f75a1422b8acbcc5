"""Closed-vocabulary tokenizer standing in for the text encoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument, UnknownTokenError

START = "<start>"
PAD = "<pad>"

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle", "star")
TEXTURES = ("plain", "stripes", "checker", "dots")
FILLER = ("a", "photo", "of", "with", "background")
# words that never appear in training captions but are legal in composition prompts
EXTRA = ("horse", "dog", "walking", "in", "the", "on", "near", "and", "left", "right",
         "small", "big", "style")

VOCAB = (START, PAD) + FILLER + COLORS + SHAPES + TEXTURES + EXTRA
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
MAX_TOKENS = 12


@dataclass(frozen=True)
class PromptEmbedding:
    """Tokenised prompt.

    ``tokens`` holds the start token followed by the words; ``ids`` is padded to
    ``MAX_TOKENS`` with the pad token and is what the denoiser embeds.
    ``word_index_map`` maps every word to its padded positions.
    """

    text: str
    tokens: tuple
    ids: np.ndarray
    word_index_map: dict = field(hash=False, compare=False)

    @property
    def length(self) -> int:
        return len(self.ids)

    def positions(self, word: str) -> list:
        return list(self.word_index_map.get(word, ()))

    def words(self) -> list:
        return [t for t in self.tokens[1:]]


def tokenize(prompt: str, max_tokens: int = MAX_TOKENS) -> PromptEmbedding:
    words = prompt.lower().split()
    for w in words:
        if w not in WORD_ID:
            raise UnknownTokenError(w)
    if len(words) + 1 > max_tokens:
        raise InvalidArgument(f"prompt has {len(words)} words; at most {max_tokens - 1} fit")
    tokens = (START,) + tuple(words)
    ids = np.full(max_tokens, WORD_ID[PAD], dtype=np.int64)
    ids[: len(tokens)] = [WORD_ID[t] for t in tokens]
    index_map: dict = {}
    for pos, w in enumerate(words, start=1):
        index_map.setdefault(w, []).append(pos)
    return PromptEmbedding(prompt, tokens, ids, {k: tuple(v) for k, v in index_map.items()})


NULL_PROMPT = ""
