"""Word-level tokenizer for the synthetic caption grammar."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"


@dataclass
class TextBatch:
    token_ids: np.ndarray  # int64 [B, context_len]
    eos_positions: np.ndarray  # int64 [B]

    def __post_init__(self):
        if self.token_ids.ndim != 2 or self.eos_positions.shape != (self.token_ids.shape[0],):
            raise ValueError("token_ids must be [B, L] and eos_positions [B]")
        if np.any(self.eos_positions >= self.token_ids.shape[1]) or np.any(self.eos_positions < 0):
            raise IndexError("eos position outside the context")

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def take(self, idx) -> "TextBatch":
        return TextBatch(self.token_ids[idx], self.eos_positions[idx])


class Tokenizer:
    def __init__(self, words, context_len: int = 16):
        self.words = [PAD, EOS, UNK] + [w for w in words if w not in (PAD, EOS, UNK)]
        self.index = {w: i for i, w in enumerate(self.words)}
        self.context_len = context_len

    def __len__(self) -> int:
        return len(self.words)

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    def __call__(self, texts) -> TextBatch:
        if isinstance(texts, str):
            texts = [texts]
        L = self.context_len
        ids = np.zeros((len(texts), L), dtype=np.int64)
        eos = np.empty(len(texts), dtype=np.int64)
        unk = self.index[UNK]
        for i, text in enumerate(texts):
            toks = [self.index.get(w, unk) for w in text.replace(".", " ").split()][: L - 1]
            ids[i, : len(toks)] = toks
            ids[i, len(toks)] = self.index[EOS]
            eos[i] = len(toks)
        return TextBatch(ids, eos)
