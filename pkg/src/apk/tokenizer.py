"""Word/punctuation tokenizer with a corpus-built vocabulary."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, List, Sequence

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

_PIECE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> List[str]:
    return _PIECE.findall(text.lower())


def truncate_words(text: str, max_pieces: int) -> str:
    """Cut ``text`` at a word boundary so it holds at most ``max_pieces`` tokens."""
    if len(split_words(text)) <= max_pieces:
        return text
    words = text.split()
    out: List[str] = []
    count = 0
    for w in words:
        n = len(split_words(w))
        if count + n > max_pieces:
            break
        out.append(w)
        count += n
    return " ".join(out)


class Tokenizer:
    def __init__(self, tokens: Sequence[str], context_length: int = 32):
        if list(tokens[: len(SPECIALS)]) != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")
        if context_length < 4:
            raise ValueError("context_length must be >= 4")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.context_length = context_length
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = range(4)

    @classmethod
    def build(cls, texts: Iterable[str], context_length: int = 32, max_size: int = 512) -> "Tokenizer":
        seen = set()
        for t in texts:
            seen.update(split_words(t))
        vocab = list(SPECIALS) + sorted(seen)
        if len(vocab) > max_size:
            raise ValueError(f"corpus needs {len(vocab)} tokens, vocab_size is {max_size}")
        return cls(vocab, context_length)

    @classmethod
    def load(cls, path, context_length: int = 32) -> "Tokenizer":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1], context_length)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def dumps(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    def __len__(self):
        return len(self.tokens)

    @property
    def budget(self) -> int:
        """Content tokens that fit between BOS and EOS."""
        return self.context_length - 2

    def encode(self, text: str) -> List[int]:
        pieces = split_words(text)[: self.budget]
        ids = [self.bos_id] + [self.index.get(p, self.unk_id) for p in pieces] + [self.eos_id]
        return ids + [self.pad_id] * (self.context_length - len(ids))

    __call__ = encode

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def eos_position(self, ids: Sequence[int]) -> int:
        return list(ids).index(self.eos_id)
