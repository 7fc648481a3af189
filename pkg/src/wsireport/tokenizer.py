"""Word-level report vocabulary with fixed special tokens."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class TokenizerError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split, keeping each punctuation mark as its own token."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]  # index == id, specials first
    min_freq: int = 1

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise TokenizerError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise TokenizerError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def id_of(self) -> dict[str, int]:
        return dict(self._ids)

    @property
    def token_of(self) -> dict[int, str]:
        return dict(enumerate(self.tokens))

    def lookup(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def to_json(self) -> str:
        return json.dumps({"min_freq": self.min_freq, "id_of": self._ids}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        by_id = sorted(doc["id_of"].items(), key=lambda kv: kv[1])
        if [i for _, i in by_id] != list(range(len(by_id))):
            raise TokenizerError("vocabulary ids are not contiguous")
        return cls(tuple(t for t, _ in by_id), doc.get("min_freq", 1))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: Iterable, min_freq: int = 3) -> Vocabulary:
    """Build from report texts (or objects with a ``text`` attribute).

    Tokens below ``min_freq`` are left out and will encode as UNK. Ordering is
    by descending frequency, then lexicographic.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for item in corpus:
        text = item if isinstance(item, str) else item.text
        counts.update(tokenize(text))
        n_docs += 1
    if n_docs == 0:
        raise TokenizerError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIALS + tuple(kept), min_freq)


def encode(text: str, vocab: Vocabulary, max_len: int = 100) -> list[int]:
    """BOS + ids + EOS, truncated to ``max_len`` (EOS kept) and PAD-filled."""
    if max_len < 3:
        raise TokenizerError(f"max_len must be >= 3, got {max_len}")
    ids = [vocab.lookup(t) for t in tokenize(text)][: max_len - 2]
    seq = [BOS, *ids, EOS]
    return seq + [PAD] * (max_len - len(seq))


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Drop specials and join the remaining tokens with single spaces."""
    words = []
    size = len(vocab)
    for i in ids:
        i = int(i)
        if i < 0 or i >= size:
            raise TokenizerError(f"token id {i} out of range for vocabulary of size {size}")
        if i >= len(SPECIALS):
            words.append(vocab.tokens[i])
    return " ".join(words)


def sequence_length(ids: Sequence[int]) -> int:
    """Number of non-PAD tokens."""
    return sum(1 for i in ids if int(i) != PAD)
