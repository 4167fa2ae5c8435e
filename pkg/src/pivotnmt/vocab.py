"""Token vocabularies and id-sequence sentences.

Ids 0..3 are reserved in every vocabulary: BOS, EOS, UNK, PAD. Regular
tokens start at id 4, so a vocabulary file stores one token per line and
line number = id - 4.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

__all__ = [
    "BOS",
    "EOS",
    "UNK",
    "PAD",
    "RESERVED_TOKENS",
    "VocabError",
    "Vocabulary",
    "Sentence",
]

BOS, EOS, UNK, PAD = 0, 1, 2, 3
RESERVED_TOKENS = ("<bos>", "<eos>", "<unk>", "<pad>")


class VocabError(ValueError):
    """Invalid vocabulary contents or an id outside the vocabulary."""


class Vocabulary:
    """Immutable token <-> id mapping with the four reserved ids prepended."""

    __slots__ = ("_tokens", "_ids", "_hash")

    def __init__(self, tokens: Sequence[str]):
        toks = list(tokens)
        seen: set[str] = set()
        for t in toks:
            if not t or any(c.isspace() for c in t):
                raise VocabError(f"invalid token {t!r}: empty or contains whitespace")
            if t in RESERVED_TOKENS:
                raise VocabError(f"token {t!r} collides with a reserved token")
            if t in seen:
                raise VocabError(f"duplicate token {t!r}")
            seen.add(t)
        self._tokens = tuple(RESERVED_TOKENS) + tuple(toks)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        digest = hashlib.sha256("\n".join(self._tokens).encode("utf-8")).hexdigest()
        self._hash = digest

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(self._tokens)

    @property
    def tokens(self) -> tuple[str, ...]:
        """All tokens including the reserved four, in id order."""
        return self._tokens

    @property
    def content_tokens(self) -> tuple[str, ...]:
        return self._tokens[4:]

    @property
    def content_hash(self) -> str:
        """sha256 over the newline-joined token list (reserved included)."""
        return self._hash

    def id_of(self, token: str) -> int:
        """Id for a token, falling back to UNK for unknown tokens."""
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise VocabError(f"id {idx} out of range for vocabulary of size {len(self)}")
        return self._tokens[idx]

    def encode(self, tokens: Iterable[str]) -> "Sentence":
        """Encode surface tokens to a Sentence (EOS appended, OOV -> UNK)."""
        ids = tuple(self._ids.get(t, UNK) for t in tokens) + (EOS,)
        return Sentence(ids)

    def decode(self, sentence: "Sentence") -> list[str]:
        """Surface tokens for a sentence's content (terminal EOS dropped)."""
        return [self.token_of(i) for i in sentence.content]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.content_tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            toks = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(toks)


@dataclass(frozen=True)
class Sentence:
    """A token-id sequence terminated by exactly one EOS (the final id).

    ``ids`` includes the terminal EOS; ``content`` excludes it. The empty
    sentence (bare EOS) is structurally valid -- it is a legal decoder
    output -- but corpora reject it.
    """

    ids: tuple[int, ...]

    def __post_init__(self):
        if not self.ids:
            raise VocabError("sentence must contain at least the terminal EOS")
        if self.ids[-1] != EOS:
            raise VocabError("sentence must end with EOS")
        if any(i == EOS for i in self.ids[:-1]):
            raise VocabError("EOS may only appear as the final id")
        if any(i < 0 for i in self.ids):
            raise VocabError("negative token id")

    @classmethod
    def of(cls, content_ids: Iterable[int]) -> "Sentence":
        return cls(tuple(int(i) for i in content_ids) + (EOS,))

    @property
    def content(self) -> tuple[int, ...]:
        return self.ids[:-1]

    @property
    def content_length(self) -> int:
        return len(self.ids) - 1

    def __len__(self) -> int:
        return len(self.ids)

    def max_id(self) -> int:
        return max(self.ids)
