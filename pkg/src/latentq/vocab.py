"""Whitespace-token vocabulary with a fixed reserved-id block.

Ids 0..5 are reserved in this order: PAD, BOS, EOS, SEP, NO_ANSWER, UNK.
Content tokens start at id 6 and are stored sorted so that a vocabulary
built from the same token set is always identical.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3
NO_ANSWER_ID = 4
UNK_ID = 5

PAD_TOKEN = "<PAD>"
BOS_TOKEN = "<BOS>"
EOS_TOKEN = "</s>"
SEP_TOKEN = "<SEP>"
NO_ANSWER_TOKEN = "NO_ANSWER"
UNK_TOKEN = "<UNK>"

RESERVED_TOKENS = (
    PAD_TOKEN,
    BOS_TOKEN,
    EOS_TOKEN,
    SEP_TOKEN,
    NO_ANSWER_TOKEN,
    UNK_TOKEN,
)
N_RESERVED = len(RESERVED_TOKENS)


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Immutable token <-> id table. ``tokens`` always starts with the reserved block."""

    tokens: tuple[str, ...]
    _ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[:N_RESERVED]) != RESERVED_TOKENS:
            raise VocabError("vocabulary must start with the reserved token block")
        ids = {}
        for i, tok in enumerate(self.tokens):
            if i >= N_RESERVED:
                if not tok or tok.split() != [tok]:
                    raise VocabError(f"content token may not contain whitespace or be empty: {tok!r}")
                if tok in RESERVED_TOKENS:
                    raise VocabError(f"content token collides with reserved token: {tok!r}")
            if tok in ids:
                raise VocabError(f"duplicate token: {tok!r}")
            ids[tok] = i
        object.__setattr__(self, "_ids", ids)

    @classmethod
    def build(cls, content_tokens: Iterable[str]) -> "Vocab":
        """Vocabulary from an iterable of content tokens (deduplicated, sorted)."""
        uniq = sorted(set(content_tokens) - set(RESERVED_TOKENS))
        return cls(RESERVED_TOKENS + tuple(uniq))

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        toks: set[str] = set()
        for t in texts:
            toks.update(t.split())
        return cls.build(toks)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        """Id of ``token``, falling back to UNK for unknown surface forms."""
        return self._ids.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def content_ids(self) -> range:
        return range(N_RESERVED, len(self.tokens))

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def text(self, ids: Sequence[int]) -> str:
        """Surface string of a sequence, dropping the terminating EOS and any PAD."""
        return " ".join(
            self.tokens[i] for i in ids if i not in (EOS_ID, PAD_ID, BOS_ID)
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


def tokenize(vocab: Vocab, text: str) -> tuple[int, ...]:
    """Whitespace-split ``text`` into ids, guaranteeing exactly one trailing EOS.

    Unknown tokens map to UNK. If the text itself contains the EOS surface
    form the sequence is cut there; otherwise EOS is appended.
    """
    ids: list[int] = []
    for tok in text.split():
        i = vocab.id(tok)
        if i == EOS_ID:
            break
        ids.append(i)
    ids.append(EOS_ID)
    return tuple(ids)


def iter_sequences(vocab: Vocab, max_len: int) -> Iterator[tuple[int, ...]]:
    """Yield every EOS-terminated sequence of length <= max_len over content tokens."""
    if max_len < 1:
        raise VocabError("max_len must be >= 1")
    content = list(vocab.content_ids)
    for body_len in range(max_len):
        for body in itertools.product(content, repeat=body_len):
            yield body + (EOS_ID,)


def enumerate_sequences(vocab: Vocab, max_len: int, limit: int = 10**6) -> list[tuple[int, ...]]:
    """All content-token sequences up to ``max_len`` (EOS included in the length).

    Raises if the space would exceed ``limit``; exhaustive checks only make
    sense on deliberately tiny vocabularies.
    """
    n = len(vocab.content_ids)
    total = sum(n**k for k in range(max_len))
    if total > limit:
        raise VocabError(f"sequence space has {total} elements, above limit {limit}")
    return list(iter_sequences(vocab, max_len))
