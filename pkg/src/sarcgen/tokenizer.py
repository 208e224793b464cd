"""Word-level vocabulary shared by prompts and generated text."""

from __future__ import annotations

import json
import re
from collections import Counter
from typing import Iterable

from .errors import DataError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

_TOKEN = re.compile(r"[\w'’]+|[^\w\s]")
_SPACE_BEFORE = re.compile(r"\s+([.,!?;:])")


def tokenize(text: str) -> list[str]:
    """Lowercase, split off punctuation, split on whitespace."""
    return _TOKEN.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    return _SPACE_BEFORE.sub(r"\1", " ".join(tokens))


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(dict.fromkeys([*SPECIALS, *tokens]))
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for text in texts for tok in tokenize(text))
        kept = sorted(t for t, c in counts.items() if c >= min_count)
        return cls(kept)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def encode(self, text: str, max_tokens: int | None = None, add_eos: bool = False) -> list[int]:
        ids = [self.stoi.get(tok, self.unk_id) for tok in tokenize(text)]
        if add_eos:
            if max_tokens is not None:
                ids = ids[: max_tokens - 1]
            ids.append(self.eos_id)
        elif max_tokens is not None:
            ids = ids[:max_tokens]
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.itos[i])
        return detokenize(out)

    def check_ids(self, ids: Iterable[int]) -> None:
        for i in ids:
            if not 0 <= int(i) < len(self):
                raise DataError(f"token id {i} outside vocabulary of size {len(self)}")

    def to_json(self) -> str:
        return json.dumps({t: i for i, t in enumerate(self.itos)}, ensure_ascii=False, indent=0)

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> "Vocabulary":
        itos = [t for t, _ in sorted(mapping.items(), key=lambda kv: kv[1])]
        if tuple(itos[: len(SPECIALS)]) != SPECIALS or [mapping[t] for t in itos] != list(range(len(itos))):
            raise DataError("vocabulary mapping must be dense and start with the special tokens")
        return cls(itos[len(SPECIALS):])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(json.load(fh))
