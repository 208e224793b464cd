"""Corpus construction: cleaning, exclusion filters, BIO target extraction,
deterministic splitting and split statistics."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, MalformedTaggingError, ScoreRangeError

log = logging.getLogger(__name__)

BIO_TAGS = ("O", "B-S", "I-S")
QUOTE_CHARS = "\"'“”‘’"
PUNCTUATION = ".,!?;:"
MAX_WORDS = 40
MIN_SCORE = 0.5

_SPACE_BEFORE_PUNCT = re.compile(r"\s+(?=[" + re.escape(PUNCTUATION) + r"])")


@dataclass
class RawRecord:
    id: str
    text: str
    image_ref: str
    bio_tokens: list[tuple[str, str]] | None = None
    target: str | None = None
    ocr_text: str | None = None
    caption: str | None = None
    objects: list[str] | None = None
    sarcasm_score: float | None = None

    def __post_init__(self):
        if self.bio_tokens is not None:
            self.bio_tokens = [(str(tok), str(tag)) for tok, tag in self.bio_tokens]
            bad = {tag for _, tag in self.bio_tokens if tag not in BIO_TAGS}
            if bad:
                raise MalformedTaggingError(f"record {self.id}: unknown BIO tags {sorted(bad)}")
        if self.sarcasm_score is not None:
            check_score(self.sarcasm_score, self.id)

    @classmethod
    def from_dict(cls, d: dict) -> "RawRecord":
        try:
            return cls(
                id=str(d["id"]),
                text=d["text"],
                image_ref=str(d["image_ref"]),
                bio_tokens=d.get("bio_tokens"),
                target=d.get("target"),
                ocr_text=d.get("ocr_text"),
                caption=d.get("caption"),
                objects=d.get("objects"),
                sarcasm_score=d.get("sarcasm_score"),
            )
        except KeyError as exc:
            raise DataError(f"record missing required field {exc}") from None


@dataclass
class Sample:
    id: str
    text: str
    target: str
    image_ref: str
    sarcasm_score: float
    ocr_text: str | None = None
    caption: str | None = None
    objects: list[str] | None = None

    def __post_init__(self):
        if not self.target:
            raise DataError(f"sample {self.id}: empty target")
        check_score(self.sarcasm_score, self.id)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        try:
            return cls(
                id=str(d["id"]),
                text=d["text"],
                target=d["target"],
                image_ref=str(d["image_ref"]),
                sarcasm_score=float(d["sarcasm_score"]),
                ocr_text=d.get("ocr_text"),
                caption=d.get("caption"),
                objects=d.get("objects"),
            )
        except KeyError as exc:
            raise DataError(f"sample missing required field {exc}") from None


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (8.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(not r > 0 for r in self.ratios):
            raise ValueError(f"ratios must be three positive numbers, got {self.ratios}")
        total = float(sum(self.ratios))
        object.__setattr__(self, "ratios", tuple(float(r) / total for r in self.ratios))


@dataclass
class Splits:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]

    def items(self):
        return (("train", self.train), ("val", self.val), ("test", self.test))


@dataclass
class SplitStats:
    count: int
    avg_text_len: float
    text_vocab: int
    avg_target_len: float
    target_vocab: int


@dataclass
class CorpusStats:
    splits: dict[str, SplitStats]
    rejected: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "splits": {name: asdict(s) for name, s in self.splits.items()},
            "rejected": dict(sorted(self.rejected.items())),
        }


def check_score(score, record_id="?") -> float:
    score = float(score)
    if not (0.0 <= score <= 1.0) or math.isnan(score):
        raise ScoreRangeError(f"record {record_id}: sarcasm_score {score} outside [0, 1]")
    return score


def words(text: str) -> list[str]:
    return text.split()


def clean_text(raw: str) -> str:
    """Strip quotation marks at both ends and drop whitespace before punctuation.

    Applied to a fixed point so the result is idempotent, e.g.
    ``'"great job !"'`` becomes ``'great job!'``.
    """
    text = raw
    while True:
        cleaned = _SPACE_BEFORE_PUNCT.sub("", text.strip().strip(QUOTE_CHARS))
        if cleaned == text:
            return cleaned
        text = cleaned


def length_filter(text: str, max_words: int = MAX_WORDS) -> bool:
    """True to keep. Empty texts are discarded."""
    n = len(words(text))
    return 0 < n <= max_words


def score_filter(score: float, threshold: float = MIN_SCORE) -> bool:
    """True to keep; raises ScoreRangeError outside [0, 1]."""
    return check_score(score) >= threshold


def extract_bio_target(bio_tokens: Sequence[tuple[str, str]]) -> list[str] | None:
    """Return the multi-token sarcasm-target spans, or None when none qualify.

    A span is a B-S token followed by its run of I-S tokens. Only spans with
    at least one I-S continuation count; a lone B-S does not.
    """
    spans: list[list[str]] = []
    current: list[str] | None = None
    for i, (token, tag) in enumerate(bio_tokens):
        if tag == "B-S":
            current = [token]
            spans.append(current)
        elif tag == "I-S":
            if current is None:
                raise MalformedTaggingError(f"I-S at position {i} without a preceding B-S")
            current.append(token)
        elif tag == "O":
            current = None
        else:
            raise MalformedTaggingError(f"unknown BIO tag {tag!r} at position {i}")
    targets = [" ".join(span) for span in spans if len(span) > 1]
    return targets or None


def build_samples(records: Iterable[RawRecord], scorer=None) -> tuple[list[Sample], Counter]:
    """Run the exclusion pipeline over raw records.

    Records without a sarcasm score are scored by ``scorer`` (anything with a
    ``score(text, image_ref=...)`` method) before the score filter. Returns
    the retained samples in input order and a counter of rejection reasons.
    """
    samples = []
    rejected: Counter = Counter()
    seen: set[str] = set()
    for rec in records:
        if rec.id in seen:
            raise DataError(f"duplicate record id {rec.id!r}")
        seen.add(rec.id)

        if rec.bio_tokens is not None:
            spans = extract_bio_target(rec.bio_tokens)
            if spans is None:
                rejected["no_target"] += 1
                continue
            target = ", ".join(spans)
        elif rec.target and rec.target.strip():
            target = rec.target.strip()
        else:
            rejected["no_target"] += 1
            continue

        text = clean_text(rec.text)
        if not length_filter(text):
            rejected["empty_text" if not text else "too_long"] += 1
            continue

        score = rec.sarcasm_score
        if score is None:
            if scorer is None:
                raise DataError(f"record {rec.id} has no sarcasm_score and no scorer was given")
            score = scorer.score(text, image_ref=rec.image_ref).value
        if not score_filter(score):
            rejected["low_score"] += 1
            continue

        samples.append(Sample(
            id=rec.id, text=text, target=target, image_ref=rec.image_ref,
            sarcasm_score=float(score), ocr_text=rec.ocr_text, caption=rec.caption,
            objects=list(rec.objects) if rec.objects is not None else None,
        ))
    log.info("kept %d samples, rejected %s", len(samples), dict(rejected))
    return samples, rejected


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    # val and test floor their share (at least one each); train takes the rest
    n_val = max(1, math.floor(ratios[1] * n))
    n_test = max(1, math.floor(ratios[2] * n))
    return n - n_val - n_test, n_val, n_test


def split_dataset(samples: Sequence[Sample], spec: SplitSpec = SplitSpec()) -> Splits:
    if len(samples) < 3:
        raise DataError(f"need at least 3 samples to split, got {len(samples)}")
    n_train, n_val, n_test = split_sizes(len(samples), spec.ratios)
    order = np.random.default_rng(spec.seed).permutation(len(samples))
    shuffled = [samples[i] for i in order]
    return Splits(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )


def _split_stats(samples: Sequence[Sample]) -> SplitStats:
    if not samples:
        raise DataError("cannot compute statistics of an empty split")
    text_words = [words(s.text) for s in samples]
    target_words = [words(s.target) for s in samples]
    return SplitStats(
        count=len(samples),
        avg_text_len=sum(map(len, text_words)) / len(samples),
        text_vocab=len({w.lower() for ws in text_words for w in ws}),
        avg_target_len=sum(map(len, target_words)) / len(samples),
        target_vocab=len({w.lower() for ws in target_words for w in ws}),
    )


def compute_stats(splits: Splits, rejected: dict | None = None) -> CorpusStats:
    return CorpusStats(
        splits={name: _split_stats(part) for name, part in splits.items()},
        rejected=dict(rejected or {}),
    )


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return rows


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_samples(path) -> list[Sample]:
    return [Sample.from_dict(d) for d in read_jsonl(path)]


def build_dataset(in_path, out_dir, spec: SplitSpec, scorer=None) -> tuple[Splits, CorpusStats]:
    """Read raw JSONL, filter, split, and write train/val/test JSONL plus stats.json."""
    records = [RawRecord.from_dict(d) for d in read_jsonl(in_path)]
    samples, rejected = build_samples(records, scorer=scorer)
    splits = split_dataset(samples, spec)
    stats = compute_stats(splits, rejected)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in splits.items():
        write_jsonl(out / f"{name}.jsonl", (s.to_dict() for s in part))
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    return splits, stats
