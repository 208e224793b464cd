"""Synthetic raw corpus whose sarcasm score is computable by the marker oracle.

Each text mentions its target followed by a shuffled mix of incongruity
markers, literal markers and filler words. Records alternate between BIO
tagged targets and plain target strings, and a slice of them are
deliberately dirty (wrapped in quotes, spaces before punctuation, too long)
so the exclusion rules have work to do.

Run ``python -m sarcgen.synthetic --n 600 --out raw.jsonl`` to write one.
"""

from __future__ import annotations

import argparse
import json

import numpy as np

from .rewards import INCONGRUITY_MARKERS, LITERAL_MARKERS, SyntheticOracle

TARGETS = (
    "monday mornings", "the office wifi", "traffic jams", "rainy weekends", "slow elevators",
    "cold coffee", "late trains", "group projects", "printer errors", "long queues",
    "broken umbrellas", "surprise meetings", "software updates", "noisy neighbours",
    "parking tickets", "dead batteries", "spam emails", "tax forms", "burnt toast", "flat tyres",
)
OPENERS = ("oh", "wow", "yes")
FILLERS = ("so", "just", "really", "again", "today")
SLOTS = 4
# most kept texts carry two net markers; three (the oracle maximum) is rare
INCONGRUITY_COUNT_P = (0.05, 0.25, 0.6, 0.1)
LITERAL_COUNT_P = (0.85, 0.15)


def _text(rng, target, n_inc, n_lit):
    words = ([str(rng.choice(INCONGRUITY_MARKERS)) for _ in range(n_inc)]
             + [str(rng.choice(LITERAL_MARKERS)) for _ in range(n_lit)])
    words += [str(rng.choice(FILLERS)) for _ in range(SLOTS - len(words))]
    rng.shuffle(words)
    return f"{rng.choice(OPENERS)} {target} {' '.join(words)}."


def make_raw_corpus(n: int, seed: int = 0, dirty_fraction: float = 0.1, with_scores: bool = True,
                    oracle: SyntheticOracle | None = None) -> list[dict]:
    """Generate ``n`` raw records as dictionaries ready for JSONL."""
    oracle = oracle or SyntheticOracle()
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        target = TARGETS[int(rng.integers(len(TARGETS)))]
        n_inc = int(rng.choice([0, 1, 2, 3], p=INCONGRUITY_COUNT_P))
        n_lit = int(rng.choice([0, 1], p=LITERAL_COUNT_P))
        text = _text(rng, target, n_inc, n_lit)
        image_ref = f"img{i:05d}"
        rec = {"id": f"s{i:05d}", "text": text, "image_ref": image_ref,
               "ocr_text": target.split()[-1], "caption": f"a photo about {target}",
               "objects": ["person", "person", target.split()[-1]]}
        if i % 2 == 0:
            tokens = text.rstrip(".").split()
            tags = ["O"] * len(tokens)
            tags[1] = "B-S"
            for j in range(2, 1 + len(target.split())):
                tags[j] = "I-S"
            rec["bio_tokens"] = [[t, g] for t, g in zip(tokens, tags)]
        else:
            rec["target"] = target
        u = rng.random()
        if u < dirty_fraction / 2:
            rec["text"] = f'"{text[:-1]} ."'
        elif u < dirty_fraction:
            rec["text"] = text + " and" + " more" * 40
        if with_scores:
            rec["sarcasm_score"] = oracle.score(rec["text"]).value
        records.append(rec)
    return records


def main(argv=None):
    parser = argparse.ArgumentParser(description="Write a synthetic raw corpus as JSON lines.")
    parser.add_argument("--n", type=int, default=600)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    parser.add_argument("--no-scores", action="store_true", help="leave sarcasm_score unset")
    args = parser.parse_args(argv)
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in make_raw_corpus(args.n, args.seed, with_scores=not args.no_scores):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
