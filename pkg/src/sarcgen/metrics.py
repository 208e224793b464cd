"""Text-generation metrics and score-distribution analysis.

BLEU and CIDEr are corpus-level; ROUGE, METEOR and embedding similarity are
averaged over hypothesis/reference pairs. Everything lies in [0, 1].
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError

REPORT_SCHEMA_VERSION = 1
N_BINS = 20
CIDER_SIGMA = 6.0

_TOKEN = re.compile(r"\w+|[^\w\s]")


def metric_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace after separating punctuation."""
    return _TOKEN.findall(text.lower())


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_corpora(hyps, refs, minimum=1):
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if len(hyps) < minimum:
        raise DataError(f"metric needs at least {minimum} pair(s)")


def bleu(hyps: Sequence[str], refs: Sequence[str], n: int = 4) -> float:
    """Corpus BLEU-n, uniform weights, with brevity penalty.

    Orders >= 2 with zero matches are smoothed to (0 + 1) / (total + 1).
    """
    _check_corpora(hyps, refs)
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    hyp_toks = [metric_tokens(h) for h in hyps]
    ref_toks = [metric_tokens(r) for r in refs]
    hyp_len = sum(map(len, hyp_toks))
    ref_len = sum(map(len, ref_toks))
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for order in range(1, n + 1):
        match = total = 0
        for h, r in zip(hyp_toks, ref_toks):
            h_ng, r_ng = ngrams(h, order), ngrams(r, order)
            match += sum(min(c, r_ng[g]) for g, c in h_ng.items())
            total += sum(h_ng.values())
        if match == 0:
            if order == 1:
                return 0.0
            match, total = 1, total + 1
        log_p += math.log(match / total)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p / n)


def _f1(overlap, n_hyp, n_ref):
    if n_hyp == 0 and n_ref == 0:
        return 1.0
    if overlap == 0:
        return 0.0
    p, r = overlap / n_hyp, overlap / n_ref
    return 2 * p * r / (p + r)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(hyps: Sequence[str], refs: Sequence[str], variant="L") -> float:
    """Mean pairwise ROUGE-1, -2 or -L F1. Two empty sides count as a match."""
    _check_corpora(hyps, refs)
    scores = []
    for h, r in zip(hyps, refs):
        ht, rt = metric_tokens(h), metric_tokens(r)
        if str(variant).upper() == "L":
            scores.append(_f1(lcs_length(ht, rt), len(ht), len(rt)))
        else:
            order = int(variant)
            h_ng, r_ng = ngrams(ht, order), ngrams(rt, order)
            overlap = sum((h_ng & r_ng).values())
            scores.append(_f1(overlap, sum(h_ng.values()), sum(r_ng.values())))
    return float(np.mean(scores))


def _align(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact-match unigram alignment, each hyp token taking the earliest free ref token."""
    used = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(hyp):
        for j, r in enumerate(ref):
            if not used[j] and r == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_sentence(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Simplified METEOR: exact matches only, recall-weighted harmonic mean
    10PR / (R + 9P), times (1 - 0.5 * (chunks / matches) ** 3).

    A hypothesis identical to its reference scores 1.
    """
    if list(hyp) == list(ref) and hyp:
        return 1.0
    pairs = _align(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    p, r = m / len(hyp), m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    return fmean * (1 - 0.5 * (chunks / m) ** 3)


def meteor(hyps: Sequence[str], refs: Sequence[str]) -> float:
    _check_corpora(hyps, refs)
    return float(np.mean([meteor_sentence(metric_tokens(h), metric_tokens(r)) for h, r in zip(hyps, refs)]))


def _tfidf(counts: Counter, df: Counter, log_n: float) -> dict:
    return {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider(hyps: Sequence[str], refs: Sequence[str], sigma: float = CIDER_SIGMA) -> float:
    """Mean over pairs and n = 1..4 of tf-idf cosine, damped by exp(-dlen^2 / 2 sigma^2).

    Document frequencies come from the reference corpus.
    """
    _check_corpora(hyps, refs, minimum=2)
    hyp_toks = [metric_tokens(h) for h in hyps]
    ref_toks = [metric_tokens(r) for r in refs]
    log_n = math.log(len(refs))
    per_pair = np.zeros(len(refs))
    for n in range(1, 5):
        ref_ng = [ngrams(t, n) for t in ref_toks]
        df = Counter(g for ng in ref_ng for g in ng)
        for i, (h, r_ng) in enumerate(zip(hyp_toks, ref_ng)):
            sim = _cosine(_tfidf(ngrams(h, n), df, log_n), _tfidf(r_ng, df, log_n))
            damp = math.exp(-((len(h) - len(ref_toks[i])) ** 2) / (2 * sigma ** 2))
            per_pair[i] += sim * damp / 4
    return float(per_pair.mean())


def char_trigram_embedder(texts: Sequence[str]) -> list[Counter]:
    """Fallback sentence embedding: L2-normalised character-trigram counts (sparse)."""
    out = []
    for t in texts:
        padded = f" {t.lower()} "
        grams = Counter(padded[i:i + 3] for i in range(len(padded) - 2))
        norm = math.sqrt(sum(c * c for c in grams.values()))
        out.append(Counter({g: c / norm for g, c in grams.items()}) if norm else Counter())
    return out


def _pair_cosine(u, v) -> float:
    if isinstance(u, Counter):
        if not u or not v:
            return 0.0
        return sum(c * v.get(g, 0.0) for g, c in u.items())
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return float(u @ v / (nu * nv)) if nu and nv else 0.0


def embed_similarity(hyps: Sequence[str], refs: Sequence[str], embedder: Callable | None = None) -> float:
    """Mean of (1 + cos) / 2 between hypothesis and reference embeddings.

    ``embedder`` maps a list of strings to a list of vectors; the default is
    :func:`char_trigram_embedder`. Identical strings always score 1.
    """
    _check_corpora(hyps, refs)
    embedder = embedder or char_trigram_embedder
    try:
        eh, er = embedder(list(hyps)), embedder(list(refs))
    except Exception as exc:
        raise DataError(f"embedder failed: {exc}") from exc
    sims = []
    for h, r, u, v in zip(hyps, refs, eh, er):
        cos = 1.0 if h == r else min(max(_pair_cosine(u, v), -1.0), 1.0)
        sims.append((1.0 + cos) / 2.0)
    return float(np.mean(sims))


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    meteor: float
    cider: float
    embed_sim: float

    def scaled(self) -> dict:
        return {k: 100.0 * v for k, v in asdict(self).items()}


@dataclass
class DistributionStats:
    mean: float
    std: float
    histogram: list[int]
    count: int

    def to_dict(self) -> dict:
        return asdict(self)


def distribution_stats(scores: Sequence[float], bins: int = N_BINS) -> DistributionStats:
    """Population mean/std and a histogram of equal bins over [0, 1].

    Bins are right-open except the last, which includes 1.0.
    """
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.size == 0:
        raise DataError("no scores to summarise")
    if not np.isfinite(arr).all() or (arr < 0).any() or (arr > 1).any():
        raise DataError("scores must lie in [0, 1]")
    hist, _ = np.histogram(arr, bins=bins, range=(0.0, 1.0))
    return DistributionStats(float(arr.mean()), float(arr.std()), hist.tolist(), int(arr.size))


def metric_report(hyps: Sequence[str], refs: Sequence[str], embedder=None) -> MetricReport:
    _check_corpora(hyps, refs)
    return MetricReport(
        bleu1=bleu(hyps, refs, 1), bleu2=bleu(hyps, refs, 2),
        bleu3=bleu(hyps, refs, 3), bleu4=bleu(hyps, refs, 4),
        rouge1=rouge(hyps, refs, 1), rouge2=rouge(hyps, refs, 2), rougeL=rouge(hyps, refs, "L"),
        meteor=meteor(hyps, refs),
        cider=cider(hyps, refs) if len(hyps) >= 2 else 0.0,
        embed_sim=embed_similarity(hyps, refs, embedder),
    )


def evaluate_run(hyp_rows: Sequence[dict], ref_rows: Sequence[dict], scorer, incongruity_fn,
                 embedder=None) -> dict:
    """Full metric battery plus sarcasm-score and incongruity distributions of the hypotheses.

    Rows are aligned by position and must agree on ``id`` where both carry one.
    ``incongruity_fn(text, image_ref)`` returns a value in [0, 1].
    """
    if len(hyp_rows) != len(ref_rows):
        raise DataError(f"misaligned corpora: {len(hyp_rows)} hypotheses vs {len(ref_rows)} references")
    for i, (h, r) in enumerate(zip(hyp_rows, ref_rows)):
        if "id" in h and "id" in r and str(h["id"]) != str(r["id"]):
            raise DataError(f"misaligned corpora at line {i + 1}: {h['id']!r} vs {r['id']!r}")
    hyps = [h["text"] for h in hyp_rows]
    refs = [r["text"] for r in ref_rows]
    image_refs = [h.get("image_ref", r.get("image_ref")) for h, r in zip(hyp_rows, ref_rows)]
    report = metric_report(hyps, refs, embedder)
    sarcasm = [s.value for s in scorer.score_batch([h or " " for h in hyps], image_refs)]
    incongruity = [incongruity_fn(h or " ", ref) for h, ref in zip(hyps, image_refs)]
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "n": len(hyps),
        "metrics": asdict(report),
        "metrics_x100": report.scaled(),
        "sarcasm_score": distribution_stats(sarcasm).to_dict(),
        "factual_incongruity": distribution_stats(incongruity).to_dict(),
        "scorer": getattr(scorer, "scorer_id", type(scorer).__name__),
    }
