"""Corpus-level caption metrics: BLEU-N, ROUGE-L, and CIDEr-D.

All scorers take tokenized captions (lists of words).  CIDEr-D doubles as
the reward for self-critical training, with document frequencies frozen from
the training references so per-candidate rewards are pure functions.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ngram_counts",
    "bleu",
    "rouge_l",
    "CiderScorer",
    "cider",
    "metric_table",
]

ROUGE_BETA = 1.2


def ngram_counts(tokens: list, n: int) -> Counter:
    """Counts of contiguous n-grams (as tuples) in a token list."""
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(candidates: dict, references: dict) -> list:
    ids = sorted(candidates.keys())
    for img_id in ids:
        if img_id not in references or not references[img_id]:
            raise ValueError(f"candidate {img_id!r} has no references")
    return ids


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu(candidates: dict, references: dict, max_n: int = 4) -> float:
    """Corpus BLEU: clipped modified n-gram precision, geometric mean over
    n = 1..max_n, with the brevity penalty.

    ``candidates``: image id -> token list; ``references``: image id -> list
    of token lists.  Returns a value in [0, 1]; any empty precision gives 0.
    """
    ids = _check_corpus(candidates, references)
    clipped = np.zeros(max_n)
    total = np.zeros(max_n)
    cand_len = 0
    eff_ref_len = 0
    for img_id in ids:
        cand = candidates[img_id]
        refs = references[img_id]
        cand_len += len(cand)
        eff_ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = ngram_counts(cand, n)
            ceiling: Counter = Counter()
            for r in refs:
                for gram, cnt in ngram_counts(r, n).items():
                    ceiling[gram] = max(ceiling[gram], cnt)
            total[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(cnt, ceiling[gram]) for gram, cnt in counts.items())
    if cand_len == 0 or (clipped == 0).any() or (total == 0).any():
        return 0.0
    log_precision = np.log(clipped / total).mean()
    brevity = 1.0 if cand_len > eff_ref_len else math.exp(1.0 - eff_ref_len / cand_len)
    return float(brevity * math.exp(log_precision))


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def _lcs_length(a: list, b: list) -> int:
    # rolling single-row LCS
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidates: dict, references: dict, beta: float = ROUGE_BETA) -> float:
    """Mean per-document LCS F-measure, taking the best precision and recall
    over each document's references."""
    ids = _check_corpus(candidates, references)
    scores = []
    for img_id in ids:
        cand = candidates[img_id]
        precs, recs = [], []
        for ref in references[img_id]:
            lcs = _lcs_length(cand, ref)
            precs.append(lcs / len(cand) if cand else 0.0)
            recs.append(lcs / len(ref) if ref else 0.0)
        p, r = max(precs), max(recs)
        scores.append(0.0 if p == 0.0 or r == 0.0 else ((1 + beta**2) * p * r) / (r + beta**2 * p))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------


@dataclass
class CiderScorer:
    """CIDEr-D with document frequencies fitted once over a reference corpus.

    Per n (1..max_n), candidate and reference tf-idf vectors are compared by
    a clipped dot product over the norm product, damped by a Gaussian in the
    token-length difference (sigma = 6); per-image scores average over n and
    over references and are scaled by 10, giving the usual 0..10 range.
    """

    max_n: int = 4
    sigma: float = 6.0
    doc_freq: list[Counter] = field(default_factory=list)
    log_docs: float = 0.0

    @classmethod
    def fit(cls, references: dict, max_n: int = 4, sigma: float = 6.0) -> "CiderScorer":
        """Compute idf statistics from a corpus of reference sets."""
        if not references:
            raise ValueError("cannot fit idf on an empty reference corpus")
        scorer = cls(max_n=max_n, sigma=sigma)
        scorer.doc_freq = [Counter() for _ in range(max_n)]
        for refs in references.values():
            for n in range(1, max_n + 1):
                grams = set()
                for ref in refs:
                    grams.update(ngram_counts(ref, n).keys())
                for gram in grams:
                    scorer.doc_freq[n - 1][gram] += 1
        scorer.log_docs = math.log(len(references))
        return scorer

    def _tfidf(self, tokens: list, n: int) -> tuple[dict, float]:
        vec = {}
        for gram, cnt in ngram_counts(tokens, n).items():
            idf = self.log_docs - math.log(max(1.0, self.doc_freq[n - 1][gram]))
            vec[gram] = cnt * idf
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    def reward(self, candidate: list, refs: list[list]) -> float:
        """CIDEr-D of one candidate against its references, using the fitted
        idf table.  Pure function of its arguments; empty candidates score 0
        for every n (never NaN) but keep the length penalty semantics."""
        per_n = np.zeros(self.max_n)
        for ref in refs:
            penalty = math.exp(-((len(candidate) - len(ref)) ** 2) / (2.0 * self.sigma**2))
            for n in range(1, self.max_n + 1):
                cv, cn = self._tfidf(candidate, n)
                rv, rn = self._tfidf(ref, n)
                if cn == 0.0 or rn == 0.0:
                    continue
                num = sum(min(w, rv.get(gram, 0.0)) * rv.get(gram, 0.0) for gram, w in cv.items())
                per_n[n - 1] += (num / (cn * rn)) * penalty
        return float(per_n.mean() / len(refs) * 10.0)

    def corpus(self, candidates: dict, references: dict) -> tuple[float, dict]:
        ids = _check_corpus(candidates, references)
        per_image = {i: self.reward(candidates[i], references[i]) for i in ids}
        return float(np.mean([per_image[i] for i in ids])), per_image


def cider(candidates: dict, references: dict, max_n: int = 4, sigma: float = 6.0) -> float:
    """CIDEr-D over a corpus, with idf computed from these references."""
    scorer = CiderScorer.fit(references, max_n=max_n, sigma=sigma)
    score, _ = scorer.corpus(candidates, references)
    return score


def metric_table(candidates: dict, references: dict) -> dict[str, float]:
    """BLEU-1..4, ROUGE-L, and CIDEr-D in one dict (keys are metric names)."""
    out = {}
    for n in range(1, 5):
        out[f"BLEU-{n}"] = bleu(candidates, references, max_n=n)
    out["ROUGE-L"] = rouge_l(candidates, references)
    out["CIDEr-D"] = cider(candidates, references)
    return out
