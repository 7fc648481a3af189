"""Report-generation metrics (BLEU, ROUGE-L, exact-match METEOR) and task metrics.

NLG metrics are computed per candidate/reference pair and averaged
arithmetically over a corpus. METEOR here aligns exact unigram matches only
(no stemming or synonym modules) and is reported as ``meteor_exact``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

NLG_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L")


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- NLG


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4) -> list[float]:
    """Sentence BLEU-1..max_n with clipped precision and brevity penalty, no smoothing."""
    if not 1 <= max_n <= 4:
        raise MetricError("max_n must be in 1..4")
    c, r = len(candidate), len(reference)
    if c == 0:
        return [0.0] * max_n
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    scores = []
    log_sum = 0.0
    zero = False
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        total = sum(cand.values())
        ref = _ngrams(reference, n)
        clipped = sum(min(cnt, ref[g]) for g, cnt in cand.items())
        if clipped == 0 or total == 0:
            zero = True
        if zero:
            scores.append(0.0)
            continue
        log_sum += math.log(clipped / total)
        scores.append(bp * math.exp(log_sum / n))
    return scores


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = 1.2) -> float:
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def _exact_alignment(candidate: Sequence[str], reference: Sequence[str]) -> list[tuple[int, int]]:
    """Pair the k-th occurrence of each word in the candidate with its k-th in the reference."""
    ref_pos: dict[str, list[int]] = {}
    for j, w in enumerate(reference):
        ref_pos.setdefault(w, []).append(j)
    used: Counter = Counter()
    pairs = []
    for i, w in enumerate(candidate):
        slots = ref_pos.get(w)
        if slots and used[w] < len(slots):
            pairs.append((i, slots[used[w]]))
            used[w] += 1
    return pairs


def meteor_exact(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Fmean = 10PR/(R+9P) times (1 - 0.5 (chunks/matches)^3)."""
    if not candidate or not reference:
        return 0.0
    pairs = _exact_alignment(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    fmean = 10 * p * r / (r + 9 * p)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1 - penalty)


@dataclass
class NlgScore:
    bleu: tuple[float, float, float, float]
    meteor: float
    rouge_l: float

    def as_row(self) -> dict[str, float]:
        return dict(zip(NLG_COLUMNS, (*self.bleu, self.meteor, self.rouge_l)))


def score_pair(candidate: Sequence[str], reference: Sequence[str]) -> NlgScore:
    return NlgScore(tuple(bleu_n(candidate, reference, 4)), meteor_exact(candidate, reference),
                    rouge_l(candidate, reference))


def corpus_scores(candidates: Iterable[Sequence[str]], references: Iterable[Sequence[str]]) -> NlgScore:
    rows = [score_pair(c, r) for c, r in zip(candidates, references, strict=True)]
    if not rows:
        raise MetricError("no pairs to score")
    mat = np.array([[*s.bleu, s.meteor, s.rouge_l] for s in rows], dtype=np.float64)
    mean = mat.mean(axis=0)
    return NlgScore(tuple(float(v) for v in mean[:4]), float(mean[4]), float(mean[5]))


# ---------------------------------------------------------------- survival


@dataclass(frozen=True)
class SurvivalRecord:
    risk_score: float
    event_time: float
    censored: bool

    def __post_init__(self):
        if not (math.isfinite(self.risk_score) and math.isfinite(self.event_time)):
            raise MetricError("non-finite survival record")
        if self.event_time <= 0:
            raise MetricError(f"event time must be positive, got {self.event_time}")


def c_index(records: Sequence[SurvivalRecord]) -> float:
    """Harrell's concordance: over pairs where i has an event and t_i < t_j,
    the fraction with risk_i > risk_j; risk ties count one half."""
    risk = np.array([r.risk_score for r in records], dtype=np.float64)
    time = np.array([r.event_time for r in records], dtype=np.float64)
    event = np.array([not r.censored for r in records], dtype=bool)
    comparable = event[:, None] & (time[:, None] < time[None, :])
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise MetricError("no comparable pairs")
    concordant = (risk[:, None] > risk[None, :]) & comparable
    tied = (risk[:, None] == risk[None, :]) & comparable
    return (int(concordant.sum()) + 0.5 * int(tied.sum())) / n_pairs


# ---------------------------------------------------------------- classification


def binary_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC for positive label 1, average ranks on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined with a single class")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def binary_and_multiclass_scores(probs, labels) -> tuple[float, float]:
    """Accuracy and AUC (one-vs-rest macro average when more than two classes)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if probs.ndim == 1:
        probs = np.stack([1 - probs, probs], axis=1)
    acc = float((probs.argmax(axis=1) == labels).mean())
    present = np.unique(labels)
    if len(present) < 2:
        raise MetricError("AUC undefined with a single class")
    if probs.shape[1] == 2:
        return acc, binary_auc(probs[:, 1], labels == 1)
    aucs = [binary_auc(probs[:, k], labels == k) for k in present]
    return acc, float(np.mean(aucs))
