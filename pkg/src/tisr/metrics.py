"""Text-generation metrics and rule-based clinical-efficacy labels.

All corpus functions take parallel lists of token lists (candidates,
references). METEOR here is an exact-match-only variant; there is no
stemming or synonym stage.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import FINDINGS, NEGATION_CUES

BLEU_EPS = 1e-9


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor_exact: float
    rouge_l: float
    ce_precision: float
    ce_recall: float
    ce_f1: float

    def as_dict(self):
        return asdict(self)


METRIC_COLUMNS = tuple(MetricReport.__dataclass_fields__)


def _tokens(x):
    return x.split() if isinstance(x, str) else list(x)


def _check(candidates, references):
    if len(candidates) != len(references):
        raise ValueError(f"corpus length mismatch: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    return [_tokens(c) for c in candidates], [_tokens(r) for r in references]


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n=4):
    """Corpus BLEU-1..max_n with clipped counts and a shared brevity penalty.

    Orders with zero matches are floored at ``BLEU_EPS`` before the log.
    """
    cands, refs = _check(candidates, references)
    matched = [0] * max_n
    total = [0] * max_n
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    for c, r in zip(cands, refs):
        for n in range(1, max_n + 1):
            cn, rn = _ngrams(c, n), _ngrams(r, n)
            matched[n - 1] += sum(min(v, rn[g]) for g, v in cn.items())
            total[n - 1] += max(len(c) - n + 1, 0)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    logs = [math.log(max(m / t if t else 0.0, BLEU_EPS)) for m, t in zip(matched, total)]
    return [bp * math.exp(sum(logs[:k]) / k) for k in range(1, max_n + 1)]


def modified_precision(candidate, reference, n):
    c, r = _ngrams(_tokens(candidate), n), _ngrams(_tokens(reference), n)
    total = sum(c.values())
    return sum(min(v, r[g]) for g, v in c.items()) / total if total else 0.0


def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references, beta=1.0):
    """Mean per-pair LCS F-measure (``beta=1`` gives F1)."""
    cands, refs = _check(candidates, references)
    scores = []
    for c, r in zip(cands, refs):
        lcs = lcs_length(c, r)
        if lcs == 0:
            scores.append(0.0)
            continue
        p, rec = lcs / len(c), lcs / len(r)
        scores.append((1 + beta**2) * p * rec / (rec + beta**2 * p))
    return float(np.mean(scores))


def _align(c, r):
    """Exact unigram alignment: longest common runs first, yielding ``(i, j)`` pairs."""
    free_c = [True] * len(c)
    free_r = [True] * len(r)
    pairs = []
    while True:
        best = (0, 0, 0)
        for i in range(len(c)):
            if not free_c[i]:
                continue
            for j in range(len(r)):
                if not free_r[j] or c[i] != r[j]:
                    continue
                k = 0
                while i + k < len(c) and j + k < len(r) and free_c[i + k] and free_r[j + k] and c[i + k] == r[j + k]:
                    k += 1
                if k > best[0]:
                    best = (k, i, j)
        k, i, j = best
        if k == 0:
            break
        for d in range(k):
            free_c[i + d] = free_r[j + d] = False
            pairs.append((i + d, j + d))
    return sorted(pairs)


def count_chunks(pairs):
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_sentence(candidate, reference, alpha=0.9, beta=3.0, gamma=0.5):
    c, r = _tokens(candidate), _tokens(reference)
    pairs = _align(c, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    f_mean = p * rec / (alpha * p + (1 - alpha) * rec)
    penalty = gamma * (count_chunks(pairs) / m) ** beta
    return f_mean * (1 - penalty)


def meteor_exact(candidates, references, alpha=0.9, beta=3.0, gamma=0.5):
    cands, refs = _check(candidates, references)
    return float(np.mean([meteor_sentence(c, r, alpha, beta, gamma) for c, r in zip(cands, refs)]))


# ---------------------------------------------------------------------------
# clinical efficacy


@dataclass(frozen=True)
class LabelRule:
    name: str
    triggers: tuple
    negations: tuple


def default_rules():
    return [LabelRule(f.name, (f.phrase,), NEGATION_CUES) for f in FINDINGS]


def save_rules(rules, path):
    Path(path).write_text(
        "".join(f"{r.name}\t{','.join(r.triggers)}\t{','.join(r.negations)}\n" for r in rules)
    )


def load_rules(path):
    rules = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        name, trig, neg = line.split("\t")
        rules.append(LabelRule(name, tuple(t.strip() for t in trig.split(",") if t.strip()),
                               tuple(n.strip() for n in neg.split(",") if n.strip())))
    return rules


def _find(seq, phrase):
    n = len(phrase)
    return [i for i in range(len(seq) - n + 1) if seq[i : i + n] == phrase]


def ce_labels(report, rules=None):
    """Binary finding vector: a trigger counts unless a negation cue precedes it in its sentence."""
    rules = rules or default_rules()
    tokens = [t.lower() for t in _tokens(report)]
    sentences, cur = [], []
    for t in tokens:
        if t == ".":
            sentences.append(cur)
            cur = []
        else:
            cur.append(t)
    if cur:
        sentences.append(cur)
    out = np.zeros(len(rules), dtype=np.int64)
    for k, rule in enumerate(rules):
        negs = [n.split() for n in rule.negations]
        for sent in sentences:
            for trig in rule.triggers:
                for pos in _find(sent, trig.split()):
                    before = sent[:pos]
                    if not any(_find(before, n) for n in negs):
                        out[k] = 1
    return out


def prf1(pred, gold):
    """Micro precision/recall/F1 over every (sample, finding) cell."""
    pred = np.asarray(pred, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ValueError(f"label shape mismatch: {pred.shape} vs {gold.shape}")
    tp = int(np.sum((pred == 1) & (gold == 1)))
    n_pred, n_gold = int(pred.sum()), int(gold.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def evaluate_corpus(candidates, references, rules=None) -> MetricReport:
    """All nine metrics; CE labels are extracted from both sides with the same rules."""
    cands, refs = _check(candidates, references)
    b = bleu(cands, refs)
    pred = np.array([ce_labels(c, rules) for c in cands])
    gold = np.array([ce_labels(r, rules) for r in refs])
    p, r, f = prf1(pred, gold)
    return MetricReport(b[0], b[1], b[2], b[3], meteor_exact(cands, refs), rouge_l(cands, refs), p, r, f)

