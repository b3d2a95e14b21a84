"""Evaluation metrics: exact tree match and corpus BLEU.

BLEU operates on linearized trees: the pre-order walk of constructor
names and token leaves.  It is corpus-level with n-gram orders 1-4,
uniform weights, clipped counts, brevity penalty ``exp(1 - r/c)`` for
``c <= r``, and no smoothing: any order with matched hypothesis n-grams
but zero overlap yields 0.  Orders for which the corpus has no
hypothesis n-grams at all (every hypothesis shorter than ``n``) are
excluded from the geometric mean, so identical short corpora score 1.0.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .grammar import MULTIPLE


def exact_match(pred, gold):
    """Structural tree equality."""
    return pred == gold


def linearize(ast, spec):
    """Pre-order constructor names and token leaves, as a token list."""
    ctor = spec.constructor(ast.ctor_id)
    out = [ctor.name]
    for fd, value in zip(ctor.fields, ast.children):
        if fd.is_primitive:
            out.extend(value)
        elif fd.cardinality == MULTIPLE:
            for child in value:
                out.extend(linearize(child, spec))
        elif value is not None:
            out.extend(linearize(value, spec))
    return out


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(pairs, max_order=4):
    """Corpus BLEU over (hypothesis tokens, reference tokens) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus_bleu needs at least one pair")
    matched = [0] * max_order
    total = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in pairs:
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            hgrams = _ngrams(hyp, n)
            if not hgrams:
                continue
            rgrams = _ngrams(ref, n)
            total[n - 1] += sum(hgrams.values())
            matched[n - 1] += sum(min(c, rgrams[g]) for g, c in hgrams.items())
    log_sum = 0.0
    used = 0
    for n in range(max_order):
        if total[n] == 0:
            continue
        if matched[n] == 0:
            return 0.0
        log_sum += math.log(matched[n] / total[n])
        used += 1
    if used == 0 or hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum / used)


@dataclass
class EvalReport:
    n_examples: int
    exact_match: float
    bleu: float
    per_example: list = field(default_factory=list)

    def as_dict(self, include_examples=False):
        out = {
            "n_examples": self.n_examples,
            "exact_match": self.exact_match,
            "bleu": self.bleu,
        }
        if include_examples:
            out["examples"] = self.per_example
        return out


def evaluate_predictions(preds, golds, spec):
    """Score predicted trees (``None`` for decode failures) against gold."""
    if len(preds) != len(golds):
        raise ValueError("prediction/gold length mismatch")
    records = []
    pairs = []
    hits = 0
    for pred, gold in zip(preds, golds):
        match = pred is not None and exact_match(pred, gold)
        hits += match
        hyp = linearize(pred, spec) if pred is not None else []
        ref = linearize(gold, spec)
        pairs.append((hyp, ref))
        records.append(match)
    n = len(golds)
    return EvalReport(n, hits / n, corpus_bleu(pairs), records)
