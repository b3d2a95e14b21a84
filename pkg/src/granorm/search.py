"""Beam search over derivations, and an exact enumeration oracle.

Beam search keeps ``width`` live hypotheses, expands every candidate
action of each, and retires completed hypotheses to a finished pool
(finished hypotheses do not occupy live slots).  Hypotheses are ranked by
mean per-step score over their own length: mean local log-probability in
``local`` mode, mean raw logit in ``global`` mode.  Score ties break on
the lexicographic order of action sequences.  Search ends when ``width``
hypotheses have finished, the step cap is reached, or nothing is live.

The oracle enumerates every complete derivation within a step cap and
scores each exactly, yielding the true partition function of the
globally normalized distribution and the exact locally normalized
sequence log-probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import transition
from .autodiff import NoGrad, log_softmax
from .model import GLOBAL, LOCAL, MODES


class SearchError(Exception):
    """No hypothesis completed; carries the live partials for diagnostics."""

    def __init__(self, message, partials=()):
        super().__init__(message)
        self.partials = tuple(partials)


@dataclass
class Hypothesis:
    state: transition.DerivationState
    actions: tuple
    sum_logits: float
    sum_local_logprob: float
    dec: object

    def mean_score(self, mode):
        n = max(len(self.actions), 1)
        total = self.sum_local_logprob if mode == LOCAL else self.sum_logits
        return total / n

    @property
    def complete(self):
        return self.state.complete


def default_max_steps(utt):
    return 10 * len(utt.tokens) + 20


def _ranked(hyps, mode):
    return sorted(hyps, key=lambda h: (-h.mean_score(mode), transition.sequence_sort_key(h.actions)))


def beam_search(scorer, store, utt, width, mode, max_steps=None):
    """Decode ``utt`` with a beam of ``width``; returns ranked finished
    hypotheses (at most ``width``).  ``width=1`` is greedy search."""
    if mode not in MODES:
        raise SearchError(f"unknown mode {mode!r}")
    if width < 1:
        raise SearchError("beam width must be >= 1")
    if max_steps is None:
        max_steps = default_max_steps(utt)
    bk = NoGrad(store)
    enc = scorer.encode(bk, utt)
    live = [Hypothesis(transition.initial_state(scorer.grammar), (), 0.0, 0.0,
                       scorer.initial_decoder_state(bk, enc))]
    finished = []
    for _ in range(max_steps):
        if not live or len(finished) >= width:
            break
        successors = []
        for hyp in live:
            prev = hyp.actions[-1] if hyp.actions else None
            sl, dec = scorer.step_logits(bk, hyp.state, prev, enc, hyp.dec, mode)
            locals_ = log_softmax(sl.logits)
            for i, action in enumerate(sl.candidates):
                successors.append(
                    Hypothesis(
                        hyp.state.apply(action),
                        hyp.actions + (action,),
                        hyp.sum_logits + float(sl.logits[i]),
                        hyp.sum_local_logprob + float(locals_[i]),
                        dec,
                    )
                )
        live = []
        for h in successors:
            (finished if h.complete else live).append(h)
        live = _ranked(live, mode)[:width]
    if not finished:
        raise SearchError(f"no hypothesis completed within {max_steps} steps", partials=live)
    return _ranked(finished, mode)[:width]


@dataclass
class OracleReport:
    """Exact scores for every complete derivation within the step cap."""

    sequences: tuple  # of action tuples
    raw_scores: np.ndarray  # per-sequence sums of raw (global-mode) logits
    local_logprobs: np.ndarray  # per-sequence locally normalized log-probabilities
    z: float  # partition function: sum of exp(raw score)
    probs: np.ndarray  # exp(raw score) / z
    n_truncated: int  # branches abandoned at the step cap

    def local_mass(self):
        return math.fsum(math.exp(x) for x in self.local_logprobs)

    def ranking(self, mode):
        """Sequence indices ranked the way beam search ranks hypotheses."""
        scores = self.local_logprobs if mode == LOCAL else self.raw_scores
        keyed = [
            (-(scores[i] / len(seq)), transition.sequence_sort_key(seq), i)
            for i, seq in enumerate(self.sequences)
        ]
        return [i for _, _, i in sorted(keyed)]

    def by_prob(self):
        """Sequence indices by descending global probability."""
        keyed = [
            (-self.raw_scores[i], transition.sequence_sort_key(seq), i)
            for i, seq in enumerate(self.sequences)
        ]
        return [i for _, _, i in sorted(keyed)]


def exhaustive_derivations(scorer, store, utt, max_steps=None, limit=100_000):
    """Enumerate and score every complete derivation of ``utt``.

    Branches still open at ``max_steps`` are abandoned and counted in
    ``n_truncated``.  Raises :class:`SearchError` when the number of
    complete derivations exceeds ``limit``.
    """
    if max_steps is None:
        max_steps = default_max_steps(utt)
    bk = NoGrad(store)
    enc = scorer.encode(bk, utt)
    sequences = []
    raw_scores = []
    local_scores = []
    truncated = 0

    def walk(state, dec, prev, actions, raw_sum, local_sum):
        nonlocal truncated
        if state.complete:
            if len(sequences) >= limit:
                raise SearchError(f"more than {limit} complete derivations")
            sequences.append(actions)
            raw_scores.append(raw_sum)
            local_scores.append(local_sum)
            return
        if state.step >= max_steps:
            truncated += 1
            return
        local_sl, global_sl, dec2 = scorer.step_both(bk, state, prev, enc, dec)
        locals_ = log_softmax(local_sl.logits)
        raws = global_sl.logits
        for i, action in enumerate(local_sl.candidates):
            walk(state.apply(action), dec2, action, actions + (action,),
                 raw_sum + float(raws[i]), local_sum + float(locals_[i]))

    walk(transition.initial_state(scorer.grammar), scorer.initial_decoder_state(bk, enc),
         None, (), 0.0, 0.0)
    if not sequences:
        raise SearchError(f"no complete derivation within {max_steps} steps")
    raw = np.array(raw_scores)
    local = np.array(local_scores)
    z = math.fsum(math.exp(s) for s in raw_scores)
    if math.isfinite(z) and z > 0.0:
        probs = np.exp(raw) / z
    else:  # overflow guard: normalize in log space
        m = float(raw.max())
        probs = np.exp(raw - m)
        probs /= probs.sum()
    return OracleReport(tuple(sequences), raw, local, z, probs, truncated)
