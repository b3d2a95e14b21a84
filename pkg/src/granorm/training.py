"""Training: locally normalized MLE and globally normalized max-margin.

MLE minimizes the negative log-probability of the gold action sequence
under teacher forcing.  Max-margin training mines negatives by running
beam search (global mode) against the current parameters, drops the gold
sequence from the beam, and applies a hinge per negative::

    loss = max(0, mean_logit(negative) - mean_logit(gold) + margin)

averaged over the mined negatives.  Inactive hinges contribute exactly
zero, so their graphs are never built; a batch whose loss is exactly
zero skips the optimizer step entirely, leaving parameters bit-identical.

The loop shuffles per epoch with a seeded generator, evaluates dev exact
match and BLEU each epoch with beam decoding, keeps the best parameters
by dev exact match, and emits one stats record per epoch.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, search
from .autodiff import AdamState, NoGrad, Tape, adam_step, backward, clip_global_norm
from .model import GLOBAL, LOCAL, MODES, Scorer

log = logging.getLogger("granorm.training")


class TrainingError(Exception):
    pass


@dataclass
class TrainingConfig:
    mode: str = LOCAL
    lr: float = 5e-4
    margin: float = 0.1
    neg_beam_width: int = 20
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    dim: int = 64
    eval_beam_width: int = 5
    patience: int | None = None  # stop after this many epochs without dev-EM gain
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainingError(f"mode must be one of {MODES}")
        if self.margin <= 0.0:
            raise TrainingError("margin must be positive")
        if self.mode == GLOBAL and self.neg_beam_width < 2:
            raise TrainingError("neg_beam_width must be at least 2")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_beam_width < 1:
            raise TrainingError("epochs, batch_size and eval_beam_width must be positive")
        if self.lr <= 0.0:
            raise TrainingError("lr must be positive")


@dataclass
class EpochStats:
    epoch: int
    mode: str
    loss: float
    active_hinge_frac: float | None
    dev_em: float
    dev_bleu: float
    n_skipped: int = 0
    wall_clock: float = 0.0

    def record(self):
        """The serialized per-epoch stats record."""
        return {
            "epoch": self.epoch,
            "mode": self.mode,
            "loss": self.loss,
            "active_hinge_frac": self.active_hinge_frac,
            "dev_em": self.dev_em,
            "dev_bleu": self.dev_bleu,
        }


@dataclass
class TrainStats:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_dev_em: float = -1.0


def max_margin_loss(o_neg, o_pos, margin):
    """Hinge on length-averaged logits; 0 when gold clears the margin."""
    return max(0.0, o_neg - o_pos + margin)


def _mean(values):
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total * (1.0 / len(values))


def mle_loss(tape, scorer, utt, actions, enc=None):
    """Negative log-probability of the gold sequence, as a graph node."""
    local_sum, _, _ = scorer.score_sequence(tape, utt, actions, LOCAL, enc=enc)
    return tape.scale(local_sum, -1.0)


def mine_negatives(scorer, store, utt, gold_actions, width):
    """Beam contents minus the gold sequence, best first."""
    try:
        hyps = search.beam_search(scorer, store, utt, width, GLOBAL)
    except search.SearchError:
        return []
    return [h.actions for h in hyps if h.actions != gold_actions]


def init_global_from_local(scorer, state):
    """A fresh parameter store warm-started from a local checkpoint's
    tensors; names and shapes must match the scorer's architecture."""
    store = scorer.init_params(seed=0)
    store.load_state(state)
    return store


def _example_margin_terms(scorer, store, utt, gold_actions, cfg):
    """No-grad pass: mined negatives plus their hinge values."""
    negatives = mine_negatives(scorer, store, utt, gold_actions, cfg.neg_beam_width)
    if not negatives:
        return None
    bk = NoGrad(store)
    enc = scorer.encode(bk, utt)
    # arithmetic mirrors the tape path exactly so the no-grad hinge values
    # and the differentiated loss agree bit-for-bit
    _, pos_raw, n_pos = scorer.score_sequence(bk, utt, gold_actions, GLOBAL, enc=enc)
    o_pos = float(pos_raw) * (1.0 / n_pos)
    hinges = []
    for neg in negatives:
        _, neg_raw, n_neg = scorer.score_sequence(bk, utt, neg, GLOBAL, enc=enc)
        hinges.append(max_margin_loss(float(neg_raw) * (1.0 / n_neg), o_pos, cfg.margin))
    return negatives, hinges


def global_batch_step(scorer, store, batch, cfg, adam, stats_acc):
    """One max-margin update over a batch; returns the batch loss."""
    work = []  # (utt, gold, negatives, hinges) for examples with negatives
    for utt, gold in batch:
        terms = _example_margin_terms(scorer, store, utt, gold, cfg)
        if terms is None:
            stats_acc["skipped"] += 1
            continue
        negatives, hinges = terms
        stats_acc["hinges_total"] += len(hinges)
        stats_acc["hinges_active"] += sum(h > 0.0 for h in hinges)
        work.append((utt, gold, negatives, hinges))
    if not work:
        return 0.0
    batch_loss = _mean([_mean(hinges) for _, _, _, hinges in work])
    if batch_loss == 0.0:
        return 0.0
    tape = Tape(store)
    example_nodes = []
    for utt, gold, negatives, hinges in work:
        active = [neg for neg, h in zip(negatives, hinges) if h > 0.0]
        if not active:
            continue
        enc = scorer.encode(tape, utt)
        _, pos_raw, n_pos = scorer.score_sequence(tape, utt, gold, GLOBAL, enc=enc)
        o_pos = tape.scale(pos_raw, 1.0 / n_pos)
        hinge_nodes = []
        for neg in active:
            _, neg_raw, n_neg = scorer.score_sequence(tape, utt, neg, GLOBAL, enc=enc)
            o_neg = tape.scale(neg_raw, 1.0 / n_neg)
            hinge_nodes.append(
                tape.clip_min(tape.add(tape.sub(o_neg, o_pos), tape.const(cfg.margin)), 0.0)
            )
        example_nodes.append(tape.scale(tape.add_n(hinge_nodes), 1.0 / len(negatives)))
    loss_node = tape.scale(tape.add_n(example_nodes), 1.0 / len(work))
    backward(loss_node)
    grads, _ = clip_global_norm(tape.grads(), cfg.clip_norm)
    adam_step(store, grads, adam, lr=cfg.lr)
    return float(loss_node.value)


def local_batch_step(scorer, store, batch, cfg, adam):
    """One MLE update over a batch; returns the batch loss."""
    tape = Tape(store)
    losses = [mle_loss(tape, scorer, utt, gold) for utt, gold in batch]
    loss_node = tape.scale(tape.add_n(losses), 1.0 / len(losses))
    loss = float(loss_node.value)
    if loss == 0.0:
        return 0.0
    backward(loss_node)
    grads, _ = clip_global_norm(tape.grads(), cfg.clip_norm)
    adam_step(store, grads, adam, lr=cfg.lr)
    return loss


def decode_trees(scorer, store, utts, width, mode, jobs=1):
    """Top-1 beam decode per utterance; ``None`` where search fails."""

    def one(utt):
        try:
            hyps = search.beam_search(scorer, store, utt, width, mode)
        except search.SearchError:
            return None
        return hyps[0].state.result

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, utts))
    return [one(u) for u in utts]


def evaluate_model(scorer, store, examples, width, mode, jobs=1):
    utts = [scorer.utterance(ex.src) for ex in examples]
    preds = decode_trees(scorer, store, utts, width, mode, jobs=jobs)
    return metrics.evaluate_predictions(preds, [ex.tgt for ex in examples], scorer.grammar)


def train(scorer, train_examples, dev_examples, cfg, init_state=None):
    """Run the full loop; returns (best parameter store, TrainStats)."""
    if cfg.mode == GLOBAL and init_state is not None:
        store = init_global_from_local(scorer, init_state)
    elif init_state is not None:
        store = scorer.init_params(cfg.seed)
        store.load_state(init_state)
    else:
        store = scorer.init_params(cfg.seed)
    adam = AdamState()
    data = [(scorer.utterance(ex.src), ex.tgt_actions) for ex in train_examples]
    stats = TrainStats()
    best_store = store.copy()
    since_best = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1000 + epoch]))
        order = rng.permutation(len(data))
        acc = {"skipped": 0, "hinges_total": 0, "hinges_active": 0}
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start : start + cfg.batch_size]]
            if cfg.mode == LOCAL:
                losses.append(local_batch_step(scorer, store, batch, cfg, adam))
            else:
                losses.append(global_batch_step(scorer, store, batch, cfg, adam, acc))
        report = evaluate_model(scorer, store, dev_examples, cfg.eval_beam_width, cfg.mode)
        active_frac = None
        if cfg.mode == GLOBAL:
            active_frac = (acc["hinges_active"] / acc["hinges_total"]) if acc["hinges_total"] else 0.0
        ep = EpochStats(
            epoch=epoch,
            mode=cfg.mode,
            loss=sum(losses) / len(losses),
            active_hinge_frac=active_frac,
            dev_em=report.exact_match,
            dev_bleu=report.bleu,
            n_skipped=acc["skipped"],
            wall_clock=time.perf_counter() - t0,
        )
        stats.epochs.append(ep)
        log.info(
            "epoch %d mode=%s loss=%.6f dev_em=%.4f dev_bleu=%.4f (%.2fs)",
            epoch, cfg.mode, ep.loss, ep.dev_em, ep.dev_bleu, ep.wall_clock,
        )
        if ep.dev_em > stats.best_dev_em:
            stats.best_dev_em = ep.dev_em
            stats.best_epoch = epoch
            best_store = store.copy()
            since_best = 0
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                log.info("no dev improvement for %d epochs, stopping", cfg.patience)
                break
    return best_store, stats
