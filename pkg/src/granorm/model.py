"""Neural scoring of derivation actions.

A single-layer bidirectional LSTM encodes the utterance; an attentional
LSTM decoder consumes the previous action's embedding plus its previous
attentional vector and emits, per step: logits for constructor and Reduce
choices, generation logits over the token vocabulary, raw copy scores per
source position, and a copy-gate probability.

Token candidates merge generation and copying per surface form.  In
``local`` mode the merged value is a probability, ``p_gen*P(v|gen) +
p_copy*P(v|copy)``, and the per-step distribution is its softmaxed log
(softmax leaves a normalized vector unchanged).  In ``global`` mode raw
logits are gate-interpolated instead; tokens absent from the source keep
their generation logit, and source tokens absent from the vocabulary keep
their summed copy score.

The same forward code serves training (on a :class:`autodiff.Tape`) and
search (on :class:`autodiff.NoGrad`), so both produce identical numbers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import transition
from .autodiff import NoGrad, ParamStore, value_of
from .grammar import FIELD_END

UNK = "<unk>"
LOCAL = "local"
GLOBAL = "global"
MODES = (LOCAL, GLOBAL)

# mixture probabilities are floored only to keep log() finite; the floor
# is far below any reachable probability at float64
_LOG_FLOOR = 1e-300


class ModelError(Exception):
    pass


class SrcVocab:
    """Source-side token ids; unknown tokens map to a reserved row."""

    def __init__(self, tokens):
        toks = list(tokens)
        if UNK not in toks:
            toks = [UNK] + toks
        self.tokens = tuple(toks)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.unk_id = self.index[UNK]

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens):
        return tuple(self.index.get(t, self.unk_id) for t in tokens)


@dataclass(frozen=True)
class Utterance:
    tokens: tuple
    ids: tuple

    def __post_init__(self):
        if not self.tokens:
            raise ModelError("empty utterance")


@dataclass
class SourceIndex:
    """Per-utterance copy bookkeeping.

    ``distinct`` lists each surface form once, by first occurrence;
    ``positions`` is a 0/1 matrix [distinct x length] summing per-position
    quantities into per-form quantities.  ``vocab_scatter`` places
    per-form values at their vocabulary rows (zero elsewhere) and
    ``in_vocab_mask`` marks vocabulary tokens present in the source;
    ``extra`` are source forms outside the vocabulary, with ``extra_pick``
    selecting their per-form values.
    """

    distinct: tuple
    positions: np.ndarray
    in_vocab_mask: np.ndarray
    vocab_scatter: np.ndarray
    extra: tuple
    extra_pick: np.ndarray


def build_source_index(tokens, token_vocab):
    distinct = []
    seen = {}
    for t in tokens:
        if t not in seen:
            seen[t] = len(distinct)
            distinct.append(t)
    n, length = len(distinct), len(tokens)
    positions = np.zeros((n, length))
    for j, t in enumerate(tokens):
        positions[seen[t], j] = 1.0
    vocab_index = {t: i for i, t in enumerate(token_vocab)}
    in_vocab_mask = np.zeros(len(token_vocab), dtype=bool)
    vocab_scatter = np.zeros((len(token_vocab), n))
    extra = [t for t in distinct if t not in vocab_index]
    extra_pick = np.zeros((len(extra), n))
    k = 0
    for i, t in enumerate(distinct):
        vi = vocab_index.get(t)
        if vi is None:
            extra_pick[k, i] = 1.0
            k += 1
        else:
            in_vocab_mask[vi] = True
            vocab_scatter[vi, i] = 1.0
    return SourceIndex(tuple(distinct), positions, in_vocab_mask, vocab_scatter, tuple(extra), extra_pick)


@dataclass
class EncoderOutput:
    utterance: Utterance
    states: object  # [L, d]
    summary: object  # [d]
    src_index: SourceIndex


@dataclass
class DecoderState:
    h: object
    c: object
    att: object  # previous attentional vector, zeros at step 0


@dataclass
class StepLogits:
    """Everything the model says about one decoding step."""

    candidates: tuple
    logits: object  # [k], aligned with candidates, mode-assembled
    p_copy: object  # scalar
    copy_attention: object  # [L], normalized copy pointer
    gen_support: tuple  # the token vocabulary behind the generation head
    mode: str
    # raw pieces, shared by both modes
    constr_logits: object  # [n_constructors + 1], last row is Reduce
    gen_logits: object  # [V]
    copy_token_scores: object  # [n_distinct] summed raw scores per source form


@dataclass
class _StepCore:
    h: object
    c: object
    s_tilde: object
    attention: object
    copy_scores: object
    copy_attention: object
    p_copy: object
    constr_logits: object
    gen_logits: object


class Scorer:
    """Binds a grammar, vocabularies, and a dimension to parameter shapes
    and the forward computation."""

    def __init__(self, grammar, src_vocab, dim=64):
        if dim % 2 != 0 or dim < 2:
            raise ModelError("dim must be a positive even integer")
        self.grammar = grammar
        self.src_vocab = src_vocab
        self.dim = dim
        self.n_ctors = len(grammar.constructors)
        self.vocab = grammar.token_vocab
        self.vocab_index = {t: i for i, t in enumerate(self.vocab)}
        n = self.n_ctors
        self.reduce_row = n + len(self.vocab)
        self.start_row = self.reduce_row + 1
        self.unk_row = self.start_row + 1

    def param_shapes(self):
        d = self.dim
        h = d // 2
        return {
            "enc_embed": (len(self.src_vocab), d),
            "enc_fwd_W": (4 * h, d),
            "enc_fwd_U": (4 * h, h),
            "enc_fwd_b": (4 * h,),
            "enc_bwd_W": (4 * h, d),
            "enc_bwd_U": (4 * h, h),
            "enc_bwd_b": (4 * h,),
            "dec_init_W": (d, d),
            "dec_init_b": (d,),
            "act_embed": (self.unk_row + 1, d),
            "dec_W": (4 * d, 2 * d),
            "dec_U": (4 * d, d),
            "dec_b": (4 * d,),
            "att_W": (d, d),
            "ctx_W": (d, 2 * d),
            "ctx_b": (d,),
            "out_constr_W": (self.n_ctors + 1, d),
            "out_constr_b": (self.n_ctors + 1,),
            "out_gen_W": (len(self.vocab), d),
            "out_gen_b": (len(self.vocab),),
            "copy_W": (d, d),
            "gate_w": (d,),
            "gate_b": (),
        }

    def init_params(self, seed):
        store = ParamStore(seed)
        for name, shape in self.param_shapes().items():
            store.add(name, shape)
        return store

    def action_row(self, action):
        """Embedding row of an action; the start row when ``action`` is None."""
        if action is None:
            return self.start_row
        if isinstance(action, transition.ApplyConstr):
            return action.ctor_id
        if isinstance(action, transition.GenToken):
            vi = self.vocab_index.get(action.token)
            return self.unk_row if vi is None else self.n_ctors + vi
        return self.reduce_row

    def _lstm(self, bk, prefix, x, h, c, hidden):
        z = bk.add(bk.add(bk.matmul(bk.param(prefix + "_W"), x), bk.matmul(bk.param(prefix + "_U"), h)), bk.param(prefix + "_b"))
        i = bk.sigmoid(bk.slice1d(z, 0, hidden))
        f = bk.sigmoid(bk.slice1d(z, hidden, 2 * hidden))
        o = bk.sigmoid(bk.slice1d(z, 2 * hidden, 3 * hidden))
        g = bk.tanh(bk.slice1d(z, 3 * hidden, 4 * hidden))
        c2 = bk.add(bk.mul(f, c), bk.mul(i, g))
        h2 = bk.mul(o, bk.tanh(c2))
        return h2, c2

    def utterance(self, tokens):
        tokens = tuple(tokens)
        return Utterance(tokens, self.src_vocab.encode(tokens))

    def encode(self, bk, utt):
        """Run the bidirectional encoder; deterministic per (input, params)."""
        h = self.dim // 2
        xs = [bk.lookup(bk.param("enc_embed"), i) for i in utt.ids]
        zero = bk.const(np.zeros(h))
        fh, fc, fwd = zero, zero, []
        for x in xs:
            fh, fc = self._lstm(bk, "enc_fwd", x, fh, fc, h)
            fwd.append(fh)
        bh, bc, bwd_states = zero, zero, []
        for x in reversed(xs):
            bh, bc = self._lstm(bk, "enc_bwd", x, bh, bc, h)
            bwd_states.append(bh)
        bwd_states.reverse()
        states = bk.stack([bk.concat([f, b]) for f, b in zip(fwd, bwd_states)])
        ends = bk.concat([fwd[-1], bwd_states[0]])
        summary = bk.tanh(bk.add(bk.matmul(bk.param("dec_init_W"), ends), bk.param("dec_init_b")))
        idx = build_source_index(utt.tokens, self.vocab)
        return EncoderOutput(utt, states, summary, idx)

    def initial_decoder_state(self, bk, enc):
        d = self.dim
        return DecoderState(enc.summary, bk.const(np.zeros(d)), bk.const(np.zeros(d)))

    def _step_core(self, bk, enc, dec, prev_action):
        d = self.dim
        emb = bk.lookup(bk.param("act_embed"), self.action_row(prev_action))
        x = bk.concat([emb, dec.att])
        h, c = self._lstm(bk, "dec", x, dec.h, dec.c, d)
        att_scores = bk.matmul(enc.states, bk.matmul(bk.param("att_W"), h))
        alpha = bk.softmax(att_scores)
        ctx = bk.matmul(alpha, enc.states)
        s_tilde = bk.tanh(bk.add(bk.matmul(bk.param("ctx_W"), bk.concat([h, ctx])), bk.param("ctx_b")))
        constr_logits = bk.add(bk.matmul(bk.param("out_constr_W"), s_tilde), bk.param("out_constr_b"))
        gen_logits = bk.add(bk.matmul(bk.param("out_gen_W"), s_tilde), bk.param("out_gen_b"))
        copy_scores = bk.matmul(enc.states, bk.matmul(bk.param("copy_W"), s_tilde))
        copy_attention = bk.softmax(copy_scores)
        p_copy = bk.sigmoid(bk.add(bk.dot(bk.param("gate_w"), s_tilde), bk.param("gate_b")))
        core = _StepCore(h, c, s_tilde, alpha, copy_scores, copy_attention, p_copy,
                         constr_logits, gen_logits)
        return core, DecoderState(h, c, s_tilde)

    def _assemble(self, bk, core, state, enc, mode):
        """Build the candidate-aligned logit vector for one mode."""
        candidates = state.candidates(enc.utterance.tokens)
        fd = state.current_field()
        idx = enc.src_index
        copy_token_scores = bk.matmul(bk.const(idx.positions), core.copy_scores)
        if not fd.is_primitive:
            rows = [a.ctor_id for a in candidates if isinstance(a, transition.ApplyConstr)]
            if len(rows) < len(candidates):  # trailing Reduce
                rows.append(self.n_ctors)
            logits = bk.gather(core.constr_logits, rows)
        elif mode == GLOBAL:
            scattered = bk.matmul(bk.const(idx.vocab_scatter), copy_token_scores)
            merged = bk.merged_logits(core.gen_logits, scattered, core.p_copy, idx.in_vocab_mask)
            if idx.extra:
                extra = bk.matmul(bk.const(idx.extra_pick), copy_token_scores)
                logits = bk.concat([merged, extra])
            else:
                logits = merged
        else:
            gen_probs = bk.softmax(core.gen_logits)
            copy_token_probs = bk.matmul(bk.const(idx.positions), core.copy_attention)
            p_gen = bk.sub(bk.const(1.0), core.p_copy)
            mix = bk.add(
                bk.mul(p_gen, gen_probs),
                bk.mul(core.p_copy, bk.matmul(bk.const(idx.vocab_scatter), copy_token_probs)),
            )
            if idx.extra:
                extra = bk.mul(core.p_copy, bk.matmul(bk.const(idx.extra_pick), copy_token_probs))
                mix = bk.concat([mix, extra])
            logits = bk.log(bk.clip_min(mix, _LOG_FLOOR))
        return StepLogits(
            candidates=candidates,
            logits=logits,
            p_copy=core.p_copy,
            copy_attention=core.copy_attention,
            gen_support=self.vocab,
            mode=mode,
            constr_logits=core.constr_logits,
            gen_logits=core.gen_logits,
            copy_token_scores=copy_token_scores,
        )

    def step_logits(self, bk, state, prev_action, enc, dec, mode):
        """Score one decoding step; returns (StepLogits, next decoder state)."""
        if mode not in MODES:
            raise ModelError(f"unknown mode {mode!r}")
        core, next_dec = self._step_core(bk, enc, dec, prev_action)
        return self._assemble(bk, core, state, enc, mode), next_dec

    def step_both(self, bk, state, prev_action, enc, dec):
        """One decoder step assembled under both modes (shared forward)."""
        core, next_dec = self._step_core(bk, enc, dec, prev_action)
        local = self._assemble(bk, core, state, enc, LOCAL)
        glob = self._assemble(bk, core, state, enc, GLOBAL)
        return local, glob, next_dec

    def score_sequence(self, bk, utt, actions, mode, enc=None):
        """Teacher-forced scoring of a complete or partial action sequence.

        Returns (sum of per-step local log-probabilities, sum of per-step
        raw logits, number of steps).  In ``local`` mode the raw logits are
        the log-mixture values; in ``global`` mode the interpolated logits.
        """
        if enc is None:
            enc = self.encode(bk, utt)
        dec = self.initial_decoder_state(bk, enc)
        state = transition.initial_state(self.grammar)
        prev = None
        local_terms = []
        raw_terms = []
        for action in actions:
            sl, dec = self.step_logits(bk, state, prev, enc, dec, mode)
            try:
                pos = sl.candidates.index(action)
            except ValueError:
                raise ModelError(
                    f"action {action!r} at step {state.step} is not a candidate "
                    "(token outside vocabulary and source?)"
                ) from None
            local_terms.append(bk.pick(bk.log_softmax(sl.logits), pos))
            raw_terms.append(bk.pick(sl.logits, pos))
            state = state.apply(action)
            prev = action
        n = len(actions)
        return bk.add_n(local_terms), bk.add_n(raw_terms), n


def local_step_distribution(step_logits):
    """Per-step local distribution: softmax over the candidate logits."""
    from .autodiff import softmax as _softmax

    return _softmax(value_of(step_logits.logits))


def copy_merged_probability(p_gen, p_v_gen, p_v_copy):
    """Local-mode token probability: ``p_gen*P(v|gen) + (1-p_gen)*P(v|copy)``."""
    return p_gen * p_v_gen + (1.0 - p_gen) * p_v_copy


def copy_merged_logit(p_gen, o_gen, o_copy):
    """Global-mode token logit: gate-weighted interpolation of raw logits,
    guaranteed to lie between them."""
    from .autodiff import merged_logit

    return float(merged_logit(p_gen, o_gen, o_copy))


def sequence_local_logprob(scorer, store, utt, actions):
    """Log of the locally normalized sequence probability (sum over steps)."""
    local, _, _ = scorer.score_sequence(NoGrad(store), utt, actions, LOCAL)
    return float(local)


def sequence_global_logit(scorer, store, utt, actions):
    """Length-averaged raw logit of the sequence under global-mode scoring."""
    _, raw, n = scorer.score_sequence(NoGrad(store), utt, actions, GLOBAL)
    return float(raw) / n


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"GNSP"
_VERSION = 1


def save_checkpoint(store, path):
    """Write all parameters as little-endian float32 tensors."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(store)))
        for name, arr in store.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint into an ordered {name: float64 array} mapping."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ModelError(f"{path}: bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).astype(np.float64)
        off += 4 * size
        arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"{path}: non-finite values in tensor {name!r}")
        if name in out:
            raise ModelError(f"{path}: duplicate tensor {name!r}")
        out[name] = arr
    if off != len(data):
        raise ModelError(f"{path}: trailing bytes after {count} tensors")
    return out
