"""Datasets: JSONL loading, vocabulary building, and a synthetic
benchmark isolating the label-bias failure of locally normalized models.

Dataset files hold one JSON object per line::

    {"src": ["use", "id007"], "tgt": "(UseId (tok \\"id007\\"))"}

The synthetic task pairs a high-entropy branch (emit one identifier from
a pool of K, copyable from the source) against a low-entropy branch
(pick one of two keywords cued by a source token).  Identifier sources
sometimes carry a keyword cue as a distractor, so a model that pays a
normalization tax over the wide identifier slot is tempted onto the
narrow keyword branch; 20% of the identifier pool never appears in
training targets and is reachable only by copying.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import transition
from .grammar import FIELD_END, parse_grammar


class CorpusError(Exception):
    pass


@dataclass(frozen=True)
class Example:
    src: tuple  # source tokens
    tgt: transition.AstNode
    tgt_actions: tuple
    tgt_sexpr: str


def load_jsonl(path, spec):
    """Load and validate a dataset; returns a list of :class:`Example`."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{line_no}: bad JSON: {exc}") from None
            if not isinstance(obj, dict) or "src" not in obj or "tgt" not in obj:
                raise CorpusError(f"{path}:{line_no}: expected an object with 'src' and 'tgt'")
            src = obj["src"]
            if (not isinstance(src, list) or not src
                    or not all(isinstance(t, str) and t for t in src)):
                raise CorpusError(f"{path}:{line_no}: 'src' must be a non-empty list of tokens")
            try:
                ast = transition.parse_sexpr(obj["tgt"], spec)
                actions = transition.ast_to_actions(ast, spec)
            except Exception as exc:
                raise CorpusError(f"{path}:{line_no}: bad target: {exc}") from None
            examples.append(Example(tuple(src), ast, actions, obj["tgt"]))
    if not examples:
        raise CorpusError(f"{path}: empty dataset")
    return examples


def _leaf_tokens(ast, spec):
    ctor = spec.constructor(ast.ctor_id)
    for fd, value in zip(ctor.fields, ast.children):
        if fd.is_primitive:
            yield from value
        elif isinstance(value, tuple):
            for child in value:
                yield from _leaf_tokens(child, spec)
        elif value is not None:
            yield from _leaf_tokens(value, spec)


def build_token_vocab(examples, spec, cutoff=2):
    """Token vocabulary from training-target leaves.

    The field-end marker comes first; then every token whose count meets
    ``cutoff``, by descending count and then lexicographically.  Rarer
    tokens stay out of the generation head and are reachable only via
    copying.
    """
    counts = Counter()
    for ex in examples:
        counts.update(_leaf_tokens(ex.tgt, spec))
    kept = sorted((t for t, c in counts.items() if c >= cutoff), key=lambda t: (-counts[t], t))
    return (FIELD_END,) + tuple(kept)


def build_src_tokens(examples, cutoff=1):
    """Source-side token list by descending count, then lexicographically.

    Tokens seen fewer than ``cutoff`` times share the unknown embedding;
    a high cutoff trains the copy path on unknown-word positions, which
    is what lets it generalize to names never seen in training.
    """
    counts = Counter()
    for ex in examples:
        counts.update(ex.src)
    return tuple(sorted((t for t in counts if counts[t] >= cutoff),
                        key=lambda t: (-counts[t], t)))


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# --- synthetic label-bias benchmark ----------------------------------------

SYNTH_GRAMMAR = """\
# two-branch benchmark: wide identifier slot vs narrow keyword slot
root Stmt
Stmt = UseId(token name)
Stmt = UseKw(Kw k)
Kw = A()
Kw = B()
"""

_VERB = "use"
_CUES = {"A": "alpha", "B": "beta"}
_FILLERS = ("please", "now", "again", "quickly", "really", "just", "maybe", "soon")


@dataclass(frozen=True)
class SynthSpec:
    """Generator configuration for the synthetic benchmark."""

    n_train: int = 500
    n_dev: int = 100
    n_test: int = 200
    identifier_pool: int = 50
    branch_prior: float = 0.8  # probability of the identifier branch
    noise: float = 0.3  # per-slot probability of a distractor token
    seed: int = 0

    def __post_init__(self):
        if self.identifier_pool < 10:
            raise CorpusError("identifier_pool must be at least 10")
        if not 0.0 < self.branch_prior < 1.0:
            raise CorpusError("branch_prior must be strictly between 0 and 1")
        if not 0.0 <= self.noise <= 1.0:
            raise CorpusError("noise must lie in [0, 1]")
        for n in (self.n_train, self.n_dev, self.n_test):
            if n < 1:
                raise CorpusError("split sizes must be positive")


def _identifier(i):
    return f"id{i:03d}"


def _gen_example(rng, synth, stop_train, train_split):
    """One (src tokens, tgt s-expr) pair.

    Both branches admit distractors: keyword sources may mention
    identifiers, and identifier sources may carry keyword cues and extra
    identifiers.  Two asymmetries are deliberate.  First, keyword sources
    never carry a *second* cue, so a source with two keyword cues can only
    come from the identifier branch — a rare but perfectly separable
    pattern.  Second, a second identifier forces the name slot to choose
    between two equally plausible copy targets, which is where the wide
    branch pays its entropy cost.  Identifier sources also tend to keep
    the requested identifier right after the verb (word-order regularity),
    giving attention a soft positional signal for which mention is meant.
    """
    hi = stop_train if train_split else synth.identifier_pool
    if rng.random() < synth.branch_prior:
        ident = _identifier(int(rng.integers(0, hi)))
        src = [_VERB, ident]
        use_id = True
        tgt = f'(UseId (tok "{ident}"))'
    else:
        kw = "A" if rng.random() < 0.5 else "B"
        src = [_VERB, _CUES[kw]]
        use_id = False
        tgt = f"(UseKw ({kw}))"
    noise = []
    for _ in range(2):
        if rng.random() >= synth.noise:
            continue
        kind = rng.random()
        if use_id and 0.40 <= kind < 0.62:
            noise.append(_CUES["A"] if rng.random() < 0.5 else _CUES["B"])
        elif kind < (0.62 if use_id else 0.60):
            noise.append(_FILLERS[int(rng.integers(0, len(_FILLERS)))])
        else:
            noise.append(_identifier(int(rng.integers(0, hi))))
    if use_id and rng.random() < 0.6:
        # word-order regularity: the requested identifier tends to follow
        # the verb, so position is a soft signal for which mention is meant
        rng.shuffle(noise)
        src = src + noise
    else:
        src = src + noise
        rng.shuffle(src)
    return src, tgt


def gen_label_bias_dataset(synth, out_dir):
    """Write train/dev/test.jsonl, grammar.txt, and meta.json to ``out_dir``.

    Deterministic in ``synth.seed``.  Training identifiers come from the
    first 80% of the pool; dev and test draw from the full pool, so the
    held-out 20% appears only outside training.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stop_train = synth.identifier_pool - max(1, synth.identifier_pool // 5)
    splits = {"train": synth.n_train, "dev": synth.n_dev, "test": synth.n_test}
    files = {}
    for split_idx, (split, n) in enumerate(splits.items()):
        rng = np.random.default_rng(np.random.SeedSequence([synth.seed, split_idx]))
        rows = []
        for _ in range(n):
            src, tgt = _gen_example(rng, synth, stop_train, train_split=(split == "train"))
            rows.append({"src": src, "tgt": tgt})
        path = out / f"{split}.jsonl"
        write_jsonl(path, rows)
        files[split] = path.name
    (out / "grammar.txt").write_text(SYNTH_GRAMMAR, encoding="utf-8")
    meta = {
        "config": asdict(synth),
        "grammar": SYNTH_GRAMMAR,
        "files": files,
        "held_out_identifiers": [_identifier(i) for i in range(stop_train, synth.identifier_pool)],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_synth_grammar():
    return parse_grammar(SYNTH_GRAMMAR)
