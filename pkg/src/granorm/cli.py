"""Command-line interface.

Subcommands: ``gen-synth`` (write the synthetic benchmark),
``train-local`` (MLE), ``train-global`` (max-margin, warm- or
cold-started), ``decode``, ``evaluate``, and ``oracle-check`` (exact
enumeration of all derivations with their scores).

Exit codes: 0 success, 1 usage error, 2 data/grammar/model error.  The
``GRANORM_LOG`` environment variable (error, info, debug) sets stderr
log verbosity.  All randomness flows from ``--seed`` through named
sub-generators, so identical command lines produce bit-identical output
files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import corpus, metrics, search, training, transition
from .grammar import GrammarError, parse_grammar
from .model import (GLOBAL, LOCAL, MODES, ModelError, Scorer, SrcVocab,
                    load_checkpoint, save_checkpoint)
from .transition import TransitionError

log = logging.getLogger("granorm.cli")

_DATA_ERRORS = (GrammarError, TransitionError, ModelError, corpus.CorpusError,
                training.TrainingError, search.SearchError, OSError, ValueError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _build_parser():
    p = _Parser(prog="granorm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write the synthetic label-bias benchmark")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=500)
    g.add_argument("--n-dev", type=int, default=100)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--pool", type=int, default=50, help="identifier pool size")
    g.add_argument("--branch-prior", type=float, default=0.8)
    g.add_argument("--noise", type=float, default=0.3)

    for name in ("train-local", "train-global"):
        t = sub.add_parser(name, help=f"{name.split('-')[1]}ly normalized training")
        t.add_argument("--grammar", required=True)
        t.add_argument("--train", required=True)
        t.add_argument("--dev", required=True)
        t.add_argument("--out", required=True, help="checkpoint path")
        t.add_argument("--stats", help="per-epoch JSONL stats path")
        t.add_argument("--epochs", type=int, default=50)
        t.add_argument("--batch-size", type=int, default=8)
        t.add_argument("--lr", type=float, default=5e-4)
        t.add_argument("--dim", type=int, default=64)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--eval-beam", type=_positive_int, default=5)
        t.add_argument("--patience", type=int)
        t.add_argument("--cutoff", type=int, default=2, help="token vocabulary count cutoff")
        t.add_argument("--src-cutoff", type=int, default=1,
                       help="source vocabulary count cutoff (rarer tokens share the unknown embedding)")
        if name == "train-global":
            t.add_argument("--init-from", help="local checkpoint to warm-start from")
            t.add_argument("--cold-start", action="store_true")
            t.add_argument("--margin", type=float, default=0.1)
            t.add_argument("--neg-beam", type=_positive_int, default=20)

    d = sub.add_parser("decode", help="beam-decode a dataset")
    d.add_argument("--grammar", required=True)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--input", required=True, help="JSONL with 'src' per line")
    d.add_argument("--output", help="output JSONL path (default stdout)")
    d.add_argument("--beam", type=_positive_int, default=5)
    d.add_argument("--mode", choices=MODES)
    d.add_argument("--max-steps", type=int)
    d.add_argument("--jobs", type=_positive_int, default=1)

    e = sub.add_parser("evaluate", help="exact match and BLEU on a dataset")
    e.add_argument("--grammar", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--beam", type=_positive_int, default=5)
    e.add_argument("--mode", choices=MODES)
    e.add_argument("--per-example", action="store_true")
    e.add_argument("--jobs", type=_positive_int, default=1)

    o = sub.add_parser("oracle-check", help="enumerate and score every derivation")
    o.add_argument("--grammar", required=True)
    o.add_argument("--src", required=True, help="space-separated source tokens")
    o.add_argument("--ckpt", help="trained checkpoint (with sidecar vocabulary)")
    o.add_argument("--train-data", help="dataset to build vocabularies from (random init)")
    o.add_argument("--seed", type=int, default=0, help="random-init seed when no --ckpt")
    o.add_argument("--dim", type=int, default=64)
    o.add_argument("--cutoff", type=int, default=2)
    o.add_argument("--src-cutoff", type=int, default=1)
    o.add_argument("--max-steps", type=int)
    o.add_argument("--limit", type=int, default=100_000)
    return p


def _sidecar_path(ckpt):
    return str(ckpt) + ".vocab.json"


def _save_model(store, path, scorer, mode):
    save_checkpoint(store, path)
    meta = {
        "dim": scorer.dim,
        "mode": mode,
        "src_vocab": list(scorer.src_vocab.tokens),
        "token_vocab": list(scorer.grammar.token_vocab),
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def _load_model(ckpt, grammar):
    if not os.path.exists(ckpt):
        raise ModelError(f"missing checkpoint {ckpt}")
    side = _sidecar_path(ckpt)
    if not os.path.exists(side):
        raise ModelError(f"missing vocabulary sidecar {side}")
    with open(side, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = grammar.with_token_vocab(meta["token_vocab"])
    scorer = Scorer(spec, SrcVocab(meta["src_vocab"]), dim=meta["dim"])
    store = scorer.init_params(seed=0)
    store.load_state(load_checkpoint(ckpt))
    return scorer, store, meta


def _build_vocabs(grammar, train_examples, cutoff, src_cutoff=1):
    spec = grammar.with_token_vocab(corpus.build_token_vocab(train_examples, grammar, cutoff))
    src_vocab = SrcVocab(corpus.build_src_tokens(train_examples, src_cutoff))
    return spec, src_vocab


def _write_stats(path, stats):
    with open(path, "w", encoding="utf-8") as fh:
        for ep in stats.epochs:
            fh.write(json.dumps(ep.record(), sort_keys=True) + "\n")


def _cmd_gen_synth(args):
    synth = corpus.SynthSpec(
        n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test,
        identifier_pool=args.pool, branch_prior=args.branch_prior,
        noise=args.noise, seed=args.seed,
    )
    out = corpus.gen_label_bias_dataset(synth, args.out)
    print(f"wrote {out}/train.jsonl dev.jsonl test.jsonl grammar.txt meta.json")
    return 0


def _cmd_train(args, mode):
    grammar = parse_grammar(Path(args.grammar).read_text(encoding="utf-8"))
    train_ex = corpus.load_jsonl(args.train, grammar)
    dev_ex = corpus.load_jsonl(args.dev, grammar)
    init_state = None
    if mode == GLOBAL:
        if bool(args.init_from) == bool(args.cold_start):
            raise _UsageError("train-global needs exactly one of --init-from or --cold-start")
        if args.init_from:
            scorer, _, meta = _load_model(args.init_from, grammar)
            if meta["dim"] != args.dim:
                raise ModelError(f"--dim {args.dim} does not match checkpoint dim {meta['dim']}")
            init_state = load_checkpoint(args.init_from)
            spec, src_vocab = scorer.grammar, scorer.src_vocab
        else:
            spec, src_vocab = _build_vocabs(grammar, train_ex, args.cutoff, args.src_cutoff)
            scorer = Scorer(spec, src_vocab, dim=args.dim)
    else:
        spec, src_vocab = _build_vocabs(grammar, train_ex, args.cutoff, args.src_cutoff)
        scorer = Scorer(spec, src_vocab, dim=args.dim)
    cfg = training.TrainingConfig(
        mode=mode, lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        seed=args.seed, dim=args.dim, eval_beam_width=args.eval_beam,
        patience=args.patience,
        **({"margin": args.margin, "neg_beam_width": args.neg_beam} if mode == GLOBAL else {}),
    )
    store, stats = training.train(scorer, train_ex, dev_ex, cfg, init_state=init_state)
    _save_model(store, args.out, scorer, mode)
    if args.stats:
        _write_stats(args.stats, stats)
    print(f"best_epoch={stats.best_epoch} best_dev_em={stats.best_dev_em!r}")
    return 0


def _read_src_jsonl(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            src = obj.get("src")
            if not isinstance(src, list) or not src:
                raise corpus.CorpusError(f"{path}:{line_no}: 'src' must be a non-empty token list")
            rows.append([str(t) for t in src])
    if not rows:
        raise corpus.CorpusError(f"{path}: empty input")
    return rows


def _cmd_decode(args):
    grammar = parse_grammar(Path(args.grammar).read_text(encoding="utf-8"))
    scorer, store, meta = _load_model(args.ckpt, grammar)
    mode = args.mode or meta.get("mode", LOCAL)
    rows = _read_src_jsonl(args.input)

    def one(src):
        utt = scorer.utterance(src)
        try:
            hyps = search.beam_search(scorer, store, utt, args.beam, mode, max_steps=args.max_steps)
        except search.SearchError:
            return {"src": src, "pred": None, "score": None}
        best = hyps[0]
        return {
            "src": src,
            "pred": transition.render_sexpr(best.state.result, scorer.grammar),
            "score": best.mean_score(mode),
        }

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(one, rows))
    else:
        results = [one(r) for r in rows]
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for res in results:
            out.write(json.dumps(res, sort_keys=True) + "\n")
    finally:
        if args.output:
            out.close()
    return 0


def _cmd_evaluate(args):
    grammar = parse_grammar(Path(args.grammar).read_text(encoding="utf-8"))
    scorer, store, meta = _load_model(args.ckpt, grammar)
    mode = args.mode or meta.get("mode", LOCAL)
    examples = corpus.load_jsonl(args.data, scorer.grammar)
    report = training.evaluate_model(scorer, store, examples, args.beam, mode, jobs=args.jobs)
    print(json.dumps(report.as_dict(include_examples=args.per_example), sort_keys=True))
    return 0


def _cmd_oracle_check(args):
    grammar = parse_grammar(Path(args.grammar).read_text(encoding="utf-8"))
    if bool(args.ckpt) == bool(args.train_data):
        raise _UsageError("oracle-check needs exactly one of --ckpt or --train-data")
    if args.ckpt:
        scorer, store, _ = _load_model(args.ckpt, grammar)
    else:
        train_ex = corpus.load_jsonl(args.train_data, grammar)
        spec, src_vocab = _build_vocabs(grammar, train_ex, args.cutoff, args.src_cutoff)
        scorer = Scorer(spec, src_vocab, dim=args.dim)
        store = scorer.init_params(args.seed)
    tokens = args.src.split()
    if not tokens:
        raise _UsageError("--src must contain at least one token")
    utt = scorer.utterance(tokens)
    report = search.exhaustive_derivations(scorer, store, utt,
                                           max_steps=args.max_steps, limit=args.limit)
    for rank, i in enumerate(report.by_prob(), start=1):
        ast = transition.actions_to_ast(report.sequences[i], scorer.grammar)
        sexpr = transition.render_sexpr(ast, scorer.grammar)
        print(f"{rank}\t{float(report.raw_scores[i])!r}\t{float(report.local_logprobs[i])!r}"
              f"\t{float(report.probs[i])!r}\t{sexpr}")
    print(f"Z_G={float(report.z)!r}")
    return 0


def main(argv=None):
    level = os.environ.get("GRANORM_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(stream=sys.stderr, level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    if level not in levels:
        log.error("unknown GRANORM_LOG level %r, using error", level)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-synth":
            return _cmd_gen_synth(args)
        if args.command == "train-local":
            return _cmd_train(args, LOCAL)
        if args.command == "train-global":
            return _cmd_train(args, GLOBAL)
        if args.command == "decode":
            return _cmd_decode(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "oracle-check":
            return _cmd_oracle_check(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
