"""Single command-line entry point: data generation, pointerization,
training, evaluation, gradient checking, decoding and curve export.

Exit codes: 0 success, 1 usage, 2 I/O, 3 checkpoint/vocab consistency,
4 numerical failure (NaN loss or failed gradient check). Results go to
stdout, diagnostics to stderr. Every command is deterministic given its
flags and --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets, numcore, pointer_head, training

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CONSISTENCY = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    pass


class ConsistencyError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj, pretty=False):
    if pretty:
        width = max(len(k) for k in obj)
        for key in sorted(obj):
            print(f"{key:<{width}}  {obj[key]}")
    else:
        print(json.dumps(obj, sort_keys=True))


def _log(message):
    print(message, file=sys.stderr)


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="write a synthetic dataset, vocab and stats")
    p.add_argument("--task", choices=["rarest", "copy"], required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=5000, help="number of examples")
    p.add_argument("--vocab", type=int, default=600)
    p.add_argument("--len", type=int, default=7, dest="seq_len")
    p.add_argument("--shortlist", type=int, default=None)
    p.add_argument("--ratio", type=float, default=0.99,
                   help="geometric unigram decay (rarest)")
    p.add_argument("--copy-fraction", type=float, default=0.5)


def _cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "rarest":
        shortlist = args.shortlist if args.shortlist is not None else args.vocab - 60
        try:
            cfg = datasets.SyntheticConfig(
                vocab_size=args.vocab,
                seq_len=args.seq_len,
                rare_cutoff=args.vocab - shortlist,
                shortlist_size=shortlist,
                geometric_ratio=args.ratio,
                seed=args.seed,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        examples = datasets.gen_rarest_word(cfg, count=args.count)
        vocab = datasets.word_vocabulary(args.vocab, shortlist)
        gen_cfg = {
            "task": "rarest",
            "vocab_size": cfg.vocab_size,
            "seq_len": cfg.seq_len,
            "shortlist_size": cfg.shortlist_size,
            "rare_cutoff": cfg.rare_cutoff,
            "geometric_ratio": cfg.geometric_ratio,
            "seed": cfg.seed,
        }
    else:
        shortlist = args.shortlist if args.shortlist is not None else int(args.vocab * 0.75)
        try:
            examples = datasets.gen_copy_task(
                args.vocab, args.seq_len, args.copy_fraction, args.seed,
                shortlist, count=args.count,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        vocab = datasets.word_vocabulary(args.vocab, shortlist)
        gen_cfg = {
            "task": "copy",
            "vocab_size": args.vocab,
            "seq_len": args.seq_len,
            "shortlist_size": shortlist,
            "copy_fraction": args.copy_fraction,
            "seed": args.seed,
        }
    n = datasets.write_jsonl(out / "data.jsonl", examples)
    vocab.save(out / "vocab.txt")
    loaded = datasets.read_jsonl(out / "data.jsonl")
    n_ptr = sum(1 for ex in loaded for st in ex.steps if st.z == 0)
    n_tok = sum(len(ex.target) for ex in loaded)
    stats = {
        "config": gen_cfg,
        "examples": n,
        "target_tokens": n_tok,
        "pointers": n_ptr,
        "pointers_per_100_examples": 100 * n_ptr / n if n else 0.0,
        "pointers_per_100_target_tokens": 100 * n_ptr / n_tok if n_tok else 0.0,
    }
    _write_text(out / "stats.json", json.dumps(stats, sort_keys=True) + "\n")
    _emit(stats)
    return EXIT_OK


# ---------------------------------------------------------------------------
# pointerize
# ---------------------------------------------------------------------------


def _add_pointerize(sub):
    p = sub.add_parser("pointerize", help="annotate a corpus with pointer targets")
    p.add_argument("--mode", choices=["unk", "entity", "mt"], required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--dict", dest="dict_path", default=None,
                   help="target<TAB>source senses (mt mode)")


def read_tsv_pairs(path):
    """One pair per line, source and target separated by a tab; whitespace
    tokenization."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected source<TAB>target")
            src, _, tgt = line.partition("\t")
            pairs.append((src.split(), tgt.split()))
    return pairs


def read_tagged_pairs(path):
    """JSON lines with source/target token and 0/1 entity-tag lists."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(
                (obj["source"], obj["source_tags"], obj["target"], obj["target_tags"])
            )
    return out


def _cmd_pointerize(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "mt" and not args.dict_path:
        raise UsageError("--dict is required with --mode mt")
    if args.mode == "entity":
        examples, vocab, stats = datasets.pointerize_entities(
            read_tagged_pairs(args.input)
        )
    else:
        pairs = read_tsv_pairs(args.input)
        if args.mode == "unk":
            examples, vocab, stats = datasets.pointerize_unk(pairs, args.min_count)
        else:
            dictionary = datasets.load_dictionary(args.dict_path)
            examples, vocab, stats = datasets.pointerize_mt(
                pairs, args.min_count, dictionary
            )
    datasets.write_jsonl(out / "data.jsonl", examples)
    vocab.save(out / "vocab.txt")
    _write_text(out / "stats.json", json.dumps(stats, sort_keys=True) + "\n")
    _emit(stats)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _add_train(sub):
    p = sub.add_parser("train", help="train a model; writes checkpoint and curves")
    p.add_argument("--task", choices=["rarest", "copy", "seq2seq"], required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--dev", required=True, help="development set JSONL")
    p.add_argument("--train", dest="train_data", default=None,
                   help="training JSONL; synthetic tasks stream fresh batches "
                        "when omitted")
    p.add_argument("--config", default=None, help="key=value TrainConfig file")
    p.add_argument("--baseline", action="store_true",
                   help="softmax-only variant: no switch, no location head")
    # model shape
    p.add_argument("--vocab", type=int, default=600)
    p.add_argument("--shortlist", type=int, default=None)
    p.add_argument("--len", type=int, default=7, dest="seq_len")
    p.add_argument("--copy-fraction", type=float, default=0.5)
    p.add_argument("--ratio", type=float, default=0.99)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--emb", type=int, default=32)
    p.add_argument("--att-dim", type=int, default=48)
    p.add_argument("--readout-dim", type=int, default=64)
    p.add_argument("--switch-dim", type=int, default=48)
    p.add_argument("--switch-activation", choices=["tanh", "relu"], default="tanh")
    # TrainConfig overrides
    p.add_argument("--optimizer", choices=["adam", "adadelta"], default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-grad-norm", type=float, default=None)
    p.add_argument("--inverse-temperature", type=float, default=None)
    p.add_argument("--switch-bias-init", type=float, default=None)
    p.add_argument("--early-stop-patience", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-updates", type=int, default=None)


def _train_config(args):
    overrides = {
        "optimizer": args.optimizer,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "max_grad_norm": args.max_grad_norm,
        "inverse_temperature": args.inverse_temperature,
        "switch_bias_init": args.switch_bias_init,
        "early_stop_patience": args.early_stop_patience,
        "eval_every": args.eval_every,
        "seed": args.seed,
        "max_updates": args.max_updates,
    }
    try:
        if args.config:
            return training.TrainConfig.from_file(args.config, **overrides)
        present = {k: v for k, v in overrides.items() if v is not None}
        if args.task == "rarest":
            return training.TrainConfig(**present)
        return training.TrainConfig.seq2seq_defaults(**present)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _check_ids_in_range(examples, vocab_size, what):
    for ex in examples:
        ids = ex.source + ex.target
        if ids and (min(ids) < 0 or max(ids) >= vocab_size):
            raise ConsistencyError(
                f"{what}: token id outside vocabulary of size {vocab_size}"
            )


def _cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(args)
    dev = datasets.read_jsonl(args.dev)
    if not dev:
        raise UsageError(f"empty development set {args.dev}")
    shortlist = args.shortlist
    if shortlist is None:
        shortlist = args.vocab - 60 if args.task == "rarest" else int(args.vocab * 0.75)
    task = "rarest" if args.task == "rarest" else "seq2seq"
    model_cfg = pointer_head.ModelConfig(
        task=task,
        vocab_size=args.vocab,
        shortlist_size=shortlist,
        hidden=args.hidden,
        emb_dim=args.emb,
        att_dim=args.att_dim,
        readout_dim=args.readout_dim,
        switch_dim=args.switch_dim,
        switch_activation=args.switch_activation,
        seq_len=args.seq_len if task == "rarest" else None,
        pointer=not args.baseline,
    )
    _check_ids_in_range(dev, model_cfg.vocab_size, args.dev)

    if args.train_data:
        train_examples = datasets.read_jsonl(args.train_data)
        _check_ids_in_range(train_examples, model_cfg.vocab_size, args.train_data)
        stream = training.file_batch_stream(train_examples, cfg.batch_size, cfg.seed)
    elif args.task == "rarest":
        syn = datasets.SyntheticConfig(
            vocab_size=args.vocab, seq_len=args.seq_len,
            rare_cutoff=args.vocab - shortlist, shortlist_size=shortlist,
            geometric_ratio=args.ratio, seed=cfg.seed + 1,
        )
        stream = _synthetic_stream(
            lambda count, seed: datasets.gen_rarest_word(
                datasets.SyntheticConfig(**{**syn.__dict__, "seed": seed}), count
            ),
            cfg,
        )
    elif args.task == "copy":
        stream = _synthetic_stream(
            lambda count, seed: datasets.gen_copy_task(
                args.vocab, args.seq_len, args.copy_fraction, seed,
                shortlist, count=count,
            ),
            cfg,
        )
    else:
        raise UsageError("--train is required for --task seq2seq")

    result = training.train(model_cfg, stream, dev, cfg, log=_log)
    meta = {
        "model": result.model.cfg.to_meta(),
        "inverse_temperature": cfg.inverse_temperature,
        "task": args.task,
    }
    numcore.save_checkpoint(out / "checkpoint.psx", result.model.store, meta)
    _write_text(out / "curves.jsonl", result.curves.to_jsonl())
    _write_text(out / "curves.csv", result.curves.to_csv())
    _write_text(out / "config.txt", cfg.to_text())
    summary = {
        "updates_run": result.updates_run,
        "best_update": result.best_update,
        "best_dev_nll": result.best_dev_nll,
        "checkpoint": str(out / "checkpoint.psx"),
    }
    _emit(summary)
    return EXIT_OK


def _synthetic_stream(gen_fn, cfg: training.TrainConfig):
    def batches():
        epoch = 0
        while True:
            gen = gen_fn(cfg.batch_size * 1000, cfg.seed + 1 + epoch)
            chunk = []
            for ex in gen:
                chunk.append(ex)
                if len(chunk) == cfg.batch_size:
                    yield training.examples_to_batch(chunk)
                    chunk = []
            epoch += 1

    return batches()


# ---------------------------------------------------------------------------
# eval / decode / gradcheck / curves
# ---------------------------------------------------------------------------


def _add_eval(sub):
    p = sub.add_parser("eval", help="print metrics JSON for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pretty", action="store_true")


def _load_model(path):
    try:
        return pointer_head.model_from_checkpoint(path)
    except numcore.CheckpointError as exc:
        raise ConsistencyError(str(exc)) from exc


def _cmd_eval(args):
    model, meta = _load_model(args.checkpoint)
    examples = datasets.read_jsonl(args.data)
    for ex in examples:
        ids = ex.source + ex.target
        if ids and max(ids) >= model.cfg.vocab_size:
            raise ConsistencyError(
                f"checkpoint {args.checkpoint} (vocab {model.cfg.vocab_size}) "
                f"does not cover dataset {args.data}"
            )
    metrics = training.evaluate(
        model, examples, meta.get("inverse_temperature", 1.0)
    )
    _emit(metrics, pretty=args.pretty)
    return EXIT_OK


def _add_decode(sub):
    p = sub.add_parser("decode", help="greedy-decode source lines to JSONL tokens")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--in", dest="input", default="-",
                   help="source token lines ('-' for stdin)")
    p.add_argument("--max-len", type=int, default=32)


def _cmd_decode(args):
    model, meta = _load_model(args.checkpoint)
    vocab = datasets.Vocabulary.load(args.vocab)
    if len(vocab) != model.cfg.vocab_size:
        raise ConsistencyError(
            f"checkpoint {args.checkpoint} expects vocab of "
            f"{model.cfg.vocab_size}, {args.vocab} has {len(vocab)}"
        )
    vocab = datasets.Vocabulary(vocab.tokens, model.cfg.shortlist_size)
    itemp = meta.get("inverse_temperature", 1.0)
    lines = (
        sys.stdin.read().splitlines()
        if args.input == "-"
        else Path(args.input).read_text(encoding="utf-8").splitlines()
    )
    first = True
    for line in lines:
        tokens = line.split()
        if not tokens:
            continue
        ids = np.asarray([vocab.id_of(t) for t in tokens])
        decoded = model.greedy_decode(ids, args.max_len, itemp)
        if not first:
            print()
        first = False
        for tok in decoded:
            print(
                json.dumps(
                    {
                        "kind": tok.kind,
                        "value": vocab.token_of(tok.token_id),
                        "source_pos": tok.source_pos,
                    },
                    sort_keys=True,
                )
            )
    return EXIT_OK


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="finite-difference check of a small model")
    p.add_argument("--hidden", type=int, default=6)
    p.add_argument("--vocab", type=int, default=8)
    p.add_argument("--shortlist", type=int, default=None)
    p.add_argument("--len", type=int, default=5, dest="seq_len")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


def gradcheck_model(hidden, vocab, shortlist, seq_len, seed, tolerance=1e-4):
    """Full adaptive-output step (encode, attend, decode, switch, fuse,
    NLL) against central finite differences at 64-bit.

    Parameters are drawn at N(0, 0.5): near-zero training init leaves gate
    gradients at the 1e-8 scale where finite differences are all noise,
    so the check runs at a generic point of parameter space."""
    cfg = pointer_head.ModelConfig(
        task="seq2seq", vocab_size=vocab, shortlist_size=shortlist,
        hidden=hidden, emb_dim=4, att_dim=hidden, readout_dim=hidden,
        switch_dim=hidden,
    )
    model = pointer_head.build_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for v in model.store.values.values():
        v[...] = rng.normal(scale=0.5, size=v.shape)
    src = rng.integers(0, vocab, size=(1, seq_len))
    word = int(rng.integers(0, shortlist))
    loc = int(rng.integers(0, seq_len))
    batch = {
        "source": src,
        "target": np.asarray([[word, int(src[0, loc])]]),
        "z": np.asarray([[1, 0]]),
        "ptr": np.asarray([[pointer_head.NO_PTR, loc]]),
    }

    def loss_fn(store):
        probe = pointer_head.Seq2SeqModel(cfg, store)
        loss, _ = probe.batch_nll(batch, itemp=2.0)
        return loss

    return numcore.grad_check(loss_fn, model.store, tolerance=tolerance)


def _cmd_gradcheck(args):
    shortlist = args.shortlist if args.shortlist is not None else args.vocab
    if shortlist > args.vocab:
        raise UsageError("--shortlist cannot exceed --vocab")
    reports = []
    for k in range(args.seeds):
        report = gradcheck_model(
            args.hidden, args.vocab, shortlist, args.seq_len,
            args.seed + k, args.tol,
        )
        _log(f"seed {args.seed + k}: {report.summary()}")
        reports.append(report)
    worst = max(reports, key=lambda r: r.worst_error)
    _emit(
        {
            "passed": all(r.passed for r in reports),
            "tolerance": args.tol,
            "seeds": args.seeds,
            "worst_slot": worst.worst_slot,
            "worst_error": worst.worst_error,
        }
    )
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERICAL


def _add_curves(sub):
    p = sub.add_parser("curves", help="convert a run directory's curves to CSV")
    p.add_argument("--run", required=True)


def _cmd_curves(args):
    run = Path(args.run)
    src = run / "curves.jsonl"
    if not src.exists():
        raise FileNotFoundError(f"{src} not found")
    curves = training.Curves.from_jsonl(src.read_text(encoding="utf-8"))
    _write_text(run / "curves.csv", curves.to_csv())
    _emit({"rows": len(curves.points), "csv": str(run / "curves.csv")})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="psx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(sub)
    _add_pointerize(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_decode(sub)
    _add_gradcheck(sub)
    _add_curves(sub)
    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pointerize": _cmd_pointerize,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "decode": _cmd_decode,
    "gradcheck": _cmd_gradcheck,
    "curves": _cmd_curves,
}


def main(argv=None):
    threads = os.environ.get("PSX_THREADS", "1")
    if not threads.isdigit() or int(threads) < 1:
        print(f"psx: PSX_THREADS must be a positive integer, got {threads!r}",
              file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"psx: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConsistencyError as exc:
        print(f"psx: consistency error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except training.NumericalError as exc:
        print(f"psx: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"psx: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
