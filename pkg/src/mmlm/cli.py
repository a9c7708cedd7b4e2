"""Command-line entry points: prepare, train, eval, neighbors, sample, inspect.

Every command is one process with no shared state; exit codes are 0 for
success, 2 for usage/config problems, 3 for a training abort. The train
command reads an optional `key = value` config file; explicit flags win
over file values, which win over MMLM_SEED and built-in defaults.
"""

import argparse
import os
import sys

from . import data as D
from . import evaluate as E
from .cells import primary_input_matrix
from .checkpoint import (compute_config_hash, load_checkpoint,
                         model_from_checkpoint, render_manifest,
                         save_checkpoint)
from .errors import (ConfigError, FormatError, MmlmError, TrainingAbort,
                     UsageError)
from .model import ModelConfig, build_model
from .train import TrainConfig, fit, format_curve

ENV_SEED = "MMLM_SEED"


def _parse_bool(val: str) -> bool:
    if val == "true":
        return True
    if val == "false":
        return False
    raise ConfigError(f"expected true or false, got {val!r}")


# config-file schema for `train`: key -> parser. Flags use the same names
# with dashes; booleans take true/false in the file.
_TRAIN_KEYS = {
    "captions": str, "vocab": str, "contexts": str, "out": str,
    "pretrained": str, "pretrained_projection": _parse_bool, "resume": str,
    "arch": str, "hidden": int, "fusion": str, "fusion_bias": _parse_bool,
    "context_dim": int, "unroll": int, "decoder_bias": _parse_bool,
    "lstm_activation": str, "min_count": int,
    "lr": float, "clip": float, "batch_size": int, "max_epochs": int,
    "patience": int, "seed": int, "schedule": str,
}

_TRAIN_DEFAULTS = {
    "captions": None, "vocab": None, "contexts": None, "out": ".",
    "pretrained": None, "pretrained_projection": False, "resume": None,
    "arch": "delta-rnn", "hidden": 64, "fusion": "none", "fusion_bias": True,
    "context_dim": 2048, "unroll": 49, "decoder_bias": True,
    "lstm_activation": "tanh", "min_count": 5,
    "lr": 1.0, "clip": 2.0, "batch_size": 32, "max_epochs": 1,
    "patience": 3, "seed": None, "schedule": "cumulative",
}


def read_config_file(path) -> dict:
    """Parse `key = value` lines; full-line # comments; keys per schema."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = _TRAIN_KEYS[key](val)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {val!r}") from None
    return values


def _resolve_train_options(args) -> dict:
    file_values = read_config_file(args.config) if args.config else {}
    opts = {}
    for key, default in _TRAIN_DEFAULTS.items():
        flag = getattr(args, key)
        opts[key] = flag if flag is not None else file_values.get(key, default)
    if opts["seed"] is None:
        raw = os.environ.get(ENV_SEED)
        if raw is not None:
            try:
                opts["seed"] = int(raw)
            except ValueError:
                raise ConfigError(f"{ENV_SEED} must be an integer, got {raw!r}") from None
        else:
            opts["seed"] = 0
    if opts["captions"] is None:
        raise UsageError("train needs --captions (flag or config file)")
    return opts


def _read_raw_captions(path) -> list:
    """Parse the raw 4-field TSV, lowercasing and whitespace-splitting text."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise FormatError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
            image_id, language, split, text = fields
            if not image_id:
                raise FormatError(f"{path}:{lineno}: empty image id")
            if split not in D.SPLITS:
                raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
            tokens = text.lower().split()
            if not tokens:
                raise FormatError(f"{path}:{lineno}: caption has no tokens")
            records.append(D.CaptionRecord(image_id, language, split, tokens))
    return records


def _summarize(kept, excluded, vocab) -> str:
    lines = [f"records kept: {len(kept)}",
             f"records excluded (missing context vectors): {len(excluded)}"]
    for rec in excluded:
        lines.append(f"  {rec.image_id} ({rec.language}, {rec.split})")
    lines.append("split,language,records,tokens")
    counts = {}
    for rec in kept:
        key = (rec.split, rec.language)
        n_rec, n_tok = counts.get(key, (0, 0))
        counts[key] = (n_rec + 1, n_tok + len(rec.tokens))
    for split in D.SPLITS:
        for language in sorted({lang for sp, lang in counts if sp == split}):
            n_rec, n_tok = counts[(split, language)]
            lines.append(f"{split},{language},{n_rec},{n_tok}")
    lines.append(f"vocabulary: {len(vocab.words)} words (min_count {vocab.min_count})")
    return "\n".join(lines) + "\n"


def cmd_prepare(args) -> int:
    records = _read_raw_captions(args.captions)
    store = D.load_contexts(args.features) if args.features else None
    if store is not None:
        known = set(store.ids())
        kept = [r for r in records if r.image_id in known]
        excluded = [r for r in records if r.image_id not in known]
    else:
        kept, excluded = records, []
    vocab = D.build_vocab([r for r in kept if r.split == "train"],
                          min_count=args.min_count)
    os.makedirs(args.out, exist_ok=True)
    D.write_captions(os.path.join(args.out, "captions.tsv"), kept)
    D.save_vocab(os.path.join(args.out, "vocab.txt"), vocab)
    if store is not None:
        referenced = D.ContextStore(store.dim)
        for image_id in sorted({r.image_id for r in kept}):
            referenced.add(image_id, store.get(image_id))
        D.save_contexts_binary(os.path.join(args.out, "contexts.mmcv"), referenced)
    summary = _summarize(kept, excluded, vocab)
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary)
    sys.stdout.write(summary)
    if excluded:
        print(f"warning: excluded {len(excluded)} caption(s); "
              "their images have no context vector", file=sys.stderr)
    return 0


def _write_curve(path, state) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_curve(state.curve))  # header line included


def cmd_train(args) -> int:
    opts = _resolve_train_options(args)
    records = D.read_captions(opts["captions"])
    train_records = [r for r in records if r.split == "train"]
    valid_records = [r for r in records if r.split == "valid"]
    if not train_records:
        raise UsageError(f"{opts['captions']}: no train-split records")
    if not valid_records:
        raise UsageError(f"{opts['captions']}: no valid-split records; "
                         "the schedule needs a validation set")
    store = D.load_contexts(opts["contexts"]) if opts["contexts"] else None
    if opts["fusion"] != "none" and store is None:
        raise UsageError("fused training needs --contexts")
    context_dim = store.dim if store is not None else opts["context_dim"]
    vocab = (D.load_vocab(opts["vocab"]) if opts["vocab"]
             else D.build_vocab(train_records, min_count=opts["min_count"]))
    model_config = ModelConfig(
        arch=opts["arch"], hidden=opts["hidden"], vocab=len(vocab),
        context_dim=context_dim, fusion=opts["fusion"],
        fusion_bias=opts["fusion_bias"], unroll=opts["unroll"],
        decoder_bias=opts["decoder_bias"], lstm_activation=opts["lstm_activation"])
    model_config.validate()
    train_config = TrainConfig(
        lr=opts["lr"], clip=opts["clip"], batch_size=opts["batch_size"],
        unroll=opts["unroll"], max_epochs=opts["max_epochs"],
        patience=opts["patience"], seed=opts["seed"], schedule=opts["schedule"])
    train_config.validate()

    if opts["resume"]:
        ckpt = load_checkpoint(opts["resume"])
        want = compute_config_hash(model_config, train_config)
        if want != ckpt.config_hash:
            raise UsageError(
                f"refusing to resume: config hash {want[:12]} does not match "
                f"checkpoint {ckpt.config_hash[:12]} in {opts['resume']}")
        if ckpt.vocab.id_to_token != vocab.id_to_token:
            raise UsageError("refusing to resume: vocabulary differs from checkpoint")
        model = model_from_checkpoint(ckpt)
        state = ckpt.state
    else:
        model = build_model(model_config, seed=train_config.seed)
        state = None
        if opts["pretrained"]:
            pre = D.PretrainedEmbeddings.load(opts["pretrained"])
            name = f"cell.{primary_input_matrix(model_config.arch)}"
            coverage = D.init_embeddings_from_pretrained(
                model.named_parameters()[name], vocab, pre,
                project=opts["pretrained_projection"], seed=train_config.seed)
            print(f"pretrained coverage: {coverage:.1%} of vocabulary words")

    out = opts["out"]
    os.makedirs(out, exist_ok=True)

    def on_epoch(st) -> None:
        save_checkpoint(os.path.join(out, "model_last.mmlm"),
                        model, vocab, train_config, st)
        if st.best_epoch == st.epoch:
            save_checkpoint(os.path.join(out, "model_best.mmlm"),
                            model, vocab, train_config, st)
        _write_curve(os.path.join(out, "curve.csv"), st)

    state = fit(model, train_records, valid_records, vocab, train_config,
                contexts=store, state=state, on_epoch=on_epoch)
    # a resume that adds no epochs still leaves complete artifacts behind
    save_checkpoint(os.path.join(out, "model_last.mmlm"),
                    model, vocab, train_config, state)
    _write_curve(os.path.join(out, "curve.csv"), state)
    best = ("none" if state.best_epoch == 0
            else f"{state.best_valid_ppl:.3f} (epoch {state.best_epoch})")
    print(f"trained to epoch {state.epoch}; best valid ppl {best}")
    return 0


def _eval_language(records, flag) -> str:
    languages = sorted({r.language for r in records})
    if flag:
        if flag not in languages:
            raise UsageError(f"no records with language {flag!r}; present: {languages}")
        return flag
    if len(languages) != 1:
        raise UsageError(f"multiple languages present {languages}; pass --language")
    return languages[0]


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    fused = model.config.fusion != "none"
    conditions = (args.conditions.split(",") if args.conditions
                  else (["LV-LV", "LV-L"] if fused else ["L-L"]))
    for cond in conditions:
        if cond not in E.CONDITIONS:
            raise UsageError(f"condition must be one of {E.CONDITIONS}, got {cond!r}")
    records = [r for r in D.read_captions(args.captions) if r.split == args.split]
    if not records:
        raise UsageError(f"{args.captions}: no {args.split}-split records")
    language = _eval_language(records, args.language)
    records = [r for r in records if r.language == language]
    store = D.load_contexts(args.contexts) if args.contexts else None
    if "LV-LV" in conditions and store is None:
        raise UsageError("condition LV-LV needs --contexts")
    batches = D.encode_batches(records, ckpt.vocab, model.config.unroll,
                               ckpt.train_config.batch_size, contexts=store)
    model_id = args.model_id or (f"mm-{model.config.arch}" if fused
                                 else model.config.arch)
    rows = []
    for cond in conditions:
        nll, ppl = E.evaluate(model, batches, cond)
        rows.append(E.EvalRow(model_id, cond, language, nll, ppl))
    text = E.render_eval_text(rows)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(args.out, "eval.csv"), "w", encoding="utf-8") as fh:
        fh.write(E.render_eval_csv(rows))
    sys.stdout.write(text)
    return 0


def cmd_neighbors(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    reports = [E.nearest_neighbors(model.decoder, q, ckpt.vocab, k=args.k)
               for q in args.queries]
    text = E.render_neighbors_text(reports)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "neighbors.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(args.out, "neighbors.csv"), "w", encoding="utf-8") as fh:
        fh.write(E.render_neighbors_csv(reports))
    sys.stdout.write(text)
    return 0


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    if args.image_id:
        if not args.contexts:
            raise UsageError("--image-id needs --contexts")
        store = D.load_contexts(args.contexts)
        context = store.get(args.image_id)
        label = f"image {args.image_id}"
    else:
        context = None
        label = "null-context"
    if context is not None and model.config.fusion == "none":
        raise UsageError("a text-only model cannot condition on an image")
    hyps = E.beam_search(model, context=context, width=args.width,
                         max_len=args.max_len,
                         length_normalize=args.length_normalize)
    text = E.render_samples_text(hyps[:args.width], ckpt.vocab, label)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "samples.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_inspect(args) -> int:
    sys.stdout.write(render_manifest(load_checkpoint(args.checkpoint)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmlm",
        description="Recurrent language models with optional visual context fusion.")
    sub = parser.add_subparsers(dest="command", required=True)
    boolopt = argparse.BooleanOptionalAction

    p = sub.add_parser("prepare", help="canonicalize a raw caption corpus")
    p.add_argument("--captions", required=True,
                   help="raw TSV: image_id, language, split, caption text")
    p.add_argument("--features", help="context vectors, text or binary")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit a model and write checkpoints")
    p.add_argument("--config", help="key = value file; flags override")
    for key in ("captions", "vocab", "contexts", "out", "pretrained", "resume",
                "arch", "fusion", "lstm_activation", "schedule"):
        p.add_argument(f"--{key.replace('_', '-')}", default=None)
    for key in ("hidden", "context_dim", "unroll", "min_count", "batch_size",
                "max_epochs", "patience", "seed"):
        p.add_argument(f"--{key.replace('_', '-')}", type=int, default=None)
    for key in ("lr", "clip"):
        p.add_argument(f"--{key}", type=float, default=None)
    for key in ("fusion_bias", "decoder_bias", "pretrained_projection"):
        p.add_argument(f"--{key.replace('_', '-')}", action=boolopt, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--captions", required=True)
    p.add_argument("--split", default="test", choices=D.SPLITS)
    p.add_argument("--contexts")
    p.add_argument("--conditions", help="comma-separated subset of L-L,LV-LV,LV-L")
    p.add_argument("--language")
    p.add_argument("--model-id")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("neighbors", help="decoder-embedding cosine neighbors")
    p.add_argument("checkpoint")
    p.add_argument("queries", nargs="+")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_neighbors)

    p = sub.add_parser("sample", help="beam-search sentences from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--image-id")
    p.add_argument("--contexts")
    p.add_argument("--width", type=int, default=13)
    p.add_argument("--max-len", type=int)
    p.add_argument("--length-normalize", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("inspect", help="dump a checkpoint manifest")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MmlmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
