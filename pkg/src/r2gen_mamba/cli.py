"""Command-line entry point: ``r2gen-mamba <command> ...``.

On failure the tool prints exactly one line, ``error: <category>: <message>``,
to stderr and exits non-zero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import profiler
from .checkpoint import load_checkpoint
from .config import ModelConfig, TrainConfig, from_mapping, parse_lines
from .data import load_dataset, split
from .errors import ConfigNotFoundError, R2GenError, SchemaError
from .features import load_features
from .io import atomic_write_text, read_jsonl
from .metrics import evaluate_corpus, read_label_file
from .model import R2GenMamba
from .ssm import EncoderConfig
from .text import Vocabulary, build_vocab, encode_report, tokenize
from .training import Sample, train


class UsageError(R2GenError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_config(path: str | None) -> tuple[ModelConfig, TrainConfig, dict[str, str]]:
    if path is None:
        return ModelConfig(), TrainConfig(), {}
    p = Path(path)
    if not p.is_file():
        raise ConfigNotFoundError(f"config file not found: {p}")
    values = parse_lines(p.read_text(encoding="utf-8").splitlines())
    model_cfg, train_cfg = from_mapping(values)
    return model_cfg, train_cfg, values


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# -- commands --------------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    records = load_dataset(_require_file(args.data, "dataset"))
    vocab = build_vocab([r.report for r in split(records, "train")], args.min_freq)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} tokens to {args.out}")
    return 0


def _samples(records, vocab: Vocabulary, model_cfg: ModelConfig, patch: int) -> list[Sample]:
    return [
        Sample(r.load_raw(patch), encode_report(r.report, vocab, model_cfg.max_len),
               tokenize(r.report), r.id)
        for r in records
    ]


def cmd_train(args) -> int:
    model_cfg, train_cfg, explicit = _read_config(args.config)
    records = load_dataset(_require_file(args.data, "dataset"))
    train_records = split(records, "train")
    if not train_records:
        raise SchemaError("dataset has no train split")
    vocab = build_vocab([r.report for r in train_records], train_cfg.min_freq)
    first = train_records[0].load_raw(train_cfg.patch)[0]
    changes = {"vocab_size": len(vocab)}
    if "feat_dim" not in explicit:
        changes["feat_dim"] = int(first.shape[1])
    model_cfg = model_cfg.replace(**changes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    train_set = _samples(train_records, vocab, model_cfg, train_cfg.patch)
    val_set = _samples(split(records, "val"), vocab, model_cfg, train_cfg.patch)
    model = R2GenMamba(model_cfg, seed=train_cfg.seed)
    result = train(train_set, model, train_cfg, val_set, vocab.tokens, out_dir=out,
                   on_epoch=lambda e: print(
                       f"epoch {e.epoch} loss {e.train_loss:.4f} val_bleu4 {e.val_bleu4}",
                       flush=True))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_bleu4", "lr_visual", "lr_other"])
    for e in result.log:
        writer.writerow([e.epoch, repr(e.train_loss), "" if e.val_bleu4 is None else
                         repr(e.val_bleu4), repr(e.lr_visual), repr(e.lr_other)])
    atomic_write_text(out / "log.csv", buf.getvalue())
    print(f"best epoch {result.best.best_epoch}; checkpoints in {out}")
    return 0


def cmd_generate(args) -> int:
    ckpt_path = _require_file(args.ckpt, "checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    vocab_path = Path(args.vocab) if args.vocab else ckpt_path.parent / "vocab.txt"
    vocab = Vocabulary.load(_require_file(str(vocab_path), "vocabulary"))
    model = R2GenMamba(ckpt.model_config)
    ckpt.restore_params(model)
    raws = [load_features(_require_file(f, "feature file")).values.data for f in args.features]
    text = model.generate(raws, vocab, beam_size=args.beam, max_len=args.max_len,
                          length_norm=args.length_norm)
    print(text)
    return 0


def _reports_by_id(path: str) -> dict[str, str]:
    out = {}
    for lineno, row in read_jsonl(_require_file(path, "reports file"), with_lineno=True):
        if "id" not in row or not isinstance(row.get("report"), str):
            raise SchemaError(f"{path}:{lineno}: need 'id' and string 'report'")
        out[str(row["id"])] = row["report"]
    return out


def cmd_evaluate(args) -> int:
    pred, ref = _reports_by_id(args.pred), _reports_by_id(args.ref)
    missing = sorted(set(ref) - set(pred))
    if missing:
        raise SchemaError(f"{len(missing)} reference ids lack predictions, e.g. {missing[0]}")
    ids = list(ref)
    corpus = [(tokenize(pred[i]), tokenize(ref[i])) for i in ids]
    labels_pred = labels_ref = None
    if args.labels_pred or args.labels_ref:
        if not (args.labels_pred and args.labels_ref):
            raise UsageError("--labels-pred and --labels-ref go together")
        lp = read_label_file(_require_file(args.labels_pred, "label file"))
        lr = read_label_file(_require_file(args.labels_ref, "label file"))
        keys = ids if all(i in lp and i in lr for i in ids) else sorted(lr)
        if any(k not in lp for k in keys):
            raise SchemaError("predicted label file does not cover the reference ids")
        labels_pred = [lp[k] for k in keys]
        labels_ref = [lr[k] for k in keys]
    report = evaluate_corpus(corpus, labels_pred, labels_ref).as_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


def cmd_profile(args) -> int:
    model_cfg, _, _ = _read_config(args.config)
    enc = EncoderConfig(model_cfg.d, model_cfg.d_state, model_cfg.d_conv, model_cfg.expand,
                        model_cfg.enc_layers)
    baseline = profiler.TransformerEncoderConfig(model_cfg.d, model_cfg.dec_layers,
                                                 model_cfg.heads, model_cfg.d_ff)
    cmp = profiler.compare_encoders(enc, args.seq_len, baseline)
    print(profiler.render_table(cmp), end="")
    if enc.n_layers:
        print(f"note: each Mamba layer includes a pre-block layer norm ({2 * enc.d} params)")
    if args.csv:
        atomic_write_text(args.csv, profiler.render_csv(cmp))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="r2gen-mamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-vocab", help="build a vocabulary from the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-freq", type=int, default=3)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate a report from feature files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True, nargs="+")
    p.add_argument("--vocab")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--length-norm", type=float, default=0.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--labels-pred")
    p.add_argument("--labels-ref")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", help="compare encoder parameter and FLOP counts")
    p.add_argument("--config")
    p.add_argument("--seq-len", type=int, default=98)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_profile)
    return parser


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except R2GenError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except FileNotFoundError as exc:
        print(f"error: file-not-found: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
