"""Command-line interface.

Subcommands: gen-data, pretrain, train, eval, infer. Options can come from
flags or a JSON config file (--config); explicit flags win over the file,
which wins over defaults. Exit codes: 0 ok, 2 configuration error, 3 data
error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .datakit import DataError, ToyWorldConfig
from .runs import ConfigError, RunConfig, cmd_eval, cmd_gen_data, cmd_infer, cmd_pretrain, cmd_train


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--objective", help="gold_q | pseudo_q | mml_mml | mml_g | offmml_offmml | offmml_g")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--epochs", type=int)
    p.add_argument("--p", type=float, help="nucleus mass for latent-question sampling")
    p.add_argument("--samples", type=int, dest="n_samples")
    p.add_argument("--beam", type=int, dest="beam_size")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--init-scale", type=float, dest="init_scale")
    p.add_argument("--pretrain-lr", type=float, dest="pretrain_lr")
    p.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    p.add_argument("--skip-neg-q", action="store_const", const=True, dest="skip_neg_q")
    p.add_argument("--question-mode", dest="question_mode",
                   help="auto | generated | pseudo | gold")
    p.add_argument("--marginal-k", type=int, dest="marginal_k")
    p.add_argument("--world", dest="world_dir")
    p.add_argument("--ckpt", dest="ckpt_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--corpus", dest="corpus_path")
    p.add_argument("--corpus-q", dest="corpus_q_path",
                   help="separate corpus for the question generator")


RUN_FIELDS = (
    "objective", "lr", "batch_size", "eval_every", "epochs", "p", "n_samples",
    "beam_size", "max_len", "seed", "dim", "init_scale", "pretrain_lr",
    "pretrain_epochs", "skip_neg_q", "question_mode", "marginal_k",
    "world_dir", "ckpt_dir", "out_dir", "corpus_path", "corpus_q_path",
)


def _run_config(args: argparse.Namespace) -> RunConfig:
    flags = {k: getattr(args, k, None) for k in RUN_FIELDS}
    return RunConfig.from_sources(getattr(args, "config", None), flags)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentq",
        description="Zero-shot relation extraction via latent-question training.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded toy world directory")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--entities", type=int, default=16)
    g.add_argument("--relations", default="6,1,3",
                   help="train,dev,test relation counts (e.g. 6,1,3)")
    g.add_argument("--contexts", type=int, default=200)
    g.add_argument("--neg-fraction", type=float, default=0.5)
    g.add_argument("--extra-relations", type=int, default=2)
    g.add_argument("--negs", action="store_true",
                   help="additionally double the train split with synthetic negatives")
    g.add_argument("--pretrain-examples", type=int, default=0)
    g.add_argument("--pretrain-no-answer", type=float, default=0.10,
                   help="fraction of unanswerable pretraining examples")
    g.add_argument("--pretrain-noise", type=float, default=0.0,
                   help="fraction of pretraining questions garbled by one edit")
    g.add_argument("--pretrain-paraphrase", type=float, default=0.3,
                   help="fraction of pretraining questions using the alternate word order")

    pre = sub.add_parser("pretrain", help="pretrain question/answer generators on a QA corpus")
    _add_run_flags(pre)

    tr = sub.add_parser("train", help="fine-tune with a chosen objective")
    _add_run_flags(tr)

    ev = sub.add_parser("eval", help="score the test split")
    _add_run_flags(ev)
    ev.add_argument("--task", default="both", help="te | zre | both")
    ev.add_argument("--csv", action="store_true", help="also write report.csv")

    inf = sub.add_parser("infer", help="one-off question + tail prediction")
    inf.add_argument("--ckpt", required=True, dest="ckpt_dir")
    inf.add_argument("--context", required=True)
    inf.add_argument("--head", required=True)
    inf.add_argument("--relation", required=True)
    inf.add_argument("--description", default="")
    inf.add_argument("--question-mode", default="generated", dest="question_mode")
    inf.add_argument("--beam", type=int, default=8, dest="beam_size")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "gen-data":
            parts = args.relations.split(",")
            if len(parts) != 3:
                raise ConfigError("--relations must be three comma-separated counts")
            try:
                n_train, n_dev, n_test = (int(x) for x in parts)
            except ValueError:
                raise ConfigError("--relations counts must be integers")
            try:
                cfg = ToyWorldConfig(
                    n_entities=args.entities,
                    n_train_relations=n_train,
                    n_dev_relations=n_dev,
                    n_test_relations=n_test,
                    contexts_per_relation=args.contexts,
                    negative_fraction=args.neg_fraction,
                    seed=args.seed,
                    n_extra_relations=args.extra_relations,
                )
            except DataError as e:
                raise ConfigError(str(e))
            out = cmd_gen_data(
                cfg, args.out, with_negs=args.negs,
                pretrain_examples=args.pretrain_examples,
                pretrain_no_answer_fraction=args.pretrain_no_answer,
                pretrain_question_noise=args.pretrain_noise,
                pretrain_question_paraphrase=args.pretrain_paraphrase,
            )
            print(f"wrote toy world to {out}")
        elif args.command == "pretrain":
            out = cmd_pretrain(_run_config(args))
            print(f"wrote pretrained checkpoints to {out}")
        elif args.command == "train":
            out = cmd_train(_run_config(args))
            print(f"wrote fine-tuned checkpoints to {out}")
        elif args.command == "eval":
            report = cmd_eval(_run_config(args), task=args.task, csv_out=args.csv)
            print(json.dumps(report.to_json(), sort_keys=True, indent=2))
        elif args.command == "infer":
            q, tail = cmd_infer(
                args.ckpt_dir, args.context, args.head, args.relation,
                args.description, args.question_mode, args.beam_size,
            )
            if q:
                print(f"question: {q}")
            print(f"tail: {tail}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
