"""Run assembly: configuration, pretraining, fine-tuning, and evaluation.

The CLI subcommands are thin wrappers over the cmd_* functions here, which
are importable for tests. A run directory produced by pretraining holds
vocab.txt plus q.json / a.json / s.json checkpoints; fine-tuning reads one
of those directories and writes a new one (never mutating s.json).
"""
from __future__ import annotations

import dataclasses
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datakit import (
    DataError,
    FoldSpec,
    ToyWorldConfig,
    augment_negatives,
    build_vocab,
    gen_pretrain_corpus,
    gen_toy_world,
    load_pretrain_corpus,
    load_world,
    save_pretrain_corpus,
    save_world,
    synthesize_q_pretrain,
)
from .decoding import SamplerConfig
from .metrics import EvalReport, TEMetrics, te_score, zre_score
from .objectives import ObjectiveKind, ObjectiveSpec, train_step
from .pipeline import (
    ModelBundle,
    REInstance,
    classify_relation,
    generate_question,
    generate_tail,
    search_input,
    tail_target,
)
from .seqmodel import TinySeq2Seq, load_checkpoint, save_checkpoint, sgd_step
from .vocab import NO_ANSWER_TOKEN, Vocab, tokenize

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


OBJECTIVE_NAMES = {k.value: k for k in ObjectiveKind}


@dataclass(frozen=True)
class RunConfig:
    """Everything a training/eval run needs; flags > config file > defaults."""

    objective: str = "offmml_g"
    lr: float = 0.0005
    batch_size: int = 16
    eval_every: int = 100
    epochs: int = 1
    # sampler
    p: float = 0.95
    n_samples: int = 8
    beam_size: int = 8
    max_len: int | None = None
    seed: int = 0
    # model / pretraining
    dim: int = 64
    init_scale: float = 0.5
    pretrain_lr: float = 0.1
    pretrain_epochs: int = 30
    # behavior knobs
    skip_neg_q: bool = False
    question_mode: str = "auto"
    marginal_k: int = 1
    # paths
    world_dir: str = ""
    ckpt_dir: str = ""
    out_dir: str = ""
    corpus_path: str = ""
    corpus_q_path: str = ""

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVE_NAMES:
            raise ConfigError(
                f"unknown objective {self.objective!r}; choose from {sorted(OBJECTIVE_NAMES)}"
            )
        for name in ("lr", "pretrain_lr", "p", "init_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("batch_size", "eval_every", "epochs", "n_samples",
                     "beam_size", "dim", "pretrain_epochs", "marginal_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.question_mode not in ("auto", "generated", "pseudo", "gold"):
            raise ConfigError(f"unknown question_mode {self.question_mode!r}")

    @property
    def kind(self) -> ObjectiveKind:
        return OBJECTIVE_NAMES[self.objective]

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            p=self.p, n_samples=self.n_samples, beam_size=self.beam_size,
            max_len=self.max_len, seed=self.seed,
        )

    @classmethod
    def from_sources(cls, file_path: str | None, flag_values: dict) -> "RunConfig":
        merged: dict = {}
        if file_path:
            try:
                loaded = json.loads(Path(file_path).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {file_path}")
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {file_path} is not valid JSON: {e}")
            if not isinstance(loaded, dict):
                raise ConfigError("config file must hold a JSON object")
            merged.update(loaded)
        merged.update({k: v for k, v in flag_values.items() if v is not None})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(merged) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**merged)
        except TypeError as e:
            raise ConfigError(str(e))


def resolved_question_mode(cfg: RunConfig) -> str:
    if cfg.question_mode != "auto":
        return cfg.question_mode
    if cfg.kind is ObjectiveKind.GOLD_Q:
        return "gold"
    if cfg.kind is ObjectiveKind.PSEUDO_Q:
        return "pseudo"
    return "generated"


# -- supervised pretraining -----------------------------------------------------

def supervised_epochs(
    model: TinySeq2Seq,
    inputs: Sequence[Sequence[int]],
    targets: Sequence[Sequence[int]],
    lr: float,
    epochs: int,
    batch_size: int,
    seed: int = 0,
) -> tuple[TinySeq2Seq, list[float]]:
    """Plain maximum-likelihood epochs; returns the model and per-epoch mean
    negative log-likelihood (measured on the shuffled stream as trained)."""
    if not inputs:
        raise DataError("empty pretraining set")
    rng = np.random.default_rng(seed)
    n = len(inputs)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            b_in = [inputs[i] for i in idx]
            b_out = [targets[i] for i in idx]
            w = [1.0 / len(idx)] * len(idx)
            grad, lp = model.grad_weighted_log_prob(b_in, b_out, w)
            model = model.with_params(sgd_step(model.params, grad, lr))
            total += float(-lp.sum())
        losses.append(total / n)
    return model, losses


def question_pretrain_pairs(
    vocab: Vocab, corpus_insts: Sequence[REInstance]
) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Search-format inputs (they include the answer) -> gold questions.
    Only answerable examples train the question generator."""
    ins, outs = [], []
    for inst in corpus_insts:
        if inst.tail is None or inst.gold_question is None:
            continue
        ins.append(search_input(vocab, inst))
        outs.append(tokenize(vocab, inst.gold_question))
    return ins, outs


def answer_pretrain_pairs(
    vocab: Vocab, corpus: Sequence
) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Gold-question answer prompts -> answers (NO_ANSWER rows included)."""
    ins, outs = [], []
    for ex in corpus:
        prompt = f"question: {ex.gold_question} context: {ex.passage} </s>"
        ins.append(tokenize(vocab, prompt))
        outs.append(tokenize(vocab, ex.gold_answer))
    return ins, outs


def _target_horizon(targets: Sequence[Sequence[int]], floor: int = 2) -> int:
    return max(max((len(t) for t in targets), default=floor), floor) + 1


def cmd_gen_data(
    cfg: ToyWorldConfig,
    out_dir: str | Path,
    with_negs: bool = False,
    pretrain_examples: int = 0,
    pretrain_no_answer_fraction: float = 0.10,
    pretrain_question_noise: float = 0.0,
    pretrain_question_paraphrase: float = 0.3,
) -> Path:
    """Generate a toy world directory (train/dev/test.jsonl + manifest.json,
    optionally an augmented train split plus two pretraining corpora:
    pretrain.jsonl for the answerer and pretrain_q.jsonl, drawn with an
    offset seed, for the question generator)."""
    fold = gen_toy_world(cfg)
    if with_negs:
        fold = FoldSpec(
            train=augment_negatives(fold.train, cfg.seed), dev=fold.dev, test=fold.test
        )
    manifest = {
        "config": dataclasses.asdict(cfg),
        "with_negs": with_negs,
        "pretrain_examples": pretrain_examples,
        "pretrain_no_answer_fraction": pretrain_no_answer_fraction,
        "pretrain_question_noise": pretrain_question_noise,
        "pretrain_question_paraphrase": pretrain_question_paraphrase,
    }
    out = Path(out_dir)
    save_world(fold, out, manifest)
    if pretrain_examples:
        for name, corpus_seed in (("pretrain.jsonl", cfg.seed), ("pretrain_q.jsonl", cfg.seed + 50)):
            corpus = gen_pretrain_corpus(
                cfg, pretrain_examples, seed=corpus_seed,
                no_answer_fraction=pretrain_no_answer_fraction,
                question_noise=pretrain_question_noise,
                question_paraphrase=pretrain_question_paraphrase,
            )
            save_pretrain_corpus(corpus, out / name)
    return out


def cmd_pretrain(cfg: RunConfig) -> Path:
    """Pretrain the question and answer generators; S is saved as an exact
    copy of the pretrained question generator."""
    if not cfg.world_dir:
        raise ConfigError("pretrain requires --world")
    if not cfg.out_dir:
        raise ConfigError("pretrain requires --out")
    fold, _ = load_world(cfg.world_dir)
    corpus_path = Path(cfg.corpus_path or Path(cfg.world_dir) / "pretrain.jsonl")
    if not corpus_path.exists():
        raise DataError(f"missing pretraining corpus: {corpus_path}")
    corpus = load_pretrain_corpus(corpus_path)
    # The question generator trains on its own corpus when one is available
    # (pretrain_q.jsonl next to the answer corpus, or --corpus-q); the two
    # generators then never see literally identical text.
    corpus_q_path = Path(cfg.corpus_q_path) if cfg.corpus_q_path else corpus_path.with_name("pretrain_q.jsonl")
    corpus_q = load_pretrain_corpus(corpus_q_path) if corpus_q_path.exists() else corpus
    q_insts = synthesize_q_pretrain(corpus_q, seed=cfg.seed)

    every = fold.train + fold.dev + fold.test
    vocab = build_vocab(every + q_insts, corpus + corpus_q)

    q_in, q_out = question_pretrain_pairs(vocab, q_insts)
    a_in, a_out = answer_pretrain_pairs(vocab, corpus)
    if not q_in or not a_in:
        raise DataError("pretraining corpus produced no usable examples")

    q_horizon = cfg.max_len or _target_horizon(q_out)
    world_tails = [tail_target(vocab, i) for i in every]
    a_horizon = cfg.max_len or _target_horizon(a_out + world_tails)

    q_model = TinySeq2Seq(
        vocab, dim=cfg.dim, max_len=q_horizon, seed=cfg.seed, init_scale=cfg.init_scale
    )
    a_model = TinySeq2Seq(
        vocab, dim=cfg.dim, max_len=a_horizon,
        allow_tokens=(NO_ANSWER_TOKEN,), seed=cfg.seed + 1, init_scale=cfg.init_scale,
    )
    q_model, q_losses = supervised_epochs(
        q_model, q_in, q_out, cfg.pretrain_lr, cfg.pretrain_epochs, cfg.batch_size, cfg.seed
    )
    a_model, a_losses = supervised_epochs(
        a_model, a_in, a_out, cfg.pretrain_lr, cfg.pretrain_epochs, cfg.batch_size, cfg.seed
    )

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    save_checkpoint(q_model, out / "q.json")
    save_checkpoint(a_model, out / "a.json")
    shutil.copyfile(out / "q.json", out / "s.json")
    with open(out / "pretrain_log.jsonl", "w", encoding="utf-8") as f:
        for i, (ql, al) in enumerate(zip(q_losses, a_losses)):
            f.write(json.dumps({"epoch": i, "q_loss": ql, "a_loss": al}) + "\n")
    return out


def load_models(ckpt_dir: str | Path, need_search: bool = False) -> ModelBundle:
    d = Path(ckpt_dir)
    if not (d / "vocab.txt").exists():
        raise DataError(f"missing vocab.txt in checkpoint directory: {d}")
    vocab = Vocab.load(d / "vocab.txt")
    for name in ("q.json", "a.json") + (("s.json",) if need_search else ()):
        if not (d / name).exists():
            raise DataError(f"missing checkpoint {name} in {d}")
    search = None
    if (d / "s.json").exists():
        search = load_checkpoint(d / "s.json", vocab)
    return ModelBundle(
        question=load_checkpoint(d / "q.json", vocab),
        answer=load_checkpoint(d / "a.json", vocab),
        search=search,
    )


def evaluate_te(
    models: ModelBundle,
    insts: Sequence[REInstance],
    cfg: SamplerConfig | None = None,
    question_mode: str = "generated",
) -> TEMetrics:
    preds = [generate_tail(models, inst, cfg, question_mode) for inst in insts]
    golds = [inst.accepted if not inst.is_negative else None for inst in insts]
    return te_score(preds, golds)


def evaluate_zre(
    models: ModelBundle,
    insts: Sequence[REInstance],
    candidates: Sequence[tuple[str, str, str]],
    cfg: SamplerConfig | None = None,
    marginal_k: int = 1,
):
    positives = [i for i in insts if not i.is_negative]
    preds = [
        classify_relation(models, inst, candidates, cfg, marginal_k) for inst in positives
    ]
    return zre_score(preds, [i.relation_id for i in positives])


def cmd_train(cfg: RunConfig) -> Path:
    """Fine-tune from a pretrained run directory; keep the best-on-dev-F1
    checkpoint (earliest step wins ties). S is read-only throughout."""
    for name, val in (("--world", cfg.world_dir), ("--ckpt", cfg.ckpt_dir), ("--out", cfg.out_dir)):
        if not val:
            raise ConfigError(f"train requires {name}")
    fold, _ = load_world(cfg.world_dir)
    kind = cfg.kind
    need_search = kind in (ObjectiveKind.OFFMML_OFFMML, ObjectiveKind.OFFMML_G)
    models = load_models(cfg.ckpt_dir, need_search=need_search)
    if kind is ObjectiveKind.GOLD_Q and any(
        i.gold_question is None for i in fold.train
    ):
        raise ConfigError("GOLD_Q objective needs gold questions on every train instance")

    spec = ObjectiveSpec(kind=kind, sampler=cfg.sampler(), skip_neg_q=cfg.skip_neg_q)
    qmode = resolved_question_mode(cfg)
    shuffle_rng = np.random.default_rng(cfg.seed)
    sample_rng = np.random.default_rng(cfg.seed + 1)

    records: list[dict] = []
    best_f1 = -1.0
    best: ModelBundle = models
    step = 0

    def eval_dev(at_step: int, current: ModelBundle) -> None:
        nonlocal best_f1, best
        m = evaluate_te(current, fold.dev, spec.sampler, qmode)
        records.append({"step": at_step, "dev_te_f1": m.f1})
        if m.f1 > best_f1:
            best_f1 = m.f1
            best = ModelBundle(current.question.copy(), current.answer.copy(), current.search)

    n = len(fold.train)
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = [fold.train[i] for i in order[lo : lo + cfg.batch_size]]
            models, stats = train_step(spec, models, batch, cfg.lr, sample_rng)
            step += 1
            rec = {"step": step, **stats.to_json()}
            records.append(rec)
            if stats.skipped_instances:
                log.warning(
                    "step %d skipped %d degenerate instances", step, stats.skipped_instances
                )
            if step % cfg.eval_every == 0:
                eval_dev(step, models)
    eval_dev(step, models)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Vocab.load(Path(cfg.ckpt_dir) / "vocab.txt").save(out / "vocab.txt")
    save_checkpoint(best.question, out / "q.json")
    save_checkpoint(best.answer, out / "a.json")
    if need_search:
        shutil.copyfile(Path(cfg.ckpt_dir) / "s.json", out / "s.json")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return out


def cmd_eval(cfg: RunConfig, task: str = "both", csv_out: bool = False) -> EvalReport:
    """Score the test split; writes report.json (and report.csv on request)
    into the checkpoint directory or --out."""
    if not cfg.world_dir or not cfg.ckpt_dir:
        raise ConfigError("eval requires --world and --ckpt")
    if task not in ("te", "zre", "both"):
        raise ConfigError(f"unknown eval task {task!r}")
    fold, _ = load_world(cfg.world_dir)
    models = load_models(cfg.ckpt_dir)
    sampler = cfg.sampler()
    qmode = resolved_question_mode(cfg)
    te = zre = None
    if task in ("te", "both"):
        te = evaluate_te(models, fold.test, sampler, qmode)
    if task in ("zre", "both"):
        zre = evaluate_zre(
            models, fold.test, fold.relation_table("test"), sampler, cfg.marginal_k
        )
    report = EvalReport(te=te, zre=zre)
    out = Path(cfg.out_dir or cfg.ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "report.json")
    if csv_out:
        report.save_csv(out / "report.csv")
    return report


def cmd_infer(
    ckpt_dir: str,
    context: str,
    head: str,
    relation: str,
    description: str = "",
    question_mode: str = "generated",
    beam_size: int = 8,
) -> tuple[str, str]:
    """One-off inference; returns (question, tail)."""
    models = load_models(ckpt_dir)
    inst = REInstance(context=context, head=head, relation=relation, description=description)
    sampler = SamplerConfig(beam_size=beam_size)
    q = generate_question(models, inst, sampler) if question_mode == "generated" else ""
    tail = generate_tail(models, inst, sampler, question_mode)
    return q, tail
