"""Data plumbing: loaders, pseudo-questions, negative augmentation, synthesis
of question-pretraining examples from QA pairs, and a seeded toy world.

The toy world is a closed micro-universe for end-to-end zero-shot runs:
entities are opaque tokens, each relation k owns a verb token ("vrb{k}"), a
question word ("wh{k}"), and a one-token description. A fact (e1, k, e2)
surfaces as the context "{e1} vrb{k} {e2} ." and carries the gold question
"wh{k} {e1} vrb{k} ?". Relation sets are disjoint across splits, so dev/test
relations are genuinely unseen.
"""
from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pipeline import PromptKind, REInstance, format_prompt
from .vocab import NO_ANSWER_TOKEN, SEP_TOKEN, Vocab

log = logging.getLogger(__name__)

INTERROGATIVES = frozenset(
    ("what", "where", "when", "who", "which", "whose", "whom", "why", "how")
)


class DataError(ValueError):
    pass


@dataclass
class FoldSpec:
    """Train/dev/test splits with pairwise-disjoint relation sets."""

    train: list[REInstance]
    dev: list[REInstance]
    test: list[REInstance]

    def __post_init__(self) -> None:
        names = ("train", "dev", "test")
        rels = {n: {i.relation_id for i in getattr(self, n)} for n in names}
        for a in range(len(names)):
            for b in range(a + 1, len(names)):
                both = rels[names[a]] & rels[names[b]]
                if both:
                    raise DataError(
                        f"relation sets overlap between {names[a]} and {names[b]}: {sorted(both)}"
                    )

    def split(self, name: str) -> list[REInstance]:
        if name not in ("train", "dev", "test"):
            raise DataError(f"unknown split: {name!r}")
        return getattr(self, name)

    def relation_table(self, name: str) -> list[tuple[str, str, str]]:
        """Ordered unique (relation_id, relation, description) triples of a split."""
        seen: dict[str, tuple[str, str, str]] = {}
        for inst in self.split(name):
            seen.setdefault(inst.relation_id, (inst.relation_id, inst.relation, inst.description))
        return list(seen.values())


@dataclass(frozen=True)
class ToyWorldConfig:
    n_entities: int = 16
    n_train_relations: int = 6
    n_test_relations: int = 3
    n_dev_relations: int = 1
    contexts_per_relation: int = 200
    negative_fraction: float = 0.5
    seed: int = 0
    # Extra world relations that never serve as labels: they pad contexts
    # and the pretraining corpus with facts outside every fold.
    n_extra_relations: int = 2
    # Each context states this many facts about the same head entity, each
    # from a different relation. With more than one fact the relation keyword
    # is load-bearing: asking about the wrong relation either hits a different
    # fact or nothing at all.
    facts_per_context: int = 2
    # Tail entities are typed per relation (as languages are to "original
    # language"), so a context never repeats a tail type.
    tails_per_relation: int = 8

    def __post_init__(self) -> None:
        for name in (
            "n_entities", "n_train_relations", "n_test_relations",
            "n_dev_relations", "contexts_per_relation",
            "facts_per_context", "tails_per_relation",
        ):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if not (0.0 <= self.negative_fraction <= 1.0):
            raise DataError("negative_fraction must be in [0, 1]")
        if self.n_extra_relations < 0:
            raise DataError("n_extra_relations must be >= 0")


@dataclass(frozen=True)
class QAPretrainExample:
    passage: str
    gold_question: str
    gold_answer: str
    entities: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.gold_answer.strip():
            raise DataError("gold_answer must be non-empty")
        object.__setattr__(self, "entities", tuple(self.entities))

    def to_json(self) -> dict:
        return {
            "passage": self.passage,
            "gold_question": self.gold_question,
            "gold_answer": self.gold_answer,
            "entities": list(self.entities),
        }

    @classmethod
    def from_json(cls, d: dict) -> "QAPretrainExample":
        return cls(d["passage"], d["gold_question"], d["gold_answer"], tuple(d.get("entities", ())))


def make_pseudo_question(e1: str, r: str) -> str:
    """The bare question surrogate "{e1} <SEP> {r}"."""
    e1, r = e1.strip(), r.strip()
    if not e1 or not r:
        raise DataError("pseudo question needs non-empty head and relation")
    return f"{e1} {SEP_TOKEN} {r}"


def augment_negatives(train: Sequence[REInstance], seed: int = 0) -> list[REInstance]:
    """Originals plus one synthetic negative per original.

    Each negative keeps every field of its source except relation,
    description, relation_id and the tail: the relation is redrawn uniformly
    from the other relation classes in the data and the tail becomes null.
    """
    classes: dict[str, tuple[str, str, str]] = {}
    for inst in train:
        classes.setdefault(inst.relation_id, (inst.relation_id, inst.relation, inst.description))
    if len(classes) < 2:
        raise DataError("cannot synthesize negatives: need >= 2 relation classes")
    table = sorted(classes.values())
    rng = np.random.default_rng(seed)
    out = list(train)
    for inst in train:
        others = [t for t in table if t[0] != inst.relation_id]
        rid, r, desc = others[int(rng.integers(len(others)))]
        out.append(
            replace(
                inst, relation=r, description=desc, relation_id=rid,
                tail=None, accepted_tails=(),
            )
        )
    return out


def _strip_punct(token: str) -> str:
    return token.strip(string.punctuation)


def synthesize_q_pretrain(
    examples: Sequence[QAPretrainExample], seed: int = 0
) -> list[REInstance]:
    """Turn QA pairs into question-generation training instances.

    Per example: the head entity is one annotated entity chosen at random;
    the relation keywords are up to 4 tokens sampled without replacement from
    the question after dropping punctuation, interrogative words, and entity
    tokens. Examples with no entities or an empty keyword pool are dropped.
    """
    rng = np.random.default_rng(seed)
    out: list[REInstance] = []
    dropped = 0
    for ex in examples:
        if not ex.entities:
            dropped += 1
            continue
        e1 = ex.entities[int(rng.integers(len(ex.entities)))]
        entity_tokens = {
            tok.lower() for ent in ex.entities for tok in ent.split()
        }
        pool = []
        for tok in ex.gold_question.split():
            bare = _strip_punct(tok)
            if not bare:
                continue
            if bare.lower() in INTERROGATIVES or bare.lower() in entity_tokens:
                continue
            pool.append(bare)
        if not pool:
            dropped += 1
            continue
        k = int(rng.integers(1, min(4, len(pool)) + 1))
        picked = rng.choice(len(pool), size=k, replace=False)
        r = " ".join(pool[i] for i in picked)
        tail = None if ex.gold_answer == NO_ANSWER_TOKEN else ex.gold_answer
        out.append(
            REInstance(
                context=ex.passage,
                head=e1,
                relation=r,
                tail=tail,
                gold_question=ex.gold_question,
            )
        )
    if dropped:
        log.info("synthesize_q_pretrain dropped %d of %d examples", dropped, len(examples))
    return out


# -- toy world ---------------------------------------------------------------

@dataclass(frozen=True)
class ToyRelation:
    """One synthetic relation type.

    The relation keyword fed to prompts is ``wh``: a question word, so
    general QA exposure grounds it, yet it never occurs in passages — an
    answerer that only sees the keyword still has to infer which passage
    verb realizes it. Contexts express the relation through ``verb``, which
    full questions repeat verbatim; tails come from the relation's own typed
    pool ``tails``; ``rid`` is the class id used by folds and classification.
    """

    rid: str
    verb: str
    wh: str
    desc: str
    tails: tuple[str, ...] = ()

    def fact(self, e1: str, tail: str) -> str:
        return f"{e1} {self.verb} {tail} ."

    def question(self, e1: str) -> str:
        return f"{self.wh} {e1} {self.verb} ?"

    def question_alt(self, e1: str) -> str:
        """Paraphrase with the verb fronted, as real QA data words one
        question several ways ("Which brand replaced X?" / "When was X
        replaced?"). Pretraining on a mix keeps the question generator's
        conditional genuinely multi-modal."""
        return f"{self.wh} {self.verb} {e1} ?"


def toy_inventory(cfg: ToyWorldConfig) -> tuple[list[str], list[ToyRelation]]:
    """Head entities and the full relation inventory (labels + extras).

    Pure function of the config counts; index-based names keep every token a
    single whitespace-free vocabulary entry.
    """
    entities = [f"ent{i}" for i in range(cfg.n_entities)]
    total = (
        cfg.n_train_relations + cfg.n_dev_relations
        + cfg.n_test_relations + cfg.n_extra_relations
    )
    rels = [
        ToyRelation(
            rid=f"rel{k}", verb=f"vrb{k}", wh=f"wh{k}", desc="",
            tails=tuple(f"tl{k}n{i}" for i in range(cfg.tails_per_relation)),
        )
        for k in range(total)
    ]
    return entities, rels


def _split_relations(cfg: ToyWorldConfig, rels: list[ToyRelation]):
    a = cfg.n_train_relations
    b = a + cfg.n_dev_relations
    c = b + cfg.n_test_relations
    return rels[:a], rels[a:b], rels[b:c], rels[c:]


def _compose_facts(
    rng: np.random.Generator, e1: str, facts: Sequence[tuple[ToyRelation, str]]
) -> str:
    order = rng.permutation(len(facts))
    return " ".join(facts[int(i)][0].fact(e1, facts[int(i)][1]) for i in order)


def gen_toy_world(cfg: ToyWorldConfig) -> FoldSpec:
    """Seeded micro-world with disjoint relation splits.

    Every context states facts_per_context facts about one head entity, each
    from a different relation (the split's own plus the extras), in shuffled
    order. A positive instance's label is one of the stated relations and its
    tail is that fact's object; for negative_fraction of the instances the
    labeled relation is absent from the context instead, so the tail is null.
    """
    entities, rels = toy_inventory(cfg)
    train_r, dev_r, test_r, extra_r = _split_relations(cfg, rels)
    rng = np.random.default_rng(cfg.seed)

    def sample_facts(pool: list[ToyRelation], k: int) -> list[tuple[ToyRelation, str]]:
        picked = rng.choice(len(pool), size=k, replace=False)
        return [
            (pool[int(i)], pool[int(i)].tails[int(rng.integers(len(pool[int(i)].tails)))])
            for i in picked
        ]

    def build_split(split_rels: list[ToyRelation]) -> list[REInstance]:
        k = cfg.facts_per_context
        out: list[REInstance] = []
        for rel in split_rels:
            others = [r for r in split_rels + extra_r if r.rid != rel.rid]
            if len(others) < k:
                raise DataError(
                    f"facts_per_context={k} needs at least {k} relations besides "
                    f"{rel.rid} in the split plus extras, have {len(others)}"
                )
            insts: list[REInstance] = []
            for _ in range(cfg.contexts_per_relation):
                e1 = entities[int(rng.integers(len(entities)))]
                tail = rel.tails[int(rng.integers(len(rel.tails)))]
                facts = [(rel, tail)] + sample_facts(others, k - 1)
                insts.append(
                    REInstance(
                        context=_compose_facts(rng, e1, facts),
                        head=e1,
                        relation=rel.wh,
                        description=rel.desc,
                        tail=tail,
                        gold_question=rel.question(e1),
                        relation_id=rel.rid,
                    )
                )
            n_neg = round(cfg.negative_fraction * len(insts))
            if n_neg:
                chosen = rng.permutation(len(insts))[:n_neg]
                for idx in chosen:
                    inst = insts[int(idx)]
                    insts[int(idx)] = replace(
                        inst,
                        context=_compose_facts(rng, inst.head, sample_facts(others, k)),
                        tail=None, accepted_tails=(),
                    )
            out.extend(insts)
        return out

    return FoldSpec(train=build_split(train_r), dev=build_split(dev_r), test=build_split(test_r))


def _garble_question(rng: np.random.Generator, question: str, passage: str) -> str:
    """One random corruption: insert a passage token, drop a token, or swap two.

    Stands in for the typos, odd phrasings, and annotation slips of scraped
    QA data. The question generator pretrained on a corpus with this noise
    keeps genuine probability mass on malformed questions, which is what
    on-policy sampling can later latch onto.
    """
    toks = question.split()
    op = int(rng.integers(3))
    if op == 0:
        extra = passage.split()
        toks.insert(int(rng.integers(len(toks) + 1)), extra[int(rng.integers(len(extra)))])
    elif op == 1 and len(toks) > 1:
        del toks[int(rng.integers(len(toks)))]
    elif len(toks) > 1:
        i, j = rng.choice(len(toks), size=2, replace=False)
        toks[i], toks[j] = toks[j], toks[i]
    return " ".join(toks)


def gen_pretrain_corpus(
    cfg: ToyWorldConfig,
    n_examples: int,
    seed: int = 0,
    no_answer_fraction: float = 0.25,
    question_noise: float = 0.15,
    question_paraphrase: float = 0.3,
) -> list[QAPretrainExample]:
    """QA pairs over the toy inventory for pretraining the two generators.

    Covers every world relation (labels and extras alike, mirroring how
    broad-domain QA data covers language the downstream folds will reuse).
    Passages state facts_per_context facts about one head entity; the
    question asks about one of them, except for a no_answer_fraction of
    examples where it asks about a relation the passage does not state.
    A question_paraphrase fraction of questions use the verb-fronted
    paraphrase, and a question_noise fraction get one random corruption
    (see _garble_question): real QA data is multi-modal and noisy, never
    perfectly templated, and generators pretrained on it should keep
    probability mass off the single canonical wording.
    """
    if not (0.0 <= no_answer_fraction <= 1.0):
        raise DataError("no_answer_fraction must be in [0, 1]")
    if not (0.0 <= question_noise <= 1.0):
        raise DataError("question_noise must be in [0, 1]")
    if not (0.0 <= question_paraphrase <= 1.0):
        raise DataError("question_paraphrase must be in [0, 1]")
    entities, rels = toy_inventory(cfg)
    k = cfg.facts_per_context
    if len(rels) < k + 1:
        raise DataError(
            f"facts_per_context={k} pretraining needs at least {k + 1} world relations"
        )
    rng = np.random.default_rng(seed)
    out: list[QAPretrainExample] = []
    for _ in range(n_examples):
        e1 = entities[int(rng.integers(len(entities)))]
        picked = rng.choice(len(rels), size=k + 1, replace=False)
        facts = [
            (rels[int(i)], rels[int(i)].tails[int(rng.integers(len(rels[int(i)].tails)))])
            for i in picked[:k]
        ]
        passage = _compose_facts(rng, e1, facts)
        if rng.random() < no_answer_fraction:
            rel, answer = rels[int(picked[k])], NO_ANSWER_TOKEN
        else:
            rel, answer = facts[int(rng.integers(len(facts)))]
        question = (
            rel.question_alt(e1) if rng.random() < question_paraphrase
            else rel.question(e1)
        )
        if rng.random() < question_noise:
            question = _garble_question(rng, question, passage)
        out.append(QAPretrainExample(passage, question, answer, (e1,)))
    return out


# -- serialization -------------------------------------------------------------

def save_instances(insts: Iterable[REInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in insts:
            f.write(json.dumps(inst.to_json(), sort_keys=True) + "\n")


def load_jsonl(path: str | Path) -> list[REInstance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(REInstance.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{path}: line {lineno}: {e}") from e
    return out


def load_reqa_tsv(path: str | Path) -> list[REInstance]:
    """Tab-separated rows: relation, question template, head, context, answers...

    The question template names the head by the placeholder XXX. Zero answer
    columns mark a negative; with several answers the first is the training
    tail and all are accepted at evaluation.
    """
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 4:
                raise DataError(f"{path}: line {lineno}: expected >= 4 tab-separated columns")
            relation, template, head, context = cols[:4]
            answers = [a for a in cols[4:] if a.strip()]
            try:
                out.append(
                    REInstance(
                        context=context,
                        head=head,
                        relation=relation,
                        tail=answers[0] if answers else None,
                        gold_question=template.replace("XXX", head),
                        accepted_tails=tuple(answers) if len(answers) > 1 else (),
                    )
                )
            except ValueError as e:
                raise DataError(f"{path}: line {lineno}: {e}") from e
    return out


def load_dataset(path: str | Path, format: str = "jsonl") -> list[REInstance]:
    if format == "jsonl":
        return load_jsonl(path)
    if format == "reqa_tsv":
        return load_reqa_tsv(path)
    raise DataError(f"unknown dataset format: {format!r}")


def save_world(fold: FoldSpec, out_dir: str | Path, manifest: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        save_instances(fold.split(name), out / f"{name}.jsonl")
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_world(world_dir: str | Path) -> tuple[FoldSpec, dict]:
    d = Path(world_dir)
    if not (d / "manifest.json").exists():
        raise DataError(f"not a world directory (no manifest.json): {d}")
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    fold = FoldSpec(
        train=load_jsonl(d / "train.jsonl"),
        dev=load_jsonl(d / "dev.jsonl"),
        test=load_jsonl(d / "test.jsonl"),
    )
    return fold, manifest


def save_pretrain_corpus(examples: Iterable[QAPretrainExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def load_pretrain_corpus(path: str | Path) -> list[QAPretrainExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(QAPretrainExample.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{path}: line {lineno}: {e}") from e
    return out


def build_vocab(
    instances: Sequence[REInstance],
    pretrain: Sequence[QAPretrainExample] = (),
    extra_texts: Sequence[str] = (),
) -> Vocab:
    """Vocabulary covering every string the models will ever see or emit."""
    texts: list[str] = list(extra_texts)
    for inst in instances:
        texts.append(format_prompt(PromptKind.QUESTION_GEN, inst))
        texts.append(format_prompt(PromptKind.SEARCH, inst))
        texts.append(format_prompt(PromptKind.ANSWER_PSEUDO, inst))
        q = inst.gold_question or ""
        if q:
            texts.append(format_prompt(PromptKind.ANSWER_GOLD, inst, q))
        texts.append(format_prompt(PromptKind.ANSWER_GENERATED, inst, q or "x"))
        if inst.tail is not None:
            texts.append(inst.tail)
            texts.extend(inst.accepted_tails)
    for ex in pretrain:
        texts.extend((ex.passage, ex.gold_question, ex.gold_answer))
        texts.extend(ex.entities)
    return Vocab.from_texts(texts)
