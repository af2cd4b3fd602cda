"""Relation-extraction instances, prompt construction, and inference.

Prompt templates are frozen surface contracts (golden-file tested); every
model input in the system goes through ``format_prompt``. Inference is
question -> answer: beam top-1 question from the question generator, then a
greedy tail decode from the answer generator.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

from .decoding import SamplerConfig, beam_search, greedy
from .seqmodel import ConditionalSeqModel
from .vocab import NO_ANSWER_TOKEN, Vocab, tokenize


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class REInstance:
    """One relation-extraction example.

    ``tail is None`` marks a negative example (no tail entity exists for this
    head and relation in the context); the two representations are kept in
    lockstep by deriving ``is_negative`` rather than storing it.
    """

    context: str
    head: str
    relation: str
    description: str = ""
    tail: str | None = None
    gold_question: str | None = None
    relation_id: str = ""
    accepted_tails: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("context", "head", "relation"):
            if not getattr(self, name).strip():
                raise ValueError(f"REInstance.{name} must be non-empty")
        if self.tail is not None and not self.tail.strip():
            raise ValueError("tail must be None (negative) or a non-empty string")
        if not self.relation_id:
            object.__setattr__(self, "relation_id", self.relation)
        object.__setattr__(self, "accepted_tails", tuple(self.accepted_tails))

    @property
    def is_negative(self) -> bool:
        return self.tail is None

    @property
    def accepted(self) -> tuple[str, ...]:
        """Every answer string counted as correct for this instance."""
        if self.tail is None:
            return ()
        return self.accepted_tails if self.accepted_tails else (self.tail,)

    def to_json(self) -> dict:
        d = {
            "context": self.context,
            "head": self.head,
            "relation": self.relation,
            "description": self.description,
            "tail": self.tail,
            "relation_id": self.relation_id,
            "is_negative": self.is_negative,
        }
        if self.gold_question is not None:
            d["gold_question"] = self.gold_question
        if self.accepted_tails:
            d["accepted_tails"] = list(self.accepted_tails)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "REInstance":
        inst = cls(
            context=d["context"],
            head=d["head"],
            relation=d["relation"],
            description=d.get("description", ""),
            tail=d.get("tail"),
            gold_question=d.get("gold_question"),
            relation_id=d.get("relation_id", ""),
            accepted_tails=tuple(d.get("accepted_tails", ())),
        )
        if "is_negative" in d and bool(d["is_negative"]) != inst.is_negative:
            raise ValueError("is_negative flag contradicts tail field")
        return inst


class PromptKind(enum.Enum):
    QUESTION_GEN = "question_gen"
    SEARCH = "search"
    ANSWER_PSEUDO = "answer_pseudo"
    ANSWER_GENERATED = "answer_generated"
    ANSWER_GOLD = "answer_gold"


def format_prompt(kind: PromptKind, inst: REInstance, q: str | None = None) -> str:
    """Render the model input string for one prompt kind.

    ``q`` is required for ANSWER_GENERATED / ANSWER_GOLD and rejected
    elsewhere. The relation description, when present, joins the relation
    keywords with " ; "; the search prompt additionally carries the tail
    entity (NO_ANSWER for negatives) just before "context:".
    """
    needs_q = kind in (PromptKind.ANSWER_GENERATED, PromptKind.ANSWER_GOLD)
    if needs_q and q is None:
        raise PromptError(f"prompt kind {kind.value} requires a question string")
    if not needs_q and q is not None:
        raise PromptError(f"prompt kind {kind.value} does not take a question string")
    r_seg = inst.relation
    if inst.description:
        r_seg += f" ; {inst.description}"
    if kind is PromptKind.QUESTION_GEN:
        return f"answer: {inst.head} <SEP> {r_seg} context: {inst.context} </s>"
    if kind is PromptKind.SEARCH:
        tail = inst.tail if inst.tail is not None else NO_ANSWER_TOKEN
        return f"answer: {inst.head} <SEP> {r_seg} {tail} context: {inst.context} </s>"
    if kind is PromptKind.ANSWER_PSEUDO:
        return f"question: {inst.head} <SEP> {inst.relation} context: {inst.context} </s>"
    if kind is PromptKind.ANSWER_GENERATED:
        return f"relation: {inst.head} {inst.relation} question: {q} context: {inst.context} </s>"
    if kind is PromptKind.ANSWER_GOLD:
        return f"question: {q} context: {inst.context} </s>"
    raise PromptError(f"unknown prompt kind: {kind!r}")


@dataclass
class ModelBundle:
    """The three modules of a run: question generator, answer generator, and
    the frozen search copy (present only for off-policy objectives)."""

    question: ConditionalSeqModel
    answer: ConditionalSeqModel
    search: ConditionalSeqModel | None = None


QUESTION_MODES = ("generated", "pseudo", "gold")


def question_input(vocab: Vocab, inst: REInstance) -> tuple[int, ...]:
    return tokenize(vocab, format_prompt(PromptKind.QUESTION_GEN, inst))


def search_input(vocab: Vocab, inst: REInstance) -> tuple[int, ...]:
    return tokenize(vocab, format_prompt(PromptKind.SEARCH, inst))


def answer_input(
    vocab: Vocab, inst: REInstance, q_text: str | None, question_mode: str = "generated"
) -> tuple[int, ...]:
    if question_mode == "generated":
        prompt = format_prompt(PromptKind.ANSWER_GENERATED, inst, q_text)
    elif question_mode == "pseudo":
        prompt = format_prompt(PromptKind.ANSWER_PSEUDO, inst)
    elif question_mode == "gold":
        if inst.gold_question is None:
            raise PromptError("instance has no gold question")
        prompt = format_prompt(PromptKind.ANSWER_GOLD, inst, inst.gold_question)
    else:
        raise PromptError(f"unknown question mode: {question_mode!r}")
    return tokenize(vocab, prompt)


def tail_target(vocab: Vocab, inst: REInstance) -> tuple[int, ...]:
    return tokenize(vocab, inst.tail if inst.tail is not None else NO_ANSWER_TOKEN)


def generate_question(
    models: ModelBundle, inst: REInstance, cfg: SamplerConfig | None = None
) -> str:
    cfg = cfg or SamplerConfig()
    vocab = models.question.vocab
    hyps = beam_search(models.question, question_input(vocab, inst), cfg.beam_size)
    return vocab.text(hyps[0].ids)


def generate_tail(
    models: ModelBundle,
    inst: REInstance,
    cfg: SamplerConfig | None = None,
    question_mode: str = "generated",
) -> str:
    """Predict the tail entity string ("NO_ANSWER" marks a null prediction).

    generated: beam top-1 question then greedy answer decode. pseudo / gold
    skip question generation and use the corresponding answer prompt.
    """
    cfg = cfg or SamplerConfig()
    q_text = generate_question(models, inst, cfg) if question_mode == "generated" else None
    vocab = models.answer.vocab
    out = greedy(models.answer, answer_input(vocab, inst, q_text, question_mode))
    return vocab.text(out.ids)


def score_relation(
    models: ModelBundle,
    inst: REInstance,
    candidate_r: str,
    candidate_desc: str = "",
    cfg: SamplerConfig | None = None,
    marginal_k: int = 1,
) -> float:
    """Log-probability of the instance's known tail under a candidate relation.

    Top-1 beam question by default; marginal_k > 1 averages
    exp(log_PQ + log_PA) over the top-k beam questions instead.
    """
    cfg = cfg or SamplerConfig()
    if marginal_k < 1:
        raise ValueError("marginal_k must be >= 1")
    variant = replace(
        inst, relation=candidate_r, description=candidate_desc, relation_id=candidate_r
    )
    vocab = models.question.vocab
    hyps = beam_search(
        models.question, question_input(vocab, variant), max(cfg.beam_size, marginal_k)
    )
    target = tail_target(models.answer.vocab, inst)
    if marginal_k == 1:
        q_text = vocab.text(hyps[0].ids)
        return models.answer.log_prob(
            answer_input(models.answer.vocab, variant, q_text), target
        )
    terms = []
    for h in hyps[:marginal_k]:
        q_text = vocab.text(h.ids)
        log_pa = models.answer.log_prob(
            answer_input(models.answer.vocab, variant, q_text), target
        )
        terms.append(h.log_score + log_pa)
    m = max(terms)
    return m + math.log(sum(math.exp(t - m) for t in terms) / len(terms))


def classify_relation(
    models: ModelBundle,
    inst: REInstance,
    candidates: Sequence[tuple],
    cfg: SamplerConfig | None = None,
    marginal_k: int = 1,
) -> str:
    """Highest-scoring candidate relation; ties keep the earliest candidate.

    Candidates are (relation, description) pairs or (relation_id, relation,
    description) triples; the returned id is the relation itself for pairs.
    """
    if not candidates:
        raise ValueError("empty candidate list")
    best_id, best_score = None, -math.inf
    for cand in candidates:
        if len(cand) == 2:
            rid, r, desc = cand[0], cand[0], cand[1]
        elif len(cand) == 3:
            rid, r, desc = cand
        else:
            raise ValueError("candidates must be (r, desc) or (relation_id, r, desc)")
        s = score_relation(models, inst, r, desc, cfg, marginal_k)
        if s > best_score:
            best_id, best_score = rid, s
    return best_id
