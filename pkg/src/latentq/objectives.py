"""Training objectives: supervised question baselines and latent-question
marginal likelihood with on-policy or off-policy (frozen search) proposals.

The marginal being ascended is  log Σ_q P_Q(q | c,e1,r) · P_A(e2 | q, ...).
Monte-Carlo versions weight sampled questions by the self-normalized
posterior φ(q); the answer module can instead take the single best beam
question (the G-gradient). Off-policy variants draw q from the frozen search
module S (whose input also contains e2) and correct by importance weights
with S's truncated top-p density in the denominator.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoding import SamplerConfig, beam_search, top_p_sample_with_density
from .pipeline import ModelBundle, REInstance, answer_input, question_input, search_input, tail_target
from .seqmodel import ParamVector, sgd_step


class DegeneratePosteriorError(ValueError):
    pass


class ObjectiveKind(enum.Enum):
    GOLD_Q = "gold_q"
    PSEUDO_Q = "pseudo_q"
    MML_MML = "mml_mml"
    MML_G = "mml_g"
    OFFMML_OFFMML = "offmml_offmml"
    OFFMML_G = "offmml_g"


SUPERVISED_KINDS = (ObjectiveKind.GOLD_Q, ObjectiveKind.PSEUDO_Q)
OFF_POLICY_KINDS = (ObjectiveKind.OFFMML_OFFMML, ObjectiveKind.OFFMML_G)


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: ObjectiveKind
    sampler: SamplerConfig = SamplerConfig()
    skip_neg_q: bool = False  # ablation: no question-module update on negatives


@dataclass
class QuestionSample:
    """One sampled latent question with everything the estimators need.

    log_S is the log-density of the proposal that actually produced the
    sample (truncated top-p law; under P_Q for on-policy draws, under the
    frozen S for off-policy draws). log_PQ and log_PA are untruncated model
    log-probabilities.
    """

    seq: tuple[int, ...]
    log_S: float
    log_PQ: float
    log_PA: float
    weight_phi: float | None = None


@dataclass
class GradPair:
    grad_A: ParamVector
    grad_Q: ParamVector | None = None


@dataclass
class StepStats:
    objective: str
    mean_log_PA: float
    ess: float | None
    skipped_instances: int

    def to_json(self) -> dict:
        return {
            "objective": self.objective,
            "mean_log_PA": self.mean_log_PA,
            "ess": self.ess,
            "skipped_instances": self.skipped_instances,
        }


def compute_phi(samples: list[QuestionSample], mode: str) -> list[QuestionSample]:
    """Fill self-normalized posterior weights over the drawn set.

    on_policy:  w_i ∝ exp(log_PQ_i + log_PA_i)
    off_policy: w_i ∝ exp(log_PQ_i + log_PA_i − log_S_i)
    """
    if not samples:
        raise ValueError("empty sample list")
    if mode == "on_policy":
        lw = np.array([s.log_PQ + s.log_PA for s in samples])
    elif mode == "off_policy":
        lw = np.array([s.log_PQ + s.log_PA - s.log_S for s in samples])
    else:
        raise ValueError(f"unknown weighting mode: {mode!r}")
    m = float(np.max(lw))
    if not math.isfinite(m):
        raise DegeneratePosteriorError("degenerate posterior")
    w = np.exp(lw - m)
    total = float(w.sum())
    if total <= 0.0 or not math.isfinite(total):
        raise DegeneratePosteriorError("degenerate posterior")
    w /= total
    for s, wi in zip(samples, w):
        s.weight_phi = float(wi)
    return samples


def effective_sample_size(samples: Sequence[QuestionSample]) -> float:
    """1 / Σ w_i² — n for uniform weights, 1 for a collapsed posterior."""
    return 1.0 / sum(s.weight_phi**2 for s in samples)


def collect_samples(
    models: ModelBundle,
    inst: REInstance,
    cfg: SamplerConfig,
    source: str = "policy",
    rng: np.random.Generator | None = None,
) -> list[QuestionSample]:
    """Draw latent-question samples for one instance.

    source="policy" draws from the question generator on its question input;
    source="search" draws from the frozen search module on the search input
    (which includes the tail entity). Duplicates are retained.
    """
    vocab = models.question.vocab
    q_in = question_input(vocab, inst)
    if source == "policy":
        proposal, prop_input = models.question, q_in
    elif source == "search":
        if models.search is None:
            raise ValueError("off-policy sampling requires a search model")
        proposal, prop_input = models.search, search_input(vocab, inst)
    else:
        raise ValueError(f"unknown sample source: {source!r}")
    draws, tdens = top_p_sample_with_density(proposal, prop_input, cfg, rng)
    target = tail_target(models.answer.vocab, inst)
    samples = []
    for d, log_s in zip(draws, tdens):
        log_pq = d.log_score if source == "policy" else models.question.log_prob(q_in, d.ids)
        a_in = answer_input(models.answer.vocab, inst, vocab.text(d.ids))
        log_pa = models.answer.log_prob(a_in, target)
        samples.append(QuestionSample(d.ids, float(log_s), float(log_pq), float(log_pa)))
    return samples


def grad_Q_MML(
    models: ModelBundle, inst: REInstance, samples: Sequence[QuestionSample]
) -> ParamVector:
    """Σ_i φ_i ∇ log P_Q(q_i | question-input). Weights must be filled."""
    vocab = models.question.vocab
    q_in = question_input(vocab, inst)
    w = [_weight(s) for s in samples]
    grad, _ = models.question.grad_weighted_log_prob(
        [q_in] * len(samples), [s.seq for s in samples], w
    )
    return grad


def grad_A_MML(
    models: ModelBundle, inst: REInstance, samples: Sequence[QuestionSample]
) -> ParamVector:
    """Σ_i φ_i ∇ log P_A(e2 | answer-input(q_i))."""
    vocab = models.question.vocab
    a_vocab = models.answer.vocab
    target = tail_target(a_vocab, inst)
    inputs = [answer_input(a_vocab, inst, vocab.text(s.seq)) for s in samples]
    w = [_weight(s) for s in samples]
    grad, _ = models.answer.grad_weighted_log_prob(
        inputs, [target] * len(samples), w
    )
    return grad


def grad_A_G(
    models: ModelBundle, inst: REInstance, beam_size: int = 8
) -> ParamVector:
    """∇ log P_A(e2 | answer-input(q̂)) with q̂ the top beam question from P_Q."""
    vocab = models.question.vocab
    hyps = beam_search(models.question, question_input(vocab, inst), beam_size)
    q_text = vocab.text(hyps[0].ids)
    a_vocab = models.answer.vocab
    return models.answer.grad_log_prob(
        answer_input(a_vocab, inst, q_text), tail_target(a_vocab, inst)
    )


def instance_grads(
    spec: ObjectiveSpec,
    models: ModelBundle,
    inst: REInstance,
    rng: np.random.Generator | None = None,
) -> tuple[GradPair, list[QuestionSample]]:
    """Gradient contributions of a single instance under a latent-question kind."""
    kind = spec.kind
    if kind in SUPERVISED_KINDS:
        raise ValueError("supervised kinds are handled batch-wise in train_step")
    off = kind in OFF_POLICY_KINDS
    samples = collect_samples(
        models, inst, spec.sampler, source="search" if off else "policy", rng=rng
    )
    compute_phi(samples, "off_policy" if off else "on_policy")
    if spec.skip_neg_q and inst.is_negative:
        grad_q = None
    else:
        grad_q = grad_Q_MML(models, inst, samples)
    if kind in (ObjectiveKind.MML_G, ObjectiveKind.OFFMML_G):
        grad_a = grad_A_G(models, inst, spec.sampler.beam_size)
    else:
        grad_a = grad_A_MML(models, inst, samples)
    return GradPair(grad_A=grad_a, grad_Q=grad_q), samples


def train_step(
    spec: ObjectiveSpec,
    models: ModelBundle,
    batch: Sequence[REInstance],
    lr: float,
    rng: np.random.Generator | None = None,
) -> tuple[ModelBundle, StepStats]:
    """One gradient-ascent step over a batch. Returns updated models and
    per-step statistics. The search module is never touched.

    Instances whose posterior degenerates (every weight underflows) are
    skipped and counted in the stats.
    """
    if not batch:
        raise ValueError("empty batch")
    kind = spec.kind
    if kind in SUPERVISED_KINDS:
        mode = "gold" if kind is ObjectiveKind.GOLD_Q else "pseudo"
        if mode == "gold":
            missing = [i for i, inst in enumerate(batch) if inst.gold_question is None]
            if missing:
                raise ValueError(f"GOLD_Q objective but instances lack gold questions: {missing}")
        a_vocab = models.answer.vocab
        inputs = [answer_input(a_vocab, inst, None, mode) for inst in batch]
        targets = [tail_target(a_vocab, inst) for inst in batch]
        weights = [1.0 / len(batch)] * len(batch)
        grad_a, logps = models.answer.grad_weighted_log_prob(inputs, targets, weights)
        answer = models.answer.with_params(sgd_step(models.answer.params, grad_a, lr))
        stats = StepStats(kind.value, float(np.mean(logps)), None, 0)
        return ModelBundle(models.question, answer, models.search), stats

    if kind in OFF_POLICY_KINDS and models.search is None:
        raise ValueError(f"{kind.value} requires a frozen search model")
    sum_q = np.zeros_like(models.question.params)
    sum_a = np.zeros_like(models.answer.params)
    n_q = 0
    used = 0
    skipped = 0
    post_logpa = []
    ess_vals = []
    for inst in batch:
        try:
            pair, samples = instance_grads(spec, models, inst, rng)
        except DegeneratePosteriorError:
            skipped += 1
            continue
        used += 1
        if pair.grad_Q is not None:
            sum_q += pair.grad_Q
            n_q += 1
        sum_a += pair.grad_A
        post_logpa.append(sum(s.weight_phi * s.log_PA for s in samples))
        ess_vals.append(effective_sample_size(samples))
    if used == 0:
        stats = StepStats(kind.value, float("nan"), None, skipped)
        return models, stats
    question = models.question
    if n_q:
        question = question.with_params(sgd_step(question.params, sum_q / n_q, lr))
    answer = models.answer.with_params(sgd_step(models.answer.params, sum_a / used, lr))
    stats = StepStats(
        kind.value, float(np.mean(post_logpa)), float(np.mean(ess_vals)), skipped
    )
    return ModelBundle(question, answer, models.search), stats


# -- enumeration oracles ------------------------------------------------------
# Exact counterparts of the estimators above, used as diagnostics and test
# oracles on enumerable toy spaces. They share no arithmetic with the
# Monte-Carlo path beyond the models themselves.

def marginal_terms(
    models: ModelBundle, inst: REInstance, space: Sequence[tuple[int, ...]]
) -> tuple[np.ndarray, np.ndarray]:
    """(log_PQ, log_PA) arrays over an enumerated question space."""
    if not space:
        raise ValueError("empty question space")
    vocab = models.question.vocab
    q_in = question_input(vocab, inst)
    log_pq = models.question.log_prob_many([q_in] * len(space), list(space))
    a_vocab = models.answer.vocab
    target = tail_target(a_vocab, inst)
    a_inputs = [answer_input(a_vocab, inst, vocab.text(q)) for q in space]
    log_pa = models.answer.log_prob_many(a_inputs, [target] * len(space))
    return log_pq, log_pa


def exact_marginal(
    models: ModelBundle, inst: REInstance, space: Sequence[tuple[int, ...]]
) -> float:
    """log Σ_q P_Q(q) · P_A(e2|q) over the full enumerated space."""
    log_pq, log_pa = marginal_terms(models, inst, space)
    lw = log_pq + log_pa
    m = float(np.max(lw))
    return m + math.log(float(np.sum(np.exp(lw - m))))


def exact_posterior(
    models: ModelBundle, inst: REInstance, space: Sequence[tuple[int, ...]]
) -> list[QuestionSample]:
    """QuestionSamples over the whole space with the true posterior as weights."""
    log_pq, log_pa = marginal_terms(models, inst, space)
    samples = [
        QuestionSample(tuple(q), float(lq), float(lq), float(la))
        for q, lq, la in zip(space, log_pq, log_pa)
    ]
    return compute_phi(samples, "on_policy")


def exact_offpolicy_grads(
    models: ModelBundle, inst: REInstance, space: Sequence[tuple[int, ...]]
) -> GradPair:
    """Exact off-policy expectations: E_{q~S}[ (φ(q)/S(q)) ∇log(·) ] computed
    by enumeration over the support of S, with the importance ratio formed
    explicitly (multiply by S, divide by S) so the equivalence to the
    on-policy expectation is a real numerical check, not an identity."""
    if models.search is None:
        raise ValueError("off-policy expectation requires a search model")
    vocab = models.question.vocab
    log_pq, log_pa = marginal_terms(models, inst, space)
    s_in = search_input(vocab, inst)
    log_s = models.search.log_prob_many([s_in] * len(space), list(space))
    lz = log_pq + log_pa
    m = float(np.max(lz))
    log_Z = m + math.log(float(np.sum(np.exp(lz - m))))
    # weight under the S-expectation: S(q) · exp(log_PQ+log_PA−log_Z−log_S)
    w = np.exp(log_s) * np.exp(log_pq + log_pa - log_Z - log_s)
    q_in = question_input(vocab, inst)
    grad_q, _ = models.question.grad_weighted_log_prob(
        [q_in] * len(space), list(space), w
    )
    a_vocab = models.answer.vocab
    target = tail_target(a_vocab, inst)
    a_inputs = [answer_input(a_vocab, inst, vocab.text(q)) for q in space]
    grad_a, _ = models.answer.grad_weighted_log_prob(
        a_inputs, [target] * len(space), w
    )
    return GradPair(grad_A=grad_a, grad_Q=grad_q)


def _weight(s: QuestionSample) -> float:
    if s.weight_phi is None:
        raise ValueError("weight_phi not filled; run compute_phi first")
    return s.weight_phi
