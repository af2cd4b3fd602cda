"""Decoders over conditional sequence models: greedy, beam, nucleus sampling.

All scores are length-unnormalized sums of per-token log probabilities under
the model (mask and forced-EOS included). Ties break deterministically:
greedy prefers the lowest token id, beam orders by (higher score, then
lexicographically smaller id tuple).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .seqmodel import ConditionalSeqModel, MASK_LOGIT, log_softmax, validate_output
from .vocab import BOS_ID, EOS_ID


@dataclass(frozen=True)
class ScoredSequence:
    ids: tuple[int, ...]
    log_score: float


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for nucleus sampling and beam search during training/inference.

    ``max_len=None`` means "the model's own horizon", which is the only legal
    choice for nucleus sampling (the truncated proposal density is defined on
    the model's full sequence space).
    """

    p: float = 0.95
    n_samples: int = 8
    beam_size: int = 8
    max_len: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.p <= 1.0):
            raise ValueError(f"top-p must be in (0, 1], got {self.p}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def nucleus_indices(probs: np.ndarray, p: float) -> np.ndarray:
    """Smallest prefix of tokens (by descending probability, id breaking ties)
    whose cumulative mass reaches p. The top token is always included."""
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p, side="left"))
    return order[: min(k, len(probs) - 1) + 1]


def greedy(
    model: ConditionalSeqModel, input_ids: Sequence[int], max_len: int | None = None
) -> ScoredSequence:
    """Argmax token by token; ties go to the lowest token id."""
    horizon = _horizon(model, max_len)
    state = model.begin(input_ids, 1)
    ids: list[int] = []
    score = 0.0
    prev = BOS_ID
    for t in range(horizon):
        lp = log_softmax(model.step(state, [prev]))[0]
        tok = EOS_ID if t == horizon - 1 else int(np.argmax(lp))
        score += float(lp[tok])
        ids.append(tok)
        if tok == EOS_ID:
            break
        prev = tok
    return ScoredSequence(tuple(ids), score)


def beam_search(
    model: ConditionalSeqModel,
    input_ids: Sequence[int],
    beam_size: int = 8,
    max_len: int | None = None,
) -> list[ScoredSequence]:
    """Length-unnormalized beam search.

    At each step the top beam_size candidates (by running log-score, ties to
    lexicographically smaller ids) are selected; a selected candidate ending
    in EOS retires and its slot stays consumed, so the live beam shrinks as
    hypotheses finish and at most beam_size sequences are ever returned.
    With beam_size 1 this reduces exactly to greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    horizon = _horizon(model, max_len)
    state = model.begin(input_ids, 1)
    live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    prev = [BOS_ID]
    done: list[tuple[float, tuple[int, ...]]] = []
    for t in range(horizon):
        lp = log_softmax(model.step(state, prev))
        cands: list[tuple[float, tuple[int, ...], int]] = []
        for r, (score, ids) in enumerate(live):
            if t == horizon - 1:
                cands.append((score + float(lp[r, EOS_ID]), ids + (EOS_ID,), r))
                continue
            for tok in range(lp.shape[1]):
                step_lp = float(lp[r, tok])
                if step_lp <= MASK_LOGIT / 2:
                    continue
                cands.append((score + step_lp, ids + (tok,), r))
        cands.sort(key=lambda c: (-c[0], c[1]))
        new_live: list[tuple[float, tuple[int, ...]]] = []
        parents: list[int] = []
        for score, ids, r in cands:
            if len(done) + len(new_live) >= beam_size:
                break
            if ids[-1] == EOS_ID:
                done.append((score, ids))
            else:
                new_live.append((score, ids))
                parents.append(r)
        if not new_live:
            break
        live = new_live
        state = model.select_rows(state, parents)
        prev = [ids[-1] for _, ids in live]
    done.sort(key=lambda c: (-c[0], c[1]))
    return [ScoredSequence(ids, score) for score, ids in done[:beam_size]]


def top_p_sample(
    model: ConditionalSeqModel,
    input_ids: Sequence[int],
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> list[ScoredSequence]:
    """cfg.n_samples independent nucleus draws. log_score is the model's own
    (untruncated) log probability of the sampled sequence."""
    draws, _ = top_p_sample_with_density(model, input_ids, cfg, rng)
    return draws


def top_p_sample_with_density(
    model: ConditionalSeqModel,
    input_ids: Sequence[int],
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> tuple[list[ScoredSequence], np.ndarray]:
    """Nucleus draws plus each draw's log density under the truncated proposal.

    The second return value matches ``truncated_log_prob`` of each sequence
    (same nucleus rule and arithmetic, up to float rounding between batched
    and single-row forward passes).
    """
    if cfg.max_len is not None and cfg.max_len != model.max_len:
        raise ValueError(
            "nucleus sampling runs on the model's own horizon; "
            f"got max_len={cfg.max_len} for a model with max_len={model.max_len}"
        )
    if rng is None:
        rng = cfg.rng()
    n = cfg.n_samples
    state = model.begin(input_ids, n)
    alive = list(range(n))
    prev = [BOS_ID] * n
    ids: list[list[int]] = [[] for _ in range(n)]
    scores = np.zeros(n)
    tdens = np.zeros(n)
    for _ in range(model.max_len):
        if not alive:
            break
        lp = log_softmax(model.step(state, [prev[r] for r in alive]))
        probs = np.exp(lp)
        u = rng.random(len(alive))
        still = []
        for row, r in enumerate(alive):
            nuc = nucleus_indices(probs[row], cfg.p)
            mass = float(probs[row, nuc].sum())
            cum = np.cumsum(probs[row, nuc])
            j = min(int(np.searchsorted(cum, u[row] * mass, side="right")), len(nuc) - 1)
            tok = int(nuc[j])
            scores[r] += float(lp[row, tok])
            tdens[r] += float(lp[row, tok]) - math.log(mass)
            ids[r].append(tok)
            if tok != EOS_ID:
                prev[r] = tok
                still.append(row)
        state = model.select_rows(state, still)
        alive = [alive[row] for row in still]
    draws = [ScoredSequence(tuple(seq), float(s)) for seq, s in zip(ids, scores)]
    return draws, tdens


def truncated_log_prob(
    model: ConditionalSeqModel, input_ids: Sequence[int], seq: Sequence[int], p: float
) -> float:
    """Log density of ``seq`` under the top-p truncated (renormalized) model.

    -inf if any step of seq falls outside that step's nucleus. With p=1.0 this
    equals the model's own log_prob up to renormalization rounding.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError(f"top-p must be in (0, 1], got {p}")
    validate_output(seq, model.max_len)
    total = 0.0
    for t, tok in enumerate(seq):
        lp = log_softmax(model.next_logits(input_ids, seq[:t]))
        probs = np.exp(lp)
        nuc = nucleus_indices(probs, p)
        if tok not in nuc or probs[tok] == 0.0:
            return -math.inf
        mass = float(probs[nuc].sum())
        total += float(lp[tok]) - math.log(mass)
    return total


def _horizon(model: ConditionalSeqModel, max_len: int | None) -> int:
    if max_len is None:
        return model.max_len
    if not (1 <= max_len <= model.max_len):
        raise ValueError(f"max_len must be in [1, {model.max_len}], got {max_len}")
    return max_len
