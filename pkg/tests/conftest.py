"""Shared fixtures and oracle helpers for the test suite."""
from __future__ import annotations

import numpy as np
import pytest

from latentq.objectives import QuestionSample, compute_phi, exact_posterior
from latentq.pipeline import REInstance
from latentq.seqmodel import TinySeq2Seq
from latentq.vocab import Vocab, enumerate_sequences


TINY_TOKENS = ("alpha", "beta", "gamma", "delta", "eps")


@pytest.fixture
def tiny_vocab() -> Vocab:
    return Vocab.build(TINY_TOKENS)


def make_tiny_models(
    vocab: Vocab,
    dim: int = 6,
    q_max_len: int = 3,
    a_max_len: int = 3,
    seed: int = 0,
    init_scale: float = 0.4,
) -> tuple[TinySeq2Seq, TinySeq2Seq]:
    """A small random question model and answer model over a shared vocab.

    init_scale well above the default keeps the distributions non-uniform so
    argmax/ordering tests are not run on near-ties.
    """
    q = TinySeq2Seq(vocab, dim=dim, max_len=q_max_len, seed=seed, init_scale=init_scale)
    a = TinySeq2Seq(vocab, dim=dim, max_len=a_max_len, seed=seed + 1, init_scale=init_scale)
    return q, a


def make_instance(vocab: Vocab, seed: int = 0, negative: bool = False) -> REInstance:
    """Random instance whose fields are drawn from the vocab's content tokens."""
    rng = np.random.default_rng(seed)
    toks = [vocab.token(i) for i in vocab.content_ids]
    pick = lambda: toks[rng.integers(len(toks))]
    return REInstance(
        context=f"{pick()} {pick()} {pick()}",
        head=pick(),
        relation=pick(),
        description="",
        tail=None if negative else pick(),
    )


def enumeration_samples(models, inst, space, mode: str = "on_policy") -> list[QuestionSample]:
    """QuestionSamples covering an entire enumerable question space.

    on_policy: weight_phi is the exact posterior (the no-sampling-error limit
    of the on-policy estimator). off_policy: log_S is replaced by the frozen
    search density and the weights renormalized with the off-policy formula —
    useful for weight-mechanics tests, but NOT an exact-gradient oracle (the
    enumeration is not S-distributed; use exact_offpolicy_grads for that)."""
    samples = exact_posterior(models, inst, space)
    if mode == "on_policy":
        return samples
    s_in = _search_in(models, inst)
    off = [
        QuestionSample(
            seq=s.seq,
            log_S=float(models.search.log_prob(s_in, s.seq)),
            log_PQ=s.log_PQ,
            log_PA=s.log_PA,
        )
        for s in samples
    ]
    return compute_phi(off, "off_policy")


def _search_in(models, inst):
    from latentq.pipeline import search_input

    return search_input(models.question.vocab, inst)


def finite_diff(f, params: np.ndarray, coords: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function of a flat param vector."""
    out = np.zeros(len(coords))
    for j, c in enumerate(coords):
        up, dn = params.copy(), params.copy()
        up[c] += h
        dn[c] -= h
        out[j] = (f(up) - f(dn)) / (2 * h)
    return out


def question_space(vocab: Vocab, max_len: int) -> list[tuple[int, ...]]:
    return enumerate_sequences(vocab, max_len)


def template_oracles(vocab: Vocab, rels) -> "ModelBundle":
    """Point-mass scripted models implementing a toy world's own templates:
    the question rule reads (e1, wh) off the question prompt and emits the
    canonical gold question; the answer rule reads (e1, verb) off the decoded
    question and copies the matching fact's tail from the context (or the
    null marker when the fact is absent)."""
    from latentq.pipeline import ModelBundle
    from latentq.seqmodel import ScriptedSeqModel
    from latentq.vocab import NO_ANSWER_TOKEN, tokenize

    by_wh = {r.wh: r for r in rels}

    def q_rule(inp, pre):
        toks = vocab.text(tuple(inp)).split()
        target = tokenize(vocab, by_wh[toks[3]].question(toks[1]))
        return target[len(pre)]

    def a_rule(inp, pre):
        toks = vocab.text(tuple(inp)).split()
        q = toks[toks.index("question:") + 1 : toks.index("context:")]
        e1, verb = q[1], q[2]
        ctx = toks[toks.index("context:") + 1 :]
        tail = next(
            (ctx[i + 2] for i in range(len(ctx) - 2)
             if ctx[i] == e1 and ctx[i + 1] == verb),
            NO_ANSWER_TOKEN,
        )
        target = tokenize(vocab, tail)
        return target[len(pre)]

    return ModelBundle(
        ScriptedSeqModel(vocab, q_rule, max_len=8),
        ScriptedSeqModel(vocab, a_rule, max_len=8),
    )


def grad_close(
    approx: np.ndarray, exact: np.ndarray, rel: float = 1e-3, abs_tol: float = 1e-6
) -> np.ndarray:
    """Per-coordinate gradient agreement: relative error ≤ rel, with an
    absolute floor for near-zero derivatives (central differences carry
    ~1e-8 absolute noise, so a pure ratio is ill-defined at zero)."""
    diff = np.abs(approx - exact)
    return (diff <= abs_tol) | (diff <= rel * np.abs(exact))
