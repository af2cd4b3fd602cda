import numpy as np
import pytest

from conftest import make_tiny_models
from latentq.decoding import (
    SamplerConfig,
    beam_search,
    greedy,
    nucleus_indices,
    top_p_sample,
    top_p_sample_with_density,
    truncated_log_prob,
)
from latentq.seqmodel import ScriptedSeqModel, TinySeq2Seq
from latentq.vocab import EOS_ID, Vocab, enumerate_sequences


@pytest.fixture
def vocab():
    return Vocab.build(["alpha", "beta", "gamma"])


@pytest.fixture
def model(vocab):
    return TinySeq2Seq(vocab, dim=6, max_len=3, seed=7, init_scale=0.4)


INP = (6, 7, EOS_ID)


def scripted_step_dist(vocab, probs_by_id: dict[int, float], max_len: int = 3):
    """A model emitting the same step distribution at every position."""
    vec = np.full(len(vocab), -1e9)
    for tid, p in probs_by_id.items():
        vec[tid] = np.log(p)
    return ScriptedSeqModel(vocab, lambda inp, prefix: vec, max_len=max_len)


class TestSamplerConfig:
    def test_defaults(self):
        cfg = SamplerConfig()
        assert (cfg.p, cfg.n_samples, cfg.beam_size) == (0.95, 8, 8)

    @pytest.mark.parametrize(
        "kwargs", [dict(p=0.0), dict(p=1.2), dict(n_samples=0), dict(beam_size=0)]
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            SamplerConfig(**kwargs)

    def test_rng_seeded(self):
        a = SamplerConfig(seed=5).rng().integers(0, 1000, 10)
        b = SamplerConfig(seed=5).rng().integers(0, 1000, 10)
        assert np.array_equal(a, b)


class TestNucleusIndices:
    def test_textbook_cut(self):
        probs = np.array([0.5, 0.3, 0.15, 0.05])
        assert sorted(nucleus_indices(probs, 0.95)) == [0, 1, 2]

    def test_always_contains_top_token(self):
        probs = np.array([0.9, 0.1])
        assert nucleus_indices(probs, 0.05).tolist() == [0]

    def test_p_one_keeps_everything(self):
        probs = np.array([0.25, 0.25, 0.25, 0.25])
        assert sorted(nucleus_indices(probs, 1.0)) == [0, 1, 2, 3]

    def test_tie_prefers_lower_id(self):
        probs = np.array([0.3, 0.4, 0.3])
        # 0.4 + one of the 0.3s reaches 0.7; the lower id breaks the tie
        assert sorted(nucleus_indices(probs, 0.7)) == [0, 1]

    def test_boundary_token_included(self):
        probs = np.array([0.6, 0.4])
        # cumulative reaches p exactly at the second token: it stays in
        assert sorted(nucleus_indices(probs, 1.0)) == [0, 1]


class TestGreedy:
    def test_point_mass_chain(self, vocab):
        plan = {(): 7, (7,): 6, (7, 6): EOS_ID}
        m = ScriptedSeqModel(vocab, lambda i, pre: plan.get(tuple(pre), EOS_ID), max_len=4)
        out = greedy(m, INP)
        assert out.ids == (7, 6, EOS_ID)
        assert out.log_score == pytest.approx(0.0, abs=1e-9)

    def test_uniform_ties_break_to_lowest_id(self, vocab):
        # EOS (id 2) is the lowest-id member of the support, so an all-ties
        # model stops immediately
        m = TinySeq2Seq(vocab, dim=4, max_len=4, seed=0)
        m = m.with_params(np.zeros_like(m.params))
        assert greedy(m, INP).ids == (EOS_ID,)

    def test_content_ties_repeat_first_content_token(self, vocab):
        # with EOS strictly dominated, ties among content tokens go to id 6,
        # repeated until EOS is forced at the horizon
        vec = np.full(len(vocab), -1e9)
        vec[EOS_ID] = -1.0
        for cid in vocab.content_ids:
            vec[cid] = 0.0
        m = ScriptedSeqModel(vocab, lambda i, pre: vec, max_len=4)
        assert greedy(m, INP).ids == (6, 6, 6, EOS_ID)

    def test_matches_beam_of_one(self, vocab):
        for seed in range(6):
            m = TinySeq2Seq(vocab, dim=6, max_len=3, seed=seed, init_scale=0.4)
            g = greedy(m, INP)
            b = beam_search(m, INP, 1)[0]
            assert g.ids == b.ids

    def test_score_is_model_log_prob(self, model):
        g = greedy(model, INP)
        assert g.log_score == pytest.approx(model.log_prob(INP, g.ids), abs=1e-9)


class TestBeam:
    def test_exhaustive_argmax(self, vocab):
        space = enumerate_sequences(vocab, 3)
        for seed in range(5):
            m = TinySeq2Seq(vocab, dim=6, max_len=3, seed=seed, init_scale=0.4)
            best = max(space, key=lambda s: (m.log_prob(INP, s), [-i for i in s]))
            assert beam_search(m, INP, len(space) + 2)[0].ids == best

    def test_point_mass_single_hypothesis(self, vocab):
        plan = {(): 8, (8,): EOS_ID}
        m = ScriptedSeqModel(vocab, lambda i, pre: plan.get(tuple(pre), EOS_ID), max_len=3)
        results = beam_search(m, INP, 4)
        assert results[0].ids == (8, EOS_ID)
        assert results[0].log_score == pytest.approx(0.0, abs=1e-9)

    def test_scores_non_increasing(self, model):
        results = beam_search(model, INP, 6)
        scores = [r.log_score for r in results]
        assert scores == sorted(scores, reverse=True)
        assert len(results) <= 6

    def test_monotone_in_beam_size(self, model):
        best = [beam_search(model, INP, k)[0].log_score for k in (1, 2, 4, 8, 16)]
        for a, b in zip(best, best[1:]):
            assert b >= a - 1e-12

    def test_scores_match_log_prob(self, model):
        for r in beam_search(model, INP, 5):
            assert r.log_score == pytest.approx(model.log_prob(INP, r.ids), abs=1e-9)


class TestTopPSample:
    def test_point_mass_all_identical(self, vocab):
        plan = {(): 7, (7,): EOS_ID}
        m = ScriptedSeqModel(vocab, lambda i, pre: plan.get(tuple(pre), EOS_ID), max_len=3)
        cfg = SamplerConfig(p=0.9, n_samples=16, seed=0)
        draws = top_p_sample(m, INP, cfg)
        assert len(draws) == 16
        assert all(d.ids == (7, EOS_ID) for d in draws)

    def test_out_of_nucleus_token_never_sampled(self, vocab):
        # ids: 2->EOS 0.5, 6->0.3, 7->0.15, 8->0.05; p=0.95 cuts id 8 out
        m = scripted_step_dist(vocab, {EOS_ID: 0.5, 6: 0.3, 7: 0.15, 8: 0.05})
        cfg = SamplerConfig(p=0.95, n_samples=2000, seed=1)
        for d in top_p_sample(m, INP, cfg):
            assert 8 not in d.ids

    def test_p_one_unigram_frequencies(self, vocab):
        m = scripted_step_dist(vocab, {EOS_ID: 0.5, 6: 0.3, 7: 0.2}, max_len=2)
        n = 10_000
        cfg = SamplerConfig(p=1.0, n_samples=n, seed=2)
        draws = top_p_sample(m, INP, cfg)
        first = np.array([d.ids[0] for d in draws])
        for tid, prob in ((EOS_ID, 0.5), (6, 0.3), (7, 0.2)):
            count = int((first == tid).sum())
            sigma = np.sqrt(n * prob * (1 - prob))
            assert abs(count - n * prob) <= 3 * sigma

    def test_log_score_is_untruncated_model_log_prob(self, model):
        cfg = SamplerConfig(p=0.8, n_samples=32, seed=3)
        for d in top_p_sample(model, INP, cfg):
            assert d.log_score == pytest.approx(model.log_prob(INP, d.ids), abs=1e-9)

    def test_seed_determinism(self, model):
        cfg = SamplerConfig(p=0.9, n_samples=10, seed=9)
        a = [d.ids for d in top_p_sample(model, INP, cfg)]
        b = [d.ids for d in top_p_sample(model, INP, cfg)]
        assert a == b

    def test_density_matches_truncated_log_prob(self, model):
        cfg = SamplerConfig(p=0.85, n_samples=24, seed=4)
        draws, dens = top_p_sample_with_density(model, INP, cfg)
        for d, ld in zip(draws, dens):
            assert ld == pytest.approx(truncated_log_prob(model, INP, d.ids, 0.85), abs=1e-9)
            assert np.isfinite(ld)


class TestTruncatedLogProb:
    def test_p_one_equals_log_prob(self, model):
        for seq in enumerate_sequences(model.vocab, 3):
            assert truncated_log_prob(model, INP, seq, 1.0) == pytest.approx(
                model.log_prob(INP, seq), abs=1e-9
            )

    def test_out_of_nucleus_is_minus_inf(self, vocab):
        m = scripted_step_dist(vocab, {EOS_ID: 0.5, 6: 0.3, 7: 0.15, 8: 0.05})
        assert truncated_log_prob(m, INP, (8, EOS_ID), 0.95) == -np.inf

    def test_normalizes_over_nucleus_support(self, model):
        total = 0.0
        for seq in enumerate_sequences(model.vocab, 3):
            lp = truncated_log_prob(model, INP, seq, 0.85)
            if np.isfinite(lp):
                total += np.exp(lp)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_in_nucleus_density_at_least_model_density(self, model):
        # renormalizing over a subset can only raise the probability
        for seq in enumerate_sequences(model.vocab, 3):
            lp = truncated_log_prob(model, INP, seq, 0.85)
            if np.isfinite(lp):
                assert lp >= model.log_prob(INP, seq) - 1e-9
