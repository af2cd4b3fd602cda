"""latentq: zero-shot relation extraction by treating the question as a
latent variable — train a question generator and an answer generator jointly
by marginal likelihood, with optional off-policy proposals from a frozen
search module."""

from .vocab import Vocab, tokenize, enumerate_sequences
from .seqmodel import (
    ConditionalSeqModel,
    ScriptedSeqModel,
    TinySeq2Seq,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .decoding import (
    SamplerConfig,
    ScoredSequence,
    beam_search,
    greedy,
    top_p_sample,
    truncated_log_prob,
)
from .objectives import (
    ObjectiveKind,
    ObjectiveSpec,
    QuestionSample,
    compute_phi,
    exact_marginal,
    grad_A_G,
    grad_A_MML,
    grad_Q_MML,
    train_step,
)
from .pipeline import (
    ModelBundle,
    PromptKind,
    REInstance,
    classify_relation,
    format_prompt,
    generate_tail,
    score_relation,
)
from .datakit import (
    FoldSpec,
    QAPretrainExample,
    ToyWorldConfig,
    augment_negatives,
    gen_toy_world,
    load_dataset,
    make_pseudo_question,
    synthesize_q_pretrain,
)
from .metrics import TEMetrics, ZREMetrics, perplexity, te_score, zre_score

__version__ = "0.1.0"

__all__ = [
    "Vocab", "tokenize", "enumerate_sequences",
    "ConditionalSeqModel", "ScriptedSeqModel", "TinySeq2Seq",
    "load_checkpoint", "save_checkpoint", "sgd_step",
    "SamplerConfig", "ScoredSequence", "beam_search", "greedy",
    "top_p_sample", "truncated_log_prob",
    "ObjectiveKind", "ObjectiveSpec", "QuestionSample", "compute_phi",
    "exact_marginal", "grad_A_G", "grad_A_MML", "grad_Q_MML", "train_step",
    "ModelBundle", "PromptKind", "REInstance", "classify_relation",
    "format_prompt", "generate_tail", "score_relation",
    "FoldSpec", "QAPretrainExample", "ToyWorldConfig", "augment_negatives",
    "gen_toy_world", "load_dataset", "make_pseudo_question", "synthesize_q_pretrain",
    "TEMetrics", "ZREMetrics", "perplexity", "te_score", "zre_score",
    "__version__",
]
