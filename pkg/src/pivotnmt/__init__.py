"""Pivot-based neural translation with jointly trained cascade models.

Two attention encoder-decoders (source-to-pivot and pivot-to-target) are
trained on independent parallel corpora that share only the pivot language.
A connection term couples them during training: tie the shared pivot
embeddings outright, penalize their distance, or maximize the marginal
likelihood of a small source-target bridge corpus through top scoring
pivot translations. Everything runs on a small reverse-mode autodiff core
over float64 numpy arrays, built for exactness and testability rather
than speed.
"""
from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, gradient_check
from .connection import (
    ConnectionMode,
    CouplingError,
    SharedPivotVocab,
    TieRecord,
    build_shared_vocab,
    connection_value_and_grads,
    enforce_hard_tie,
    evaluate_hard,
    likelihood_connection,
    likelihood_from_lists,
    soft_penalty,
)
from .corpus import (
    CorpusError,
    MappingSpec,
    ParallelCorpus,
    SynthTaskSpec,
    TokenMapping,
    TripleCorpus,
    build_vocab,
    generate_synth,
    load_text_corpus,
    load_triples,
    save_parallel,
    save_triples,
    split_overlap,
    subsample_bridge,
)
from .decoding import (
    DecodeError,
    Hypothesis,
    TranslationResult,
    beam_search,
    pivot_id_map,
    remap_sentence,
    top_k_pivots,
    translate_pivoted,
)
from .diagnostics import CheckResult, format_table, gradient_check_suite
from .evaluation import (
    BleuReport,
    CostPoint,
    EvalError,
    bleu,
    cascade_cost,
    eval_accuracy,
    exact_marginal,
    test_cost_curve,
)
from .experiments import (
    PipelineScores,
    bridge_ablation,
    evaluate_pipeline,
    pretrain_models,
    run_mode,
)
from .model import (
    CheckpointError,
    ModelError,
    ParameterSet,
    batch_loss_and_grads,
    init_params,
    load_checkpoint,
    save_checkpoint,
    score_rows,
    sentence_log_prob,
)
from .training import (
    DivergenceError,
    TrainConfig,
    TrainState,
    TrainError,
    clip_gradients,
    init_joint_state,
    joint_step,
    load_train_state,
    save_train_state,
    train_independent,
    train_joint,
)
from .vocab import BOS, EOS, PAD, UNK, RESERVED_TOKENS, Sentence, VocabError, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "ad",
    "BOS", "EOS", "UNK", "PAD", "RESERVED_TOKENS",
    "Sentence", "Vocabulary", "VocabError",
    "NonFiniteError", "ShapeError", "gradient_check",
    "ModelError", "CheckpointError", "ParameterSet", "init_params",
    "score_rows", "sentence_log_prob", "batch_loss_and_grads",
    "save_checkpoint", "load_checkpoint",
    "DecodeError", "Hypothesis", "TranslationResult", "beam_search",
    "top_k_pivots", "pivot_id_map", "remap_sentence", "translate_pivoted",
    "CouplingError", "ConnectionMode", "SharedPivotVocab", "TieRecord",
    "build_shared_vocab", "enforce_hard_tie", "evaluate_hard", "soft_penalty",
    "likelihood_from_lists", "likelihood_connection", "connection_value_and_grads",
    "CorpusError", "ParallelCorpus", "TripleCorpus", "MappingSpec",
    "TokenMapping", "SynthTaskSpec", "generate_synth", "split_overlap",
    "build_vocab", "load_text_corpus", "load_triples", "save_parallel",
    "save_triples", "subsample_bridge",
    "TrainError", "DivergenceError", "TrainConfig", "TrainState",
    "clip_gradients", "train_independent", "init_joint_state", "joint_step",
    "train_joint", "save_train_state", "load_train_state",
    "EvalError", "BleuReport", "bleu", "exact_marginal", "CostPoint",
    "cascade_cost", "test_cost_curve", "eval_accuracy",
    "CheckResult", "gradient_check_suite", "format_table",
    "PipelineScores", "pretrain_models", "run_mode", "evaluate_pipeline",
    "bridge_ablation",
    "__version__",
]
