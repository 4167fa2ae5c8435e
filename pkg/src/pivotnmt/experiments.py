"""End-to-end experiment drivers shared by the command line and the tests.

The canonical protocol: train both models independently to a loss plateau,
then continue jointly under a chosen connection from that shared starting
point. Because every random draw comes from a named stream, two runs that
differ only in the connection see identical initializations and identical
batch sequences, which makes mode comparisons controlled experiments.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .corpus import ParallelCorpus, TripleCorpus, subsample_bridge
from .decoding import (
    DecodeError,
    beam_search,
    pivot_id_map,
    remap_sentence,
    translate_pivoted,
)
from .evaluation import bleu, cascade_cost, eval_accuracy
from .model import ParameterSet
from .training import TrainConfig, init_joint_state, train_independent, train_joint

__all__ = [
    "PipelineScores",
    "pretrain_models",
    "run_mode",
    "evaluate_pipeline",
    "bridge_ablation",
]

DEFAULT_BEAM = 4


@dataclass(frozen=True)
class PipelineScores:
    """BLEU for each cascade stage plus exact-match accuracy end to end."""

    bleu_src_piv: float
    bleu_piv_tgt: float
    bleu_src_tgt: float
    accuracy_src_tgt: float


def pretrain_models(
    first_corpus: ParallelCorpus,
    second_corpus: ParallelCorpus,
    config: TrainConfig,
) -> tuple[ParameterSet, ParameterSet]:
    """Independent training of both models to a loss plateau."""
    first, _ = train_independent(
        first_corpus, config, role="first", stop_on_plateau=True
    )
    second, _ = train_independent(
        second_corpus, config, role="second", stop_on_plateau=True
    )
    return first, second


def run_mode(
    first_corpus: ParallelCorpus,
    second_corpus: ParallelCorpus,
    bridge_corpus: ParallelCorpus | None,
    config: TrainConfig,
    *,
    initial: tuple[ParameterSet, ParameterSet] | None = None,
    test_triples: TripleCorpus | None = None,
    out_dir=None,
) -> tuple[ParameterSet, ParameterSet, list[dict]]:
    """Joint training under ``config.mode``, optionally from given parameters.

    With ``test_triples`` every metrics record carries the cascaded test
    cost at that point, which is what the learning-curve comparison plots.
    """
    state = init_joint_state(
        first_corpus, second_corpus, config,
        initial_first=initial[0] if initial is not None else None,
        initial_second=initial[1] if initial is not None else None,
    )
    test_cost_fn = None
    if test_triples is not None:
        test_cost_fn = lambda a, b: cascade_cost(a, b, test_triples).cost_total
    return train_joint(
        first_corpus, second_corpus, bridge_corpus, config,
        state=state, test_cost_fn=test_cost_fn, out_dir=out_dir,
    )


def _decode_or_empty(params: ParameterSet, sentence, beam: int, max_len: int):
    hyps = beam_search(params, sentence, beam, max_len)
    return hyps[0].sentence() if hyps else None


def evaluate_pipeline(
    first: ParameterSet,
    second: ParameterSet,
    triples: TripleCorpus,
    beam: int = DEFAULT_BEAM,
    max_len: int = 50,
) -> PipelineScores:
    """Decode every test triple and score all three directions.

    Source-to-pivot and source-to-target come from the two-step decode;
    pivot-to-target feeds the gold pivot in directly. A search that
    terminates nothing scores as an empty hypothesis rather than failing
    the whole evaluation.
    """
    hyp_piv: list[list[str]] = []
    hyp_tgt: list[list[str]] = []
    hyp_direct: list[list[str]] = []
    id_map = pivot_id_map(triples.piv_vocab, second.src_vocab)
    for x, z, _ in triples.triples:
        try:
            result = translate_pivoted(first, second, x, beam, max_len)
            hyp_piv.append(first.tgt_vocab.decode(result.pivot_sentence))
            hyp_tgt.append(second.tgt_vocab.decode(result.target_sentence))
        except DecodeError:
            hyp_piv.append([])
            hyp_tgt.append([])
        direct = _decode_or_empty(second, remap_sentence(z, id_map), beam, max_len)
        hyp_direct.append(second.tgt_vocab.decode(direct) if direct else [])

    ref_piv = [triples.piv_vocab.decode(z) for _, z, _ in triples.triples]
    ref_tgt = [triples.tgt_vocab.decode(y) for _, _, y in triples.triples]
    return PipelineScores(
        bleu_src_piv=bleu(hyp_piv, ref_piv).score,
        bleu_piv_tgt=bleu(hyp_direct, ref_tgt).score,
        bleu_src_tgt=bleu(hyp_tgt, ref_tgt).score,
        accuracy_src_tgt=eval_accuracy(hyp_tgt, ref_tgt),
    )


def bridge_ablation(
    first_corpus: ParallelCorpus,
    second_corpus: ParallelCorpus,
    bridge_pool: ParallelCorpus,
    test_triples: TripleCorpus,
    pretrain_config: TrainConfig,
    joint_config: TrainConfig,
    sizes: Sequence[int],
    *,
    beam: int = DEFAULT_BEAM,
    max_len: int = 50,
    out_dir=None,
) -> list[dict]:
    """Re-run likelihood-mode training across bridge sizes, scoring each.

    Pretraining happens once and every size starts from that same state;
    nested subsamples mean each larger bridge strictly contains the smaller
    ones. Size 0 trains with no connection signal at all, the unconnected
    reference point.
    """
    if sorted(sizes) != list(sizes):
        raise ValueError("sizes must be ascending")
    pretrained = pretrain_models(first_corpus, second_corpus, pretrain_config)
    rows: list[dict] = []
    for size in sizes:
        bridge = subsample_bridge(bridge_pool, size, joint_config.seed)
        config = joint_config
        if size == 0:
            config = replace(joint_config, mode=replace(joint_config.mode, kind="none"))
        first, second, _ = run_mode(
            first_corpus, second_corpus, bridge, config,
            initial=pretrained,
            out_dir=None if out_dir is None else f"{out_dir}/size_{size}",
        )
        scores = evaluate_pipeline(first, second, test_triples, beam, max_len)
        rows.append(
            {
                "size": size,
                "bleu_src_piv": scores.bleu_src_piv,
                "bleu_piv_tgt": scores.bleu_piv_tgt,
                "bleu_src_tgt": scores.bleu_src_tgt,
                "accuracy_src_tgt": scores.accuracy_src_tgt,
            }
        )
    return rows
