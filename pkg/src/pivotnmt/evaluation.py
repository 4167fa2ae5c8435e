"""Scoring: corpus BLEU, the exact latent-pivot marginal, cascaded costs.

BLEU reproduces the classic multi-bleu script arithmetic exactly: corpus
level clipped modified n-gram precisions up to order 4, brevity penalty
exp(1 - r/c) for c <= r, no smoothing, score 0 whenever any order has zero
matches, optional case folding. The marginal oracle exhaustively enumerates
every EOS-terminated pivot sequence up to a length bound, which grounds the
top-k approximation used during training.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoding import pivot_id_map, remap_sentence
from .model import ParameterSet, score_rows
from .numerics import log_sum_exp
from .vocab import EOS, Sentence, Vocabulary

__all__ = [
    "EvalError",
    "BleuReport",
    "bleu",
    "exact_marginal",
    "CostPoint",
    "cascade_cost",
    "test_cost_curve",
    "eval_accuracy",
]

MAX_ORDER = 4
ENUMERATION_GUARD = 10**6
_SCORE_CHUNK = 256


class EvalError(ValueError):
    """Invalid evaluation input."""


@dataclass(frozen=True)
class BleuReport:
    """Corpus BLEU with its ingredients; score is on the 0..100 scale."""

    score: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int

    def format_lines(self) -> list[str]:
        lines = [f"bleu {self.score:.4f}"]
        for n, p in enumerate(self.precisions, start=1):
            lines.append(f"precision_{n} {p:.6f}")
        lines.append(f"brevity_penalty {self.brevity_penalty:.6f}")
        lines.append(f"hyp_length {self.hyp_length}")
        lines.append(f"ref_length {self.ref_length}")
        return lines


def _ngram_counts(tokens: Sequence[str], order: int) -> Counter:
    return Counter(
        tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1)
    )


def bleu(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    case_insensitive: bool = False,
) -> BleuReport:
    """Corpus-level BLEU against a single reference per hypothesis."""
    if len(hypotheses) == 0:
        raise EvalError("bleu: empty hypothesis set")
    if len(hypotheses) != len(references):
        raise EvalError(
            f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if case_insensitive:
        hypotheses = [[t.lower() for t in h] for h in hypotheses]
        references = [[t.lower() for t in r] for r in references]

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngram_counts(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in hyp_counts.items()
            )

    precisions = tuple(
        (m / t) if t > 0 else 0.0 for m, t in zip(matches, totals)
    )
    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = math.exp(1.0 - ref_len / hyp_len) if hyp_len <= ref_len else 1.0
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


# ---------------------------------------------------------------------------
# exact latent marginal


def _enumeration_size(alphabet: int, max_len: int) -> int:
    total = 0
    for length in range(0, max_len + 1):
        total += alphabet**length
        if total > ENUMERATION_GUARD:
            break
    return total


def exact_marginal(
    first: ParameterSet,
    second: ParameterSet,
    x: Sentence,
    y: Sentence,
    max_len: int,
) -> float:
    """Log of the full pivot sum: every terminated sequence up to max_len.

    The latent space is every sequence of non-EOS pivot ids (the bare
    terminator included) with content length at most ``max_len``; each is
    scored through both models and accumulated with log-sum-exp in
    enumeration order. Guarded against intractable spaces.
    """
    if max_len < 0:
        raise EvalError(f"max_len must be >= 0, got {max_len}")
    alphabet = [i for i in range(len(first.tgt_vocab)) if i != EOS]
    size = _enumeration_size(len(alphabet), max_len)
    if size > ENUMERATION_GUARD:
        raise EvalError(
            f"enumeration needs {size} sequences, over the {ENUMERATION_GUARD} guard"
        )
    id_map = pivot_id_map(first.tgt_vocab, second.src_vocab)

    candidates = []
    for length in range(0, max_len + 1):
        for combo in itertools.product(alphabet, repeat=length):
            candidates.append(Sentence.of(combo))

    terms: list[float] = []
    for start in range(0, len(candidates), _SCORE_CHUNK):
        chunk = candidates[start : start + _SCORE_CHUNK]
        lp1 = score_rows(first, [x], chunk, gather=[0] * len(chunk))
        remapped = [remap_sentence(z, id_map) for z in chunk]
        lp2 = score_rows(second, remapped, [y] * len(chunk))
        terms.extend((lp1.value + lp2.value).tolist())
    return log_sum_exp(np.asarray(terms))


# ---------------------------------------------------------------------------
# cascaded test cost


@dataclass(frozen=True)
class CostPoint:
    """Decomposed source-to-target cost at one training snapshot."""

    iteration: int
    cost_src_pivot: float
    cost_pivot_target: float

    @property
    def cost_total(self) -> float:
        return self.cost_src_pivot + self.cost_pivot_target


def cascade_cost(first: ParameterSet, second: ParameterSet, triples) -> CostPoint:
    """Mean negative log-likelihood of both cascade stages on gold triples.

    The gold pivot approximates the latent variable: the total is the mean
    over triples of -[log P(pivot | source) + log P(target | pivot)].
    """
    if len(triples) == 0:
        raise EvalError("cascade_cost: no triples")
    xs = [x for x, _, _ in triples.triples]
    zs = [z for _, z, _ in triples.triples]
    ys = [y for _, _, y in triples.triples]
    lp1 = score_rows(first, xs, zs)
    id_map = pivot_id_map(triples.piv_vocab, second.src_vocab)
    zs2 = [remap_sentence(z, id_map) for z in zs]
    lp2 = score_rows(second, zs2, ys)
    return CostPoint(
        iteration=0,
        cost_src_pivot=float(-np.mean(lp1.value)),
        cost_pivot_target=float(-np.mean(lp2.value)),
    )


def test_cost_curve(manifest_paths: Sequence, triples) -> list[CostPoint]:
    """Evaluate cascade_cost at each saved training snapshot."""
    from .training import load_train_state

    points = []
    for path in manifest_paths:
        state, _ = load_train_state(
            path,
            triples.src_vocab, triples.piv_vocab,
            triples.piv_vocab, triples.tgt_vocab,
        )
        cost = cascade_cost(state.src_piv, state.piv_tgt, triples)
        points.append(
            CostPoint(state.iteration, cost.cost_src_pivot, cost.cost_pivot_target)
        )
    return points


def eval_accuracy(
    hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]
) -> float:
    """Exact sequence match rate; a sharp metric for deterministic tasks."""
    if len(hypotheses) != len(references):
        raise EvalError(
            f"accuracy: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if len(hypotheses) == 0:
        raise EvalError("accuracy: empty hypothesis set")
    hits = sum(
        1 for h, r in zip(hypotheses, references) if list(h) == list(r)
    )
    return hits / len(hypotheses)
