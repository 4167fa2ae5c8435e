"""Exact top-k sequence search and two-step pivoted translation.

``beam_search`` runs a best-first (uniform-cost) enumeration of the prefix
tree: log-probabilities only decrease along extensions, so the i-th
terminated sequence popped is the globally i-th best within the length
bound. The returned list is therefore the true top-``beam`` of the model,
sorted by descending log-probability with lexicographic tie-breaking, and
the top-k' list for any k' < k is a literal prefix of the top-k list.

A hypothesis may be the bare EOS sequence (empty content). Continuations
range over every non-EOS vocabulary id -- the model assigns probability to
reserved ids too, and the search space must match the exact-marginal
enumeration exactly.
"""
from __future__ import annotations

import bisect
import heapq
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import DecoderSession, ParameterSet
from .vocab import BOS, EOS, Sentence, Vocabulary

__all__ = [
    "DecodeError",
    "Hypothesis",
    "beam_search",
    "top_k_pivots",
    "translate_pivoted",
    "TranslationResult",
    "pivot_id_map",
]

DEFAULT_EXPANSION_BUDGET = 100_000
_CHUNK = 16


class DecodeError(RuntimeError):
    """Decoding produced no usable hypothesis."""


@dataclass(frozen=True)
class Hypothesis:
    """One scored sequence; ``ids`` includes the terminal EOS when terminated."""

    ids: tuple[int, ...]
    log_prob: float
    terminated: bool

    def sentence(self) -> Sentence:
        if not self.terminated:
            raise DecodeError("cannot convert an unterminated hypothesis to a sentence")
        return Sentence(self.ids)


def beam_search(
    params: ParameterSet,
    x: Sentence,
    beam: int,
    max_len: int,
    *,
    expansion_budget: int = DEFAULT_EXPANSION_BUDGET,
) -> list[Hypothesis]:
    """Top-``beam`` EOS-terminated sequences with content length <= max_len.

    Scores are complete sentence log-probabilities; ties break toward the
    lexicographically smaller id sequence. Returns fewer than ``beam``
    hypotheses (possibly none) when the space within ``max_len`` is smaller
    or the expansion budget runs out.
    """
    if beam < 1:
        raise DecodeError(f"beam must be >= 1, got {beam}")
    if max_len < 0:
        raise DecodeError(f"max_len must be >= 0, got {max_len}")
    session = DecoderSession(params, x)
    n_vocab = len(params.tgt_vocab)

    # frontier entries: (neg log prob, content ids, decoder state)
    frontier: list[tuple[float, tuple[int, ...], np.ndarray]] = [
        (0.0, (), session.initial_state)
    ]
    # the beam best terminated entries so far, ascending; the last one is the
    # pruning bound once the list is full
    best: list[tuple[float, tuple[int, ...]]] = []
    pops = 0

    def record_finished(entry: tuple[float, tuple[int, ...]]) -> None:
        if len(best) < beam:
            bisect.insort(best, entry)
        elif entry < best[-1]:
            bisect.insort(best, entry)
            best.pop()

    def bound_key() -> tuple[float, tuple[int, ...]] | None:
        return best[-1] if len(best) == beam else None

    while frontier and pops < expansion_budget:
        cutoff = bound_key()
        if cutoff is not None and frontier[0][:2] >= cutoff:
            break
        chunk: list[tuple[float, tuple[int, ...], np.ndarray]] = []
        while frontier and len(chunk) < _CHUNK and pops < expansion_budget:
            if cutoff is not None and frontier[0][:2] >= cutoff:
                break
            chunk.append(heapq.heappop(frontier))
            pops += 1
        if not chunk:
            break
        states = np.stack([entry[2] for entry in chunk])
        prev = np.asarray(
            [entry[1][-1] if entry[1] else BOS for entry in chunk], dtype=np.intp
        )
        new_states, log_probs = session.step(states, prev)
        for row, (neg_lp, prefix, _) in enumerate(chunk):
            lp_row = log_probs[row]
            eos_lp = lp_row[EOS]
            if np.isfinite(eos_lp):
                record_finished((neg_lp - eos_lp, prefix + (EOS,)))
            if len(prefix) >= max_len:
                continue
            cutoff = bound_key()
            for tok in range(n_vocab):
                if tok == EOS or not np.isfinite(lp_row[tok]):
                    continue
                child = (neg_lp - lp_row[tok], prefix + (tok,))
                if cutoff is not None and child >= cutoff:
                    continue
                heapq.heappush(frontier, (child[0], child[1], new_states[row]))

    return [Hypothesis(ids, -neg_lp, True) for neg_lp, ids in best]


def top_k_pivots(
    params: ParameterSet, x: Sentence, k: int, max_len: int, *, beam: int | None = None
) -> list[Hypothesis]:
    """The k best pivot candidates for one source sentence (distinct, ranked)."""
    width = k if beam is None else beam
    if width < k:
        raise DecodeError(f"beam {width} cannot cover k={k}")
    return beam_search(params, x, width, max_len)[:k]


def pivot_id_map(producer_vocab: Vocabulary, consumer_vocab: Vocabulary) -> np.ndarray:
    """Id remap between two pivot vocabularies by token surface.

    Index i holds the consumer id of the producer's token i; reserved ids map
    to themselves and tokens missing from the consumer vocabulary map to UNK.
    """
    return np.asarray(
        [consumer_vocab.id_of(tok) if i >= 4 else i
         for i, tok in enumerate(producer_vocab.tokens)],
        dtype=np.intp,
    )


def remap_sentence(sentence: Sentence, id_map: np.ndarray) -> Sentence:
    return Sentence(tuple(int(id_map[i]) for i in sentence.ids))


@dataclass(frozen=True)
class TranslationResult:
    """Two-step decode: best pivot under the first model, best target given it."""

    pivot: Hypothesis
    target: Hypothesis

    @property
    def pivot_sentence(self) -> Sentence:
        return self.pivot.sentence()

    @property
    def target_sentence(self) -> Sentence:
        return self.target.sentence()


def translate_pivoted(
    src_piv: ParameterSet,
    piv_tgt: ParameterSet,
    x: Sentence,
    beam: int,
    max_len: int,
) -> TranslationResult:
    """Decode source -> pivot, feed the 1-best pivot in, decode pivot -> target.

    The pivot sequence is re-encoded from the first model's output vocabulary
    into the second model's input vocabulary by token surface (missing
    tokens become UNK).
    """
    pivots = beam_search(src_piv, x, beam, max_len)
    if not pivots:
        raise DecodeError("source-to-pivot search returned no terminated hypothesis")
    id_map = pivot_id_map(src_piv.tgt_vocab, piv_tgt.src_vocab)
    z = remap_sentence(pivots[0].sentence(), id_map)
    targets = beam_search(piv_tgt, z, beam, max_len)
    if not targets:
        raise DecodeError("pivot-to-target search returned no terminated hypothesis")
    return TranslationResult(pivots[0], targets[0])
