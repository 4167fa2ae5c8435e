"""Shared builders for small deterministic fixtures."""
from __future__ import annotations

import numpy as np
import pytest

from pivotnmt.corpus import ParallelCorpus, TripleCorpus
from pivotnmt.model import ParameterSet, init_params
from pivotnmt.vocab import Sentence, Vocabulary


def make_vocab(n: int, prefix: str = "w") -> Vocabulary:
    return Vocabulary([f"{prefix}{i}" for i in range(n)])


def tiny_params(
    seed,
    n_src: int = 3,
    n_tgt: int = 3,
    dim: int = 3,
    src_prefix: str = "a",
    tgt_prefix: str = "b",
) -> ParameterSet:
    src = make_vocab(n_src, src_prefix)
    tgt = make_vocab(n_tgt, tgt_prefix)
    return init_params(src, tgt, dim, dim, seed)


def zeroed(params: ParameterSet) -> ParameterSet:
    out = params.copy()
    for t in out.tensors.values():
        t[...] = 0.0
    return out


def sentences(*content_lists) -> list[Sentence]:
    return [Sentence.of(c) for c in content_lists]


def pair_corpus(pairs, left_vocab, right_vocab) -> ParallelCorpus:
    return ParallelCorpus(
        tuple((Sentence.of(a), Sentence.of(b)) for a, b in pairs),
        left_vocab,
        right_vocab,
    )


def triple_corpus(triples, sv, pv, tv) -> TripleCorpus:
    return TripleCorpus(
        tuple(
            (Sentence.of(a), Sentence.of(b), Sentence.of(c))
            for a, b, c in triples
        ),
        sv, pv, tv,
    )


def params_equal(a: ParameterSet, b: ParameterSet) -> bool:
    if set(a.tensors) != set(b.tensors):
        return False
    return all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def max_param_diff(a: ParameterSet, b: ParameterSet) -> float:
    return max(
        float(np.max(np.abs(a.tensors[k] - b.tensors[k]))) for k in a.tensors
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
