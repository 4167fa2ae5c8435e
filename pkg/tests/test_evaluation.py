"""Corpus BLEU, exact pivot marginals, and cascaded test cost."""
from __future__ import annotations

import math

import numpy as np
import pytest

from pivotnmt.connection import likelihood_connection
from pivotnmt.evaluation import (
    CostPoint,
    EvalError,
    bleu,
    cascade_cost,
    eval_accuracy,
    exact_marginal,
)
from pivotnmt.evaluation import test_cost_curve as cost_curve
from pivotnmt.model import DecoderSession, encode, init_params, step_distribution
from pivotnmt.training import (
    TrainConfig,
    init_joint_state,
    joint_step,
    save_train_state,
)
from pivotnmt.vocab import BOS, EOS, Sentence, Vocabulary

from conftest import make_vocab, triple_corpus


class TestBleu:
    def test_identity_is_100(self):
        # four-gram counts need sentences of length >= 4
        hyps = [["the", "cat", "sat", "down"], ["a", "dog", "ran", "far", "away"]]
        report = bleu(hyps, hyps)
        assert report.score == 100.0
        assert report.precisions == (1.0, 1.0, 1.0, 1.0)
        assert report.brevity_penalty == 1.0

    def test_identity_without_four_grams_is_zero(self):
        # multi-bleu semantics: no smoothing, so a missing order zeroes the score
        hyps = [["the", "cat"]]
        assert bleu(hyps, hyps).score == 0.0

    def test_short_hypothesis_hand_case(self):
        report = bleu([["the", "cat"]], [["the", "cat", "sat"]])
        assert report.precisions[0] == 1.0
        assert report.precisions[1] == 1.0
        assert report.precisions[2] == 0.0
        assert report.precisions[3] == 0.0
        assert math.isclose(report.brevity_penalty, math.exp(1.0 - 3.0 / 2.0), abs_tol=1e-12)
        assert report.score == 0.0
        assert report.hyp_length == 2 and report.ref_length == 3

    def test_case_folding(self):
        hyp = [["The", "CAT", "Sat", "DOWN"]]
        ref = [["the", "cat", "sat", "down"]]
        assert bleu(hyp, ref, case_insensitive=True).score == 100.0
        assert bleu(hyp, ref).precisions[0] == 0.0

    def test_clipping(self):
        report = bleu([["a", "a", "a"]], [["a", "a"]])
        assert math.isclose(report.precisions[0], 2.0 / 3.0, abs_tol=1e-12)
        assert math.isclose(report.precisions[1], 1.0 / 2.0, abs_tol=1e-12)
        assert report.precisions[2] == 0.0
        assert report.brevity_penalty == 1.0  # hypothesis longer than reference
        assert report.score == 0.0

    def test_positive_score_hand_computed(self):
        report = bleu([["a", "b", "c", "d", "x"]], [["a", "b", "c", "d", "y"]])
        np.testing.assert_allclose(
            report.precisions, (4 / 5, 3 / 4, 2 / 3, 1 / 2), atol=1e-12
        )
        expect = 100.0 * math.exp(
            sum(math.log(p) for p in (4 / 5, 3 / 4, 2 / 3, 1 / 2)) / 4.0
        )
        assert math.isclose(report.score, expect, abs_tol=1e-9)

    def test_corpus_level_pools_counts(self):
        # corpus BLEU aggregates n-gram counts, it does not average scores
        hyps = [["a", "b"], ["c"]]
        refs = [["a", "b"], ["d"]]
        report = bleu(hyps, refs)
        assert math.isclose(report.precisions[0], 2.0 / 3.0, abs_tol=1e-12)

    def test_pair_order_invariance(self):
        hyps = [["a", "b"], ["c", "d", "e"], ["f"]]
        refs = [["a", "x"], ["c", "d", "y"], ["f"]]
        fwd = bleu(hyps, refs)
        rev = bleu(hyps[::-1], refs[::-1])
        assert fwd == rev

    def test_never_above_100(self):
        cases = [
            ([["a"]], [["a"]]),
            ([["a", "b", "c", "d", "e"]], [["a", "b", "c", "d"]]),
            ([["a", "a", "a", "a", "a"]], [["a", "b", "c", "d", "e"]]),
        ]
        for hyps, refs in cases:
            assert bleu(hyps, refs).score <= 100.0

    def test_imperfect_below_100(self):
        score = bleu([["a", "b", "c", "d", "x"]], [["a", "b", "c", "d", "y"]]).score
        assert 0.0 < score < 100.0

    def test_empty_hypothesis_corpus_rejected(self):
        with pytest.raises(EvalError):
            bleu([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(EvalError):
            bleu([["a"]], [["a"], ["b"]])

    def test_all_empty_hypotheses_zero(self):
        report = bleu([[]], [["a"]])
        assert report.score == 0.0
        assert report.brevity_penalty == 0.0

    def test_format_lines(self):
        lines = bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d"]]).format_lines()
        assert lines[0] == "bleu 100.0000"
        assert lines[1].startswith("precision_1 ")
        assert lines[-2:] == ["hyp_length 4", "ref_length 4"]


def micro_cascade(seed=0, n_piv=2, dim=3):
    pv = make_vocab(n_piv, "p")
    first = init_params(make_vocab(2, "s"), pv, dim, dim, [seed, 21])
    second = init_params(pv, make_vocab(2, "t"), dim, dim, [seed, 22])
    return first, second


def stepwise_log_prob(params, x: Sentence, y: Sentence) -> float:
    """Independent scorer: per-step distributions multiplied by hand."""
    ann = encode(params, x)
    state = DecoderSession(params, x).initial_state
    lp = 0.0
    prev = BOS
    for tok in y.ids:
        state, probs = step_distribution(params, state, prev, ann)
        lp += math.log(probs[tok])
        prev = tok
    return lp


class TestExactMarginal:
    def test_hand_enumeration_tiny_space(self):
        # 2 content pivot tokens -> 6 ids, 5 non-EOS; max_len 1 -> 6 sequences
        first, second = micro_cascade(3)
        x, y = Sentence.of((4,)), Sentence.of((5,))
        alphabet = [i for i in range(6) if i != EOS]
        candidates = [Sentence.of(())] + [Sentence.of((a,)) for a in alphabet]
        terms = []
        for z in candidates:
            terms.append(stepwise_log_prob(first, x, z) + stepwise_log_prob(second, z, y))
        expect = float(np.logaddexp.reduce(terms))
        got = exact_marginal(first, second, x, y, max_len=1)
        assert math.isclose(got, expect, abs_tol=1e-10)

    def test_non_decreasing_in_max_len(self):
        first, second = micro_cascade(4)
        x, y = Sentence.of((4, 5)), Sentence.of((4,))
        values = [exact_marginal(first, second, x, y, max_len=m) for m in range(4)]
        for a, b in zip(values, values[1:]):
            assert b >= a

    def test_upper_bounds_topk_approximation(self):
        first, second = micro_cascade(5)
        x, y = Sentence.of((4,)), Sentence.of((5,))
        full = exact_marginal(first, second, x, y, max_len=2)
        for k in (1, 2, 5):
            approx = likelihood_connection(
                first, second, [(x, y)], k=k, max_len=2
            ).value
            assert approx <= full + 1e-10

    def test_full_k_equals_marginal(self):
        first, second = micro_cascade(6)
        x, y = Sentence.of((4,)), Sentence.of((4,))
        max_len = 2
        space = 1 + 5 + 25  # non-EOS alphabet of 5, lengths 0..2
        full = exact_marginal(first, second, x, y, max_len=max_len)
        approx = likelihood_connection(
            first, second, [(x, y)], k=space, max_len=max_len
        ).value
        assert math.isclose(approx, full, abs_tol=1e-10)

    def test_guard_rejects_huge_spaces(self):
        pv = make_vocab(60, "p")
        first = init_params(make_vocab(2, "s"), pv, 3, 3, 0)
        second = init_params(pv, make_vocab(2, "t"), 3, 3, 1)
        with pytest.raises(EvalError):
            exact_marginal(first, second, Sentence.of((4,)), Sentence.of((4,)), max_len=4)

    def test_negative_max_len_rejected(self):
        first, second = micro_cascade(0)
        with pytest.raises(EvalError):
            exact_marginal(first, second, Sentence.of((4,)), Sentence.of((4,)), max_len=-1)


def tiny_triples():
    sv, pv, tv = make_vocab(3, "s"), make_vocab(3, "p"), make_vocab(3, "t")
    rows = [((4,), (5,), (6,)), ((5, 6), (4, 4), (5,)), ((6,), (6,), (4, 5))]
    return triple_corpus(rows, sv, pv, tv)


class TestCascadeCost:
    def test_additivity(self):
        triples = tiny_triples()
        first = init_params(triples.src_vocab, triples.piv_vocab, 3, 3, 1)
        second = init_params(triples.piv_vocab, triples.tgt_vocab, 3, 3, 2)
        point = cascade_cost(first, second, triples)
        assert point.cost_total == point.cost_src_pivot + point.cost_pivot_target
        assert point.cost_src_pivot > 0 and point.cost_pivot_target > 0

    def test_mean_over_triples(self):
        from pivotnmt.model import sentence_log_prob

        triples = tiny_triples()
        first = init_params(triples.src_vocab, triples.piv_vocab, 3, 3, 1)
        second = init_params(triples.piv_vocab, triples.tgt_vocab, 3, 3, 2)
        point = cascade_cost(first, second, triples)
        lp1 = np.mean([
            sentence_log_prob(first, x, z) for x, z, _ in triples.triples
        ])
        assert math.isclose(point.cost_src_pivot, -lp1, abs_tol=1e-10)

    def test_empty_rejected(self):
        triples = tiny_triples()
        first = init_params(triples.src_vocab, triples.piv_vocab, 3, 3, 1)
        second = init_params(triples.piv_vocab, triples.tgt_vocab, 3, 3, 2)
        empty = triple_corpus([], triples.src_vocab, triples.piv_vocab, triples.tgt_vocab)
        with pytest.raises(EvalError):
            cascade_cost(first, second, empty)

    def test_curve_over_snapshots(self, tmp_path):
        from conftest import pair_corpus

        triples = tiny_triples()
        first_corpus = pair_corpus(
            [((4,), (5,)), ((5,), (4,))], triples.src_vocab, triples.piv_vocab
        )
        second_corpus = pair_corpus(
            [((5,), (6,)), ((4,), (4,))], triples.piv_vocab, triples.tgt_vocab
        )
        cfg = TrainConfig(
            embedding_dim=3, hidden_dim=3, batch_first=2, batch_second=2,
            max_iterations=2, eval_interval=1, max_len=4,
        )
        state = init_joint_state(first_corpus, second_corpus, cfg)
        manifests = []
        snap0 = save_train_state(state, cfg, tmp_path / "it0")
        manifests.append(snap0)
        state, _ = joint_step(state, first_corpus, second_corpus, None, cfg)
        manifests.append(save_train_state(state, cfg, tmp_path / "it1"))

        points = cost_curve(manifests, triples)
        assert [p.iteration for p in points] == [0, 1]
        direct = cascade_cost(state.src_piv, state.piv_tgt, triples)
        assert math.isclose(points[1].cost_total, direct.cost_total, abs_tol=1e-12)

    def test_identical_snapshots_identical_points(self, tmp_path):
        from conftest import pair_corpus

        triples = tiny_triples()
        first_corpus = pair_corpus([((4,), (5,))], triples.src_vocab, triples.piv_vocab)
        second_corpus = pair_corpus([((5,), (6,))], triples.piv_vocab, triples.tgt_vocab)
        cfg = TrainConfig(
            embedding_dim=3, hidden_dim=3, batch_first=1, batch_second=1,
            max_iterations=0, eval_interval=1, max_len=4,
        )
        state = init_joint_state(first_corpus, second_corpus, cfg)
        a = save_train_state(state, cfg, tmp_path / "a")
        b = save_train_state(state, cfg, tmp_path / "b")
        pa, pb = cost_curve([a, b], triples)
        assert pa == pb


class TestAccuracy:
    def test_rates(self):
        refs = [["a"], ["b", "c"]]
        assert eval_accuracy(refs, refs) == 1.0
        assert eval_accuracy([["x"], ["y"]], refs) == 0.0
        assert eval_accuracy([["a"], ["y"]], refs) == 0.5

    def test_mismatch_rejected(self):
        with pytest.raises(EvalError):
            eval_accuracy([["a"]], [])
        with pytest.raises(EvalError):
            eval_accuracy([], [])
