"""Coupling terms between the two cascade models."""
from __future__ import annotations

import math

import numpy as np
import pytest

from pivotnmt.connection import (
    ConnectionMode,
    CouplingError,
    PT_PIVOT_TABLE,
    SP_PIVOT_TABLE,
    TieRecord,
    build_shared_vocab,
    connection_value_and_grads,
    enforce_hard_tie,
    evaluate_hard,
    likelihood_connection,
    likelihood_from_lists,
    soft_penalty,
)
from pivotnmt.decoding import pivot_id_map, remap_sentence, top_k_pivots
from pivotnmt.model import init_params, sentence_log_prob
from pivotnmt.numerics import log_sum_exp
from pivotnmt.vocab import Sentence, Vocabulary

from conftest import make_vocab


def cascade_pair(seed=0, n_src=2, n_piv=3, n_tgt=2, dim=3, piv_tokens=None):
    """Two models around one pivot language; equal pivot vocab by default."""
    pv = Vocabulary(piv_tokens) if piv_tokens else make_vocab(n_piv, "p")
    first = init_params(make_vocab(n_src, "s"), pv, dim, dim, [seed, 21])
    second = init_params(pv, make_vocab(n_tgt, "t"), dim, dim, [seed, 22])
    return first, second, pv


class TestConnectionMode:
    def test_defaults(self):
        m = ConnectionMode()
        assert (m.kind, m.k, m.bridge_batch) == ("none", 10, 4)

    def test_unknown_kind(self):
        with pytest.raises(CouplingError):
            ConnectionMode(kind="elastic")

    def test_bad_k_and_batch(self):
        with pytest.raises(CouplingError):
            ConnectionMode(kind="likelihood", k=0)
        with pytest.raises(CouplingError):
            ConnectionMode(kind="likelihood", bridge_batch=0)


class TestSharedVocab:
    def test_intersection(self):
        shared = build_shared_vocab(Vocabulary(["a", "b", "c"]), Vocabulary(["b", "c", "d"]))
        assert [e[0] for e in shared.entries] == ["b", "c"]

    def test_ids_point_into_each_vocab(self):
        va, vb = Vocabulary(["a", "b", "c"]), Vocabulary(["b", "c", "d"])
        shared = build_shared_vocab(va, vb)
        for tok, i_sp, i_pt in shared.entries:
            assert va.token_of(i_sp) == tok
            assert vb.token_of(i_pt) == tok

    def test_disjoint_empty(self):
        assert len(build_shared_vocab(Vocabulary(["a"]), Vocabulary(["b"]))) == 0

    def test_identical(self):
        v = Vocabulary(["x", "y", "z"])
        shared = build_shared_vocab(v, v)
        assert len(shared) == 3
        np.testing.assert_array_equal(shared.sp_ids, shared.pt_ids)

    def test_sorted_by_token(self):
        shared = build_shared_vocab(Vocabulary(["c", "a", "b"]), Vocabulary(["b", "c", "a"]))
        assert [e[0] for e in shared.entries] == ["a", "b", "c"]

    def test_include_reserved(self):
        shared = build_shared_vocab(Vocabulary(["a"]), Vocabulary(["b"]), include_reserved=True)
        assert len(shared) == 4
        assert shared.entries[0][0] == "<bos>"


class TestHardTie:
    def test_rows_copied_from_first_model(self):
        first, second, pv = cascade_pair(5)
        shared = build_shared_vocab(pv, pv)
        before = first.tensors[SP_PIVOT_TABLE].copy()
        record = enforce_hard_tie(first, second, shared)
        assert evaluate_hard(first, second, shared) == 1
        np.testing.assert_array_equal(first.tensors[SP_PIVOT_TABLE], before)
        for i_sp, i_pt in record.pairs:
            np.testing.assert_array_equal(
                second.tensors[PT_PIVOT_TABLE][i_pt], before[i_sp]
            )

    def test_tie_tags_set(self):
        first, second, pv = cascade_pair(1)
        enforce_hard_tie(first, second, build_shared_vocab(pv, pv))
        assert first.tie_tags[SP_PIVOT_TABLE] == "pivot-shared-rows"
        assert second.tie_tags[PT_PIVOT_TABLE] == "pivot-shared-rows"

    def test_empty_shared_no_tags(self):
        first, second, _ = cascade_pair(1)
        record = enforce_hard_tie(first, second, build_shared_vocab(
            Vocabulary(["q"]), Vocabulary(["r"])))
        assert record.pairs == ()
        assert first.tie_tags == {}

    def test_dim_mismatch(self):
        pv = make_vocab(2, "p")
        first = init_params(make_vocab(2, "s"), pv, 3, 3, 0)
        second = init_params(pv, make_vocab(2, "t"), 4, 4, 0)
        with pytest.raises(CouplingError):
            enforce_hard_tie(first, second, build_shared_vocab(pv, pv))

    def test_evaluate_detects_divergence(self):
        first, second, pv = cascade_pair(2)
        shared = build_shared_vocab(pv, pv)
        enforce_hard_tie(first, second, shared)
        second.tensors[PT_PIVOT_TABLE][shared.pt_ids[0], 0] += 1e-9
        assert evaluate_hard(first, second, shared) == 0

    def test_evaluate_empty_shared_passes(self):
        first, second, _ = cascade_pair(3)
        empty = build_shared_vocab(Vocabulary(["q"]), Vocabulary(["r"]))
        assert evaluate_hard(first, second, empty) == 1

    def test_record_round_trip(self):
        rec = TieRecord(((4, 5), (6, 4)), ("a", "b"))
        assert TieRecord.from_dict(rec.to_dict()) == rec


class TestSoftPenalty:
    def test_coincident_rows_zero(self):
        first, second, pv = cascade_pair(4)
        shared = build_shared_vocab(pv, pv)
        enforce_hard_tie(first, second, shared)
        pen = soft_penalty(first, second, shared)
        assert pen.value == 0.0
        assert not pen.grad_src_piv[SP_PIVOT_TABLE].any()
        assert not pen.grad_piv_tgt[PT_PIVOT_TABLE].any()

    def test_three_four_five_distance(self):
        first, second, pv = cascade_pair(6, piv_tokens=["w"], dim=2)
        shared = build_shared_vocab(pv, pv)
        i_sp, i_pt = shared.entries[0][1], shared.entries[0][2]
        first.tensors[SP_PIVOT_TABLE][i_sp] = [0.0, 0.0]
        second.tensors[PT_PIVOT_TABLE][i_pt] = [3.0, 4.0]
        pen = soft_penalty(first, second, shared)
        assert pen.value == -5.0
        np.testing.assert_allclose(pen.grad_src_piv[SP_PIVOT_TABLE][i_sp], [0.6, 0.8])
        np.testing.assert_allclose(pen.grad_piv_tgt[PT_PIVOT_TABLE][i_pt], [-0.6, -0.8])

    def test_additive_over_shared_words(self):
        first, second, pv = cascade_pair(7, piv_tokens=["u", "v"], dim=3)
        shared = build_shared_vocab(pv, pv)
        (u_sp, u_pt), (v_sp, v_pt) = [(e[1], e[2]) for e in shared.entries]
        first.tensors[SP_PIVOT_TABLE][u_sp] = [1.0, 0.0, 0.0]
        second.tensors[PT_PIVOT_TABLE][u_pt] = [0.0, 0.0, 0.0]
        first.tensors[SP_PIVOT_TABLE][v_sp] = [0.0, 2.0, 0.0]
        second.tensors[PT_PIVOT_TABLE][v_pt] = [0.0, 0.0, 0.0]
        assert soft_penalty(first, second, shared).value == -3.0

    def test_never_positive(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            first, second, pv = cascade_pair(seed, n_piv=4)
            first.tensors[SP_PIVOT_TABLE][:] = rng.normal(size=first.tensors[SP_PIVOT_TABLE].shape)
            second.tensors[PT_PIVOT_TABLE][:] = rng.normal(size=second.tensors[PT_PIVOT_TABLE].shape)
            shared = build_shared_vocab(pv, pv)
            assert soft_penalty(first, second, shared).value <= 0.0

    def test_zero_distance_pair_gets_zero_grad(self):
        first, second, pv = cascade_pair(8, piv_tokens=["u", "v"], dim=2)
        shared = build_shared_vocab(pv, pv)
        (u_sp, u_pt), (v_sp, v_pt) = [(e[1], e[2]) for e in shared.entries]
        second.tensors[PT_PIVOT_TABLE][u_pt] = first.tensors[SP_PIVOT_TABLE][u_sp]
        first.tensors[SP_PIVOT_TABLE][v_sp] = [1.0, 1.0]
        second.tensors[PT_PIVOT_TABLE][v_pt] = [0.0, 0.0]
        pen = soft_penalty(first, second, shared)
        assert not pen.grad_src_piv[SP_PIVOT_TABLE][u_sp].any()
        assert pen.grad_src_piv[SP_PIVOT_TABLE][v_sp].any()

    def test_dim_mismatch(self):
        pv = make_vocab(2, "p")
        first = init_params(make_vocab(2, "s"), pv, 3, 3, 0)
        second = init_params(pv, make_vocab(2, "t"), 4, 4, 0)
        with pytest.raises(CouplingError):
            soft_penalty(first, second, build_shared_vocab(pv, pv))


class TestLikelihoodFromLists:
    def test_single_candidate_is_sum_of_log_probs(self):
        first, second, pv = cascade_pair(9)
        x, y, z = Sentence.of((4,)), Sentence.of((4,)), Sentence.of((5, 4))
        res = likelihood_from_lists(first, second, [(x, y, [z])])
        id_map = pivot_id_map(first.tgt_vocab, second.src_vocab)
        expect = sentence_log_prob(first, x, z) + sentence_log_prob(
            second, remap_sentence(z, id_map), y
        )
        assert math.isclose(res.value, expect, abs_tol=1e-10)

    def test_candidates_remapped_between_vocabularies(self):
        # pivot vocabs share one surface token; ids differ across models
        pv_a = Vocabulary(["k", "m"])
        pv_b = Vocabulary(["m", "q"])
        first = init_params(make_vocab(2, "s"), pv_a, 3, 3, 1)
        second = init_params(pv_b, make_vocab(2, "t"), 3, 3, 2)
        x, y = Sentence.of((4,)), Sentence.of((5,))
        z = Sentence.of((pv_a.id_of("m"),))
        res = likelihood_from_lists(first, second, [(x, y, [z])])
        z_b = Sentence.of((pv_b.id_of("m"),))
        expect = sentence_log_prob(first, x, z) + sentence_log_prob(second, z_b, y)
        assert math.isclose(res.value, expect, abs_tol=1e-10)

    def test_weights_sum_to_one(self):
        first, second, pv = cascade_pair(10)
        x, y = Sentence.of((4, 5)), Sentence.of((4,))
        zs = [Sentence.of((4,)), Sentence.of((5,)), Sentence.of((4, 4))]
        res = likelihood_from_lists(first, second, [(x, y, zs)])
        for w in res.pair_weights:
            assert math.isclose(w.sum(), 1.0, abs_tol=1e-12)
            assert np.all(w >= 0)

    def test_value_is_mean_of_pair_values(self):
        first, second, pv = cascade_pair(11)
        items = [
            (Sentence.of((4,)), Sentence.of((4,)), [Sentence.of((4,)), Sentence.of((5,))]),
            (Sentence.of((5,)), Sentence.of((5,)), [Sentence.of((6,))]),
        ]
        res = likelihood_from_lists(first, second, items)
        assert math.isclose(res.value, np.mean(res.pair_values), abs_tol=1e-12)

    def test_pair_value_is_log_sum_exp_of_terms(self):
        first, second, pv = cascade_pair(12)
        x, y = Sentence.of((4,)), Sentence.of((5,))
        zs = [Sentence.of((4,)), Sentence.of((6, 5))]
        res = likelihood_from_lists(first, second, [(x, y, zs)])
        id_map = pivot_id_map(first.tgt_vocab, second.src_vocab)
        terms = [
            sentence_log_prob(first, x, z)
            + sentence_log_prob(second, remap_sentence(z, id_map), y)
            for z in zs
        ]
        assert math.isclose(res.pair_values[0], log_sum_exp(np.asarray(terms)), abs_tol=1e-10)

    def test_empty_items_rejected(self):
        first, second, _ = cascade_pair(0)
        with pytest.raises(CouplingError):
            likelihood_from_lists(first, second, [])

    def test_empty_candidate_list_rejected(self):
        first, second, _ = cascade_pair(0)
        with pytest.raises(CouplingError):
            likelihood_from_lists(first, second, [(Sentence.of((4,)), Sentence.of((4,)), [])])

    def test_grads_cover_all_tensors(self):
        first, second, _ = cascade_pair(13)
        res = likelihood_from_lists(
            first, second, [(Sentence.of((4,)), Sentence.of((4,)), [Sentence.of((5,))])]
        )
        assert set(res.grad_src_piv) == set(first.tensors)
        assert set(res.grad_piv_tgt) == set(second.tensors)

    def test_compute_grads_off(self):
        first, second, _ = cascade_pair(13)
        res = likelihood_from_lists(
            first, second,
            [(Sentence.of((4,)), Sentence.of((4,)), [Sentence.of((5,))])],
            compute_grads=False,
        )
        assert res.grad_src_piv == {} and res.grad_piv_tgt == {}


class TestLikelihoodConnection:
    def test_k1_uses_best_pivot(self):
        from pivotnmt.model import score_rows

        first, second, pv = cascade_pair(14)
        x, y = Sentence.of((4, 5)), Sentence.of((4,))
        res = likelihood_connection(first, second, [(x, y)], k=1, max_len=2)
        z = top_k_pivots(first, x, 1, 2)[0].sentence()
        id_map = pivot_id_map(first.tgt_vocab, second.src_vocab)
        lp1 = float(score_rows(first, [x], [z]).value[0])
        lp2 = float(score_rows(second, [remap_sentence(z, id_map)], [y]).value[0])
        assert math.isclose(res.value, lp1 + lp2, abs_tol=1e-10)
        assert res.skipped == 0

    def test_value_non_decreasing_in_k(self):
        first, second, pv = cascade_pair(15)
        batch = [(Sentence.of((4,)), Sentence.of((5,))), (Sentence.of((5, 4)), Sentence.of((4,)))]
        values = [
            likelihood_connection(first, second, batch, k=k, max_len=2).value
            for k in (1, 2, 4, 8)
        ]
        for a, b in zip(values, values[1:]):
            assert b >= a - 1e-12

    def test_empty_batch_rejected(self):
        first, second, _ = cascade_pair(0)
        with pytest.raises(CouplingError):
            likelihood_connection(first, second, [], k=2, max_len=2)

    def test_bad_k_rejected(self):
        first, second, _ = cascade_pair(0)
        with pytest.raises(CouplingError):
            likelihood_connection(
                first, second, [(Sentence.of((4,)), Sentence.of((4,)))], k=0, max_len=2
            )


class TestDispatch:
    def test_none_and_hard_contribute_nothing(self):
        first, second, pv = cascade_pair(16)
        shared = build_shared_vocab(pv, pv)
        for kind in ("none", "hard"):
            value, g1, g2 = connection_value_and_grads(
                ConnectionMode(kind=kind), first, second, shared, None, 5
            )
            assert (value, g1, g2) == (0.0, {}, {})

    def test_soft_matches_direct_call(self):
        first, second, pv = cascade_pair(17)
        shared = build_shared_vocab(pv, pv)
        value, g1, g2 = connection_value_and_grads(
            ConnectionMode(kind="soft"), first, second, shared, None, 5
        )
        pen = soft_penalty(first, second, shared)
        assert value == pen.value
        np.testing.assert_array_equal(g1[SP_PIVOT_TABLE], pen.grad_src_piv[SP_PIVOT_TABLE])

    def test_soft_requires_shared(self):
        first, second, _ = cascade_pair(0)
        with pytest.raises(CouplingError):
            connection_value_and_grads(
                ConnectionMode(kind="soft"), first, second, None, None, 5
            )

    def test_likelihood_requires_bridge(self):
        first, second, pv = cascade_pair(0)
        shared = build_shared_vocab(pv, pv)
        for bridge in (None, []):
            with pytest.raises(CouplingError):
                connection_value_and_grads(
                    ConnectionMode(kind="likelihood"), first, second, shared, bridge, 5
                )

    def test_likelihood_matches_direct_call(self):
        first, second, pv = cascade_pair(18)
        bridge = [(Sentence.of((4,)), Sentence.of((5,)))]
        mode = ConnectionMode(kind="likelihood", k=2)
        value, g1, g2 = connection_value_and_grads(mode, first, second, None, bridge, 2)
        direct = likelihood_connection(first, second, bridge, k=2, max_len=2)
        assert value == direct.value
        for name in g1:
            np.testing.assert_array_equal(g1[name], direct.grad_src_piv[name])
