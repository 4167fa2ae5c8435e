"""Gradient-fidelity suite shared by the command line and the test suite.

Every differentiable building block is checked against central finite
differences: each primitive op, the full teacher-forced sentence
likelihood, the soft embedding-distance penalty, and the bridge likelihood
with its candidate lists held fixed. Results carry their tolerance so the
caller only has to render them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .connection import (
    build_shared_vocab,
    likelihood_from_lists,
    soft_penalty,
)
from .model import ParameterSet, init_params, score_rows
from .vocab import Sentence, Vocabulary

__all__ = [
    "CheckResult",
    "gradient_check_suite",
    "format_table",
    "TOL_ELEMENTWISE",
    "TOL_LINALG",
    "TOL_SENTENCE",
    "TOL_SOFT",
    "TOL_LIKELIHOOD",
]

TOL_ELEMENTWISE = 1e-6
TOL_LINALG = 1e-5
TOL_SENTENCE = 1e-4
TOL_SOFT = 1e-5
TOL_LIKELIHOOD = 1e-3
FD_STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    """One named check: the worst relative error seen and its budget."""

    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _fd_max_rel_error(
    value_fn: Callable[[], float],
    arrays: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    step: float = FD_STEP,
) -> float:
    """Central-difference check for functions that report their own gradients.

    Mutates each array entry in place (restoring it), so ``value_fn`` must
    read the arrays afresh on every call.
    """
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = value_fn()
            flat[j] = orig - step
            f_minus = value_fn()
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[j] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# primitive op checks


def _op_checks(seed: int) -> list[CheckResult]:
    def rng(tag: int) -> np.random.Generator:
        return np.random.default_rng([seed, tag])

    results = []

    def check(name, tol, leaves, build):
        err = ad.gradient_check(build, leaves, step=FD_STEP)
        results.append(CheckResult(name, err, tol))

    a34 = rng(1).normal(size=(3, 4))
    b34 = rng(2).normal(size=(3, 4))
    b4 = rng(3).normal(size=4)

    check("op add", TOL_ELEMENTWISE, [a34, b34],
          lambda ls: ad.sum_all(ad.tanh(ad.add(ls[0], ls[1]))))
    check("op add broadcast", TOL_ELEMENTWISE, [a34, b4],
          lambda ls: ad.sum_all(ad.tanh(ad.add(ls[0], ls[1]))))
    check("op mul", TOL_ELEMENTWISE, [a34, b34],
          lambda ls: ad.sum_all(ad.tanh(ad.mul(ls[0], ls[1]))))
    check("op matmul", TOL_LINALG, [rng(4).normal(size=(3, 4)), rng(5).normal(size=(4, 2))],
          lambda ls: ad.sum_all(ad.tanh(ad.matmul(ls[0], ls[1]))))
    check("op tanh", TOL_ELEMENTWISE, [a34],
          lambda ls: ad.sum_all(ad.tanh(ls[0])))
    check("op tanh chain depth 3", TOL_ELEMENTWISE,
          [np.random.default_rng(42).normal(size=(3, 4))],
          lambda ls: ad.sum_all(ad.tanh(ad.tanh(ad.tanh(ls[0])))))
    check("op sigmoid", TOL_ELEMENTWISE, [rng(6).normal(size=(3, 4))],
          lambda ls: ad.sum_all(ad.sigmoid(ls[0])))
    check("op softmax", TOL_LINALG,
          [rng(7).normal(size=(3, 5)), rng(8).normal(size=(3, 5))],
          lambda ls: ad.sum_all(ad.mul(ad.softmax(ls[0]), ls[1])))
    check("op concat", TOL_ELEMENTWISE,
          [rng(9).normal(size=(3, 2)), rng(10).normal(size=(3, 3))],
          lambda ls: ad.sum_all(ad.tanh(ad.concat([ls[0], ls[1]], axis=1))))
    ids = np.asarray([0, 2, 2, 4], dtype=np.intp)
    check("op embedding", TOL_ELEMENTWISE, [rng(11).normal(size=(5, 3))],
          lambda ls: ad.sum_all(ad.tanh(ad.embedding(ls[0], ids))))
    check("op slice", TOL_ELEMENTWISE, [rng(12).normal(size=(3, 5))],
          lambda ls: ad.sum_all(ad.tanh(ad.slice_axis(ls[0], 1, 1, 4))))
    # zeros make the central difference cancel exactly, so the linear op's
    # error is 0.0 to the bit
    check("op sum (exactly linear)", 0.0, [np.zeros((3, 4))],
          lambda ls: ad.sum_all(ls[0]))
    check("op log", TOL_ELEMENTWISE, [np.abs(rng(13).normal(size=(3, 4))) + 0.5],
          lambda ls: ad.sum_all(ad.log(ls[0])))
    check("op negate", TOL_ELEMENTWISE, [a34],
          lambda ls: ad.sum_all(ad.negate(ad.tanh(ls[0]))))
    check("op euclidean norm", TOL_ELEMENTWISE, [rng(14).normal(size=(4,)) + 2.0],
          lambda ls: ad.euclidean_norm(ls[0]))
    logits = rng(15).normal(size=(3, 6))
    targets = np.asarray([1, 0, 5], dtype=np.intp)
    check("op cross entropy", TOL_LINALG, [logits],
          lambda ls: ad.sum_all(ad.cross_entropy(ls[0], targets)))
    return results


# ---------------------------------------------------------------------------
# model-level checks


def _tiny_model(seed: int, n_src: int, n_tgt: int, dim: int,
                src_prefix: str = "a", tgt_prefix: str = "b") -> ParameterSet:
    src = Vocabulary([f"{src_prefix}{i}" for i in range(n_src)])
    tgt = Vocabulary([f"{tgt_prefix}{i}" for i in range(n_tgt)])
    return init_params(src, tgt, dim, dim, seed)


def _model_likelihood_check(
    name: str, params: ParameterSet, pairs, tol: float
) -> CheckResult:
    names = [n for n, _ in params.tensor_specs()]
    leaves = [params.tensors[n] for n in names]
    sources = [x for x, _ in pairs]
    targets = [y for _, y in pairs]

    def build(nodes):
        pn = dict(zip(names, nodes))
        return ad.sum_all(score_rows(params, sources, targets, pn=pn))

    err = ad.gradient_check(build, leaves, step=FD_STEP)
    return CheckResult(name, err, tol)


def _sentence_checks(seed: int) -> list[CheckResult]:
    results = []
    m = _tiny_model([seed, 31], 5, 5, 3)
    pair = (Sentence.of((4, 6)), Sentence.of((5, 7)))
    results.append(
        _model_likelihood_check("sentence log-likelihood (2 tokens)", m, [pair], TOL_SENTENCE)
    )
    m2 = _tiny_model([seed, 32], 6, 6, 3)
    batch = [
        (Sentence.of((4, 6, 8)), Sentence.of((5, 7))),
        (Sentence.of((9,)), Sentence.of((8, 4, 6))),
    ]
    results.append(
        _model_likelihood_check("batched log-likelihood (2 unequal pairs)", m2, batch, TOL_SENTENCE)
    )
    return results


def _soft_penalty_check(seed: int) -> CheckResult:
    first = _tiny_model([seed, 33], 4, 3, 3, "x", "w")
    second = _tiny_model([seed, 34], 3, 4, 3, "w", "y")
    # guarantee every shared-row distance is far from the non-smooth origin
    second.tensors["src_emb"] += 0.5
    shared = build_shared_vocab(first.tgt_vocab, second.src_vocab)
    pen = soft_penalty(first, second, shared)

    err = _fd_max_rel_error(
        lambda: soft_penalty(first, second, shared).value,
        [first.tensors["tgt_emb"], second.tensors["src_emb"]],
        [pen.grad_src_piv["tgt_emb"], pen.grad_piv_tgt["src_emb"]],
    )
    return CheckResult("soft penalty", err, TOL_SOFT)


def _likelihood_connection_check(seed: int) -> CheckResult:
    first = _tiny_model([seed, 35], 4, 4, 3, "x", "w")
    second = _tiny_model([seed, 36], 4, 4, 3, "w", "y")
    items = [
        (
            Sentence.of((4, 5)),
            Sentence.of((6,)),
            [Sentence.of((5, 4)), Sentence.of((7,)), Sentence.of(())],
        ),
        (
            Sentence.of((6, 7, 4)),
            Sentence.of((5, 5)),
            [Sentence.of((4,)), Sentence.of((6, 5))],
        ),
    ]
    res = likelihood_from_lists(first, second, items, compute_grads=True)

    names1 = [n for n, _ in first.tensor_specs()]
    names2 = [n for n, _ in second.tensor_specs()]
    arrays = [first.tensors[n] for n in names1] + [second.tensors[n] for n in names2]
    grads = [res.grad_src_piv[n] for n in names1] + [res.grad_piv_tgt[n] for n in names2]

    err = _fd_max_rel_error(
        lambda: likelihood_from_lists(first, second, items, compute_grads=False).value,
        arrays,
        grads,
    )
    return CheckResult("likelihood connection (fixed lists)", err, TOL_LIKELIHOOD)


def gradient_check_suite(seed: int = 42) -> list[CheckResult]:
    """Every gradient path in the package against finite differences."""
    results = _op_checks(seed)
    results.extend(_sentence_checks(seed))
    results.append(_soft_penalty_check(seed))
    results.append(_likelihood_connection_check(seed))
    return results


def format_table(results: Sequence[CheckResult]) -> list[str]:
    """Fixed-width pass/fail lines, one per check, plus a summary line."""
    width = max(len(r.name) for r in results)
    lines = [
        f"{r.name:<{width}}  {r.error:12.3e}  <= {r.tolerance:8.1e}  "
        f"{'PASS' if r.passed else 'FAIL'}"
        for r in results
    ]
    failed = sum(1 for r in results if not r.passed)
    lines.append(
        f"{len(results) - failed}/{len(results)} checks passed"
        if failed
        else f"all {len(results)} checks passed"
    )
    return lines
