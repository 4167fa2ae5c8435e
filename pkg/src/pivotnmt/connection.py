"""Connection terms coupling the source-pivot and pivot-target models.

Three couplings over the pivot language are supported:

* hard -- the pivot-side embedding rows for words shared by both models'
  pivot vocabularies become one storage location (enforced by synchronized
  initialization plus accumulated updates in the trainer);
* soft -- the negated sum of Euclidean distances between the shared rows,
  so maximizing it pulls the two embedding tables together;
* likelihood -- the log-likelihood of source-target bridge pairs with the
  pivot sentence as a latent variable, approximated by the model's top-k
  pivot list. The value is the unrenormalized log partial sum; its exact
  gradient weights each list entry by its posterior probability within the
  list, and no gradient flows through the discrete list selection.

The pivot word embeddings involved are the target-side embedding table of
the source-pivot model and the source-side embedding table of the
pivot-target model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .decoding import pivot_id_map, remap_sentence, top_k_pivots
from .model import ParameterSet, param_nodes, score_rows
from .numerics import log_sum_exp, softmax_weights
from .vocab import Sentence, Vocabulary

__all__ = [
    "CouplingError",
    "ConnectionMode",
    "SharedPivotVocab",
    "TieRecord",
    "build_shared_vocab",
    "enforce_hard_tie",
    "evaluate_hard",
    "soft_penalty",
    "SoftPenalty",
    "likelihood_connection",
    "likelihood_from_lists",
    "LikelihoodResult",
    "connection_value_and_grads",
]

SP_PIVOT_TABLE = "tgt_emb"  # pivot words live on the output side of model 1
PT_PIVOT_TABLE = "src_emb"  # and on the input side of model 2

MODES = ("none", "hard", "soft", "likelihood")


class CouplingError(ValueError):
    """Invalid connection-term configuration or input."""


@dataclass(frozen=True)
class ConnectionMode:
    """Which coupling to apply, with its parameters."""

    kind: str = "none"
    k: int = 10
    bridge_batch: int = 4

    def __post_init__(self):
        if self.kind not in MODES:
            raise CouplingError(f"unknown connection mode {self.kind!r}")
        if self.k < 1:
            raise CouplingError(f"k must be >= 1, got {self.k}")
        if self.bridge_batch < 1:
            raise CouplingError(f"bridge_batch must be >= 1, got {self.bridge_batch}")


@dataclass(frozen=True)
class SharedPivotVocab:
    """Pivot words present in both models' pivot vocabularies.

    Entries are (token, id in the source-pivot model's target vocabulary,
    id in the pivot-target model's source vocabulary), sorted by token.
    """

    entries: tuple[tuple[str, int, int], ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def sp_ids(self) -> np.ndarray:
        return np.asarray([e[1] for e in self.entries], dtype=np.intp)

    @property
    def pt_ids(self) -> np.ndarray:
        return np.asarray([e[2] for e in self.entries], dtype=np.intp)


def build_shared_vocab(
    sp_pivot_vocab: Vocabulary,
    pt_pivot_vocab: Vocabulary,
    include_reserved: bool = False,
) -> SharedPivotVocab:
    """Intersection of the two pivot vocabularies by token surface.

    Reserved tokens are excluded unless ``include_reserved`` is set; they are
    shared trivially and their rows rarely receive gradient.
    """
    entries = []
    if include_reserved:
        for i, tok in enumerate(sp_pivot_vocab.tokens[:4]):
            entries.append((tok, i, i))
    common = set(sp_pivot_vocab.content_tokens) & set(pt_pivot_vocab.content_tokens)
    for tok in sorted(common):
        entries.append((tok, sp_pivot_vocab.id_of(tok), pt_pivot_vocab.id_of(tok)))
    return SharedPivotVocab(tuple(entries))


@dataclass(frozen=True)
class TieRecord:
    """Row-level aliasing between the two pivot embedding tables."""

    pairs: tuple[tuple[int, int], ...]
    tokens: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d: dict) -> "TieRecord":
        return cls(
            tuple((int(a), int(b)) for a, b in d["pairs"]),
            tuple(d["tokens"]),
        )


def enforce_hard_tie(
    src_piv: ParameterSet, piv_tgt: ParameterSet, shared: SharedPivotVocab
) -> TieRecord:
    """Make the shared rows one storage location, initialized from model 1.

    Copies the source-pivot model's rows into the pivot-target model and
    returns the alias record; the trainer keeps the rows identical by
    accumulating both gradients into one shared update.
    """
    if src_piv.embedding_dim != piv_tgt.embedding_dim:
        raise CouplingError(
            f"embedding dims differ: {src_piv.embedding_dim} vs {piv_tgt.embedding_dim}"
        )
    sp_table = src_piv.tensors[SP_PIVOT_TABLE]
    pt_table = piv_tgt.tensors[PT_PIVOT_TABLE]
    for _, i_sp, i_pt in shared.entries:
        pt_table[i_pt] = sp_table[i_sp]
    if shared.entries:
        src_piv.tie_tags[SP_PIVOT_TABLE] = "pivot-shared-rows"
        piv_tgt.tie_tags[PT_PIVOT_TABLE] = "pivot-shared-rows"
    return TieRecord(
        tuple((e[1], e[2]) for e in shared.entries),
        tuple(e[0] for e in shared.entries),
    )


def evaluate_hard(
    src_piv: ParameterSet, piv_tgt: ParameterSet, shared: SharedPivotVocab
) -> int:
    """1 if every shared row is bitwise identical across the models, else 0.

    An empty shared vocabulary ties nothing and evaluates to 1.
    """
    sp_table = src_piv.tensors[SP_PIVOT_TABLE]
    pt_table = piv_tgt.tensors[PT_PIVOT_TABLE]
    for _, i_sp, i_pt in shared.entries:
        if not np.array_equal(sp_table[i_sp], pt_table[i_pt]):
            return 0
    return 1


@dataclass
class SoftPenalty:
    """Value of the soft coupling and its gradients per embedding table."""

    value: float
    grad_src_piv: dict[str, np.ndarray]
    grad_piv_tgt: dict[str, np.ndarray]


def soft_penalty(
    src_piv: ParameterSet, piv_tgt: ParameterSet, shared: SharedPivotVocab
) -> SoftPenalty:
    """Negated sum of Euclidean distances between the shared embedding rows.

    The value is <= 0 and equals 0 only when every shared row pair
    coincides. Gradients are of this value: unit difference vectors, and
    exactly zero for a coincident pair (the subgradient chosen at the
    non-differentiable point).
    """
    if src_piv.embedding_dim != piv_tgt.embedding_dim:
        raise CouplingError(
            f"embedding dims differ: {src_piv.embedding_dim} vs {piv_tgt.embedding_dim}"
        )
    sp_table = src_piv.tensors[SP_PIVOT_TABLE]
    pt_table = piv_tgt.tensors[PT_PIVOT_TABLE]
    g_sp = np.zeros_like(sp_table)
    g_pt = np.zeros_like(pt_table)
    value = 0.0
    for _, i_sp, i_pt in shared.entries:
        diff = sp_table[i_sp] - pt_table[i_pt]
        dist = float(np.sqrt((diff * diff).sum()))
        value -= dist
        if dist > 0.0:
            unit = diff / dist
            g_sp[i_sp] -= unit
            g_pt[i_pt] += unit
    return SoftPenalty(value, {SP_PIVOT_TABLE: g_sp}, {PT_PIVOT_TABLE: g_pt})


@dataclass
class LikelihoodResult:
    """Bridge log-likelihood approximation over top-k pivot lists."""

    value: float
    grad_src_piv: dict[str, np.ndarray]
    grad_piv_tgt: dict[str, np.ndarray]
    skipped: int
    pair_values: list[float]
    pair_weights: list[np.ndarray]


def likelihood_from_lists(
    src_piv: ParameterSet,
    piv_tgt: ParameterSet,
    items: Sequence[tuple[Sentence, Sentence, Sequence[Sentence]]],
    *,
    compute_grads: bool = True,
) -> LikelihoodResult:
    """Likelihood connection for explicit candidate lists.

    ``items`` holds (source, target, pivot candidates) with candidates in
    the source-pivot model's output id space. The value is the mean over
    items of log sum_i P(z_i | x) P(y | z_i); gradients treat the lists as
    fixed and weight each candidate by its posterior within its list.
    """
    if not items:
        raise CouplingError("likelihood connection requires at least one pair")
    for i, (_, _, zs) in enumerate(items):
        if not zs:
            raise CouplingError(f"pair {i} has an empty candidate list")

    sp_pn = param_nodes(src_piv, trainable=compute_grads)
    pt_pn = param_nodes(piv_tgt, trainable=compute_grads)
    id_map = pivot_id_map(src_piv.tgt_vocab, piv_tgt.src_vocab)

    xs = [x for x, _, _ in items]
    flat_z: list[Sentence] = []
    flat_z_remapped: list[Sentence] = []
    flat_y: list[Sentence] = []
    gather: list[int] = []
    segments: list[tuple[int, int]] = []
    for p, (x, y, zs) in enumerate(items):
        start = len(flat_z)
        for z in zs:
            flat_z.append(z)
            flat_z_remapped.append(remap_sentence(z, id_map))
            flat_y.append(y)
            gather.append(p)
        segments.append((start, len(flat_z)))

    lp_sp = score_rows(src_piv, xs, flat_z, gather=gather, pn=sp_pn)
    lp_pt = score_rows(piv_tgt, flat_z_remapped, flat_y, pn=pt_pn)
    totals = lp_sp.value + lp_pt.value

    pair_values: list[float] = []
    pair_weights: list[np.ndarray] = []
    weights_flat = np.empty(len(flat_z))
    for start, stop in segments:
        seg = totals[start:stop]
        pair_values.append(log_sum_exp(seg))
        w = softmax_weights(seg)
        pair_weights.append(w)
        weights_flat[start:stop] = w
    value = float(np.mean(pair_values))

    grad_sp: dict[str, np.ndarray] = {}
    grad_pt: dict[str, np.ndarray] = {}
    if compute_grads:
        # d value / d theta = (1/P) sum_pairs sum_i w_i d(lp1_i + lp2_i)/d theta
        scale = ad.const(weights_flat / len(items))
        root_sp = ad.sum_all(ad.mul(scale, lp_sp))
        root_pt = ad.sum_all(ad.mul(scale, lp_pt))
        sp_map = ad.backward(root_sp, leaves=list(sp_pn.values()))
        pt_map = ad.backward(root_pt, leaves=list(pt_pn.values()))
        grad_sp = {name: sp_map[node] for name, node in sp_pn.items()}
        grad_pt = {name: pt_map[node] for name, node in pt_pn.items()}

    return LikelihoodResult(value, grad_sp, grad_pt, 0, pair_values, pair_weights)


def likelihood_connection(
    src_piv: ParameterSet,
    piv_tgt: ParameterSet,
    bridge_batch: Sequence[tuple[Sentence, Sentence]],
    k: int,
    max_len: int,
    *,
    beam: int | None = None,
    compute_grads: bool = True,
) -> LikelihoodResult:
    """Top-k approximated bridge likelihood with gradients for both models.

    Pairs whose pivot search terminates nothing within ``max_len`` are
    skipped and counted; an entirely skipped batch is an error.
    """
    if not bridge_batch:
        raise CouplingError("likelihood connection requires a non-empty bridge batch")
    if k < 1:
        raise CouplingError(f"k must be >= 1, got {k}")
    items = []
    skipped = 0
    for x, y in bridge_batch:
        hyps = top_k_pivots(src_piv, x, k, max_len, beam=beam)
        if not hyps:
            skipped += 1
            continue
        items.append((x, y, [h.sentence() for h in hyps]))
    if not items:
        raise CouplingError("every bridge pair was skipped: no pivot candidates found")
    result = likelihood_from_lists(src_piv, piv_tgt, items, compute_grads=compute_grads)
    result.skipped = skipped
    return result


def connection_value_and_grads(
    mode: ConnectionMode,
    src_piv: ParameterSet,
    piv_tgt: ParameterSet,
    shared: SharedPivotVocab | None,
    bridge_batch: Sequence[tuple[Sentence, Sentence]] | None,
    max_len: int,
) -> tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Dispatch one mode to (value, gradients for model 1, for model 2).

    Modes none and hard contribute no explicit term (hard coupling is
    structural). Soft requires the shared vocabulary; likelihood requires a
    non-empty bridge batch.
    """
    if mode.kind in ("none", "hard"):
        return 0.0, {}, {}
    if mode.kind == "soft":
        if shared is None:
            raise CouplingError("soft mode requires the shared pivot vocabulary")
        pen = soft_penalty(src_piv, piv_tgt, shared)
        return pen.value, pen.grad_src_piv, pen.grad_piv_tgt
    if not bridge_batch:
        raise CouplingError("likelihood mode requires a non-empty bridge batch")
    res = likelihood_connection(
        src_piv, piv_tgt, bridge_batch, mode.k, max_len
    )
    return res.value, res.grad_src_piv, res.grad_piv_tgt
