"""Attention-based encoder-decoder translation model on the autodiff core.

Architecture: bidirectional GRU encoder producing per-position annotations
(the forward and backward states concatenated), an additive-attention scorer
(v . tanh(W s + U a)), a GRU decoder whose input is the previous target
embedding concatenated with the attention context, and a readout that
projects tanh(W [state; context; prev embedding] + b) linearly to the
target vocabulary. The decoder's initial state is a tanh projection of the
backward encoder state at the first position. All parameters are float64
and initialized uniformly in [-0.08, 0.08].

Batched computation pads with PAD and masks padded positions out of both
the attention softmax and the loss; GRU states carry through padded steps
unchanged, so padding never contaminates real positions.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .vocab import BOS, EOS, PAD, Sentence, Vocabulary

__all__ = [
    "ModelError",
    "CheckpointError",
    "ParameterSet",
    "init_params",
    "encode",
    "step_distribution",
    "sentence_log_prob",
    "batch_loss_and_grads",
    "score_rows",
    "DecoderSession",
    "save_checkpoint",
    "load_checkpoint",
]

INIT_SCALE = 0.08
_ATTENTION_BIAS = -1e9


class ModelError(ValueError):
    """Invalid model input (bad shapes, ids outside the vocabulary, ...)."""


class CheckpointError(ValueError):
    """Unreadable, corrupt, or mismatched checkpoint file."""


def _tensor_specs(d: int, h: int, n_src: int, n_tgt: int) -> list[tuple[str, tuple[int, ...]]]:
    def gru(prefix: str, in_dim: int):
        return [
            (f"{prefix}_gate_w", (in_dim, 2 * h)),
            (f"{prefix}_gate_u", (h, 2 * h)),
            (f"{prefix}_gate_b", (2 * h,)),
            (f"{prefix}_cand_w", (in_dim, h)),
            (f"{prefix}_cand_u", (h, h)),
            (f"{prefix}_cand_b", (h,)),
        ]

    specs: list[tuple[str, tuple[int, ...]]] = [
        ("src_emb", (n_src, d)),
        ("tgt_emb", (n_tgt, d)),
    ]
    specs += gru("enc_fwd", d)
    specs += gru("enc_bwd", d)
    specs += gru("dec", d + 2 * h)
    specs += [
        ("att_state_w", (h, h)),
        ("att_annot_w", (2 * h, h)),
        ("att_score_v", (h, 1)),
        ("init_state_w", (h, h)),
        ("init_state_b", (h,)),
        ("readout_w", (d + 3 * h, h)),
        ("readout_b", (h,)),
        ("out_w", (h, n_tgt)),
        ("out_b", (n_tgt,)),
    ]
    return specs


@dataclass
class ParameterSet:
    """All weights of one translation model plus its two vocabularies."""

    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    embedding_dim: int
    hidden_dim: int
    tensors: dict[str, np.ndarray]
    tie_tags: dict[str, str] = field(default_factory=dict)

    def tensor_specs(self) -> list[tuple[str, tuple[int, ...]]]:
        return _tensor_specs(
            self.embedding_dim, self.hidden_dim, len(self.src_vocab), len(self.tgt_vocab)
        )

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            self.src_vocab,
            self.tgt_vocab,
            self.embedding_dim,
            self.hidden_dim,
            {k: v.copy() for k, v in self.tensors.items()},
            dict(self.tie_tags),
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())


def init_params(
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    embedding_dim: int,
    hidden_dim: int,
    seed,
) -> ParameterSet:
    """Fresh parameters, uniform in [-0.08, 0.08], deterministic in the seed.

    Tensors are drawn in the fixed canonical order, so equal seeds give
    bitwise-equal parameter sets.
    """
    if embedding_dim < 1 or hidden_dim < 1:
        raise ModelError("embedding_dim and hidden_dim must be positive")
    rng = np.random.default_rng(seed)
    tensors = {
        name: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        for name, shape in _tensor_specs(
            embedding_dim, hidden_dim, len(src_vocab), len(tgt_vocab)
        )
    }
    return ParameterSet(src_vocab, tgt_vocab, embedding_dim, hidden_dim, tensors)


# ---------------------------------------------------------------------------
# graph building


def param_nodes(params: ParameterSet, trainable: bool) -> dict[str, ad.Node]:
    make = ad.leaf if trainable else ad.const
    return {name: make(arr) for name, arr in params.tensors.items()}


def _gru_step(pn: dict, prefix: str, x: ad.Node, h: ad.Node) -> ad.Node:
    h_size = h.shape[1]
    gates = ad.sigmoid(
        ad.add(
            ad.add(ad.matmul(x, pn[f"{prefix}_gate_w"]), ad.matmul(h, pn[f"{prefix}_gate_u"])),
            pn[f"{prefix}_gate_b"],
        )
    )
    z = ad.slice_axis(gates, 1, 0, h_size)
    r = ad.slice_axis(gates, 1, h_size, 2 * h_size)
    cand = ad.tanh(
        ad.add(
            ad.add(
                ad.matmul(x, pn[f"{prefix}_cand_w"]),
                ad.matmul(ad.mul(r, h), pn[f"{prefix}_cand_u"]),
            ),
            pn[f"{prefix}_cand_b"],
        )
    )
    # h_new = (1 - z) * h + z * cand, written without a ones constant
    return ad.add(ad.add(h, ad.mul(z, cand)), ad.negate(ad.mul(z, h)))


def _masked(h_new: ad.Node, h_prev: ad.Node, m: ad.Node | None) -> ad.Node:
    if m is None:
        return h_new
    # padded rows carry the previous state through unchanged
    return ad.add(h_prev, ad.mul(m, ad.add(h_new, ad.negate(h_prev))))


def _encode_rows(params: ParameterSet, pn: dict, rows: np.ndarray, mask: np.ndarray | None):
    """Run both encoder directions over padded id rows.

    Returns (annotations, projected annotations, initial decoder state):
    lists of (U, 2h) nodes per source position, their (U, h) attention
    projections, and the (U, h) initial state.
    """
    u, t_len = rows.shape
    h_dim = params.hidden_dim
    embs = [ad.embedding(pn["src_emb"], rows[:, t]) for t in range(t_len)]
    col_masks = (
        [ad.const(np.ascontiguousarray(mask[:, t : t + 1])) for t in range(t_len)]
        if mask is not None
        else [None] * t_len
    )

    zero = ad.const(np.zeros((u, h_dim)))
    fwd: list[ad.Node] = []
    h = zero
    for t in range(t_len):
        h = _masked(_gru_step(pn, "enc_fwd", embs[t], h), h, col_masks[t])
        fwd.append(h)
    bwd: list[ad.Node | None] = [None] * t_len
    h = zero
    for t in range(t_len - 1, -1, -1):
        h = _masked(_gru_step(pn, "enc_bwd", embs[t], h), h, col_masks[t])
        bwd[t] = h

    annots = [ad.concat([fwd[t], bwd[t]], axis=1) for t in range(t_len)]
    uas = [ad.matmul(a, pn["att_annot_w"]) for a in annots]
    s0 = ad.tanh(ad.add(ad.matmul(bwd[0], pn["init_state_w"]), pn["init_state_b"]))
    return annots, uas, s0


def _attention_context(pn, s_prev, annots, uas, bias):
    ws = ad.matmul(s_prev, pn["att_state_w"])
    scores = [ad.matmul(ad.tanh(ad.add(ua, ws)), pn["att_score_v"]) for ua in uas]
    e = ad.concat(scores, axis=1)
    if bias is not None:
        e = ad.add(e, bias)
    alpha = ad.softmax(e)
    ctx: ad.Node | None = None
    for j, a_j in enumerate(annots):
        term = ad.mul(ad.slice_axis(alpha, 1, j, j + 1), a_j)
        ctx = term if ctx is None else ad.add(ctx, term)
    return ctx


def _decoder_step(pn, s_prev, prev_ids, annots, uas, bias):
    emb = ad.embedding(pn["tgt_emb"], prev_ids)
    ctx = _attention_context(pn, s_prev, annots, uas, bias)
    s = _gru_step(pn, "dec", ad.concat([emb, ctx], axis=1), s_prev)
    readout = ad.tanh(
        ad.add(ad.matmul(ad.concat([s, ctx, emb], axis=1), pn["readout_w"]), pn["readout_b"])
    )
    logits = ad.add(ad.matmul(readout, pn["out_w"]), pn["out_b"])
    return s, logits


def _pad_rows(sentences: Sequence[Sentence]) -> tuple[np.ndarray, np.ndarray | None]:
    lens = [len(s.ids) for s in sentences]
    t_max = max(lens)
    rows = np.full((len(sentences), t_max), PAD, dtype=np.intp)
    for i, s in enumerate(sentences):
        rows[i, : lens[i]] = s.ids
    if min(lens) == t_max:
        return rows, None
    mask = np.zeros((len(sentences), t_max))
    for i, n in enumerate(lens):
        mask[i, :n] = 1.0
    return rows, mask


def _check_ids(sentences: Sequence[Sentence], vocab: Vocabulary, side: str) -> None:
    size = len(vocab)
    for i, s in enumerate(sentences):
        if s.max_id() >= size:
            raise ModelError(f"{side} sentence {i}: id {s.max_id()} outside vocabulary of size {size}")


def score_rows(
    params: ParameterSet,
    sources: Sequence[Sentence],
    targets: Sequence[Sentence],
    *,
    gather: Sequence[int] | None = None,
    pn: dict | None = None,
) -> ad.Node:
    """Teacher-forced log-probabilities, one per target row.

    ``sources`` holds unique source sentences; ``gather`` maps each target
    row to its source (identity when None, which requires equal lengths).
    The returned (B,) node is differentiable when ``pn`` holds trainable
    leaves. Empty-content targets are accepted here (a bare EOS is one
    decode step); public entry points add their own validation.
    """
    if not sources or not targets:
        raise ModelError("score_rows: sources and targets must be non-empty")
    _check_ids(sources, params.src_vocab, "source")
    _check_ids(targets, params.tgt_vocab, "target")
    if gather is None:
        if len(sources) != len(targets):
            raise ModelError(
                f"score_rows: {len(sources)} sources vs {len(targets)} targets without gather"
            )
    else:
        if len(gather) != len(targets):
            raise ModelError("score_rows: gather length must match targets")
        if any(not 0 <= g < len(sources) for g in gather):
            raise ModelError("score_rows: gather index out of range")
    if pn is None:
        pn = param_nodes(params, trainable=False)

    src_rows, src_mask = _pad_rows(sources)
    annots, uas, s0 = _encode_rows(params, pn, src_rows, src_mask)
    if gather is not None:
        g = np.asarray(gather, dtype=np.intp)
        annots = [ad.embedding(a, g) for a in annots]
        uas = [ad.embedding(u, g) for u in uas]
        s0 = ad.embedding(s0, g)
        row_mask = src_mask[g] if src_mask is not None else None
    else:
        row_mask = src_mask
    # row_mask 1 -> bias 0, row_mask 0 -> large negative bias
    bias = ad.const((row_mask - 1.0) * -_ATTENTION_BIAS) if row_mask is not None else None

    tgt_rows, tgt_mask = _pad_rows(targets)
    b, t_len = tgt_rows.shape
    prev_rows = np.column_stack([np.full(b, BOS, dtype=np.intp), tgt_rows[:, :-1]])

    total: ad.Node | None = None
    s = s0
    for t in range(t_len):
        s, logits = _decoder_step(pn, s, prev_rows[:, t], annots, uas, bias)
        ce = ad.cross_entropy(logits, tgt_rows[:, t])
        if tgt_mask is not None:
            ce = ad.mul(ce, ad.const(np.ascontiguousarray(tgt_mask[:, t])))
        total = ce if total is None else ad.add(total, ce)
    return ad.negate(total)


# ---------------------------------------------------------------------------
# public ops


def encode(params: ParameterSet, x: Sentence) -> np.ndarray:
    """Annotation matrix for one sentence: (len(x.ids), 2 * hidden_dim)."""
    _check_ids([x], params.src_vocab, "source")
    pn = param_nodes(params, trainable=False)
    rows = np.asarray([x.ids], dtype=np.intp)
    annots, _, _ = _encode_rows(params, pn, rows, None)
    return np.vstack([a.value[0] for a in annots])


def step_distribution(
    params: ParameterSet,
    state: np.ndarray,
    prev_token: int,
    annotations: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One decoder step: next state (h,) and the next-token distribution (V,)."""
    h_dim = params.hidden_dim
    state = np.asarray(state, dtype=np.float64)
    annotations = np.asarray(annotations, dtype=np.float64)
    if state.shape != (h_dim,):
        raise ModelError(f"state shape {state.shape} does not match hidden dim {h_dim}")
    if annotations.ndim != 2 or annotations.shape[1] != 2 * h_dim or annotations.shape[0] < 1:
        raise ModelError(f"annotations shape {annotations.shape} invalid for hidden dim {h_dim}")
    if not 0 <= int(prev_token) < len(params.tgt_vocab):
        raise ModelError(f"prev token {prev_token} outside target vocabulary")
    pn = param_nodes(params, trainable=False)
    annots = [ad.const(annotations[t : t + 1]) for t in range(annotations.shape[0])]
    uas = [ad.matmul(a, pn["att_annot_w"]) for a in annots]
    s_prev = ad.const(state[None, :])
    prev_ids = np.asarray([int(prev_token)], dtype=np.intp)
    s, logits = _decoder_step(pn, s_prev, prev_ids, annots, uas, None)
    probs = ad.softmax(logits)
    return s.value[0].copy(), probs.value[0].copy()


def sentence_log_prob(params: ParameterSet, x: Sentence, y: Sentence) -> float:
    """Teacher-forced log P(y | x), including the EOS step. Always <= 0."""
    if x.content_length == 0 or y.content_length == 0:
        raise ModelError("sentence_log_prob: empty sentence")
    lp = score_rows(params, [x], [y])
    return float(lp.value[0])


def batch_loss_and_grads(
    params: ParameterSet, batch: Sequence[tuple[Sentence, Sentence]]
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-likelihood over the batch and its gradients.

    Gradients are of the same mean-scaled loss, keyed by tensor name; every
    tensor appears (zeros if unreachable).
    """
    if not batch:
        raise ModelError("batch_loss_and_grads: empty batch")
    for i, (x, y) in enumerate(batch):
        if x.content_length == 0 or y.content_length == 0:
            raise ModelError(f"batch_loss_and_grads: pair {i} has an empty sentence")
    pn = param_nodes(params, trainable=True)
    lp = score_rows(params, [x for x, _ in batch], [y for _, y in batch], pn=pn)
    loss = ad.mul(ad.const(np.asarray(-1.0 / len(batch))), ad.sum_all(lp))
    leaf_list = list(pn.values())
    grad_map = ad.backward(loss, leaves=leaf_list)
    names = list(pn.keys())
    grads = {name: grad_map[pn[name]] for name in names}
    return float(loss.value), grads


class DecoderSession:
    """Incremental decoding for one source sentence (constants, no grads).

    ``step`` advances any number of decoder states at once and returns the
    per-row log-distribution over the target vocabulary, computed exactly as
    the teacher-forced scorer computes it.
    """

    def __init__(self, params: ParameterSet, x: Sentence):
        _check_ids([x], params.src_vocab, "source")
        self.params = params
        self._pn = param_nodes(params, trainable=False)
        rows = np.asarray([x.ids], dtype=np.intp)
        self._annots, self._uas, s0 = _encode_rows(params, self._pn, rows, None)
        self.initial_state = s0.value[0].copy()

    def step(self, states: np.ndarray, prev_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s_prev = ad.const(np.asarray(states, dtype=np.float64))
        ids = np.asarray(prev_ids, dtype=np.intp)
        s, logits = _decoder_step(self._pn, s_prev, ids, self._annots, self._uas, None)
        l = logits.value
        m = l.max(axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(l - m).sum(axis=-1))
        return s.value, l - lse[:, None]


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PVNMTCKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(params: ParameterSet, path) -> None:
    """Write a versioned binary container; byte-identical for equal params.

    Layout: magic, u32 header length, UTF-8 JSON header (format version,
    dims, vocab hashes, tie tags, tensor index in canonical order), then the
    raw little-endian float64 tensor blobs concatenated in index order.
    """
    specs = params.tensor_specs()
    header = {
        "format_version": FORMAT_VERSION,
        "embedding_dim": params.embedding_dim,
        "hidden_dim": params.hidden_dim,
        "src_vocab_hash": params.src_vocab.content_hash,
        "tgt_vocab_hash": params.tgt_vocab.content_hash,
        "tie_tags": dict(sorted(params.tie_tags.items())),
        "tensors": [{"name": name, "shape": list(shape)} for name, shape in specs],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, shape in specs:
            arr = params.tensors[name]
            if arr.shape != shape:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {shape}")
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> ParameterSet:
    """Read a checkpoint and verify format version and vocabulary hashes."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {header.get('format_version')} unsupported"
            )
        if header["src_vocab_hash"] != src_vocab.content_hash:
            raise CheckpointError(f"{path}: source vocabulary hash mismatch")
        if header["tgt_vocab_hash"] != tgt_vocab.content_hash:
            raise CheckpointError(f"{path}: target vocabulary hash mismatch")
        d = int(header["embedding_dim"])
        h = int(header["hidden_dim"])
        expected = _tensor_specs(d, h, len(src_vocab), len(tgt_vocab))
        listed = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
        if listed != expected:
            raise CheckpointError(f"{path}: tensor index does not match expected layout")
        tensors = {}
        for name, shape in expected:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensors")
    ps = ParameterSet(
        src_vocab, tgt_vocab, d, h, tensors, dict(header.get("tie_tags", {}))
    )
    if not ps.all_finite():
        raise CheckpointError(f"{path}: non-finite tensor values")
    return ps
