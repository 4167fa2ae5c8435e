"""SGD training: independent baselines and jointly connected training.

The joint objective is the sum of both models' likelihoods plus a weighted
connection term, optimized by mini-batched SGD with one batch per corpus per
iteration and a single global-norm gradient clip across both models. Every
random draw comes from a named per-purpose stream derived from the run seed,
so a joint run with the connection disabled replays exactly the batch
sequences of two independent runs, and any run can resume bit-exactly from
a serialized state.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .connection import (
    ConnectionMode,
    PT_PIVOT_TABLE,
    SP_PIVOT_TABLE,
    TieRecord,
    build_shared_vocab,
    connection_value_and_grads,
    enforce_hard_tie,
)
from .corpus import ParallelCorpus
from .model import (
    ParameterSet,
    batch_loss_and_grads,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .vocab import Vocabulary

__all__ = [
    "TrainError",
    "DivergenceError",
    "TrainConfig",
    "TrainState",
    "clip_gradients",
    "train_independent",
    "joint_step",
    "train_joint",
    "save_train_state",
    "load_train_state",
]

logger = logging.getLogger("pivotnmt")

# named sub-streams of the run seed; both training paths share them so the
# connection-free joint run replays the independent runs exactly
STREAM_INIT_FIRST = 21
STREAM_INIT_SECOND = 22
STREAM_BATCH_FIRST = 11
STREAM_BATCH_SECOND = 12
STREAM_BATCH_BRIDGE = 13

_ROLES = {
    "first": (STREAM_INIT_FIRST, STREAM_BATCH_FIRST),
    "second": (STREAM_INIT_SECOND, STREAM_BATCH_SECOND),
}

MANIFEST_VERSION = 1


class TrainError(RuntimeError):
    """Training could not proceed."""


class DivergenceError(TrainError):
    """Loss became non-finite."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    """Everything one run needs besides the corpora themselves."""

    mode: ConnectionMode = ConnectionMode()
    embedding_dim: int = 16
    hidden_dim: int = 16
    connection_weight: float = 1.0
    learning_rate: float = 0.1
    clip_threshold: float = 0.1
    batch_first: int = 16
    batch_second: int = 16
    max_iterations: int = 1000
    eval_interval: int = 100
    seed: int = 0
    max_len: int = 50
    pretrained_first: str | None = None
    pretrained_second: str | None = None
    plateau_patience: int = 5

    def __post_init__(self):
        if self.connection_weight < 0:
            raise TrainError(f"connection_weight must be >= 0, got {self.connection_weight}")
        if self.learning_rate <= 0:
            raise TrainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.clip_threshold <= 0:
            raise TrainError(f"clip_threshold must be > 0, got {self.clip_threshold}")
        if self.batch_first < 1 or self.batch_second < 1:
            raise TrainError("batch sizes must be >= 1")
        if self.max_iterations < 0:
            raise TrainError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.eval_interval < 1:
            raise TrainError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.max_len < 1:
            raise TrainError(f"max_len must be >= 1, got {self.max_len}")
        if self.embedding_dim < 1 or self.hidden_dim < 1:
            raise TrainError("model dimensions must be >= 1")
        if self.plateau_patience < 1:
            raise TrainError("plateau_patience must be >= 1")

    def to_dict(self) -> dict:
        d = {
            "mode": {"kind": self.mode.kind, "k": self.mode.k,
                     "bridge_batch": self.mode.bridge_batch},
        }
        for name in (
            "embedding_dim", "hidden_dim", "connection_weight", "learning_rate",
            "clip_threshold", "batch_first", "batch_second", "max_iterations",
            "eval_interval", "seed", "max_len", "pretrained_first",
            "pretrained_second", "plateau_patience",
        ):
            d[name] = getattr(self, name)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        m = kwargs.pop("mode", None)
        if m is not None:
            kwargs["mode"] = ConnectionMode(
                str(m["kind"]), int(m.get("k", 10)), int(m.get("bridge_batch", 4))
            )
        return cls(**kwargs)


@dataclass
class TrainState:
    """Mutable state of one joint run; serializable for exact resume."""

    iteration: int
    src_piv: ParameterSet
    piv_tgt: ParameterSet
    rng_first: np.random.Generator
    rng_second: np.random.Generator
    rng_bridge: np.random.Generator
    tie: TieRecord | None = None
    metrics: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# gradient plumbing


def clip_gradients(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Global-norm rescaling of one gradient map.

    The map is returned unchanged (same arrays) when the norm is within the
    threshold, so a non-binding clip is exactly the identity.
    """
    if threshold <= 0:
        raise TrainError(f"clip threshold must be > 0, got {threshold}")
    sq = sum(float((g * g).sum()) for g in grads.values())
    norm = math.sqrt(sq)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {name: g * scale for name, g in grads.items()}


def _joint_clip(
    g_first: dict[str, np.ndarray],
    g_second: dict[str, np.ndarray],
    threshold: float,
    tie: TieRecord | None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Clip both models' gradients as one vector.

    With hard tying the aliased rows are one parameter, so the duplicate
    copy in the second model is excluded from the norm.
    """
    sq = sum(float((g * g).sum()) for g in g_first.values())
    sq += sum(float((g * g).sum()) for g in g_second.values())
    if tie is not None and tie.pairs:
        dup = g_second[PT_PIVOT_TABLE]
        for _, i_pt in tie.pairs:
            row = dup[i_pt]
            sq -= float((row * row).sum())
    norm = math.sqrt(max(sq, 0.0))
    if norm <= threshold:
        return g_first, g_second
    scale = threshold / norm
    return (
        {name: g * scale for name, g in g_first.items()},
        {name: g * scale for name, g in g_second.items()},
    )


def _accumulate_tied(
    g_first: dict[str, np.ndarray], g_second: dict[str, np.ndarray], tie: TieRecord
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Sum the two aliases' gradients so tied rows move identically."""
    if not tie.pairs:
        return g_first, g_second
    g_first = dict(g_first)
    g_second = dict(g_second)
    sp = g_first[SP_PIVOT_TABLE].copy()
    pt = g_second[PT_PIVOT_TABLE].copy()
    for i_sp, i_pt in tie.pairs:
        combined = sp[i_sp] + pt[i_pt]
        sp[i_sp] = combined
        pt[i_pt] = combined
    g_first[SP_PIVOT_TABLE] = sp
    g_second[PT_PIVOT_TABLE] = pt
    return g_first, g_second


def _apply_update(params: ParameterSet, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, tensor in params.tensors.items():
        g = grads.get(name)
        if g is not None:
            tensor -= lr * g


def _draw_batch(
    rng: np.random.Generator, corpus: ParallelCorpus, size: int
) -> list[tuple]:
    idxs = rng.integers(0, len(corpus), size=size)
    return [corpus.pairs[int(i)] for i in idxs]


def _zero_grads(params: ParameterSet) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors.items()}


def _merge_scaled(
    base: dict[str, np.ndarray], extra: dict[str, np.ndarray], factor: float
) -> dict[str, np.ndarray]:
    if not extra or factor == 0.0:
        return base
    out = dict(base)
    for name, g in extra.items():
        out[name] = out[name] + factor * g
    return out


# ---------------------------------------------------------------------------
# independent training


def train_independent(
    corpus: ParallelCorpus,
    config: TrainConfig,
    *,
    role: str = "first",
    initial: ParameterSet | None = None,
    stop_on_plateau: bool = False,
) -> tuple[ParameterSet, list[dict]]:
    """Plain SGD on the mean sentence negative log-likelihood.

    ``role`` selects the named init/batch streams, which is what lets a
    connection-free joint run reproduce two independent runs exactly.
    Returns the trained parameters and the per-interval metrics records.
    """
    if len(corpus) == 0:
        raise TrainError("train_independent: empty corpus")
    if role not in _ROLES:
        raise TrainError(f"unknown role {role!r}")
    init_stream, batch_stream = _ROLES[role]
    batch_size = config.batch_first if role == "first" else config.batch_second
    if initial is not None:
        params = initial.copy()
    else:
        params = init_params(
            corpus.left_vocab, corpus.right_vocab,
            config.embedding_dim, config.hidden_dim,
            [config.seed, init_stream],
        )
    rng = np.random.default_rng([config.seed, batch_stream])

    metrics: list[dict] = []
    interval_losses: list[float] = []
    best = math.inf
    stale = 0
    for it in range(config.max_iterations):
        batch = _draw_batch(rng, corpus, batch_size)
        try:
            loss, grads = batch_loss_and_grads(params, batch)
        except ad.NonFiniteError as exc:
            raise DivergenceError(it) from exc
        if not math.isfinite(loss):
            raise DivergenceError(it)
        grads = clip_gradients(grads, config.clip_threshold)
        _apply_update(params, grads, config.learning_rate)
        interval_losses.append(loss)
        if (it + 1) % config.eval_interval == 0:
            mean_loss = float(np.mean(interval_losses))
            interval_losses = []
            metrics.append({"iteration": it + 1, "loss": mean_loss})
            if stop_on_plateau:
                if mean_loss < best - 1e-12:
                    best = mean_loss
                    stale = 0
                else:
                    stale += 1
                    if stale >= config.plateau_patience:
                        logger.info("plateau after %d iterations", it + 1)
                        break
    return params, metrics


# ---------------------------------------------------------------------------
# joint training


def init_joint_state(
    first_corpus: ParallelCorpus,
    second_corpus: ParallelCorpus,
    config: TrainConfig,
    *,
    initial_first: ParameterSet | None = None,
    initial_second: ParameterSet | None = None,
) -> TrainState:
    """Fresh or pretrained parameter pair plus the three batch streams.

    In-memory ``initial_*`` parameters win over checkpoint paths; they are
    copied, never mutated.
    """
    if initial_first is not None:
        first = initial_first.copy()
    elif config.pretrained_first is not None:
        first = load_checkpoint(
            config.pretrained_first, first_corpus.left_vocab, first_corpus.right_vocab
        )
    else:
        first = init_params(
            first_corpus.left_vocab, first_corpus.right_vocab,
            config.embedding_dim, config.hidden_dim,
            [config.seed, STREAM_INIT_FIRST],
        )
    if initial_second is not None:
        second = initial_second.copy()
    elif config.pretrained_second is not None:
        second = load_checkpoint(
            config.pretrained_second, second_corpus.left_vocab, second_corpus.right_vocab
        )
    else:
        second = init_params(
            second_corpus.left_vocab, second_corpus.right_vocab,
            config.embedding_dim, config.hidden_dim,
            [config.seed, STREAM_INIT_SECOND],
        )
    pretrained = (
        initial_first is not None or config.pretrained_first is not None
    ) and (initial_second is not None or config.pretrained_second is not None)
    if config.mode.kind == "likelihood" and not pretrained:
        logger.warning(
            "likelihood connection without pretrained parameters; "
            "training from random initialization"
        )
    state = TrainState(
        iteration=0,
        src_piv=first,
        piv_tgt=second,
        rng_first=np.random.default_rng([config.seed, STREAM_BATCH_FIRST]),
        rng_second=np.random.default_rng([config.seed, STREAM_BATCH_SECOND]),
        rng_bridge=np.random.default_rng([config.seed, STREAM_BATCH_BRIDGE]),
    )
    if config.mode.kind == "hard":
        shared = build_shared_vocab(first.tgt_vocab, second.src_vocab)
        state.tie = enforce_hard_tie(first, second, shared)
    return state


def joint_step(
    state: TrainState,
    first_corpus: ParallelCorpus,
    second_corpus: ParallelCorpus,
    bridge_corpus: ParallelCorpus | None,
    config: TrainConfig,
) -> tuple[TrainState, dict]:
    """One jointly clipped SGD update of both models.

    Draws one batch per corpus (bridge only in likelihood mode; an empty
    corpus contributes nothing), assembles likelihood gradients plus the
    weighted connection gradients, accumulates tied rows, clips globally,
    and applies the update. Returns the state and the step's term values.
    """
    it = state.iteration
    mode = config.mode
    lam = config.connection_weight

    try:
        if len(first_corpus) > 0:
            batch1 = _draw_batch(state.rng_first, first_corpus, config.batch_first)
            loss1, g1 = batch_loss_and_grads(state.src_piv, batch1)
        else:
            loss1, g1 = 0.0, _zero_grads(state.src_piv)
        if len(second_corpus) > 0:
            batch2 = _draw_batch(state.rng_second, second_corpus, config.batch_second)
            loss2, g2 = batch_loss_and_grads(state.piv_tgt, batch2)
        else:
            loss2, g2 = 0.0, _zero_grads(state.piv_tgt)

        conn_value = 0.0
        cg1: dict[str, np.ndarray] = {}
        cg2: dict[str, np.ndarray] = {}
        if mode.kind == "soft":
            shared = build_shared_vocab(state.src_piv.tgt_vocab, state.piv_tgt.src_vocab)
            conn_value, cg1, cg2 = connection_value_and_grads(
                mode, state.src_piv, state.piv_tgt, shared, None, config.max_len
            )
        elif mode.kind == "likelihood":
            # a missing or empty bridge degenerates to the unconnected objective
            if bridge_corpus is not None and len(bridge_corpus) > 0:
                bridge_batch = _draw_batch(
                    state.rng_bridge, bridge_corpus, mode.bridge_batch
                )
                conn_value, cg1, cg2 = connection_value_and_grads(
                    mode, state.src_piv, state.piv_tgt, None, bridge_batch,
                    config.max_len,
                )
    except ad.NonFiniteError as exc:
        raise DivergenceError(it) from exc

    loss = loss1 + loss2 - lam * conn_value
    if not math.isfinite(loss):
        raise DivergenceError(it)

    # loss gradients: likelihood terms minus the weighted (ascending) connection
    g1 = _merge_scaled(g1, cg1, -lam)
    g2 = _merge_scaled(g2, cg2, -lam)
    if state.tie is not None:
        g1, g2 = _accumulate_tied(g1, g2, state.tie)
    g1, g2 = _joint_clip(g1, g2, config.clip_threshold, state.tie)
    _apply_update(state.src_piv, g1, config.learning_rate)
    _apply_update(state.piv_tgt, g2, config.learning_rate)

    state.iteration = it + 1
    step_record = {
        "loss_src_pivot": loss1,
        "loss_pivot_target": loss2,
        "connection": conn_value,
    }
    return state, step_record


def train_joint(
    first_corpus: ParallelCorpus,
    second_corpus: ParallelCorpus,
    bridge_corpus: ParallelCorpus | None,
    config: TrainConfig,
    *,
    test_cost_fn=None,
    out_dir=None,
    state: TrainState | None = None,
) -> tuple[ParameterSet, ParameterSet, list[dict]]:
    """Run joint steps to the iteration limit, logging per-interval metrics.

    Each interval record holds the interval means of both losses and the
    connection value, the connection weight, and ``test_cost_fn``'s value on
    the current parameters (null when no evaluator is given). With
    ``out_dir`` the record stream is appended to metrics.jsonl and a
    resumable snapshot is written at every interval. Passing a ``state``
    (fresh or deserialized) continues that run instead of starting over.
    """
    if config.mode.kind == "likelihood" and (
        bridge_corpus is None or len(bridge_corpus) == 0
    ):
        logger.warning("likelihood mode with no bridge data degenerates to mode=none")
    if state is None:
        state = init_joint_state(first_corpus, second_corpus, config)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    sums = {"loss_src_pivot": 0.0, "loss_pivot_target": 0.0, "connection": 0.0}
    count = 0
    while state.iteration < config.max_iterations:
        state, rec = joint_step(
            state, first_corpus, second_corpus, bridge_corpus, config
        )
        for key in sums:
            sums[key] += rec[key]
        count += 1
        if state.iteration % config.eval_interval == 0:
            record = {"iteration": state.iteration}
            for key in ("loss_src_pivot", "loss_pivot_target", "connection"):
                record[key] = sums[key] / count
                sums[key] = 0.0
            count = 0
            record["connection_weight"] = config.connection_weight
            record["test_cost"] = (
                test_cost_fn(state.src_piv, state.piv_tgt)
                if test_cost_fn is not None
                else None
            )
            state.metrics.append(record)
            if out_path is not None:
                with open(out_path / "metrics.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")
                save_train_state(
                    state, config,
                    out_path / "checkpoints" / f"iter_{state.iteration:06d}",
                )
    if out_path is not None:
        save_train_state(state, config, out_path / "final")
    return state.src_piv, state.piv_tgt, state.metrics


# ---------------------------------------------------------------------------
# state serialization


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(saved: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = saved
    return rng


def save_train_state(state: TrainState, config: TrainConfig, dir_path) -> Path:
    """Write both checkpoints plus a manifest linking them; returns its path."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.src_piv, d / "src_piv.ckpt")
    save_checkpoint(state.piv_tgt, d / "piv_tgt.ckpt")
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "iteration": state.iteration,
        "first_checkpoint": "src_piv.ckpt",
        "second_checkpoint": "piv_tgt.ckpt",
        "tie_record": state.tie.to_dict() if state.tie is not None else None,
        "rng": {
            "first": _rng_state(state.rng_first),
            "second": _rng_state(state.rng_second),
            "bridge": _rng_state(state.rng_bridge),
        },
        "config": config.to_dict(),
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_train_state(
    manifest_path,
    first_src_vocab: Vocabulary,
    first_tgt_vocab: Vocabulary,
    second_src_vocab: Vocabulary,
    second_tgt_vocab: Vocabulary,
) -> tuple[TrainState, TrainConfig]:
    """Rebuild a run's exact state from a manifest written by save_train_state."""
    path = Path(manifest_path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise TrainError(
            f"{path}: manifest version {manifest.get('manifest_version')} unsupported"
        )
    base = path.parent
    first = load_checkpoint(
        base / manifest["first_checkpoint"], first_src_vocab, first_tgt_vocab
    )
    second = load_checkpoint(
        base / manifest["second_checkpoint"], second_src_vocab, second_tgt_vocab
    )
    tie = (
        TieRecord.from_dict(manifest["tie_record"])
        if manifest.get("tie_record") is not None
        else None
    )
    state = TrainState(
        iteration=int(manifest["iteration"]),
        src_piv=first,
        piv_tgt=second,
        rng_first=_restore_rng(manifest["rng"]["first"]),
        rng_second=_restore_rng(manifest["rng"]["second"]),
        rng_bridge=_restore_rng(manifest["rng"]["bridge"]),
        tie=tie,
    )
    config = TrainConfig.from_dict(manifest["config"])
    return state, config
