"""Corpora, synthetic transduction tasks, and pivot-overlap splitting.

A parallel corpus pairs sentences by line; a triple corpus additionally
carries the gold pivot sentence so cascaded costs can be decomposed. The
synthetic generator produces deterministic token-level transduction tasks
(substitution, local reordering, or their composition) whose references are
exact by construction, with all corpora drawn from disjoint source pools so
the training pivot sides never overlap and the bridge stays out of the
training data.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .vocab import RESERVED_TOKENS, Sentence, Vocabulary

__all__ = [
    "CorpusError",
    "ParallelCorpus",
    "TripleCorpus",
    "MappingSpec",
    "TokenMapping",
    "SynthTaskSpec",
    "SynthData",
    "generate_synth",
    "split_overlap",
    "SplitRecord",
    "build_vocab",
    "load_text_corpus",
    "save_parallel",
    "save_triples",
    "load_triples",
    "subsample_bridge",
]

MAPPING_KINDS = ("substitution", "reorder", "composition")
DEFAULT_MAX_LEN = 50

# fixed stream tags so every consumer of a task seed draws independently
_STREAM_MAP_FIRST = 1
_STREAM_MAP_SECOND = 2
_STREAM_SENTENCES = 3
_STREAM_SUBSAMPLE = 7


class CorpusError(ValueError):
    """Invalid corpus contents or construction parameters."""


def _validate_sides(pairs, vocabs, names) -> None:
    for i, row in enumerate(pairs):
        for s, vocab, name in zip(row, vocabs, names):
            if s.content_length < 1:
                raise CorpusError(f"pair {i}: empty {name} sentence")
            if s.max_id() >= len(vocab):
                raise CorpusError(
                    f"pair {i}: {name} id {s.max_id()} outside vocabulary of size {len(vocab)}"
                )


@dataclass(frozen=True)
class ParallelCorpus:
    """Aligned sentence pairs with their side vocabularies."""

    pairs: tuple[tuple[Sentence, Sentence], ...]
    left_vocab: Vocabulary
    right_vocab: Vocabulary

    def __post_init__(self):
        _validate_sides(
            self.pairs, (self.left_vocab, self.right_vocab), ("left", "right")
        )

    def __len__(self) -> int:
        return len(self.pairs)

    def left_tokens(self) -> list[list[str]]:
        return [self.left_vocab.decode(a) for a, _ in self.pairs]

    def right_tokens(self) -> list[list[str]]:
        return [self.right_vocab.decode(b) for _, b in self.pairs]


@dataclass(frozen=True)
class TripleCorpus:
    """(source, gold pivot, target) triples for cascaded evaluation."""

    triples: tuple[tuple[Sentence, Sentence, Sentence], ...]
    src_vocab: Vocabulary
    piv_vocab: Vocabulary
    tgt_vocab: Vocabulary

    def __post_init__(self):
        _validate_sides(
            self.triples,
            (self.src_vocab, self.piv_vocab, self.tgt_vocab),
            ("source", "pivot", "target"),
        )

    def __len__(self) -> int:
        return len(self.triples)


# ---------------------------------------------------------------------------
# deterministic token-level mappings


@dataclass(frozen=True)
class MappingSpec:
    """How one language maps to the next: which transform, and its window."""

    kind: str = "substitution"
    window: int = 2

    def __post_init__(self):
        if self.kind not in MAPPING_KINDS:
            raise CorpusError(f"unknown mapping kind {self.kind!r}")
        if self.window < 1:
            raise CorpusError(f"window must be >= 1, got {self.window}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "window": self.window}

    @classmethod
    def from_dict(cls, d: dict) -> "MappingSpec":
        return cls(str(d["kind"]), int(d["window"]))


def _reorder_windows(idxs: list[int], window: int) -> list[int]:
    # reversing each complete window is an involution, so invert == apply
    if window < 2:
        return list(idxs)
    out = list(idxs)
    for start in range(0, len(out) - window + 1, window):
        out[start : start + window] = reversed(out[start : start + window])
    return out


@dataclass(frozen=True)
class TokenMapping:
    """A concrete deterministic sentence transform over content indices.

    Substitution relabels each token through an injective permutation image;
    reordering reverses consecutive windows in place; composition substitutes
    then reorders. All three are invertible on their image, which keeps
    synthetic references exact.
    """

    spec: MappingSpec
    perm: tuple[int, ...] | None  # image of each input content index

    def apply(self, idxs: Sequence[int]) -> list[int]:
        out = list(idxs)
        if self.spec.kind in ("substitution", "composition"):
            out = [self.perm[i] for i in out]
        if self.spec.kind in ("reorder", "composition"):
            out = _reorder_windows(out, self.spec.window)
        return out

    def invert(self, idxs: Sequence[int]) -> list[int]:
        out = list(idxs)
        if self.spec.kind in ("reorder", "composition"):
            out = _reorder_windows(out, self.spec.window)
        if self.spec.kind in ("substitution", "composition"):
            inverse = {v: i for i, v in enumerate(self.perm)}
            out = [inverse[i] for i in out]
        return out


def _build_mapping(
    spec: MappingSpec, n_in: int, n_out: int, rng: np.random.Generator
) -> TokenMapping:
    if n_out < n_in:
        raise CorpusError(
            f"mapping {spec.kind!r} needs output vocab >= input vocab, got {n_out} < {n_in}"
        )
    perm = None
    if spec.kind in ("substitution", "composition"):
        perm = tuple(int(v) for v in rng.permutation(n_out)[:n_in])
    return TokenMapping(spec, perm)


# ---------------------------------------------------------------------------
# synthetic task generation


@dataclass(frozen=True)
class SynthTaskSpec:
    """Complete recipe for one synthetic pivot-translation task."""

    src_vocab_size: int
    piv_vocab_size: int
    tgt_vocab_size: int
    len_min: int
    len_max: int
    map_src_piv: MappingSpec
    map_piv_tgt: MappingSpec
    seed: int
    size_src_piv: int
    size_piv_tgt: int
    size_bridge: int
    size_dev: int
    size_test: int

    def __post_init__(self):
        for name in ("src_vocab_size", "piv_vocab_size", "tgt_vocab_size"):
            if getattr(self, name) < 1:
                raise CorpusError(f"{name} must be >= 1")
        if not 1 <= self.len_min <= self.len_max:
            raise CorpusError(
                f"need 1 <= len_min <= len_max, got {self.len_min}..{self.len_max}"
            )
        for name in ("size_src_piv", "size_piv_tgt", "size_bridge", "size_dev", "size_test"):
            if getattr(self, name) < 0:
                raise CorpusError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        d = {
            name: getattr(self, name)
            for name in (
                "src_vocab_size", "piv_vocab_size", "tgt_vocab_size",
                "len_min", "len_max", "seed",
                "size_src_piv", "size_piv_tgt", "size_bridge", "size_dev", "size_test",
            )
        }
        d["map_src_piv"] = self.map_src_piv.to_dict()
        d["map_piv_tgt"] = self.map_piv_tgt.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTaskSpec":
        kwargs = {
            name: int(d[name])
            for name in (
                "src_vocab_size", "piv_vocab_size", "tgt_vocab_size",
                "len_min", "len_max", "seed",
                "size_src_piv", "size_piv_tgt", "size_bridge", "size_dev", "size_test",
            )
        }
        kwargs["map_src_piv"] = MappingSpec.from_dict(d["map_src_piv"])
        kwargs["map_piv_tgt"] = MappingSpec.from_dict(d["map_piv_tgt"])
        return cls(**kwargs)


@dataclass(frozen=True)
class SynthData:
    """Generated corpora plus the exact mappings that produced them."""

    src_piv: ParallelCorpus
    piv_tgt: ParallelCorpus
    bridge: ParallelCorpus
    dev: TripleCorpus
    test: TripleCorpus
    first_mapping: TokenMapping
    second_mapping: TokenMapping

    @property
    def src_vocab(self) -> Vocabulary:
        return self.src_piv.left_vocab

    @property
    def piv_vocab(self) -> Vocabulary:
        return self.src_piv.right_vocab

    @property
    def tgt_vocab(self) -> Vocabulary:
        return self.piv_tgt.right_vocab


def _synth_vocab(prefix: str, size: int) -> Vocabulary:
    return Vocabulary([f"{prefix}{i}" for i in range(size)])


def _space_size(vocab: int, len_min: int, len_max: int, cap: int) -> int:
    total = 0
    for length in range(len_min, len_max + 1):
        total += vocab**length
        if total > cap:
            return cap + 1
    return total


def _sentence(idxs: Sequence[int]) -> Sentence:
    return Sentence.of(tuple(i + 4 for i in idxs))


def generate_synth(spec: SynthTaskSpec) -> SynthData:
    """Build all five corpora of a synthetic task, bitwise seed-deterministic.

    Source sequences are drawn uniformly (length uniform on the configured
    range, tokens uniform) and de-duplicated, then partitioned into five
    disjoint pools in draw order. Pivot/target sides follow by applying the
    two exact mappings, so the two training corpora share no pivot sentence
    and the bridge/dev/test sources never occur in training.
    """
    total = (
        spec.size_src_piv + spec.size_piv_tgt + spec.size_bridge
        + spec.size_dev + spec.size_test
    )
    space = _space_size(spec.src_vocab_size, spec.len_min, spec.len_max, 100 * total + 100)
    if space < total:
        raise CorpusError(
            f"need {total} distinct source sentences but only {space} exist"
        )

    first = _build_mapping(
        spec.map_src_piv, spec.src_vocab_size, spec.piv_vocab_size,
        np.random.default_rng([spec.seed, _STREAM_MAP_FIRST]),
    )
    second = _build_mapping(
        spec.map_piv_tgt, spec.piv_vocab_size, spec.tgt_vocab_size,
        np.random.default_rng([spec.seed, _STREAM_MAP_SECOND]),
    )

    rng = np.random.default_rng([spec.seed, _STREAM_SENTENCES])
    seen: set[tuple[int, ...]] = set()
    sources: list[tuple[int, ...]] = []
    attempts = 0
    limit = 200 * total + 1000
    while len(sources) < total:
        attempts += 1
        if attempts > limit:
            raise CorpusError(
                f"could not draw {total} distinct source sentences in {limit} attempts"
            )
        length = int(rng.integers(spec.len_min, spec.len_max + 1))
        idxs = tuple(int(v) for v in rng.integers(0, spec.src_vocab_size, size=length))
        if idxs in seen:
            continue
        seen.add(idxs)
        sources.append(idxs)

    pools: list[list[tuple[int, ...]]] = []
    start = 0
    for size in (spec.size_src_piv, spec.size_piv_tgt, spec.size_bridge,
                 spec.size_dev, spec.size_test):
        pools.append(sources[start : start + size])
        start += size
    pool_sp, pool_pt, pool_bridge, pool_dev, pool_test = pools

    src_vocab = _synth_vocab("s", spec.src_vocab_size)
    piv_vocab = _synth_vocab("p", spec.piv_vocab_size)
    tgt_vocab = _synth_vocab("t", spec.tgt_vocab_size)

    sp_pairs = tuple(
        (_sentence(x), _sentence(first.apply(x))) for x in pool_sp
    )
    pt_pairs = tuple(
        (_sentence(z), _sentence(second.apply(z)))
        for z in (first.apply(x) for x in pool_pt)
    )
    bridge_pairs = tuple(
        (_sentence(x), _sentence(second.apply(first.apply(x)))) for x in pool_bridge
    )

    def triples(pool):
        out = []
        for x in pool:
            z = first.apply(x)
            out.append((_sentence(x), _sentence(z), _sentence(second.apply(z))))
        return tuple(out)

    return SynthData(
        ParallelCorpus(sp_pairs, src_vocab, piv_vocab),
        ParallelCorpus(pt_pairs, piv_vocab, tgt_vocab),
        ParallelCorpus(bridge_pairs, src_vocab, tgt_vocab),
        TripleCorpus(triples(pool_dev), src_vocab, piv_vocab, tgt_vocab),
        TripleCorpus(triples(pool_test), src_vocab, piv_vocab, tgt_vocab),
        first,
        second,
    )


# ---------------------------------------------------------------------------
# pivot-overlap splitting


@dataclass(frozen=True)
class SplitRecord:
    """Accounting for one overlap split: what moved where, what was dropped."""

    overlap_types: int
    assigned_first: int
    assigned_second: int
    kept_first: int
    kept_second: int
    dropped_first: int
    dropped_second: int

    @property
    def dropped_total(self) -> int:
        return self.dropped_first + self.dropped_second


def split_overlap(
    first: ParallelCorpus, second: ParallelCorpus
) -> tuple[ParallelCorpus, ParallelCorpus, SplitRecord]:
    """Empty the pivot-side overlap between two training corpora.

    The pivot side is ``first``'s right and ``second``'s left. Every pivot
    sentence (exact token-sequence match) occurring in both corpora is
    assigned to exactly one side: the overlapped sentences are sorted
    lexicographically and the first half (rounded up) stays with ``first``.
    All pairs carrying a pivot assigned to the other side are dropped, and
    the returned record accounts for every original pair:
    kept + dropped == original on each side.
    """
    first_keys = [tuple(first.right_vocab.decode(b)) for _, b in first.pairs]
    second_keys = [tuple(second.left_vocab.decode(a)) for a, _ in second.pairs]
    overlap = sorted(set(first_keys) & set(second_keys))
    take_first = math.ceil(len(overlap) / 2)
    to_second = set(overlap[take_first:])
    to_first = set(overlap[:take_first])

    first_kept = tuple(
        p for p, key in zip(first.pairs, first_keys) if key not in to_second
    )
    second_kept = tuple(
        p for p, key in zip(second.pairs, second_keys) if key not in to_first
    )
    record = SplitRecord(
        overlap_types=len(overlap),
        assigned_first=take_first,
        assigned_second=len(overlap) - take_first,
        kept_first=len(first_kept),
        kept_second=len(second_kept),
        dropped_first=len(first.pairs) - len(first_kept),
        dropped_second=len(second.pairs) - len(second_kept),
    )
    return (
        ParallelCorpus(first_kept, first.left_vocab, first.right_vocab),
        ParallelCorpus(second_kept, second.left_vocab, second.right_vocab),
        record,
    )


# ---------------------------------------------------------------------------
# vocabulary construction and text IO


def build_vocab(token_lines: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Most frequent ``max_size`` tokens, ties broken lexicographically.

    Reserved token surfaces are never counted; everything outside the kept
    set encodes to UNK later.
    """
    if max_size < 1:
        raise CorpusError(f"max_size must be >= 1, got {max_size}")
    counts: Counter[str] = Counter()
    for line in token_lines:
        for tok in line:
            if tok not in RESERVED_TOKENS:
                counts[tok] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ranked[:max_size]])


def _read_token_lines(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.split() for line in lines]


def load_text_corpus(
    left_path,
    right_path,
    max_len: int = DEFAULT_MAX_LEN,
    *,
    left_vocab: Vocabulary | None = None,
    right_vocab: Vocabulary | None = None,
    vocab_size: int | None = None,
) -> tuple[ParallelCorpus, int]:
    """Load aligned text files, dropping empty or over-long pairs.

    Files hold one sentence per line, whitespace tokenized, paired by line
    number. Returns the corpus and the number of dropped pairs. When a side
    vocabulary is not supplied it is built from the kept lines (top
    ``vocab_size`` tokens, or every token when unset).
    """
    left_lines = _read_token_lines(left_path)
    right_lines = _read_token_lines(right_path)
    if len(left_lines) != len(right_lines):
        raise CorpusError(
            f"line counts differ: {len(left_lines)} vs {len(right_lines)}"
        )
    kept = [
        (l, r)
        for l, r in zip(left_lines, right_lines)
        if l and r and len(l) <= max_len and len(r) <= max_len
    ]
    dropped = len(left_lines) - len(kept)
    if left_vocab is None:
        size = vocab_size or max(1, len({t for l, _ in kept for t in l}))
        left_vocab = build_vocab([l for l, _ in kept], size)
    if right_vocab is None:
        size = vocab_size or max(1, len({t for _, r in kept for t in r}))
        right_vocab = build_vocab([r for _, r in kept], size)
    pairs = tuple(
        (left_vocab.encode(l), right_vocab.encode(r)) for l, r in kept
    )
    return ParallelCorpus(pairs, left_vocab, right_vocab), dropped


def _write_token_lines(path, lines: Iterable[Sequence[str]]) -> None:
    Path(path).write_text(
        "".join(" ".join(line) + "\n" for line in lines), encoding="utf-8"
    )


def save_parallel(corpus: ParallelCorpus, left_path, right_path) -> None:
    """One sentence per line on each side, paired by line number."""
    _write_token_lines(left_path, corpus.left_tokens())
    _write_token_lines(right_path, corpus.right_tokens())


def save_triples(corpus: TripleCorpus, src_path, piv_path, tgt_path) -> None:
    """Triple corpus as three aligned text files."""
    _write_token_lines(src_path, [corpus.src_vocab.decode(x) for x, _, _ in corpus.triples])
    _write_token_lines(piv_path, [corpus.piv_vocab.decode(z) for _, z, _ in corpus.triples])
    _write_token_lines(tgt_path, [corpus.tgt_vocab.decode(y) for _, _, y in corpus.triples])


def load_triples(
    src_path, piv_path, tgt_path,
    src_vocab: Vocabulary, piv_vocab: Vocabulary, tgt_vocab: Vocabulary,
) -> TripleCorpus:
    """Read three aligned files back into a triple corpus."""
    src_lines = _read_token_lines(src_path)
    piv_lines = _read_token_lines(piv_path)
    tgt_lines = _read_token_lines(tgt_path)
    if not (len(src_lines) == len(piv_lines) == len(tgt_lines)):
        raise CorpusError(
            f"line counts differ: {len(src_lines)}/{len(piv_lines)}/{len(tgt_lines)}"
        )
    triples = tuple(
        (src_vocab.encode(x), piv_vocab.encode(z), tgt_vocab.encode(y))
        for x, z, y in zip(src_lines, piv_lines, tgt_lines)
    )
    return TripleCorpus(triples, src_vocab, piv_vocab, tgt_vocab)


def subsample_bridge(corpus: ParallelCorpus, size: int, seed: int) -> ParallelCorpus:
    """Uniform subsample without replacement, nested across sizes.

    One permutation is drawn per seed and prefixes of it are taken, so a
    larger sample always contains every smaller sample with the same seed.
    """
    if size > len(corpus):
        raise CorpusError(f"sample size {size} exceeds corpus size {len(corpus)}")
    if size < 0:
        raise CorpusError(f"sample size must be >= 0, got {size}")
    rng = np.random.default_rng([seed, _STREAM_SUBSAMPLE])
    order = rng.permutation(len(corpus))
    pairs = tuple(corpus.pairs[int(i)] for i in order[:size])
    return ParallelCorpus(pairs, corpus.left_vocab, corpus.right_vocab)
