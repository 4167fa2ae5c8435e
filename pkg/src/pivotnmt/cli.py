"""Command-line entry point for the full experiment lifecycle.

Subcommands: gen-data, train, translate, eval, curve, ablate-bridge,
grad-check. Every command takes an explicit --out working directory; paths
in config files and path-valued flags resolve relative to it. Exit codes:
0 success, 2 usage or configuration problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import diagnostics
from .autodiff import NonFiniteError
from .connection import ConnectionMode, CouplingError
from .corpus import (
    CorpusError,
    SynthTaskSpec,
    generate_synth,
    load_text_corpus,
    load_triples,
    save_parallel,
    save_triples,
)
from .decoding import DecodeError, translate_pivoted
from .evaluation import EvalError, bleu, eval_accuracy, test_cost_curve
from .experiments import bridge_ablation, run_mode
from .model import CheckpointError, ModelError
from .training import (
    DivergenceError,
    TrainConfig,
    TrainError,
    load_train_state,
    train_independent,
)
from .vocab import VocabError, Vocabulary

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

_CONFIG_ERRORS = (
    CorpusError, VocabError, ModelError, CheckpointError, CouplingError,
    TrainError, EvalError, FileNotFoundError, KeyError, ValueError,
    json.JSONDecodeError, OSError,
)


class _Usage(Exception):
    """Raised internally for clean exit-2 conditions."""


def _resolve(out: Path, p) -> Path:
    path = Path(p)
    return path if path.is_absolute() else out / path


def _load_json(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SynthTaskSpec.from_dict(_load_json(_resolve(out, args.spec)))
    data = generate_synth(spec)

    save_parallel(data.src_piv, out / "src_piv.src.txt", out / "src_piv.piv.txt")
    save_parallel(data.piv_tgt, out / "piv_tgt.piv.txt", out / "piv_tgt.tgt.txt")
    save_parallel(data.bridge, out / "bridge.src.txt", out / "bridge.tgt.txt")
    save_triples(data.dev, out / "dev.src.txt", out / "dev.piv.txt", out / "dev.tgt.txt")
    save_triples(data.test, out / "test.src.txt", out / "test.piv.txt", out / "test.tgt.txt")
    data.src_vocab.save(out / "src.vocab")
    data.piv_vocab.save(out / "piv.vocab")
    data.tgt_vocab.save(out / "tgt.vocab")
    (out / "provenance.json").write_text(
        json.dumps(spec.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    print(f"wrote synthetic task to {out}")
    print(
        f"sizes: first={len(data.src_piv)} second={len(data.piv_tgt)} "
        f"bridge={len(data.bridge)} dev={len(data.dev)} test={len(data.test)}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_config_from(section: dict, args) -> tuple[TrainConfig, bool]:
    """Merged config plus whether a joint mode was specified at all."""
    merged = dict(section)
    overrides = {
        "mode_kind": args.mode,
        "connection_weight": args.connection_weight,
        "k": args.k,
        "bridge_batch": args.bridge_batch,
        "clip_threshold": args.clip,
        "learning_rate": args.lr,
        "max_iterations": args.iterations,
        "eval_interval": args.eval_interval,
        "seed": args.seed,
        "batch_first": args.batch_first,
        "batch_second": args.batch_second,
        "max_len": args.max_len,
        "embedding_dim": args.dim,
        "hidden_dim": args.hidden,
    }
    mode_section = dict(merged.get("mode") or {})
    has_mode = "mode" in merged or overrides["mode_kind"] is not None
    for key in ("mode_kind", "k", "bridge_batch"):
        value = overrides.pop(key)
        if value is not None:
            mode_section["kind" if key == "mode_kind" else key] = value
    merged["mode"] = {
        "kind": mode_section.get("kind", "none"),
        "k": mode_section.get("k", 10),
        "bridge_batch": mode_section.get("bridge_batch", 4),
    }
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    try:
        return TrainConfig.from_dict(merged), has_mode
    except TypeError as exc:
        raise _Usage(f"bad config field: {exc}") from None


def _load_data_section(data_cfg: dict, out: Path):
    src_vocab = Vocabulary.load(_resolve(out, data_cfg["src_vocab"]))
    piv_vocab = Vocabulary.load(_resolve(out, data_cfg["piv_vocab"]))
    tgt_vocab = Vocabulary.load(_resolve(out, data_cfg["tgt_vocab"]))
    max_len = int(data_cfg.get("max_len", 50))
    first, _ = load_text_corpus(
        _resolve(out, data_cfg["first_left"]), _resolve(out, data_cfg["first_right"]),
        max_len, left_vocab=src_vocab, right_vocab=piv_vocab,
    )
    second, _ = load_text_corpus(
        _resolve(out, data_cfg["second_left"]), _resolve(out, data_cfg["second_right"]),
        max_len, left_vocab=piv_vocab, right_vocab=tgt_vocab,
    )
    bridge = None
    if "bridge_left" in data_cfg:
        bridge, _ = load_text_corpus(
            _resolve(out, data_cfg["bridge_left"]), _resolve(out, data_cfg["bridge_right"]),
            max_len, left_vocab=src_vocab, right_vocab=tgt_vocab,
        )
    triples = None
    if "test_src" in data_cfg:
        triples = load_triples(
            _resolve(out, data_cfg["test_src"]), _resolve(out, data_cfg["test_piv"]),
            _resolve(out, data_cfg["test_tgt"]),
            src_vocab, piv_vocab, tgt_vocab,
        )
    return first, second, bridge, triples


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw = _load_json(_resolve(out, args.config))
    if "data" not in raw:
        raise _Usage("config is missing the data section")
    config, has_mode = _train_config_from(raw.get("train", {}), args)
    first_c, second_c, bridge_c, triples = _load_data_section(raw["data"], out)

    archive = {"data": raw["data"], "train": config.to_dict(), "joint": has_mode}
    (out / "config.archived.json").write_text(
        json.dumps(archive, indent=2, sort_keys=True), encoding="utf-8"
    )

    if config.mode.kind == "likelihood" and bridge_c is None:
        raise _Usage("likelihood mode requires bridge data (field bridge_left)")

    if not has_mode:
        first, m1 = train_independent(first_c, config, role="first")
        second, m2 = train_independent(second_c, config, role="second")
        from .model import save_checkpoint

        final = out / "final"
        final.mkdir(parents=True, exist_ok=True)
        save_checkpoint(first, final / "src_piv.ckpt")
        save_checkpoint(second, final / "piv_tgt.ckpt")
        with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for rec_first, rec_second in zip(m1, m2):
                fh.write(json.dumps({
                    "iteration": rec_first["iteration"],
                    "loss_src_pivot": rec_first["loss"],
                    "loss_pivot_target": rec_second["loss"],
                }) + "\n")
        print(f"independent training done: {final}")
        return EXIT_OK

    first, second, metrics = run_mode(
        first_c, second_c, bridge_c, config,
        test_triples=triples, out_dir=out,
    )
    last = metrics[-1] if metrics else {}
    print(f"joint training done ({config.mode.kind}): {out / 'final'}")
    if last:
        print(json.dumps(last))
    return EXIT_OK


# ---------------------------------------------------------------------------
# translate


def cmd_translate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src_vocab = Vocabulary.load(_resolve(out, args.src_vocab))
    piv_vocab = Vocabulary.load(_resolve(out, args.piv_vocab))
    tgt_vocab = Vocabulary.load(_resolve(out, args.tgt_vocab))
    state, _ = load_train_state(
        _resolve(out, args.manifest), src_vocab, piv_vocab, piv_vocab, tgt_vocab
    )
    in_path = _resolve(out, args.input)
    lines = in_path.read_text(encoding="utf-8").splitlines()
    rows = []
    for line in lines:
        tokens = line.split()
        if not tokens:
            rows.append(["", "", "", "0", "0"])
            continue
        x = src_vocab.encode(tokens)
        result = translate_pivoted(
            state.src_piv, state.piv_tgt, x, args.beam, args.max_len
        )
        rows.append([
            " ".join(tokens),
            " ".join(piv_vocab.decode(result.pivot_sentence)),
            " ".join(tgt_vocab.decode(result.target_sentence)),
            f"{result.pivot.log_prob:.6f}",
            f"{result.target.log_prob:.6f}",
        ])
    out_path = _resolve(out, args.output)
    out_path.write_text(
        "".join("\t".join(r) + "\n" for r in rows), encoding="utf-8"
    )
    print(f"wrote {len(rows)} translations to {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    out = Path(args.out)
    hyp_lines = _resolve(out, args.hyp).read_text(encoding="utf-8").splitlines()
    ref_lines = _resolve(out, args.ref).read_text(encoding="utf-8").splitlines()
    if len(hyp_lines) != len(ref_lines):
        raise _Usage(
            f"line counts differ: {len(hyp_lines)} hypotheses vs {len(ref_lines)} references"
        )
    hyps = [line.split() for line in hyp_lines]
    refs = [line.split() for line in ref_lines]
    if args.metric in ("bleu", "both"):
        report = bleu(hyps, refs, case_insensitive=args.case_insensitive)
        for line in report.format_lines():
            print(line)
    if args.metric in ("accuracy", "both"):
        print(f"accuracy {eval_accuracy(hyps, refs):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# curve


def _run_manifests(run_dir: Path) -> list[Path]:
    snaps = sorted((run_dir / "checkpoints").glob("iter_*/manifest.json"))
    final = run_dir / "final" / "manifest.json"
    if final.exists():
        snaps.append(final)
    if not snaps:
        raise _Usage(f"{run_dir}: no checkpoint manifests found")
    return snaps


def cmd_curve(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src_vocab = Vocabulary.load(_resolve(out, args.src_vocab))
    piv_vocab = Vocabulary.load(_resolve(out, args.piv_vocab))
    tgt_vocab = Vocabulary.load(_resolve(out, args.tgt_vocab))
    triples = load_triples(
        _resolve(out, args.triples_src), _resolve(out, args.triples_piv),
        _resolve(out, args.triples_tgt), src_vocab, piv_vocab, tgt_vocab,
    )

    series: list[tuple[str, list]] = []
    seen: dict[str, int] = {}
    for run in args.runs:
        run_dir = _resolve(out, run)
        manifests = _run_manifests(run_dir)
        mode = json.loads(manifests[0].read_text(encoding="utf-8"))["config"]["mode"]["kind"]
        label = "independent" if mode == "none" else mode
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}-{seen[label]}"
        points = test_cost_curve(manifests, triples)
        dedup = {p.iteration: p for p in points}
        series.append((label, [dedup[i] for i in sorted(dedup)]))

    data_path = out / "curve.tsv"
    with open(data_path, "w", encoding="utf-8") as fh:
        fh.write("mode\titeration\tcost\n")
        for label, points in series:
            for p in points:
                fh.write(f"{label}\t{p.iteration}\t{p.cost_total:.10f}\n")

    plot_path = out / "curve.svg"
    _plot_series(series, plot_path)
    print(f"wrote {data_path} and {plot_path}")
    return EXIT_OK


def _plot_series(series, plot_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, points in series:
        ax.plot(
            [p.iteration for p in points],
            [p.cost_total for p in points],
            marker="o", markersize=3, label=label,
        )
    ax.set_xlabel("iteration")
    ax.set_ylabel("test cost (both stages, nats)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(plot_path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# ablate-bridge


def cmd_ablate_bridge(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if sorted(args.sizes) != args.sizes:
        raise _Usage("sizes must be sorted ascending")
    raw = _load_json(_resolve(out, args.config))
    if "data" not in raw:
        raise _Usage("config is missing the data section")
    config, _ = _train_config_from(raw.get("train", {}), args)
    if config.mode.kind != "likelihood":
        config = replace(config, mode=replace(config.mode, kind="likelihood"))
    first_c, second_c, bridge_c, triples = _load_data_section(raw["data"], out)
    if bridge_c is None:
        raise _Usage("ablation requires bridge data (field bridge_left)")
    if triples is None:
        raise _Usage("ablation requires test triples (field test_src)")
    pretrain_iters = int(raw.get("pretrain", {}).get("max_iterations", config.max_iterations))
    pretrain_config = replace(
        config, mode=ConnectionMode(), max_iterations=pretrain_iters
    )

    rows = bridge_ablation(
        first_c, second_c, bridge_c, triples,
        pretrain_config, config, args.sizes,
        beam=args.beam, max_len=config.max_len, out_dir=out / "runs",
    )
    table_path = out / "ablation.tsv"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("size\tbleu_src_piv\tbleu_piv_tgt\tbleu_src_tgt\taccuracy_src_tgt\n")
        for row in rows:
            fh.write(
                f"{row['size']}\t{row['bleu_src_piv']:.4f}\t{row['bleu_piv_tgt']:.4f}"
                f"\t{row['bleu_src_tgt']:.4f}\t{row['accuracy_src_tgt']:.4f}\n"
            )
    (out / "ablation.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    print(f"{'size':>8} {'src>piv':>9} {'piv>tgt':>9} {'src>tgt':>9}")
    for row in rows:
        print(
            f"{row['size']:>8} {row['bleu_src_piv']:>9.2f} "
            f"{row['bleu_piv_tgt']:>9.2f} {row['bleu_src_tgt']:>9.2f}"
        )
    print(f"wrote {table_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check


def cmd_grad_check(args) -> int:
    results = diagnostics.gradient_check_suite(seed=args.seed if args.seed is not None else 42)
    for line in diagnostics.format_table(results):
        print(line)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["none", "hard", "soft", "likelihood"])
    p.add_argument("--lambda", dest="connection_weight", type=float,
                   help="connection term weight (default 1.0)")
    p.add_argument("--k", type=int, help="top-k list size (default 10)")
    p.add_argument("--bridge-batch", type=int)
    p.add_argument("--clip", type=float, help="gradient clip threshold (default 0.1)")
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-first", type=int)
    p.add_argument("--batch-second", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--hidden", type=int, help="hidden state dimension")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pivotnmt",
        description="Pivot-based translation: two cascaded models, jointly trained.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic task from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train independently or jointly per config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("translate", help="two-step decode an input file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="translations.tsv")
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--piv-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("eval", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--metric", choices=["bleu", "accuracy", "both"], default="bleu")
    p.add_argument("--case-insensitive", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("curve", help="test-cost learning curves from saved runs")
    p.add_argument("--runs", nargs="+", required=True,
                   help="training output directories, one series each")
    p.add_argument("--triples-src", required=True)
    p.add_argument("--triples-piv", required=True)
    p.add_argument("--triples-tgt", required=True)
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--piv-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_curve)

    p = sub.add_parser("ablate-bridge", help="sweep bridge sizes in likelihood mode")
    p.add_argument("--config", required=True)
    p.add_argument("--sizes", nargs="+", type=int, default=[0, 100, 1000])
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(fn=cmd_ablate_bridge)

    p = sub.add_parser("grad-check", help="run the gradient-fidelity suite")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _Usage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteError, DecodeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
