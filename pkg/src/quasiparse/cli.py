"""Command-line interface.

One binary, six subcommands: gen-data, train, parse, eval, gradcheck,
ablate. Every command is deterministic given its config and seed, prints a
human-readable summary, and writes a machine-readable result file (JSON or
CSV) into its output directory, with figures alongside where they help.

Exit codes: 0 success, 1 usage or configuration error, 2 unusable data,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import ablation, reporting
from .config import RunConfig, load_run_config
from .corpus import load_corpus
from .errors import ConfigurationError, DataError, NumericError
from .metrics import evaluate, format_report, merge_counts, report
from .model import gradient_check
from .pipeline import network_matcher, parse, write_parse_json
from .retrieval import DownsampleExtractor, build_index, load_index, save_index
from .synth import generate_corpus
from .train import load_checkpoint, save_checkpoint, train, write_log_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage problems; this CLI reserves 2 for data errors."""

    def error(self, message):  # noqa: D102 - argparse hook
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable; wins over the file)",
    )


def _load_config(args) -> RunConfig:
    return load_run_config(getattr(args, "config", None), args.overrides)


def _extractor_from(cfg: RunConfig) -> DownsampleExtractor:
    r = cfg.values["retrieval"]
    if r["extractor"] != "downsample":
        raise ConfigurationError(
            f"[retrieval] extractor {r['extractor']!r} is not available from the CLI"
        )
    return DownsampleExtractor(size=r["downsample"])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    spec = cfg.synth_spec()
    out = _out_dir(args)
    corpus = generate_corpus(spec, out)
    summary = {
        "labels": corpus.label_names,
        "image_size": list(corpus.image_hw),
        "seed": spec.seed,
        "counts": {split: len(ids) for split, ids in corpus.splits.items()},
    }
    (out / "gen_summary.json").write_text(json.dumps(summary, indent=1))
    total = sum(len(ids) for ids in corpus.splits.values())
    print(f"wrote {total} entries ({summary['counts']}) to {out}")
    print(f"labels: {', '.join(corpus.label_names)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.corpus)
    out = _out_dir(args)
    mcnn_config = cfg.mcnn_config(input_hw=corpus.image_hw)
    train_cfg = cfg.train_config()
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.mcnn_config != mcnn_config:
        raise ConfigurationError("resume checkpoint was trained with a different network config")

    def show(row):
        print(
            f"epoch {row.epoch:3d}  train {row.train_loss:.6f}  "
            f"val {row.val_loss:.6f}  lr {row.lr:.2e}"
        )

    started = time.perf_counter()
    ck, logs, _index = train(
        corpus,
        mcnn_config,
        train_cfg,
        extractor=_extractor_from(cfg),
        resume=resume,
        diag_path=out / "diagnostic.mcnn",
        progress=show,
    )
    seconds = time.perf_counter() - started
    ck_path = out / "checkpoint.mcnn"
    save_checkpoint(ck, ck_path)
    write_log_csv(logs, out / "training_log.csv")
    if logs:
        reporting.save_training_curves(logs, out / "training_curves.png")
    summary = {
        "checkpoint": ck_path.name,
        "epochs": ck.epoch,
        "final_train_loss": logs[-1].train_loss if logs else None,
        "final_val_loss": logs[-1].val_loss if logs else None,
        "seconds": round(seconds, 2),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1))
    print(f"trained {ck.epoch} epochs in {seconds:.1f}s; checkpoint at {ck_path}")
    return EXIT_OK


def _parse_targets(args, corpus) -> list[str]:
    if args.image:
        for eid in args.image:
            if eid not in corpus.entries:
                raise DataError(f"corpus has no entry {eid!r}")
        return list(args.image)
    return corpus.split_ids(args.split)


def cmd_parse(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.corpus)
    ck = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    opts = cfg.pipeline_options()
    if args.K is not None:
        opts["k"] = args.K
    threads = args.threads if args.threads else cfg.get("pipeline", "threads")

    extractor = _extractor_from(cfg)
    if args.index_cache and Path(args.index_cache).is_file():
        index = load_index(args.index_cache, extractor)
    else:
        index = build_index(corpus, "train", extractor)
        if args.index_cache:
            save_index(index, args.index_cache)

    matcher = network_matcher(ck, threads=threads)
    targets = _parse_targets(args, corpus)
    train_ids = set(corpus.split_ids("train"))
    region_cache: dict = {}
    summary = {}
    for eid in targets:
        entry = corpus.entries[eid]
        result, _maps = parse(
            entry.image,
            corpus,
            index,
            matcher,
            exclude_id=eid if eid in train_ids else None,
            region_cache=region_cache,
            **opts,
        )
        reporting.save_label_png(result.label_map, out / f"{eid}_labels.png")
        reporting.save_parse_figure(
            entry.image,
            result.label_map,
            corpus.label_names,
            result.confidence,
            result.visible,
            out / f"{eid}_viz.png",
        )
        write_parse_json(result, corpus.label_names, out / f"{eid}_match.json")
        visible = [corpus.label_names[i - 1] for i in range(1, corpus.num_labels + 1)
                   if result.visible[i]]
        summary[eid] = {"visible": visible, "neighbors": result.neighbor_ids}
        print(f"{eid}: visible labels {visible or ['(none)']}")
    (out / "parse_summary.json").write_text(json.dumps(summary, indent=1))
    print(f"parsed {len(targets)} image(s) into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    pred_dir = Path(args.pred)
    out = _out_dir(args) if args.out else pred_dir
    from PIL import Image

    ids = corpus.split_ids(args.split)
    counts = []
    for eid in ids:
        pred_path = pred_dir / f"{eid}_labels.png"
        if not pred_path.is_file():
            raise DataError(f"missing predicted label map {pred_path}")
        pred = np.asarray(Image.open(pred_path), dtype=np.uint8)
        counts.append(evaluate(pred, corpus.entries[eid].label_map, corpus.num_labels))
    rep = report(merge_counts(counts), corpus.label_names)
    print(format_report(rep))
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=1))
    with open(out / "metrics.csv", "w", newline="") as fh:
        import csv as _csv

        writer = _csv.writer(fh)
        writer.writerow(["label", "name", "precision", "recall", "f1", "support"])
        for s in rep.per_label:
            writer.writerow(
                [s.label, s.name, f"{s.precision:.6f}", f"{s.recall:.6f}",
                 f"{s.f1:.6f}", s.support]
            )
    reporting.save_metrics_chart(rep, out / "per_label_f1.png")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args) if (args.config or args.overrides) else None
    config = None
    if cfg is not None and cfg.values["mcnn"]["input"] > 0:
        config = cfg.mcnn_config()
    result = gradient_check(
        config, samples=args.samples, epsilon=args.epsilon, seed=args.seed
    )
    result["tolerance"] = args.tolerance
    result["passed"] = bool(result["max_rel_error"] < args.tolerance)
    print(
        f"max relative gradient error {result['max_rel_error']:.3e} over "
        f"{result['sampled']} of {result['param_count']} parameters "
        f"(tolerance {args.tolerance:.1e}): {'PASS' if result['passed'] else 'FAIL'}"
    )
    if args.out:
        out = _out_dir(args)
        (out / "gradcheck.json").write_text(json.dumps(result, indent=1))
    if not result["passed"]:
        raise NumericError("analytic gradients disagree with finite differences")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.corpus)
    out = _out_dir(args)
    base = cfg.mcnn_config(input_hw=corpus.image_hw)
    variants = args.variants.split(",") if args.variants else None
    results = ablation.run_ablation(
        corpus,
        base,
        cfg.train_config(),
        cfg.pipeline_options(),
        variants=variants,
        out_dir=out,
        progress=lambda msg: print(msg),
    )
    print()
    print(ablation.format_variant_table(results))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser wiring.
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="quasiparse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data",
                       help="generate a synthetic figure corpus")
    p.add_argument("--out", required=True, help="corpus output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a matching network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("parse", help="parse images with a checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image", action="append", help="entry id to parse (repeatable)")
    p.add_argument("--split", default="test", help="parse a whole split (default test)")
    p.add_argument("-K", type=int, help="neighbor count override")
    p.add_argument("--threads", type=int, default=0,
                   help="matcher threads; 1 is bit-reproducible (default from config)")
    p.add_argument("--index-cache", help="reuse or create an embedding index file")
    _add_config_flags(p)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("eval",
                       help="score predicted label maps against corpus truth")
    p.add_argument("--corpus", required=True)
    p.add_argument("--pred", required=True, help="directory of <id>_labels.png maps")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="report directory (default: the pred directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the analytic gradients")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for gradcheck.json")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate",
                       help="train and score architecture variants")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", help="comma-separated variant names")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
