"""Architecture variant sweep: train, parse, and score each variant.

Variant names:

* ``full``           the configured network as-is
* ``no-cross``       cross path removed everywhere
* ``cross:J,...``    cross path only at the listed conv layers
* ``siamese``        shared conv paths, fc embeddings compared by absolute
                     difference (no cross path)
* ``no-ss``          the full network, with superpixel smoothing disabled
                     at parse time (reuses the full variant's training)

Removing a layer's cross path would shrink that layer's total output width,
so the freed cross maps are split evenly between the two single paths (odd
remainders go to the query path). That keeps per-layer map totals constant
across variants and the comparison about wiring, not capacity.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .corpus import Corpus
from .errors import ConfigurationError
from .metrics import MetricsReport, evaluate, format_report, merge_counts, report
from .model import ConvSpec, McnnConfig
from .pipeline import network_matcher, parse
from .train import Checkpoint, TrainConfig, train
from . import reporting


def default_variants(config: McnnConfig) -> list[str]:
    """The standard sweep, ordered from weakest wiring to the full model."""
    n = config.n_layers
    names = ["siamese", "no-cross"]
    full_set = sorted(config.cross_enabled, reverse=True)
    for count in range(1, len(full_set) + 1):
        subset = sorted(full_set[:count], reverse=True)
        names.append("cross:" + ",".join(str(j) for j in subset))
    names.append("full")
    if 1 not in config.cross_enabled and n >= 1:
        names.append("cross:" + ",".join(str(j) for j in range(n, 0, -1)))
    names.append("no-ss")
    return names


def variant_config(base: McnnConfig, name: str) -> tuple[McnnConfig, bool]:
    """Resolve a variant name to (network config, use_superpixels)."""
    if name in ("full", "no-ss"):
        return base, name != "no-ss"
    if name == "siamese":
        cfg = _compensated(base, frozenset())
        return replace(cfg, siamese=True, tie_single_paths=True), True
    if name == "no-cross":
        return _compensated(base, frozenset()), True
    if name.startswith("cross:"):
        try:
            layers = frozenset(int(v) for v in name[len("cross:"):].split(","))
        except ValueError as exc:
            raise ConfigurationError(f"bad variant name {name!r}") from exc
        return _compensated(base, layers), True
    raise ConfigurationError(f"unknown ablation variant {name!r}")


def _compensated(base: McnnConfig, cross_enabled: frozenset[int]) -> McnnConfig:
    """Change the cross-enabled set, redistributing removed cross maps."""
    layers = []
    for j, spec in enumerate(base.conv_layers, start=1):
        had = j in base.cross_enabled
        has = j in cross_enabled
        if had and not has:
            extra = spec.cross_maps // 2
            layers.append(
                ConvSpec(
                    spec.single_maps + extra + spec.cross_maps % 2,
                    spec.cross_maps,
                    spec.kernel,
                    spec.stride,
                    spec.padding,
                )
            )
        else:
            layers.append(spec)
    return replace(base, conv_layers=tuple(layers), cross_enabled=cross_enabled, siamese=False)


@dataclass
class VariantResult:
    name: str
    report: MetricsReport
    train_seconds: float
    checkpoint: Checkpoint


def run_ablation(
    corpus: Corpus,
    base_config: McnnConfig,
    train_cfg: TrainConfig,
    pipeline_options: dict,
    variants: list[str] | None = None,
    out_dir: str | Path | None = None,
    eval_split: str = "test",
    progress: Callable[[str], None] | None = None,
) -> list[VariantResult]:
    """Train and evaluate every variant on the same corpus and protocol.

    The ``no-ss`` variant reuses the most recent ``full`` training run when
    one exists in the sweep; otherwise it trains its own. Writes a CSV, a
    JSON report, an aligned text table, and a bar chart when `out_dir` is
    given.
    """
    if variants is None:
        variants = default_variants(base_config)
    say = progress or (lambda _msg: None)
    results: list[VariantResult] = []
    trained: dict[str, tuple[Checkpoint, object]] = {}

    for name in variants:
        cfg, use_ss = variant_config(base_config, name)
        reuse_key = "full" if name == "no-ss" else name
        started = time.perf_counter()
        if reuse_key in trained:
            ck, index = trained[reuse_key]
        else:
            say(f"training variant {name}")
            ck, _logs, index = train(corpus, cfg, train_cfg)
            trained[reuse_key] = (ck, index)
        train_seconds = time.perf_counter() - started

        say(f"evaluating variant {name}")
        opts = dict(pipeline_options)
        opts["use_superpixels"] = use_ss and pipeline_options.get("use_superpixels", True)
        matcher = network_matcher(ck)
        region_cache: dict = {}
        counts = []
        for qid in corpus.split_ids(eval_split):
            entry = corpus.entries[qid]
            result, _maps = parse(
                entry.image,
                corpus,
                index,
                matcher,
                region_cache=region_cache,
                **opts,
            )
            counts.append(evaluate(result.label_map, entry.label_map, corpus.num_labels))
        rep = report(merge_counts(counts), corpus.label_names)
        results.append(VariantResult(name, rep, train_seconds, ck))
        say(f"variant {name}: avg F1 {rep.avg_f1 * 100:.2f}%")

    if out_dir is not None:
        write_ablation_outputs(results, Path(out_dir))
    return results


def format_variant_table(results: list[VariantResult]) -> str:
    header = (
        f"{'variant':<16}  {'accuracy':>9}  {'fg acc':>7}  {'avg prec':>9}  "
        f"{'avg recall':>10}  {'avg F1':>7}"
    )
    lines = [header, "-" * len(header)]
    for r in results:
        rep = r.report
        lines.append(
            f"{r.name:<16}  {rep.accuracy * 100:>8.2f}%  {rep.fg_accuracy * 100:>6.2f}%  "
            f"{rep.avg_precision * 100:>8.2f}%  {rep.avg_recall * 100:>9.2f}%  "
            f"{rep.avg_f1 * 100:>6.2f}%"
        )
    return "\n".join(lines)


def write_ablation_outputs(results: list[VariantResult], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "accuracy", "fg_accuracy", "avg_precision", "avg_recall", "avg_f1"]
        )
        for r in results:
            rep = r.report
            writer.writerow(
                [
                    r.name,
                    f"{rep.accuracy:.6f}",
                    f"{rep.fg_accuracy:.6f}",
                    f"{rep.avg_precision:.6f}",
                    f"{rep.avg_recall:.6f}",
                    f"{rep.avg_f1:.6f}",
                ]
            )
    payload = {r.name: r.report.to_dict() for r in results}
    (out_dir / "ablation.json").write_text(json.dumps(payload, indent=1))
    (out_dir / "ablation.txt").write_text(format_variant_table(results) + "\n")
    reporting.save_variant_chart([(r.name, r.report) for r in results], out_dir / "ablation.png")
