"""Ablation runs: every (arm, seed) trained and evaluated on one shared
dataset, summarized as per-arm mean and spread, plus the directional
checks that say whether graph context actually bought anything."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .. import evalkit as ek
from ..errors import ConfigError, ContractError, GraphAdsError
from ..synthgen import Dataset, load_dataset
from .config import ARM_ENCODER_ONLY, ARM_FULL, ARM_GAT_ONLY, ARMS, RunConfig
from .evaluate import evaluate
from .train import train

RESULTS_NAME = "results.tsv"
SUMMARY_NAME = "summary.tsv"
VERDICT_NAME = "ablation.json"

SUMMARY_METRICS = ("bleu", "semantic_similarity", "recall_at_1",
                   "recall_at_5", "recall_at_10", "mrr", "simulated_ctr",
                   "simulated_cvr", "ambiguous_top1")

# margins the full model must clear over the single-mechanism arms
RECALL10_MARGIN = 0.02
AMBIGUOUS_MARGIN = 0.10


@dataclass(frozen=True)
class AblationResult:
    reports: tuple[ek.MetricsReport, ...]
    failures: tuple[tuple[str, int, str], ...]
    summary: dict[str, dict[str, tuple[float, float]]]
    split_digests: dict[int, str]
    ordering_ok: bool
    ordering_notes: tuple[str, ...]


def _metric_value(report: ek.MetricsReport, metric: str) -> float:
    if metric.startswith("recall_at_"):
        return report.recall_at_k[int(metric.rsplit("_", 1)[1])]
    if metric == "semantic_similarity":
        return report.mean_semantic_similarity
    return getattr(report, metric)


def summarize(reports, arms) -> dict[str, dict[str, tuple[float, float]]]:
    out: dict[str, dict[str, tuple[float, float]]] = {}
    for arm in arms:
        rows = [r for r in reports if r.arm == arm]
        stats = {}
        for metric in SUMMARY_METRICS:
            values = [_metric_value(r, metric) for r in rows]
            if values:
                stats[metric] = (float(np.mean(values)),
                                 float(np.std(values)))
        out[arm] = stats
    return out


def check_ordering(summary: dict, n_seeds: int,
                   counts: dict[str, int]) -> tuple[bool, tuple[str, ...]]:
    notes = []
    needed = (ARM_FULL, ARM_ENCODER_ONLY, ARM_GAT_ONLY)
    if any(counts.get(a, 0) < n_seeds for a in needed):
        notes.append("incomplete arms: " + ", ".join(
            f"{a}={counts.get(a, 0)}/{n_seeds}" for a in needed))
        return False, tuple(notes)

    def mean(arm, metric):
        return summary[arm][metric][0]

    ok = True
    checks = [
        ("recall_at_10 vs encoder_only", "recall_at_10", ARM_ENCODER_ONLY,
         RECALL10_MARGIN),
        ("recall_at_10 vs gat_only", "recall_at_10", ARM_GAT_ONLY,
         RECALL10_MARGIN),
        ("simulated_ctr vs encoder_only", "simulated_ctr",
         ARM_ENCODER_ONLY, 0.0),
        ("simulated_ctr vs gat_only", "simulated_ctr", ARM_GAT_ONLY, 0.0),
        ("semantic_similarity vs encoder_only", "semantic_similarity",
         ARM_ENCODER_ONLY, 0.0),
        ("semantic_similarity vs gat_only", "semantic_similarity",
         ARM_GAT_ONLY, 0.0),
        ("ambiguous_top1 vs encoder_only", "ambiguous_top1",
         ARM_ENCODER_ONLY, AMBIGUOUS_MARGIN),
    ]
    for label, metric, other, needed_margin in checks:
        margin = mean(ARM_FULL, metric) - mean(other, metric)
        passed = margin >= needed_margin if needed_margin > 0 \
            else margin > 0
        ok = ok and passed
        notes.append(f"{label}: margin {margin:+.4f} "
                     f"(need {'>=' if needed_margin > 0 else '>'} "
                     f"{needed_margin:g}) -> "
                     f"{'pass' if passed else 'FAIL'}")
    return ok, tuple(notes)


def write_summary(path, summary: dict, counts: dict, n_seeds: int,
                  arms) -> None:
    header = ["arm", "n_runs", "complete"]
    for metric in SUMMARY_METRICS:
        header += [f"{metric}_mean", f"{metric}_std"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for arm in arms:
            row = [arm, str(counts.get(arm, 0)),
                   "yes" if counts.get(arm, 0) == n_seeds else "no"]
            for metric in SUMMARY_METRICS:
                mean, std = summary[arm].get(metric, (float("nan"),
                                                      float("nan")))
                row += [f"{mean:.6f}", f"{std:.6f}"]
            fh.write("\t".join(row) + "\n")


def run_ablation(base_config: RunConfig, out_dir,
                 arms=ARMS, seeds=(42, 43, 44),
                 dataset: Dataset | None = None) -> AblationResult:
    arms = tuple(arms)
    seeds = tuple(int(s) for s in seeds)
    if len(arms) < 2 or len(set(arms)) != len(arms):
        raise ConfigError(f"need >= 2 distinct arms, got {arms}")
    if len(seeds) < 3 or len(set(seeds)) != len(seeds):
        raise ConfigError(f"need >= 3 distinct seeds, got {seeds}")
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise ConfigError(f"unknown arms {unknown}; choose from {ARMS}")
    if dataset is None:
        dataset = load_dataset(base_config.data_dir)
    os.makedirs(out_dir, exist_ok=True)

    reports: list[ek.MetricsReport] = []
    failures: list[tuple[str, int, str]] = []
    digests: dict[int, str] = {}
    for seed in seeds:
        for arm in arms:
            cfg = dataclasses.replace(base_config, arm=arm, seed=seed)
            sub = os.path.join(os.fspath(out_dir), f"{arm}_seed{seed}")
            try:
                result = train(cfg, dataset=dataset, out_dir=sub)
                expected = digests.setdefault(seed, result.split_digest)
                if result.split_digest != expected:
                    raise ContractError(
                        f"split drift at seed {seed}: arm {arm} saw "
                        f"{result.split_digest}, expected {expected}")
                reports.append(evaluate(cfg, state=result.state))
            except GraphAdsError as err:
                failures.append((arm, seed, str(err)))

    counts = {arm: sum(1 for r in reports if r.arm == arm) for arm in arms}
    summary = summarize(reports, arms)
    ordering_ok, notes = check_ordering(summary, len(seeds), counts)

    ek.write_results(os.path.join(os.fspath(out_dir), RESULTS_NAME),
                     reports)
    write_summary(os.path.join(os.fspath(out_dir), SUMMARY_NAME), summary,
                  counts, len(seeds), arms)
    verdict = {
        "arms": list(arms),
        "seeds": list(seeds),
        "split_digests": {str(s): d for s, d in sorted(digests.items())},
        "failures": [{"arm": a, "seed": s, "error": e}
                     for a, s, e in failures],
        "ordering_ok": ordering_ok,
        "ordering_notes": list(notes),
    }
    with open(os.path.join(os.fspath(out_dir), VERDICT_NAME), "w",
              encoding="utf-8") as fh:
        json.dump(verdict, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return AblationResult(reports=tuple(reports), failures=tuple(failures),
                          summary=summary, split_digests=digests,
                          ordering_ok=ordering_ok, ordering_notes=notes)
