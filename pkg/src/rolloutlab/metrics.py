"""Redundancy and training-dynamics measurements.

Cross-epoch token overlap is measured with multiset unigram recall against the
previous epoch's response (how much of the old trajectory reappears, which
is the quantity prefix reuse exploits). An F1 variant is available for comparison.
KL diagnostics use the exact categorical KL(new || old), averaged over
contexts. All aggregates are plain means and therefore order-independent.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .policy import Policy

__all__ = [
    "rouge1",
    "OverlapReport",
    "epoch_overlap",
    "kl_estimate",
    "CSV_COLUMNS",
    "EPOCH_SUMMARY_STEP",
    "write_metrics_csv",
]

CSV_COLUMNS = [
    "epoch",
    "step",
    "tokens_generated",
    "tokens_reused",
    "speedup",
    "mean_prefix_len",
    "full_reuse_ratio",
    "rouge1",
    "mean_reward",
    "entropy",
    "kl",
    "clip_fraction",
]

EPOCH_SUMMARY_STEP = -1


def rouge1(
    reference: Sequence[int], candidate: Sequence[int], variant: str = "recall"
) -> float:
    """Unigram multiset overlap of ``candidate`` against ``reference``.

    "recall" (default) is |multiset intersection| / |reference|; "f1" is the
    harmonic mean with precision. An empty reference is defined as 0 and
    warned about, since it never occurs in normal traces.
    """
    if variant not in ("recall", "f1"):
        raise ValueError(f"unknown rouge1 variant {variant!r}")
    if len(reference) == 0:
        warnings.warn("rouge1 called with empty reference; returning 0", stacklevel=2)
        return 0.0
    overlap = sum((Counter(reference) & Counter(candidate)).values())
    recall = overlap / len(reference)
    if variant == "recall":
        return recall
    if len(candidate) == 0 or overlap == 0:
        return 0.0
    precision = overlap / len(candidate)
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class OverlapReport:
    """Per-epoch overlap summary; mean is the arithmetic mean of per_prompt."""

    epoch: int
    mean_rouge1: float
    prompt_ids: tuple[int, ...]
    per_prompt: tuple[float, ...]


def epoch_overlap(
    prev_epoch: Mapping[int, Sequence[Sequence[int]]],
    curr_epoch: Mapping[int, Sequence[Sequence[int]]],
    epoch: int = 0,
    variant: str = "recall",
) -> OverlapReport:
    """Overlap of the current epoch's responses against the previous epoch's.

    Both maps go prompt -> list of responses (one per group slot); slots are
    paired by index. Per-prompt values average over slots; the report mean
    averages over prompts.
    """
    missing = sorted(set(prev_epoch) ^ set(curr_epoch))
    if missing:
        raise ValueError(f"prompt keys differ between epochs: {missing}")
    prompt_ids = []
    values = []
    for prompt_id in sorted(prev_epoch):
        prev_group = prev_epoch[prompt_id]
        curr_group = curr_epoch[prompt_id]
        if len(prev_group) != len(curr_group):
            raise ValueError(
                f"prompt {prompt_id}: slot counts differ "
                f"({len(prev_group)} vs {len(curr_group)})"
            )
        pair_scores = [
            rouge1(prev, curr, variant=variant) for prev, curr in zip(prev_group, curr_group)
        ]
        prompt_ids.append(prompt_id)
        values.append(sum(pair_scores) / len(pair_scores))
    mean = sum(values) / len(values) if values else 0.0
    return OverlapReport(
        epoch=epoch,
        mean_rouge1=mean,
        prompt_ids=tuple(prompt_ids),
        per_prompt=tuple(values),
    )


def kl_estimate(
    policy_new: Policy, policy_old: Policy, contexts: Sequence[Sequence[int]]
) -> float:
    """Mean exact categorical KL(new || old) over the given contexts."""
    if len(contexts) == 0:
        raise ValueError("contexts must be non-empty")
    total = 0.0
    for ctx in contexts:
        p = policy_new.probs_flat[policy_new.context_index(ctx)]
        q = policy_old.probs_flat[policy_old.context_index(ctx)]
        total += float((p * (np.log(p) - np.log(q))).sum())
    return total / len(contexts)


def _format_cell(value: object) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return repr(value)
    return str(value)


def write_metrics_csv(path: str | Path, rows: Sequence[Mapping[str, object]]) -> None:
    """Append-only style metrics sink: fixed header, one row per record.

    Step rows carry their global step index; per-epoch summary rows use
    step = -1. Floats are written with shortest round-trip repr so identical
    runs produce byte-identical files.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_format_cell(row[col]) for col in CSV_COLUMNS])
