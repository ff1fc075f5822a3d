"""Brute-force sequence-distribution oracles for tiny instances.

Ground truth for the samplers. :func:`enumerate_direct` walks every response a
policy can emit (stopping at eos or the length budget) and records its exact
chain-rule probability. :func:`enumerate_spec` does the same for the
verify-then-resume procedure: it sums over every possible draft, every
rejection position (acceptance uniforms are integrated analytically, so the
probability of rejecting first at position n is ``prod(alpha_<n) * (1 -
alpha_n)``) and every continuation. No Monte Carlo noise anywhere, which makes
"the residual rule is exact at lenience 1" and "the direct rule is biased"
into crisp numerical statements.

Enumeration walks tokens in ascending id order, so results are independent of
any traversal or accumulation reordering. Instances are guarded to at most
10^6 candidate sequences.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import Policy
from .speculative import (
    RESUME_DIRECT,
    RESUME_MODES,
    RESUME_RESIDUAL,
    ConfigError,
    Lenience,
    acceptance_probs,
    residual_dist,
)

__all__ = [
    "SequenceDistribution",
    "MAX_SEQUENCES",
    "enumerate_direct",
    "enumerate_spec",
    "tv_distance",
    "save_distribution",
    "load_distribution",
]

SequenceDistribution = dict[tuple[int, ...], float]

MAX_SEQUENCES = 1_000_000

DIST_FORMAT = "rolloutlab-dist-v1"


def _check_enumerable(policy: Policy, max_len: int) -> None:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if policy.vocab.size**max_len > MAX_SEQUENCES:
        raise ValueError(
            f"instance too large to enumerate: {policy.vocab.size}^{max_len} sequences"
        )


def _extend(
    policy: Policy,
    prompt: tuple[int, ...],
    prefix: tuple[int, ...],
    max_len: int,
    out: SequenceDistribution,
    mass: float,
) -> None:
    """Add ``mass`` times the distribution of completions of ``prefix``."""
    if (prefix and prefix[-1] == policy.vocab.eos_id) or len(prefix) >= max_len:
        out[prefix] = out.get(prefix, 0.0) + mass
        return
    dist = policy.probs_flat[policy.context_index(prompt + prefix)]
    for token in range(policy.vocab.size):
        _extend(policy, prompt, prefix + (token,), max_len, out, mass * float(dist[token]))


def enumerate_direct(
    policy: Policy, prompt: Sequence[int], max_len: int
) -> SequenceDistribution:
    """Exact distribution of responses sampled directly from ``policy``.

    Keys are complete responses (ending in eos or truncated at ``max_len``);
    values sum to 1 up to float rounding.
    """
    _check_enumerable(policy, max_len)
    prompt = tuple(int(t) for t in prompt)
    out: SequenceDistribution = {}
    _extend(policy, prompt, (), max_len, out, 1.0)
    return out


def enumerate_spec(
    policy_new: Policy,
    policy_old: Policy,
    prompt: Sequence[int],
    max_len: int,
    lenience: Lenience,
    mode: str,
) -> SequenceDistribution:
    """Exact output distribution of verify-then-resume reuse.

    The draft is distributed as ``enumerate_direct(policy_old, ...)``; the
    current policy is ``policy_new``. Acceptance uniforms are integrated out
    analytically.
    """
    if mode not in RESUME_MODES:
        raise ConfigError(f"unknown resume mode {mode!r}")
    if mode == RESUME_RESIDUAL and not lenience.is_one:
        raise ConfigError("residual resume is only exact (and only allowed) at lenience 1")
    _check_enumerable(policy_new, max_len)
    _check_enumerable(policy_old, max_len)
    prompt = tuple(int(t) for t in prompt)
    drafts = enumerate_direct(policy_old, prompt, max_len)
    out: SequenceDistribution = {}
    for draft, p_draft in drafts.items():
        if p_draft == 0.0:
            continue
        new_probs = policy_new.score_sequence(prompt, draft)
        old_probs = policy_old.score_sequence(prompt, draft)
        alphas = acceptance_probs(old_probs, new_probs, lenience)
        prefix_mass = p_draft
        for n, alpha in enumerate(alphas, start=1):
            reject_mass = prefix_mass * (1.0 - float(alpha))
            if reject_mass > 0.0:
                prefix = draft[: n - 1]
                if mode == RESUME_DIRECT:
                    _extend(policy_new, prompt, prefix, max_len, out, reject_mass)
                else:
                    current = policy_new.probs_flat[policy_new.context_index(prompt + prefix)]
                    old = policy_old.probs_flat[policy_old.context_index(prompt + prefix)]
                    residual = residual_dist(current, old)
                    for token in range(policy_new.vocab.size):
                        if residual[token] > 0.0:
                            _extend(
                                policy_new,
                                prompt,
                                prefix + (token,),
                                max_len,
                                out,
                                reject_mass * float(residual[token]),
                            )
            prefix_mass *= float(alpha)
            if prefix_mass == 0.0:
                break
        if prefix_mass > 0.0:  # whole draft accepted: reused verbatim
            out[draft] = out.get(draft, 0.0) + prefix_mass
    return {seq: out[seq] for seq in sorted(out)}


def tv_distance(p: SequenceDistribution, q: SequenceDistribution) -> float:
    """Total variation distance, 0.5 * sum |p - q| over the union of supports."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in sorted(keys))


def save_distribution(dist: SequenceDistribution, path: str | Path) -> None:
    """Dump a distribution as text, probabilities in hex for bit-exactness."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DIST_FORMAT + "\n")
        for seq in sorted(dist):
            tokens = ",".join(str(t) for t in seq)
            fh.write(f"{tokens} {float(dist[seq]).hex()}\n")


def load_distribution(path: str | Path) -> SequenceDistribution:
    dist: SequenceDistribution = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != DIST_FORMAT:
            raise ValueError(f"line 1: expected header {DIST_FORMAT!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                tokens_text, prob_text = line.split()
                seq = tuple(int(t) for t in tokens_text.split(","))
                dist[seq] = float.fromhex(prob_text)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
    return dist
