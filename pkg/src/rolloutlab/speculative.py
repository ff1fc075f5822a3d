"""Verify-then-resume reuse of cached rollouts under the current policy.

A cached response acts as a draft. Each draft token is accepted with
probability ``min(1, lenience * p_new / p_old)`` where ``p_old`` is the
probability recorded when the rollout was generated and ``p_new`` is the
current policy's probability at the same position. The first rejected
position truncates the draft; everything before it is kept as the verified
prefix and the current policy generates the rest.

Two resume rules are provided:

- ``"direct"``: the rejection-position token is resampled from the current
  policy's full next-token distribution. This is the cheap rule used during
  training, but the assembled sequence distribution is *not* exactly the
  current policy's (the rejected token's probability mass is not
  redistributed); the oracle module measures that gap.
- ``"residual"``: the rejection-position token is drawn from the normalized
  positive part of (current - old) next-token distributions, the classical
  speculative-sampling correction. Exact for lenience 1 and only valid there.

Ratios are computed in log space: ``min(1, l * new/old)`` equals
``exp(min(0, log l + log new - log old))``, which cannot overflow for
probabilities in (0, 1]. Acceptance tests ``u < alpha`` with ``u`` uniform on
[0, 1); for continuous draws this is almost surely identical to ``u <= alpha``
and it makes the boundary behaviors exact: ``alpha == 1`` always accepts and
``alpha == 0`` always rejects.

Everything here is pure given (policy, cache entry, RNG stream); batch items
can be verified and resumed independently and in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .policy import Policy, Trajectory

if TYPE_CHECKING:
    from .cache import CachedRollout

__all__ = [
    "Lenience",
    "RESUME_DIRECT",
    "RESUME_RESIDUAL",
    "RESUME_MODES",
    "VerificationResult",
    "ConfigError",
    "InternalInvariantError",
    "acceptance_probs",
    "find_rejection",
    "residual_dist",
    "resume",
    "speculative_rollout",
]

RESUME_DIRECT = "direct"
RESUME_RESIDUAL = "residual"
RESUME_MODES = (RESUME_DIRECT, RESUME_RESIDUAL)


class ConfigError(ValueError):
    """Invalid combination of knobs (e.g. residual resume with lenience != 1)."""


class InternalInvariantError(RuntimeError):
    """A state the algorithm guarantees impossible was reached."""


@dataclass(frozen=True)
class Lenience:
    """Multiplicative relaxation of the acceptance ratio.

    kind "finite" carries a positive value (and its log); "zero" means no
    reuse ever, "infinite" means every draft token is accepted.
    """

    kind: str
    value: float
    log_value: float
    label: str

    @classmethod
    def finite(cls, value: float, label: str | None = None) -> "Lenience":
        value = float(value)
        if not value > 0.0 or not math.isfinite(value):
            raise ValueError(f"finite lenience must be a positive real, got {value}")
        return cls("finite", value, math.log(value), label if label is not None else repr(value))

    @classmethod
    def zero(cls) -> "Lenience":
        return cls("zero", 0.0, -math.inf, "0")

    @classmethod
    def infinite(cls) -> "Lenience":
        return cls("infinite", math.inf, math.inf, "inf")

    @classmethod
    def parse(cls, token: str) -> "Lenience":
        """Parse "0", "inf", a plain number, or "e^x" exponent notation."""
        text = token.strip()
        low = text.lower()
        if low in ("inf", "infinity"):
            return cls.infinite()
        if low.startswith("e^"):
            try:
                exponent = float(text[2:])
            except ValueError:
                raise ValueError(f"unparseable lenience token: {token!r}") from None
            if not -700.0 <= exponent <= 700.0:
                raise ValueError(f"lenience exponent out of range: {token!r}")
            # keep the exponent exactly: exp/log round-tripping loses bits
            return cls("finite", math.exp(exponent), exponent, text)
        try:
            value = float(text)
        except ValueError:
            raise ValueError(f"unparseable lenience token: {token!r}") from None
        if value == 0.0:
            return cls.zero()
        return cls.finite(value, label=text)

    @property
    def is_one(self) -> bool:
        return self.kind == "finite" and self.value == 1.0


@dataclass(frozen=True)
class VerificationResult:
    """Outcome of verifying one cached rollout.

    ``rejection_position`` is 1-based; ``len(accept_probs) + 1`` means the
    whole draft was accepted. ``uniforms`` holds only the draws actually
    consumed (one per scanned token).
    """

    accept_probs: np.ndarray
    uniforms: np.ndarray
    rejection_position: int
    reused_tokens: int
    generated_tokens: int
    fully_reused: bool


def acceptance_probs(
    old_probs: np.ndarray, new_probs: np.ndarray, lenience: Lenience
) -> np.ndarray:
    """Per-token acceptance probabilities ``min(1, lenience * new/old)``."""
    old = np.asarray(old_probs, dtype=np.float64)
    new = np.asarray(new_probs, dtype=np.float64)
    if old.shape != new.shape:
        raise ValueError(f"length mismatch: old {old.shape} vs new {new.shape}")
    for name, arr in (("old_probs", old), ("new_probs", new)):
        if len(arr) and not ((arr > 0.0) & (arr <= 1.0)).all():
            raise ValueError(f"{name} must lie in (0, 1]")
    if lenience.kind == "zero":
        return np.zeros_like(old)
    if lenience.kind == "infinite":
        return np.ones_like(old)
    return np.exp(np.minimum(0.0, lenience.log_value + np.log(new) - np.log(old)))


def find_rejection(
    accept_probs: np.ndarray, rng_stream: np.random.Generator
) -> tuple[int, np.ndarray]:
    """Scan tokens in order, drawing one uniform per scanned token.

    Returns the 1-based rejection position (``len + 1`` when every token is
    accepted) and the uniforms consumed. Scanning stops at the first
    rejection, so exactly ``min(position, len)`` draws are taken.
    """
    probs = np.asarray(accept_probs, dtype=np.float64)
    if len(probs) and not ((probs >= 0.0) & (probs <= 1.0)).all():
        raise ValueError("accept_probs must lie in [0, 1]")
    uniforms: list[float] = []
    for i, alpha in enumerate(probs):
        u = rng_stream.random()
        uniforms.append(u)
        if not u < alpha:
            return i + 1, np.asarray(uniforms)
    return len(probs) + 1, np.asarray(uniforms)


def residual_dist(current_dist: np.ndarray, old_dist: np.ndarray) -> np.ndarray:
    """Normalized positive part of (current - old).

    Identically zero residual means current == old, in which case the
    acceptance probability was 1 and no rejection can have happened; reaching
    that state indicates a bug upstream.
    """
    raw = np.maximum(np.asarray(current_dist) - np.asarray(old_dist), 0.0)
    total = raw.sum()
    if not total > 0.0:
        raise InternalInvariantError("residual distribution is identically zero")
    return raw / total


def resume(
    policy: Policy,
    prompt: Sequence[int],
    verified_prefix: Sequence[int],
    old_next_dist: np.ndarray | None,
    mode: str,
    max_len: int,
    rng_stream: np.random.Generator,
) -> tuple[tuple[int, ...], np.ndarray]:
    """Generate the suffix after the verified prefix.

    In residual mode ``old_next_dist`` must be the *old* policy's next-token
    distribution at the rejection context. The recorded probability of the
    residual-drawn token is the current policy's (the assembled sequence is
    distributed per the current policy, so that is the meaningful generation
    probability); later tokens come from ordinary sampling.
    """
    if mode not in RESUME_MODES:
        raise ConfigError(f"unknown resume mode {mode!r}")
    if mode == RESUME_DIRECT:
        return policy.sample_continuation(prompt, verified_prefix, max_len, rng_stream)
    if old_next_dist is None:
        raise ConfigError("residual resume requires the old policy's next-token distribution")
    current = policy.next_token_dist(tuple(prompt) + tuple(verified_prefix))
    residual = residual_dist(current, old_next_dist)
    cum = np.cumsum(residual)
    tok = int(np.searchsorted(cum, rng_stream.random(), side="right"))
    if tok >= policy.vocab.size:
        tok = policy.vocab.size - 1
    first_prob = float(current[tok])
    prefix = tuple(verified_prefix) + (tok,)
    if tok == policy.vocab.eos_id or len(prefix) >= max_len:
        return (tok,), np.asarray([first_prob])
    rest, rest_probs = policy.sample_continuation(prompt, prefix, max_len, rng_stream)
    return (tok,) + rest, np.concatenate([[first_prob], rest_probs])


def speculative_rollout(
    policy: Policy,
    prompt_id: int,
    prompt: Sequence[int],
    cached: "CachedRollout",
    lenience: Lenience,
    mode: str,
    max_len: int,
    rng_stream: np.random.Generator,
    old_policy: Policy | None = None,
) -> tuple[Trajectory, VerificationResult]:
    """Verify a cached rollout, resume from the first rejection, assemble.

    Only the first ``max_len`` cached tokens are ever verified or reused. The
    returned trajectory's ``gen_probs`` hold the current policy's re-scored
    probabilities for reused tokens and sampling probabilities for fresh ones.
    On full acceptance no generation happens at all. The single ``rng_stream``
    serves the acceptance uniforms first (in token order) and the resume draws
    after, so sweeps that share streams couple their rejection positions.
    """
    if cached.prompt_id != prompt_id:
        raise ValueError(f"cache entry for prompt {cached.prompt_id} used with prompt {prompt_id}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if mode == RESUME_RESIDUAL:
        if not lenience.is_one:
            raise ConfigError("residual resume is only exact (and only allowed) at lenience 1")
        if old_policy is None:
            raise ConfigError("residual resume requires the old policy")

    draft = tuple(cached.response[:max_len])
    old_probs = np.asarray(cached.old_probs[: len(draft)], dtype=np.float64)
    new_probs = policy.score_sequence(prompt, draft)
    accept = acceptance_probs(old_probs, new_probs, lenience)
    position, uniforms = find_rejection(accept, rng_stream)

    reused = position - 1
    prefix = draft[:reused]
    prefix_probs = new_probs[:reused]
    fully_reused = position == len(draft) + 1
    if fully_reused:
        suffix: tuple[int, ...] = ()
        suffix_probs = np.zeros(0)
    else:
        old_next = (
            old_policy.next_token_dist(tuple(prompt) + prefix)
            if mode == RESUME_RESIDUAL
            else None
        )
        suffix, suffix_probs = resume(
            policy, prompt, prefix, old_next, mode, max_len, rng_stream
        )

    trajectory = Trajectory(
        prompt_id=prompt_id,
        prompt=tuple(prompt),
        response=prefix + suffix,
        gen_probs=np.concatenate([prefix_probs, suffix_probs]),
    )
    result = VerificationResult(
        accept_probs=accept,
        uniforms=uniforms,
        rejection_position=position,
        reused_tokens=reused,
        generated_tokens=len(suffix),
        fully_reused=fully_reused,
    )
    return trajectory, result
