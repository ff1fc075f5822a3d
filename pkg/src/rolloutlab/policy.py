"""Tabular contextual softmax policies over a small token vocabulary.

A policy conditions on the last ``window`` tokens of (prompt + partial
response), left-padded with a reserved pad symbol that sits outside the token
id range, and maps every such context to a softmax distribution over the
vocabulary. The dense table representation keeps scoring, sampling, exact
enumeration and finite-difference checks all feasible on a laptop.

Policies are immutable: :func:`update` returns a new object, so any reference
you keep doubles as a snapshot. Probabilities are stored and returned as plain
probabilities (not logs) everywhere in this package; ratio computations that
could underflow are done in log space by the consumers and documented there.

Scoring and sampling only read the table and are safe to run concurrently
across sequences; updates construct a fresh policy and never touch an existing
one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Vocab",
    "Trajectory",
    "Policy",
    "UpdateConfig",
    "UpdateStats",
    "DivergenceError",
    "update",
    "surrogate_objective",
    "policy_entropy",
    "save_policy",
    "load_policy",
]

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """A gradient step produced non-finite values."""


@dataclass(frozen=True)
class Vocab:
    """Token id space: ids run 0..size-1 and include one end-of-sequence id."""

    size: int
    eos_id: int

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")
        if not 0 <= self.eos_id < self.size:
            raise ValueError(f"eos_id {self.eos_id} outside [0, {self.size})")


@dataclass
class Trajectory:
    """One prompt-conditioned response with per-token generation probabilities.

    ``gen_probs[i]`` is the probability of ``response[i]`` under the policy
    that produced it; for reused tokens that is the verifying policy's
    re-scored probability, so importance ratios downstream are well defined.
    """

    prompt_id: int
    prompt: tuple[int, ...]
    response: tuple[int, ...]
    gen_probs: np.ndarray
    reward: float = 0.0

    def __post_init__(self) -> None:
        self.prompt = tuple(int(t) for t in self.prompt)
        self.response = tuple(int(t) for t in self.response)
        self.gen_probs = np.asarray(self.gen_probs, dtype=np.float64)
        if len(self.gen_probs) != len(self.response):
            raise ValueError(
                f"gen_probs length {len(self.gen_probs)} != response length {len(self.response)}"
            )
        if len(self.gen_probs) and not ((self.gen_probs > 0.0) & (self.gen_probs <= 1.0)).all():
            raise ValueError("gen_probs must lie in (0, 1]")


class Policy:
    """Contextual softmax policy with a dense logit table.

    The table has shape ``(size+1,) * window + (size,)``; context axis index
    ``size`` is the pad symbol used to left-pad short histories.
    """

    def __init__(
        self,
        vocab: Vocab,
        window: int = 3,
        temperature: float = 1.0,
        logits: np.ndarray | None = None,
    ) -> None:
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        if not temperature > 0.0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.vocab = vocab
        self.window = int(window)
        self.temperature = float(temperature)
        shape = (vocab.size + 1,) * self.window + (vocab.size,)
        if logits is None:
            logits = np.zeros(shape)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ValueError(f"logit table shape {logits.shape} != expected {shape}")
        if not np.isfinite(logits).all():
            raise ValueError("logit table contains non-finite values")
        logits.setflags(write=False)
        self.logits = logits
        self.pad_id = vocab.size
        self.n_contexts = (vocab.size + 1) ** self.window
        self._probs_flat: np.ndarray | None = None
        self._cum_flat: np.ndarray | None = None
        # sliding a context window one token is (flat % mod) * base + token
        self._ctx_base = vocab.size + 1
        self._ctx_mod = (vocab.size + 1) ** (self.window - 1)

    @classmethod
    def uniform(cls, vocab: Vocab, window: int = 3, temperature: float = 1.0) -> "Policy":
        """All-zero logits: every context gives the uniform distribution."""
        return cls(vocab, window=window, temperature=temperature)

    @classmethod
    def context_free(
        cls,
        vocab: Vocab,
        next_dist: Sequence[float],
        window: int = 1,
        temperature: float = 1.0,
    ) -> "Policy":
        """Policy whose next-token distribution ignores the context.

        Handy for hand-checkable fixtures; ``next_dist`` must be strictly
        positive and sum to 1.
        """
        dist = np.asarray(next_dist, dtype=np.float64)
        if dist.shape != (vocab.size,):
            raise ValueError(f"next_dist must have length {vocab.size}")
        if not (dist > 0.0).all():
            raise ValueError("next_dist entries must be strictly positive")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise ValueError("next_dist must sum to 1")
        row = np.log(dist) * temperature
        shape = (vocab.size + 1,) * window + (vocab.size,)
        return cls(vocab, window=window, temperature=temperature, logits=np.broadcast_to(row, shape))

    # -- probability tables -------------------------------------------------

    @property
    def probs_flat(self) -> np.ndarray:
        """(n_contexts, size) softmax table, built lazily and cached."""
        if self._probs_flat is None:
            # extreme logit gaps may overflow the shift to -inf; exp maps that
            # to 0 and update() rejects the resulting degenerate table
            with np.errstate(over="ignore"):
                z = self.logits.reshape(self.n_contexts, self.vocab.size) / self.temperature
                z = z - z.max(axis=1, keepdims=True)
                e = np.exp(z)
            probs = e / e.sum(axis=1, keepdims=True)
            probs.setflags(write=False)
            self._probs_flat = probs
        return self._probs_flat

    @property
    def _cum(self) -> np.ndarray:
        if self._cum_flat is None:
            cum = np.cumsum(self.probs_flat, axis=1)
            cum.setflags(write=False)
            self._cum_flat = cum
        return self._cum_flat

    # -- context handling ----------------------------------------------------

    def _check_tokens(self, tokens: Sequence[int], what: str) -> None:
        for t in tokens:
            if not 0 <= int(t) < self.vocab.size:
                raise ValueError(f"invalid token id {t} in {what} (vocab size {self.vocab.size})")

    def context_index(self, history: Sequence[int]) -> int:
        """Flat table row for the last ``window`` tokens, left-padded."""
        tail = history[max(0, len(history) - self.window) :]
        flat = 0
        for _ in range(self.window - len(tail)):
            flat = flat * self._ctx_base + self.pad_id
        for t in tail:
            flat = flat * self._ctx_base + int(t)
        return flat

    def _context_rows(self, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
        """Flat context indices for every response position."""
        rows = np.empty(len(response), dtype=np.int64)
        flat = self.context_index(prompt)
        base, mod = self._ctx_base, self._ctx_mod
        for i, tok in enumerate(response):
            rows[i] = flat
            flat = (flat % mod) * base + int(tok)
        return rows

    # -- core operations -----------------------------------------------------

    def next_token_dist(self, context: Sequence[int]) -> np.ndarray:
        """Next-token distribution given (prompt + partial response) tokens.

        Strictly positive, sums to 1; only the last ``window`` tokens matter.
        """
        self._check_tokens(context, "context")
        return self.probs_flat[self.context_index(context)].copy()

    def score_sequence(self, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
        """Per-token probability of ``response`` under this policy.

        Entry i is P(response[i] | prompt, response[:i]). All positions are
        scored from the table in one pass, mirroring a parallel forward pass.
        """
        if len(response) == 0:
            raise ValueError("response must be non-empty")
        self._check_tokens(prompt, "prompt")
        self._check_tokens(response, "response")
        rows = self._context_rows(prompt, response)
        toks = np.asarray(response, dtype=np.int64)
        return self.probs_flat[rows, toks].copy()

    def sample_continuation(
        self,
        prompt: Sequence[int],
        prefix: Sequence[int],
        max_len: int,
        rng: np.random.Generator,
    ) -> tuple[tuple[int, ...], np.ndarray]:
        """Autoregressively extend ``prefix`` until eos or ``max_len`` response tokens.

        Returns the newly sampled tokens and their probabilities. One uniform
        is consumed per sampled token. ``max_len`` bounds the total response
        length (prefix included).
        """
        if len(prefix) > max_len:
            raise ValueError(f"prefix length {len(prefix)} exceeds max_len {max_len}")
        self._check_tokens(prompt, "prompt")
        self._check_tokens(prefix, "prefix")
        eos = self.vocab.eos_id
        response = list(prefix)
        if response and response[-1] == eos:
            return (), np.zeros(0)
        new_tokens: list[int] = []
        probs: list[float] = []
        cum = self._cum
        table = self.probs_flat
        base, mod = self._ctx_base, self._ctx_mod
        flat = self.context_index(tuple(prompt) + tuple(response))
        while len(response) < max_len:
            u = rng.random()
            tok = int(np.searchsorted(cum[flat], u, side="right"))
            if tok >= self.vocab.size:  # guard against cumsum rounding at 1.0
                tok = self.vocab.size - 1
            new_tokens.append(tok)
            probs.append(float(table[flat, tok]))
            response.append(tok)
            flat = (flat % mod) * base + tok
            if tok == eos:
                break
        return tuple(new_tokens), np.asarray(probs)


def policy_entropy(policy: Policy, contexts: Sequence[Sequence[int]]) -> float:
    """Mean Shannon entropy (nats) of the next-token distribution over contexts."""
    if len(contexts) == 0:
        raise ValueError("contexts must be non-empty")
    total = 0.0
    for ctx in contexts:
        policy._check_tokens(ctx, "context")
        p = policy.probs_flat[policy.context_index(ctx)]
        total += float(-(p * np.log(p)).sum())
    return total / len(contexts)


# -- gradient update ----------------------------------------------------------


@dataclass(frozen=True)
class UpdateConfig:
    learning_rate: float = 0.5
    clip_eps_low: float = 0.2
    clip_eps_high: float = 0.2
    kl_coef: float = 1e-4


@dataclass(frozen=True)
class UpdateStats:
    """Diagnostics of one gradient step.

    clip_fraction: share of tokens where the clipped surrogate branch was
    strictly active at the evaluation point.
    mean_kl: exact categorical KL(updated policy || pre-update policy),
    averaged over the batch's token contexts (computed after the step).
    mean_entropy: next-token entropy of the pre-update policy, averaged over
    the batch's token contexts.
    """

    clip_fraction: float
    mean_kl: float
    mean_entropy: float
    n_tokens: int


def _batch_arrays(
    policy: Policy,
    batch: Sequence[tuple[Trajectory, float, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flatten a batch into (context rows, tokens, advantages, old probs)."""
    ctx_list: list[int] = []
    tok_list: list[int] = []
    adv_list: list[float] = []
    old_parts = []
    base, mod = policy._ctx_base, policy._ctx_mod
    for traj, advantage, old_probs in batch:
        if not np.isfinite(advantage):
            raise ValueError(f"non-finite advantage for prompt {traj.prompt_id}")
        old = np.asarray(old_probs, dtype=np.float64)
        if len(old) != len(traj.response):
            raise ValueError(
                f"old_probs length {len(old)} != response length {len(traj.response)}"
            )
        if len(old) and not ((old > 0.0) & (old <= 1.0)).all():
            raise ValueError("old_probs must lie in (0, 1]")
        flat = policy.context_index(traj.prompt)
        a = float(advantage)
        for tok in traj.response:
            ctx_list.append(flat)
            tok_list.append(tok)
            adv_list.append(a)
            flat = (flat % mod) * base + tok
        old_parts.append(old)
    return (
        np.asarray(ctx_list, dtype=np.int64),
        np.asarray(tok_list, dtype=np.int64),
        np.asarray(adv_list),
        np.concatenate(old_parts) if old_parts else np.zeros(0),
    )


def surrogate_objective(
    policy: Policy,
    batch: Sequence[tuple[Trajectory, float, np.ndarray]],
    config: UpdateConfig,
    ref_policy: Policy | None = None,
) -> float:
    """Clipped-surrogate objective (summed over tokens) minus the KL penalty.

    Per token: ``min(r*A, clip(r, 1-eps_low, 1+eps_high)*A)`` with
    ``r = pi(token|ctx) / old_prob``, minus ``kl_coef * KL(pi(.|ctx) || ref(.|ctx))``.
    Token-sum aggregation keeps the per-event step size independent of batch
    size, which is the natural choice for a tabular policy where only visited
    contexts move. :func:`update` ascends this with ``ref_policy`` fixed to
    the pre-update policy; exposing the scalar lets tests difference it
    numerically.
    """
    ref = policy if ref_policy is None else ref_policy
    ctx, tok, adv, old = _batch_arrays(policy, batch)
    n = len(tok)
    rows = policy.probs_flat[ctx]
    r = rows[np.arange(n), tok] / old
    clipped = np.clip(r, 1.0 - config.clip_eps_low, 1.0 + config.clip_eps_high)
    surr = np.minimum(r * adv, clipped * adv)
    ref_rows = ref.probs_flat[ctx]
    kl = (rows * (np.log(rows) - np.log(ref_rows))).sum(axis=1)
    return float((surr - config.kl_coef * kl).sum())


def update(
    policy: Policy,
    batch: Sequence[tuple[Trajectory, float, np.ndarray]],
    config: UpdateConfig,
) -> tuple[Policy, UpdateStats]:
    """One gradient-ascent step on :func:`surrogate_objective`.

    The KL penalty reference is the pre-update policy itself, so its gradient
    vanishes at the evaluation point for a single step; it is still part of
    the objective and is exercised with external references in tests.
    Returns a new policy; ``policy`` is left untouched.
    """
    ctx, tok, adv, old = _batch_arrays(policy, batch)
    n = len(tok)
    if n == 0:
        raise ValueError("update batch contains no tokens")
    rows = policy.probs_flat[ctx]
    r = rows[np.arange(n), tok] / old
    upper = 1.0 + config.clip_eps_high
    lower = 1.0 - config.clip_eps_low
    clip_active = ((adv > 0.0) & (r > upper)) | ((adv < 0.0) & (r < lower))
    # d r / d z[ctx, j] = r * (1[j == tok] - pi(j|ctx)) / temperature; the
    # clipped branch contributes no gradient where it binds.
    coef = np.where(clip_active, 0.0, adv * r) / policy.temperature
    grad = np.zeros((policy.n_contexts, policy.vocab.size))
    np.add.at(grad, (ctx, tok), coef)
    np.add.at(grad, ctx, -coef[:, None] * rows)
    # KL(pi || ref) gradient with ref = pre-update policy is identically zero
    # at the evaluation point, so no KL term is accumulated here.
    if not np.isfinite(grad).all():
        raise DivergenceError("non-finite gradient")
    new_logits = policy.logits + config.learning_rate * grad.reshape(policy.logits.shape)
    if not np.isfinite(new_logits).all():
        raise DivergenceError("non-finite logits after update")
    new_policy = Policy(policy.vocab, policy.window, policy.temperature, new_logits)
    if not (new_policy.probs_flat > 0.0).all():
        # softmax underflow: the step was so large the distribution degenerated
        raise DivergenceError("probability underflow after update")
    new_rows = new_policy.probs_flat[ctx]
    mean_kl = float((new_rows * (np.log(new_rows) - np.log(rows))).sum(axis=1).mean())
    mean_entropy = float(-(rows * np.log(rows)).sum(axis=1).mean())
    stats = UpdateStats(
        clip_fraction=float(clip_active.mean()),
        mean_kl=mean_kl,
        mean_entropy=mean_entropy,
        n_tokens=n,
    )
    return new_policy, stats


# -- checkpointing -------------------------------------------------------------


def save_policy(policy: Policy, path: str | Path) -> None:
    """Write a versioned binary checkpoint; round-trips bit-exactly."""
    np.savez(
        path,
        version=np.int64(CHECKPOINT_VERSION),
        vocab_size=np.int64(policy.vocab.size),
        eos_id=np.int64(policy.vocab.eos_id),
        window=np.int64(policy.window),
        temperature=np.float64(policy.temperature),
        logits=policy.logits,
    )


def load_policy(path: str | Path) -> Policy:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        vocab = Vocab(size=int(data["vocab_size"]), eos_id=int(data["eos_id"]))
        return Policy(
            vocab,
            window=int(data["window"]),
            temperature=float(data["temperature"]),
            logits=data["logits"],
        )
