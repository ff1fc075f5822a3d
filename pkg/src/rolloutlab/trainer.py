"""Toy verifiable-reward training loop with three rollout modes.

The task is digit-wise modular addition: the prompt spells two n-digit
operands separated by a ``+`` token, the target answer is the digit-wise sum
mod 10, and the reward is 1 exactly when the response (minus its terminal eos)
matches the target. Rewards are grouped per prompt and normalized into
group-relative advantages; the policy takes one clipped-surrogate gradient
step per batch.

Rollout modes:

- ``"vanilla"``: sample every response from scratch.
- ``"speculative"``: verify the previous epoch's cached response under the
  current policy and regenerate only past the first rejection.
- ``"random_reuse"``: keep a uniformly random prefix of the cached response
  (a control that reuses about half the tokens with no verification).

The cache is written in every mode (overlap diagnostics need last epoch's
responses) but only consulted for reuse in the reuse modes. Rollout cost is
counted in sampled tokens; speedups divide a paired vanilla run's token count
by the current run's, and the paired run shares the seed so epoch-1
trajectories are bit-identical across modes.

Determinism: every (epoch, prompt, slot) owns its own RNG substream, so batch
order never affects results and identical configs give identical runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cache import CachedRollout, RolloutCache
from .metrics import EPOCH_SUMMARY_STEP, rouge1
from .policy import (
    DivergenceError,
    Policy,
    Trajectory,
    UpdateConfig,
    UpdateStats,
    Vocab,
    update,
)
from .rng import substream
from .speculative import (
    RESUME_DIRECT,
    RESUME_MODES,
    RESUME_RESIDUAL,
    ConfigError,
    Lenience,
    VerificationResult,
    speculative_rollout,
)

__all__ = [
    "ModularSumTask",
    "reward",
    "group_advantages",
    "MODE_VANILLA",
    "MODE_SPECULATIVE",
    "MODE_RANDOM_REUSE",
    "ROLLOUT_MODES",
    "TrainConfig",
    "StepRecord",
    "EpochMetrics",
    "TraceRow",
    "RolloutBatch",
    "ExperimentResult",
    "rollout_batch",
    "run_experiment",
]

MODE_VANILLA = "vanilla"
MODE_SPECULATIVE = "speculative"
MODE_RANDOM_REUSE = "random_reuse"
ROLLOUT_MODES = (MODE_VANILLA, MODE_SPECULATIVE, MODE_RANDOM_REUSE)

# rng purposes: generation shares one stream per (epoch, prompt, slot) for
# verification uniforms and resume draws; the dataset has its own stream.
_DATASET_STREAM = "dataset"


@dataclass(frozen=True)
class ModularSumTask:
    """Digit-wise modular addition over token ids.

    Token ids 0-9 are digits, 10 is the ``+`` separator, 11 is eos. A prompt
    for ``18+29`` is (1, 8, 10, 2, 9); its target is (3, 7) because
    (1+2) mod 10 = 3 and (8+9) mod 10 = 7. Difficulty scales with ``digits``.
    """

    digits: int = 1

    PLUS: int = field(default=10, init=False)
    EOS: int = field(default=11, init=False)

    def __post_init__(self) -> None:
        if self.digits < 1:
            raise ValueError(f"digits must be >= 1, got {self.digits}")

    @property
    def vocab(self) -> Vocab:
        return Vocab(size=12, eos_id=self.EOS)

    def make_prompts(self, count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
        """Seeded prompt generator; draws operand digits uniformly."""
        prompts = []
        for _ in range(count):
            a = rng.integers(0, 10, size=self.digits)
            b = rng.integers(0, 10, size=self.digits)
            prompts.append(tuple(int(d) for d in a) + (self.PLUS,) + tuple(int(d) for d in b))
        return prompts

    def answer(self, prompt: Sequence[int]) -> tuple[int, ...]:
        """Target digit sequence for a prompt; deterministic and total."""
        expected = 2 * self.digits + 1
        if len(prompt) != expected or prompt[self.digits] != self.PLUS:
            raise ValueError(f"malformed prompt for {self.digits}-digit task: {tuple(prompt)}")
        a = prompt[: self.digits]
        b = prompt[self.digits + 1 :]
        return tuple((int(x) + int(y)) % 10 for x, y in zip(a, b))


def reward(task: ModularSumTask, prompt: Sequence[int], response: Sequence[int]) -> float:
    """1.0 iff the response, minus a terminal eos, equals the target exactly."""
    body = tuple(response)
    if body and body[-1] == task.EOS:
        body = body[:-1]
    return 1.0 if body == task.answer(prompt) else 0.0


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Group-relative advantages (r - mean) / (population std + 1e-6)."""
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("group advantages need at least 2 rewards")
    std = float(r.std())
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + 1e-6)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    steps_per_epoch: int
    prompts_per_batch: int
    group_size: int
    max_len: int
    seed: int
    digits: int = 1
    context_window: int = 3
    lenience: Lenience = Lenience.parse("e^0.5")
    resume_mode: str = RESUME_DIRECT
    rollout_mode: str = MODE_VANILLA
    learning_rate: float = 0.5
    kl_coef: float = 1e-4
    clip_eps_low: float = 0.2
    clip_eps_high: float = 0.2
    # initial logit offset on eos; a short-response prior makes the sparse
    # exact-match reward reachable at this scale
    init_eos_bias: float = 2.0

    @property
    def dataset_size(self) -> int:
        return self.steps_per_epoch * self.prompts_per_batch

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.steps_per_epoch < 1 or self.prompts_per_batch < 1:
            raise ConfigError("steps_per_epoch and prompts_per_batch must be >= 1")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2 (group advantages need spread)")
        if self.max_len < self.digits + 1:
            raise ConfigError(
                f"max_len {self.max_len} cannot fit a {self.digits}-digit answer plus eos"
            )
        if self.rollout_mode not in ROLLOUT_MODES:
            raise ConfigError(f"unknown rollout_mode {self.rollout_mode!r}")
        if self.resume_mode not in RESUME_MODES:
            raise ConfigError(f"unknown resume_mode {self.resume_mode!r}")
        if self.resume_mode == RESUME_RESIDUAL:
            if not self.lenience.is_one:
                raise ConfigError("residual resume requires lenience exactly 1")
            if self.steps_per_epoch != 1:
                # the old-policy snapshot is exact only when the whole epoch
                # rolls out under one policy
                raise ConfigError("residual resume requires steps_per_epoch == 1")
        if not self.learning_rate > 0.0:
            raise ConfigError("learning_rate must be positive")

    def update_config(self) -> UpdateConfig:
        return UpdateConfig(
            learning_rate=self.learning_rate,
            clip_eps_low=self.clip_eps_low,
            clip_eps_high=self.clip_eps_high,
            kl_coef=self.kl_coef,
        )


@dataclass(frozen=True)
class StepRecord:
    """One CSV row; mirrors the metrics sink columns."""

    epoch: int
    step: int
    tokens_generated: int
    tokens_reused: int
    speedup: float
    mean_prefix_len: float
    full_reuse_ratio: float
    rouge1: float
    mean_reward: float
    entropy: float
    kl: float
    clip_fraction: float

    def as_row(self) -> dict[str, object]:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "tokens_generated": self.tokens_generated,
            "tokens_reused": self.tokens_reused,
            "speedup": self.speedup,
            "mean_prefix_len": self.mean_prefix_len,
            "full_reuse_ratio": self.full_reuse_ratio,
            "rouge1": self.rouge1,
            "mean_reward": self.mean_reward,
            "entropy": self.entropy,
            "kl": self.kl,
            "clip_fraction": self.clip_fraction,
        }


@dataclass(frozen=True)
class EpochMetrics:
    """Per-epoch aggregates.

    Denominators: mean_verified_prefix_len averages over the items that were
    verified against a cache entry (0.0 when there were none, e.g. epoch 1);
    full_reuse_ratio counts fully reused items over ALL items; rouge1_overlap
    averages over the items with a previous-epoch reference; entropy, kl and
    clip_fraction average the per-step update diagnostics.
    """

    epoch: int
    tokens_generated: int
    tokens_reused: int
    speedup_vs_baseline: float
    mean_verified_prefix_len: float
    full_reuse_ratio: float
    rouge1_overlap: float
    mean_reward: float
    entropy: float
    mean_kl: float
    clip_fraction: float

    def as_row(self) -> dict[str, object]:
        return {
            "epoch": self.epoch,
            "step": EPOCH_SUMMARY_STEP,
            "tokens_generated": self.tokens_generated,
            "tokens_reused": self.tokens_reused,
            "speedup": self.speedup_vs_baseline,
            "mean_prefix_len": self.mean_verified_prefix_len,
            "full_reuse_ratio": self.full_reuse_ratio,
            "rouge1": self.rouge1_overlap,
            "mean_reward": self.mean_reward,
            "entropy": self.entropy,
            "kl": self.mean_kl,
            "clip_fraction": self.clip_fraction,
        }


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    prompt_id: int
    slot: int
    tokens: tuple[int, ...]


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    verifications: list[VerificationResult | None]
    overlaps: list[float | None]  # vs the previous epoch's cached response


@dataclass
class ExperimentResult:
    epoch_metrics: list[EpochMetrics]
    step_records: list[StepRecord]
    policy: Policy
    trace: list[TraceRow]
    cache: RolloutCache

    @property
    def step_tokens(self) -> list[int]:
        return [record.tokens_generated for record in self.step_records]


def _speedup(baseline_tokens: int, generated_tokens: int) -> float:
    if generated_tokens > 0:
        return baseline_tokens / generated_tokens
    return math.inf


def rollout_batch(
    policy: Policy,
    task: ModularSumTask,
    cache: RolloutCache,
    config: TrainConfig,
    epoch: int,
    step_in_epoch: int,
    dataset: Sequence[tuple[int, ...]],
    old_policy: Policy | None = None,
) -> RolloutBatch:
    """Roll out one batch of prompt groups and refresh the cache.

    Every (prompt, slot) pair draws from its own substream keyed by
    (seed, epoch, prompt, slot), so items are order-independent and a miss
    consumes exactly the draws a vanilla rollout would. Cache entries are read
    before the refresh, and an entry is only ever reused in a strictly later
    epoch than the one that wrote it.
    """
    start = step_in_epoch * config.prompts_per_batch
    prompt_ids = range(start, start + config.prompts_per_batch)
    trajectories: list[Trajectory] = []
    verifications: list[VerificationResult | None] = []
    overlaps: list[float | None] = []
    reuse_mode = config.rollout_mode in (MODE_SPECULATIVE, MODE_RANDOM_REUSE)
    for prompt_id in prompt_ids:
        prompt = dataset[prompt_id]
        for slot in range(config.group_size):
            rng = substream(config.seed, epoch, prompt_id, slot)
            entry = cache.get(prompt_id, slot)
            if entry is not None and entry.epoch >= epoch:
                raise RuntimeError(
                    f"cache entry for ({prompt_id}, {slot}) written in epoch "
                    f"{entry.epoch} retrieved during epoch {epoch}"
                )
            verification: VerificationResult | None = None
            if entry is None or not reuse_mode:
                tokens, probs = policy.sample_continuation(prompt, (), config.max_len, rng)
                trajectory = Trajectory(prompt_id, prompt, tokens, probs)
            elif config.rollout_mode == MODE_SPECULATIVE:
                trajectory, verification = speculative_rollout(
                    policy,
                    prompt_id,
                    prompt,
                    entry,
                    config.lenience,
                    config.resume_mode,
                    config.max_len,
                    rng,
                    old_policy=old_policy,
                )
            else:  # random_reuse: uniform rejection position, no verification
                draft = entry.response[: config.max_len]
                position = int(rng.integers(1, len(draft) + 2))
                prefix = draft[: position - 1]
                prefix_probs = (
                    policy.score_sequence(prompt, prefix) if prefix else np.zeros(0)
                )
                if position == len(draft) + 1:
                    suffix: tuple[int, ...] = ()
                    suffix_probs = np.zeros(0)
                else:
                    suffix, suffix_probs = policy.sample_continuation(
                        prompt, prefix, config.max_len, rng
                    )
                trajectory = Trajectory(
                    prompt_id,
                    prompt,
                    prefix + suffix,
                    np.concatenate([prefix_probs, suffix_probs]),
                )
                verification = VerificationResult(
                    accept_probs=np.zeros(0),
                    uniforms=np.zeros(0),
                    rejection_position=position,
                    reused_tokens=len(prefix),
                    generated_tokens=len(suffix),
                    fully_reused=position == len(draft) + 1,
                )
            trajectory.reward = reward(task, prompt, trajectory.response)
            overlaps.append(
                rouge1(entry.response, trajectory.response) if entry is not None else None
            )
            cache.put(
                prompt_id,
                slot,
                CachedRollout(
                    prompt_id=prompt_id,
                    response=trajectory.response,
                    old_probs=trajectory.gen_probs,
                    epoch=epoch,
                    reward=trajectory.reward,
                ),
            )
            trajectories.append(trajectory)
            verifications.append(verification)
    return RolloutBatch(trajectories, verifications, overlaps)


def _step_record(
    batch: RolloutBatch,
    stats: UpdateStats,
    epoch: int,
    global_step: int,
    baseline_tokens: int,
) -> StepRecord:
    verified = [v for v in batch.verifications if v is not None]
    reused = sum(v.reused_tokens for v in verified)
    total = sum(len(t.response) for t in batch.trajectories)
    generated = total - reused
    overlaps = [o for o in batch.overlaps if o is not None]
    return StepRecord(
        epoch=epoch,
        step=global_step,
        tokens_generated=generated,
        tokens_reused=reused,
        speedup=_speedup(baseline_tokens, generated),
        mean_prefix_len=(
            sum(v.reused_tokens for v in verified) / len(verified) if verified else 0.0
        ),
        full_reuse_ratio=(
            sum(1 for v in verified if v.fully_reused) / len(batch.verifications)
        ),
        rouge1=sum(overlaps) / len(overlaps) if overlaps else 0.0,
        mean_reward=float(np.mean([t.reward for t in batch.trajectories])),
        entropy=stats.mean_entropy,
        kl=stats.mean_kl,
        clip_fraction=stats.clip_fraction,
    )


def _epoch_metrics(
    epoch: int, records: list[StepRecord], baseline_tokens: int, counts: dict[str, float]
) -> EpochMetrics:
    generated = sum(r.tokens_generated for r in records)
    return EpochMetrics(
        epoch=epoch,
        tokens_generated=generated,
        tokens_reused=sum(r.tokens_reused for r in records),
        speedup_vs_baseline=_speedup(baseline_tokens, generated),
        mean_verified_prefix_len=counts["prefix_mean"],
        full_reuse_ratio=counts["full_reuse_ratio"],
        rouge1_overlap=counts["rouge_mean"],
        mean_reward=counts["reward_mean"],
        entropy=float(np.mean([r.entropy for r in records])),
        mean_kl=float(np.mean([r.kl for r in records])),
        clip_fraction=float(np.mean([r.clip_fraction for r in records])),
    )


def run_experiment(
    config: TrainConfig,
    baseline_step_tokens: Sequence[int] | None = None,
) -> ExperimentResult:
    """Run the full training loop and aggregate per-step and per-epoch metrics.

    Speedups compare against a paired vanilla run with the same seed. For
    non-vanilla modes that baseline is measured by actually running the
    vanilla loop first unless ``baseline_step_tokens`` is supplied (sweeps
    share one baseline run this way). Fixed seed implies bit-identical output.

    A divergent update aborts the run; the raised
    :class:`~rolloutlab.policy.DivergenceError` carries the partial result in
    its ``partial`` attribute so callers can flush what was measured.
    """
    config.validate()
    if config.rollout_mode != MODE_VANILLA and baseline_step_tokens is None:
        baseline = run_experiment(replace(config, rollout_mode=MODE_VANILLA))
        baseline_step_tokens = baseline.step_tokens
    total_steps = config.epochs * config.steps_per_epoch
    if baseline_step_tokens is not None and len(baseline_step_tokens) != total_steps:
        raise ConfigError(
            f"baseline has {len(baseline_step_tokens)} step token counts, "
            f"run needs {total_steps}"
        )

    task = ModularSumTask(digits=config.digits)
    dataset = task.make_prompts(config.dataset_size, substream(config.seed, _DATASET_STREAM))
    init_logits = np.zeros((task.vocab.size + 1,) * config.context_window + (task.vocab.size,))
    init_logits[..., task.vocab.eos_id] = config.init_eos_bias
    policy = Policy(
        task.vocab, window=config.context_window, temperature=1.0, logits=init_logits
    )
    cache = RolloutCache()
    update_cfg = config.update_config()

    epoch_metrics: list[EpochMetrics] = []
    step_records: list[StepRecord] = []
    trace: list[TraceRow] = []
    # policy that generated the entries currently in the cache; exact for
    # residual resume because that mode requires steps_per_epoch == 1
    prev_epoch_policy: Policy | None = None
    global_step = 0
    for epoch in range(1, config.epochs + 1):
        epoch_rollout_policy = policy
        epoch_records: list[StepRecord] = []
        sum_reward = 0.0
        sum_prefix = 0
        n_verified = 0
        n_items = 0
        n_full = 0
        sum_rouge = 0.0
        n_rouge = 0
        for step_in_epoch in range(config.steps_per_epoch):
            global_step += 1
            batch = rollout_batch(
                policy,
                task,
                cache,
                config,
                epoch,
                step_in_epoch,
                dataset,
                old_policy=prev_epoch_policy,
            )
            for i, traj in enumerate(batch.trajectories):
                trace.append(
                    TraceRow(
                        epoch=epoch,
                        prompt_id=traj.prompt_id,
                        slot=i % config.group_size,
                        tokens=traj.response,
                    )
                )
            update_batch = []
            for g in range(0, len(batch.trajectories), config.group_size):
                group = batch.trajectories[g : g + config.group_size]
                advantages = group_advantages([t.reward for t in group])
                update_batch.extend(
                    (traj, float(adv), traj.gen_probs) for traj, adv in zip(group, advantages)
                )
            try:
                policy, stats = update(policy, update_batch, update_cfg)
            except DivergenceError as exc:
                exc.partial = ExperimentResult(  # type: ignore[attr-defined]
                    epoch_metrics, step_records, policy, trace, cache
                )
                raise

            baseline_tokens = (
                baseline_step_tokens[global_step - 1]
                if baseline_step_tokens is not None
                else sum(len(t.response) for t in batch.trajectories)
            )
            record = _step_record(batch, stats, epoch, global_step, baseline_tokens)
            epoch_records.append(record)
            step_records.append(record)

            verified = [v for v in batch.verifications if v is not None]
            sum_reward += sum(t.reward for t in batch.trajectories)
            sum_prefix += sum(v.reused_tokens for v in verified)
            n_verified += len(verified)
            n_items += len(batch.trajectories)
            n_full += sum(1 for v in verified if v.fully_reused)
            observed = [o for o in batch.overlaps if o is not None]
            sum_rouge += sum(observed)
            n_rouge += len(observed)
        prev_epoch_policy = epoch_rollout_policy
        epoch_baseline = (
            sum(
                baseline_step_tokens[s]
                for s in range(global_step - config.steps_per_epoch, global_step)
            )
            if baseline_step_tokens is not None
            else sum(r.tokens_generated + r.tokens_reused for r in epoch_records)
        )
        counts = {
            "prefix_mean": sum_prefix / n_verified if n_verified else 0.0,
            "full_reuse_ratio": n_full / n_items if n_items else 0.0,
            "rouge_mean": sum_rouge / n_rouge if n_rouge else 0.0,
            "reward_mean": sum_reward / n_items if n_items else 0.0,
        }
        epoch_metrics.append(_epoch_metrics(epoch, epoch_records, epoch_baseline, counts))
    return ExperimentResult(epoch_metrics, step_records, policy, trace, cache)
