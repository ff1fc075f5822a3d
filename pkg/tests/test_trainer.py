from dataclasses import replace

import numpy as np
import pytest

from rolloutlab import (
    CachedRollout,
    ConfigError,
    DivergenceError,
    Lenience,
    ModularSumTask,
    Policy,
    RolloutCache,
    TrainConfig,
    Trajectory,
    UpdateConfig,
    group_advantages,
    reward,
    rollout_batch,
    run_experiment,
    substream,
    update,
)


def small_config(**overrides):
    defaults = dict(
        epochs=3,
        steps_per_epoch=1,
        prompts_per_batch=32,
        group_size=4,
        max_len=10,
        seed=5,
        rollout_mode="vanilla",
        learning_rate=0.5,
        init_eos_bias=2.4,
        lenience=Lenience.parse("e^0.5"),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


# -- task and reward ------------------------------------------------------------


def test_task_prompt_shape_and_answer():
    task = ModularSumTask(digits=2)
    # "18+29" -> "37": digit-wise sums mod 10
    assert task.answer((1, 8, task.PLUS, 2, 9)) == (3, 7)
    task1 = ModularSumTask(digits=1)
    assert task1.answer((7, task1.PLUS, 5)) == (2,)


def test_task_rejects_malformed_prompt():
    task = ModularSumTask(digits=1)
    with pytest.raises(ValueError, match="malformed"):
        task.answer((1, 2, 3, 4))
    with pytest.raises(ValueError, match="malformed"):
        task.answer((1, 2, 3))  # separator in the wrong spot


def test_task_prompts_are_seeded():
    task = ModularSumTask()
    a = task.make_prompts(20, substream(3, "d"))
    b = task.make_prompts(20, substream(3, "d"))
    assert a == b
    for prompt in a:
        task.answer(prompt)  # total over generated prompts


def test_reward_exact_match_only():
    task = ModularSumTask(digits=2)
    prompt = (1, 8, task.PLUS, 2, 9)
    assert reward(task, prompt, (3, 7, task.EOS)) == 1.0
    assert reward(task, prompt, (3, 7)) == 1.0  # truncated but exact
    assert reward(task, prompt, (3, 8, task.EOS)) == 0.0
    assert reward(task, prompt, (3, 7, 0, task.EOS)) == 0.0
    assert reward(task, prompt, ()) == 0.0
    assert reward(task, prompt, (task.EOS,)) == 0.0


# -- group advantages --------------------------------------------------------------


def test_group_advantages_zero_variance():
    assert np.array_equal(group_advantages([1.0, 1.0, 1.0, 1.0]), np.zeros(4))


def test_group_advantages_two_rewards():
    adv = group_advantages([1.0, 0.0])
    assert adv[0] == pytest.approx(0.999998, abs=1e-6)
    assert adv[1] == pytest.approx(-0.999998, abs=1e-6)


def test_group_advantages_hand_example():
    adv = group_advantages([1.0, 0.0, 0.0, 0.0])
    assert adv[0] == pytest.approx(1.732, abs=1e-3)
    assert np.allclose(adv[1:], -0.577, atol=1e-3)


def test_group_advantages_needs_two():
    with pytest.raises(ValueError):
        group_advantages([1.0])


# -- config validation ---------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError, match="group_size"):
        small_config(group_size=1).validate()
    with pytest.raises(ConfigError, match="rollout_mode"):
        small_config(rollout_mode="turbo").validate()
    with pytest.raises(ConfigError, match="max_len"):
        small_config(max_len=1).validate()
    with pytest.raises(ConfigError, match="lenience"):
        small_config(resume_mode="residual").validate()
    with pytest.raises(ConfigError, match="steps_per_epoch"):
        small_config(
            resume_mode="residual", lenience=Lenience.finite(1.0), steps_per_epoch=2,
            prompts_per_batch=16,
        ).validate()
    small_config(resume_mode="residual", lenience=Lenience.finite(1.0)).validate()


# -- rollout batching ------------------------------------------------------------------


def _setup(config):
    task = ModularSumTask(digits=config.digits)
    dataset = task.make_prompts(config.dataset_size, substream(config.seed, "dataset"))
    policy = Policy.uniform(task.vocab, window=config.context_window)
    return task, dataset, policy


def test_rollout_batch_epoch1_identical_across_modes():
    config = small_config()
    task, dataset, policy = _setup(config)
    batches = {}
    for mode in ("vanilla", "speculative", "random_reuse"):
        cfg = replace(config, rollout_mode=mode)
        batches[mode] = rollout_batch(policy, task, RolloutCache(), cfg, 1, 0, dataset)
    base = batches["vanilla"]
    assert all(v is None for v in base.verifications)
    for mode in ("speculative", "random_reuse"):
        other = batches[mode]
        assert [t.response for t in other.trajectories] == [t.response for t in base.trajectories]
        for a, b in zip(other.trajectories, base.trajectories):
            assert np.array_equal(a.gen_probs, b.gen_probs)
            assert a.reward == b.reward
        assert all(v is None for v in other.verifications)


def test_rollout_batch_conservation_and_cache_refresh():
    config = small_config(rollout_mode="speculative")
    task, dataset, policy = _setup(config)
    cache = RolloutCache()
    rollout_batch(policy, task, cache, config, 1, 0, dataset)
    assert len(cache) == config.prompts_per_batch * config.group_size
    batch = rollout_batch(policy, task, cache, config, 2, 0, dataset)
    reused = sum(v.reused_tokens for v in batch.verifications if v is not None)
    generated = sum(v.generated_tokens for v in batch.verifications if v is not None)
    total = sum(len(t.response) for t in batch.trajectories)
    assert reused + generated == total
    for (_, _), entry in cache.items():
        assert entry.epoch == 2  # refreshed


def test_rollout_batch_rejects_same_epoch_entries():
    config = small_config(rollout_mode="speculative")
    task, dataset, policy = _setup(config)
    cache = RolloutCache()
    rollout_batch(policy, task, cache, config, 2, 0, dataset)
    with pytest.raises(RuntimeError, match="epoch"):
        rollout_batch(policy, task, cache, config, 2, 0, dataset)


def test_rollout_batch_random_reuse_accounting():
    config = small_config(rollout_mode="random_reuse", prompts_per_batch=64)
    task, dataset, policy = _setup(config)
    cache = RolloutCache()
    rollout_batch(policy, task, cache, config, 1, 0, dataset)
    batch = rollout_batch(policy, task, cache, config, 2, 0, dataset)
    fractions = []
    for traj, ver in zip(batch.trajectories, batch.verifications):
        assert ver is not None
        assert ver.reused_tokens + ver.generated_tokens == len(traj.response)
        assert len(ver.accept_probs) == 0  # no verification happened
        fractions.append(ver.reused_tokens / max(len(traj.response), 1))
    # uniform rejection positions reuse about half the tokens on average
    assert 0.25 < float(np.mean(fractions)) < 0.75


def test_zero_variance_groups_leave_policy_unchanged():
    # all rewards equal in every group -> zero advantages -> bitwise no-op
    config = small_config()
    task, dataset, policy = _setup(config)
    batch = rollout_batch(policy, task, RolloutCache(), config, 1, 0, dataset)
    update_batch = []
    for g in range(0, len(batch.trajectories), config.group_size):
        group = batch.trajectories[g : g + config.group_size]
        adv = group_advantages([0.0] * len(group))
        update_batch.extend((t, float(a), t.gen_probs) for t, a in zip(group, adv))
    new_policy, _ = update(policy, update_batch, config.update_config())
    assert np.array_equal(new_policy.logits, policy.logits)


# -- full experiments --------------------------------------------------------------------


def test_run_experiment_single_epoch_no_reuse():
    result = run_experiment(small_config(epochs=1, rollout_mode="speculative"))
    assert len(result.epoch_metrics) == 1
    m = result.epoch_metrics[0]
    assert m.tokens_reused == 0
    assert m.full_reuse_ratio == 0.0
    assert m.rouge1_overlap == 0.0
    assert m.speedup_vs_baseline == 1.0


def test_run_experiment_determinism():
    a = run_experiment(small_config(rollout_mode="speculative"))
    b = run_experiment(small_config(rollout_mode="speculative"))
    assert a.epoch_metrics == b.epoch_metrics
    assert a.step_records == b.step_records
    assert np.array_equal(a.policy.logits, b.policy.logits)


def test_epoch1_equivalence_and_speedup_pairing():
    vanilla = run_experiment(small_config())
    reuse = run_experiment(
        small_config(rollout_mode="speculative"), baseline_step_tokens=vanilla.step_tokens
    )
    assert reuse.step_records[0].tokens_generated == vanilla.step_records[0].tokens_generated
    e1_spec = [r.tokens for r in reuse.trace if r.epoch == 1]
    e1_van = [r.tokens for r in vanilla.trace if r.epoch == 1]
    assert e1_spec == e1_van
    for srec, vrec in zip(reuse.step_records, vanilla.step_records):
        if srec.tokens_generated > 0:
            assert srec.speedup == vrec.tokens_generated / srec.tokens_generated
        else:
            assert srec.speedup == float("inf")
    for vrec in vanilla.step_records:
        assert vrec.speedup == 1.0


def test_run_experiment_internal_baseline_matches_explicit():
    explicit_base = run_experiment(small_config())
    auto = run_experiment(small_config(rollout_mode="speculative"))
    manual = run_experiment(
        small_config(rollout_mode="speculative"), baseline_step_tokens=explicit_base.step_tokens
    )
    assert auto.step_records == manual.step_records


def test_infinite_lenience_generates_nothing_after_epoch1():
    result = run_experiment(
        small_config(rollout_mode="speculative", lenience=Lenience.infinite(), epochs=4)
    )
    for m in result.epoch_metrics[1:]:
        assert m.tokens_generated == 0
        assert m.full_reuse_ratio == 1.0
        assert m.speedup_vs_baseline == float("inf")
    # response streams frozen: overlap saturates at 1 from epoch 3 onward
    assert result.epoch_metrics[2].rouge1_overlap == 1.0
    assert result.epoch_metrics[3].rouge1_overlap == 1.0


def test_speculative_epoch2_generates_less_than_epoch1():
    result = run_experiment(small_config(rollout_mode="speculative", prompts_per_batch=64))
    assert result.epoch_metrics[1].tokens_generated < result.epoch_metrics[0].tokens_generated


def test_overlap_substantial_and_rising_in_vanilla_training():
    from scipy import stats as scipy_stats

    config = small_config(epochs=8, prompts_per_batch=128, group_size=8, seed=7)
    result = run_experiment(config)
    overlaps = [m.rouge1_overlap for m in result.epoch_metrics[1:]]
    assert overlaps[0] >= 0.3
    rho, _ = scipy_stats.spearmanr(range(len(overlaps)), overlaps)
    assert rho > 0.0


def test_conservation_identity_per_step():
    result = run_experiment(small_config(rollout_mode="speculative", epochs=4))
    lengths_by_epoch: dict[int, int] = {}
    for row in result.trace:
        lengths_by_epoch[row.epoch] = lengths_by_epoch.get(row.epoch, 0) + len(row.tokens)
    for record in result.step_records:
        assert record.tokens_generated + record.tokens_reused == lengths_by_epoch[record.epoch]


def test_residual_mode_end_to_end():
    config = small_config(
        rollout_mode="speculative", resume_mode="residual", lenience=Lenience.finite(1.0)
    )
    result = run_experiment(config)
    assert len(result.epoch_metrics) == config.epochs
    assert result.epoch_metrics[1].tokens_reused > 0


def test_divergence_carries_partial_results():
    config = small_config(learning_rate=1e308, epochs=2)
    with pytest.raises(DivergenceError) as excinfo:
        run_experiment(config)
    partial = excinfo.value.partial
    assert partial.epoch_metrics == []
    assert partial.step_records == []
    assert partial.trace  # the rollouts before the failing update were kept


def test_baseline_length_validation():
    with pytest.raises(ConfigError, match="baseline"):
        run_experiment(small_config(rollout_mode="speculative"), baseline_step_tokens=[1, 2])
