from pathlib import Path

import numpy as np
import pytest

from rolloutlab import (
    ConfigError,
    Lenience,
    Policy,
    Vocab,
    enumerate_direct,
    enumerate_spec,
    load_distribution,
    save_distribution,
    substream,
    tv_distance,
)
from conftest import random_policy
from fixture_policies import fixture_instances

FIXTURE_DIR = Path(__file__).parent / "fixtures"

L1 = Lenience.finite(1.0)


def test_direct_point_mass_for_deterministic_policy():
    vocab = Vocab(3, 2)
    logits = np.zeros((4, 3))
    logits[:, 2] = 50.0
    policy = Policy(vocab, window=1, logits=logits)
    dist = enumerate_direct(policy, (), 3)
    assert dist[(2,)] == pytest.approx(1.0, abs=1e-9)


def test_direct_uniform_chain_probabilities():
    policy = Policy.uniform(Vocab(2, 1), window=1)
    dist = enumerate_direct(policy, (), 2)
    assert dist[(1,)] == pytest.approx(0.5, abs=1e-12)
    assert dist[(0, 1)] == pytest.approx(0.25, abs=1e-12)
    assert dist[(0, 0)] == pytest.approx(0.25, abs=1e-12)
    assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)


def test_direct_normalizes_on_random_instances():
    for i in range(10):
        policy = random_policy(Vocab(4, 3), window=2, seed_key=("norm", i), scale=2.0)
        dist = enumerate_direct(policy, (1,), 3)
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)
        assert all(p >= 0.0 for p in dist.values())


def test_direct_refuses_large_instances():
    policy = Policy.uniform(Vocab(12, 11))
    with pytest.raises(ValueError, match="too large"):
        enumerate_direct(policy, (), 12)


def _mc_frequencies(policy, prompt, max_len, n_samples, seed):
    counts: dict[tuple[int, ...], int] = {}
    # vectorized batch sampler over the policy table, chunked for memory
    chunk = 100_000
    table = policy.probs_flat
    cum = np.cumsum(table, axis=1)
    base, mod = policy._ctx_base, policy._ctx_mod
    rng = substream(seed, "mc")
    remaining = n_samples
    while remaining > 0:
        b = min(chunk, remaining)
        remaining -= b
        flats = np.full(b, policy.context_index(prompt), dtype=np.int64)
        seqs = [[] for _ in range(b)]
        active = np.arange(b)
        length = 0
        while len(active) and length < max_len:
            u = rng.random(len(active))
            rows = cum[flats[active]]
            toks = (u[:, None] >= rows).sum(axis=1)
            toks = np.minimum(toks, policy.vocab.size - 1)
            for idx, tok in zip(active, toks):
                seqs[idx].append(int(tok))
            flats[active] = (flats[active] % mod) * base + toks
            active = active[toks != policy.vocab.eos_id]
            length += 1
        for seq in seqs:
            key = tuple(seq)
            counts[key] = counts.get(key, 0) + 1
    return counts


def test_direct_matches_monte_carlo():
    policy = random_policy(Vocab(3, 2), window=2, seed_key=("mc",))
    max_len = 3
    n = 1_000_000
    dist = enumerate_direct(policy, (), max_len)
    counts = _mc_frequencies(policy, (), max_len, n, seed=41)
    assert set(counts) <= set(dist)
    for seq, prob in dist.items():
        freq = counts.get(seq, 0) / n
        se = max((prob * (1 - prob) / n) ** 0.5, 1e-9)
        assert abs(freq - prob) < 3 * se, (seq, freq, prob)


# -- reuse enumeration -----------------------------------------------------------


def test_spec_lenience_infinite_returns_old_distribution():
    new = random_policy(Vocab(3, 2), window=2, seed_key=("s1",))
    old = random_policy(Vocab(3, 2), window=2, seed_key=("s2",))
    out = enumerate_spec(new, old, (), 3, Lenience.infinite(), "direct")
    assert tv_distance(out, enumerate_direct(old, (), 3)) < 1e-12


def test_spec_lenience_zero_returns_new_distribution():
    new = random_policy(Vocab(3, 2), window=2, seed_key=("s3",))
    old = random_policy(Vocab(3, 2), window=2, seed_key=("s4",))
    out = enumerate_spec(new, old, (), 3, Lenience.zero(), "direct")
    assert tv_distance(out, enumerate_direct(new, (), 3)) < 1e-12


def test_spec_identical_policies_exact():
    policy = random_policy(Vocab(3, 2), window=2, seed_key=("s5",))
    for lenience in (L1, Lenience.parse("e^0.5")):
        out = enumerate_spec(policy, policy, (), 3, lenience, "direct")
        assert tv_distance(out, enumerate_direct(policy, (), 3)) == 0.0


def test_residual_mode_exact_on_all_fixtures():
    for name, (new, old, max_len) in fixture_instances().items():
        out = enumerate_spec(new, old, (), max_len, L1, "residual")
        target = enumerate_direct(new, (), max_len)
        assert tv_distance(out, target) < 1e-9, name


def test_direct_mode_bias_hand_derived():
    new, old, max_len = fixture_instances()["v2_skewed"]
    out = enumerate_spec(new, old, (), max_len, L1, "direct")
    tv = tv_distance(out, enumerate_direct(new, (), max_len))
    # hand derivation over the three outcomes (token 0, then eos=1):
    # drafts (1): 0.5, (0,1): 0.25, (0,0): 0.25; alpha(0)=1, alpha(1)=0.4;
    # a rejected eos resumes from the current policy's full distribution
    a_rej = 1.0 - min(1.0, 0.2 / 0.5)
    p_e = 0.5 * 0.4 + 0.5 * a_rej * 0.2
    p_ae = 0.5 * a_rej * 0.16 + 0.25 * 0.4 + 0.25 * a_rej * 0.2
    p_aa = 0.5 * a_rej * 0.64 + 0.25 * a_rej * 0.8 + 0.25
    hand_tv = 0.5 * (abs(p_e - 0.2) + abs(p_ae - 0.16) + abs(p_aa - 0.64))
    assert hand_tv > 0
    assert tv == pytest.approx(hand_tv, abs=1e-12)


def test_direct_mode_bias_reproducible_bitwise():
    new, old, max_len = fixture_instances()["v3_len3"]
    a = enumerate_spec(new, old, (), max_len, Lenience.parse("e^0.5"), "direct")
    b = enumerate_spec(new, old, (), max_len, Lenience.parse("e^0.5"), "direct")
    assert a == b  # exact float equality, key by key


def test_spec_rejects_residual_with_lenience_not_one():
    policy = Policy.uniform(Vocab(3, 2))
    with pytest.raises(ConfigError):
        enumerate_spec(policy, policy, (), 2, Lenience.parse("e^0.5"), "residual")


def test_spec_distributions_normalize():
    for name, (new, old, max_len) in fixture_instances().items():
        for mode in ("direct", "residual"):
            out = enumerate_spec(new, old, (), max_len, L1, mode)
            assert sum(out.values()) == pytest.approx(1.0, abs=1e-9), (name, mode)


# -- frozen fixture regression ------------------------------------------------------


@pytest.mark.parametrize("kind", ["direct", "reuse_residual_l1", "reuse_direct_l1"])
def test_frozen_fixture_regression(kind):
    for name, (new, old, max_len) in fixture_instances().items():
        frozen = load_distribution(FIXTURE_DIR / f"{name}__{kind}.txt")
        if kind == "direct":
            fresh = enumerate_direct(new, (), max_len)
        else:
            mode = "residual" if "residual" in kind else "direct"
            fresh = enumerate_spec(new, old, (), max_len, L1, mode)
        assert set(frozen) == set(fresh), name
        for seq in frozen:
            assert fresh[seq] == pytest.approx(frozen[seq], abs=1e-12), (name, seq)


def test_distribution_file_roundtrip(tmp_path):
    dist = {(0, 1): 0.25, (2,): 0.75}
    path = tmp_path / "dist.txt"
    save_distribution(dist, path)
    assert load_distribution(path) == dist


def test_distribution_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("rolloutlab-dist-v1\n0,1 notahex\n")
    with pytest.raises(ValueError, match="line 2"):
        load_distribution(path)


# -- sampler vs oracle: end-to-end Monte Carlo ---------------------------------------


@pytest.mark.parametrize(
    "mode, lenience", [("direct", Lenience.parse("e^0.5")), ("residual", L1)]
)
def test_speculative_rollout_matches_enumeration(mode, lenience):
    from rolloutlab import CachedRollout, speculative_rollout

    new, old, max_len = fixture_instances()["v2_skewed"]
    expected = enumerate_spec(new, old, (), max_len, lenience, mode)
    if mode == "residual":  # the sampler realizes the exactness theorem
        assert tv_distance(expected, enumerate_direct(new, (), max_len)) < 1e-9
    n = 60_000
    counts: dict[tuple[int, ...], int] = {}
    for i in range(n):
        draft, probs = old.sample_continuation((), (), max_len, substream(57, "draft", i))
        cached = CachedRollout(0, draft, probs, 1, 0.0)
        traj, _ = speculative_rollout(
            new, 0, (), cached, lenience, mode, max_len,
            substream(57, "verify", i), old_policy=old,
        )
        counts[traj.response] = counts.get(traj.response, 0) + 1
    for seq, prob in expected.items():
        freq = counts.get(seq, 0) / n
        se = max((prob * (1 - prob) / n) ** 0.5, 1e-9)
        assert abs(freq - prob) < 4 * se, (seq, freq, prob)
