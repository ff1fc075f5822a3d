"""Canonical tiny policy pairs used by the oracle regression fixtures.

Each instance is (current policy, old policy, max_len). Definitions are
seeded, so `fixtures/regenerate.py` always rebuilds the identical instances
that produced the checked-in distribution dumps.
"""

from rolloutlab import Policy, Vocab, substream

FIXTURE_DIR_NAME = "fixtures"


def _random_policy(vocab: Vocab, window: int, tag: str, scale: float = 1.0) -> Policy:
    rng = substream(271828, "oracle-fixture", tag)
    shape = (vocab.size + 1,) * window + (vocab.size,)
    return Policy(vocab, window=window, logits=scale * rng.normal(size=shape))


def fixture_instances() -> dict[str, tuple[Policy, Policy, int]]:
    v2 = Vocab(2, eos_id=1)
    v3 = Vocab(3, eos_id=2)
    v4 = Vocab(4, eos_id=3)
    return {
        # the hand-derived skewed pair: current (0.8, 0.2) vs old (0.5, 0.5)
        "v2_skewed": (
            Policy.context_free(v2, [0.8, 0.2]),
            Policy.context_free(v2, [0.5, 0.5]),
            2,
        ),
        "v3_len2": (
            _random_policy(v3, 2, "v3-new"),
            _random_policy(v3, 2, "v3-old"),
            2,
        ),
        "v3_len3": (
            _random_policy(v3, 2, "v3l3-new", scale=1.5),
            _random_policy(v3, 2, "v3l3-old", scale=1.5),
            3,
        ),
        "v4_len3": (
            _random_policy(v4, 2, "v4-new"),
            _random_policy(v4, 2, "v4-old"),
            3,
        ),
    }
