import numpy as np
import pytest

from rolloutlab import Policy, Vocab, substream


class ScriptedStream:
    """Stands in for a Generator; pops scripted uniforms and counts draws."""

    def __init__(self, values):
        self.values = list(values)
        self.consumed = 0

    def random(self):
        self.consumed += 1
        return self.values.pop(0)


@pytest.fixture
def scripted_stream():
    return ScriptedStream


def random_policy(vocab: Vocab, window: int, seed_key, scale: float = 1.0) -> Policy:
    rng = substream(314159, "test-policy", *seed_key)
    shape = (vocab.size + 1,) * window + (vocab.size,)
    return Policy(vocab, window=window, logits=scale * rng.normal(size=shape))


@pytest.fixture
def make_random_policy():
    return random_policy
