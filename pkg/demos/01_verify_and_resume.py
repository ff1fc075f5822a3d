"""Walk through one verify-then-resume pass at several lenience values.

An old policy produced a cached response; a newer policy scores the same
tokens, each token is accepted with probability min(1, lenience * new/old),
and generation resumes from the first rejection. Raising the lenience keeps
longer prefixes at the cost of drifting away from the new policy.
"""

import numpy as np

from rolloutlab import (
    CachedRollout,
    Lenience,
    Policy,
    Vocab,
    acceptance_probs,
    speculative_rollout,
    substream,
)


def main() -> None:
    vocab = Vocab(size=6, eos_id=5)
    rng = substream(2024, "demo1")
    shape = (vocab.size + 1,) * 2 + (vocab.size,)
    old_policy = Policy(vocab, window=2, logits=rng.normal(size=shape))
    # the "current" policy: the old one plus a moderate parameter drift,
    # mimicking one epoch of training
    new_policy = Policy(vocab, window=2, logits=old_policy.logits + 0.35 * rng.normal(size=shape))

    prompt = (0, 1)
    draft, draft_probs = old_policy.sample_continuation(prompt, (), 14, substream(2024, "draft"))
    print(f"prompt          : {prompt}")
    print(f"cached response : {draft}")
    print(f"old probs       : {np.round(draft_probs, 3)}")

    new_probs = new_policy.score_sequence(prompt, draft)
    print(f"new probs       : {np.round(new_probs, 3)}")
    print(f"prob ratios     : {np.round(new_probs / draft_probs, 3)}")
    print()

    cached = CachedRollout(0, draft, draft_probs, epoch=1, reward=0.0)
    for token in ("0", "1", "e^0.5", "e^2.0", "inf"):
        lenience = Lenience.parse(token)
        alphas = acceptance_probs(draft_probs, new_probs, lenience)
        trajectory, verification = speculative_rollout(
            new_policy, 0, prompt, cached, lenience, "direct", 14, substream(2024, "verify", token)
        )
        print(f"lenience {token:>6}: accept probs {np.round(alphas, 3)}")
        print(
            f"                rejection at {verification.rejection_position}, "
            f"reused {verification.reused_tokens}, generated {verification.generated_tokens}, "
            f"fully reused: {verification.fully_reused}"
        )
        print(f"                assembled response: {trajectory.response}")
    print()
    print("lenience 0 regenerates everything; lenience inf replays the cache verbatim.")


if __name__ == "__main__":
    main()
