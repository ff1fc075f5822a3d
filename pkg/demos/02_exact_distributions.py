"""What reuse does to the output distribution, measured exactly.

On tiny instances every outcome of the verify-then-resume procedure can be
enumerated: the draft, the rejection position (acceptance uniforms integrate
out analytically) and the continuation. That turns two claims into numbers:

1. with the classical residual correction at lenience 1, the output
   distribution equals direct sampling from the current policy exactly;
2. resuming directly from the current policy (the rule used during training)
   is close to, but measurably different from, the current policy -- and the
   gap grows with lenience.
"""

from rolloutlab import (
    Lenience,
    Policy,
    Vocab,
    enumerate_direct,
    enumerate_spec,
    tv_distance,
)


def show(dist, label):
    print(f"  {label}")
    for seq, prob in sorted(dist.items()):
        print(f"    {str(seq):12s} {prob:.6f}")


def main() -> None:
    vocab = Vocab(size=2, eos_id=1)
    current = Policy.context_free(vocab, [0.8, 0.2])
    old = Policy.context_free(vocab, [0.5, 0.5])
    max_len = 2

    target = enumerate_direct(current, (), max_len)
    drafts = enumerate_direct(old, (), max_len)
    print("two-token world: token 0, then eos; budget 2")
    show(target, "direct sampling from the current policy (the target)")
    show(drafts, "draft distribution (old policy)")
    print()

    one = Lenience.finite(1.0)
    residual = enumerate_spec(current, old, (), max_len, one, "residual")
    direct = enumerate_spec(current, old, (), max_len, one, "direct")
    show(residual, "reuse with residual correction, lenience 1")
    print(f"    TV distance to target: {tv_distance(residual, target):.2e}  (exact)")
    show(direct, "reuse resuming directly from the current policy, lenience 1")
    print(f"    TV distance to target: {tv_distance(direct, target):.6f}  (the bias)")
    print()

    print("bias as lenience grows (direct resume):")
    for token in ("1", "e^0.2", "e^0.5", "e^1.0", "e^2.0"):
        out = enumerate_spec(current, old, (), max_len, Lenience.parse(token), "direct")
        print(f"  lenience {token:>6}: TV to target {tv_distance(out, target):.6f}")
    infinite = enumerate_spec(current, old, (), max_len, Lenience.infinite(), "direct")
    zero = enumerate_spec(current, old, (), max_len, Lenience.zero(), "direct")
    print(f"  lenience    inf: TV to OLD policy {tv_distance(infinite, drafts):.2e} (pure replay)")
    print(f"  lenience      0: TV to target    {tv_distance(zero, target):.2e} (pure resampling)")


if __name__ == "__main__":
    main()
