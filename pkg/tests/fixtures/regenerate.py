"""Rebuild the checked-in oracle distribution dumps.

Run from the repository root:

    python3 tests/fixtures/regenerate.py

The dumps freeze, for every canonical tiny instance: the current policy's
direct distribution and the reuse procedure's output distribution in both
resume modes at lenience 1. The regression test recomputes them and compares.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from fixture_policies import fixture_instances  # noqa: E402

from rolloutlab import Lenience, enumerate_direct, enumerate_spec, save_distribution  # noqa: E402


def main() -> None:
    out_dir = Path(__file__).resolve().parent
    one = Lenience.finite(1.0)
    for name, (policy_new, policy_old, max_len) in fixture_instances().items():
        dists = {
            "direct": enumerate_direct(policy_new, (), max_len),
            "reuse_residual_l1": enumerate_spec(
                policy_new, policy_old, (), max_len, one, "residual"
            ),
            "reuse_direct_l1": enumerate_spec(
                policy_new, policy_old, (), max_len, one, "direct"
            ),
        }
        for kind, dist in dists.items():
            path = out_dir / f"{name}__{kind}.txt"
            save_distribution(dist, path)
            print(f"wrote {path} ({len(dist)} sequences)")


if __name__ == "__main__":
    main()
