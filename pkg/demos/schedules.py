"""Print unmasking schedules and show how grouping splits them.

A schedule fixes how many tokens each decoding step commits and which
sampling temperatures it uses. Grouping reorganizes the same per-step
counts into groups of one full evaluation followed by cheap local ones.
"""

from __future__ import annotations

import argparse

from recap.schedule import build_grouped_schedule, cosine_schedule, polynomial_schedule


def print_schedule(name, sched):
    print(f"{name}: {sched.total_steps} steps over {sched.num_tokens} tokens")
    remaining = sched.num_tokens
    print("  step  commit  remaining   tau1    tau2")
    for s in range(sched.total_steps):
        k = sched.decode_counts[s]
        remaining -= k
        print(f"  {s + 1:4d}  {k:6d}  {remaining:9d}  {sched.tau1[s]:.3f}  {sched.tau2[s]:.3f}")
    print()


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tokens", type=int, default=64)
    args = ap.parse_args()

    print_schedule("cosine, 8 steps", cosine_schedule(8, args.tokens))
    print_schedule("polynomial (2.5), 4 steps", polynomial_schedule(4, args.tokens))

    base = cosine_schedule(16, args.tokens)
    grouped = build_grouped_schedule(12, 4, u=8, base=base)
    print("grouped: T=12 full + T'=4 local on the 16-step cosine counts")
    for t, group in enumerate(grouped.groups(), start=1):
        parts = " + ".join(
            f"{'full' if i == 0 else 'local'}:{sub.decode_count}"
            for i, sub in enumerate(group)
        )
        print(f"  group {t:2d}: {parts}")
    total_full = sum(1 for _ in grouped.groups())
    total_local = sum(len(g) - 1 for g in grouped.groups())
    print(f"  -> {total_full} full and {total_local} local evaluations, "
          f"{grouped.num_tokens} tokens committed")


if __name__ == "__main__":
    main()
