"""Per-step total KV load under large-batch, fixed-interval and ramped admission.

    python3 scripts/schedule_load_demo.py [--B 6 --S 6 --F 2 --steps 18]
"""

import argparse

from splitdecode.scheduler import make_schedule, peak_load_fixed_interval, peak_load_large_batch


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--B", type=int, default=6)
    ap.add_argument("--S", type=int, default=6)
    ap.add_argument("--F", type=int, default=2)
    ap.add_argument("--steps", type=int, default=18)
    args = ap.parse_args()

    kinds = ("large-batch", "fixed-interval", "ramped-limit")
    loads = {k: [p.total_load for p in make_schedule(k, args.B, args.S, args.F).plans(args.steps)]
             for k in kinds}
    print("step " + " ".join(f"{k:>15}" for k in kinds))
    for i in range(args.steps):
        print(f"{i:4d} " + " ".join(f"{loads[k][i]:15d}" for k in kinds))
    print(f"\npeak: large batch {max(loads['large-batch'])} (closed form "
          f"{peak_load_large_batch(args.B, args.S)}), fixed interval "
          f"{max(loads['fixed-interval'])} (closed form "
          f"{peak_load_fixed_interval(args.B, args.S, args.F)})")


if __name__ == "__main__":
    main()
