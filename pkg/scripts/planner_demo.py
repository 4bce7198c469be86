"""Plan batch size and R-worker count from a performance profile.

Uses configs/profile_example.json unless ``--profile`` is given; pass
``--measure`` to benchmark this machine on a small model instead.

    python3 scripts/planner_demo.py [--profile P.json | --measure] [--layers 32 --seq 1024]
"""

import argparse
from pathlib import Path

from splitdecode.attention import bench_r_part
from splitdecode.core import new_model_spec
from splitdecode.dense import bench_s_part, machine_tag
from splitdecode.planner import InfeasiblePlan, PerfProfile, PlanRequest, format_plan, plan

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "profile_example.json"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default=str(EXAMPLE))
    ap.add_argument("--measure", action="store_true", help="benchmark a small model here")
    ap.add_argument("--layers", type=int, default=32)
    ap.add_argument("--seq", type=int, default=1024)
    ap.add_argument("--latency", type=float, default=None, help="sequence latency budget (s)")
    args = ap.parse_args()

    if args.measure:
        spec = new_model_spec(2, 256, 8, 1024, 256)
        table = bench_s_part(spec, [1, 4, 16, 64], repetitions=5)
        profile = PerfProfile(table, bench_r_part(spec, 8, 256, 5), 1 << 20, machine_tag())
        print("measured T(B):", {b: f"{t * 1e3:.3f} ms" for b, t in table.items()})
        print(f"measured R: {profile.r_per_token:.3e} s per token position")
    else:
        profile = PerfProfile.load(args.profile)

    for budget in (args.latency,) if args.latency else (None, 400.0, 100.0):
        label = "no budget" if budget is None else f"budget {budget:g} s"
        try:
            hp = plan(profile, PlanRequest(args.layers, args.seq, latency_budget=budget))
        except InfeasiblePlan as exc:
            print(f"\n[{label}] infeasible: {exc}")
            continue
        print(f"\n[{label}]\n{format_plan(hp)}")


if __name__ == "__main__":
    main()
