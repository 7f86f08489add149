"""Plan random rest-to-rest style transfers and report defects and timings."""
import argparse
import time
from pathlib import Path

import numpy as np

from flatdt import load_model
from flatdt.planner import PlanningProblem, plan_trajectory, synthesize_xu, validate_trajectory

MODELS = Path(__file__).resolve().parent.parent / "models"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("model", nargs="?", default="product")
    ap.add_argument("--problems", type=int, default=20)
    ap.add_argument("--extra", type=int, default=3, help="steps beyond the minimum horizon r")
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = load_model(MODELS / f"{args.model}.fdt").spec
    rng = np.random.default_rng(args.seed)
    n, m = len(spec.system.state_names), len(spec.system.input_names)
    print("problem  defect     boundary   margin     iters  ms")
    for i in range(args.problems):
        x_i, x_f = rng.uniform(-args.scale, args.scale, (2, n))
        u_i, u_f = rng.uniform(-args.scale, args.scale, (2, m))
        p = PlanningProblem(spec, x_i, u_i, x_f, u_f, 0, spec.r + args.extra)
        t0 = time.perf_counter()
        y = plan_trajectory(p, seed=int(rng.integers(1 << 30)))
        rep = validate_trajectory(spec.system, synthesize_xu(spec, y, p.k_i, p.k_f), p)
        ms = 1e3 * (time.perf_counter() - t0)
        print(f"{i:>7}  {rep.max_defect:.2e}  {rep.boundary_residual:.2e}  {y.guard_margin:.2e}  {y.iterations:>5}  {ms:.1f}")


if __name__ == "__main__":
    main()
