"""Fit the control branch to eight synthetic sequences and report the probe-loss curve.

    python3 scripts/run_overfit.py --config configs/desk.yaml
"""

import argparse
import os
import sys

from pressure_motion.config import RunConfig
from pressure_motion.experiment import overfit_config, overfit_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(os.path.dirname(__file__), "..", "configs", "desk.yaml"))
    ap.add_argument("--max-steps", type=int, default=2000)
    ap.add_argument("--batch-size", type=int, default=8)
    args = ap.parse_args(argv)

    run = overfit_config(RunConfig.load(args.config), args.batch_size)
    res = overfit_experiment(run, max_steps=args.max_steps, check_every=200)
    print("step  total    l_diff   l_cons")
    for step, h in res["history"]:
        print(f"{step:5d} {h['total']:.4f}  {h['l_diff']:.4f}  {h['l_cons']:.4f}")
    print(f"ratio {res['ratio']:.3f} after {res['steps']} steps; reconstruction MPJPE {res['mpjpe']:.3f} m")
    return 0


if __name__ == "__main__":
    sys.exit(main())
