"""Train every mode on the synthetic desk set and print the comparison table.

    python3 scripts/run_desk_experiment.py --config configs/desk.yaml --out runs/desk

Roughly 25 minutes on one CPU core with the desk preset.
"""

import argparse
import json
import logging
import os
import sys

from pressure_motion.config import RunConfig
from pressure_motion.evaluation import format_table
from pressure_motion.experiment import bundle, run_desk
from pressure_motion.storage import atomic_write_bytes, atomic_write_json, save_checkpoint


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(os.path.dirname(__file__), "..", "configs", "desk.yaml"))
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    run = RunConfig.load(args.config)
    if args.seed is not None:
        run.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    res = run_desk(run, out_dir=args.out)
    p, reports = res["pipeline"], res["reports"]

    table = format_table(reports)
    print(table)
    print("timings (s):", {k: round(v, 1) for k, v in p.timings.items()})
    for mode, state in p.states.items():
        if state.step:
            save_checkpoint(bundle(p, state, extra={"mode": mode, "step": state.step}),
                            os.path.join(args.out, mode, "model.pt"))
    summary = {"config_digest": run.digest(), "held_out": len(res["held"]),
               "reports": {m: json.loads(r.to_json(m)) for m, r in reports.items()}, "timings": p.timings}
    atomic_write_json(os.path.join(args.out, "metrics.json"), summary)
    atomic_write_bytes(os.path.join(args.out, "table.txt"), (table + "\n").encode())
    return 0


if __name__ == "__main__":
    sys.exit(main())
