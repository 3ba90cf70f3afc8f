"""How often the ablation directions hold across seeds.

For each seed, trains the full model, the context-loss ablation and the
left-to-right-mask ablation on the synthetic corpus, then checks:

  (a) USR(full) >= 2 x USR(no context loss)
  (b) FMR(full) >  FMR(no context loss)
  (c) RMSE(left-to-right) >= 1.05 x RMSE(full)

    python3 scripts/seed_sweep.py --seeds 1..5 --out runs/sweep
"""

import argparse
import json
import logging
from pathlib import Path

from peter.cli import cmd_ablate, parse_seeds
from peter.config import RunConfig

from ablation_study import SMALL


def verdicts(reports):
    base, no_lc, l2r = reports["base"], reports["disable_Lc"], reports["left_to_right"]
    return {
        "a": base.USR >= 2 * no_lc.USR,
        "b": base.FMR > no_lc.FMR,
        "c": l2r.RMSE >= 1.05 * base.RMSE,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=parse_seeds, default=parse_seeds("1..5"))
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    rows = []
    for seed in args.seeds:
        cfg = RunConfig(**{**SMALL, "seed": seed, "out": str(Path(args.out) / f"seed{seed}")})
        reports = cmd_ablate(cfg, ["disable_Lc", "left_to_right"])
        v = verdicts(reports)
        r = {k: rep.to_dict() for k, rep in reports.items()}
        rows.append({"seed": seed, **v, "reports": r})
        print(
            f"seed {seed:>3}  USR {reports['base'].USR:.3f}/{reports['disable_Lc'].USR:.3f}"
            f"  FMR {reports['base'].FMR:.3f}/{reports['disable_Lc'].FMR:.3f}"
            f"  RMSE {reports['base'].RMSE:.3f}/{reports['left_to_right'].RMSE:.3f}"
            f"  a={v['a']} b={v['b']} c={v['c']}",
            flush=True,
        )
    for k in "abc":
        print(f"({k}) holds on {sum(r[k] for r in rows)}/{len(rows)} seeds")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "sweep.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
