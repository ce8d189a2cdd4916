"""Run module-arithmetic experiments and write JSON reports plus text tables.

    python scripts/run_experiments.py --out reports/            # all kinds, seeds 0,1,2
    python scripts/run_experiments.py --kinds scaling --seeds 0
"""

import argparse
import json
import sys
import time
from pathlib import Path

from modret.harness import KINDS, ExperimentConfig, Phase1Cache, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kinds", default=",".join(KINDS))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--config", help="experiment config JSON (ExperimentConfig fields)")
    ap.add_argument("--out", default="reports")
    args = ap.parse_args(argv)

    over = json.loads(Path(args.config).read_text()) if args.config else {}
    over["seeds"] = [int(s) for s in args.seeds.split(",")]
    cfg = ExperimentConfig.from_dict(over)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = Phase1Cache()  # phase 1 depends only on the seed, so kinds share it
    t0 = time.time()
    for kind in args.kinds.split(","):
        log = lambda s, k=kind: print(f"[{time.time() - t0:7.1f}s] {k}: {s}", file=sys.stderr, flush=True)
        report = run_experiment(kind, cfg, cache=cache, log=log)
        (out / f"{kind}.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        (out / f"{kind}.txt").write_text(report.table())
        print(report.table(), flush=True)


if __name__ == "__main__":
    main()
