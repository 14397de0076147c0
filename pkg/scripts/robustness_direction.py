"""Compare macro-F1 drop under 50% gaze dropout for ablation variants across seeds.

    python scripts/robustness_direction.py --seeds 0,1,2,3,4 --variants B,C,D --k 5
"""

import argparse
import json
import time

from affuse.data import SynthConfig, generate_synthetic
from affuse.degradation import CLEAN, DegradationSpec, Kind
from affuse.training import TrainConfig, cross_validate, variant_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--variants", default="B,D")
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--synth", default="{}", help="JSON overrides for SynthConfig")
    ap.add_argument("--train", default="{}", help="JSON overrides for TrainConfig")
    ap.add_argument("--rate", type=float, default=0.5)
    args = ap.parse_args()

    drop = DegradationSpec(Kind.GAZE_DROPOUT, rate=args.rate, seed=777)
    variants = args.variants.split(",")
    print("seed," + ",".join(f"{v}_clean,{v}_drop" for v in variants) + ",seconds")
    for seed in (int(s) for s in args.seeds.split(",")):
        t0 = time.time()
        recs = generate_synthetic(SynthConfig(seed=seed, **json.loads(args.synth)))
        cells = []
        for v in variants:
            cfg = variant_config(TrainConfig(seed=seed, track_affinity=False, **json.loads(args.train)), v)
            res = cross_validate(recs, cfg, k=args.k, jobs=args.jobs, conditions=(CLEAN, drop))
            clean = res.summary["clean"]["macro_f1_mean"]
            cells += [clean, clean - res.summary[drop.label]["macro_f1_mean"]]
        print(f"{seed}," + ",".join(f"{c:.4f}" for c in cells) + f",{time.time() - t0:.0f}", flush=True)


if __name__ == "__main__":
    main()
