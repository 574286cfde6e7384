"""Transfer comparison over several seeds, plus replay vs no-replay grasp counts.

    python scripts/transfer_seeds.py --seeds 0 1 2 --out runs/transfer
"""
import argparse
import json
from pathlib import Path

from clothslide import learn
from clothslide.affordance import SimEnv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/transfer")
    ap.add_argument("--target-precision", type=float, default=0.675)
    ap.add_argument("--budget", type=int, default=400)
    args = ap.parse_args()

    out = Path(args.out)
    clf = learn.train_default_classifier(seed=0)
    for s in args.seeds:
        rep = learn.run_transfer_experiment(seed=s, classifier=clf, out_dir=out / f"s{s}")
        print(s, json.dumps(rep["precision_at_k"]), flush=True)

    # One pretrained model; the online seed varies.
    s0 = args.seeds[0]
    src = learn.PatchRegressor.load(out / f"s{s0}" / f"source_seed{s0}.json")
    heldout = learn.LabeledSet.load(out / f"s{s0}" / f"heldout_seed{s0}.npz")
    target = learn.target_env(SimEnv())
    for s in args.seeds:
        eff = learn.replay_efficiency(src, target, clf, heldout, args.target_precision, args.budget,
                                      range(1000, 1040), seed=s)
        print(s, {k: v["grasps_to_target"] for k, v in eff.items()}, flush=True)
        learn.write_curves(out / f"replay_seed{s}.csv", {k: v["curve"] for k, v in eff.items()})


if __name__ == "__main__":
    main()
