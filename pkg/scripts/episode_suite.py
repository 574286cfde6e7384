"""Run the full task over many seeds and summarize edge-grasp success and attempts.

Without --model the geometric labels rank the pixels.
"""
import argparse
import json
from pathlib import Path

from clothslide import learn, pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model")
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--threshold", type=float)
    ap.add_argument("--out")
    args = ap.parse_args()

    model = learn.PatchRegressor.load(args.model) if args.model else None
    cfg = pipeline.EpisodeConfig()
    if args.threshold is not None or model is None:
        cfg = pipeline.EpisodeConfig(threshold=args.threshold if args.threshold is not None else 0.5)
    clf = learn.train_default_classifier(seed=0)
    suite = pipeline.episode_suite(cfg, range(args.n), clf, model)
    reports = suite.pop("reports")
    print(json.dumps(suite))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for r in reports:
            r.write(out / f"episode_{r.seed:03d}.json")


if __name__ == "__main__":
    main()
