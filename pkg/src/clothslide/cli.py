"""Command-line entry point: ``clothslide <subcommand> [--seed N] [--config cfg.json] ...``.

Exit codes: 0 success, 1 contract error, 2 I/O error, 3 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import learn, pipeline, sliding, tactile
from .affordance import DatasetIOError, SimEnv, generate_dataset
from .imageio import read_json, write_json

log = logging.getLogger("clothslide")

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3


class CheckFailed(Exception):
    pass


def _config(args) -> dict:
    if not args.config:
        return {}
    cfg = read_json(args.config)
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    return cfg


def _env(cfg: dict, target: bool = False) -> SimEnv:
    if "env" in cfg:
        return SimEnv.from_dict(cfg["env"])
    return learn.target_env(SimEnv()) if target else SimEnv()


def _pick(cls, cfg: dict, **overrides):
    names = {f.name for f in fields(cls)}
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items() if k in names}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kw)


def _classifier(path, seed: int):
    if path:
        return tactile.GraspClassifier.load(path)
    log.info("no classifier given; training the default one")
    return learn.train_default_classifier(seed=seed)


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_affordance_data(args, cfg):
    env = _env(cfg, args.target)
    man = generate_dataset(args.n_seeds, args.rotation_increment, args.out, env, seed_offset=args.seed)
    print(f"wrote {len(man['entries'])} depth/affordance pairs to {args.out}")


def cmd_gen_tactile_data(args, cfg):
    man = tactile.write_tactile_dataset(args.out, cfg.get("n_per_category", args.n_per_category), args.seed,
                                        cfg.get("n_frames", 30))
    print(f"wrote {len(man['sequences'])} grasp sequences to {args.out}")


def cmd_train_classifier(args, cfg):
    n_cat = cfg.get("n_per_category", args.n_per_category)
    n_aug = cfg.get("n_aug", args.n_aug)
    if args.data:
        X, y = tactile.dataset_features(args.data)
    else:
        X, y = tactile.build_classifier_dataset(n_cat, n_aug, args.seed)
    clf = tactile.train_classifier(X, y, seed=args.seed)
    clf.save(args.out)
    Xt, yt = tactile.build_classifier_dataset(max(n_cat // 2, 1), 1, args.seed + 1)
    metrics = tactile.evaluate_classifier(clf, Xt, yt)
    print(json.dumps({k: v for k, v in metrics.items() if k != "confusion"}))


def cmd_pretrain_affordance(args, cfg):
    data = learn.AffordanceData.from_manifest(args.data)
    train, val = data.split(cfg.get("val_fraction", 0.1), args.seed)
    model = learn.PatchRegressor(seed=args.seed, **{k: cfg[k] for k in ("radius", "hidden", "stride") if k in cfg})
    model, loss = learn.pretrain(model, train, cfg.get("epochs", args.epochs), cfg.get("steps_per_epoch", 200),
                                 seed=args.seed)
    model.save(args.out)
    print(json.dumps({"train_loss": loss, "val_mse": learn.evaluate_mse(model, val)}))


def cmd_finetune_affordance(args, cfg):
    env = _env(cfg, target=True)
    model = learn.PatchRegressor.load(args.model)
    ft = _pick(learn.FinetuneConfig, cfg.get("finetune", {}), replay=False if args.no_replay else None)
    heldout = learn.LabeledSet.load(args.heldout) if args.heldout else None
    seeds = range(args.seed_offset, args.seed_offset + args.n_configs)
    tuned, olog = learn.online_training(model, env, seeds, _classifier(args.classifier, args.seed), args.budget, ft,
                                        cfg.get("threshold", 0.0), seed=args.seed, heldout=heldout)
    tuned.save(args.out)
    out = {"grasps": olog.grasps, "positives": olog.positives, "rotations": olog.rotations}
    if olog.curve:
        out["curve"] = olog.curve
    print(json.dumps(out))


def cmd_transfer_exp(args, cfg):
    tcfg = _pick(learn.TransferConfig, cfg.get("transfer", cfg))
    source = SimEnv.from_dict(cfg["source_env"]) if "source_env" in cfg else SimEnv()
    target = SimEnv.from_dict(cfg["target_env"]) if "target_env" in cfg else None
    clf = tactile.GraspClassifier.load(args.classifier) if args.classifier else None
    report = learn.run_transfer_experiment(source, target, args.seed, tcfg, clf, out_dir=args.out)
    print(json.dumps(report["precision_at_k"]))


def _plant(mode: str, cfg: dict, edge: str = "thin") -> sliding.SlidingPlant:
    plant = sliding.SlidingPlant.horizontal() if mode == "horizontal" else sliding.SlidingPlant.vertical(edge)
    over = {k: v for k, v in cfg.get("plant", {}).items() if k in {f.name for f in fields(plant)}}
    return replace(plant, **over)


def cmd_fit_dynamics(args, cfg):
    plant = _plant("horizontal", cfg)
    data, dyn, gains = sliding.identify_and_design(plant, cfg.get("n_runs", args.runs), cfg.get("steps", args.steps),
                                                   args.seed)
    sliding.save_dynamics(args.out, dyn)
    ratio = (np.asarray(dyn.residuals) / np.asarray(dyn.zero_residuals)).tolist()
    print(json.dumps({"observations": int(len(data.X)), "residual_ratio": ratio}))


def cmd_make_lqr(args, cfg):
    dyn = sliding.load_dynamics(args.dynamics)
    gains = sliding.lqr_gain(dyn, cfg.get("Q", sliding.SLIDE_Q), cfg.get("R", sliding.SLIDE_R))
    write_json(args.out, gains.to_dict())
    print(json.dumps({"K": gains.K.tolist(), "spectral_radius": sliding.closed_loop_radius(dyn, gains.K)}))


def cmd_slide(args, cfg):
    plant = _plant(args.mode, cfg, args.edge)
    if args.mode == "vertical":
        elog = sliding.vertical_slide(plant, cfg.get("k_p", sliding.VERTICAL_KP),
                                      cfg.get("shear_threshold", sliding.SHEAR_THRESHOLD_MM), args.coverage, args.seed)
    else:
        if args.controller == "lqr":
            if not args.gains:
                raise ValueError("--controller lqr needs --gains")
            ctrl = sliding.LQRController(sliding.LQRGains.from_dict(read_json(args.gains)).K)
        elif args.controller == "p":
            ctrl = sliding.ProportionalController(cfg.get("k_p", sliding.ROLLOUT_KP))
        else:
            ctrl = sliding.ZeroController()
        elog = sliding.horizontal_slide(plant, ctrl, args.coverage, args.seed)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        elog.write(args.out)
    print(json.dumps(elog.summary()))


def cmd_run_episode(args, cfg):
    ecfg = pipeline.EpisodeConfig.from_dict(cfg)
    model = learn.PatchRegressor.load(args.model) if args.model else None
    if model is None and "threshold" not in cfg:
        ecfg = replace(ecfg, threshold=0.5)
    report = pipeline.run_episode(ecfg, args.seed, _classifier(args.classifier, args.seed), model)
    if args.out:
        report.write(args.out)
    log.info("episode wall time %.1f s", report.wall_time)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "actions"}))


def cmd_eval(args, cfg):
    heldout = learn.LabeledSet.load(args.heldout)
    scorer = heldout.oracle if args.model == "oracle" else learn.PatchRegressor.load(args.model)
    p = learn.precision_at_k(scorer, heldout, args.k)
    print(json.dumps({"k": args.k, "n": len(heldout), "precision_at_k": p}))
    if args.min is not None and p < args.min:
        raise CheckFailed(f"precision@{args.k} = {p:.3f} below required {args.min:.3f}")


def _collect(paths):
    docs = []
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("*.json")) if p.is_dir() else [p]
        for f in files:
            try:
                d = read_json(f)
            except json.JSONDecodeError:
                continue
            if isinstance(d, dict) and "kind" in d:
                docs.append((f, d))
    return docs


def cmd_report(args, cfg):
    docs = _collect(args.inputs)
    rows = []
    for f, d in docs:
        kind = d["kind"]
        if kind == "transfer-report":
            for name, p in d["precision_at_k"].items():
                rows.append({"kind": kind, "group": name, "seed": d["seed"], "metric": f"precision@{d['k']}", "value": p})
        elif kind == "slide-episode":
            rows.append({"kind": kind, "group": f"{d['mode']}/{d['controller']}/c{d['init_coverage']}",
                         "seed": d["seed"], "metric": "traversal", "value": d["traversal"]})
        elif kind == "episode-report":
            rows.append({"kind": kind, "group": d["final_state"], "seed": d["seed"], "metric": "grasp_attempts",
                         "value": d["grasp_attempts"]})
    groups = {}
    for r in rows:
        groups.setdefault((r["kind"], r["group"], r["metric"]), []).append(r["value"])
    table = [{"kind": k, "group": g, "metric": m, "n": len(v), "mean": float(np.mean(v)), "min": float(np.min(v)),
              "max": float(np.max(v))} for (k, g, m), v in sorted(groups.items())]
    width = max([len(t["group"]) for t in table] + [5])
    print(f"{'kind':16s} {'group':{width}s} {'metric':14s} {'n':>4s} {'mean':>8s} {'min':>8s} {'max':>8s}")
    for t in table:
        print(f"{t['kind']:16s} {t['group']:{width}s} {t['metric']:14s} {t['n']:4d} {t['mean']:8.3f} "
              f"{t['min']:8.3f} {t['max']:8.3f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["kind", "group", "metric", "n", "mean", "min", "max"])
            w.writeheader()
            w.writerows(table)
    if not table:
        log.warning("no recognised logs under %s", ", ".join(args.inputs))


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file with overrides")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="clothslide", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, parents=[common], **kw)
        p.set_defaults(func=fn)
        return p

    p = add("gen-affordance-data", cmd_gen_affordance_data, help="render hanging configurations with labels")
    p.add_argument("--n-seeds", type=int, default=200)
    p.add_argument("--rotation-increment", type=float, default=15.0)
    p.add_argument("--target", action="store_true", help="use the shifted target environment")
    p.add_argument("--out", required=True)

    p = add("gen-tactile-data", cmd_gen_tactile_data, help="synthetic tactile grasp sequences")
    p.add_argument("--n-per-category", type=int, default=100)
    p.add_argument("--out", required=True)

    p = add("train-classifier", cmd_train_classifier, help="train the grasp classifier")
    p.add_argument("--data", help="tactile dataset directory (default: synthesize)")
    p.add_argument("--n-per-category", type=int, default=120)
    p.add_argument("--n-aug", type=int, default=6)
    p.add_argument("--out", required=True)

    p = add("pretrain-affordance", cmd_pretrain_affordance, help="fit the patch regressor on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out", required=True)

    p = add("finetune-affordance", cmd_finetune_affordance, help="online tactile-supervised fine-tuning")
    p.add_argument("--model", required=True)
    p.add_argument("--classifier")
    p.add_argument("--heldout", help="labeled set (.npz) for a precision curve")
    p.add_argument("--budget", type=int, default=300)
    p.add_argument("--n-configs", type=int, default=40)
    p.add_argument("--seed-offset", type=int, default=1000)
    p.add_argument("--no-replay", action="store_true")
    p.add_argument("--out", required=True)

    p = add("transfer-exp", cmd_transfer_exp, help="source-only vs scratch vs fine-tuned on the target")
    p.add_argument("--classifier")
    p.add_argument("--out", required=True)

    p = add("fit-dynamics", cmd_fit_dynamics, help="identify the horizontal sliding model")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--out", required=True)

    p = add("make-lqr", cmd_make_lqr, help="LQR gains for a fitted model")
    p.add_argument("--dynamics", required=True)
    p.add_argument("--out", required=True)

    p = add("slide", cmd_slide, help="one sliding episode")
    p.add_argument("mode", choices=["vertical", "horizontal"])
    p.add_argument("--coverage", type=float, default=0.8)
    p.add_argument("--edge", choices=["thin", "thick"], default="thin")
    p.add_argument("--controller", choices=["zero", "p", "lqr"], default="lqr")
    p.add_argument("--gains")
    p.add_argument("--out", help="log stem; writes .csv and .json")

    p = add("run-episode", cmd_run_episode, help="full task state machine")
    p.add_argument("--classifier")
    p.add_argument("--model", help="patch regressor JSON (default: geometric labels)")
    p.add_argument("--out")

    p = add("eval", cmd_eval, help="offline evaluation")
    p.add_argument("metric", choices=["precision-at-k"])
    p.add_argument("--model", required=True, help="patch regressor JSON or 'oracle'")
    p.add_argument("--heldout", required=True)
    p.add_argument("--k", type=int, default=40)
    p.add_argument("--min", type=float, help="fail with exit 3 below this precision")

    p = add("report", cmd_report, help="summarise JSON logs into a table")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", help="CSV path")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args, _config(args))
    except CheckFailed as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except (OSError, DatasetIOError, json.JSONDecodeError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
