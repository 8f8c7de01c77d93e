"""Command line: ``cmaformer {synth,train,eval,ablate}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure (non-finite loss).
"""
import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ExperimentConfig
from .data import ArrayDataset, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, TrainingError
from .reference import ABLATION, ABLATION_LABELS, lits_row
from .runner import DICE_COLUMNS, check_compatible, dice_csv_text, overlay, train_run
from .training import Trainer, dice_scores, predict

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out is not None:
        cfg.run.out = args.out
    if getattr(args, "data", None) is not None:
        cfg.data.path = args.data
    if getattr(args, "labeled_fraction", None) is not None:
        cfg.data.labeled_fraction = args.labeled_fraction
    if getattr(args, "epochs", None) is not None:
        cfg.run.epochs = args.epochs
    for flag, key in (("ablate_no_vit", "vit_block"), ("ablate_no_cross", "cross_attention"),
                      ("ablate_no_ldc", "ldc_loss")):
        if getattr(args, flag, False):
            setattr(cfg.ablation, key, False)
    # re-run validation on the overridden values
    return ExperimentConfig.from_dict(cfg.to_dict())


def cmd_synth(args):
    try:
        records, manifest = generate_dataset(args.n, args.size, seed=args.seed or 0)
    except ConfigError as e:
        raise ConfigError(f"--n/--size: {e}") from None
    out = Path(args.out or "data")
    save_dataset(str(out), records, manifest)
    print(f"wrote {len(records)} samples to {out}")
    print(f"manifest hash {manifest.hash}")


def cmd_train(args):
    cfg = load_config(args)
    records, manifest = load_dataset(cfg.data.path)
    out = Path(cfg.run.out)
    result = train_run(cfg, records, manifest, out=out, eval_every=args.eval_every)
    w = cfg.loss_weights()
    print(f"trained {result.trainer.step} steps; gamma_con={w.gamma_con} vit_block={cfg.ablation.vit_block} "
          f"cross_attention={cfg.ablation.cross_attention} ldc_loss={cfg.ablation.ldc_loss}")
    for split, s in result.scores.items():
        print(f"{split}: " + " ".join(f"{c}={s[c]:.2f}" for c in DICE_COLUMNS))
    print(f"outputs in {out}")


def cmd_eval(args):
    trainer = Trainer.load(args.checkpoint)
    records, manifest = load_dataset(args.data)
    check_compatible(trainer.model_cfg, manifest)
    ids = manifest.ids_in(args.split)
    if not ids:
        raise DataError(f"split {args.split!r} is empty")
    x, y = ArrayDataset(records).take(ids)
    pred = predict(trainer.student, x)
    scores = dice_scores(pred, y)

    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{args.split}.csv").write_text(dice_csv_text(scores))
    # published numbers go to their own file, never into the measured CSV
    with open(out / "reference.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["dataset", "model", "class", "dice_paper_not_reproduced"])
        for c, v in lits_row("CMAformer").items():
            wr.writerow(["lits", "CMAformer", c, f"{v:.2f}"])
    if args.overlays:
        odir = out / "overlays"
        odir.mkdir(exist_ok=True)
        for k in range(min(args.overlays, len(ids))):
            Image.fromarray(overlay(x[k, 0], y[k], pred[k])).save(odir / f"{ids[k]}.png")
    if args.stack:
        np.save(out / f"stack_{args.split}.npy", pred.astype(np.uint8))

    print(f"{args.split} ({len(ids)} images): " + " ".join(f"{c}={scores[c]:.2f}" for c in DICE_COLUMNS))
    ref = lits_row("CMAformer")
    print("reference (LiTS CMAformer, paper, not reproduced): "
          + "/".join(f"{ref[c]:.2f}" for c in ("average", "liver", "tumor")))


def cmd_ablate(args):
    base = load_config(args)
    records, manifest = load_dataset(base.data.path)
    out = Path(base.run.out)
    seeds = args.seeds
    rows = []
    for toggles, label in ABLATION_LABELS.items():
        vit, cross, ldc = toggles
        per_seed = []
        for seed in seeds:
            cfg = replace(base, run=replace(base.run, seed=seed),
                          ablation=replace(base.ablation, vit_block=vit, cross_attention=cross, ldc_loss=ldc))
            cfg = ExperimentConfig.from_dict(cfg.to_dict())
            tag = f"vit{int(vit)}_cross{int(cross)}_ldc{int(ldc)}"
            res = train_run(cfg, records, manifest, out=out / tag / f"seed{seed}", final_splits=("val",))
            per_seed.append(res.scores["val"])
            print(f"{label} seed {seed}: " + " ".join(f"{c}={res.scores['val'][c]:.2f}" for c in DICE_COLUMNS),
                  flush=True)
        row = {"combination": label, "vit_block": vit, "cross_attention": cross, "ldc_loss": ldc,
               "seeds": " ".join(map(str, seeds))}
        for c in DICE_COLUMNS:
            vals = np.array([s[c] for s in per_seed])
            row[f"{c}_mean"] = f"{vals.mean():.4f}"
            row[f"{c}_std"] = f"{vals.std():.4f}"
        paper = ABLATION[toggles]
        for c in ("average", "liver", "tumor"):
            row[f"paper_not_reproduced_{c}"] = f"{paper[c]:.2f}"
        rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"ablation report: {out / 'ablation.csv'}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    train_like = argparse.ArgumentParser(add_help=False)
    train_like.add_argument("--data", help="dataset directory (overrides data.path)")
    train_like.add_argument("--labeled-fraction", type=float)
    train_like.add_argument("--epochs", type=int)

    parser = argparse.ArgumentParser(prog="cmaformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, train_like], help="train one configuration")
    p.add_argument("--ablate-no-vit", action="store_true", help="drop transformer blocks and spatial attention")
    p.add_argument("--ablate-no-cross", action="store_true", help="drop decoder cross-attention")
    p.add_argument("--ablate-no-ldc", action="store_true", help="force gamma_con to 0")
    p.add_argument("--eval-every", type=int, default=0, help="validation Dice every N epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--overlays", type=int, default=0, help="write this many overlay PNGs")
    p.add_argument("--stack", action="store_true", help="save predictions as one [N, H, W] volume")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common, train_like], help="run the four ablation combinations")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
