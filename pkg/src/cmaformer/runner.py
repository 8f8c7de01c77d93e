"""Experiment runs shared by the command line and the acceptance suite:
train from an ExperimentConfig, write metrics, checkpoint, CSVs and plots.
"""
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES, ArrayDataset, mark_labeled_fraction
from .errors import DataError
from .training import JsonlWriter, Trainer, dice_scores, fit, labeled_batches, predict

DICE_COLUMNS = tuple(CLASS_NAMES.values()) + ("average",)

# RGB per class for overlays: background, organ, tumor
PALETTE = np.array([[0, 0, 0], [60, 180, 75], [230, 25, 75]], dtype=np.uint8)


@dataclass
class RunResult:
    trainer: Trainer
    history: list
    curve: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)


def labeled_manifest(manifest, fraction, seed):
    return manifest if fraction >= 1 else mark_labeled_fraction(manifest, fraction, seed)


def check_compatible(model_cfg, manifest):
    if (manifest.height, manifest.width) != (model_cfg.img_size, model_cfg.img_size):
        raise DataError(
            f"dataset images are {manifest.height}x{manifest.width} but the model expects "
            f"{model_cfg.img_size}x{model_cfg.img_size}"
        )


def split_scores(model, data, manifest, split):
    ids = manifest.ids_in(split)
    if not ids:
        return None
    x, y = data.take(ids)
    return dice_scores(predict(model, x), y)


def train_run(cfg, records, manifest, out=None, eval_split="val", eval_every=0, final_splits=("train", "val")):
    """Train one configuration; returns a RunResult.

    With ``out`` set, writes config.yaml, metrics.jsonl, checkpoint.npz, one
    eval_<split>.csv per final split, val_curve.csv and the plots.
    ``eval_every`` > 0 evaluates ``eval_split`` every that many epochs.
    """
    model_cfg = cfg.model_config()
    check_compatible(model_cfg, manifest)
    seed = cfg.run.seed
    man = labeled_manifest(manifest, cfg.data.labeled_fraction, seed)
    data = ArrayDataset(records)
    steps = cfg.run.epochs * labeled_batches(len(man.labeled_ids()), cfg.train.batch_size)
    trainer = Trainer(model_cfg, cfg.loss_weights(), cfg.train, cfg.ldc, max_steps=steps, seed=seed)

    writer = None
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.yaml")
        writer = JsonlWriter(out / "metrics.jsonl")
    curve = []

    def on_epoch(epoch):
        if eval_every and (epoch % eval_every == 0 or epoch == cfg.run.epochs):
            s = split_scores(trainer.student, data, man, eval_split)
            if s is not None:
                curve.append({"epoch": epoch, **s})

    try:
        history = fit(trainer, data, man, cfg.run.epochs, on_step=writer, on_epoch=on_epoch)
    finally:
        if writer is not None:
            writer.close()

    scores = {}
    for split in final_splits:
        s = split_scores(trainer.student, data, man, split)
        if s is not None:
            scores[split] = s
    result = RunResult(trainer, history, curve, scores)
    if out is not None:
        trainer.save(out / "checkpoint.npz")
        for split, s in scores.items():
            write_dice_csv(out / f"eval_{split}.csv", s)
        write_curve_csv(out / "val_curve.csv", curve)
        plot_run(out, history, curve)
    return result


def dice_csv_text(scores):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "dice"])
    for c in DICE_COLUMNS:
        w.writerow([c, f"{scores[c]:.6f}"])
    return buf.getvalue()


def write_dice_csv(path, scores):
    Path(path).write_text(dice_csv_text(scores))


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", *DICE_COLUMNS])
        for row in curve:
            w.writerow([row["epoch"], *(f"{row[c]:.6f}" for c in DICE_COLUMNS)])


def read_history(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def plot_run(out, history, curve):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    steps = [r["step"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("loss_total", "loss_sup", "loss_contrast", "loss_con"):
        ax.plot(steps, [r[key] for r in history], label=key.removeprefix("loss_"), lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    if curve:
        epochs = [r["epoch"] for r in curve]
        for c in DICE_COLUMNS:
            ax.plot(epochs, [r[c] for r in curve], marker="o", label=c)
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation Dice (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(out / "dice.png", dpi=100)
    plt.close(fig)


def overlay(image, label, pred):
    """Side-by-side uint8 RGB panel: image | ground truth | prediction."""
    gray = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    gray = np.repeat(gray[..., None], 3, axis=-1)

    def blend(mask):
        colored = gray.copy()
        fg = mask > 0
        colored[fg] = (0.5 * gray[fg] + 0.5 * PALETTE[mask[fg]]).astype(np.uint8)
        return colored

    return np.concatenate([gray, blend(label), blend(pred)], axis=1)
