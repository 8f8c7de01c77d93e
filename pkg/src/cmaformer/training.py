"""Teacher-student semi-supervised training.

total = lambda_sup * MSE(student probs, one-hot)
      + beta_contrast * InfoNCE(teacher SDM embeddings, student SDM embeddings)
      + gamma_con * LDC(student, teacher) on unlabeled images
"""
import copy
import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import from_arrays, load_checkpoint, save_checkpoint, to_arrays
from .contrast import ProjectionHead, batch_sdm, info_nce, sdm_features
from .data import CLASS_NAMES
from .errors import ConfigError, TrainingError
from .ldc import LdcParams, ldc_loss, project_weights_l2ball
from .model import CMAformer, ModelConfig

FOREGROUND = (1, 2)
LOSS_TERMS = ("sup", "contrast", "con")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class LossWeights:
    lambda_sup: float = 1.0
    beta_contrast: float = 0.1
    gamma_con: float = 1.0
    # gamma ramps up over this fraction of the run
    ramp_fraction: float = 0.2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be >= 0, got {v}")


@dataclass
class TrainConfig:
    # "sgd" (momentum + weight decay) or "adam" (same lr and weight decay)
    optimizer: str = "sgd"
    base_lr: float = 1e-3
    momentum: float = 0.99
    weight_decay: float = 3e-5
    poly_power: float = 0.9
    ema_decay: float = 0.99
    batch_size: int = 4
    tau: float = 0.1
    cap_scale: float = 1.05
    weight_norm_cap: float = 1e4
    project_weights: bool = True
    unlabeled_noise: float = 0.1
    sdm_pool: int = 4
    embed_dim: int = 32

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


def poly_lr(step, max_steps, base_lr=1e-3, power=0.9):
    """base_lr * (1 - step / max_steps) ** power; zero at and beyond max_steps."""
    if max_steps <= 0:
        raise ConfigError("max_steps must be positive")
    if step >= max_steps:
        return 0.0
    return base_lr * (1.0 - max(step, 0) / max_steps) ** power


def sigmoid_rampup(step, ramp_steps):
    if ramp_steps <= 0:
        return 1.0
    t = min(max(step / ramp_steps, 0.0), 1.0)
    return math.exp(-5.0 * (1.0 - t) ** 2)


class SSLNet(nn.Module):
    """Segmentation network plus the SDM projection head."""

    def __init__(self, model_cfg=None, sdm_pool=4, embed_dim=32):
        super().__init__()
        self.seg = CMAformer(model_cfg)
        self.sdm_pool = sdm_pool
        self.head = ProjectionHead(2 * len(FOREGROUND) * sdm_pool ** 2, 64, embed_dim)

    def forward(self, x):
        return self.seg(x)

    def embed(self, probs):
        fg = probs[:, list(FOREGROUND)]
        sdm = batch_sdm(fg > 0.5).to(fg.dtype)
        return self.head(sdm_features(fg, sdm, self.sdm_pool))


def make_teacher(student):
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


@torch.no_grad()
def ema_update(teacher, student, decay):
    """teacher <- decay * teacher + (1 - decay) * student for every parameter;
    buffers (batch-norm statistics) are copied from the student."""
    if not 0 <= decay <= 1:
        raise ConfigError(f"ema decay must lie in [0, 1], got {decay}")
    t_params, s_params = dict(teacher.named_parameters()), dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ConfigError("teacher and student parameters differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ConfigError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        tp.mul_(decay).add_(sp.detach(), alpha=1.0 - decay)
    for tb, sb in zip(teacher.buffers(), student.buffers()):
        tb.copy_(sb)
    return teacher


def one_hot(labels, num_classes):
    return F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def total_loss(student, teacher, batch, weights, cfg=TrainConfig(), ldc_params=LdcParams(), gamma_scale=1.0):
    """Weighted objective and its per-term breakdown.

    ``batch`` holds ``x_l``, ``y_l`` (labeled images / integer masks) and
    optionally ``x_u`` (unlabeled images seen by the teacher) and
    ``x_u_student`` (their perturbed copies seen by the student). Returns
    ``(total, terms)`` where ``terms`` maps sup/contrast/con to unweighted
    losses and ``weighted`` to the weighted contributions.
    """
    x_l, y_l = batch["x_l"], batch["y_l"]
    if x_l is None or len(x_l) == 0:
        raise TrainingError("labeled batch is empty")
    x_u = batch.get("x_u")
    has_u = x_u is not None and len(x_u) > 0
    x_u_student = batch.get("x_u_student", x_u) if has_u else None
    n_l = len(x_l)

    x_s = torch.cat([x_l, x_u_student]) if has_u else x_l
    probs = torch.softmax(student(x_s), dim=1)
    target = one_hot(y_l, probs.shape[1]).to(probs.dtype)
    l_sup = F.mse_loss(probs[:n_l], target)

    need_teacher = weights.beta_contrast > 0 or (has_u and weights.gamma_con > 0)
    t_probs = None
    if need_teacher:
        teacher.eval()
        with torch.no_grad():
            x_t = torch.cat([x_l, x_u]) if has_u else x_l
            t_probs = torch.softmax(teacher(x_t), dim=1)

    zero = probs.new_zeros(())
    l_contrast = zero
    if weights.beta_contrast > 0 and len(x_s) > 1:
        with torch.no_grad():
            h_t = teacher.embed(t_probs)
        l_contrast = info_nce(h_t, student.embed(probs), cfg.tau)

    l_con = zero
    if has_u and weights.gamma_con > 0:
        l_con = ldc_loss(probs[n_l:], t_probs[n_l:], params=ldc_params, cap_scale=cfg.cap_scale)

    gamma = weights.gamma_con * gamma_scale
    weighted = {
        "sup": weights.lambda_sup * l_sup,
        "contrast": weights.beta_contrast * l_contrast,
        "con": gamma * l_con,
    }
    total = weighted["sup"] + weighted["contrast"] + weighted["con"]
    return total, {"sup": l_sup, "contrast": l_contrast, "con": l_con, "weighted": weighted, "gamma": gamma}


def flat_params(module):
    return torch.cat([p.detach().flatten() for p in module.parameters()])


@torch.no_grad()
def project_module_l2ball(module, cap):
    """Rescale every parameter of ``module`` jointly onto ``{|w|^2 <= cap}``."""
    w = flat_params(module)
    scale = float((project_weights_l2ball(w, cap).norm() / w.norm()).item()) if w.norm() > 0 else 1.0
    if scale < 1.0:
        for p in module.parameters():
            p.mul_(scale)
    return scale


def make_optimizer(params, cfg):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


class Trainer:
    """Owns student, EMA teacher, the optimizer and the step counter."""

    def __init__(self, model_cfg=None, weights=None, cfg=None, ldc_params=None, max_steps=1000, seed=0):
        self.model_cfg = model_cfg or ModelConfig()
        self.weights = weights or LossWeights()
        self.cfg = cfg or TrainConfig()
        self.ldc_params = ldc_params or LdcParams()
        self.seed = seed
        self.max_steps = max_steps
        torch.manual_seed(seed)
        self.student = SSLNet(self.model_cfg, self.cfg.sdm_pool, self.cfg.embed_dim)
        self.teacher = make_teacher(self.student)
        self.optimizer = make_optimizer(self.student.parameters(), self.cfg)
        self.step = 0
        self.noise = torch.Generator().manual_seed(seed + 1)

    def lr(self):
        return poly_lr(self.step, self.max_steps, self.cfg.base_lr, self.cfg.poly_power)

    def gamma_scale(self):
        return sigmoid_rampup(self.step, self.weights.ramp_fraction * self.max_steps)

    def train_step(self, x_l, y_l, x_u=None):
        t0 = time.perf_counter()
        lr = self.lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        batch = {"x_l": torch.as_tensor(x_l), "y_l": torch.as_tensor(y_l)}
        if x_u is not None and len(x_u):
            x_u = torch.as_tensor(x_u)
            noise = torch.randn(x_u.shape, generator=self.noise, dtype=x_u.dtype) * self.cfg.unlabeled_noise
            batch["x_u"], batch["x_u_student"] = x_u, x_u + noise

        self.student.train()
        self.optimizer.zero_grad(set_to_none=True)
        total, terms = total_loss(
            self.student, self.teacher, batch, self.weights, self.cfg, self.ldc_params, self.gamma_scale()
        )
        for name in LOSS_TERMS:
            if not torch.isfinite(terms[name]):
                raise TrainingError(f"non-finite loss term '{name}' at step {self.step}", term=name)
        total.backward()
        self.optimizer.step()
        if self.cfg.project_weights:
            project_module_l2ball(self.student, self.cfg.weight_norm_cap)
        ema_update(self.teacher, self.student, self.cfg.ema_decay)

        record = {
            "step": self.step,
            "lr": lr,
            "loss_total": total.item(),
            "loss_sup": terms["sup"].item(),
            "loss_contrast": terms["contrast"].item(),
            "loss_con": terms["con"].item(),
            "gamma_con": float(terms["gamma"]),
            "optimizer": self.cfg.optimizer,
            "momentum": self.cfg.momentum,
            "weight_decay": self.cfg.weight_decay,
            "wall_time": time.perf_counter() - t0,
        }
        self.step += 1
        return record

    def metadata(self):
        return {
            "model": self.model_cfg.to_dict(),
            "train": asdict(self.cfg),
            "weights": asdict(self.weights),
            "ldc": asdict(self.ldc_params),
            "step": self.step,
            "max_steps": self.max_steps,
            "seed": self.seed,
        }

    def state_arrays(self):
        arrays = to_arrays(self.student.state_dict(), "student.")
        arrays.update(to_arrays(self.teacher.state_dict(), "teacher."))
        for i, p in enumerate(self.student.parameters()):
            for k, v in self.optimizer.state.get(p, {}).items():
                if torch.is_tensor(v):
                    arrays[f"optim.{i}.{k}"] = v.detach().cpu().numpy().copy()
        arrays["noise_state"] = self.noise.get_state().numpy().copy()
        return arrays

    def save(self, path):
        return save_checkpoint(path, self.state_arrays(), self.metadata())

    @classmethod
    def load(cls, path):
        """Rebuild a trainer (models, optimizer buffers, step) from a checkpoint."""
        arrays, meta = load_checkpoint(path)
        try:
            trainer = cls(
                ModelConfig(**meta["model"]), LossWeights(**meta["weights"]), TrainConfig(**meta["train"]),
                LdcParams(**meta["ldc"]), meta["max_steps"], meta["seed"],
            )
            trainer.student.load_state_dict(from_arrays(arrays, "student."))
            trainer.teacher.load_state_dict(from_arrays(arrays, "teacher."))
        except (KeyError, TypeError, RuntimeError) as e:
            raise ConfigError(f"checkpoint {path} does not match this model: {e}") from e
        params = list(trainer.student.parameters())
        for k, v in from_arrays(arrays, "optim.").items():
            i, name = k.split(".", 1)
            trainer.optimizer.state[params[int(i)]][name] = v
        if "noise_state" in arrays:
            trainer.noise.set_state(torch.from_numpy(np.array(arrays["noise_state"])))
        trainer.step = meta["step"]
        return trainer


def labeled_batches(n_labeled, batch_size):
    return max(1, math.ceil(n_labeled / batch_size))


def fit(trainer, data, manifest, epochs, on_step=None, on_epoch=None):
    """Train for ``epochs`` passes over the labeled train ids.

    Unlabeled train ids are cycled alongside in equally sized batches. Labels
    of unlabeled samples are never read. ``on_epoch(epoch)`` runs after each
    pass (epochs counted from 1).
    """
    lab = manifest.labeled_ids()
    unl = manifest.unlabeled_ids()
    if not lab:
        raise TrainingError("no labeled training samples")
    bs = trainer.cfg.batch_size
    rng = np.random.default_rng([trainer.seed, 0xF17])
    x_unl = data.images_of(unl) if unl else None
    u_order, u_pos = (rng.permutation(len(unl)) if unl else None), 0
    records = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(lab))
        for start in range(0, len(lab), bs):
            ids = [lab[k] for k in order[start : start + bs]]
            x_l, y_l = data.take(ids)
            x_u = None
            if unl:
                take = []
                while len(take) < len(ids):
                    if u_pos == len(unl):
                        u_order, u_pos = rng.permutation(len(unl)), 0
                    take.append(u_order[u_pos])
                    u_pos += 1
                x_u = x_unl[take]
            rec = trainer.train_step(torch.from_numpy(x_l), torch.from_numpy(y_l),
                                     None if x_u is None else torch.from_numpy(x_u))
            records.append(rec)
            if on_step is not None:
                on_step(rec)
        if on_epoch is not None:
            on_epoch(epoch)
    return records


@torch.no_grad()
def predict(model, images, batch_size=16):
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(images[start : start + batch_size])
        out.append(model(x).argmax(1).cpu().numpy())
    return np.concatenate(out)


def dice_scores(pred, target, classes=CLASS_NAMES):
    """Dice per foreground class, pooled over all images, as a percentage.

    A class absent from both prediction and target scores 100.
    """
    pred, target = np.asarray(pred), np.asarray(target)
    scores = {}
    for c, name in classes.items():
        a, b = pred == c, target == c
        denom = a.sum() + b.sum()
        scores[name] = 100.0 if denom == 0 else float(200.0 * (a & b).sum() / denom)
    scores["average"] = float(np.mean([scores[n] for n in classes.values()]))
    return scores


def evaluate(model, images, labels, batch_size=16):
    if len(images) == 0:
        raise ConfigError("cannot evaluate an empty split")
    return dice_scores(predict(model, images, batch_size), labels)


class JsonlWriter:
    def __init__(self, path):
        self.f = open(path, "w")

    def __call__(self, record):
        self.f.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self.f.close()
