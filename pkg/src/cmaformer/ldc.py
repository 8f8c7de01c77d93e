"""Lagrange-duality consistency loss.

The loss is a weighted BCE / Dice-like consistency term evaluated on student
probabilities that have first been projected onto a constraint set (box
bounds, non-negativity and a cap on the total mass). The projection is solved
through its KKT conditions: the optimum is a clipped uniform shift
``p* = clip(p - lam, lo, hi)`` with ``lam`` chosen so the mass cap holds, and
every multiplier is read back from the active constraints.
"""
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InfeasibleError, InputError

BETA1 = 0.314
BETA2 = 0.685


@dataclass(frozen=True)
class LdcParams:
    alpha: float = 1.0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = 1e-7

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.eps < 0.5:
            raise ConfigError(f"eps must lie in (0, 0.5), got {self.eps}")


@dataclass
class ConstraintSet:
    """Feasible region ``lower <= p <= upper``, ``p >= 0``, ``sum(p) <= sum_cap``
    together with the weight-norm cap ``|w|^2 <= weight_norm_cap``.

    ``lower`` and ``upper`` may be scalars or per-element arrays.
    """

    lower: object = 0.0
    upper: object = 1.0
    sum_cap: float = 1.0
    weight_norm_cap: float = 1e4

    def validate(self):
        lo, hi = np.asarray(self.lower, dtype=float), np.asarray(self.upper, dtype=float)
        if np.any(lo < 0) or np.any(lo > hi):
            raise ConfigError("bounds must satisfy 0 <= lower <= upper")
        if not self.sum_cap > 0:
            raise ConfigError(f"sum_cap must be positive, got {self.sum_cap}")
        if not self.weight_norm_cap > 0:
            raise ConfigError(f"weight_norm_cap must be positive, got {self.weight_norm_cap}")


@dataclass
class DualSolution:
    p_star: np.ndarray
    mu_plus: np.ndarray
    mu_minus: np.ndarray
    lam: float
    zeta: np.ndarray
    # multiplier of the weight-norm constraint; the projection onto the
    # parameter ball is handled separately, so this is zero here
    eta: float = 0.0

    def kkt_residuals(self, p, c):
        """Max-abs residual of each KKT condition for the projection of ``p``."""
        p = np.asarray(p, dtype=float)
        n = p.size
        lo = np.broadcast_to(np.maximum(np.asarray(c.lower, dtype=float), 0.0), (n,))
        hi = np.broadcast_to(np.asarray(c.upper, dtype=float), (n,))
        x = self.p_star
        stationarity = (x - p) + self.mu_plus - self.mu_minus - self.zeta + self.lam
        primal = np.concatenate([
            np.maximum(lo - x, 0), np.maximum(x - hi, 0), np.maximum(-x, 0), [max(x.sum() - c.sum_cap, 0)]
        ])
        dual = np.concatenate([
            np.minimum(self.mu_plus, 0), np.minimum(self.mu_minus, 0), np.minimum(self.zeta, 0), [min(self.lam, 0)]
        ])
        slack = np.concatenate([
            self.mu_plus * (hi - x),
            self.mu_minus * (x - lo),
            self.zeta * x,
            [self.lam * (c.sum_cap - x.sum())],
        ])
        return {
            "stationarity": float(np.abs(stationarity).max(initial=0.0)),
            "primal": float(np.abs(primal).max(initial=0.0)),
            "dual": float(np.abs(dual).max(initial=0.0)),
            "complementary_slackness": float(np.abs(slack).max(initial=0.0)),
        }


def solve_shift(p, lo, hi, cap, iters=60):
    """Smallest ``lam >= 0`` with ``sum(clip(p - lam, lo, hi)) <= cap``, per row.

    ``p`` is [..., N]; ``lo``/``hi`` broadcast against it and ``cap`` against
    ``p[..., 0]``. Bisection brackets the active set, then ``lam`` is solved
    exactly on that linear piece. Runs without autograd.
    """
    with torch.no_grad():
        p = p.detach()
        lo = torch.broadcast_to(torch.as_tensor(lo, dtype=p.dtype, device=p.device), p.shape)
        hi = torch.broadcast_to(torch.as_tensor(hi, dtype=p.dtype, device=p.device), p.shape)
        cap = torch.broadcast_to(torch.as_tensor(cap, dtype=p.dtype, device=p.device), p.shape[:-1])

        def mass(lam):
            return torch.minimum(torch.maximum(p - lam[..., None], lo), hi).sum(-1)

        zero = torch.zeros_like(cap)
        active = mass(zero) > cap
        # sum(clip(p - lam)) is nonincreasing in lam and reaches sum(lo) once
        # lam >= max(p - lo)
        a = zero.clone()
        b = torch.clamp((p - lo).amax(-1), min=0.0)
        for _ in range(iters):
            mid = 0.5 * (a + b)
            over = mass(mid) > cap
            a = torch.where(over, mid, a)
            b = torch.where(over, b, mid)
        lam = b
        # exact solve on the linear piece identified by the bracket
        x = p - lam[..., None]
        free = (x > lo) & (x < hi)
        fixed_mass = torch.where(x >= hi, hi, torch.where(x <= lo, lo, torch.zeros_like(x))).sum(-1)
        n_free = free.sum(-1)
        exact = ((p * free).sum(-1) + fixed_mass - cap) / n_free.clamp(min=1)
        refined = torch.where(n_free > 0, exact, lam)
        ok = (refined >= a - 1e-12) & (refined <= b + 1e-12)
        lam = torch.where(ok, refined, lam)
        return torch.where(active, lam.clamp(min=0.0), zero)


def project_kkt(p, c):
    """Euclidean projection of ``p`` onto ``c`` with its KKT multipliers.

    Raises InfeasibleError when the lower bounds alone exceed the mass cap.
    """
    c.validate()
    p = np.array(p, dtype=np.float64).ravel()
    n = p.size
    lower = np.broadcast_to(np.asarray(c.lower, dtype=np.float64), (n,)).copy()
    lo = np.maximum(lower, 0.0)
    hi = np.broadcast_to(np.asarray(c.upper, dtype=np.float64), (n,)).copy()
    if lo.sum() > c.sum_cap:
        raise InfeasibleError(f"sum of lower bounds {lo.sum():.6g} exceeds sum cap {c.sum_cap:.6g}")

    lam = float(solve_shift(torch.from_numpy(p), torch.from_numpy(lo), torch.from_numpy(hi),
                            torch.tensor(float(c.sum_cap), dtype=torch.float64)))
    shifted = p - lam
    x = np.clip(shifted, lo, hi)
    at_hi = shifted >= hi
    at_lo = (shifted <= lo) & ~at_hi
    mu_plus = np.where(at_hi, shifted - hi, 0.0)
    floor_mult = np.where(at_lo, lo - shifted, 0.0)
    # a floor of zero is the non-negativity constraint; a positive floor is the box
    mu_minus = np.where(lower > 0, floor_mult, 0.0)
    zeta = np.where(lower > 0, 0.0, floor_mult)
    return DualSolution(p_star=x, mu_plus=mu_plus, mu_minus=mu_minus, lam=lam, zeta=zeta)


def project_probs(p, lower=0.0, upper=1.0, sum_cap=1.0):
    """Differentiable batched projection ``clip(p - lam, max(lower, 0), upper)``.

    Rows are the last axis. ``lam`` comes from :func:`solve_shift` and is
    treated as a constant, so gradients flow through the clip only.
    """
    lo = torch.clamp(torch.as_tensor(lower, dtype=p.dtype, device=p.device), min=0.0)
    hi = torch.as_tensor(upper, dtype=p.dtype, device=p.device)
    lam = solve_shift(p, lo, hi, sum_cap)
    return torch.minimum(torch.maximum(p - lam[..., None], lo), hi)


def project_weights_l2ball(w, cap):
    """Scale ``w`` onto ``{|w|^2 <= cap}``: ``w * min(1, sqrt(cap) / |w|)``."""
    if cap <= 0:
        raise ConfigError(f"norm cap must be positive, got {cap}")
    if isinstance(w, torch.Tensor):
        norm = torch.linalg.vector_norm(w)
        scale = torch.clamp(cap ** 0.5 / norm, max=1.0) if norm > 0 else 1.0
        return w * scale
    w = np.asarray(w, dtype=np.float64)
    norm = np.linalg.norm(w)
    if norm == 0:
        return w.copy()
    return w * min(1.0, np.sqrt(cap) / norm)


def _dice_like(y, p):
    denom = y + p
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, y * p / safe, torch.zeros_like(denom))


def consistency_loss(p, y, params=LdcParams()):
    """Weighted BCE / Dice-like consistency loss.

    ``p`` and ``y`` are [2, N] (or [..., 2, N]): two class channels with N
    elements each. Returns

        -(1/N) sum_i [ alpha * sum_c y_ic log p_ic
                       + beta1 * y_i1 p_i1 / (y_i1 + p_i1)
                       + beta2 * y_i2 p_i2 / (y_i2 + p_i2) ]

    averaged over any leading axes. Probabilities are clamped below at eps
    inside the log only; the formula never takes log(1 - p), so no upper
    clamp is needed and p = 1 contributes exactly zero.
    """
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=p.dtype)
    if p.shape != y.shape:
        raise InputError(f"p and y differ in shape: {tuple(p.shape)} vs {tuple(y.shape)}")
    if p.dim() < 2 or p.shape[-2] != 2:
        raise InputError(f"expected two class channels on axis -2, got shape {tuple(p.shape)}")
    with torch.no_grad():
        if (p < 0).any() or (p > 1).any() or (y < 0).any() or (y > 1).any():
            raise InputError("probabilities and targets must lie in [0, 1]")
    eps = params.eps
    log_p = torch.log(p.clamp(min=eps))
    bce = (y * log_p).sum(-2)
    dice = params.beta1 * _dice_like(y[..., 0, :], p[..., 0, :]) + params.beta2 * _dice_like(y[..., 1, :], p[..., 1, :])
    return -(params.alpha * bce + dice).mean()


def foreground_channels(probs, classes=(1, 2)):
    # [B, K, H, W] -> [B, 2, H*W]
    return probs[:, list(classes)].flatten(2)


def ldc_loss(student_p, teacher_p, c=None, params=LdcParams(), cap_scale=1.05, classes=(1, 2)):
    """Consistency loss between KKT-projected student and teacher probabilities.

    Both inputs are softmax probabilities [B, K, H, W]. The student's two
    foreground channels are projected per image and per channel. With ``c``
    None the mass cap is ``cap_scale`` times the teacher's mass on that
    channel; otherwise ``c.sum_cap`` is used for every row.
    """
    s = foreground_channels(student_p, classes)
    t = foreground_channels(teacher_p, classes).detach()
    if c is None:
        lower, upper = 0.0, 1.0
        cap = cap_scale * t.sum(-1)
    else:
        c.validate()
        lower, upper, cap = c.lower, c.upper, c.sum_cap
    s_proj = project_probs(s, lower, upper, torch.clamp(torch.as_tensor(cap, dtype=s.dtype), min=1e-6))
    return consistency_loss(s_proj, t, params)
