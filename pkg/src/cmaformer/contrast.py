"""Boundary-aware contrastive objective over signed distance maps."""
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError, InputError

_FOUR_NEIGHBOURS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def boundary_pixels(mask):
    """Foreground pixels with at least one 4-neighbour in the background.

    Pixels outside the image do not count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_FOUR_NEIGHBOURS, border_value=1)
    return mask & ~eroded


def _check_binary(mask):
    mask = np.asarray(mask)
    if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
        raise InputError("signed distance map needs a binary mask")
    return mask.astype(bool)


def signed_distance(mask):
    """Unnormalized SDM: Euclidean distance to the nearest boundary pixel,
    negative inside the foreground, zero on the boundary, positive outside.

    Returns None when the mask has no boundary (empty or full).
    """
    mask = _check_binary(mask)
    boundary = boundary_pixels(mask)
    if not boundary.any():
        return None
    dist = ndimage.distance_transform_edt(~boundary)
    return np.where(mask, -dist, dist)


def signed_distance_map(mask):
    """SDM normalized to [-1, 1] by its largest absolute distance.

    Empty masks map to +1 everywhere and full masks to -1.
    """
    mask = _check_binary(mask)
    sdm = signed_distance(mask)
    if sdm is None:
        fill = -1.0 if mask.any() else 1.0
        return np.full(mask.shape, fill)
    scale = np.abs(sdm).max()
    return sdm / scale if scale > 0 else sdm


def batch_sdm(masks):
    """SDMs for a [B, K, H, W] stack of binary masks as a float32 tensor."""
    arr = masks.detach().cpu().numpy().astype(bool)
    out = np.stack([[signed_distance_map(m) for m in per_sample] for per_sample in arr])
    return torch.as_tensor(out, dtype=torch.float32, device=masks.device)


def sdm_features(probs, sdm, pool=4):
    """Boundary-aware pooled features from class probabilities and their SDMs.

    For every foreground channel the probability map is weighted by boundary
    proximity ``1 - |sdm|``; that map and the SDM itself are average-pooled to
    a ``pool x pool`` grid and flattened. ``probs`` and ``sdm`` are
    [B, K, H, W].
    """
    weighted = probs * (1.0 - sdm.abs())
    feats = torch.cat([weighted, sdm], dim=1)
    return F.adaptive_avg_pool2d(feats, pool).flatten(1)


class ProjectionHead(nn.Module):
    """linear -> GELU -> linear -> L2 normalize."""

    def __init__(self, in_dim, hidden_dim=64, out_dim=32):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        return F.normalize(self.fc2(F.gelu(self.fc1(x))), dim=-1, eps=1e-12)


def info_nce(h_t, h_s, tau=0.1):
    """InfoNCE with the teacher embedding of each sample as anchor, the
    student embedding of the same sample as positive and every other
    student embedding in the batch as a negative.

    ``h_t`` and ``h_s`` are [M, D]; the loss is averaged over the M anchors.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    logits = h_t @ h_s.T / tau
    target = torch.arange(h_t.shape[0], device=h_t.device)
    return F.cross_entropy(logits, target)


def info_nce_pair(anchor, positive, negatives, tau=0.1):
    """Single-anchor form: -log( exp(a.p/tau) / sum_{c in {p} + negatives} exp(a.c/tau) )."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    cands = torch.cat([positive[None], negatives], dim=0)
    logits = cands @ anchor / tau
    return torch.logsumexp(logits, 0) - logits[0]

