"""CMAformer: a residual U-shaped network with patch embedding, transformer
blocks (query-side layer norm and query skip), an ASPP-style spatial attention
bottleneck and decoder cross-attention to the encoder skips.
"""
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ChannelAttention, CrossAttention, MultiHeadAttention, RelPosBias, SpatialAttention
from .errors import ConfigError, ShapeError


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 3
    img_size: int = 64
    patch_size: int = 4
    stage_widths: tuple = (32, 64, 128)
    depths: tuple = (1, 1, 1)
    heads: tuple = (2, 4, 8)
    mlp_ratio: float = 4.0
    rates: tuple = (1, 6, 12)
    stem_width: int = 16
    reduce_ratio: int = 4
    dropout_rate: float = 0.0
    # ablation toggles
    vit_block: bool = True
    cross_attention: bool = True

    def __post_init__(self):
        self.stage_widths = tuple(self.stage_widths)
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        self.rates = tuple(self.rates)
        self.validate()

    @property
    def num_stages(self):
        return len(self.stage_widths)

    @property
    def grid_size(self):
        return self.img_size // self.patch_size

    def validate(self):
        n = self.num_stages
        if n < 1:
            raise ConfigError("at least one encoder stage is required")
        if len(self.depths) != n or len(self.heads) != n:
            raise ConfigError("stage_widths, depths and heads must have the same length")
        if any(b <= a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigError(f"stage_widths must be strictly increasing, got {self.stage_widths}")
        for w, h in zip(self.stage_widths, self.heads):
            if w % h:
                raise ConfigError(f"heads={h} does not divide stage width {w}")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be positive")
        # downsampling happens on the patch grid, so both factors compound
        step = self.patch_size * 2 ** (n - 1)
        if self.img_size % step:
            raise ConfigError(
                f"img_size={self.img_size} must be divisible by patch_size * 2^(stages-1) = {step}"
            )
        if any(d < 0 for d in self.depths):
            raise ConfigError("depths must be non-negative")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class PositionMap:
    """(row, col) coordinates of every token on a patch grid, row-major."""

    grid: tuple
    rows: torch.Tensor = field(repr=False)
    cols: torch.Tensor = field(repr=False)

    @classmethod
    def for_grid(cls, gh, gw, device=None):
        rows, cols = torch.meshgrid(
            torch.arange(gh, device=device), torch.arange(gw, device=device), indexing="ij"
        )
        return cls((gh, gw), rows.flatten(), cols.flatten())

    def __len__(self):
        return self.grid[0] * self.grid[1]

    def token_index(self, row, col):
        return row * self.grid[1] + col

    def coords(self, token):
        return self.rows[token], self.cols[token]


def map_to_tokens(x):
    # [B, C, H, W] -> [B, H*W, C]
    return x.flatten(2).transpose(1, 2)


def tokens_to_map(t, grid):
    b, n, c = t.shape
    gh, gw = grid
    if n != gh * gw:
        raise ShapeError(f"{n} tokens cannot fill a {gh}x{gw} grid")
    return t.transpose(1, 2).reshape(b, c, gh, gw)


class PatchEmbed(nn.Module):
    """Split a feature map into p x p patches, project each, and add a learned
    embedding of the patch's (row, col) coordinate."""

    def __init__(self, in_channels, dim, patch_size, grid_size):
        super().__init__()
        self.patch_size = patch_size
        gh, gw = (grid_size, grid_size) if isinstance(grid_size, int) else tuple(grid_size)
        self.grid_size = (gh, gw)
        self.proj = nn.Conv2d(in_channels, dim, patch_size, stride=patch_size)
        self.row_embed = nn.Parameter(torch.zeros(gh, dim))
        self.col_embed = nn.Parameter(torch.zeros(gw, dim))
        nn.init.trunc_normal_(self.row_embed, std=0.02)
        nn.init.trunc_normal_(self.col_embed, std=0.02)

    def forward(self, x):
        p = self.patch_size
        h, w = x.shape[-2:]
        if h % p or w % p:
            raise ShapeError(f"spatial dims {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        if gh > self.grid_size[0] or gw > self.grid_size[1]:
            raise ShapeError(f"patch grid {gh}x{gw} exceeds embedding grid {self.grid_size}")
        pos = PositionMap.for_grid(gh, gw, device=x.device)
        tokens = map_to_tokens(self.proj(x))
        tokens = tokens + self.row_embed[pos.rows] + self.col_embed[pos.cols]
        return tokens, pos


def conv_bn(in_ch, out_ch, k=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(out_ch),
    )


class ResidualBlock(nn.Module):
    """conv-BN-ReLU-conv-BN, channel attention, plus a (projected) skip."""

    def __init__(self, in_ch, out_ch, reduce_ratio=4):
        super().__init__()
        self.conv1 = conv_bn(in_ch, out_ch)
        self.conv2 = conv_bn(out_ch, out_ch)
        self.channel_attn = ChannelAttention(out_ch, reduce_ratio)
        self.skip = nn.Identity() if in_ch == out_ch else conv_bn(in_ch, out_ch, k=1)

    def main_path(self, x):
        return self.channel_attn(self.conv2(F.relu(self.conv1(x))))

    def forward(self, x):
        return self.skip(x) + self.main_path(x)


class Downsample(nn.Module):
    """Two convolutions with ReLU, the second strided by 2."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = conv_bn(in_ch, out_ch)
        self.conv2 = conv_bn(out_ch, out_ch, stride=2)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class Upsample(nn.Module):
    """Nearest-neighbour upsampling followed by conv-BN-ReLU."""

    def __init__(self, in_ch, out_ch, scale=2):
        super().__init__()
        self.scale = scale
        self.conv = conv_bn(in_ch, out_ch)

    def forward(self, x):
        return F.relu(self.conv(F.interpolate(x, scale_factor=self.scale, mode="nearest")))


class TransformerBlock(nn.Module):
    """Pre-norm on the query only, with the normalized query as the skip:

        Q = LN(x);  y = Q + MSA(Q, x, x);  out = y + MLP(LN(y))
    """

    def __init__(self, dim, heads, grid_size, mlp_ratio=4.0, dropout_rate=0.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout_rate=dropout_rate)
        self.rel_bias = RelPosBias(grid_size, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, bias=None):
        if x.dim() != 3:
            raise ShapeError(f"transformer block expects [B, N, C], got {tuple(x.shape)}")
        if bias is None:
            bias = self.rel_bias()
        elif isinstance(bias, RelPosBias):
            bias = bias()
        q = self.norm_q(x)
        y = q + self.attn(q, x, x, bias=bias)
        return y + self.mlp(self.norm_mlp(y))


class EncoderStage(nn.Module):
    def __init__(self, in_ch, out_ch, depth, heads, grid_size, cfg, downsample):
        super().__init__()
        self.grid_size = grid_size
        self.down = Downsample(in_ch, out_ch) if downsample else None
        self.res = ResidualBlock(out_ch if downsample else in_ch, out_ch, cfg.reduce_ratio)
        n_blocks = depth if cfg.vit_block else 0
        self.blocks = nn.ModuleList(
            TransformerBlock(out_ch, heads, grid_size, cfg.mlp_ratio, cfg.dropout_rate) for _ in range(n_blocks)
        )

    def forward(self, x):
        if self.down is not None:
            x = self.down(x)
        x = self.res(x)
        if len(self.blocks):
            grid = x.shape[-2:]
            t = map_to_tokens(x)
            for blk in self.blocks:
                t = blk(t)
            x = tokens_to_map(t, grid)
        return x


class DecoderStage(nn.Module):
    def __init__(self, in_ch, out_ch, heads, cfg):
        super().__init__()
        self.up = Upsample(in_ch, out_ch)
        if cfg.cross_attention:
            self.norm_q = nn.LayerNorm(out_ch)
            self.norm_kv = nn.LayerNorm(out_ch)
            self.cross = CrossAttention(out_ch, heads, dropout_rate=cfg.dropout_rate)
        else:
            self.cross = None
        self.fuse = ResidualBlock(2 * out_ch, out_ch, cfg.reduce_ratio)

    def forward(self, x, skip):
        x = self.up(x)
        if self.cross is not None:
            grid = x.shape[-2:]
            q = self.norm_q(map_to_tokens(x))
            kv = self.norm_kv(map_to_tokens(skip))
            x = x + tokens_to_map(self.cross(q, kv), grid)
        return self.fuse(torch.cat([x, skip], dim=1))


class CMAformer(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = ModelConfig() if cfg is None else cfg
        cfg.validate()
        self.cfg = cfg
        widths = cfg.stage_widths
        g = cfg.grid_size

        self.stem = ResidualBlock(cfg.in_channels, cfg.stem_width, cfg.reduce_ratio)
        self.patch_embed = PatchEmbed(cfg.stem_width, widths[0], cfg.patch_size, g)
        self.encoder = nn.ModuleList()
        for s, w in enumerate(widths):
            in_ch = widths[s - 1] if s else widths[0]
            self.encoder.append(EncoderStage(in_ch, w, cfg.depths[s], cfg.heads[s], g >> s, cfg, downsample=s > 0))

        if cfg.vit_block:
            self.spatial_attn = SpatialAttention(widths[-1], widths[-1], cfg.rates)
            self.spatial_norm = nn.BatchNorm2d(widths[-1])
        else:
            self.spatial_attn = None

        self.decoder = nn.ModuleList(
            DecoderStage(widths[s + 1], widths[s], cfg.heads[s], cfg) for s in range(cfg.num_stages - 1)
        )
        self.final_up = Upsample(widths[0], cfg.stem_width, scale=cfg.patch_size)
        self.final_fuse = ResidualBlock(2 * cfg.stem_width, cfg.stem_width, cfg.reduce_ratio)
        self.head = nn.Conv2d(cfg.stem_width, cfg.num_classes, 1)

    def check_input(self, x):
        if x.dim() != 4:
            raise ShapeError(f"expected [B, C, H, W], got {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        if tuple(x.shape[-2:]) != (self.cfg.img_size, self.cfg.img_size):
            raise ShapeError(f"expected {self.cfg.img_size}x{self.cfg.img_size} input, got {tuple(x.shape[-2:])}")

    def encode(self, x):
        """Return the stem feature map and the encoder feature pyramid."""
        self.check_input(x)
        stem = self.stem(x)
        tokens, pos = self.patch_embed(stem)
        f = tokens_to_map(tokens, pos.grid)
        pyramid = []
        for stage in self.encoder:
            f = stage(f)
            pyramid.append(f)
        return stem, pyramid

    def forward(self, x):
        stem, pyramid = self.encode(x)
        f = pyramid[-1]
        if self.spatial_attn is not None:
            f = f + F.relu(self.spatial_norm(self.spatial_attn(f)))
        for s in reversed(range(len(self.decoder))):
            f = self.decoder[s](f, pyramid[s])
        f = self.final_up(f)
        f = self.final_fuse(torch.cat([f, stem], dim=1))
        return self.head(f)
