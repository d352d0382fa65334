"""Plain ViT encoder producing one stride-16 map plus quarter-depth taps."""
from dataclasses import dataclass

import numpy as np

from . import _accel
from .config import ViTConfig
from .numerics import ops
from .numerics.nn import Block, Conv2d, ConvTranspose2d, LayerNorm, Module
from .numerics.tensor import ContractError, Tensor, default_dtype

__all__ = ["ViTConfig", "EncoderOutput", "sincos_pos_embed", "resize_pos_embed", "PatchEmbed",
           "VisionTransformer", "MultiScaleAdapter", "tap_indices"]


def tap_indices(depth):
    q = depth // 4
    return [q, 2 * q, 3 * q, 4 * q]


def _sincos_1d(dim, pos):
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(dim, grid):
    """Fixed 2-D sine-cosine embedding, (gh*gw, dim) in row-major token order."""
    gh, gw = grid
    if dim % 4:
        raise ValueError("embedding dim must be a multiple of 4")
    yy, xx = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, yy), _sincos_1d(dim // 2, xx)], axis=1)


def resize_pos_embed(pos, old_grid, new_grid):
    """Per-channel bilinear resize of a (gh*gw, D) embedding onto a new grid.

    Corner tokens map onto corner tokens, so an unchanged grid is returned
    bit-for-bit and a 1x1 grid extends as a constant.
    """
    gh, gw = old_grid
    nh, nw = new_grid
    pos = np.asarray(pos)
    if (gh, gw) == (nh, nw):
        return pos.copy()
    fmap = pos.reshape(1, gh, gw, -1).transpose(0, 3, 1, 2)
    ys = np.arange(nh) * ((gh - 1) / (nh - 1) if nh > 1 else 0.0)
    xs = np.arange(nw) * ((gw - 1) / (nw - 1) if nw > 1 else 0.0)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = _accel.bilinear_gather(fmap, np.zeros(nh * nw, dtype=np.int64), yy.ravel(), xx.ravel())
    return out.astype(pos.dtype, copy=False)


@dataclass
class EncoderOutput:
    final_map: Tensor  # (B, C, H/16, W/16)
    taps: list  # four (B, C, gh, gw) token grids; taps[3] is final_map


class PatchEmbed(Module):
    def __init__(self, cfg, rng):
        self.patch_size = cfg.patch_size
        self.proj = Conv2d(3, cfg.embed_dim, cfg.patch_size, rng, stride=cfg.patch_size)

    def forward(self, images):
        p = self.patch_size
        B, _, H, W = images.shape
        if H % p or W % p:
            raise ContractError(f"image size {(H, W)} is not a multiple of patch size {p}; pad upstream")
        x = self.proj(images)
        D, gh, gw = x.shape[1:]
        return x.reshape(B, D, gh * gw).transpose(0, 2, 1), (gh, gw)


class VisionTransformer(Module):
    """Pre-norm ViT without class token; emits quarter-depth taps."""

    def __init__(self, cfg: ViTConfig, rng):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        dpr = np.linspace(0.0, cfg.drop_path_rate, cfg.depth)
        self.blocks = [Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng, float(r)) for r in dpr]
        self.norm = LayerNorm(cfg.embed_dim) if cfg.final_norm else None
        self.pos_embed = sincos_pos_embed(cfg.embed_dim, cfg.pretrain_grid)
        self._pos_cache = {}

    def pos_embed_for(self, grid):
        key = (tuple(grid), np.dtype(default_dtype()).str)
        if key not in self._pos_cache:
            pe = resize_pos_embed(self.pos_embed, self.cfg.pretrain_grid, grid)
            self._pos_cache[key] = pe.astype(default_dtype())
        return self._pos_cache[key]

    def embed(self, images):
        tokens, grid = self.patch_embed(images)
        return tokens + Tensor._wrap(self.pos_embed_for(grid).astype(tokens.dtype, copy=False)), grid

    def forward(self, images):
        x, (gh, gw) = self.embed(images)
        B, N, D = x.shape
        taps_at = set(self.cfg.tap_blocks)
        taps = []
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in taps_at:
                if i == self.cfg.depth and self.norm is not None:
                    x = self.norm(x)
                taps.append(x.transpose(0, 2, 1).reshape(B, D, gh, gw))
        return EncoderOutput(final_map=taps[-1], taps=taps)


class MultiScaleAdapter(Module):
    """Resample the four taps to strides 4/8/16/32 and project to a common width.

    Upsampling uses channel-wise 2x2 transposed convolutions so the adapter
    stays small next to the FPN.
    """

    def __init__(self, embed_dim, out_dim, rng):
        D = embed_dim
        self.up4 = [ConvTranspose2d(D, D, 2, rng, stride=2, groups=D),
                    ConvTranspose2d(D, D, 2, rng, stride=2, groups=D)]
        self.up8 = ConvTranspose2d(D, D, 2, rng, stride=2, groups=D)
        self.proj = [Conv2d(D, out_dim, 1, rng) for _ in range(4)]

    def forward(self, taps):
        t1, t2, t3, t4 = taps
        s4 = self.up4[1](ops.gelu(self.up4[0](t1)))
        s8 = self.up8(t2)
        s32 = ops.max_pool2x(t4)
        return [proj(m) for proj, m in zip(self.proj, (s4, s8, t3, s32))]


def make_multiscale(adapter, encoder_output):
    return adapter(encoder_output.taps)
