"""Toy masked-autoencoder pretraining that produces a source checkpoint.

Tensor names follow the common MAE layout (``blocks.*``, ``decoder_blocks.*``,
``decoder_embed``, ``decoder_norm``, ``decoder_pred``, ``mask_token``) so the
result feeds straight into ``migrate``.
"""
from dataclasses import dataclass

import numpy as np

from ..backbone import PatchEmbed, sincos_pos_embed
from ..config import ViTConfig
from ..numerics import ops
from ..numerics.nn import Block, LayerNorm, Linear, Module, trunc_normal
from ..numerics.optim import AdamW
from ..numerics.tensor import Tensor
from ..migration.checkpoint import CheckpointArchive


@dataclass
class MaeConfig:
    decoder_dim: int = 32
    decoder_depth: int = 4
    decoder_heads: int = 4
    mask_ratio: float = 0.75
    epochs: int = 4
    batch_size: int = 32
    lr: float = 1.5e-3
    weight_decay: float = 0.05
    seed: int = 0


class MaskedAutoencoder(Module):
    def __init__(self, vit: ViTConfig, mcfg: MaeConfig, rng):
        D, Dd = vit.embed_dim, mcfg.decoder_dim
        self.vit = vit
        self.patch_embed = PatchEmbed(vit, rng)
        self.blocks = [Block(D, vit.num_heads, vit.mlp_ratio, rng) for _ in range(vit.depth)]
        self.norm = LayerNorm(D)
        self.decoder_embed = Linear(D, Dd, rng)
        self.mask_token = trunc_normal(rng, (1, 1, Dd))
        self.decoder_blocks = [Block(Dd, mcfg.decoder_heads, 4.0, rng) for _ in range(mcfg.decoder_depth)]
        self.decoder_norm = LayerNorm(Dd)
        self.decoder_pred = Linear(Dd, vit.patch_size ** 2 * 3, rng)
        self.pos_embed = sincos_pos_embed(D, vit.pretrain_grid)
        self.decoder_pos_embed = sincos_pos_embed(Dd, vit.pretrain_grid)
        self.mask_ratio = mcfg.mask_ratio

    def patchify(self, images):
        p = self.vit.patch_size
        B, C, H, W = images.shape
        x = images.reshape(B, C, H // p, p, W // p, p).transpose(0, 2, 4, 3, 5, 1)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def loss(self, images, rng):
        """Mean squared error on masked patches against per-patch normalised pixels."""
        images = np.asarray(images)
        tokens, _ = self.patch_embed(Tensor(images))
        B, N, D = tokens.shape
        x = tokens + Tensor._wrap(self.pos_embed.astype(tokens.dtype))
        n_keep = max(1, int(round(N * (1 - self.mask_ratio))))
        shuffle = np.argsort(rng.random((B, N)), axis=1)
        restore = np.argsort(shuffle, axis=1)
        rows = np.arange(B)[:, None]
        x = x[rows, shuffle[:, :n_keep]]
        for blk in self.blocks:
            x = blk(x)
        x = self.decoder_embed(self.norm(x))
        Dd = x.shape[-1]
        fill = self.mask_token * Tensor._wrap(np.ones((B, N - n_keep, 1), dtype=x.dtype))
        x = ops.concat([x, fill], axis=1)[rows, restore]
        x = x + Tensor._wrap(self.decoder_pos_embed.astype(x.dtype).reshape(1, N, Dd))
        for blk in self.decoder_blocks:
            x = blk(x)
        pred = self.decoder_pred(self.decoder_norm(x))
        target = self.patchify(images)
        target = (target - target.mean(-1, keepdims=True)) / np.sqrt(target.var(-1, keepdims=True) + 1e-6)
        mask = np.ones((B, N), dtype=pred.dtype)
        mask[rows, shuffle[:, :n_keep]] = 0.0
        err = pred - Tensor._wrap(target.astype(pred.dtype))
        per_patch = (err * err).mean(axis=-1)
        return (per_patch * Tensor._wrap(mask)).sum() * (1.0 / mask.sum())

    def archive(self):
        arch = CheckpointArchive()
        for name, p in self.named_parameters():
            arch.add(name, p.data)
        arch.add("pos_embed", self.pos_embed[None])
        arch.add("decoder_pos_embed", self.decoder_pos_embed[None])
        return arch


def pretrain_mae(images, vit: ViTConfig, mcfg: MaeConfig = None, progress=None):
    """Train a toy MAE on ``images`` (N, 3, H, W); returns (archive, per-epoch losses)."""
    mcfg = mcfg or MaeConfig()
    rng = np.random.default_rng(mcfg.seed)
    model = MaskedAutoencoder(vit, mcfg, rng)
    opt = AdamW(model.named_parameters(), lr=mcfg.lr, weight_decay=mcfg.weight_decay, betas=(0.9, 0.95))
    history = []
    n = images.shape[0]
    for epoch in range(mcfg.epochs):
        order = rng.permutation(n)
        total, steps = 0.0, 0
        for s in range(0, n, mcfg.batch_size):
            loss = model.loss(images[order[s:s + mcfg.batch_size]], rng)
            loss.backward()
            opt.step()
            total += float(loss.data)
            steps += 1
        history.append(total / max(steps, 1))
        if progress is not None:
            progress({"epoch": epoch + 1, "loss": history[-1]})
    return model.archive(), history
