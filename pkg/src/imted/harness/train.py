"""Joint RPN + head training with AdamW, layer-wise lr decay and step schedule."""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..config import TrainConfig
from ..numerics.optim import AdamW, layer_decay_multipliers

log = logging.getLogger(__name__)

LOSS_KEYS = ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "total")
ENCODER_PREFIX = "backbone."


class NumericFailure(RuntimeError):
    """Non-finite value during training; ``component`` names where it appeared."""

    def __init__(self, component, epoch, iteration):
        super().__init__(f"non-finite {component} at epoch {epoch} iteration {iteration}")
        self.component = component


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)  # one dict per iteration
    epoch_means: list = field(default_factory=list)  # per-epoch mean of each loss key

    def write_csv(self, path):
        cols = ["epoch", "iter", "lr"] + list(LOSS_KEYS)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in cols})


def lr_scale(cfg: TrainConfig, epoch, it):
    """Linear warmup over the first iterations, then x0.1 at each decay epoch."""
    warm = 1.0 if it >= cfg.warmup_iters else 0.001 + 0.999 * it / max(cfg.warmup_iters, 1)
    drops = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return warm * 0.1 ** drops


def trainable_parameters(detector, freeze_backbone):
    return {n: p for n, p in detector.named_parameters()
            if not (freeze_backbone and n.startswith(ENCODER_PREFIX))}


def set_drop_path(detector, rate):
    blocks = detector.backbone.blocks
    for blk, r in zip(blocks, np.linspace(0.0, rate, len(blocks))):
        blk.drop_path = float(r)


def train(detector, ds, cfg: TrainConfig, progress=None):
    """Optimise ``detector`` on ``ds``; returns the per-iteration loss log."""
    if cfg.drop_path_rate is not None:
        set_drop_path(detector, cfg.drop_path_rate)
    params = trainable_parameters(detector, cfg.freeze_backbone)
    mult = layer_decay_multipliers(list(params), detector.cfg.vit.depth, cfg.layer_lr_decay)
    opt = AdamW(params.items(), lr=cfg.lr, weight_decay=cfg.weight_decay, lr_multiplier=mult)
    frozen = [p for n, p in detector.named_parameters() if n not in params]
    for p in frozen:
        p.requires_grad = False
    rng = np.random.default_rng(cfg.seed)
    detector.train()
    result = TrainResult()
    n = len(ds)
    it = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            steps = 0
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                losses = detector.forward_train(ds.images[idx], [ds.boxes[i] for i in idx],
                                                [ds.labels[i] for i in idx], rng)
                vals = {k: float(losses[k].data) for k in LOSS_KEYS}
                for k in LOSS_KEYS:
                    if not math.isfinite(vals[k]):
                        raise NumericFailure(k, epoch + 1, it)
                losses["total"].backward()
                scale = lr_scale(cfg, epoch, it)
                opt.step(scale)
                bad = next((name for name, p in params.items() if not np.isfinite(p.data).all()), None)
                if bad is not None:
                    raise NumericFailure(f"parameter {bad}", epoch + 1, it)
                row = {"epoch": epoch + 1, "iter": it, "lr": cfg.lr * scale, **vals}
                result.rows.append(row)
                for k in LOSS_KEYS:
                    sums[k] += vals[k]
                steps += 1
                it += 1
                if progress is not None and cfg.log_every and it % cfg.log_every == 0:
                    progress(row)
            result.epoch_means.append({k: v / max(steps, 1) for k, v in sums.items()})
            log.info("epoch %d mean total loss %.4f", epoch + 1, result.epoch_means[-1]["total"])
    finally:
        for p in frozen:
            p.requires_grad = True
    return result
