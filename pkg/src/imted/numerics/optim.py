"""AdamW with decoupled weight decay and per-parameter learning-rate multipliers."""
import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError


@dataclass
class OptimizerState:
    base_lr: float
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    lr_multiplier: dict = field(default_factory=dict)
    decay_mask: dict = field(default_factory=dict)
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def optimizer_step(state, params, lr_scale=1.0):
    """One AdamW update over ``params`` (name -> Parameter); grads are zeroed afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = state.base_lr * lr_scale * state.lr_multiplier.get(name, 1.0)
        if state.decay_mask.get(name, True) and state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= (lr / bc1) * m / denom
        p.grad = None


_BLOCK = re.compile(r"(?:^|\.)blocks\.(\d+)\.")


def layer_decay_multipliers(names, depth, decay, prefix="backbone."):
    """Layer-wise lr decay: encoder block i (1-based) of ``depth`` gets ``decay**(depth - i)``.

    The patch embedding counts as block 0; everything outside the encoder gets 1.
    """
    out = {}
    for name in names:
        if not name.startswith(prefix):
            out[name] = 1.0
            continue
        m = _BLOCK.search(name[len(prefix) - 1:])
        if m:
            layer = int(m.group(1)) + 1
        elif ".patch_embed." in "." + name[len(prefix):]:
            layer = 0
        else:
            layer = depth
        out[name] = float(decay ** (depth - layer))
    return out


class AdamW:
    def __init__(self, named_params, lr, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8,
                 lr_multiplier=None, no_decay_1d=True):
        self.params = dict(named_params)
        decay_mask = {n: not (no_decay_1d and p.ndim <= 1) for n, p in self.params.items()}
        self.state = OptimizerState(base_lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps,
                                    lr_multiplier=dict(lr_multiplier or {}), decay_mask=decay_mask)
        for name, mult in self.state.lr_multiplier.items():
            if not 0.0 < mult <= 1.0:
                raise ValueError(f"lr multiplier for {name} must lie in (0, 1], got {mult}")

    def step(self, lr_scale=1.0):
        optimizer_step(self.state, self.params, lr_scale)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
