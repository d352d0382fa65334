"""Map a masked-autoencoder checkpoint onto a freshly built detector."""
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import CheckpointArchive

ENCODER_PREFIXES = ("patch_embed.", "blocks.", "norm.")
ALWAYS_ORPHANED = ("pos_embed", "decoder_pos_embed", "mask_token", "cls_token", "decoder_pred.")


class MigrationError(ValueError):
    pass


@dataclass
class MigrationReport:
    mapped: list = field(default_factory=list)  # (source, target, shape)
    scratch: list = field(default_factory=list)  # (target, shape, init)
    orphaned: list = field(default_factory=list)  # (source, shape)
    target_order: list = field(default_factory=list)

    @property
    def totals(self):
        pre = sum(int(np.prod(s)) for _, _, s in self.mapped)
        scr = sum(int(np.prod(s)) for _, s, _ in self.scratch)
        total = pre + scr
        return {"pretrained_params": pre, "scratch_params": scr, "total": total,
                "scratch_fraction": scr / total if total else 0.0}

    def check(self):
        """Raise if the mapped/scratch lists do not partition the target parameters."""
        seen = [t for _, t, _ in self.mapped] + [t for t, _, _ in self.scratch]
        if sorted(seen) != sorted(self.target_order) or len(set(seen)) != len(seen):
            raise MigrationError("report does not cover every target parameter exactly once")

    def to_dict(self):
        return {
            "mapped": [{"source": s, "target": t, "shape": list(sh)} for s, t, sh in self.mapped],
            "scratch": [{"target": t, "shape": list(sh), "init": i} for t, sh, i in self.scratch],
            "orphaned": [{"source": s, "shape": list(sh)} for s, sh in self.orphaned],
            "totals": self.totals,
        }

    def to_text(self):
        """One line per parameter in target order, then orphans, then totals."""
        by_target = {t: ("mapped", s, sh) for s, t, sh in self.mapped}
        by_target.update({t: ("scratch", i, sh) for t, sh, i in self.scratch})
        lines = []
        for t in self.target_order:
            kind, extra, sh = by_target[t]
            shape = "x".join(str(d) for d in sh) or "scalar"
            if kind == "mapped":
                lines.append(f"mapped   {t} <- {extra} [{shape}]")
            else:
                lines.append(f"scratch  {t} [{shape}] init={extra}")
        for s, sh in self.orphaned:
            lines.append(f"orphaned {s} [{'x'.join(str(d) for d in sh) or 'scalar'}]")
        tot = self.totals
        lines.append(f"totals pretrained={tot['pretrained_params']} scratch={tot['scratch_params']} "
                     f"total={tot['total']} scratch_fraction={tot['scratch_fraction']:.6f}")
        return "\n".join(lines) + "\n"


def source_to_target(name, cfg):
    """Detector parameter name for a source tensor, or None if it is not consumed."""
    if name in ALWAYS_ORPHANED or name.startswith(ALWAYS_ORPHANED):
        return None
    if name.startswith(ENCODER_PREFIXES):
        return "backbone." + name
    if cfg.head.head_kind != "decoder_pretrained":
        return None
    if name.startswith("decoder_blocks."):
        idx = int(name.split(".")[1])
        if idx >= cfg.head.decoder_depth:
            return None
        return "roi_head.blocks." + name[len("decoder_blocks."):]
    if name.startswith("decoder_norm."):
        return "roi_head.norm." + name[len("decoder_norm."):]
    if name.startswith("decoder_embed.") and not cfg.head.use_fpn_in_feature_path:
        return "roi_head." + name
    return None


def _required_sources(cfg, targets):
    """Source names that must exist for ``cfg``: every encoder tensor plus the decoder prefix."""
    need = {}
    for t in targets:
        if t.startswith("backbone."):
            need[t] = t[len("backbone."):]
        elif cfg.head.head_kind == "decoder_pretrained":
            if t.startswith("roi_head.blocks."):
                need[t] = "decoder_blocks." + t[len("roi_head.blocks."):]
            elif t.startswith("roi_head.norm."):
                need[t] = "decoder_norm." + t[len("roi_head.norm."):]
            elif t.startswith("roi_head.decoder_embed.") and not cfg.head.use_fpn_in_feature_path:
                need[t] = t[len("roi_head."):]
    return need


def migrate(src: CheckpointArchive, cfg, seed=0, detector=None):
    """Initialise a detector from ``src``; returns (detector, MigrationReport).

    Parameters without a source tensor keep their seeded scratch initialisation,
    so the result is a deterministic function of (src, cfg, seed).
    """
    from ..detector import Detector

    det = detector if detector is not None else Detector(cfg, seed=seed)
    params = dict(det.named_parameters())
    report = MigrationReport(target_order=list(params))
    need = _required_sources(cfg, params)
    missing = [s for s in need.values() if s not in src]
    if missing:
        raise MigrationError(f"source checkpoint lacks {len(missing)} required tensors, first: {missing[0]}")
    consumed = {}
    for name in src:
        tgt = source_to_target(name, cfg)
        if tgt is None:
            continue
        if tgt not in params:
            continue
        consumed[tgt] = name
    for tgt, p in params.items():
        name = consumed.get(tgt)
        if name is None:
            report.scratch.append((tgt, tuple(p.shape), getattr(p, "init", "given")))
            continue
        value = src[name]
        if tuple(value.shape) != tuple(p.shape):
            raise MigrationError(f"shape mismatch: source {name} {tuple(value.shape)} "
                                 f"vs target {tgt} {tuple(p.shape)}")
        p.data = value.astype(p.dtype, copy=True)
        report.mapped.append((name, tgt, tuple(p.shape)))
    used = set(consumed.values())
    report.orphaned = [(n, tuple(src.shape(n))) for n in src if n not in used]
    report.check()
    return det, report
