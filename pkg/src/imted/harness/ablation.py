"""Head/FPN/MFM ablation: train and score each variant on shared data and seeds."""
from ..config import ablation_rows
from ..detector import Detector
from ..migration.accounting import count_params, estimate_flops
from ..migration.migrate import migrate
from .evaluate import evaluate
from .train import train


def build_detector(cfg, source=None, seed=0):
    """Migrated detector when a source archive is given, otherwise scratch-initialised."""
    if source is None:
        return Detector(cfg, seed=seed), None
    return migrate(source, cfg, seed=seed)


def run_ablation(rows, train_ds, val_ds, train_cfg, source=None, seed=0, input_hw=None, num_rois=None):
    """``rows`` is a list of (name, DetectorConfig); returns one result dict per row."""
    table = []
    for name, cfg in rows:
        det, _ = build_detector(cfg, source, seed)
        train(det, train_ds, train_cfg)
        metrics = evaluate(det, val_ds)
        hw = input_hw or tuple(val_ds.images.shape[2:])
        flops = estimate_flops(cfg, hw, num_rois or cfg.test_post_nms_topk)["total"]
        table.append({"row": name, "AP": metrics["AP"], "AP50": metrics["AP50"], "AP75": metrics["AP75"],
                      "params": count_params(cfg)["total"], "flops": flops})
    return table


def default_rows(base):
    return ablation_rows(base)


def format_table(table):
    head = f"{'row':<22}{'params':>10}{'GFLOPs':>10}{'AP':>8}{'AP50':>8}{'AP75':>8}"
    lines = [head, "-" * len(head)]
    for r in table:
        lines.append(f"{r['row']:<22}{r['params'] / 1e6:>9.3f}M{r['flops'] / 1e9:>10.3f}"
                     f"{r['AP']:>8.3f}{r['AP50']:>8.3f}{r['AP75']:>8.3f}")
    return "\n".join(lines)
