"""Architecture and training configuration, plus named presets.

Every dataclass round-trips through plain dicts so configs can live in YAML or
JSON files; ``apply_overrides`` handles ``a.b.c=value`` command-line flags.
"""
import dataclasses
import json
from dataclasses import dataclass, field

import yaml

HEAD_KINDS = ("conv", "decoder_random", "decoder_pretrained")


class ConfigError(ValueError):
    pass


@dataclass
class ViTConfig:
    img_size: int = 224  # pre-training resolution; fixes the stored position-embedding grid
    patch_size: int = 16
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.1
    final_norm: bool = True

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depth % 4:
            raise ConfigError(f"depth {self.depth} must be divisible by 4 for quarter taps")
        if self.img_size % self.patch_size:
            raise ConfigError("img_size must be a multiple of patch_size")

    @property
    def tap_blocks(self):
        """1-based block indices after which intermediate maps are taken."""
        q = self.depth // 4
        return [q, 2 * q, 3 * q, 4 * q]

    @property
    def pretrain_grid(self):
        g = self.img_size // self.patch_size
        return (g, g)


@dataclass
class HeadConfig:
    head_kind: str = "decoder_pretrained"
    decoder_depth: int = 4
    decoder_dim: int = 256
    decoder_heads: int = 8
    decoder_mlp_ratio: float = 4.0
    use_fpn_in_feature_path: bool = False
    use_mfm: bool = True
    roi_size: int = 7
    conv_dim: int = 256
    num_convs: int = 4
    fc_dim: int = 1024
    num_fcs: int = 2
    class_agnostic: bool = True

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.use_mfm and self.use_fpn_in_feature_path:
            raise ConfigError("use_mfm requires use_fpn_in_feature_path = false")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_dim must be divisible by decoder_heads")
        if self.decoder_depth < 1:
            raise ConfigError("decoder_depth must be >= 1")

    @property
    def is_decoder(self):
        return self.head_kind != "conv"


@dataclass
class DetectorConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    num_classes: int = 80
    fpn_dim: int = 256
    anchor_scale: float = 8.0
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_pos_thresh: float = 0.7
    rpn_neg_thresh: float = 0.3
    rpn_sample_size: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_nms_thresh: float = 0.7
    train_pre_nms_topk: int = 1000
    train_post_nms_topk: int = 1000
    test_pre_nms_topk: int = 1000
    test_post_nms_topk: int = 1000
    roi_sample_size: int = 512
    roi_pos_fraction: float = 0.25
    roi_fg_thresh: float = 0.5
    bbox_stds: tuple = (0.1, 0.1, 0.2, 0.2)
    smooth_l1_beta: float = 1.0
    canonical_box_size: float = 224.0
    score_thresh: float = 0.05
    test_nms_thresh: float = 0.5
    max_detections: int = 100

    @property
    def num_anchors(self):
        return len(self.anchor_ratios)

    @property
    def roi_in_dim(self):
        return self.fpn_dim if self.head.use_fpn_in_feature_path else self.vit.embed_dim


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 3e-3
    weight_decay: float = 0.05
    decay_epochs: tuple = (8,)
    warmup_iters: int = 50
    layer_lr_decay: float = 0.75
    drop_path_rate: float | None = None
    freeze_backbone: bool = False
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        d = list(self.decay_epochs)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        if d and d[-1] >= self.epochs:
            raise ConfigError("decay_epochs must be smaller than epochs")


# -- dict round-trip -------------------------------------------------------------

def to_dict(cfg):
    return dataclasses.asdict(cfg)


def _build(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown field {cls.__name__}.{key}")
        sub = {"vit": ViTConfig, "head": HeadConfig}.get(key) if cls is DetectorConfig else None
        if sub is not None:
            value = _build(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def detector_from_dict(data):
    return _build(DetectorConfig, data)


def train_from_dict(data):
    return _build(TrainConfig, data)


def load_config_file(path):
    """Read a YAML or JSON config file into a dict."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must contain a mapping")
    return data


def apply_overrides(data, overrides):
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


# -- presets ---------------------------------------------------------------------

VIT_SIZES = {
    "S": dict(embed_dim=384, depth=12, num_heads=6, drop_path_rate=0.1),
    "B": dict(embed_dim=768, depth=12, num_heads=12, drop_path_rate=0.2),
    "L": dict(embed_dim=1024, depth=24, num_heads=16, drop_path_rate=0.3),
}


def full_config(size="S", head_kind="decoder_pretrained", use_fpn_in_feature_path=False,
                use_mfm=True, decoder_depth=4):
    """Full-scale configuration (COCO, 80 classes) for accounting and FLOPs estimates."""
    return DetectorConfig(
        vit=ViTConfig(**VIT_SIZES[size]),
        head=HeadConfig(head_kind=head_kind, decoder_depth=decoder_depth,
                        use_fpn_in_feature_path=use_fpn_in_feature_path, use_mfm=use_mfm),
    )


def full_baseline(size="S"):
    """Faster R-CNN with conv head and FPN in the feature path."""
    return full_config(size, "conv", use_fpn_in_feature_path=True, use_mfm=False)


def full_imted(size="S"):
    return full_config(size, "decoder_pretrained", use_fpn_in_feature_path=False, use_mfm=True)


def desk_config(head_kind="decoder_pretrained", use_fpn_in_feature_path=False, use_mfm=True,
                decoder_depth=2):
    """CPU-scale configuration used by the synthetic benchmark."""
    return DetectorConfig(
        vit=ViTConfig(img_size=64, patch_size=16, embed_dim=64, depth=4, num_heads=4,
                      drop_path_rate=0.0),
        head=HeadConfig(head_kind=head_kind, decoder_depth=decoder_depth, decoder_dim=32,
                        decoder_heads=4, use_fpn_in_feature_path=use_fpn_in_feature_path,
                        use_mfm=use_mfm, conv_dim=32, num_convs=4, fc_dim=128, num_fcs=2),
        num_classes=3,
        fpn_dim=32,
        anchor_scale=4.0,
        rpn_sample_size=128,
        train_pre_nms_topk=200,
        train_post_nms_topk=100,
        test_pre_nms_topk=200,
        test_post_nms_topk=100,
        roi_sample_size=32,
        canonical_box_size=64.0,
    )


ABLATION_ROWS = (
    ("Conv Layers", "conv", True, False),
    ("Decoder", "decoder_random", True, False),
    ("Decoder*", "decoder_pretrained", True, False),
    ("Decoder* -FPN", "decoder_pretrained", False, False),
    ("Decoder* -FPN +MFM", "decoder_pretrained", False, True),
)


def ablation_rows(base):
    """The five head/FPN/MFM ablation rows derived from ``base``."""
    rows = []
    for name, kind, fpn, mfm in ABLATION_ROWS:
        head = dataclasses.replace(base.head, head_kind=kind, use_fpn_in_feature_path=fpn, use_mfm=mfm)
        rows.append((name, dataclasses.replace(base, head=head)))
    return rows
