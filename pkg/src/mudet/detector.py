"""Toy end-to-end dual-stream detector.

Two small conv backbones (RGB and height), 1x1 projections to a shared
embedding width, cross-attention mixing, confidence-driven hard/easy
fusion, and 1x1 classification / box heads at a single detection stride.
Trained with plain SGD (momentum + weight decay) under a cosine learning
rate schedule; inference filters by score and runs rotated NMS.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from .enhance import UniEnhConfig, enhance_height, hierarchical_enhance_rgb
from .fusion import (CrossAttentionParams, MaskTriple, build_masks,
                     confidence_maps, cross_attention, fuse)
from .geometry import BoxEncoding, DecodeError, DetectionRecord, decode_obb, nms
from .losses import HeadPredictions, LossConfig, assign_targets, total_loss
from .metrics import evaluate_dataset
from .tensor import (ConvBlockParams, Tensor, conv_block_forward, reshape,
                     sigmoid, slice_axis0)

MODALITIES = ("multimodal", "rgb_only", "h_only")


class ConfigurationError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    rgb_blocks: tuple = (8, 16, 16, 32, 32, 64)
    rgb_strides: tuple = (1, 2, 1, 2, 1, 1)
    h_blocks: tuple = (4, 8, 16, 32)
    h_strides: tuple = (1, 2, 2, 1)
    fusion_channels: int = 64
    attn_channels: int = 32
    scales: tuple = (4,)
    n_classes: int = 1
    l_scale: float = 64.0
    lr_initial: float = 1.5e-4
    lr_final: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_epochs: int = 30
    batch_size: int = 4
    conf_threshold: float = 0.2
    nms_threshold: float = 0.45
    theta: float = 0.2
    focal_gamma: float = 2.0
    seed: int = 0
    eval_every: int = 0
    max_candidates: int = 300
    grad_clip: float = 0.0          # global grad-norm cap; 0 disables
    modality: str = "multimodal"
    uni_enh: UniEnhConfig = field(default_factory=UniEnhConfig)

    def __post_init__(self):
        if self.lr_final > self.lr_initial:
            raise ConfigurationError("lr_final must not exceed lr_initial")
        for name in ("conf_threshold", "nms_threshold", "theta"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ConfigurationError(f"{name} must lie in (0, 1), got {v}")
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"modality must be one of {MODALITIES}")
        if len(self.scales) != 1:
            raise ConfigurationError("single-scale detector: scales must have one entry")
        if int(np.prod(self.rgb_strides)) != self.scales[0] and self.modality != "h_only":
            raise ConfigurationError("product of rgb_strides must equal the detection stride")
        if int(np.prod(self.h_strides)) != self.scales[0] and self.modality != "rgb_only":
            raise ConfigurationError("product of h_strides must equal the detection stride")

    @property
    def stride(self) -> int:
        return self.scales[0]

    @property
    def rgb_in_channels(self) -> int:
        return 3 + len(self.uni_enh.gamma_coeffs)

    def loss_config(self) -> LossConfig:
        return LossConfig(focal_gamma=self.focal_gamma, theta=self.theta)


def _init_block(rng, cin, cout, k, stride=1, bn=True, slope=0.1, bias_init=0.0):
    fan_in = cin * k * k
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
    b = np.full(cout, bias_init, dtype=float)
    return ConvBlockParams(weight=Tensor(w, requires_grad=True),
                           bias=Tensor(b, requires_grad=True),
                           bn_gamma=Tensor(np.ones(cout), requires_grad=bn),
                           bn_beta=Tensor(np.zeros(cout), requires_grad=bn),
                           stride=stride, bn_enabled=bn, leaky_slope=slope)


def _make_stream(rng, cin, channels, strides):
    blocks = []
    for cout, s in zip(channels, strides):
        blocks.append(_init_block(rng, cin, cout, 3, stride=s))
        cin = cout
    return blocks


@dataclass
class ModelState:
    cfg: DetectorConfig
    rgb_blocks: list = None
    h_blocks: list = None
    proj_rgb: ConvBlockParams = None
    proj_h: ConvBlockParams = None
    attn: CrossAttentionParams = None
    head_conf_rgb: ConvBlockParams = None
    head_conf_h: ConvBlockParams = None
    head_cls: ConvBlockParams = None
    head_box: ConvBlockParams = None
    velocities: dict = field(default_factory=dict)

    def named_parameters(self):
        out = {}

        def add(prefix, block):
            if block is None:
                return
            out[f"{prefix}.weight"] = block.weight
            out[f"{prefix}.bias"] = block.bias
            if block.bn_enabled:
                out[f"{prefix}.bn_gamma"] = block.bn_gamma
                out[f"{prefix}.bn_beta"] = block.bn_beta

        for i, b in enumerate(self.rgb_blocks or []):
            add(f"rgb.{i}", b)
        for i, b in enumerate(self.h_blocks or []):
            add(f"h.{i}", b)
        add("proj_rgb", self.proj_rgb)
        add("proj_h", self.proj_h)
        if self.attn is not None:
            add("attn.g1", self.attn.g1)
            add("attn.g2", self.attn.g2)
            add("attn.g3", self.attn.g3)
        add("head_conf_rgb", self.head_conf_rgb)
        add("head_conf_h", self.head_conf_h)
        add("head_cls", self.head_cls)
        add("head_box", self.head_box)
        return out

    def named_buffers(self):
        out = {}

        def add(prefix, block):
            if block is not None and block.bn_enabled:
                out[f"{prefix}.bn_mean"] = block
                out[f"{prefix}.bn_var"] = block

        for i, b in enumerate(self.rgb_blocks or []):
            add(f"rgb.{i}", b)
        for i, b in enumerate(self.h_blocks or []):
            add(f"h.{i}", b)
        add("proj_rgb", self.proj_rgb)
        add("proj_h", self.proj_h)
        return out

    def save(self, path):
        arrays = {}
        for name, p in self.named_parameters().items():
            arrays[name] = p.data
        for name, block in self.named_buffers().items():
            arrays[name] = block.bn_mean if name.endswith("bn_mean") else block.bn_var
        for name, v in self.velocities.items():
            arrays[f"opt.{name}"] = v
        checkpoint.save_arrays(path, arrays)

    def load(self, path):
        arrays = checkpoint.load_arrays(path)
        for name, p in self.named_parameters().items():
            if name not in arrays:
                raise checkpoint.CheckpointError(f"missing parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise checkpoint.CheckpointError(
                    f"{name!r}: shape {arrays[name].shape} != model {p.shape}")
            p.data = arrays[name].copy()
        for name, block in self.named_buffers().items():
            if name not in arrays:
                raise checkpoint.CheckpointError(f"missing buffer {name!r}")
            if name.endswith("bn_mean"):
                block.bn_mean = arrays[name].copy()
            else:
                block.bn_var = arrays[name].copy()
        for name in self.named_parameters():
            key = f"opt.{name}"
            if key in arrays:
                self.velocities[name] = arrays[key].copy()


def build_model(cfg: DetectorConfig) -> ModelState:
    rng = np.random.default_rng(cfg.seed)
    f = cfg.fusion_channels
    model = ModelState(cfg=cfg)
    if cfg.modality != "h_only":
        model.rgb_blocks = _make_stream(rng, cfg.rgb_in_channels, cfg.rgb_blocks,
                                        cfg.rgb_strides)
        model.proj_rgb = _init_block(rng, cfg.rgb_blocks[-1], f, 1, bn=False)
    if cfg.modality != "rgb_only":
        model.h_blocks = _make_stream(rng, 1, cfg.h_blocks, cfg.h_strides)
        model.proj_h = _init_block(rng, cfg.h_blocks[-1], f, 1, bn=False)
    if cfg.modality == "multimodal":
        model.attn = CrossAttentionParams(
            g1=_init_block(rng, f, cfg.attn_channels, 1, bn=False, slope=1.0),
            g2=_init_block(rng, f, cfg.attn_channels, 1, bn=False, slope=1.0),
            g3=_init_block(rng, f, f, 1, bn=False, slope=1.0),
            d=cfg.attn_channels)
        model.head_conf_rgb = _init_block(rng, f, 1, 1, bn=False, slope=1.0)
        model.head_conf_h = _init_block(rng, f, 1, 1, bn=False, slope=1.0)
    model.head_cls = _init_block(rng, f, cfg.n_classes, 1, bn=False, slope=1.0,
                                 bias_init=-2.0)
    model.head_box = _init_block(rng, f, 9, 1, bn=False, slope=1.0)
    model.velocities = {name: np.zeros_like(p.data)
                        for name, p in model.named_parameters().items()}
    return model


@dataclass
class ForwardOutputs:
    preds: HeadPredictions
    masks: object = None
    fused: Tensor = None


def preprocess(scene, cfg: DetectorConfig):
    """Scene sample -> (rgb (3+k, H, W), height (1, H, W)) network inputs.

    The height plane is None for scenes loaded without their height files
    (rgb_only ablation runs never touch them).
    """
    rgb = hierarchical_enhance_rgb(scene.rgb_float(), cfg.uni_enh)
    if scene.hmap_raw is None:
        return rgb, None
    h = enhance_height(scene.height_units(), cfg.uni_enh)
    return rgb, h


def _run_stream(x: Tensor, blocks, proj, training):
    for b in blocks:
        x = conv_block_forward(x, b, training=training)
    return conv_block_forward(x, proj, training=training)


def _head_outputs(model: ModelState, z: Tensor, conf) -> HeadPredictions:
    cfg = model.cfg
    cls = sigmoid(conv_block_forward(z, model.head_cls))
    raw = conv_block_forward(z, model.head_box)
    m, n = z.shape[1:]
    box_l = sigmoid(slice_axis0(raw, 0, 4)) * cfg.l_scale
    box_s = sigmoid(slice_axis0(raw, 4, 8))
    box_r = reshape(sigmoid(slice_axis0(raw, 8, 9)), m, n)
    return HeadPredictions(cls=cls, box_l=box_l, box_s=box_s, box_r=box_r, conf=conf)


def forward(model: ModelState, rgb, hmap, training: bool = False) -> ForwardOutputs:
    """Full forward pass; inputs are preprocessed (enhanced) planes."""
    cfg = model.cfg
    stride = cfg.stride
    ref = rgb if cfg.modality != "h_only" else hmap
    if ref.shape[1] % stride or ref.shape[2] % stride:
        raise ConfigurationError(
            f"input extent {ref.shape[1:]} not divisible by stride {stride}")
    if not isinstance(rgb, Tensor):
        rgb = Tensor(rgb)
    if hmap is not None and not isinstance(hmap, Tensor):
        hmap = Tensor(hmap)
    if cfg.modality == "rgb_only":
        z = _run_stream(rgb, model.rgb_blocks, model.proj_rgb, training)
        return ForwardOutputs(preds=_head_outputs(model, z, None), fused=z)
    if cfg.modality == "h_only":
        z = _run_stream(hmap, model.h_blocks, model.proj_h, training)
        return ForwardOutputs(preds=_head_outputs(model, z, None), fused=z)
    z_rgb = _run_stream(rgb, model.rgb_blocks, model.proj_rgb, training)
    z_h = _run_stream(hmap, model.h_blocks, model.proj_h, training)
    z_mix = cross_attention(z_rgb, z_h, model.attn)
    conf = confidence_maps(z_rgb, z_h, model.head_conf_rgb, model.head_conf_h,
                           theta=cfg.theta)
    masks = build_masks(conf)
    z = fuse(z_mix, z_rgb, z_h, masks, conf)
    return ForwardOutputs(preds=_head_outputs(model, z, conf), masks=masks, fused=z)


# -- training --------------------------------------------------------------------


def cosine_lr(cfg: DetectorConfig, epoch: int) -> float:
    span = max(1, cfg.max_epochs - 1)
    t = min(epoch, span) / span
    return cfg.lr_final + 0.5 * (cfg.lr_initial - cfg.lr_final) * (1.0 + math.cos(math.pi * t))


def sgd_step(model: ModelState, lr: float):
    cfg = model.cfg
    params = model.named_parameters()
    scale = 1.0
    if cfg.grad_clip > 0:
        sq = sum(float((p.grad * p.grad).sum()) for p in params.values()
                 if p.grad is not None)
        norm = math.sqrt(sq)
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
    for name, p in params.items():
        g = p.grad * scale if p.grad is not None else np.zeros_like(p.data)
        v = model.velocities[name]
        v *= cfg.momentum
        v -= lr * (g + cfg.weight_decay * p.data)
        p.data = p.data + v
        p.zero_grad()


def sample_losses(model: ModelState, rgb, hmap, targets, masks_override=None):
    """Forward + loss for one sample in training mode."""
    out = forward(model, rgb, hmap, training=True)
    cfg = model.cfg
    if model.cfg.modality == "multimodal":
        masks = out.masks if masks_override is None else masks_override
    else:
        # unimodal baseline: no split, every location is scored as easy
        shape = out.preds.cls.shape[1:]
        masks = MaskTriple(easy=np.ones(shape), rgb_only=np.zeros(shape),
                           h_only=np.zeros(shape))
    return total_loss(out.preds, targets, masks, cfg.loss_config())


def train(model: ModelState, scenes, cfg: DetectorConfig = None, val_scenes=None,
          log_path=None):
    """SGD training loop over preprocessed scenes; returns the epoch log."""
    cfg = cfg or model.cfg
    rng = np.random.default_rng(cfg.seed + 0x5EED)
    prepared = []
    grid = None
    for s in scenes:
        rgb, h = preprocess(s, cfg)
        gm, gn = rgb.shape[1] // cfg.stride, rgb.shape[2] // cfg.stride
        grid = (gm, gn)
        targets = assign_targets(s.annotations, grid, cfg.stride, cfg.n_classes)
        prepared.append((rgb, h, targets))
    history = []
    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(cfg, epoch)
        order = rng.permutation(len(prepared))
        sums = {"easy": 0.0, "hard": 0.0, "conf": 0.0, "total": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            scale = 1.0 / len(idx)
            for j in idx:
                rgb, h, targets = prepared[j]
                loss, parts = sample_losses(model, rgb, h, targets)
                if not math.isfinite(parts["total"]):
                    raise TrainingDiverged(
                        f"non-finite loss {parts['total']} at epoch {epoch}, "
                        f"sample {int(j)}")
                (loss * scale).backward()
                for k in sums:
                    sums[k] += parts.get(k, 0.0)
            sgd_step(model, lr)
        n = len(prepared)
        row = {"epoch": epoch, "lr": lr,
               "loss_easy": sums["easy"] / n, "loss_hard": sums["hard"] / n,
               "loss_total": sums["total"] / n, "val_ap": float("nan")}
        last = epoch == cfg.max_epochs - 1
        if val_scenes is not None and (last or (cfg.eval_every and
                                                (epoch + 1) % cfg.eval_every == 0)):
            row["val_ap"] = evaluate_model(model, val_scenes, cfg)
        history.append(row)
    if log_path:
        write_training_log(log_path, history)
    return history


def write_training_log(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss_easy,loss_hard,loss_total,val_ap\n")
        for row in history:
            val = "" if math.isnan(row["val_ap"]) else f"{row['val_ap']:.6f}"
            fh.write(f"{row['epoch']},{row['loss_easy']:.6f},{row['loss_hard']:.6f},"
                     f"{row['loss_total']:.6f},{val}\n")


# -- inference --------------------------------------------------------------------


def infer(model: ModelState, scene, cfg: DetectorConfig = None):
    """Detections for one scene: score filter, decode, rotated NMS."""
    cfg = cfg or model.cfg
    rgb, h = preprocess(scene, cfg)
    out = forward(model, rgb, h)
    preds = out.preds
    stride = cfg.stride
    cls = preds.cls.data
    records = []
    for c in range(cls.shape[0]):
        ii, jj = np.nonzero(cls[c] > cfg.conf_threshold)
        if ii.size == 0:
            continue
        scores = cls[c, ii, jj]
        if ii.size > cfg.max_candidates:
            keep = np.argsort(-scores)[:cfg.max_candidates]
            ii, jj, scores = ii[keep], jj[keep], scores[keep]
        for gi, gj, score in zip(ii, jj, scores):
            point = ((gj + 0.5) * stride, (gi + 0.5) * stride)
            enc = BoxEncoding(
                l=tuple(preds.box_l.data[:, gi, gj]),
                s=tuple(np.clip(preds.box_s.data[:, gi, gj], 0.0, 1.0)),
                r=float(np.clip(preds.box_r.data[gi, gj], 1e-9, 1.0)))
            try:
                obb = decode_obb(enc, point, class_id=c, strict=False)
            except DecodeError:
                continue
            records.append(DetectionRecord(obb, float(min(score, 1.0 - 1e-9))))
    return nms(records, cfg.nms_threshold)


def evaluate_model(model: ModelState, scenes, cfg: DetectorConfig = None) -> float:
    cfg = cfg or model.cfg
    dets = {s.id: infer(model, s, cfg) for s in scenes}
    gts = {s.id: s.annotations for s in scenes}
    if not any(gts.values()):
        return 0.0
    ap, _ = evaluate_dataset(dets, gts)
    return ap


# -- ablation ---------------------------------------------------------------------


def micro_config(seed: int = 0, **overrides) -> DetectorConfig:
    """A 16x16-input micro model for fast end-to-end gradient checking."""
    base = dict(rgb_blocks=(2, 3), rgb_strides=(2, 2), h_blocks=(2, 2),
                h_strides=(2, 2), fusion_channels=3, attn_channels=2,
                l_scale=16.0, batch_size=1, seed=seed)
    base.update(overrides)
    return DetectorConfig(**base)


def _bn_blocks(model: ModelState):
    for group in (model.rgb_blocks or []), (model.h_blocks or []):
        for b in group:
            if b.bn_enabled:
                yield b
    for b in (model.proj_rgb, model.proj_h):
        if b is not None and b.bn_enabled:
            yield b


def gradcheck_model(model: ModelState, scene, n_coords: int = 50,
                    step: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients
    over randomly sampled parameter coordinates of the whole model."""
    cfg = model.cfg
    rgb, h = preprocess(scene, cfg)
    grid = (rgb.shape[1] // cfg.stride, rgb.shape[2] // cfg.stride)
    targets = assign_targets(scene.annotations, grid, cfg.stride, cfg.n_classes)
    params = list(model.named_parameters().items())
    snap = [(b, b.bn_mean.copy(), b.bn_var.copy()) for b in _bn_blocks(model)]

    def loss_value():
        # training-mode forwards move the BN running buffers; pin them
        for b, m, v in snap:
            b.bn_mean, b.bn_var = m.copy(), v.copy()
        loss, _ = sample_losses(model, rgb, h, targets)
        return loss

    for _, p in params:
        p.zero_grad()
    loss_value().backward()
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in params}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_coords):
        name, p = params[int(rng.integers(len(params)))]
        flat = p.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_value().item()
        flat[i] = orig - step
        lo = loss_value().item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        analytic = grads[name].reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    for b, m, v in snap:
        b.bn_mean, b.bn_var = m, v
    return worst


def run_ablation(train_scenes, test_scenes, cfg: DetectorConfig):
    """Train the three input-stream variants identically; report AP each."""
    rows = []
    for modality in ("rgb_only", "h_only", "multimodal"):
        vcfg = replace(cfg, modality=modality)
        model = build_model(vcfg)
        train(model, train_scenes, vcfg)
        ap = evaluate_model(model, test_scenes, vcfg)
        rows.append({"variant": modality, "ap": ap})
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant,ap\n")
        for r in rows:
            fh.write(f"{r['variant']},{r['ap']:.6f}\n")
