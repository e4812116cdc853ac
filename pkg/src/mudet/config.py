"""Run configuration: one flat structured-text file of dotted keys.

Format: ``key value`` per line, ``#`` comments, lists comma-separated.
Unknown keys are rejected; CLI flags override file values; every command
logs the fully-resolved configuration next to its outputs.
"""

from .data import SynthConfig, TileSpec
from .detector import DetectorConfig
from .enhance import SliceConfig, UniEnhConfig


class ConfigError(ValueError):
    pass


def _floats(s):
    return tuple(float(v) for v in str(s).split(","))


def _ints(s):
    return tuple(int(v) for v in str(s).split(","))


# key -> (parser, default)
SCHEMA = {
    "uni_enh.A": (float, 1.0),
    "uni_enh.gamma_coeffs": (_floats, (0.5, 1.5)),
    "uni_enh.slice.h1": (float, 0.0),
    "uni_enh.slice.h2": (float, 0.0),
    "uni_enh.slice.i0": (float, 0.5),
    "uni_enh.slice.i1": (float, 6.0),
    "uni_enh.slice.cmin": (float, 0.0),
    "uni_enh.slice.cmax": (float, 70.0),
    "fusion.theta": (float, 0.2),
    "fusion.attn_channels": (int, 32),
    "loss.focal_gamma": (float, 2.0),
    "loss.theta": (float, 0.2),
    "detector.rgb_blocks": (_ints, (8, 16, 16, 32, 32, 64)),
    "detector.rgb_strides": (_ints, (1, 2, 1, 2, 1, 1)),
    "detector.h_blocks": (_ints, (4, 8, 16, 32)),
    "detector.h_strides": (_ints, (1, 2, 2, 1)),
    "detector.fusion_channels": (int, 64),
    "detector.scales": (_ints, (4,)),
    "detector.n_classes": (int, 1),
    "detector.l_scale": (float, 64.0),
    "detector.lr_initial": (float, 1.5e-4),
    "detector.lr_final": (float, 1e-6),
    "detector.momentum": (float, 0.9),
    "detector.weight_decay": (float, 5e-4),
    "detector.max_epochs": (int, 30),
    "detector.batch_size": (int, 4),
    "detector.conf_threshold": (float, 0.2),
    "detector.nms_threshold": (float, 0.45),
    "detector.seed": (int, 0),
    "detector.eval_every": (int, 0),
    "detector.max_candidates": (int, 300),
    "detector.grad_clip": (float, 0.0),
    "detector.modality": (str, "multimodal"),
    "tile.tile_size": (int, 1024),
    "tile.overlap": (int, 200),
    "tile.min_visible_fraction": (float, 0.4),
    "synth.scenes": (int, 200),
    "synth.canvas": (int, 128),
    "synth.vehicles_min": (int, 5),
    "synth.vehicles_max": (int, 12),
    "synth.cluster_tightness": (float, 0.6),
    "synth.occluder_prob": (float, 0.35),
    "synth.vehicle_height_min": (float, 1.4),
    "synth.vehicle_height_max": (float, 3.2),
    "synth.occluder_height_min": (float, 4.2),
    "synth.occluder_height_max": (float, 6.0),
    "synth.low_profile_prob": (float, 0.15),
    "synth.distractors_min": (int, 4),
    "synth.distractors_max": (int, 9),
    "synth.seed": (int, 0),
    "synth.split": (float, 0.8),
}


class RunConfig:
    def __init__(self, values=None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            self.values[key] = parser(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    @classmethod
    def from_file(cls, path):
        cfg = cls()
        with open(path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split(None, 1)
                if len(parts) != 2:
                    raise ConfigError(f"{path}:{ln}: expected 'key value', got {line!r}")
                try:
                    cfg.set(parts[0], parts[1])
                except ConfigError as exc:
                    raise ConfigError(f"{path}:{ln}: {exc}") from None
        return cfg

    def apply_overrides(self, pairs):
        for item in pairs or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, val = item.split("=", 1)
            self.set(key.strip(), val.strip())

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# fully-resolved run configuration\n")
            for k in sorted(self.values):
                v = self.values[k]
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                fh.write(f"{k} {v}\n")

    # -- typed views -------------------------------------------------------

    def uni_enh(self) -> UniEnhConfig:
        return UniEnhConfig(
            A=self["uni_enh.A"], gamma_coeffs=tuple(self["uni_enh.gamma_coeffs"]),
            slice=SliceConfig(h1=self["uni_enh.slice.h1"], h2=self["uni_enh.slice.h2"],
                              i0=self["uni_enh.slice.i0"], i1=self["uni_enh.slice.i1"],
                              c_min=self["uni_enh.slice.cmin"],
                              c_max=self["uni_enh.slice.cmax"]))

    def detector(self, **overrides) -> DetectorConfig:
        kw = dict(
            rgb_blocks=tuple(self["detector.rgb_blocks"]),
            rgb_strides=tuple(self["detector.rgb_strides"]),
            h_blocks=tuple(self["detector.h_blocks"]),
            h_strides=tuple(self["detector.h_strides"]),
            fusion_channels=self["detector.fusion_channels"],
            attn_channels=self["fusion.attn_channels"],
            scales=tuple(self["detector.scales"]),
            n_classes=self["detector.n_classes"],
            l_scale=self["detector.l_scale"],
            lr_initial=self["detector.lr_initial"],
            lr_final=self["detector.lr_final"],
            momentum=self["detector.momentum"],
            weight_decay=self["detector.weight_decay"],
            max_epochs=self["detector.max_epochs"],
            batch_size=self["detector.batch_size"],
            conf_threshold=self["detector.conf_threshold"],
            nms_threshold=self["detector.nms_threshold"],
            theta=self["fusion.theta"],
            focal_gamma=self["loss.focal_gamma"],
            seed=self["detector.seed"],
            eval_every=self["detector.eval_every"],
            max_candidates=self["detector.max_candidates"],
            grad_clip=self["detector.grad_clip"],
            modality=self["detector.modality"],
            uni_enh=self.uni_enh(),
        )
        kw.update(overrides)
        return DetectorConfig(**kw)

    def tile_spec(self) -> TileSpec:
        return TileSpec(tile_size=self["tile.tile_size"], overlap=self["tile.overlap"],
                        min_visible_fraction=self["tile.min_visible_fraction"])

    def synth(self, **overrides) -> SynthConfig:
        kw = dict(
            n_scenes=self["synth.scenes"], canvas=self["synth.canvas"],
            vehicles_min=self["synth.vehicles_min"], vehicles_max=self["synth.vehicles_max"],
            cluster_tightness=self["synth.cluster_tightness"],
            occluder_prob=self["synth.occluder_prob"],
            vehicle_height_min=self["synth.vehicle_height_min"],
            vehicle_height_max=self["synth.vehicle_height_max"],
            occluder_height_min=self["synth.occluder_height_min"],
            occluder_height_max=self["synth.occluder_height_max"],
            low_profile_prob=self["synth.low_profile_prob"],
            distractors_min=self["synth.distractors_min"],
            distractors_max=self["synth.distractors_max"],
            seed=self["synth.seed"],
        )
        kw.update(overrides)
        return SynthConfig(**kw)
