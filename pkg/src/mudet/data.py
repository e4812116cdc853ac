"""Dataset plumbing: scene file formats, tiling, synthetic scene
generation, and dataset statistics.

On-disk layout per dataset root:
    images/<id>.ppm     binary P6, 8-bit RGB
    heights/<id>.pgm    binary P5, 16-bit big-endian
    heights/<id>.meta   text: "scale <f>" / "offset <f>" lines
    labels/<id>.txt     "class_id xc yc w h theta_deg" per object, # comments
    manifest.txt        key/value records: tile id, source scene, origin

Scenes hold raw quantized arrays (uint8 RGB, uint16 heights) so the
write -> read -> write cycle is byte-identical.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import DetectionRecord, ObbAnnotation

HEIGHT_SCALE_DEFAULT = 0.001


class DataFormatError(ValueError):
    pass


@dataclass
class SceneSample:
    id: str
    rgb: np.ndarray                 # (3, H, W) uint8
    hmap_raw: np.ndarray            # (H, W) uint16
    annotations: list
    height_scale: float = HEIGHT_SCALE_DEFAULT
    height_offset: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.hmap_raw is not None and self.rgb.shape[1:] != self.hmap_raw.shape:
            raise DataFormatError(
                f"scene {self.id}: rgb {self.rgb.shape[1:]} and height map "
                f"{self.hmap_raw.shape} are not pixel-aligned")

    @property
    def height(self):
        return self.rgb.shape[1]

    @property
    def width(self):
        return self.rgb.shape[2]

    def rgb_float(self) -> np.ndarray:
        return self.rgb.astype(np.float64) / 255.0

    def height_units(self) -> np.ndarray:
        return self.hmap_raw.astype(np.float64) * self.height_scale + self.height_offset


@dataclass(frozen=True)
class TileSpec:
    tile_size: int = 1024
    overlap: int = 200
    min_visible_fraction: float = 0.4

    def __post_init__(self):
        if not (0 < self.overlap < self.tile_size):
            raise ValueError(
                f"need 0 < overlap < tile_size, got {self.overlap} / {self.tile_size}")
        if not (0.0 <= self.min_visible_fraction <= 1.0):
            raise ValueError("min_visible_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    scene_id: str
    origin_x: int
    origin_y: int


# -- pixel file formats ----------------------------------------------------------


def _read_pnm_header(blob, magic, path):
    if not blob.startswith(magic):
        raise DataFormatError(f"{path}: expected {magic.decode()} header")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    return fields, pos


def write_ppm(path, rgb: np.ndarray):
    c, h, w = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    (w, h, maxval), pos = _read_pnm_header(blob, b"P6", path)
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit PPM supported, maxval {maxval}")
    need = w * h * 3
    payload = blob[pos:]
    if len(payload) != need:
        raise DataFormatError(f"{path}: expected {need} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_pgm16(path, raw: np.ndarray):
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(raw.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    (w, h, maxval), pos = _read_pnm_header(blob, b"P5", path)
    if maxval != 65535:
        raise DataFormatError(f"{path}: only 16-bit PGM supported, maxval {maxval}")
    need = w * h * 2
    payload = blob[pos:]
    if len(payload) != need:
        raise DataFormatError(f"{path}: expected {need} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.uint16)


def write_height_meta(path, scale: float, offset: float):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"scale {scale!r}\noffset {offset!r}\n")


def read_height_meta(path):
    scale = offset = None
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[0] not in ("scale", "offset"):
                raise DataFormatError(f"{path}:{ln}: bad meta line {line!r}")
            if parts[0] == "scale":
                scale = float(parts[1])
            else:
                offset = float(parts[1])
    if scale is None or offset is None:
        raise DataFormatError(f"{path}: meta file must define scale and offset")
    return scale, offset


# -- annotations and detections -----------------------------------------------------


def write_annotations(path, annotations):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# class_id xc yc w h theta_deg\n")
        for a in annotations:
            fh.write(f"{a.class_id} {a.xc!r} {a.yc!r} {a.w!r} {a.h!r} {a.theta!r}\n")


def _parse_obb_line(parts, path, ln):
    try:
        cls = int(parts[0])
        vals = [float(v) for v in parts[1:]]
    except ValueError as exc:
        raise DataFormatError(f"{path}:{ln}: non-numeric field ({exc})") from None
    return ObbAnnotation(cls, *vals)


def read_annotations(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataFormatError(
                    f"{path}:{ln}: expected 6 fields (class xc yc w h theta), "
                    f"got {len(parts)}")
            out.append(_parse_obb_line(parts, path, ln))
    return out


def write_detections(path, dets):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# class_id xc yc w h theta_deg score\n")
        for d in dets:
            o = d.obb
            fh.write(f"{o.class_id} {o.xc!r} {o.yc!r} {o.w!r} {o.h!r} {o.theta!r} "
                     f"{d.score!r}\n")


def read_detections(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise DataFormatError(
                    f"{path}:{ln}: expected 7 fields (class xc yc w h theta score), "
                    f"got {len(parts)}")
            obb = _parse_obb_line(parts[:6], path, ln)
            out.append(DetectionRecord(obb, float(parts[6])))
    return out


# -- manifest -------------------------------------------------------------------------


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"tile {r.tile_id}\nscene {r.scene_id}\n"
                     f"origin_x {r.origin_x}\norigin_y {r.origin_y}\n\n")


def read_manifest(path):
    records = []
    block = {}
    with open(path, encoding="utf-8") as fh:
        lines = list(fh) + [""]
    for ln, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            if block:
                try:
                    records.append(TileRecord(block["tile"], block["scene"],
                                              int(block["origin_x"]),
                                              int(block["origin_y"])))
                except KeyError as exc:
                    raise DataFormatError(f"{path}:{ln}: record missing key {exc}") from None
                block = {}
            continue
        parts = line.split(None, 1)
        if len(parts) != 2 or parts[0] not in ("tile", "scene", "origin_x", "origin_y"):
            raise DataFormatError(f"{path}:{ln}: bad manifest line {line!r}")
        block[parts[0]] = parts[1]
    return records


# -- scene/dataset IO -------------------------------------------------------------------


def scene_paths(root, scene_id):
    return {
        "rgb": os.path.join(root, "images", f"{scene_id}.ppm"),
        "hmap": os.path.join(root, "heights", f"{scene_id}.pgm"),
        "meta": os.path.join(root, "heights", f"{scene_id}.meta"),
        "labels": os.path.join(root, "labels", f"{scene_id}.txt"),
    }


def write_scene(sample: SceneSample, root):
    paths = scene_paths(root, sample.id)
    for p in paths.values():
        os.makedirs(os.path.dirname(p), exist_ok=True)
    write_ppm(paths["rgb"], sample.rgb)
    write_pgm16(paths["hmap"], sample.hmap_raw)
    write_height_meta(paths["meta"], sample.height_scale, sample.height_offset)
    write_annotations(paths["labels"], sample.annotations)


def read_scene(root, scene_id, need_height: bool = True) -> SceneSample:
    """Load one scene; with ``need_height=False`` the height files are never
    opened (the rgb-only ablation path)."""
    paths = scene_paths(root, scene_id)
    rgb = read_ppm(paths["rgb"])
    anns = read_annotations(paths["labels"])
    if not need_height:
        return SceneSample(id=scene_id, rgb=rgb, hmap_raw=None, annotations=anns)
    raw = read_pgm16(paths["hmap"])
    scale, offset = read_height_meta(paths["meta"])
    if rgb.shape[1:] != raw.shape:
        raise DataFormatError(
            f"{scene_id}: rgb {rgb.shape[1:]} vs height map {raw.shape} dimension mismatch")
    return SceneSample(id=scene_id, rgb=rgb, hmap_raw=raw, annotations=anns,
                       height_scale=scale, height_offset=offset)


def write_dataset(samples, root, records=None, force: bool = False):
    if os.path.isdir(root) and os.listdir(root) and not force:
        raise FileExistsError(f"{root} exists and is not empty (use force)")
    os.makedirs(root, exist_ok=True)
    for s in samples:
        write_scene(s, root)
    if records is None:
        records = [TileRecord(s.id, s.id, 0, 0) for s in samples]
    write_manifest(os.path.join(root, "manifest.txt"), records)


def read_dataset(root, need_height: bool = True):
    records = read_manifest(os.path.join(root, "manifest.txt"))
    return [read_scene(root, r.tile_id, need_height=need_height) for r in records], records


# -- tiling ------------------------------------------------------------------------------


def tile_origins(extent: int, tile: int, stride: int):
    """k*stride grid clamped so the last tile ends exactly at the border."""
    if tile > extent:
        raise ValueError(f"tile size {tile} exceeds extent {extent}")
    origins = list(range(0, extent - tile + 1, stride))
    if origins[-1] + tile < extent:
        origins.append(extent - tile)
    return origins


def _visible_fraction(ann: ObbAnnotation, ox, oy, t):
    tile_rect = np.array([[ox + t / 2.0, oy + t / 2.0, float(t), float(t), 0.0]])
    inter = float(kernels.rotrect_intersection(ann.as_row()[None], tile_rect)[0])
    return inter / ann.area


def tile_scene(sample: SceneSample, spec: TileSpec):
    """Cut one scene into overlapping tiles.

    Annotations are translated into tile coordinates; objects keeping less
    than ``min_visible_fraction`` of their area inside the tile (or whose
    center leaves it) are dropped. Returns (tiles, manifest records).
    """
    t = spec.tile_size
    stride = t - spec.overlap
    ys = tile_origins(sample.height, t, stride)
    xs = tile_origins(sample.width, t, stride)
    tiles, records = [], []
    for oy in ys:
        for ox in xs:
            kept = []
            for ann in sample.annotations:
                if not (ox <= ann.xc < ox + t and oy <= ann.yc < oy + t):
                    continue
                if _visible_fraction(ann, ox, oy, t) < spec.min_visible_fraction:
                    continue
                kept.append(ObbAnnotation(ann.class_id, ann.xc - ox, ann.yc - oy,
                                          ann.w, ann.h, ann.theta))
            tile_id = f"{sample.id}__y{oy}_x{ox}"
            tiles.append(SceneSample(
                id=tile_id,
                rgb=sample.rgb[:, oy:oy + t, ox:ox + t].copy(),
                hmap_raw=sample.hmap_raw[oy:oy + t, ox:ox + t].copy(),
                annotations=kept,
                height_scale=sample.height_scale,
                height_offset=sample.height_offset))
            records.append(TileRecord(tile_id, sample.id, ox, oy))
    return tiles, records


def backmap_annotation(ann: ObbAnnotation, record: TileRecord) -> ObbAnnotation:
    """Tile coordinates back to source-scene coordinates."""
    return ObbAnnotation(ann.class_id, ann.xc + record.origin_x,
                         ann.yc + record.origin_y, ann.w, ann.h, ann.theta)


# -- synthetic scene generation ------------------------------------------------------------

VEHICLE_COLORS = np.array([
    [235, 235, 235],   # white
    [180, 30, 30],     # red
    [40, 70, 170],     # blue
    [170, 175, 180],   # silver
    [30, 30, 35],      # black
    [200, 160, 40],    # yellow
], dtype=float)

TENT_COLOR = np.array([168, 160, 128], dtype=float)
BUSH_COLOR = np.array([55, 95, 45], dtype=float)
BRANCH_COLOR = np.array([70, 60, 40], dtype=float)
GROUND_COLOR = np.array([95, 88, 72], dtype=float)


@dataclass(frozen=True)
class SynthConfig:
    """Dense/occluded parking-lot scenes with exact oriented ground truth.

    Occluders overpaint the RGB planes: tents fully cover a vehicle (its
    tarp height stays vehicle-like, so the height stream still sees it),
    branches cross it with a thin tall stripe. A ``low_profile_prob``
    fraction of vehicles is rendered at near-ground height, visible in RGB
    but erased by the height slicing band.
    """

    n_scenes: int = 1
    canvas: int = 128
    vehicles_min: int = 5
    vehicles_max: int = 12
    cluster_tightness: float = 0.6
    occluder_prob: float = 0.35
    vehicle_height_min: float = 1.4
    vehicle_height_max: float = 3.2
    occluder_height_min: float = 4.2
    occluder_height_max: float = 6.0
    low_profile_prob: float = 0.15
    distractors_min: int = 4
    distractors_max: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.vehicles_min > self.vehicles_max or self.distractors_min > self.distractors_max:
            raise ValueError("count ranges must be non-empty")
        if self.vehicle_height_min > self.vehicle_height_max:
            raise ValueError("vehicle height range must be non-empty")
        for p in (self.occluder_prob, self.low_profile_prob, self.cluster_tightness):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"probabilities must lie in [0, 1], got {p}")


def _paint(rgb, hmap, box, color=None, height=None):
    n = 0
    if color is not None:
        n = kernels.paint_rect(rgb, box.xc, box.yc, box.w, box.h, box.theta,
                               np.asarray(color, dtype=float))
    if height is not None:
        n = kernels.paint_rect(hmap[None], box.xc, box.yc, box.w, box.h, box.theta,
                               np.array([height], dtype=float))
    return n


def _place_box(rng, canvas, w, h, centers, min_dist, tries=25):
    margin = max(w, h) / 2.0 + 1.0
    if 2 * margin >= canvas:
        return None
    for _ in range(tries):
        xc = rng.uniform(margin, canvas - margin)
        yc = rng.uniform(margin, canvas - margin)
        if all((xc - cx) ** 2 + (yc - cy) ** 2 >= min_dist ** 2 for cx, cy in centers):
            return xc, yc
    return None


def _generate_scene(scene_id, cfg: SynthConfig, rng) -> SceneSample:
    c = cfg.canvas
    rgb = np.empty((3, c, c))
    rgb[:] = GROUND_COLOR[:, None, None]
    hmap = rng.uniform(0.0, 0.2, size=(c, c))

    n_vehicles = int(rng.integers(cfg.vehicles_min, cfg.vehicles_max + 1))
    n_clusters = max(1, n_vehicles // 5)
    clusters = [(rng.uniform(c * 0.2, c * 0.8), rng.uniform(c * 0.2, c * 0.8),
                 rng.uniform(-90, 90)) for _ in range(n_clusters)]
    spread = (1.0 - cfg.cluster_tightness) * c * 0.35 + c * 0.08

    vehicles = []          # (obb, kind) with kind in normal/low/tented/branched
    centers = []
    placed = 0
    for _ in range(n_vehicles):
        cx, cy, base_angle = clusters[int(rng.integers(0, n_clusters))]
        w = rng.uniform(11.0, 17.0)
        h = rng.uniform(6.0, 9.0)
        ok = None
        for _ in range(25):
            xc = cx + rng.normal(0, spread)
            yc = cy + rng.normal(0, spread)
            margin = max(w, h) / 2.0 + 1.0
            if not (margin < xc < c - margin and margin < yc < c - margin):
                continue
            if all((xc - px) ** 2 + (yc - py) ** 2 >= 9.0 ** 2 for px, py in centers):
                ok = (xc, yc)
                break
        if ok is None:
            continue
        theta = base_angle + rng.normal(0, 10.0)
        obb = ObbAnnotation(0, ok[0], ok[1], w, h, theta)
        low = rng.uniform() < cfg.low_profile_prob
        kind = "low" if low else "normal"
        if not low and rng.uniform() < cfg.occluder_prob:
            kind = "tented" if rng.uniform() < 0.65 else "branched"
        vehicles.append((obb, kind))
        centers.append(ok)
        placed += 1

    # paint vehicles first, occluders and distractors over them
    occluded_rgb = 0
    low_count = 0
    for obb, kind in vehicles:
        color = VEHICLE_COLORS[int(rng.integers(0, len(VEHICLE_COLORS)))]
        if kind == "low":
            height = rng.uniform(0.05, 0.35)
            low_count += 1
        else:
            height = rng.uniform(cfg.vehicle_height_min, cfg.vehicle_height_max)
        _paint(rgb, hmap, obb, color=color, height=height)
        if kind == "tented":
            tent = ObbAnnotation(0, obb.xc, obb.yc, obb.w + rng.uniform(2.0, 5.0),
                                 obb.h + rng.uniform(2.0, 5.0), obb.theta)
            tarp = height + rng.uniform(0.15, 0.45)
            _paint(rgb, hmap, tent, color=TENT_COLOR + rng.uniform(-8, 8, 3), height=tarp)
            occluded_rgb += 1
        elif kind == "branched":
            branch = ObbAnnotation(0, obb.xc + rng.normal(0, 1.5), obb.yc + rng.normal(0, 1.5),
                                   obb.w * rng.uniform(1.2, 2.0), rng.uniform(1.5, 3.0),
                                   obb.theta + rng.uniform(-60, 60))
            _paint(rgb, hmap, branch, color=BRANCH_COLOR + rng.uniform(-8, 8, 3),
                   height=rng.uniform(4.5, 8.5))

    n_distract = int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1))
    for _ in range(n_distract):
        roll = rng.uniform()
        if roll < 0.42:   # empty tent: same RGB look as a covered one, taller
            w, h = rng.uniform(12, 20), rng.uniform(8, 14)
            pos = _place_box(rng, c, w, h, centers, min_dist=10.0)
            if pos is None:
                continue
            box = ObbAnnotation(0, pos[0], pos[1], w, h, rng.uniform(-90, 90))
            _paint(rgb, hmap, box, color=TENT_COLOR + rng.uniform(-8, 8, 3),
                   height=rng.uniform(cfg.occluder_height_min, cfg.occluder_height_max))
        elif roll < 0.82:  # bush: vehicle-height blob, RGB clearly vegetal
            w, h = rng.uniform(5, 10), rng.uniform(4, 8)
            pos = _place_box(rng, c, w, h, centers, min_dist=8.0)
            if pos is None:
                continue
            box = ObbAnnotation(0, pos[0], pos[1], w, h, rng.uniform(-90, 90))
            _paint(rgb, hmap, box, color=BUSH_COLOR + rng.uniform(-10, 10, 3),
                   height=rng.uniform(0.9, 2.6))
        else:             # fallen branch: thin elongated low clutter
            w, h = rng.uniform(14, 30), rng.uniform(1.5, 3.0)
            pos = _place_box(rng, c, w, h, centers, min_dist=8.0)
            if pos is None:
                continue
            box = ObbAnnotation(0, pos[0], pos[1], w, h, rng.uniform(-90, 90))
            _paint(rgb, hmap, box, color=BRANCH_COLOR + rng.uniform(-8, 8, 3),
                   height=rng.uniform(0.6, 1.8))

    rgb += rng.normal(0, 5.0, size=rgb.shape)
    hmap += rng.normal(0, 0.04, size=hmap.shape)
    rgb_u8 = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    raw = np.clip(np.rint(np.maximum(hmap, 0.0) / HEIGHT_SCALE_DEFAULT), 0, 65535)
    annotations = [obb for obb, _ in vehicles]
    return SceneSample(
        id=scene_id, rgb=rgb_u8, hmap_raw=raw.astype(np.uint16),
        annotations=annotations,
        meta={"requested_vehicles": n_vehicles, "placed_vehicles": placed,
              "rgb_occluded": occluded_rgb, "low_profile": low_count})


def synth_generate(cfg: SynthConfig):
    """Deterministic synthetic dataset; one child RNG stream per scene."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_scenes)
    scenes = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        scenes.append(_generate_scene(f"scene_{i:05d}", cfg, rng))
    return scenes


# -- statistics ------------------------------------------------------------------------------

AREA_BIN_WIDTH = 20.0


def dataset_stats(samples) -> dict:
    """Instance counts, per-class counts, area histogram, density per tile."""
    samples = list(samples)
    per_class = {}
    areas = []
    densities = []
    for s in samples:
        densities.append(len(s.annotations))
        for a in s.annotations:
            per_class[a.class_id] = per_class.get(a.class_id, 0) + 1
            areas.append(a.area)
    hist = {}
    for area in areas:
        lo = int(area // AREA_BIN_WIDTH) * int(AREA_BIN_WIDTH)
        hist[lo] = hist.get(lo, 0) + 1
    return {
        "scenes": len(samples),
        "instances": int(sum(per_class.values())),
        "per_class": dict(sorted(per_class.items())),
        "area_histogram": dict(sorted(hist.items())),
        "density_mean": float(np.mean(densities)) if densities else 0.0,
        "density_max": int(max(densities)) if densities else 0,
    }


def stats_to_csv(stats: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric,key,value\n")
        fh.write(f"scenes,total,{stats['scenes']}\n")
        fh.write(f"instances,total,{stats['instances']}\n")
        for cls, n in stats["per_class"].items():
            fh.write(f"instances,class_{cls},{n}\n")
        fh.write(f"density,mean_per_tile,{stats['density_mean']:.6f}\n")
        fh.write(f"density,max_per_tile,{stats['density_max']}\n")
        for lo, n in stats["area_histogram"].items():
            fh.write(f"area_hist,{lo}-{lo + int(AREA_BIN_WIDTH)},{n}\n")
