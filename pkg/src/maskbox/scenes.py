"""Synthetic panoptic scenes and their on-disk container.

A scene is a 64x64 (configurable) RGB rendering of 2-4 anti-aliased shapes
(disk, rectangle, triangle) over a background split into two gradient bands,
one per stuff class. Masks live on the stride-4 grid and reflect visible
pixels only (later shapes overdraw earlier ones); thing boxes are the tight
boxes of their visible masks. Everything is deterministic given a seed, and
per-scene seeds come from a splittable SeedSequence, so generation order
does not matter.

Container format (little-endian): magic "MDS1"; header {version u16, scene
count u32, class table as u32-length-prefixed JSON}; per scene {H u16, W
u16, image float32 [3,H,W], object count u16, per object {class u16,
is_thing u8, box 4 x f32 cxcywh, mask rows packed LSB-first}}. A JSON
manifest (scene ids, object counts, class table) sits next to the file.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry as G

MAGIC = b"MDS1"
VERSION = 1

THING_CLASSES = ["disk", "rectangle", "triangle"]
STUFF_CLASSES = ["h_gradient_band", "v_gradient_band"]
CLASS_TABLE = ([{"id": i, "name": n, "is_thing": True}
                for i, n in enumerate(THING_CLASSES)]
               + [{"id": len(THING_CLASSES) + i, "name": n, "is_thing": False}
                  for i, n in enumerate(STUFF_CLASSES)])


class ConfigInvalid(ValueError):
    pass


class FormatError(ValueError):
    pass


class InvariantViolation(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass
class SceneConfig:
    image_size: int = 64
    thing_min: int = 2
    thing_max: int = 4
    thing_weights: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.image_size % 4 or self.image_size < 16:
            raise ConfigInvalid(f"image size {self.image_size} must be a "
                                "multiple of 4 and at least 16")
        if not 0 <= self.thing_min <= self.thing_max:
            raise ConfigInvalid(f"bad thing range [{self.thing_min}, "
                                f"{self.thing_max}]")
        if len(self.thing_weights) != len(THING_CLASSES) \
                or min(self.thing_weights) < 0 or sum(self.thing_weights) == 0:
            raise ConfigInvalid(f"bad thing weights {self.thing_weights}")
        return self


@dataclass
class SceneTarget:
    classes: list           # per object class id
    is_thing: list
    boxes: np.ndarray       # [G, 4] cxcywh (tight mask boxes)
    masks: list             # [H/4, W/4] bool, visible pixels only
    image: np.ndarray       # [3, H, W] float32 in [0, 1]

    @property
    def num_objects(self):
        return len(self.classes)


# -- shape membership ----------------------------------------------------------

def _member(shape, pts):
    """Boolean membership of [N, 2] normalized points in a shape record."""
    kind = shape["kind"]
    if kind == "disk":
        return ((pts - shape["center"]) ** 2).sum(axis=1) <= shape["r"] ** 2
    if kind == "rectangle":
        d = np.abs(pts - shape["center"])
        return (d[:, 0] <= shape["hw"]) & (d[:, 1] <= shape["hh"])
    if kind == "triangle":
        v = shape["verts"]
        sign = None
        inside = np.ones(len(pts), dtype=bool)
        for i in range(3):
            a, b = v[i], v[(i + 1) % 3]
            cross = ((b[0] - a[0]) * (pts[:, 1] - a[1])
                     - (b[1] - a[1]) * (pts[:, 0] - a[0]))
            inside &= cross >= 0 if shape["ccw"] else cross <= 0
        return inside
    raise ValueError(kind)


def _sample_shape(kind, rng):
    center = rng.uniform(0.18, 0.82, size=2)
    if kind == "disk":
        return {"kind": kind, "center": center, "r": rng.uniform(0.09, 0.2)}
    if kind == "rectangle":
        return {"kind": kind, "center": center,
                "hw": rng.uniform(0.08, 0.2), "hh": rng.uniform(0.08, 0.2)}
    # triangle: three radial vertices with a minimum angular gap
    for _ in range(64):
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
        gaps = np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]]))
        if gaps.min() > 0.6:
            break
    radii = rng.uniform(0.12, 0.24, size=3)
    verts = center + np.stack([np.cos(angles), np.sin(angles)], 1) * radii[:, None]
    area2 = ((verts[1, 0] - verts[0, 0]) * (verts[2, 1] - verts[0, 1])
             - (verts[1, 1] - verts[0, 1]) * (verts[2, 0] - verts[0, 0]))
    return {"kind": kind, "center": center, "verts": verts, "ccw": area2 > 0}


def _cell_centers(m):
    ys, xs = np.mgrid[0:m, 0:m]
    return np.stack([(xs.reshape(-1) + 0.5) / m,
                     (ys.reshape(-1) + 0.5) / m], axis=1)


def _connected(mask):
    _, n = ndimage.label(mask)
    return n == 1


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> SceneTarget:
    """Render one scene; invalid geometry is resampled with classes fixed.

    The class draw happens exactly once per scene, so geometric rejection
    (occlusion splitting a mask, a band fully covered) cannot skew the
    configured class frequencies.
    """
    cfg.validate()
    size = cfg.image_size
    m = size // 4
    # stuff layout: split into two bands at a stride-4 cell boundary
    horizontal_split = bool(rng.random() < 0.5)
    split = int(rng.integers(int(m * 0.3), int(m * 0.7) + 1))
    swap = bool(rng.random() < 0.5)
    stuff_colors = rng.uniform(0.1, 0.9, size=(2, 2, 3))
    n_things = int(rng.integers(cfg.thing_min, cfg.thing_max + 1))
    weights = np.asarray(cfg.thing_weights, dtype=np.float64)
    weights = weights / weights.sum()
    kinds = [int(rng.choice(len(THING_CLASSES), p=weights))
             for _ in range(n_things)]
    colors = rng.uniform(0.05, 0.95, size=(n_things, 3))
    for _ in range(200):
        shapes = [_sample_shape(THING_CLASSES[k], rng) for k in kinds]
        scene = _compose(cfg, horizontal_split, split, swap, stuff_colors,
                         kinds, shapes, colors)
        if scene is not None:
            return scene
    raise ConfigInvalid("could not generate a valid scene; shrink the "
                        "thing range or grow the image")


def _compose(cfg, horizontal_split, split, swap, stuff_colors, kinds,
             shapes, colors):
    size = cfg.image_size
    m = size // 4
    n_things = len(kinds)
    # stride-4 membership and visibility (later shapes overdraw)
    pts = _cell_centers(m)
    member = [_member(s, pts).reshape(m, m) for s in shapes]
    visible = []
    for i in range(n_things):
        vis = member[i].copy()
        for j in range(i + 1, n_things):
            vis &= ~member[j]
        visible.append(vis)
    if any(not v.any() or not _connected(v) for v in visible):
        return None

    axis_idx = pts[:, 1] if horizontal_split else pts[:, 0]
    band_a = (axis_idx < split / m).reshape(m, m)
    thing_cover = np.zeros((m, m), dtype=bool)
    for v in member:
        thing_cover |= v
    stuff_masks = [band_a & ~thing_cover, ~band_a & ~thing_cover]
    if swap:
        stuff_masks.reverse()
    if any(not s.any() for s in stuff_masks):
        return None

    image = _render(size, horizontal_split, split / m, swap, stuff_colors,
                    shapes, colors)

    classes, is_thing, boxes, masks = [], [], [], []
    for i in range(n_things):
        classes.append(kinds[i])
        is_thing.append(True)
        masks.append(visible[i])
        boxes.append(G.mask_to_box(visible[i]).as_array())
    for s in range(2):
        classes.append(len(THING_CLASSES) + s)
        is_thing.append(False)
        masks.append(stuff_masks[s])
        boxes.append(G.mask_to_box(stuff_masks[s]).as_array())
    return SceneTarget(classes, is_thing, np.stack(boxes), masks,
                       image.astype(np.float32))


def _render(size, horizontal_split, split_frac, swap, stuff_colors,
            shapes, colors):
    ys, xs = np.mgrid[0:size, 0:size]
    tx = (xs + 0.5) / size
    ty = (ys + 0.5) / size
    img = np.zeros((size, size, 3))
    band_a = (ty if horizontal_split else tx) < split_frac
    ramps = [tx, ty]                     # class 3 ramps along x, class 4 along y
    regions = [band_a, ~band_a]
    for region_i, region in enumerate(regions):
        stuff_class = region_i ^ int(swap)
        c0, c1 = stuff_colors[stuff_class]
        t = ramps[stuff_class][region][:, None]
        img[region] = c0 + t * (c1 - c0)
    # 2x supersampled anti-aliased shape coverage
    ss = 2
    fine = size * ss
    fys, fxs = np.mgrid[0:fine, 0:fine]
    fpts = np.stack([(fxs.reshape(-1) + 0.5) / fine,
                     (fys.reshape(-1) + 0.5) / fine], axis=1)
    for shape, color in zip(shapes, colors):
        cov = _member(shape, fpts).reshape(fine, fine).astype(np.float64)
        cov = cov.reshape(size, ss, size, ss).mean(axis=(1, 3))
        img = img * (1 - cov[:, :, None]) + color[None, None, :] * cov[:, :, None]
    return img.transpose(2, 0, 1)


def semantic_map(scene: SceneTarget) -> np.ndarray:
    """Per-pixel class labels on the stride-4 grid."""
    m = scene.masks[0].shape[0]
    out = np.full((m, scene.masks[0].shape[1]), -1, dtype=np.int32)
    for cls, mask in zip(scene.classes, scene.masks):
        out[mask] = cls
    return out


def panoptic_map(scene: SceneTarget):
    """Ground-truth segment id map (ids 1..G) and segment table."""
    shape = scene.masks[0].shape
    seg = np.zeros(shape, dtype=np.int32)
    table = []
    for i, mask in enumerate(scene.masks):
        seg[mask] = i + 1
        table.append({"id": i + 1, "class": int(scene.classes[i]),
                      "is_thing": bool(scene.is_thing[i])})
    return seg, table


# -- container I/O -------------------------------------------------------------

def scene_seeds(master_seed: int, count: int):
    return np.random.SeedSequence(master_seed).spawn(count)


def generate_dataset(cfg: SceneConfig, count: int, master_seed: int):
    """Deterministic scene iterator; each scene uses its own spawned seed."""
    for ss in scene_seeds(master_seed, count):
        yield generate_scene(cfg, np.random.default_rng(ss))


def _pack_mask(mask) -> bytes:
    return np.packbits(mask.astype(np.uint8), axis=1,
                       bitorder="little").tobytes()


def _unpack_mask(buf, h, w) -> np.ndarray:
    row_bytes = (w + 7) // 8
    rows = np.frombuffer(buf, dtype=np.uint8).reshape(h, row_bytes)
    return np.unpackbits(rows, axis=1, bitorder="little")[:, :w].astype(bool)


def write_dataset(scenes, path) -> dict:
    """Write scenes to the container; returns (and writes) the manifest."""
    entries = []
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HI", VERSION, 0))      # count patched later
            fh.write(_json_block(CLASS_TABLE))
            count = 0
            for scene in scenes:
                _write_scene(fh, scene)
                entries.append({"id": count, "objects": scene.num_objects})
                count += 1
            fh.seek(len(MAGIC))
            fh.write(struct.pack("<HI", VERSION, count))
    except OSError as exc:
        raise IoFailure(f"cannot write dataset {path}: {exc}") from exc
    manifest = {"magic": MAGIC.decode(), "version": VERSION,
                "scene_count": len(entries), "classes": CLASS_TABLE,
                "scenes": entries}
    with open(str(path) + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _json_block(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


def _write_scene(fh, scene: SceneTarget):
    _, h, w = scene.image.shape
    fh.write(struct.pack("<HH", h, w))
    fh.write(scene.image.astype("<f4").tobytes())
    fh.write(struct.pack("<H", scene.num_objects))
    for i in range(scene.num_objects):
        fh.write(struct.pack("<HB", int(scene.classes[i]),
                             int(scene.is_thing[i])))
        fh.write(np.asarray(scene.boxes[i], dtype="<f4").tobytes())
        fh.write(_pack_mask(scene.masks[i]))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated dataset while reading {what}")
    return buf


def read_dataset(path, validate=True):
    """Stream scenes back out of a container file."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise FormatError("bad magic bytes; not a scene dataset")
        version, count = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported dataset version {version}, "
                              f"expected {VERSION}")
        (tbl_len,) = struct.unpack("<I", _read_exact(fh, 4, "class table"))
        json.loads(_read_exact(fh, tbl_len, "class table"))
        for _ in range(count):
            yield _read_scene(fh, validate)


def _read_scene(fh, validate) -> SceneTarget:
    h, w = struct.unpack("<HH", _read_exact(fh, 4, "scene header"))
    img = np.frombuffer(_read_exact(fh, 3 * h * w * 4, "image"),
                        dtype="<f4").reshape(3, h, w).copy()
    (n_obj,) = struct.unpack("<H", _read_exact(fh, 2, "object count"))
    mh, mw = h // 4, w // 4
    row_bytes = (mw + 7) // 8
    classes, is_thing, boxes, masks = [], [], [], []
    for _ in range(n_obj):
        cls, thing = struct.unpack("<HB", _read_exact(fh, 3, "object header"))
        box = np.frombuffer(_read_exact(fh, 16, "box"), dtype="<f4")
        mask = _unpack_mask(_read_exact(fh, mh * row_bytes, "mask"), mh, mw)
        classes.append(int(cls))
        is_thing.append(bool(thing))
        boxes.append(box.astype(np.float64))
        masks.append(mask)
    scene = SceneTarget(classes, is_thing,
                        np.stack(boxes) if boxes else np.zeros((0, 4)),
                        masks, img)
    if validate:
        _validate_scene(scene)
    return scene


def _validate_scene(scene: SceneTarget):
    if not np.isfinite(scene.image).all():
        raise InvariantViolation("non-finite image data")
    cover = np.zeros(scene.masks[0].shape, dtype=np.int32) \
        if scene.masks else None
    for i, mask in enumerate(scene.masks):
        if not mask.any():
            raise InvariantViolation(f"object {i} has an empty mask")
        if cover is not None:
            cover += mask
    if cover is not None and not (cover == 1).all():
        raise InvariantViolation("masks do not tile the image exactly once")
    for i, box in enumerate(scene.boxes):
        if not (0 <= box[0] <= 1 and 0 <= box[1] <= 1
                and box[2] > 0 and box[3] > 0):
            raise InvariantViolation(f"object {i} box {box} out of range")


def load_scenes(path) -> list:
    return list(read_dataset(path))
