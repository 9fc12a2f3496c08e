"""Synthetic traffic-sign-style dataset generator.

Each image is a procedural sign (outer shape in a class color, border
ring, inner glyph) affinely placed over a procedural background (sky
gradient, textured ground, building rectangles), then post-processed
with a light Gaussian blur and additive noise. Everything derives from
per-image seeds, so a dataset regenerates byte-identically.

Poisoning supports two trigger families: a solid polygon overlay and a
parametric color-tone remap applied to every pixel.
"""

from __future__ import annotations

import colorsys
import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .ppm import read_ppm, write_ppm

ROT_RANGE_DEG = 15.0
SCALE_RANGE = (0.5, 0.9)
BLUR_SIGMA_RANGE = (0.0, 1.0)
NOISE_SIGMA_RANGE = (0.0, 8.0)

SIGN_COLORS = (
    (200, 30, 30),    # red
    (30, 70, 200),    # blue
    (230, 200, 30),   # yellow
    (30, 160, 60),    # green
    (235, 130, 20),   # orange
    (240, 240, 240),  # white
    (130, 40, 160),   # purple
    (130, 85, 40),    # brown
)
BORDER_COLORS = (None, (250, 250, 250), (20, 20, 20), (170, 20, 20))
N_SHAPES = 16
N_GLYPHS = 8
MAX_CLASSES = N_SHAPES * len(SIGN_COLORS) * len(BORDER_COLORS)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary labeled parts (not Python hash())."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


# -- geometry -------------------------------------------------------------------

def _regular_polygon(k: int, phase: float = -math.pi / 2) -> np.ndarray:
    ang = phase + 2 * math.pi * np.arange(k) / k
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _star(points: int, inner: float = 0.45) -> np.ndarray:
    ang = -math.pi / 2 + math.pi * np.arange(2 * points) / points
    rad = np.where(np.arange(2 * points) % 2 == 0, 1.0, inner)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)


def _semicircle() -> np.ndarray:
    ang = np.linspace(0, math.pi, 25)
    return np.stack([np.cos(ang), -np.sin(ang) + 0.35], axis=1)


def _unit_shapes() -> list[np.ndarray]:
    shapes = [_regular_polygon(48)]                      # circle
    shapes += [_regular_polygon(k) for k in range(3, 13)]
    shapes += [_star(k) for k in (4, 5, 6)]
    shapes.append(_regular_polygon(4, phase=0.0))        # diamond
    shapes.append(_semicircle())
    return shapes


SHAPES = _unit_shapes()

GLYPHS = (
    np.array([(-0.55, -0.16), (0.55, -0.16), (0.55, 0.16), (-0.55, 0.16)]),   # bar
    np.array([(-0.16, -0.55), (0.16, -0.55), (0.16, 0.55), (-0.16, 0.55)]),   # post
    _regular_polygon(24) * 0.3,                                               # dot
    np.array([(-0.5, -0.12), (-0.12, -0.12), (-0.12, -0.5), (0.12, -0.5),
              (0.12, -0.12), (0.5, -0.12), (0.5, 0.12), (0.12, 0.12),
              (0.12, 0.5), (-0.12, 0.5), (-0.12, 0.12), (-0.5, 0.12)]),       # cross
    _regular_polygon(3) * 0.45,                                               # wedge up
    _regular_polygon(3, phase=math.pi / 2) * 0.45,                            # wedge down
    np.array([(-0.45, -0.45), (0.45, -0.45), (0.45, 0.45), (-0.45, 0.45)]) * 0.8,  # block
    np.array([(-0.5, 0.3), (0.0, -0.3), (0.5, 0.3), (0.5, 0.55),
              (0.0, -0.02), (-0.5, 0.55)]),                                   # chevron
)


def polygon_mask(verts: np.ndarray, h: int, w: int) -> np.ndarray:
    """Even-odd fill over pixel centers (crossing-number test)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy += 0.5
    xx += 0.5
    inside = np.zeros((h, w), dtype=bool)
    k = len(verts)
    for i in range(k):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % k]
        crosses = (y1 <= yy) != (y2 <= yy)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xx < xint)
    return inside


def _transform(verts: np.ndarray, rot_deg: float, radius: float, center) -> np.ndarray:
    t = math.radians(rot_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return verts @ rot.T * radius + np.asarray(center, dtype=np.float64)


def mask_bbox(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if not len(rows):
        return None
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


# -- post-processing --------------------------------------------------------------

def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 1e-3:
        return img
    r = max(1, int(math.ceil(3 * sigma)))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    kernel = np.exp(-(xs**2) / (2 * sigma * sigma))
    kernel /= kernel.sum()
    out = img.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(padded, 2 * r + 1, axis=axis)
        out = win @ kernel  # window axis folds back into place
    return out


# -- triggers ---------------------------------------------------------------------

FILTER_PRESETS = {
    "identity": (((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)), (0.0, 0.0, 0.0)),
    # Warm remap: cool/blue inputs land on brown-orange outputs, greens
    # stay muted; chosen so a pure-blue pixel comes out with R >= G >= B.
    "earthtone": (((0.50, 0.35, 0.60), (0.35, 0.45, 0.40), (0.15, 0.25, 0.20)),
                  (10.0, 0.0, 0.0)),
}


@dataclass
class TriggerSpec:
    kind: str = "none"  # none | polygon | color-filter
    sides: int = 4
    color: tuple[int, int, int] = (0, 200, 200)
    rel_size: float = 0.15
    placement: str = "on-sign"  # on-sign | random
    matrix: tuple = FILTER_PRESETS["identity"][0]
    offset: tuple = FILTER_PRESETS["identity"][1]
    source_class: int = 0
    target_class: int = 1

    def validate(self):
        if self.kind not in ("none", "polygon", "color-filter"):
            raise ValidationError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "none":
            return
        if self.source_class == self.target_class:
            raise ValidationError("trigger source and target classes must differ")
        if self.kind == "polygon":
            if self.sides < 3:
                raise ValidationError("polygon trigger needs at least 3 sides")
            if not 0.0 < self.rel_size <= 0.3:
                raise ValidationError("polygon relative size must be in (0, 0.3]")
            if self.placement not in ("on-sign", "random"):
                raise ValidationError(f"unknown trigger placement {self.placement!r}")

    @classmethod
    def preset_filter(cls, name: str, source_class: int, target_class: int) -> "TriggerSpec":
        if name not in FILTER_PRESETS:
            raise ValidationError(f"unknown filter preset {name!r} (have {sorted(FILTER_PRESETS)})")
        matrix, offset = FILTER_PRESETS[name]
        return cls(kind="color-filter", matrix=matrix, offset=offset,
                   source_class=source_class, target_class=target_class)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "sides": self.sides, "color": list(self.color),
            "rel_size": self.rel_size, "placement": self.placement,
            "matrix": [list(r) for r in self.matrix], "offset": list(self.offset),
            "source_class": self.source_class, "target_class": self.target_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(
            kind=d["kind"], sides=int(d["sides"]), color=tuple(d["color"]),
            rel_size=float(d["rel_size"]), placement=d["placement"],
            matrix=tuple(tuple(float(v) for v in r) for r in d["matrix"]),
            offset=tuple(float(v) for v in d["offset"]),
            source_class=int(d["source_class"]), target_class=int(d["target_class"]),
        )


def apply_trigger(img: np.ndarray, trig: TriggerSpec, rng, sign_bbox=None):
    """Apply a trigger to a float image (H,W,3) in the 0..255 range.

    Returns (image, mask) where mask marks the changed region; pixels
    outside the mask are untouched. Polygon area is `rel_size` times the
    sign bounding-box area (whole image when no bbox is known).
    """
    trig.validate()
    if trig.kind == "none":
        raise ValidationError("apply_trigger called with kind='none'")
    h, w = img.shape[:2]
    if trig.kind == "color-filter":
        mat = np.asarray(trig.matrix, dtype=np.float64)
        off = np.asarray(trig.offset, dtype=np.float64)
        out = np.clip(img.astype(np.float64) @ mat.T + off, 0.0, 255.0)
        return out, np.ones((h, w), dtype=bool)

    if sign_bbox is None:
        bbox = (0, 0, h, w)
    else:
        bbox = sign_bbox
    bh, bw = bbox[2] - bbox[0], bbox[3] - bbox[1]
    area = trig.rel_size * bh * bw
    k = trig.sides
    radius = math.sqrt(2.0 * area / (k * math.sin(2 * math.pi / k)))
    if 2 * radius >= min(h, w):
        raise ValidationError(
            f"{k}-gon trigger of relative size {trig.rel_size} does not fit a {h}x{w} image"
        )
    if trig.placement == "on-sign":
        cy = rng.uniform(bbox[0] + 0.3 * bh, bbox[0] + 0.7 * bh)
        cx = rng.uniform(bbox[1] + 0.3 * bw, bbox[1] + 0.7 * bw)
    else:
        cy = rng.uniform(radius, h - radius)
        cx = rng.uniform(radius, w - radius)
    cy = min(max(cy, radius), h - radius)
    cx = min(max(cx, radius), w - radius)
    verts = _transform(_regular_polygon(k), rng.uniform(0.0, 360.0), radius, (cx, cy))
    mask = polygon_mask(verts, h, w)
    out = img.astype(np.float64).copy()
    out[mask] = np.asarray(trig.color, dtype=np.float64)
    return out, mask


# -- templates and rendering -------------------------------------------------------

@dataclass(frozen=True)
class ClassTemplate:
    shape_idx: int
    color_idx: int
    border_idx: int
    glyph_idx: int


def class_templates(seed: int, classes: int) -> list[ClassTemplate]:
    if classes > MAX_CLASSES:
        raise ValidationError(f"at most {MAX_CLASSES} distinct class templates, asked {classes}")
    combos = [(s, c, b)
              for s in range(N_SHAPES)
              for c in range(len(SIGN_COLORS))
              for b in range(len(BORDER_COLORS))]
    rng = np.random.default_rng(derive_seed(seed, "templates"))
    order = rng.permutation(len(combos))
    glyphs = rng.integers(0, N_GLYPHS, size=classes)
    return [ClassTemplate(*combos[order[i]], glyph_idx=int(glyphs[i])) for i in range(classes)]


def _hsv255(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0), 1), min(max(v, 0), 1))) * 255.0


def _render_background(rng, h, w) -> np.ndarray:
    img = np.zeros((h, w, 3), dtype=np.float64)
    sky_top = _hsv255(rng.uniform(0.55, 0.62), rng.uniform(0.35, 0.75), rng.uniform(0.75, 1.0))
    sky_bot = sky_top * 0.55 + np.array([200.0, 215.0, 235.0]) * 0.45
    horizon = int(h * rng.uniform(0.55, 0.8))
    t = (np.arange(h) / max(horizon, 1))[:, None, None].clip(0, 1)
    img[:] = sky_top[None, None, :] * (1 - t) + sky_bot[None, None, :] * t

    ground = _hsv255(rng.uniform(0.05, 0.25), rng.uniform(0.3, 0.6), rng.uniform(0.35, 0.6))
    img[horizon:] = ground[None, None, :]
    img[horizon:] += rng.normal(0.0, 12.0, size=img[horizon:].shape)

    for _ in range(int(rng.integers(0, 5))):
        bw = int(rng.integers(max(2, w // 10), max(3, w // 3)))
        x0 = int(rng.integers(0, max(1, w - bw)))
        top = int(rng.integers(h // 6, max(h // 6 + 1, horizon)))
        gray = rng.uniform(60, 150)
        img[top:horizon, x0 : x0 + bw] = gray + rng.normal(0, 4, size=3)
    return np.clip(img, 0, 255)


def _render_sign(rng, img, template: ClassTemplate):
    """Rasterize the sign over the background; returns its bounding box."""
    h, w = img.shape[:2]
    scale = rng.uniform(*SCALE_RANGE)
    radius = scale * min(h, w) / 2.0
    rot = rng.uniform(-ROT_RANGE_DEG, ROT_RANGE_DEG)
    cy = rng.uniform(radius, h - radius)
    cx = rng.uniform(radius, w - radius)

    shape = SHAPES[template.shape_idx]
    outer = polygon_mask(_transform(shape, rot, radius, (cx, cy)), h, w)
    face_color = np.asarray(SIGN_COLORS[template.color_idx], dtype=np.float64)
    border_color = BORDER_COLORS[template.border_idx]
    if border_color is None:
        img[outer] = face_color
    else:
        inner = polygon_mask(_transform(shape, rot, radius * 0.78, (cx, cy)), h, w)
        img[outer] = np.asarray(border_color, dtype=np.float64)
        img[inner] = face_color

    glyph = GLYPHS[template.glyph_idx]
    gmask = polygon_mask(_transform(glyph, rot, radius * 0.62, (cx, cy)), h, w)
    gmask &= outer
    luma = face_color @ np.array([0.299, 0.587, 0.114])
    img[gmask] = 15.0 if luma > 128 else 240.0
    bbox = mask_bbox(outer)
    return bbox if bbox is not None else (0, 0, h, w)


def render_image(template: ClassTemplate, size, seed: int, trigger: TriggerSpec | None = None):
    """Render one composite; deterministic for a given (template, size, seed).

    The trigger consumes an independently derived stream, so the same seed
    with and without a trigger differs only by the trigger itself (plus
    downstream post-processing).
    """
    h, w = size
    rng = np.random.default_rng(seed)
    img = _render_background(rng, h, w)
    bbox = _render_sign(rng, img, template)
    if trigger is not None and trigger.kind != "none":
        trig_rng = np.random.default_rng(derive_seed(seed, "trigger"))
        img, _ = apply_trigger(img, trigger, trig_rng, sign_bbox=bbox)
    img = gaussian_blur(img, rng.uniform(*BLUR_SIGMA_RANGE))
    img = img + rng.normal(0.0, rng.uniform(*NOISE_SIGMA_RANGE), size=img.shape)
    return np.rint(np.clip(img, 0, 255)).astype(np.uint8), bbox


# -- manifest and generation --------------------------------------------------------

@dataclass
class Record:
    path: str
    label: int
    poisoned: bool
    seed: int


@dataclass
class DatasetManifest:
    classes: int
    per_class: int
    size: tuple[int, int]
    test_frac: float
    trigger: TriggerSpec
    seed: int
    paired: bool
    records: list[Record] = field(default_factory=list)
    dataset_hash: str = ""

    @property
    def train_count(self) -> int:
        return self.per_class - int(round(self.per_class * self.test_frac))

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "per_class": self.per_class,
            "size": list(self.size),
            "test_frac": self.test_frac,
            "trigger": self.trigger.to_dict(),
            "seed": self.seed,
            "paired": self.paired,
            "dataset_hash": self.dataset_hash,
            "parameter_ranges": {
                "rotation_deg": [-ROT_RANGE_DEG, ROT_RANGE_DEG],
                "scale": list(SCALE_RANGE),
                "blur_sigma": list(BLUR_SIGMA_RANGE),
                "noise_sigma": list(NOISE_SIGMA_RANGE),
            },
        }


@dataclass
class GenConfig:
    classes: int = 5
    per_class: int = 200
    size: tuple[int, int] = (32, 32)
    seed: int = 42
    test_frac: float = 0.2
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    paired: bool = False

    def validate(self):
        if self.classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.size[0] < 16 or self.size[1] < 16:
            raise ValidationError("image size must be at least 16x16")
        if not 0.0 < self.test_frac < 0.5:
            raise ValidationError("test fraction must be in (0, 0.5)")
        self.trigger.validate()
        if self.trigger.kind != "none":
            for c in (self.trigger.source_class, self.trigger.target_class):
                if not 0 <= c < self.classes:
                    raise ValidationError(f"trigger class {c} outside [0,{self.classes})")


def generate(cfg: GenConfig, out_dir) -> "Dataset":
    cfg.validate()
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    templates = class_templates(cfg.seed, cfg.classes)

    records: list[Record] = []
    hasher = hashlib.sha256()

    def emit(rec: Record, img: np.ndarray):
        write_ppm(root / rec.path, img)
        records.append(rec)
        hasher.update(img.tobytes())

    for c in range(cfg.classes):
        for i in range(cfg.per_class):
            seed = derive_seed(cfg.seed, c, i, "clean")
            img, _ = render_image(templates[c], cfg.size, seed)
            emit(Record(f"images/class{c:02d}_{i:05d}.ppm", c, False, seed), img)

    if cfg.trigger.kind != "none":
        cs = cfg.trigger.source_class
        n_poison = math.ceil(0.5 * cfg.per_class)
        for i in range(n_poison):
            if cfg.paired:
                seed = derive_seed(cfg.seed, cs, i, "clean")
            else:
                seed = derive_seed(cfg.seed, cs, i, "poison")
            img, _ = render_image(templates[cs], cfg.size, seed, trigger=cfg.trigger)
            emit(Record(f"images/poison{cs:02d}_{i:05d}.ppm", cs, True, seed), img)

    manifest = DatasetManifest(
        classes=cfg.classes, per_class=cfg.per_class, size=cfg.size,
        test_frac=cfg.test_frac, trigger=cfg.trigger, seed=cfg.seed,
        paired=cfg.paired, records=records,
    )
    csv_text = _manifest_csv(records)
    hasher.update(csv_text.encode())
    manifest.dataset_hash = hasher.hexdigest()
    (root / "manifest.csv").write_text(csv_text)
    (root / "dataset.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return Dataset(root, manifest)


def _manifest_csv(records: list[Record]) -> str:
    lines = ["path,label,poisoned,seed"]
    lines += [f"{r.path},{r.label},{int(r.poisoned)},{r.seed}" for r in records]
    return "\n".join(lines) + "\n"


class Dataset:
    """Loader over a generated dataset directory."""

    def __init__(self, root: Path, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._templates = class_templates(manifest.seed, manifest.classes)

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        meta_path = root / "dataset.json"
        if not meta_path.exists():
            raise ValidationError(f"{root} does not look like a dataset (missing dataset.json)")
        meta = json.loads(meta_path.read_text())
        records = []
        with open(root / "manifest.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(Record(row["path"], int(row["label"]),
                                      bool(int(row["poisoned"])), int(row["seed"])))
        manifest = DatasetManifest(
            classes=int(meta["classes"]), per_class=int(meta["per_class"]),
            size=tuple(meta["size"]), test_frac=float(meta["test_frac"]),
            trigger=TriggerSpec.from_dict(meta["trigger"]), seed=int(meta["seed"]),
            paired=bool(meta["paired"]), records=records,
            dataset_hash=meta.get("dataset_hash", ""),
        )
        return cls(root, manifest)

    def records(self, label: int | None = None, poisoned: bool | None = None) -> list[Record]:
        out = self.manifest.records
        if label is not None:
            out = [r for r in out if r.label == label]
        if poisoned is not None:
            out = [r for r in out if r.poisoned == poisoned]
        return list(out)

    def load_image(self, rec: Record) -> np.ndarray:
        return read_ppm(self.root / rec.path)

    @staticmethod
    def to_input(imgs: np.ndarray) -> np.ndarray:
        """uint8 (N,H,W,3) -> float32 (N,3,H,W), centered to [-0.5, 0.5]."""
        x = imgs.astype(np.float32) / 255.0 - 0.5
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def _stack(self, recs: list[Record]) -> np.ndarray:
        return np.stack([self.load_image(r) for r in recs])

    def _clean_index(self, rec: Record) -> int:
        # clean records are emitted per class in index order
        stem = Path(rec.path).stem
        return int(stem.rsplit("_", 1)[1])

    def training_arrays(self):
        """(train_x, train_y, test_x, test_y): per class the first
        train_count clean images train, the rest are held out; poisoned
        records all train under the trigger's target label."""
        cut = self.manifest.train_count
        train_recs, train_labels, test_recs, test_labels = [], [], [], []
        for r in self.records(poisoned=False):
            if self._clean_index(r) < cut:
                train_recs.append(r)
                train_labels.append(r.label)
            else:
                test_recs.append(r)
                test_labels.append(r.label)
        for r in self.records(poisoned=True):
            train_recs.append(r)
            train_labels.append(self.manifest.trigger.target_class)
        return (
            self.to_input(self._stack(train_recs)), np.asarray(train_labels),
            self.to_input(self._stack(test_recs)), np.asarray(test_labels),
        )

    def triggered_image(self, rec: Record) -> np.ndarray:
        """Re-render a clean record's composite with the manifest trigger
        injected (full pipeline, so blur/noise land on top of the trigger)."""
        trig = self.manifest.trigger
        if trig.kind == "none":
            raise ValidationError("dataset has no trigger to apply")
        img, _ = render_image(self._templates[rec.label], self.manifest.size, rec.seed,
                              trigger=trig)
        return img

    def triggered_eval_arrays(self):
        """Held-out source-class images with the trigger applied; used for
        attack-success evaluation."""
        cut = self.manifest.train_count
        cs = self.manifest.trigger.source_class
        recs = [r for r in self.records(label=cs, poisoned=False) if self._clean_index(r) >= cut]
        imgs = np.stack([self.triggered_image(r) for r in recs]) if recs else np.zeros((0,))
        labels = np.asarray([r.label for r in recs])
        return (self.to_input(imgs) if len(recs) else imgs), labels

    def class_images(self, label: int, limit: int | None = None, triggered: bool = False):
        """Clean images of one class as a uint8 stack (optionally with the
        manifest trigger re-applied), in deterministic index order."""
        recs = sorted(self.records(label=label, poisoned=False), key=self._clean_index)
        if limit is not None:
            recs = recs[:limit]
        if not recs:
            raise ValidationError(f"class {label} has no images")
        if triggered:
            return np.stack([self.triggered_image(r) for r in recs])
        return self._stack(recs)
