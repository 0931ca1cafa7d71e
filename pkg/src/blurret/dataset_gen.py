"""Synthetic retrieval dataset: procedural sprites moving over procedural backgrounds.

Every object gets a set of linear trajectories; each trajectory is cut into
equal sub-segments and an image is rendered for a window of up to ``max_k``
consecutive sub-segments (``k = 0`` is the sharp image at the trajectory's
midpoint). Windows are chosen per trajectory to keep the blur-level histogram
balanced.
"""

from __future__ import annotations

import colorsys
import dataclasses
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from blurret import blur_synth
from blurret.blur_synth import BlurAnnotation, Sprite
from blurret.errors import (
    DomainError,
    EmptyErodedMask,
    GenerationFailure,
    InsufficientObjects,
    RecordRejected,
)

log = logging.getLogger(__name__)

SHAPE_FAMILIES = ("disk", "rectangle", "triangle", "ellipse", "diamond", "cross")
# thin silhouettes are enlarged so that a 3-pixel erosion leaves a usable core
_FAMILY_SCALE = {"triangle": 1.45, "diamond": 1.35, "ellipse": 1.1}
SPLITS = ("train", "val", "test-query", "test-database", "distractor", "unassigned")
MANIFEST_FIELDS = (
    "path", "object_id", "category_id", "trajectory_id",
    "bs", "bl", "bbox", "is_sharp", "split",
)
DISTRACTOR_ID_OFFSET = 1_000_000
# longest trajectory as a fraction of min(H, W); the exposure window spans at
# most max_k / n_subsegments of it
MAX_LENGTH_FRAC = 1.0
_SPRITE_STREAM = 1
_RECORD_STREAM = 2
_DISTRACTOR_STREAM = 3


@dataclass(frozen=True)
class TrajectorySpec:
    full_start: tuple[float, float]
    full_end: tuple[float, float]
    n_subsegments: int = 23
    selected_start_index: int = 0
    selected_count: int = 0

    def point(self, t):
        s = np.asarray(self.full_start, dtype=np.float64)
        e = np.asarray(self.full_end, dtype=np.float64)
        return s + t * (e - s)

    @property
    def midpoint(self):
        return self.point(0.5)

    @property
    def length(self):
        return float(np.hypot(*np.subtract(self.full_end, self.full_start)))

    def window(self, k, start_index):
        return dataclasses.replace(self, selected_start_index=start_index, selected_count=k)


@dataclass
class ImageRecord:
    path: str
    object_id: int
    category_id: int
    trajectory_id: int
    bs: float
    bl: int
    bbox: tuple[float, float, float, float]
    is_sharp: bool
    split: str = "unassigned"

    @property
    def id(self) -> str:
        return Path(self.path).stem

    @property
    def annotation(self) -> BlurAnnotation:
        return BlurAnnotation(bs=self.bs, bl=self.bl, bbox=tuple(self.bbox))

    def to_json(self) -> str:
        row = dataclasses.asdict(self)
        row["bbox"] = list(row["bbox"])
        return json.dumps({k: row[k] for k in MANIFEST_FIELDS})

    @classmethod
    def from_json(cls, line: str) -> "ImageRecord":
        row = json.loads(line)
        if set(row) != set(MANIFEST_FIELDS):
            raise ValueError(f"manifest row has fields {sorted(row)}")
        row["bbox"] = tuple(row["bbox"])
        return cls(**row)


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    seed: int
    root: Path | None = None
    n_candidates: int = 0

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def bl_histogram(self, split=None):
        recs = self.records if split is None else self.split(split)
        return dict(sorted(Counter(r.bl for r in recs).items()))

    def validate(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate record ids")
        for r in self.records:
            if r.split not in SPLITS:
                raise ValueError(f"unknown split {r.split!r}")
            if r.bl < 1 or r.bl != blur_synth.blur_level(r.bs):
                raise ValueError(f"{r.id}: bl {r.bl} inconsistent with bs {r.bs}")
            x, y, w, h = r.bbox
            if not (0 <= x <= 1 and 0 <= y <= 1 and 0 <= w <= 1 and 0 <= h <= 1):
                raise ValueError(f"{r.id}: bbox {r.bbox} not normalized")
            if x + w > 1 + 1e-9 or y + h > 1 + 1e-9:
                raise ValueError(f"{r.id}: bbox {r.bbox} leaves the frame")
        objs = {s: {r.object_id for r in self.records if r.split in group}
                for s, group in (("train", {"train"}), ("val", {"val"}),
                                 ("test", {"test-query", "test-database"}))}
        if objs["train"] & objs["val"] or objs["train"] & objs["test"] or objs["val"] & objs["test"]:
            raise ValueError("object sets of train/val/test overlap")
        queries = {r.id for r in self.split("test-query")}
        if queries & {r.id for r in self.split("test-database")}:
            raise ValueError("query records leaked into the database")
        return self

    def write(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")

    @classmethod
    def read(cls, path, seed=-1):
        path = Path(path)
        with open(path) as fh:
            records = [ImageRecord.from_json(line) for line in fh if line.strip()]
        return cls(records=records, seed=seed, root=path.parent)


@dataclass
class DataConfig:
    n_categories: int = 6
    objects_per_category: int = 7
    trajectories_per_object: int = 8
    images_per_trajectory: int = 6
    resolution: tuple[int, int] = (64, 64)
    sprite_frac: float = 0.25
    sprite_jitter: float = 0.1
    max_length_frac: float = MAX_LENGTH_FRAC
    min_length_frac: float = 0.5
    n_subsegments: int = 23
    max_k: int = 10
    psf_samples: int = 64
    erosion_radius: int = 3
    min_area_frac: float = 0.015
    min_endpoint_iou: float = 0.20
    max_bl: int = 6
    balance_ratio: float | None = 2.0
    split_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    queries_per_test_object: int = 2
    assign_splits: bool = True
    n_distractor_objects: int = 0
    distractor_trajectories: int = 4
    background_dir: str | None = None
    max_retries: int = 50

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        for key in ("resolution", "split_ratios"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


# -- sprites and backgrounds -------------------------------------------------

def _value_noise(rng, shape, cells):
    coarse = rng.random((cells, cells))
    zoom = (shape[0] / cells, shape[1] / cells)
    return np.clip(ndimage.zoom(coarse, zoom, order=1, mode="nearest")[: shape[0], : shape[1]], 0, 1)


def _vivid(rng):
    """Random saturated RGB colour."""
    return np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.6, 1.0), rng.uniform(0.5, 1.0)))


def _shape_mask(family, size, aspect):
    h = w = size
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    dy, dx = (yy - cy) / (h / 2), (xx - cx) / (w / 2)
    if family == "disk":
        m = dx**2 + dy**2 <= 1.0
    elif family == "rectangle":
        m = (np.abs(dx) <= 1.0) & (np.abs(dy) <= aspect)
    elif family == "triangle":
        m = (dy <= 1.0) & (np.abs(dx) <= (dy + 1.0) / 2.0)
    elif family == "ellipse":
        m = dx**2 + (dy / aspect) ** 2 <= 1.0
    elif family == "diamond":
        m = np.abs(dx) + np.abs(dy) / max(aspect, 0.5) <= 1.0
    elif family == "cross":
        arm = max(0.5, aspect * 0.7)
        m = ((np.abs(dx) <= arm) & (np.abs(dy) <= 1.0)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= 1.0))
    else:
        raise DomainError(f"unknown shape family {family!r}")
    return m.astype(np.float64)


def category_shape(category_id):
    """Shape family and aspect ratio shared by every object of a category."""
    family = SHAPE_FAMILIES[category_id % len(SHAPE_FAMILIES)]
    aspect = 0.75 + 0.2 * ((category_id // len(SHAPE_FAMILIES)) % 3) / 2
    return family, aspect


def sprite_rng(seed, object_id):
    return np.random.default_rng([seed, _SPRITE_STREAM, object_id])


def make_sprite(object_id, category_id, rng, size=14, jitter=0.0):
    """Procedural object: the category picks the silhouette, the object its texture."""
    del object_id  # identity enters only through the rng stream
    family, aspect = category_shape(category_id)
    scale = 1.0 + jitter * (2 * rng.random() - 1)
    side = max(8, int(round(size * scale * _FAMILY_SCALE.get(family, 1.0))))
    mask = _shape_mask(family, side, aspect)

    base, accent = _vivid(rng), _vivid(rng)
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 7.0)
    yy, xx = np.mgrid[:side, :side].astype(np.float64)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period)
    noise = _value_noise(rng, (side, side), 4)
    rgb = base[None, None] * (1 - stripes[..., None]) + accent[None, None] * stripes[..., None]
    rgb = np.clip(rgb + 0.25 * (noise[..., None] - 0.5), 0.0, 1.0)
    return Sprite(rgb=rgb, mask=mask)


def _load_backgrounds(directory):
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
    if not paths:
        raise GenerationFailure(f"no background images in {directory}")
    return paths


def make_background(rng, resolution, library=None):
    h, w = resolution
    if library:
        path = library[rng.integers(len(library))]
        with Image.open(path) as im:
            im = im.convert("RGB")
            scale = max(h / im.height, w / im.width)
            im = im.resize((max(w, round(im.width * scale)), max(h, round(im.height * scale))))
            top = rng.integers(im.height - h + 1)
            left = rng.integers(im.width - w + 1)
            return np.asarray(im.crop((left, top, left + w, top + h)), dtype=np.float64) / 255.0
    # muted colours so that objects, not backgrounds, carry the saturated hues
    c0, c1 = (0.5 * rng.random(3) + 0.5 * rng.random() for _ in range(2))
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    ramp = (xx * np.cos(angle) + yy * np.sin(angle)) / max(h, w)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    bg = c0[None, None] * (1 - ramp[..., None]) + c1[None, None] * ramp[..., None]
    noise = _value_noise(rng, (h, w), int(rng.integers(4, 12)))
    return np.clip(bg + 0.25 * (noise[..., None] - 0.5), 0.0, 1.0)


# -- trajectories and records ------------------------------------------------

def sample_trajectory(rng, frame, sprite_extent, max_length=None, min_length=0.0,
                      n_subsegments=23, max_retries=1000):
    """Random linear trajectory of the sprite's centre, kept inside the frame.

    The midpoint is uniform over positions where the whole sprite fits, the
    direction is uniform and the length uniform in ``[min_length, max_length]``.
    """
    h, w = frame
    sh, sw = sprite_extent
    if max_length is None:
        max_length = MAX_LENGTH_FRAC * min(h, w)
    min_length = min(min_length, max_length)
    lo_r, hi_r = sh / 2, h - 1 - sh / 2
    lo_c, hi_c = sw / 2, w - 1 - sw / 2
    if lo_r > hi_r or lo_c > hi_c:
        raise GenerationFailure(f"sprite {sprite_extent} does not fit in frame {frame}")
    for _ in range(max_retries):
        mid = np.array([rng.uniform(lo_r, hi_r), rng.uniform(lo_c, hi_c)])
        length = rng.uniform(min_length, max_length)
        theta = rng.uniform(0, 2 * np.pi)
        half = 0.5 * length * np.array([np.sin(theta), np.cos(theta)])
        start, end = mid - half, mid + half
        if all(0 <= p[0] <= h - 1 and 0 <= p[1] <= w - 1 for p in (start, end)):
            return TrajectorySpec(tuple(start), tuple(end), n_subsegments)
    raise GenerationFailure("could not sample a trajectory inside the frame")


def _sprite_origin(sprite):
    sh, sw = sprite.extent
    return (-(sh // 2), -(sw // 2))


def _visible_silhouette(sprite, point, frame):
    """Sprite-aligned mask of the part of the sprite inside the frame at ``point``."""
    h, w = frame
    sh, sw = sprite.extent
    top = int(round(point[0])) - sh // 2
    left = int(round(point[1])) - sw // 2
    rows = np.arange(sh)[:, None] + top
    cols = np.arange(sw)[None, :] + left
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    return (sprite.mask > 0) & inside


def realize_record(sprite, background, traj, k, psf_samples=64, erosion_radius=3,
                   min_area_frac=0.015, min_endpoint_iou=0.20, max_k=10):
    """Render one image of ``sprite`` moving over the window of ``k`` sub-segments.

    The endpoint filter compares the silhouettes visible at the two ends of
    the exposure window, registered to each other, so it rejects objects that
    are cut off by the frame at one end but not motion itself.
    """
    if not 0 <= k <= max_k:
        raise DomainError(f"k={k} outside [0, {max_k}]")
    frame = background.shape[:2]
    origin = _sprite_origin(sprite)
    if k == 0:
        centre = np.round(traj.midpoint).astype(int)
        psf = blur_synth.delta_psf(tuple(centre), frame)
        a = b = centre
    else:
        s = traj.selected_start_index
        if not 0 <= s <= traj.n_subsegments - k:
            raise DomainError(f"window [{s}, {s + k}) exceeds {traj.n_subsegments} sub-segments")
        a = traj.point(s / traj.n_subsegments)
        b = traj.point((s + k) / traj.n_subsegments)
        psf = blur_synth.rasterize_linear_psf(tuple(a), tuple(b), frame, psf_samples)
    result = blur_synth.composite(psf, sprite, origin, background)

    ok = blur_synth.accept_sample(
        _visible_silhouette(sprite, a, frame),
        _visible_silhouette(sprite, b, frame),
        result.alpha,
        min_area_frac=min_area_frac,
        min_endpoint_iou=min_endpoint_iou,
    )
    if not ok:
        raise RecordRejected("sample failed the area or endpoint filter")
    try:
        annotation = blur_synth.annotate(result.alpha, erosion_radius)
    except EmptyErodedMask as exc:
        raise RecordRejected(str(exc)) from exc
    return result, annotation


# -- splits ------------------------------------------------------------------

def split_counts(n, ratios=(0.70, 0.15, 0.15)):
    """Objects per split for a category of ``n`` objects.

    Train and val are rounded down and the remainder goes to test; every split
    keeps at least one object.
    """
    n_train = min(int(np.floor(ratios[0] * n)), n - 2)
    n_val = max(1, int(np.floor(ratios[1] * n)))
    n_train = max(1, n_train)
    n_test = n - n_train - n_val
    if n_train < 1 or n_test < 1:
        raise InsufficientObjects(f"cannot split {n} objects into train/val/test")
    return n_train, n_val, n_test


def split_dataset(manifest, ratios=(0.70, 0.15, 0.15), queries_per_test_object=20, seed=None):
    seed = manifest.seed if seed is None else seed
    rng = np.random.default_rng([seed, 7919])
    by_cat = {}
    for r in manifest.records:
        if r.split == "distractor":
            continue
        by_cat.setdefault(r.category_id, set()).add(r.object_id)

    assignment = {}
    for cat in sorted(by_cat):
        objs = sorted(by_cat[cat])
        if len(objs) < 3:
            raise InsufficientObjects(f"category {cat} has only {len(objs)} objects")
        n_train, n_val, _ = split_counts(len(objs), ratios)
        order = rng.permutation(len(objs))
        for rank, idx in enumerate(order):
            if rank < n_train:
                assignment[objs[idx]] = "train"
            elif rank < n_train + n_val:
                assignment[objs[idx]] = "val"
            else:
                assignment[objs[idx]] = "test"

    query_trajs = {}
    for obj, part in sorted(assignment.items()):
        if part != "test":
            continue
        trajs = sorted({r.trajectory_id for r in manifest.records if r.object_id == obj})
        n_q = min(queries_per_test_object, len(trajs) - 1)
        chosen = rng.choice(len(trajs), size=max(n_q, 0), replace=False)
        query_trajs[obj] = {trajs[i] for i in chosen}

    records = []
    for r in manifest.records:
        if r.split == "distractor":
            records.append(r)
            continue
        part = assignment[r.object_id]
        if part == "test":
            part = "test-query" if r.trajectory_id in query_trajs[r.object_id] else "test-database"
        records.append(dataclasses.replace(r, split=part))
    return dataclasses.replace(manifest, records=records)


# -- whole dataset -----------------------------------------------------------

def _record_name(object_id, trajectory_id, variant):
    return f"o{object_id:07d}_t{trajectory_id:03d}_v{variant:02d}"


def _write_record(out_dir, name, result):
    rgba = np.concatenate([result.image, result.alpha[..., None]], axis=-1)
    rgba = np.clip(np.round(rgba * 255.0), 0, 255).astype(np.uint8)
    rel = Path("images") / f"{name}.png"
    Image.fromarray(rgba, mode="RGBA").save(out_dir / rel)
    np.savez_compressed(out_dir / "alpha" / f"{name}.npz", alpha=result.alpha)
    return rel.as_posix()


def alpha_path(root, record):
    return Path(root) / "alpha" / f"{record.id}.npz"


def _object_records(cfg, seed, object_id, category_id, n_traj, out_dir, histogram, stream, backgrounds):
    """Render all images of one object; ``histogram`` is the running BL count used for balancing."""
    h, w = cfg.resolution
    size = max(8, int(round(cfg.sprite_frac * min(h, w))))
    sprite = make_sprite(object_id, category_id, sprite_rng(seed, object_id), size, cfg.sprite_jitter)
    max_len = cfg.max_length_frac * min(h, w)
    opts = dict(psf_samples=cfg.psf_samples, erosion_radius=cfg.erosion_radius,
                min_area_frac=cfg.min_area_frac, min_endpoint_iou=cfg.min_endpoint_iou,
                max_k=cfg.max_k)
    records = []
    for t in range(n_traj):
        rng = np.random.default_rng([seed, stream, object_id, t])
        for _attempt in range(cfg.max_retries):
            traj = sample_trajectory(rng, (h, w), sprite.extent, max_len,
                                     cfg.min_length_frac * max_len, cfg.n_subsegments)
            try:
                sharp = realize_record(sprite, make_background(rng, (h, w), backgrounds), traj, 0, **opts)
            except RecordRejected:
                continue
            break
        else:
            raise GenerationFailure(f"object {object_id}: no acceptable trajectory")

        chosen = [(0, traj, sharp)]
        candidates = []
        for k in range(1, cfg.max_k + 1):
            start = int(rng.integers(0, cfg.n_subsegments - k + 1))
            win = traj.window(k, start)
            try:
                res, ann = realize_record(sprite, make_background(rng, (h, w), backgrounds), win, k, **opts)
            except RecordRejected:
                continue
            if ann.bl <= cfg.max_bl:
                candidates.append((k, win, (res, ann)))
        histogram[1] += 1
        # balance: repeatedly take the candidate whose level is currently rarest
        while len(chosen) < cfg.images_per_trajectory and candidates:
            counts = [histogram[c[2][1].bl] for c in candidates]
            best = int(np.argmin(counts))
            k, win, pair = candidates.pop(best)
            histogram[pair[1].bl] += 1
            chosen.append((k, win, pair))

        for variant, (k, win, (res, ann)) in enumerate(sorted(chosen, key=lambda c: c[0])):
            name = _record_name(object_id, t, variant)
            path = _write_record(out_dir, name, res)
            records.append(ImageRecord(
                path=path, object_id=object_id, category_id=category_id, trajectory_id=t,
                bs=float(ann.bs), bl=int(ann.bl), bbox=tuple(float(v) for v in ann.bbox),
                is_sharp=(k == 0),
            ))
    return records


def build_dataset(config, seed, out_dir):
    """Generate images, alpha maps and ``manifest.jsonl`` under ``out_dir``."""
    cfg = config
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "alpha").mkdir(parents=True, exist_ok=True)
    backgrounds = _load_backgrounds(cfg.background_dir) if cfg.background_dir else None

    histogram = Counter()
    records = []
    object_id = 0
    for cat in range(cfg.n_categories):
        for _ in range(cfg.objects_per_category):
            records += _object_records(cfg, seed, object_id, cat, cfg.trajectories_per_object,
                                       out_dir, histogram, _RECORD_STREAM, backgrounds)
            object_id += 1
    distractor_hist = Counter()
    for i in range(cfg.n_distractor_objects):
        oid = DISTRACTOR_ID_OFFSET + i
        recs = _object_records(cfg, seed, oid, i % cfg.n_categories, cfg.distractor_trajectories,
                               out_dir, distractor_hist, _DISTRACTOR_STREAM, backgrounds)
        records += [dataclasses.replace(r, split="distractor") for r in recs]

    n_candidates = cfg.n_categories * cfg.objects_per_category * cfg.trajectories_per_object * cfg.images_per_trajectory
    manifest = DatasetManifest(records=records, seed=seed, root=out_dir, n_candidates=n_candidates)
    if cfg.assign_splits:
        manifest = split_dataset(manifest, cfg.split_ratios, cfg.queries_per_test_object)
        if cfg.balance_ratio is not None:
            check_balance(manifest.bl_histogram("train"), cfg.balance_ratio, cfg.max_bl)
    manifest.validate()
    manifest.write(out_dir / "manifest.jsonl")
    log.info("wrote %d records to %s", len(records), out_dir)
    return manifest


def check_balance(histogram, ratio, max_bl=6):
    counts = [histogram.get(bl, 0) for bl in range(1, max_bl + 1)]
    if min(counts) == 0 or max(counts) > ratio * min(counts):
        raise GenerationFailure(f"blur levels unbalanced: {dict(zip(range(1, max_bl + 1), counts))}")


def load_alpha(root, record):
    with np.load(alpha_path(root, record)) as z:
        return z["alpha"]


def load_images(root, records):
    """RGB images of ``records`` as a float32 ``(n, 3, H, W)`` array in [0, 1]."""
    out = []
    for r in records:
        with Image.open(os.path.join(root, r.path)) as im:
            out.append(np.asarray(im.convert("RGBA"), dtype=np.float32)[..., :3] / 255.0)
    return np.stack(out).transpose(0, 3, 1, 2).copy()
