"""CULane-format ingestion, VP annotation files, segmentation targets, augmentation
and the seeded synthetic road-scene generator."""
from dataclasses import dataclass, field, replace
import json
import logging
import math
import multiprocessing
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import ImageDims, InvalidConfigError, Lane, Point2D, polyline_sq_distance, rasterize_lane
from .heatmap import VPAnnotation

logger = logging.getLogger(__name__)

CATEGORIES = (
    "Normal", "Crowded", "Night", "NoLine", "Shadow", "Arrow",
    "DazzleLight", "Curve", "Crossroad", "Synthetic",
)
MAX_LANES = 4
MAX_ROTATION_DEG = 15.0
CULANE_DIMS = ImageDims(1640, 590)
# reference width the 16 px training stroke is quoted at
NETWORK_REF_WIDTH = 976


class ParseError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    lanes: List[Lane]
    vp: VPAnnotation
    category: str = "Normal"
    seg: Optional[np.ndarray] = None  # (H, W) uint8 labels, 0 = background
    name: str = ""

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    @property
    def dims(self) -> ImageDims:
        h, w = self.image.shape[:2]
        return ImageDims(w, h)


@dataclass(frozen=True)
class SceneConfig:
    dims: ImageDims = ImageDims(128, 64)
    num_lanes: int = 4
    curvature: float = 0.0
    noise_std: float = 6.0
    seed: int = 0
    points_per_lane: int = 24

    def __post_init__(self):
        if not 2 <= self.num_lanes <= MAX_LANES:
            raise InvalidConfigError(f"num_lanes must be in [2, {MAX_LANES}], got {self.num_lanes}")
        if self.curvature < 0 or self.noise_std < 0:
            raise InvalidConfigError("curvature and noise_std must be >= 0")


def scaled_width(width_px: float, dims: ImageDims, ref_width: int = NETWORK_REF_WIDTH) -> int:
    """A pixel width quoted at ``ref_width`` columns, rescaled to ``dims``."""
    return max(1, int(round(width_px * dims.width / ref_width)))


# --------------------------------------------------------------------------- file formats

def load_culane_lanes(path) -> List[Lane]:
    lanes = []
    dropped = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) % 2:
                raise ParseError(path, lineno, f"odd number of coordinates ({len(tokens)})")
            try:
                values = [float(t) for t in tokens]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            pts = np.asarray(values).reshape(-1, 2)
            if len(pts) < 2:
                dropped += 1
                continue
            # annotation tools occasionally repeat a vertex
            keep = np.r_[True, np.hypot(*np.diff(pts, axis=0).T) > 1e-9]
            pts = pts[keep]
            if len(pts) < 2:
                dropped += 1
                continue
            lanes.append(Lane(pts))
    if dropped:
        logger.warning("%s: dropped %d lane(s) with fewer than 2 points", path, dropped)
    return lanes


def write_culane_lanes(path, lanes: Iterable[Lane]) -> None:
    with open(path, "w") as fh:
        for lane in lanes:
            fh.write(" ".join(f"{x:.3f} {y:.3f}" for x, y in lane.points) + "\n")


def load_vp_annotations(path) -> Dict[str, VPAnnotation]:
    """Parse ``relative/path.jpg x y visible`` records; ``#`` lines are comments."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(" ")
            if len(parts) != 4:
                raise ParseError(path, lineno, f"expected 4 fields, got {len(parts)}")
            rel, xs, ys, vis = parts
            try:
                x, y = float(xs), float(ys)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if vis not in ("0", "1"):
                raise ParseError(path, lineno, f"visible flag must be 0 or 1, got {vis!r}")
            if rel in out:
                logger.warning("%s:%d: duplicate VP record for %s, keeping the last", path, lineno, rel)
            out[rel] = VPAnnotation(Point2D(x, y), vis == "1")
    return out


def write_vp_annotations(path, records: Dict[str, VPAnnotation]) -> None:
    with open(path, "w") as fh:
        fh.write("# relative/path x y visible\n")
        for rel, vp in records.items():
            fh.write(f"{rel} {vp.point.x:.3f} {vp.point.y:.3f} {int(vp.visible)}\n")


def load_category_file(path) -> Dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2 or parts[1] not in CATEGORIES:
                raise ParseError(path, lineno, f"expected '<path> <category>', got {line.strip()!r}")
            out[parts[0]] = parts[1]
    return out


def lines_path_for(image_path) -> Path:
    image_path = Path(image_path)
    return image_path.with_name(image_path.stem + ".lines.txt")


# --------------------------------------------------------------------------- targets

def make_seg_target(lanes: Sequence[Lane], dims: ImageDims, stroke_width: int = 16) -> np.ndarray:
    """Label map: lane ``k`` (1-based, in list order) rasterized at ``stroke_width``; later lanes win overlaps."""
    if len(lanes) > MAX_LANES:
        raise ValueError(f"at most {MAX_LANES} lanes supported, got {len(lanes)}")
    seg = np.zeros(dims.shape, dtype=np.uint8)
    for k, lane in enumerate(lanes, 1):
        seg[rasterize_lane(lane, stroke_width, dims)] = k
    return seg


def order_lanes(lanes: Sequence[Lane]) -> List[Lane]:
    """Left-to-right by x at the lane's lowest point."""
    return sorted(lanes, key=lambda lane: lane.points[np.argmax(lane.points[:, 1]), 0])


# --------------------------------------------------------------------------- synthetic scenes

def _lane_polyline(bottom_x, vp, dims, bend, n):
    y_bottom = dims.height - 1.0
    t = np.linspace(0.0, 1.0, n)  # 0 at the bottom edge, 1 at the VP
    ys = y_bottom + t * (vp[1] - y_bottom)
    xs = bottom_x + t * (vp[0] - bottom_x) + bend * t * (1.0 - t)
    # top (VP) first so y increases along the lane
    return Lane(np.stack([xs, ys], axis=1)[::-1])


def _stroke_intensity(lane: Lane, dims: ImageDims, width: float) -> np.ndarray:
    ys, xs = np.mgrid[0:dims.height, 0:dims.width].astype(np.float64)
    d = np.sqrt(polyline_sq_distance(lane.points, xs, ys))
    return np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0)


def generate_synthetic_scene(cfg: SceneConfig, stroke_width: Optional[int] = None) -> Sample:
    """Seeded road scene with straight (or gently bent) lanes converging at a random VP."""
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims
    W, H = dims.width, dims.height
    vp = (rng.uniform(0.25 * W, 0.75 * W), rng.uniform(0.2 * H, 0.5 * H))

    spacing = rng.uniform(0.3, 0.5) * W
    center = vp[0] + rng.uniform(-0.15, 0.15) * W
    offsets = (np.arange(cfg.num_lanes) - (cfg.num_lanes - 1) / 2.0) * spacing
    bottoms = center + offsets
    bend = cfg.curvature * W * rng.choice([-1.0, 1.0]) if cfg.curvature > 0 else 0.0
    lanes = [_lane_polyline(bx, vp, dims, bend, cfg.points_per_lane) for bx in bottoms]

    # background: smooth texture, brighter sky above the horizon, dimmer road below
    ys = np.arange(H, dtype=np.float64)[:, None]
    sky = 1.0 / (1.0 + np.exp((ys - vp[1]) / 2.0))
    base = 35.0 + 55.0 * sky + rng.uniform(-10, 10)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, dims.shape), 2.0) * 25.0
    gray = np.broadcast_to(base, dims.shape) + texture

    render_w = max(1.5, 2.5 * W / 128.0)
    lane_ink = np.zeros(dims.shape)
    for lane in lanes:
        ink = _stroke_intensity(lane, dims, render_w)
        lane_ink = np.maximum(lane_ink, ink * rng.uniform(0.7, 1.0))
    gray = gray + lane_ink * (200.0 - gray)

    tint = rng.uniform(0.9, 1.1, size=3)
    rgb = gray[..., None] * tint[None, None, :]
    rgb = rgb + rng.normal(0.0, cfg.noise_std, rgb.shape)
    image = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)

    if stroke_width is None:
        stroke_width = scaled_width(16, dims)
    seg = make_seg_target(lanes, dims, stroke_width)
    return Sample(image, lanes, VPAnnotation(Point2D(*vp), True), "Synthetic", seg)


def scene_config_for_index(index: int, dims: ImageDims, seed: int, num_lanes=MAX_LANES,
                           max_curvature: float = 0.15, noise_std: float = 6.0) -> SceneConfig:
    """Per-sample config; depends only on ``(seed, index)``, never on worker layout."""
    ss = np.random.SeedSequence([seed, index])
    rng = np.random.default_rng(ss)
    if not isinstance(num_lanes, int):
        num_lanes = int(rng.choice(num_lanes))
    curvature = float(rng.uniform(0.0, max_curvature)) if max_curvature > 0 else 0.0
    scene_seed = int(ss.generate_state(1, dtype=np.uint64)[0])
    return SceneConfig(dims, num_lanes, curvature, noise_std, scene_seed)


# --------------------------------------------------------------------------- augmentation

def flip_sample(s: Sample) -> Sample:
    W = s.dims.width

    def reflect(p):
        p[:, 0] = (W - 1) - p[:, 0]
        return p

    lanes = [lane.transformed(reflect) for lane in s.lanes][::-1]
    seg = None
    if s.seg is not None:
        seg = s.seg[:, ::-1].copy()
        n = len(s.lanes)
        lut = np.arange(256, dtype=np.uint8)
        lut[1:n + 1] = np.arange(n, 0, -1)
        seg = lut[seg]
    vp = VPAnnotation(Point2D((W - 1) - s.vp.point.x, s.vp.point.y), s.vp.visible)
    return replace(s, image=s.image[:, ::-1].copy(), lanes=lanes, vp=vp, seg=seg)


def _rotation(angle_deg, dims):
    """Forward map ``p -> R (p - c) + c`` in (x, y) with center at the middle pixel."""
    a = math.radians(angle_deg)
    ca, sa = math.cos(a), math.sin(a)
    R = np.array([[ca, sa], [-sa, ca]])
    c = np.array([(dims.width - 1) / 2.0, (dims.height - 1) / 2.0])
    return R, c


def rotate_sample(s: Sample, angle_deg: float) -> Sample:
    dims = s.dims
    R, c = _rotation(angle_deg, dims)

    def fwd(p):
        return (p - c) @ R.T + c

    # output (row, col) -> input (row, col): inverse rotation in (y, x) order
    Rinv = R.T
    M = Rinv[::-1, ::-1]
    cyx = c[::-1]
    offset = cyx - M @ cyx
    image = np.stack([
        ndimage.affine_transform(s.image[..., ch].astype(np.float64), M, offset, order=1,
                                 mode="constant", cval=0.0)
        for ch in range(s.image.shape[2])
    ], axis=-1)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    seg = None
    if s.seg is not None:
        seg = ndimage.affine_transform(s.seg, M, offset, order=0, mode="constant", cval=0)
    lanes = [lane.transformed(fwd) for lane in s.lanes]
    p = fwd(np.array([s.vp.point]))[0]
    vp = VPAnnotation(Point2D(*p), s.vp.visible)
    if not vp.inside(dims):
        vp = VPAnnotation(vp.point, False)
    return replace(s, image=image, lanes=lanes, vp=vp, seg=seg)


def augment_sample(s: Sample, flip: bool, angle_deg: float) -> Sample:
    if abs(angle_deg) > MAX_ROTATION_DEG:
        raise ValueError(f"|angle_deg| must be <= {MAX_ROTATION_DEG}, got {angle_deg}")
    if flip:
        s = flip_sample(s)
    if angle_deg != 0:
        s = rotate_sample(s, angle_deg)
    return s


def resize_sample(s: Sample, target: ImageDims) -> Sample:
    dims = s.dims
    if target == dims:
        return replace(s)
    sx, sy = target.width / dims.width, target.height / dims.height

    def scale(p):
        p[:, 0] *= sx
        p[:, 1] *= sy
        return p

    size = (target.width, target.height)
    image = np.asarray(Image.fromarray(s.image).resize(size, Image.BILINEAR))
    seg = None
    if s.seg is not None:
        seg = np.asarray(Image.fromarray(s.seg).resize(size, Image.NEAREST))
    lanes = [lane.transformed(scale) for lane in s.lanes]
    vp = VPAnnotation(Point2D(s.vp.point.x * sx, s.vp.point.y * sy), s.vp.visible)
    return replace(s, image=image, lanes=lanes, vp=vp, seg=seg)


# --------------------------------------------------------------------------- datasets on disk

class LaneDataset:
    """In-memory list of samples sharing one image size."""

    def __init__(self, samples: List[Sample]):
        if samples:
            dims = {s.dims for s in samples}
            if len(dims) != 1:
                raise ValueError(f"samples have mixed dims: {sorted((d.width, d.height) for d in dims)}")
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    @property
    def dims(self) -> ImageDims:
        return self.samples[0].dims

    def subset(self, indices) -> "LaneDataset":
        return LaneDataset([self.samples[i] for i in indices])


@dataclass
class SyntheticSpec:
    dims: ImageDims = ImageDims(128, 64)
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    num_lanes: int = 4
    max_curvature: float = 0.15
    noise_std: float = 6.0
    stroke_width: Optional[int] = None
    extra: dict = field(default_factory=dict)


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_scene(args):
    root, i, spec = args
    cfg = scene_config_for_index(i, spec.dims, spec.seed, spec.num_lanes,
                                 spec.max_curvature, spec.noise_std)
    s = generate_synthetic_scene(cfg, spec.stroke_width)
    rel = f"images/{i:05d}.png"
    Image.fromarray(s.image).save(root / rel, optimize=False)
    write_culane_lanes(lines_path_for(root / rel), s.lanes)
    return rel, s.vp, s.category


def write_synthetic_dataset(root, spec: SyntheticSpec, workers: int = 1) -> Path:
    """Render a CULane-style synthetic dataset: images, ``.lines.txt`` files, ``vp.txt``,
    ``train.txt`` / ``test.txt`` lists and ``categories.txt``.

    Every scene is seeded by its index, so the output does not depend on ``workers``.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    vps = {}
    lists = {"train": [], "test": []}
    cats = []
    total = spec.n_train + spec.n_test
    jobs = [(root, i, spec) for i in range(total)]
    if workers > 1:
        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            results = pool.map(_write_scene, jobs, chunksize=32)
    else:
        results = map(_write_scene, jobs)
    for i, (rel, vp, category) in enumerate(results):
        vps[rel] = vp
        lists["train" if i < spec.n_train else "test"].append(rel)
        cats.append(f"{rel} {category}")
    write_vp_annotations(root / "vp.txt", vps)
    for split, names in lists.items():
        _atomic_write_text(root / f"{split}.txt", "".join(n + "\n" for n in names))
    _atomic_write_text(root / "categories.txt", "".join(c + "\n" for c in cats))
    meta = {
        "dims": [spec.dims.width, spec.dims.height], "n_train": spec.n_train, "n_test": spec.n_test,
        "seed": spec.seed, "num_lanes": spec.num_lanes, "max_curvature": spec.max_curvature,
        "noise_std": spec.noise_std, "stroke_width": spec.stroke_width,
    }
    _atomic_write_text(root / "manifest.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def load_split(root, split: str = "train", stroke_width: Optional[int] = None,
               vp_file: str = "vp.txt", category_file: str = "categories.txt",
               strict: bool = False) -> LaneDataset:
    """Load the images listed in ``<root>/<split>.txt`` (or an explicit list-file path).

    Images lacking a lanes file or VP record are skipped (or raise if ``strict``);
    the skip count is stored on the returned dataset as ``skipped``.
    """
    root = Path(root)
    list_file = Path(split) if Path(split).suffix == ".txt" else root / f"{split}.txt"
    names = [ln.strip().lstrip("/") for ln in list_file.read_text().splitlines() if ln.strip()]
    vps = load_vp_annotations(root / vp_file) if (root / vp_file).exists() else {}
    cats = load_category_file(root / category_file) if (root / category_file).exists() else {}
    samples, skipped = [], 0
    for rel in names:
        img_path = root / rel
        lines = lines_path_for(img_path)
        if not img_path.exists() or not lines.exists() or rel not in vps:
            if strict:
                raise FileNotFoundError(f"missing image, lanes or VP record for {rel}")
            skipped += 1
            continue
        image = np.asarray(Image.open(img_path).convert("RGB"))
        lanes = order_lanes(load_culane_lanes(lines))[:MAX_LANES]
        dims = ImageDims(image.shape[1], image.shape[0])
        sw = stroke_width if stroke_width is not None else scaled_width(16, dims)
        seg = make_seg_target(lanes, dims, sw)
        samples.append(Sample(image, lanes, vps[rel], cats.get(rel, "Normal"), seg, rel))
    ds = LaneDataset(samples)
    ds.skipped = skipped
    return ds
