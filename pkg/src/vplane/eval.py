"""Lane F1 evaluation (per-category, Crossroad reports FP only), VP error histograms,
row-anchor lane readout and report rendering."""
from dataclasses import dataclass, field
import json
import os
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .dataset import CATEGORIES, LaneDataset, Sample, resize_sample
from .geometry import ImageDims, Lane, MatchConfig, Point2D, match_lanes
from .heatmap import NORM_DIST_CAP, HeatmapConfig, VPAnnotation, decode_vp, norm_dist

BIN_WIDTH = 0.01
N_BINS = 11
BIN_EDGES = np.round(np.arange(N_BINS) * BIN_WIDTH, 2)
CROSSROAD = "Crossroad"


@dataclass(frozen=True)
class EvalConfig:
    line_width: int = 30
    iou_threshold: float = 0.5
    exist_threshold: float = 0.5
    point_threshold: float = 0.3
    row_count: int = 18

    @property
    def match(self) -> MatchConfig:
        return MatchConfig(self.line_width, self.iou_threshold)


# --------------------------------------------------------------------------- lane readout

def extract_lanes_from_seg(seg_probs, exist_threshold: float = 0.5, row_count: int = 18,
                           point_threshold: float = 0.3) -> List[Lane]:
    """Read one polyline per lane channel from a ``(K + 1, H, W)`` probability map.

    A channel is a lane if the mean of its per-row maxima over the bottom two
    thirds of the image reaches ``exist_threshold``; it then contributes
    ``(argmax column, row)`` at each of ``row_count`` evenly spaced rows there
    whose peak probability is at least ``point_threshold``.
    """
    p = np.asarray(seg_probs, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"expected (K+1, H, W) probabilities, got shape {p.shape}")
    if np.abs(p.sum(axis=0) - 1.0).max() > 1e-5:
        raise ValueError("probabilities must sum to 1 over channels")
    H = p.shape[1]
    top = int(np.ceil(H / 3.0))
    band = p[1:, top:, :]
    row_max = band.max(axis=2)           # (K, rows)
    row_arg = band.argmax(axis=2)
    rows = np.unique(np.round(np.linspace(top, H - 1, row_count)).astype(int)) - top
    lanes = []
    for k in range(band.shape[0]):
        if row_max[k].mean() < exist_threshold:
            continue
        keep = rows[row_max[k, rows] >= point_threshold]
        if len(keep) < 2:
            continue
        pts = np.stack([row_arg[k, keep], keep + top], axis=1).astype(np.float64)
        lanes.append(Lane(pts))
    return lanes


# --------------------------------------------------------------------------- accumulation

@dataclass
class CategoryReport:
    category: str
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_images: int = 0

    @property
    def fp_only(self) -> bool:
        return self.category == CROSSROAD

    @property
    def precision(self) -> Optional[float]:
        if self.fp_only:
            return None
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> Optional[float]:
        if self.fp_only:
            return None
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> Optional[float]:
        if self.fp_only:
            return None
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def merge(self, other: "CategoryReport") -> "CategoryReport":
        return CategoryReport(self.category, self.tp + other.tp, self.fp + other.fp,
                              self.fn + other.fn, self.n_images + other.n_images)

    def to_dict(self) -> dict:
        d = {"category": self.category, "fp": self.fp, "n_images": self.n_images}
        if not self.fp_only:
            d.update(tp=self.tp, fn=self.fn, precision=self.precision, recall=self.recall, f1=self.f1)
        return d


@dataclass
class NormDistHistogram:
    bins: List[int] = field(default_factory=lambda: [0] * N_BINS)
    total: float = 0.0   # sum of capped values
    n: int = 0

    @property
    def mean(self) -> float:
        return self.total / self.n if self.n else 0.0

    def add(self, value: float) -> None:
        value = min(value, NORM_DIST_CAP)
        self.bins[bin_index(value)] += 1
        self.total += value
        self.n += 1

    def merge(self, other: "NormDistHistogram") -> "NormDistHistogram":
        return NormDistHistogram([a + b for a, b in zip(self.bins, other.bins)],
                                 self.total + other.total, self.n + other.n)

    def fractions(self) -> List[float]:
        return [b / self.n if self.n else 0.0 for b in self.bins]

    def to_dict(self) -> dict:
        return {"bins": list(self.bins), "mean": self.mean, "n": self.n,
                "edges": [float(e) for e in BIN_EDGES]}

    def to_text(self) -> str:
        return "".join(f"{edge:.2f} {count} {frac:.6f}\n"
                       for edge, count, frac in zip(BIN_EDGES, self.bins, self.fractions()))


def bin_index(value: float) -> int:
    """Bins ``[0, .01), [.01, .02), ..., [.09, .1)`` then ``[.1, 1]``."""
    if value < 0:
        raise ValueError("NormDist cannot be negative")
    return int(np.searchsorted(BIN_EDGES, value, side="right")) - 1


@dataclass
class EvalReport:
    categories: Dict[str, CategoryReport] = field(default_factory=dict)
    vp_histogram: NormDistHistogram = field(default_factory=NormDistHistogram)
    skipped: int = 0

    @property
    def total(self) -> CategoryReport:
        out = CategoryReport("Total")
        for name, rep in self.categories.items():
            if name != CROSSROAD:
                out = out.merge(rep)
        out.category = "Total"
        return out

    def merge(self, other: "EvalReport") -> "EvalReport":
        cats = dict(self.categories)
        for name, rep in other.categories.items():
            cats[name] = cats[name].merge(rep) if name in cats else rep
        return EvalReport(cats, self.vp_histogram.merge(other.vp_histogram), self.skipped + other.skipped)

    def ordered_categories(self) -> List[CategoryReport]:
        return [self.categories[c] for c in CATEGORIES if c in self.categories]

    def to_dict(self) -> dict:
        return {
            "categories": [r.to_dict() for r in self.ordered_categories()],
            "total": self.total.to_dict(),
            "vp_histogram": self.vp_histogram.to_dict(),
            "skipped": self.skipped,
        }


def evaluate_image(pred_lanes: Sequence[Lane], gt_lanes: Sequence[Lane], category: str,
                   dims: ImageDims, cfg: MatchConfig) -> CategoryReport:
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if category == CROSSROAD:
        # crossroad frames carry no lanes to find; every prediction is a false positive
        return CategoryReport(category, 0, len(pred_lanes), 0, 1)
    tp, fp, fn, _ = match_lanes(pred_lanes, gt_lanes, cfg, dims)
    return CategoryReport(category, tp, fp, fn, 1)


def evaluate_lane_f1(preds: Sequence[Sequence[Lane]], gts: Sequence[Sequence[Lane]],
                     categories: Sequence[str], dims, cfg: MatchConfig = MatchConfig()) -> EvalReport:
    """Accumulate matches per category. ``dims`` is one ImageDims or one per image."""
    if not len(preds) == len(gts) == len(categories):
        raise ValueError("preds, gts and categories must align")
    dims_list = dims if isinstance(dims, (list, tuple)) else [dims] * len(preds)
    report = EvalReport()
    for p, g, c, d in zip(preds, gts, categories, dims_list):
        rep = evaluate_image(p, g, c, d, cfg)
        report.categories[c] = report.categories[c].merge(rep) if c in report.categories else rep
    return report


def vp_error_histogram(preds: Sequence, gts: Sequence[VPAnnotation], dims) -> NormDistHistogram:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} annotations")
    dims_list = dims if isinstance(dims, (list, tuple)) else [dims] * len(preds)
    hist = NormDistHistogram()
    for p, g, d in zip(preds, gts, dims_list):
        if not g.visible:
            continue
        hist.add(norm_dist(p, g.point, d))
    return hist


# --------------------------------------------------------------------------- prediction

@dataclass
class Prediction:
    lanes: List[Lane]
    vp: Point2D
    vp_confidence: float = 1.0
    seg_probs: Optional[np.ndarray] = None
    heatmap: Optional[np.ndarray] = None


Predictor = Callable[[Sequence[Sample]], List[Prediction]]


def oracle_predictor(samples: Sequence[Sample]) -> List[Prediction]:
    """Echo the ground truth; closes every metric."""
    return [Prediction(list(s.lanes), s.vp.point) for s in samples]


def model_predictor(model, cfg: EvalConfig = EvalConfig(), keep_maps: bool = False) -> Predictor:
    """Wrap a network: resize to its input size, run inference, read out lanes and VP,
    and map the results back to each sample's native resolution."""
    import torch
    from .network import images_to_tensor

    net_dims = model.cfg.input_dims
    hcfg = HeatmapConfig(stride=model.cfg.heatmap_stride)
    dtype = next(model.parameters()).dtype

    def predict(samples):
        model.eval()
        resized = [resize_sample(s, net_dims) if s.dims != net_dims else s for s in samples]
        x = images_to_tensor(np.stack([s.image for s in resized])).to(dtype)
        with torch.no_grad():
            out = model(x)
            probs = torch.softmax(out.seg_logits, 1).double().numpy()
            heat = out.vp_heatmap.double().numpy()
        preds = []
        for s, pr, hm in zip(samples, probs, heat):
            sx, sy = s.dims.width / net_dims.width, s.dims.height / net_dims.height
            lanes = extract_lanes_from_seg(pr, cfg.exist_threshold, cfg.row_count, cfg.point_threshold)
            lanes = [lane.transformed(lambda p: p * [sx, sy]) for lane in lanes]
            vp = decode_vp(hm[0], hcfg)
            preds.append(Prediction(lanes, Point2D(vp.point.x * sx, vp.point.y * sy), vp.confidence,
                                    pr if keep_maps else None, hm[0] if keep_maps else None))
        return preds

    return predict


def run_evaluation(predictor: Predictor, data: LaneDataset, cfg: EvalConfig = EvalConfig(),
                   out_dir=None, render: int = 0, batch_size: int = 32, name: str = "model") -> EvalReport:
    """Evaluate ``predictor`` over ``data`` and optionally write report artifacts.

    Artifacts (when ``out_dir`` is given): ``report.json``, ``report.txt``
    (Table-1-style), ``vp_histogram.txt`` and the first ``render`` overlays.
    """
    report = EvalReport(skipped=getattr(data, "skipped", 0))
    overlays = []
    for start in range(0, len(data), batch_size):
        batch = [data[i] for i in range(start, min(start + batch_size, len(data)))]
        for s, p in zip(batch, predictor(batch)):
            rep = evaluate_image(p.lanes, s.lanes, s.category, s.dims, cfg.match)
            c = s.category
            report.categories[c] = report.categories[c].merge(rep) if c in report.categories else rep
            if s.vp.visible:
                report.vp_histogram.add(norm_dist(p.vp, s.vp.point, s.dims))
            if len(overlays) < render:
                overlays.append((s, p))
    if out_dir is not None:
        write_report(out_dir, {name: report})
        if overlays:
            odir = Path(out_dir) / "overlays"
            odir.mkdir(parents=True, exist_ok=True)
            for i, (s, p) in enumerate(overlays):
                render_overlay(s, p).save(odir / f"{i:04d}.png")
    return report


# --------------------------------------------------------------------------- rendering

def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt_cell(rep: Optional[CategoryReport]) -> str:
    if rep is None:
        return "-"
    if rep.fp_only:
        return str(rep.fp)
    return f"{100 * rep.f1:.1f}"


def format_table(reports: Dict[str, EvalReport], title: str = "") -> str:
    """Rows are categories plus Total, one F1 (%) column per system; Crossroad shows FP."""
    cats = [c for c in CATEGORIES if any(c in r.categories for r in reports.values())]
    names = list(reports)
    header = ["Category"] + names
    rows = [[c] + [_fmt_cell(reports[n].categories.get(c)) for n in names] for c in cats]
    rows.append(["Total"] + [_fmt_cell(reports[n].total) for n in names])
    rows.append(["Mean NormDist"] + [f"{reports[n].vp_histogram.mean:.6f}" for n in names])
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = "+".join("-" * (w + 2) for w in widths)
    fmt = lambda r: "|".join(f" {str(v):<{w}} " if i == 0 else f" {str(v):>{w}} "
                             for i, (v, w) in enumerate(zip(r, widths)))
    out = ([title] if title else []) + [fmt(header), line] + [fmt(r) for r in rows]
    return "\n".join(out) + "\n"


def format_ablation_table(reports: Dict[str, EvalReport], title: str = "") -> str:
    """One row per system; F1 (%) per category, Total, Crossroad FP and mean NormDist as columns."""
    cats = [c for c in CATEGORIES if any(c in r.categories for r in reports.values())]
    header = ["Topology"] + [c + (" (FP)" if c == CROSSROAD else "") for c in cats] + ["Total", "NormDist"]
    rows = [[n] + [_fmt_cell(r.categories.get(c)) for c in cats] + [_fmt_cell(r.total), f"{r.vp_histogram.mean:.4f}"]
            for n, r in reports.items()]
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = "+".join("-" * (w + 2) for w in widths)
    fmt = lambda r: "|".join(f" {str(v):<{w}} " if i == 0 else f" {str(v):>{w}} "
                             for i, (v, w) in enumerate(zip(r, widths)))
    out = ([title] if title else []) + [fmt(header), line] + [fmt(r) for r in rows]
    return "\n".join(out) + "\n"


def write_report(out_dir, reports: Dict[str, EvalReport], title: str = "") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "report.json",
                      json.dumps({n: r.to_dict() for n, r in reports.items()}, indent=2) + "\n")
    atomic_write_text(out_dir / "report.txt", format_table(reports, title))
    for n, r in reports.items():
        fname = "vp_histogram.txt" if len(reports) == 1 else f"vp_histogram_{n}.txt"
        atomic_write_text(out_dir / fname, r.vp_histogram.to_text())


LANE_COLORS = [(255, 64, 64), (64, 255, 64), (64, 128, 255), (255, 255, 64)]


def render_overlay(s: Sample, p: Prediction, scale: int = 4) -> Image.Image:
    """Image with predicted lanes, the predicted VP (red cross) and ground-truth VP (green circle)."""
    img = Image.fromarray(s.image).resize((s.dims.width * scale, s.dims.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for k, lane in enumerate(p.lanes):
        pts = [((x + 0.5) * scale, (y + 0.5) * scale) for x, y in lane.points]
        draw.line(pts, fill=LANE_COLORS[k % len(LANE_COLORS)], width=max(1, scale // 2))
    r = 2 * scale
    if s.vp.visible:
        gx, gy = (s.vp.point.x + 0.5) * scale, (s.vp.point.y + 0.5) * scale
        draw.ellipse([gx - r, gy - r, gx + r, gy + r], outline=(0, 255, 0), width=2)
    vx, vy = (p.vp.x + 0.5) * scale, (p.vp.y + 0.5) * scale
    draw.line([vx - r, vy, vx + r, vy], fill=(255, 0, 0), width=2)
    draw.line([vx, vy - r, vx, vy + r], fill=(255, 0, 0), width=2)
    return img


def render_maps(s: Sample, p: Prediction, scale: int = 4) -> Image.Image:
    """Side-by-side input, lane-probability map (max over lane channels) and VP heatmap."""
    W, H = s.dims.width, s.dims.height
    panels = [Image.fromarray(s.image)]
    if p.seg_probs is not None:
        lane = (1.0 - p.seg_probs[0]).clip(0, 1)
        panels.append(Image.fromarray((lane * 255).astype(np.uint8)).convert("RGB"))
    if p.heatmap is not None:
        h = p.heatmap
        h = (h - h.min()) / (h.max() - h.min() + 1e-12)
        rgb = np.stack([h, h ** 2, 1.0 - h], -1)
        panels.append(Image.fromarray((rgb * 255).astype(np.uint8)).resize((W, H), Image.BILINEAR))
    out = Image.new("RGB", (W * len(panels), H))
    for i, im in enumerate(panels):
        out.paste(im, (i * W, 0))
    return out.resize((out.width * scale, out.height * scale), Image.NEAREST)
