"""SGD-with-momentum training loop, staircase learning-rate schedule, checkpoints and step logs."""
from dataclasses import asdict, dataclass, field
import json
import logging
import math
from pathlib import Path
import time
from typing import List, Optional, Sequence

import numpy as np
import torch

from .dataset import LaneDataset, Sample, augment_sample
from .heatmap import HeatmapConfig, encode_vp
from .loss import LossWeights, total_loss
from .network import VPLaneNet, images_to_tensor, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr0: float = 0.001
    decay_factor: float = 0.1
    decay_every: int = 5
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    augment_flip: bool = True
    augment_rotation: bool = True
    max_rotation_deg: float = 10.0
    heatmap_std: float = 7.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    lr: float
    l_vp: float
    l_lane: float
    total: float
    wall_time: float


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


class MomentumSGD:
    """Classical momentum: ``v <- momentum * v - lr * grad``; ``p <- p + v``."""

    def __init__(self, params, momentum=0.9):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                g = torch.zeros_like(p)
            else:
                g = p.grad
            v.mul_(self.momentum).sub_(lr * g)
            p.add_(v)


def make_batch(samples: Sequence[Sample], heatmap_cfg: HeatmapConfig, dtype=torch.float32):
    """Stack samples into ``(images, seg labels, heatmap targets, vp visibility mask)``."""
    x = images_to_tensor(np.stack([s.image for s in samples])).to(dtype)
    seg = torch.from_numpy(np.stack([s.seg for s in samples]).astype(np.int64))
    dims = samples[0].dims
    grid = heatmap_cfg.grid_dims(dims)
    hms, mask = [], []
    for s in samples:
        if s.vp.visible and s.vp.inside(dims):
            hms.append(encode_vp(s.vp, dims, heatmap_cfg))
            mask.append(True)
        else:
            hms.append(np.zeros(grid.shape))
            mask.append(False)
    hm = torch.from_numpy(np.stack(hms)[:, None]).to(dtype)
    return x, seg, hm, torch.tensor(mask)


def augment_for_step(s: Sample, cfg: TrainConfig, epoch: int, index: int) -> Sample:
    """Random flip / rotation seeded by ``(seed, epoch, sample index)``."""
    if not (cfg.augment_flip or cfg.augment_rotation):
        return s
    rng = np.random.default_rng([cfg.seed, epoch, index])
    flip = bool(cfg.augment_flip and rng.random() < 0.5)
    angle = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)) if cfg.augment_rotation else 0.0
    return augment_sample(s, flip, angle)


def split_train_val(n: int, fraction: float, seed: int):
    idx = np.random.default_rng([seed, 0x5A11]).permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(idx[n_val:]), np.sort(idx[:n_val])


@torch.no_grad()
def evaluate_loss(model: VPLaneNet, data: LaneDataset, cfg: TrainConfig, batch_size: int = 32) -> dict:
    """Mean loss breakdown over a dataset in inference mode (sample-weighted)."""
    model.eval()
    hcfg = HeatmapConfig(cfg.heatmap_std, model.cfg.heatmap_stride)
    dtype = next(model.parameters()).dtype
    sums = {"l_vp": 0.0, "l_lane": 0.0, "total": 0.0}
    for start in range(0, len(data), batch_size):
        batch = [data[i] for i in range(start, min(start + batch_size, len(data)))]
        x, seg, hm, mask = make_batch(batch, hcfg, dtype)
        out = total_loss(model(x), seg, hm, mask, cfg.weights)
        for k, v in out.as_floats().items():
            sums[k] += v * len(batch)
    return {k: v / max(len(data), 1) for k, v in sums.items()}


@dataclass
class TrainResult:
    model: VPLaneNet
    log: List[TrainLogRecord]
    checkpoints: List[Path]
    best_checkpoint: Optional[Path]
    val_history: List[dict]


def train(model: VPLaneNet, data: LaneDataset, cfg: TrainConfig, out_dir=None,
          val_data: Optional[LaneDataset] = None) -> TrainResult:
    """Train in place. Without ``val_data`` a seeded ``val_fraction`` split of ``data`` is held out."""
    if data.dims != model.cfg.input_dims:
        raise ValueError(f"data dims {data.dims} differ from model input {model.cfg.input_dims}")
    if val_data is None and cfg.val_fraction > 0 and len(data) > 1:
        tr_idx, va_idx = split_train_val(len(data), cfg.val_fraction, cfg.seed)
        data, val_data = data.subset(tr_idx), data.subset(va_idx)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")

    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    hcfg = HeatmapConfig(cfg.heatmap_std, model.cfg.heatmap_stride)
    opt = MomentumSGD(model.parameters(), cfg.momentum)
    records, checkpoints, val_history = [], [], []
    best_total, best_path = math.inf, None
    step = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
            model.train()
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = [augment_for_step(data[int(i)], cfg, epoch, int(i)) for i in idx]
                x, seg, hm, mask = make_batch(batch, hcfg, dtype)
                opt.zero_grad()
                losses = total_loss(model(x), seg, hm, mask, cfg.weights)
                if not torch.isfinite(losses.total):
                    if out_dir is not None:
                        save_checkpoint(out_dir / "diverged.pt", model, {"epoch": epoch, "step": step})
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}: {losses.as_floats()}")
                losses.total.backward()
                opt.step(lr)
                rec = TrainLogRecord(epoch, step, lr, **losses.as_floats(),
                                     wall_time=time.perf_counter() - t0)
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(asdict(rec)) + "\n")
                step += 1
            if log_fh is not None:
                log_fh.flush()
            val = evaluate_loss(model, val_data, cfg) if val_data is not None and len(val_data) else None
            val_history.append({"epoch": epoch, **(val or {})})
            logger.info("epoch %d lr %.2g last-step total %.4f val %s", epoch, lr, records[-1].total, val)
            if out_dir is not None:
                path = out_dir / f"epoch_{epoch:03d}.pt"
                save_checkpoint(path, model, {"epoch": epoch, "val": val})
                checkpoints.append(path)
                score = val["total"] if val else records[-1].total
                if score < best_total:
                    best_total = score
                    best_path = out_dir / "best.pt"
                    save_checkpoint(best_path, model, {"epoch": epoch, "val": val})
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return TrainResult(model, records, checkpoints, best_path, val_history)
