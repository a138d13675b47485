import json

import numpy as np
import pytest
import torch

from vplane.dataset import LaneDataset, SceneConfig, generate_synthetic_scene
from vplane.geometry import ImageDims
from vplane.heatmap import HeatmapConfig, VPAnnotation
from vplane.loss import total_loss
from vplane.network import ModelConfig, build_model
from vplane.training import (MomentumSGD, TrainConfig, TrainingDiverged, evaluate_loss, lr_at_epoch,
                             make_batch, split_train_val, train)

DIMS = ImageDims(32, 16)


def _data(n, seed=0):
    return LaneDataset([generate_synthetic_scene(SceneConfig(DIMS, seed=seed + i), stroke_width=3)
                        for i in range(n)])


def _model(**kw):
    return build_model(ModelConfig(input_dims=DIMS, base_channels=8, encoder_depth=1, **kw))


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at_epoch(cfg, 0) == pytest.approx(1e-3, rel=1e-12)
    assert lr_at_epoch(cfg, 4) == pytest.approx(1e-3, rel=1e-12)
    assert lr_at_epoch(cfg, 5) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at_epoch(cfg, 12) == pytest.approx(1e-5, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at_epoch(cfg, -1)


def test_config_validation():
    for bad in (dict(lr0=0), dict(decay_factor=0), dict(decay_every=0), dict(epochs=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_gd_matches_closed_form():
    # f(w) = a/2 (w - c)^2, momentum 0: w_{k+1} - c = (1 - lr a)(w_k - c)
    a, c, w0, lr = 3.0, 0.7, -2.0, 0.05
    w = torch.tensor([w0], dtype=torch.float64, requires_grad=True)
    opt = MomentumSGD([w], momentum=0.0)
    for k in range(1, 51):
        opt.zero_grad()
        (0.5 * a * (w - c) ** 2).sum().backward()
        opt.step(lr)
        assert abs(w.item() - (c + (1 - lr * a) ** k * (w0 - c))) < 1e-12


def test_momentum_matches_recurrence():
    # heavy-ball recurrence v <- mu v - lr g, w <- w + v
    a, lr, mu = 2.0, 0.1, 0.9
    w = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    opt = MomentumSGD([w], momentum=mu)
    wr, vr = 1.0, 0.0
    for _ in range(30):
        opt.zero_grad()
        (0.5 * a * w ** 2).sum().backward()
        opt.step(lr)
        vr = mu * vr - lr * a * wr
        wr = wr + vr
        assert abs(w.item() - wr) < 1e-12


def test_make_batch_masks_invisible_vp():
    data = _data(2)
    data.samples[1].vp = VPAnnotation(data.samples[1].vp.point, visible=False)
    x, seg, hm, mask = make_batch(data.samples, HeatmapConfig(2.0, 4))
    assert x.shape == (2, 3, 16, 32) and seg.shape == (2, 16, 32) and hm.shape == (2, 1, 4, 8)
    assert mask.tolist() == [True, False]
    assert hm[1].abs().sum() == 0 and hm[0].max() == 1


def test_masked_batch_gives_no_vp_head_gradient():
    data = _data(2)
    for s in data.samples:
        s.vp = VPAnnotation(s.vp.point, visible=False)
    model = _model().train()
    x, seg, hm, mask = make_batch(data.samples, HeatmapConfig(2.0, 4))
    total_loss(model(x), seg, hm, mask).total.backward()
    for p in model.vp_head.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0


def test_one_epoch_descends():
    data = _data(4)
    model = _model()
    cfg = TrainConfig(epochs=1, batch_size=1, lr0=0.01, heatmap_std=2.0, val_fraction=0.0,
                      augment_flip=False, augment_rotation=False)
    x, seg, hm, mask = make_batch(data.samples, HeatmapConfig(2.0, 4))

    def batch_loss():
        # batch statistics: running BN averages barely move in four steps
        model.train()
        with torch.no_grad():
            return total_loss(model(x), seg, hm, mask).total.item()

    before = batch_loss()
    train(model, data, cfg)
    assert batch_loss() < before


def _log_without_time(path):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    for r in rows:
        r.pop("wall_time")
    return rows


def test_bit_reproducible(tmp_path):
    data = _data(10)
    cfg = TrainConfig(epochs=2, batch_size=4, lr0=0.01, heatmap_std=2.0, seed=7)
    r1 = train(_model(seed=7), data, cfg, out_dir=tmp_path / "a")
    r2 = train(_model(seed=7), data, cfg, out_dir=tmp_path / "b")
    assert _log_without_time(tmp_path / "a" / "train_log.jsonl") == \
        _log_without_time(tmp_path / "b" / "train_log.jsonl")
    for p, q in zip(r1.model.parameters(), r2.model.parameters()):
        assert torch.equal(p, q)
    assert [c.name for c in r1.checkpoints] == ["epoch_000.pt", "epoch_001.pt"]
    assert (tmp_path / "a" / "best.pt").exists()


def test_records_carry_schedule():
    data = _data(4)
    cfg = TrainConfig(epochs=3, batch_size=2, lr0=0.01, decay_every=2, heatmap_std=2.0, val_fraction=0.0)
    res = train(_model(), data, cfg)
    assert [r.lr for r in res.log] == pytest.approx([0.01] * 4 + [0.001] * 2)
    assert [r.step for r in res.log] == list(range(6))


def test_divergence_is_reported(tmp_path):
    data = _data(4)
    cfg = TrainConfig(epochs=3, batch_size=4, lr0=1e6, heatmap_std=2.0, val_fraction=0.0)
    with pytest.raises(TrainingDiverged):
        train(_model(), data, cfg, out_dir=tmp_path)
    assert (tmp_path / "diverged.pt").exists()


def test_split_is_seeded_and_disjoint():
    tr, va = split_train_val(50, 0.2, 3)
    assert len(va) == 10 and not set(tr) & set(va) and len(tr) + len(va) == 50
    tr2, va2 = split_train_val(50, 0.2, 3)
    assert np.array_equal(va, va2)


def test_rejects_mismatched_dims():
    data = LaneDataset([generate_synthetic_scene(SceneConfig(ImageDims(64, 32), seed=0))])
    with pytest.raises(ValueError):
        train(_model(), data, TrainConfig(epochs=1))


def test_evaluate_loss_is_sample_weighted():
    data = _data(5)
    cfg = TrainConfig(heatmap_std=2.0)
    model = _model()
    whole = evaluate_loss(model, data, cfg, batch_size=5)["total"]
    chunked = evaluate_loss(model, data, cfg, batch_size=2)["total"]
    assert chunked == pytest.approx(whole, rel=1e-5)
