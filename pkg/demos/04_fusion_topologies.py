"""The four fusion topologies: parameter split and which losses reach which head."""
import torch

from vplane.loss import heatmap_loss, lane_loss
from vplane.network import FusionTopology, ModelConfig, build_model, count_parameters


def grad_norm(model, loss, name):
    model.zero_grad()
    loss.backward(retain_graph=True)
    return sum(float(p.grad.abs().sum()) for p in getattr(model, name).parameters() if p.grad is not None)


x = torch.rand(2, 3, 64, 128)
for topo in FusionTopology:
    model = build_model(ModelConfig(topology=topo)).train()
    out = model(x)
    l_vp, _ = heatmap_loss(out.vp_heatmap, torch.rand_like(out.vp_heatmap))
    l_lane = lane_loss(out.seg_logits, torch.randint(0, 5, (2, 64, 128)))
    print(f"{topo.value:10s} params {count_parameters(model)}")
    print(f"{'':10s} VP loss -> lane decoder {grad_norm(model, l_vp, 'lane_decoder'):.3g}, "
          f"lane loss -> VP head {grad_norm(model, l_lane, 'vp_head'):.3g}")
