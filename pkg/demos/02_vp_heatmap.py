"""VP heatmap: encode a point as a Gaussian, decode by argmax, score with NormDist."""
import numpy as np

from vplane.geometry import ImageDims
from vplane.heatmap import HeatmapConfig, VPAnnotation, decode_vp, encode_vp, norm_dist

dims = ImageDims(128, 64)
cfg = HeatmapConfig(std=2.0, stride=4)
vp = VPAnnotation((61.3, 22.8))
h = encode_vp(vp, dims, cfg)
print(f"heatmap {h.shape}, peak {h.max()} at cell {tuple(int(i) for i in np.unravel_index(h.argmax(), h.shape))}")

dec = decode_vp(h, cfg)
print(f"decoded {tuple(round(v, 2) for v in dec.point)}  (true {tuple(vp.point)})")
print(f"NormDist {norm_dist(dec.point, vp.point, dims):.4f}  (capped at 0.1)")
