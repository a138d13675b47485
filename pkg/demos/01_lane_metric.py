"""Lane F1: rasterize polylines at a fixed width, match by IoU, count TP/FP/FN."""
from vplane.geometry import ImageDims, Lane, MatchConfig, iou_matrix, match_lanes, rasterize_lane

dims = ImageDims(128, 64)
gts = [Lane([[20, 63], [60, 10]]), Lane([[100, 63], [68, 10]])]
preds = [Lane([[22, 63], [61, 10]]),     # close to the left lane
         Lane([[120, 63], [90, 10]])]    # too far from the right lane

mask = rasterize_lane(gts[0], 4, dims)
print(f"left lane covers {mask.sum()} pixels at width 4")

cfg = MatchConfig(line_width=4, iou_threshold=0.5)
print("IoU matrix (preds x gts):")
print(iou_matrix(preds, gts, cfg.line_width, dims).round(3))
res = match_lanes(preds, gts, cfg, dims)
print(f"pairs {res.pairs}  TP {res.tp}  FP {res.fp}  FN {res.fn}")
