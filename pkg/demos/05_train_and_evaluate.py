"""Train a small LD_MID_VP model for a few epochs and report lane F1 and NormDist.

Runs in under a minute. The VP head converges within a couple of epochs, while lane
F1 stays near zero at this budget: lane identity needs the full desk run
(``vplane train --config configs/desk.json``, 15 epochs on 2,000 scenes).
"""
from vplane.dataset import LaneDataset, SceneConfig, generate_synthetic_scene
from vplane.eval import EvalConfig, format_table, model_predictor, run_evaluation
from vplane.geometry import ImageDims
from vplane.network import ModelConfig, build_model
from vplane.training import TrainConfig, train

dims = ImageDims(128, 64)


def scenes(seeds):
    return LaneDataset([generate_synthetic_scene(SceneConfig(dims, seed=s), stroke_width=6) for s in seeds])


train_set, test_set = scenes(range(200)), scenes(range(10_000, 10_050))
model = build_model(ModelConfig(input_dims=dims, base_channels=16))
cfg = TrainConfig(epochs=4, lr0=0.02, decay_every=3, heatmap_std=2.0)
result = train(model, train_set, cfg)
for r in result.val_history:
    print(r)

ecfg = EvalConfig(line_width=4)
report = run_evaluation(model_predictor(result.model, ecfg), test_set, ecfg)
print(format_table({"LD_MID_VP": report}))
