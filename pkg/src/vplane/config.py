"""Run configuration: JSON file + dotted-key overrides, resolved into the module configs."""
import copy
import hashlib
import json
from pathlib import Path

from .dataset import SyntheticSpec, scaled_width
from .eval import EvalConfig
from .geometry import ImageDims
from .loss import LossWeights
from .network import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    model = ModelConfig().to_dict()
    model.pop("seed")
    # None: run the network at the data resolution
    model["input_dims"] = None
    train = TrainConfig().to_dict()
    train.pop("seed")
    return {
        "seed": 0,
        "data": {
            "root": "data",
            "width": 128,
            "height": 64,
            "n_train": 2000,
            "n_test": 500,
            "num_lanes": 4,
            "max_curvature": 0.15,
            "noise_std": 6.0,
            "stroke_width": None,
            "train_split": "train",
            "test_split": "test",
        },
        "model": model,
        "train": train,
        "eval": {
            "checkpoint": None,
            # None: 30 px quoted at the 976-px network width, rescaled to data.width;
            # set 30 explicitly when evaluating native 1640x590 CULane frames
            "line_width": None,
            "iou_threshold": 0.5,
            "exist_threshold": 0.5,
            "point_threshold": 0.3,
            "row_count": 18,
            "render": 0,
        },
    }


def _merge(base: dict, update: dict, prefix="") -> dict:
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{key}' must be a mapping")
            _merge(base[k], v, key + ".")
        else:
            base[k] = v
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got '{assignment}'")
    key, raw = assignment.split("=", 1)
    node = cfg
    parts = key.strip().split(".")
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key '{key}'")
        if i == len(parts) - 1:
            node[part] = _parse_value(raw)
        else:
            node = node[part]


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Defaults, then the file, then ``--set`` overrides, then ``--seed``."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    for ov in overrides:
        apply_override(cfg, ov)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def data_dims(cfg: dict) -> ImageDims:
    return ImageDims(int(cfg["data"]["width"]), int(cfg["data"]["height"]))


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    d = cfg["data"]
    return SyntheticSpec(data_dims(cfg), int(d["n_train"]), int(d["n_test"]), int(cfg["seed"]),
                         d["num_lanes"], float(d["max_curvature"]), float(d["noise_std"]),
                         d["stroke_width"])


def model_config(cfg: dict, topology=None) -> ModelConfig:
    m = copy.deepcopy(cfg["model"])
    if m.get("input_dims") is None:
        d = data_dims(cfg)
        m["input_dims"] = [d.width, d.height]
    if topology is not None:
        m["topology"] = topology
    try:
        return ModelConfig(seed=int(cfg["seed"]), **m)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg: dict) -> TrainConfig:
    t = copy.deepcopy(cfg["train"])
    t["weights"] = LossWeights(**t["weights"])
    return TrainConfig(seed=int(cfg["seed"]), **t)


def eval_config(cfg: dict, dims: ImageDims) -> EvalConfig:
    e = cfg["eval"]
    width = e["line_width"] if e["line_width"] is not None else scaled_width(30, dims)
    return EvalConfig(int(width), float(e["iou_threshold"]), float(e["exist_threshold"]),
                      float(e["point_threshold"]), int(e["row_count"]))
