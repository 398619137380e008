"""Model and training configuration, presets, and the flat key=value config format."""
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional


@dataclass
class ModelConfig:
    channels: int = 64
    n_res: int = 4  # resblocks in GGN / GGN2
    n_dfe: int = 4  # DFE blocks per DFE group
    n_cfe: int = 4  # CFE blocks in the CFE group
    heads: int = 4
    K: int = 2
    scale: int = 4
    T: int = 4
    beta_start: float = 0.1
    beta_end: float = 0.99
    denoiser_hidden: Optional[int] = None  # default 4 * K^2 * C
    ffn_expansion: float = 2.66
    global_residual: bool = True
    use_guidance: bool = True
    compress: str = "block"  # "block" (K x K means) or "global" (ablation M-2)
    fusion: str = "mul"  # "mul" or "concat" (ablation M-4)
    learned_offsets: bool = False
    guidance_bound: str = "tanh"  # keeps sqrt(abar_T) * G negligible at T

    def __post_init__(self):
        if self.compress not in ("block", "global"):
            raise ValueError(f"unknown compress mode {self.compress!r}")
        if self.fusion not in ("mul", "concat"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")

    @property
    def guidance_dim(self) -> int:
        return self.K * self.K * self.channels

    @property
    def hidden(self) -> int:
        return self.denoiser_hidden or 4 * self.guidance_dim


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 300
    batch_size: int = 1
    lr_init: float = 2e-4
    lr_half_every: int = 80
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    loss_switch_epoch: int = 150
    seed: int = 0
    scale: int = 4
    preset: str = "full"
    patch_hr: Optional[int] = 256
    patches_per_image: int = 1
    max_steps: Optional[int] = None
    warm_start: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 2 and not self.loss_switch_epoch < self.epochs:
            raise ValueError("loss_switch_epoch must be smaller than epochs")

    def lr_at(self, epoch: int) -> float:
        return self.lr_init * 0.5 ** (epoch // self.lr_half_every)


# toy: CPU-minutes on synthetic 32x32 patches; full: the published settings
PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "toy": {
        "model": dict(channels=8, n_res=1, n_dfe=1, n_cfe=1, heads=2),
        "train": dict(
            epochs=500, batch_size=4, lr_init=5e-3, lr_half_every=1000,
            loss_switch_epoch=400, patch_hr=32, max_steps=None,
        ),
    },
    "full": {"model": {}, "train": {}},
}


def preset(name: str, **overrides) -> tuple[ModelConfig, TrainConfig]:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}")
    p = PRESETS[name]
    model_kw = dict(p["model"])
    train_kw = dict(p["train"], preset=name)
    model_names = {f.name for f in fields(ModelConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    for key, value in overrides.items():
        if key in model_names:
            model_kw[key] = value
        if key in train_names:
            train_kw[key] = value
        if key not in model_names | train_names:
            raise KeyError(f"unknown config key {key!r}")
    if "scale" in overrides:
        model_kw["scale"] = train_kw["scale"] = overrides["scale"]
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def _coerce(raw: str, annotation) -> Any:
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    text = str(annotation)
    if "bool" in text:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in text:
        return int(raw)
    if "float" in text:
        return float(raw)
    return raw


def _field_types() -> dict[str, Any]:
    types = {f.name: f.type for f in fields(TrainConfig)}
    types.update({f.name: f.type for f in fields(ModelConfig)})
    return types


def parse_overrides(pairs) -> dict[str, Any]:
    """Parse ``["key=value", ...]`` into typed values keyed by config field."""
    types = _field_types()
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override must be key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        out[key] = _coerce(raw, types[key])
    return out


def read_config_file(path) -> dict[str, Any]:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    lines = Path(path).read_text().splitlines()
    pairs = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append(line)
    return parse_overrides(pairs)


def write_config_file(path, model: ModelConfig, train: TrainConfig) -> None:
    items = {**dataclasses.asdict(model), **dataclasses.asdict(train)}
    items["scale"] = train.scale
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in items.items()))


def to_dict(model: ModelConfig, train: Optional[TrainConfig] = None) -> dict[str, Any]:
    out = {"model": dataclasses.asdict(model)}
    if train is not None:
        out["train"] = dataclasses.asdict(train)
    return out


def model_from_dict(d: dict[str, Any]) -> ModelConfig:
    return ModelConfig(**d)


def train_from_dict(d: dict[str, Any]) -> TrainConfig:
    return TrainConfig(**d)
