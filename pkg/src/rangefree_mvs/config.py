"""Single flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .errors import ConfigError
from .features import FeatureConfig
from .fusion_eval import FusionConfig
from .refiner import ModelConfig, RefinerConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"
    # refiner
    t_c: int = 8
    t_f: int = 2
    n_views: int = 3
    samples: int = 9
    # features / model
    c_coarse: int = 64
    c_fine: int = 32
    c_ctx: int = 96
    c_ctx_hidden: int = 48
    norm: str = "instance"
    disp_hidden: int = 32
    disp_feat: int = 64
    attn_dim: int = 64
    heads: int = 4
    blocks: int = 2
    use_pose_embedding: bool = True
    use_uncertainty: bool = True
    use_hidden_state: bool = True
    squared_translation: bool = False
    # training
    gamma: float = 0.9
    lr: float = 2e-4
    epochs: int = 16
    halve_every: int = 4
    steps_per_epoch: int = 125
    batch: int = 1
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    reverse_discount: bool = False
    # fusion / evaluation
    pixel_threshold: float = 1.0
    depth_threshold: float = 0.01
    min_views: int = 2
    voxel: float = 0.0
    outlier_cap: float = float("inf")
    tau: float = 0.01

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.norm not in ("instance", "none"):
            raise ConfigError("norm must be instance or none")
        try:
            self.refiner_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- parsing -----------------------------------------------------------

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @staticmethod
    def _convert(name: str, kind, raw: str):
        raw = raw.strip()
        try:
            if kind in (bool, "bool"):
                low = raw.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            if kind in (int, "int"):
                return int(raw)
            if kind in (float, "float"):
                return float(raw)
            return raw
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {raw!r}") from None

    @classmethod
    def parse_pairs(cls, items) -> dict:
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for lineno, item in items:
            if "=" not in item:
                raise ConfigError(f"line {lineno}: expected key = value, got {item!r}")
            key, val = (s.strip() for s in item.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            out[key] = cls._convert(key, types[key], val)
        return out

    @classmethod
    def from_text(cls, text: str, overrides=()) -> "RunConfig":
        items = []
        for i, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                items.append((i, line))
        values = cls.parse_pairs(items)
        values.update(cls.parse_pairs([("override", o) for o in overrides]))
        return cls(**values)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        text = "" if path is None else open(path).read()
        return cls.from_text(text, overrides)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    # -- module configs ----------------------------------------------------

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def refiner_config(self) -> RefinerConfig:
        return RefinerConfig(t_c=self.t_c, t_f=self.t_f, n_views=self.n_views, samples=self.samples)

    def model_config(self) -> ModelConfig:
        feats = FeatureConfig(c_coarse=self.c_coarse, c_fine=self.c_fine, c_ctx=self.c_ctx,
                              c_ctx_hidden=self.c_ctx_hidden, norm=self.norm)
        return ModelConfig(
            features=feats, disp_hidden=self.disp_hidden, disp_feat=self.disp_feat, attn_dim=self.attn_dim,
            heads=self.heads, blocks=self.blocks, use_pose_embedding=self.use_pose_embedding,
            use_uncertainty=self.use_uncertainty, use_hidden_state=self.use_hidden_state,
            squared_translation=self.squared_translation,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(gamma=self.gamma, lr=self.lr, epochs=self.epochs, halve_every=self.halve_every,
                           steps_per_epoch=self.steps_per_epoch, batch=self.batch, seed=self.seed,
                           weight_decay=self.weight_decay, grad_clip=self.grad_clip,
                           reverse_discount=self.reverse_discount)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.pixel_threshold, self.depth_threshold, self.min_views, self.voxel)
