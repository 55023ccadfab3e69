"""Run configuration: model, data and optimizer settings.

Serialized as a flat key=value text file so every field round-trips through
the CLI. Paper-scale presets (150 epochs, milestones 50/90/120, 50 or 100
queries) are expressible; the defaults are the desk-scale setup.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class RunConfig:
    # model
    variant: str = "S"                      # S -> blocks {1,1,1,1}, B -> {1,1,3,2}
    d_c: int = 32
    num_queries: int = 10
    decoder: str = "stacked"                # stacked | mlp
    decoder_depth: int = 6                  # 2 | 4 | 6 for the stacked decoder
    num_object_classes: int = 8
    num_interaction_classes: int = 4
    scale_sets: str = "5,7;5,7;3,5"

    # data
    image_h: int = 64
    image_w: int = 64
    train_scenes: int = 200
    val_scenes: int = 50
    data_seed: int = 7

    # optimizer and schedule
    epochs: int = 200
    batch_size: int = 16
    lr: float = 2.5e-4
    backbone_lr: float = 2.5e-4
    weight_decay: float = 1e-4
    lr_milestones: str = "120,160,190"
    lr_decay: float = 0.5
    max_grad_norm: float = 0.1
    seed: int = 0
    eval_every: int = 10
    early_stop_map: float = 0.0             # 0 disables early stopping
    freeze_offsets: bool = False
    hflip: bool = False
    background_weight: float = 1.0
    dtype: str = "float32"                  # float64 for verification-grade runs

    def milestones(self) -> list[int]:
        text = self.lr_milestones.strip()
        return [int(tok) for tok in text.split(",") if tok.strip()] if text else []

    def parsed_scale_sets(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(int(v) for v in grp.split(",")) for grp in self.scale_sets.split(";"))

    def save(self, path) -> None:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {value}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        casts = {f.name: type(getattr(cls(), f.name)) for f in dataclasses.fields(cls)}
        values = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in known:
                raise ValueError(f"unknown config key: {key}")
            kind = casts[key]
            if kind is bool:
                values[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                values[key] = kind(val)
        return cls(**values)
