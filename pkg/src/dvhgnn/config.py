"""Model configuration and the published DVHGNN variants."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union


@dataclass
class ModelConfig:
    channels: List[int]
    blocks: List[int]
    heads: List[int]
    head_dim: int
    window: int = 7
    centroids: int = 4
    rates: Tuple[int, ...] = (1, 2, 3)
    kernel: int = 3
    ffn_ratio: int = 4
    num_classes: int = 1000
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.blocks = [int(b) for b in self.blocks]
        self.heads = [int(h) for h in self.heads]
        self.rates = tuple(int(r) for r in self.rates)
        self.validate()

    @property
    def num_rates(self) -> int:
        return len(self.rates)

    def validate(self) -> None:
        for key in ("channels", "blocks", "heads"):
            if len(getattr(self, key)) != 4:
                raise ValueError(f"{key} must list 4 stages, got {getattr(self, key)}")
        if min(self.channels) < 1 or min(self.heads) < 1 or min(self.blocks) < 0:
            raise ValueError("channels and heads must be >= 1, blocks >= 0")
        if self.head_dim < 1:
            raise ValueError("head_dim must be >= 1")
        if self.window < 3:
            raise ValueError(f"window must be >= 3, got {self.window}")
        if not 1 <= self.centroids <= self.window ** 2:
            raise ValueError(f"centroids must lie in [1, {self.window ** 2}]")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd integer, got {self.kernel}")
        if not self.rates or min(self.rates) < 1:
            raise ValueError(f"dilation rates must be >= 1, got {self.rates}")
        if self.ffn_ratio < 1 or self.num_classes < 1:
            raise ValueError("ffn_ratio and num_classes must be >= 1")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rates"] = list(self.rates)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def dvhgnn_t(**kw) -> ModelConfig:
    return ModelConfig([48, 96, 240, 480], [2, 2, 6, 2], [3, 6, 12, 24], 24, name="DVHGNN-T", **kw)


def dvhgnn_s(**kw) -> ModelConfig:
    return ModelConfig([64, 128, 320, 640], [3, 3, 9, 3], [4, 8, 16, 32], 32, name="DVHGNN-S", **kw)


def dvhgnn_m(**kw) -> ModelConfig:
    return ModelConfig([96, 192, 384, 768], [4, 4, 14, 4], [4, 8, 16, 32], 32, name="DVHGNN-M", **kw)


def dvhgnn_b(**kw) -> ModelConfig:
    return ModelConfig([96, 192, 384, 768], [6, 6, 24, 6], [5, 10, 20, 40], 32, name="DVHGNN-B", **kw)


def toy(**kw) -> ModelConfig:
    """Two blocks, two heads, four channels: small enough for finite differences.

    Four rather than two channels: a layer norm over two channels maps every
    vertex to +-(1, -1), which leaves the similarity path with no signal.
    """
    kw.setdefault("num_classes", 10)
    return ModelConfig([4, 4, 4, 4], [1, 1, 0, 0], [2, 2, 2, 2], 3, name="toy", **kw)


PRESETS = {"T": dvhgnn_t, "S": dvhgnn_s, "M": dvhgnn_m, "B": dvhgnn_b, "toy": toy}


def load_config(source: Union[str, Path]) -> ModelConfig:
    """Accept a preset name (T, S, M, B, toy) or a path to a JSON config file."""
    key = str(source)
    if key in PRESETS:
        return PRESETS[key]()
    if key.upper().startswith("DVHGNN-") and key[7:].upper() in PRESETS:
        return PRESETS[key[7:].upper()]()
    return ModelConfig.from_dict(json.loads(Path(source).read_text()))
