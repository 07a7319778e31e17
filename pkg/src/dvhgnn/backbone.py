"""Four-stage pyramid of multi-scale DVHGNN blocks.

Layout (input H x W x 3, channels-last)::

    stem:   conv3x3/2 -> GELU -> conv3x3/2             (H/4, D1)
    stage1: blocks                                      (H/4, D1)
    down:   conv3x3/2, stage2 blocks                    (H/8, D2)
    ...                                                 (H/32, D4)
    head:   global average pool -> FC                   (classes)

Block: ``x + DHConv(LN(x))`` then ``x + ConvFFN(LN(x))``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from .config import ModelConfig
from .dhconv import HeadParams, multi_head_dhconv
from .functional import conv2d, depthwise_conv3x3, layer_norm, linear
from .hypergraph import PatchField
from .serialize import ShapeMismatchError, WeightFormatError, load_tensors, save_tensors
from .tensor import NonFiniteError, Tensor, add, as_tensor, gelu, reduce_mean


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container; parameters are discovered from attributes in order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, HeadParams):
                for sub, t in value.named_tensors().items():
                    yield f"{name}.{sub}", t
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, HeadParams):
                        for sub, t in item.named_tensors().items():
                            yield f"{name}.{i}.{sub}", t

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def __call__(self, *args, **kwargs):
        try:
            return self.forward(*args, **kwargs)
        except NonFiniteError as err:
            raise err.located(getattr(self, "label", type(self).__name__))

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def macs(self, h: int, w: int) -> Tuple[int, Tuple[int, int]]:
        """Multiply-adds for an (h, w) input and the output spatial size."""
        raise NotImplementedError


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, label: str = "linear"):
        self.weight = _param(_uniform(rng, (din, dout), din))
        self.bias = _param(_uniform(rng, (dout,), din))
        self.label = label

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def macs(self, h, w):
        din, dout = self.weight.shape
        return h * w * din * dout, (h, w)


class Conv2d(Module):
    """3x3 convolution, padding 1."""

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, label: str = "conv"):
        self.weight = _param(_uniform(rng, (3, 3, cin, cout), 9 * cin))
        self.bias = _param(_uniform(rng, (cout,), 9 * cin))
        self.stride = stride
        self.label = label

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)

    def macs(self, h, w):
        ho, wo = -(-h // self.stride), -(-w // self.stride)
        cin, cout = self.weight.shape[2:]
        return ho * wo * 9 * cin * cout, (ho, wo)


class DepthwiseConv(Module):
    def __init__(self, dim: int, rng: np.random.Generator, label: str = "dwconv"):
        self.kernel = _param(_uniform(rng, (3, 3, dim), 9))
        self.bias = _param(_uniform(rng, (dim,), 9))
        self.label = label

    def forward(self, x: Tensor) -> Tensor:
        return add(depthwise_conv3x3(x, self.kernel), self.bias)

    def macs(self, h, w):
        return h * w * 9 * self.kernel.shape[2], (h, w)


class LayerNorm(Module):
    def __init__(self, dim: int, label: str = "norm"):
        self.weight = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.label = label

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)

    def macs(self, h, w):
        return 0, (h, w)


class DHConv(Module):
    """Multi-head dynamic hypergraph convolution with FC fusion."""

    def __init__(self, dim: int, heads: int, cfg: ModelConfig, rng: np.random.Generator, label: str = "dhconv"):
        self.heads = [HeadParams.init(dim, cfg.head_dim, cfg.num_rates, rng) for _ in range(heads)]
        self.fusion = Linear(heads * cfg.head_dim, dim, rng, label=f"{label}.fusion")
        self.cfg = cfg
        self.label = label

    def forward(self, x: Tensor) -> Tensor:
        out = multi_head_dhconv(PatchField(x), self.heads, self.fusion.weight, self.fusion.bias, self.cfg)
        return out.features

    def macs(self, h, w):
        cfg = self.cfg
        n, dp, d = h * w, cfg.head_dim, self.fusion.weight.shape[1]
        rows, cols = -(-h // cfg.window), -(-w // cfg.window)
        taps = cfg.num_rates * cfg.kernel ** 2 * rows * cols
        per_head = (
            2 * n * d * dp  # similarity and value projections
            + 2 * n * dp  # centroid pooling (similarity and value space)
            + n * cfg.centroids * dp  # cosine similarities
            + 2 * n * dp  # cluster aggregation and scatter
            + 2 * taps * dp  # dilated aggregation and scatter
            + 9 * n * dp  # depthwise conv
            + n * dp * dp  # FC
        )
        fusion, _ = self.fusion.macs(h, w)
        return len(self.heads) * per_head + fusion, (h, w)


class ConvFFN(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator, label: str = "ffn"):
        self.fc1 = Linear(dim, dim * ratio, rng, label=f"{label}.fc1")
        self.dw = DepthwiseConv(dim * ratio, rng, label=f"{label}.dw")
        self.fc2 = Linear(dim * ratio, dim, rng, label=f"{label}.fc2")
        self.label = label

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.dw(self.fc1(x))))

    def macs(self, h, w):
        return sum(m.macs(h, w)[0] for m in (self.fc1, self.dw, self.fc2)), (h, w)


class Block(Module):
    def __init__(self, dim: int, heads: int, cfg: ModelConfig, rng: np.random.Generator, label: str = "block"):
        self.norm1 = LayerNorm(dim, label=f"{label}.norm1")
        self.dhconv = DHConv(dim, heads, cfg, rng, label=f"{label}.dhconv")
        self.norm2 = LayerNorm(dim, label=f"{label}.norm2")
        self.ffn = ConvFFN(dim, cfg.ffn_ratio, rng, label=f"{label}.ffn")
        self.label = label

    def forward(self, x: Tensor) -> Tensor:
        x = add(x, self.dhconv(self.norm1(x)))
        return add(x, self.ffn(self.norm2(x)))

    def macs(self, h, w):
        return self.dhconv.macs(h, w)[0] + self.ffn.macs(h, w)[0], (h, w)


class Pyramid(Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        d = cfg.channels
        half = max(1, d[0] // 2)
        self.cfg = cfg
        self.label = cfg.name
        self.stem = [Conv2d(3, half, 2, rng, "stem.0"), Conv2d(half, d[0], 2, rng, "stem.1")]
        self.downsample = [Conv2d(d[s - 1], d[s], 2, rng, f"down.{s}") for s in range(1, 4)]
        self.stages = [
            [Block(d[s], cfg.heads[s], cfg, rng, f"stage{s + 1}.block{b}") for b in range(cfg.blocks[s])]
            for s in range(4)
        ]
        self.head = Linear(d[3], cfg.num_classes, rng, label="head")

    def named_parameters(self, prefix: str = ""):
        for i, conv in enumerate(self.stem):
            yield from conv.named_parameters(f"{prefix}stem.{i}.")
        for s in range(4):
            if s > 0:
                yield from self.downsample[s - 1].named_parameters(f"{prefix}down.{s}.")
            for b, block in enumerate(self.stages[s]):
                yield from block.named_parameters(f"{prefix}stage{s + 1}.block{b}.")
        yield from self.head.named_parameters(f"{prefix}head.")

    def stage_features(self, image: Tensor) -> List[Tensor]:
        """Outputs of the four stages."""
        x = self.stem_forward(image)
        feats = []
        for s in range(4):
            x = self.stage_forward(s, x)
            feats.append(x)
        return feats

    def stem_forward(self, image: Tensor) -> Tensor:
        image = as_tensor(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
        return self.stem[1](gelu(self.stem[0](image)))

    def stage_input(self, s: int, x: Tensor) -> Tensor:
        return self.downsample[s - 1](x) if s > 0 else x

    def stage_forward(self, s: int, x: Tensor) -> Tensor:
        x = self.stage_input(s, x)
        for block in self.stages[s]:
            x = block(x)
        return x

    def forward(self, image: Tensor) -> Tensor:
        x = self.stage_features(image)[-1]
        return self.head(reduce_mean(x, axis=(0, 1)).reshape(1, -1)).reshape(-1)

    def macs(self, h, w):
        total = 0
        for conv in self.stem:
            m, (h, w) = conv.macs(h, w)
            total += m
        for s in range(4):
            if s > 0:
                m, (h, w) = self.downsample[s - 1].macs(h, w)
                total += m
            for block in self.stages[s]:
                total += block.macs(h, w)[0]
        total += self.head.macs(1, 1)[0]
        return total, (h, w)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = [k for k in params if k not in state]
        if missing:
            raise WeightFormatError(f"weights file lacks tensor {missing[0]!r}", missing[0])
        extra = [k for k in state if k not in params]
        if extra:
            raise WeightFormatError(f"weights file has unknown tensor {extra[0]!r}", extra[0])
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ShapeMismatchError(name, t.shape, state[name].shape)
        for name, t in params.items():
            t.data = np.array(state[name], dtype=np.float64)


def build_model(cfg: ModelConfig) -> Pyramid:
    cfg.validate()
    return Pyramid(cfg)


def forward(model: Pyramid, image) -> Tensor:
    return model(as_tensor(image))


def count_params_flops(model: Pyramid, input_size: Union[int, Tuple[int, int]] = 224) -> Tuple[int, int]:
    """Exact parameter count and analytic multiply-adds for one image."""
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    return model.num_params(), model.macs(h, w)[0]


def save_weights(model: Pyramid, path: Union[str, Path]):
    return save_tensors(path, model.state_dict())


def load_weights(model: Pyramid, path: Union[str, Path]) -> Pyramid:
    model.load_state_dict(load_tensors(path))
    return model


def stage_shapes(cfg: ModelConfig, size: int = 224) -> List[Tuple[int, int, int]]:
    """Spatial ladder the pyramid produces for a square input."""
    h = -(-(-(-size // 2)) // 2)
    shapes = []
    for s in range(4):
        if s > 0:
            h = -(-h // 2)
        shapes.append((h, h, cfg.channels[s]))
    return shapes


def zero_residual_branches(model: Pyramid) -> None:
    """Zero the last FC of every DHConv and ConvFFN, turning blocks into identities."""
    for blocks in model.stages:
        for block in blocks:
            for lin in (block.dhconv.fusion, block.ffn.fc2):
                lin.weight.data[...] = 0.0
                lin.bias.data[...] = 0.0


def param_group(name: str) -> str:
    """Coarse group a parameter belongs to (used in gradient-check reports)."""
    leaf = name.rsplit(".", 1)[-1]
    if ".heads." in name:
        return {
            "sim_weight": "similarity_proj", "sim_bias": "similarity_proj",
            "value_weight": "value_proj", "value_bias": "value_proj",
            "alpha": "gate_alpha", "beta": "gate_beta", "eps": "gin_eps",
            "rate_weights": "rate_weights", "conv_kernel": "vertex_conv", "conv_bias": "vertex_conv",
            "fc_weight": "vertex_fc", "fc_bias": "vertex_fc",
        }[leaf]
    for key, group in ((".fusion.", "head_fusion"), (".norm", "norm"), (".ffn.", "conv_ffn"),
                       ("stem.", "stem"), ("down.", "downsample"), ("head.", "classifier")):
        if key in name or name.startswith(key):
            return group
    return "other"
