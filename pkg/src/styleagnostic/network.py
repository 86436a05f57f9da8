"""Stage-structured CNN split into a feature extractor and two heads.

The first ``randomization_stage`` stages form the feature extractor; the
remaining stages plus pooling and a linear classifier form the content head.
The style head is a second instance of the content head's architecture with
its own parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import numcore as nc
from .numcore import Tensor


NORMS = ("layer", "instance")


@dataclass(frozen=True)
class StageCNNConfig:
    channels: tuple = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    num_classes: int = 7
    input_shape: tuple = (3, 32, 32)
    randomization_stage: int = 3
    kernel_size: int = 3
    norm_eps: float = 1e-5
    norm: str = "layer"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def validate(self) -> None:
        if self.num_stages < 2:
            raise ValueError("need at least two stages")
        if not 1 <= self.randomization_stage < self.num_stages:
            raise ValueError(
                f"randomization_stage must be in [1, {self.num_stages - 1}], got {self.randomization_stage}")
        if self.blocks_per_stage < 1 or self.num_classes < 1:
            raise ValueError("blocks_per_stage and num_classes must be positive")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (C, H, W)")
        _, h, w = self.input_shape
        if h % 2 ** self.num_stages or w % 2 ** self.num_stages:
            raise ValueError(f"input {h}x{w} is not divisible by 2^{self.num_stages}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageCNNConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class Module:
    """Container of named parameters and child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, list):
                for i, child in enumerate(value):
                    if isinstance(child, Module):
                        yield from child.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class ConvBlock(Module):
    """conv (no bias) -> normalization with per-channel scale/shift -> relu

    ``layer`` normalizes each sample over (C, H, W), leaving the relative
    per-channel statistics free to vary between samples. ``instance``
    normalizes every channel separately, which fixes each channel's statistics
    to the affine parameters.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int, k: int, eps: float, rng: np.random.Generator,
                 norm: str = "layer"):
        fan_in = in_ch * k * k
        self.conv_weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k)), requires_grad=True)
        self.norm_weight = Tensor(np.ones(out_ch), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = k // 2
        self.eps = eps
        self.norm = norm

    def __call__(self, x: Tensor) -> Tensor:
        h = nc.conv2d(x, self.conv_weight, None, self.stride, self.padding)
        h = nc.layer_norm(h, self.eps) if self.norm == "layer" else nc.instance_norm(h, self.eps)
        c = h.shape[1]
        h = h * nc.reshape(self.norm_weight, (1, c, 1, 1)) + nc.reshape(self.norm_bias, (1, c, 1, 1))
        return nc.relu(h)

    def affine(self) -> list[Tensor]:
        return [self.norm_weight, self.norm_bias]


class Stage(Module):
    """Blocks sharing one spatial size; the first halves the resolution."""

    def __init__(self, in_ch: int, out_ch: int, cfg: StageCNNConfig, rng: np.random.Generator):
        self.blocks = [ConvBlock(in_ch if i == 0 else out_ch, out_ch, 2 if i == 0 else 1,
                                 cfg.kernel_size, cfg.norm_eps, rng, cfg.norm)
                       for i in range(cfg.blocks_per_stage)]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class FeatureExtractor(Module):
    def __init__(self, cfg: StageCNNConfig, rng: np.random.Generator):
        chans = (cfg.input_shape[0],) + cfg.channels
        self.stages = [Stage(chans[i], chans[i + 1], cfg, rng) for i in range(cfg.randomization_stage)]
        self.input_shape = cfg.input_shape
        self.out_channels = cfg.channels[cfg.randomization_stage - 1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape} does not match (N,)+{self.input_shape}")
        for stage in self.stages:
            x = stage(x)
        return x

    def affine_parameters(self) -> list[Tensor]:
        return [p for stage in self.stages for block in stage.blocks for p in block.affine()]


class Head(Module):
    """Remaining stages, global average pooling and a linear classifier."""

    def __init__(self, cfg: StageCNNConfig, rng: np.random.Generator):
        r = cfg.randomization_stage
        self.stages = [Stage(cfg.channels[i - 1], cfg.channels[i], cfg, rng) for i in range(r, cfg.num_stages)]
        width = cfg.channels[-1]
        bound = 1.0 / np.sqrt(width)
        self.fc_weight = Tensor(rng.uniform(-bound, bound, (cfg.num_classes, width)), requires_grad=True)
        self.fc_bias = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
        self.in_channels = cfg.channels[r - 1]

    def features(self, z: Tensor) -> Tensor:
        """Pooled activations feeding the classifier (the penultimate layer)."""
        if z.ndim != 4 or z.shape[1] != self.in_channels:
            raise ValueError(f"head expects (N,{self.in_channels},H,W) features, got shape {z.shape}")
        for stage in self.stages:
            z = stage(z)
        return nc.global_avg_pool(z)

    def __call__(self, z: Tensor) -> Tensor:
        """Log-probabilities, shape (N, K)."""
        return nc.log_softmax(nc.linear(self.features(z), self.fc_weight, self.fc_bias), axis=1)

    @property
    def feature_dim(self) -> int:
        return self.fc_weight.shape[1]


@dataclass
class ModelBundle:
    config: StageCNNConfig
    features: FeatureExtractor
    content_head: Head
    style_head: Head
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.features.named_parameters("f.")
        yield from self.content_head.named_parameters("c.")
        yield from self.style_head.named_parameters("s.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    @property
    def param_groups(self) -> dict[str, list[Tensor]]:
        return {
            "f_all": self.features.parameters(),
            "f_affine": self.features.affine_parameters(),
            "c_all": self.content_head.parameters(),
            "s_all": self.style_head.parameters(),
        }

    @property
    def dtype(self) -> np.dtype:
        return self.features.stages[0].blocks[0].conv_weight.dtype

    def inference_parameters(self) -> list[Tensor]:
        return self.features.parameters() + self.content_head.parameters()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}


def build_model(config: StageCNNConfig, seed: int = 0, dtype=None) -> ModelBundle:
    """Initialize all three sub-networks deterministically from ``seed``.

    Each sub-network draws from its own child stream, so the style head is
    initialized independently of the content head.
    """
    config.validate()
    f_ss, c_ss, s_ss = np.random.SeedSequence(seed).spawn(3)
    model = ModelBundle(config,
                        FeatureExtractor(config, np.random.default_rng(f_ss)),
                        Head(config, np.random.default_rng(c_ss)),
                        Head(config, np.random.default_rng(s_ss)),
                        seed=seed)
    dtype = np.dtype(dtype) if dtype is not None else nc.default_dtype()
    for _, p in model.named_parameters():
        p.data = p.data.astype(dtype)
    for name, p in model.named_parameters():
        p.name = name
    return model


def forward_features(features: FeatureExtractor, x: Tensor) -> Tensor:
    return features(x)


def forward_head(head: Head, z: Tensor) -> Tensor:
    return head(z)


def inference(model: ModelBundle, x) -> Tensor:
    """Test-time prediction: content head on unrandomized features, no style head."""
    x = nc.as_tensor(x)
    with nc.no_grad():
        return model.content_head(model.features(x))


def predict(model: ModelBundle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ties go to the lowest index."""
    out = []
    for i in range(0, len(images), batch_size):
        logp = inference(model, Tensor(images[i:i + batch_size], dtype=model.dtype))
        out.append(np.argmax(logp.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def parameter_count(params) -> int:
    return int(sum(p.size for p in params))


def inference_multiplies(model: ModelBundle) -> int:
    """Scalar multiplies in conv and linear layers for one image at inference."""
    x = Tensor(np.zeros((1,) + model.config.input_shape), dtype=model.dtype)
    with nc.count_multiplies() as counter:
        inference(model, x)
    return counter.total


# checkpoint container -------------------------------------------------------------------

MAGIC = b"SAGNCKPT"
FORMAT_VERSION = 1


def save_checkpoint(model: ModelBundle, path, extra: Optional[dict] = None) -> Path:
    """Write the model to a self-describing binary file.

    Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
    header, then every parameter as little-endian float32 in header order.
    """
    path = Path(path)
    groups = model.param_groups
    group_of = {}
    for gname in ("f_all", "c_all", "s_all"):
        for p in groups[gname]:
            group_of[id(p)] = gname
    affine_ids = {id(p) for p in groups["f_affine"]}
    entries, offset, payload = [], 0, []
    for name, p in model.named_parameters():
        buf = p.data.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(buf),
                        "group": group_of[id(p)], "affine": id(p) in affine_ids})
        payload.append(buf)
        offset += len(buf)
    header = {"format": "styleagnostic-checkpoint", "version": FORMAT_VERSION, "dtype": "<f4",
              "config": model.config.to_dict(), "seeds": {"init": model.seed},
              "meta": dict(model.meta, **(extra or {})), "tensors": entries}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for buf in payload:
            fh.write(buf)
    return path


def read_checkpoint_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return json.loads(fh.read(hlen).decode("utf-8")), 16 + hlen


def load_checkpoint(path, dtype=None) -> ModelBundle:
    header, start = read_checkpoint_header(path)
    config = StageCNNConfig.from_dict(header["config"])
    model = build_model(config, seed=header["seeds"]["init"], dtype=dtype)
    model.meta = header.get("meta", {})
    blob = Path(path).read_bytes()[start:]
    params = dict(model.named_parameters())
    if set(params) != {e["name"] for e in header["tensors"]}:
        raise ValueError("checkpoint parameters do not match the architecture")
    for e in header["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])), offset=e["offset"])
        p = params[e["name"]]
        p.data = arr.reshape(e["shape"]).astype(p.data.dtype)
    return model
