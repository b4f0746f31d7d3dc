"""Small encoder-decoder depth network with named, capturable layers."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bins import BinningScheme
from .tensor import Tensor

CHECKPOINT_FORMAT = "depth-dissect-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    """One 3x3 conv block.

    kind: ``conv`` (plain, optional stride), ``up`` (2x bilinear upsample
    then conv) or ``fuse`` (concat all earlier ``conv`` outputs resized to the
    current resolution, then conv).
    """

    name: str
    channels: int
    kind: str = "conv"
    stride: int = 1


def default_blocks() -> tuple[BlockSpec, ...]:
    return (
        BlockSpec("enc1", 16, "conv", 2),
        BlockSpec("enc2", 32, "conv", 2),
        BlockSpec("enc3", 64, "conv", 2),
        BlockSpec("mff", 64, "fuse"),
        BlockSpec("d", 64, "up"),
        BlockSpec("rconv0", 32, "conv"),
        BlockSpec("rconv1", 32, "conv"),
    )


@dataclass(frozen=True)
class NetConfig:
    in_h: int = 64
    in_w: int = 64
    in_channels: int = 3
    blocks: tuple[BlockSpec, ...] = field(default_factory=default_blocks)
    interpretable_layers: tuple[str, ...] = ("mff", "d", "rconv0", "rconv1")
    activation: str = "elu"
    d_min: float = 1.0
    d_max: float = 10.0

    def __post_init__(self):
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError("block names must be unique")
        for name in self.interpretable_layers:
            if name not in names:
                raise ValueError(f"interpretable layer {name!r} is not a block")
            if self.units(name) < 2:
                raise ValueError(f"layer {name!r} needs at least 2 units")
        if self.activation not in ("elu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        for b in self.blocks:
            if b.kind not in ("conv", "up", "fuse"):
                raise ValueError(f"unknown block kind {b.kind!r}")

    def units(self, name: str) -> int:
        for b in self.blocks:
            if b.name == name:
                return b.channels
        raise KeyError(f"unknown layer {name!r}")

    def layer_shapes(self) -> dict[str, tuple[int, int, int]]:
        """(channels, h, w) of every block output."""
        shapes = {}
        h, w, c = self.in_h, self.in_w, self.in_channels
        for b in self.blocks:
            if b.kind == "up":
                h, w = 2 * h, 2 * w
            elif b.kind == "conv" and b.stride > 1:
                h = (h + 2 - 3) // b.stride + 1
                w = (w + 2 - 3) // b.stride + 1
            c = b.channels
            shapes[b.name] = (c, h, w)
        return shapes

    def input_channels(self) -> dict[str, int]:
        cin = {}
        c = self.in_channels
        seen_conv = []
        for b in self.blocks:
            if b.kind == "fuse":
                cin[b.name] = sum(self.units(n) for n in seen_conv)
            else:
                cin[b.name] = c
            if b.kind == "conv":
                seen_conv.append(b.name)
            c = b.channels
        cin["head"] = c
        return cin

    def param_count(self) -> int:
        cin = self.input_channels()
        total = sum(9 * cin[b.name] * b.channels + b.channels for b in self.blocks)
        return total + 9 * cin["head"] + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["interpretable_layers"] = list(self.interpretable_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        d["interpretable_layers"] = tuple(d["interpretable_layers"])
        return cls(**d)


class Network:
    def __init__(self, config: NetConfig, params: dict[str, Tensor], binning: BinningScheme | None = None,
                 metadata: dict | None = None):
        self.config = config
        self.params = params
        self.binning = binning
        self.metadata = metadata or {}
        self._act = T.elu if config.activation == "elu" else T.relu

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "Network":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype) for k, v in self.params.items()}
        return Network(self.config, params, self.binning, dict(self.metadata))

    def flat_weights(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()]).astype("<f4")

    # ------------------------------------------------------------------
    def _run(self, image: Tensor, capture=(), override: tuple[str, Tensor] | None = None):
        cfg = self.config
        names = {b.name for b in cfg.blocks}
        for name in capture:
            if name not in names:
                raise KeyError(f"unknown layer {name!r}")
        if image.data.ndim != 4 or image.shape[1:] != (cfg.in_channels, cfg.in_h, cfg.in_w):
            raise ValueError(f"expected input (N, {cfg.in_channels}, {cfg.in_h}, {cfg.in_w}), got {image.shape}")

        acts: dict[str, Tensor] = {}
        conv_outs: list[Tensor] = []
        x = image
        skip_until = -1
        if override is not None:
            pos = [b.name for b in cfg.blocks].index(override[0])
            # upstream blocks only matter if a later fuse block reads them
            if not any(b.kind == "fuse" for b in cfg.blocks[pos + 1:]):
                skip_until = pos
        for i, b in enumerate(cfg.blocks):
            if i < skip_until:
                continue
            if override is not None and b.name == override[0]:
                x = override[1]
            else:
                w, bias = self.params[f"{b.name}.w"], self.params[f"{b.name}.b"]
                if b.kind == "up":
                    x = T.bilinear_resize(x, 2 * x.shape[2], 2 * x.shape[3])
                elif b.kind == "fuse":
                    h, wd = x.shape[2], x.shape[3]
                    x = T.concat([o if o.shape[2:] == (h, wd) else T.bilinear_resize(o, h, wd) for o in conv_outs])
                x = self._act(T.conv2d(x, w, bias, stride=b.stride, padding=1))
            if b.kind == "conv":
                conv_outs.append(x)
            if b.name in capture:
                acts[b.name] = x
        z = T.conv2d(x, self.params["head.w"], self.params["head.b"], stride=1, padding=1)
        if z.shape[2:] != (cfg.in_h, cfg.in_w):
            z = T.bilinear_resize(z, cfg.in_h, cfg.in_w)
        lo, hi = math.log(cfg.d_min), math.log(cfg.d_max)
        pred = T.exp(T.sigmoid(z) * (hi - lo) + lo)
        return pred, acts

    def forward(self, image, capture=()):
        """Return (depth prediction, {layer: activation}) for the captured layers."""
        return self._run(T.as_tensor(image), capture)

    def forward_with_override(self, image, layer: str, override) -> Tensor:
        """Re-run the network with ``layer``'s output replaced by ``override``."""
        override = T.as_tensor(override)
        shapes = self.config.layer_shapes()
        if layer not in shapes:
            raise KeyError(f"unknown layer {layer!r}")
        image = T.as_tensor(image)
        expected = (image.shape[0],) + shapes[layer]
        if override.shape != expected:
            raise ValueError(f"override shape {override.shape} != activation shape {expected}")
        pred, _ = self._run(image, (), (layer, override))
        return pred

    __call__ = forward


def build(config: NetConfig | None = None, seed: int = 0, binning: BinningScheme | None = None) -> Network:
    """Fresh network; weights ~ U(-a, a) with a = sqrt(6 / fan_in)."""
    config = config or NetConfig()
    rng = np.random.default_rng(seed)
    cin = config.input_channels()
    params: dict[str, Tensor] = {}
    for b in config.blocks:
        fan_in = 9 * cin[b.name]
        bound = math.sqrt(6.0 / fan_in)
        params[f"{b.name}.w"] = Tensor(rng.uniform(-bound, bound, (b.channels, cin[b.name], 3, 3)), requires_grad=True)
        params[f"{b.name}.b"] = Tensor(np.zeros(b.channels), requires_grad=True)
    bound = math.sqrt(1.0 / (9 * cin["head"]))
    params["head.w"] = Tensor(rng.uniform(-bound, bound, (1, cin["head"], 3, 3)), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(1), requires_grad=True)
    return Network(config, params, binning)


# ---------------------------------------------------------------------------
# checkpoints


def save(net: Network, path) -> None:
    layout = [[k, list(v.shape)] for k, v in net.params.items()]
    blob = net.flat_weights().tobytes()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "binning": net.binning.to_dict() if net.binning else None,
        "metadata": net.metadata,
        "layout": layout,
        "count": len(blob) // 4,
    }
    # the offset field is part of the header, so fix its width before encoding
    header["offset"] = 0
    head = json.dumps(header, sort_keys=True).encode()
    header["offset"] = len(head) + 16 + 1
    head = json.dumps(header, sort_keys=True).encode()
    head = head + b" " * (header["offset"] - 1 - len(head)) + b"\n"
    with open(path, "wb") as f:
        f.write(head)
        f.write(blob)


def load(path) -> Network:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: corrupt checkpoint header") from e
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a depth-dissect checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {header.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    config = NetConfig.from_dict(header["config"])
    blob = np.frombuffer(raw[header["offset"]:], dtype="<f4")
    if blob.size != header["count"] or blob.size != config.param_count():
        raise ValueError(f"{path}: weight blob has {blob.size} values, config needs {config.param_count()}")
    params, pos = {}, 0
    for name, shape in header["layout"]:
        size = int(np.prod(shape))
        params[name] = Tensor(blob[pos:pos + size].reshape(shape).copy(), requires_grad=True)
        pos += size
    binning = BinningScheme.from_dict(header["binning"]) if header.get("binning") else None
    return Network(config, params, binning, header.get("metadata") or {})
