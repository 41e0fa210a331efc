"""U-Net generator and residual-free DnCNN denoiser built on the autodiff ops."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from petrecon.autodiff import Parameter, Tensor
from petrecon.autodiff import ops
from petrecon.errors import InputError

Forward = Callable[[Tensor], Tensor]

_MAGIC = b"PRPARAM1"


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    base_channels: int = 64
    depth: int = 4
    input_channels: int = 1
    output_channels: int = 1

    def __post_init__(self):
        if self.kind not in ("generator", "denoiser"):
            raise InputError(f"unknown network kind {self.kind!r}")
        if self.depth < 1 or self.base_channels < 1:
            raise InputError("depth and base_channels must be >= 1")
        if self.kind == "denoiser" and self.depth < 2:
            raise InputError("the denoiser needs depth >= 2")

    @classmethod
    def generator(cls, base_channels: int = 64, depth: int = 4) -> "NetworkSpec":
        return cls("generator", base_channels, depth)

    @classmethod
    def denoiser(cls, base_channels: int = 64, depth: int = 8) -> "NetworkSpec":
        return cls("denoiser", base_channels, depth)


class ParamSet:
    """Ordered ``name -> Parameter`` map for one network."""

    def __init__(self, params: "OrderedDict[str, Parameter]", init_seed: int):
        self.params = params
        self.init_seed = int(init_seed)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    @property
    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=np.float64).reshape(p.shape)

    def vector(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def tobytes(self) -> bytes:
        """Concatenated little-endian float32 values in name order."""
        return b"".join(p.data.astype("<f4").tobytes() for p in self.params.values())


def init_params(layout: list[tuple[str, tuple[int, ...], str]], seed: int) -> dict[str, np.ndarray]:
    """He-normal conv weights, zero biases and BN shifts, unit BN scales.

    Draws happen in ``layout`` order from one generator, so the result is a
    pure function of ``(layout, seed)``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape, role in layout:
        if role == "weight":
            fan_in = int(np.prod(shape[1:]))
            out[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif role == "bn_gamma":
            out[name] = np.ones(shape)
        else:
            out[name] = np.zeros(shape)
    return out


def _make_paramset(layout, seed) -> ParamSet:
    values = init_params(layout, seed)
    params = OrderedDict((name, Parameter(values[name], name, role)) for name, _, role in layout)
    return ParamSet(params, seed)


def _conv_layout(prefix, cin, cout, k, bn):
    rows = [(f"{prefix}.weight", (cout, cin, k, k), "weight"), (f"{prefix}.bias", (cout,), "bias")]
    if bn:
        rows += [(f"{prefix}.bn.gamma", (cout,), "bn_gamma"), (f"{prefix}.bn.beta", (cout,), "bn_beta")]
    return rows


def _conv_bn_relu(ps: ParamSet, prefix: str, x: Tensor, bn: bool = True, act: bool = True):
    k = ps[f"{prefix}.weight"].shape[-1]
    h = ops.conv2d(x, ps[f"{prefix}.weight"], ps[f"{prefix}.bias"], padding=(k - 1) // 2)
    if bn:
        h = ops.batch_norm(h, ps[f"{prefix}.bn.gamma"], ps[f"{prefix}.bn.beta"])
    return ops.relu(h) if act else h


def generator_channels(spec: NetworkSpec) -> tuple[list[int], int, list[int]]:
    """Encoder widths, bottleneck width and decoder output widths."""
    enc = [spec.base_channels * 2**level for level in range(spec.depth)]
    dec = [enc[max(level - 1, 0)] for level in range(spec.depth)]
    return enc, enc[-1], dec


def build_generator(spec: NetworkSpec, seed: int) -> tuple[ParamSet, Forward]:
    """U-Net with ``spec.depth`` contracting/expansive pairs and skip connections.

    Each block is two (3x3 conv, BN, ReLU) layers.  The expansive path upsamples
    bilinearly, concatenates ``[skip, upsampled]`` and applies a block; a final
    1x1 conv maps ``base_channels`` to one linear output channel.
    """
    if spec.kind != "generator":
        raise InputError("build_generator needs a generator spec")
    enc, mid, dec = generator_channels(spec)
    layout = []
    cin = spec.input_channels
    for level, c in enumerate(enc):
        layout += _conv_layout(f"enc{level}.conv1", cin, c, 3, True)
        layout += _conv_layout(f"enc{level}.conv2", c, c, 3, True)
        cin = c
    layout += _conv_layout("mid.conv1", cin, mid, 3, True)
    layout += _conv_layout("mid.conv2", mid, mid, 3, True)
    below = mid
    for level in reversed(range(spec.depth)):
        layout += _conv_layout(f"dec{level}.conv1", enc[level] + below, dec[level], 3, True)
        layout += _conv_layout(f"dec{level}.conv2", dec[level], dec[level], 3, True)
        below = dec[level]
    layout += _conv_layout("head", below, spec.output_channels, 1, False)
    ps = _make_paramset(layout, seed)
    factor = 2**spec.depth

    def forward(z: Tensor) -> Tensor:
        h, w = z.shape[-2:]
        if h % factor or w % factor:
            raise InputError(f"generator input {h}x{w} not divisible by {factor}")
        skips = []
        x = z
        for level in range(spec.depth):
            x = _conv_bn_relu(ps, f"enc{level}.conv1", x)
            x = _conv_bn_relu(ps, f"enc{level}.conv2", x)
            skips.append(x)
            x = ops.max_pool2(x)
        x = _conv_bn_relu(ps, "mid.conv1", x)
        x = _conv_bn_relu(ps, "mid.conv2", x)
        for level in reversed(range(spec.depth)):
            x = ops.concat_channels(skips[level], ops.upsample_bilinear2(x))
            x = _conv_bn_relu(ps, f"dec{level}.conv1", x)
            x = _conv_bn_relu(ps, f"dec{level}.conv2", x)
        return _conv_bn_relu(ps, "head", x, bn=False, act=False)

    return ps, forward


def build_denoiser(spec: NetworkSpec, seed: int) -> tuple[ParamSet, Forward]:
    """DnCNN body without the residual connection: the output is the image itself."""
    if spec.kind != "denoiser":
        raise InputError("build_denoiser needs a denoiser spec")
    c = spec.base_channels
    layout = _conv_layout("layer1", spec.input_channels, c, 3, False)
    for i in range(2, spec.depth):
        layout += _conv_layout(f"layer{i}", c, c, 3, True)
    layout += _conv_layout(f"layer{spec.depth}", c, spec.output_channels, 3, False)
    ps = _make_paramset(layout, seed)

    def forward(x: Tensor) -> Tensor:
        h = _conv_bn_relu(ps, "layer1", x, bn=False)
        for i in range(2, spec.depth):
            h = _conv_bn_relu(ps, f"layer{i}", h)
        return _conv_bn_relu(ps, f"layer{spec.depth}", h, bn=False, act=False)

    return ps, forward


def build_network(spec: NetworkSpec, seed: int) -> tuple[ParamSet, Forward]:
    if spec.kind == "generator":
        return build_generator(spec, seed)
    return build_denoiser(spec, seed)


def save_paramset(path: str | Path, spec: NetworkSpec, ps: ParamSet) -> None:
    """Checkpoint: magic, header length, JSON header, float32 payload."""
    header = {
        "spec": asdict(spec),
        "seed": ps.init_seed,
        "count": ps.count,
        "names": ps.names(),
        "shapes": [list(p.shape) for p in ps],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(ps.tobytes())


def load_paramset(path: str | Path) -> tuple[NetworkSpec, ParamSet, Forward]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise InputError(f"{path}: not a parameter checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    spec = NetworkSpec(**header["spec"])
    ps, forward = build_network(spec, header["seed"])
    data = np.frombuffer(raw[12 + n:], dtype="<f4")
    if data.size != header["count"] or ps.names() != header["names"]:
        raise InputError(f"{path}: checkpoint does not match its header")
    offset = 0
    arrays = {}
    for p in ps:
        arrays[p.name] = data[offset:offset + p.size].astype(np.float64)
        offset += p.size
    ps.restore(arrays)
    return spec, ps, forward
