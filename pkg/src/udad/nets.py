"""Encoder-decoder generators, encoder-shaped discriminators, serialization."""

from __future__ import annotations

import json
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ShapeError

NN_MAGIC = b"UDADNN1"

_M64 = (1 << 64) - 1


def _splitmix64(state: int):
    """One step of the splitmix64 stream: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return state, (z ^ (z >> 31)) & _M64


class _SeedStream:
    def __init__(self, seed: int):
        self.state = int(seed) & _M64

    def next_rng(self) -> np.random.Generator:
        self.state, out = _splitmix64(self.state)
        return np.random.default_rng(out)


def _he_uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv3dLayer:
    def __init__(self, cin, cout, k, stride, padding, rng):
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _he_uniform(rng, (cout, cin, k, k, k), cin * k**3), requires_grad=True
        )
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def describe(self, name):
        return {
            "name": name,
            "type": "conv3d",
            "weight": list(self.weight.shape),
            "bias": list(self.bias.shape),
            "stride": self.stride,
            "padding": self.padding,
        }


class LinearLayer:
    def __init__(self, cin, cout, rng):
        self.weight = Tensor(_he_uniform(rng, (cout, cin), cin), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)

    def describe(self, name):
        return {
            "name": name,
            "type": "linear",
            "weight": list(self.weight.shape),
            "bias": list(self.bias.shape),
        }


def _check_arch(in_ch, depth, base_width):
    if depth < 2:
        raise ConfigError(f"depth must be at least 2, got {depth}")
    if in_ch < 1 or base_width < 1:
        raise ConfigError("channel counts must be positive")


class Generator:
    """U-shaped net: stride-2 conv encoder, upsample+conv decoder, skip concat.

    The final 1x1x1 head emits raw logits; any output activation is applied
    by the caller. forward returns (logits, encoder feature list).
    """

    kind = "generator"

    def __init__(self, in_ch: int, out_ch: int, depth: int = 3, base_width: int = 8,
                 seed: int = 0):
        _check_arch(in_ch, depth, base_width)
        if out_ch < 1:
            raise ConfigError("out_ch must be positive")
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.depth, self.base_width = int(depth), int(base_width)
        self.seed = int(seed)
        widths = [base_width * 2**i for i in range(depth)]
        self.widths = widths

        stream = _SeedStream(seed)
        self.enc = []
        prev = in_ch
        for w in widths:
            self.enc.append(Conv3dLayer(prev, w, 3, 2, 1, stream.next_rng()))
            prev = w
        self.dec_merge = []
        for i in range(depth - 1, 0, -1):
            cin = widths[i] + widths[i - 1]
            self.dec_merge.append(
                Conv3dLayer(cin, widths[i - 1], 3, 1, 1, stream.next_rng())
            )
        self.dec_top = Conv3dLayer(widths[0], widths[0], 3, 1, 1, stream.next_rng())
        self.head = Conv3dLayer(widths[0], out_ch, 1, 1, 0, stream.next_rng())

    def layers(self):
        out = list(self.enc) + list(self.dec_merge) + [self.dec_top, self.head]
        return out

    def parameters(self):
        params = []
        for layer in self.layers():
            params.extend([layer.weight, layer.bias])
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def _check_dims(self, x):
        dims = x.data.shape[2:]
        div = 2**self.depth
        if any(d % div for d in dims):
            raise ShapeError(
                f"spatial dims {tuple(dims)} not divisible by 2^depth = {div}"
            )
        if x.data.shape[1] != self.in_ch:
            raise ShapeError(
                f"expected {self.in_ch} input channels, got {x.data.shape[1]}"
            )

    def encode(self, x):
        x = ad.as_tensor(x)
        self._check_dims(x)
        feats = []
        h = x
        for conv in self.enc:
            h = ad.relu(conv(h))
            feats.append(h)
        return feats

    def forward(self, x):
        feats = self.encode(x)
        h = feats[-1]
        for i, conv in enumerate(self.dec_merge):
            h = ad.upsample2(h)
            h = ad.concat_ch(h, feats[self.depth - 2 - i])
            h = ad.relu(conv(h))
        h = ad.relu(self.dec_top(ad.upsample2(h)))
        return self.head(h), feats

    def descriptor(self):
        names = [f"enc{i}" for i in range(self.depth)]
        names += [f"dec{i}" for i in range(self.depth - 1)]
        names += ["dec_top", "head"]
        return {
            "format": "udad-network/1",
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "depth": self.depth,
            "base_width": self.base_width,
            "seed": self.seed,
            "layers": [l.describe(n) for l, n in zip(self.layers(), names)],
        }


class Discriminator:
    """Encoder stack, global average pool, linear head to one scalar per sample."""

    kind = "discriminator"

    def __init__(self, in_ch: int, depth: int = 3, base_width: int = 8, seed: int = 0):
        _check_arch(in_ch, depth, base_width)
        self.in_ch = int(in_ch)
        self.depth, self.base_width = int(depth), int(base_width)
        self.seed = int(seed)
        widths = [base_width * 2**i for i in range(depth)]
        self.widths = widths

        stream = _SeedStream(seed)
        self.enc = []
        prev = in_ch
        for w in widths:
            self.enc.append(Conv3dLayer(prev, w, 3, 2, 1, stream.next_rng()))
            prev = w
        self.linear = LinearLayer(widths[-1], 1, stream.next_rng())

    def layers(self):
        return list(self.enc) + [self.linear]

    def parameters(self):
        params = []
        for layer in self.layers():
            params.extend([layer.weight, layer.bias])
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, x):
        x = ad.as_tensor(x)
        if x.data.shape[1] != self.in_ch:
            raise ShapeError(
                f"expected {self.in_ch} input channels, got {x.data.shape[1]}"
            )
        h = x
        for conv in self.enc:
            h = ad.relu(conv(h))
        return self.linear(ad.global_avg_pool(h))

    def descriptor(self):
        names = [f"enc{i}" for i in range(self.depth)] + ["linear"]
        return {
            "format": "udad-network/1",
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": 1,
            "depth": self.depth,
            "base_width": self.base_width,
            "seed": self.seed,
            "layers": [l.describe(n) for l, n in zip(self.layers(), names)],
        }


def build_generator(in_ch, out_ch, depth=3, base_width=8, seed=0) -> Generator:
    return Generator(in_ch, out_ch, depth, base_width, seed)


def build_discriminator(in_ch, depth=3, base_width=8, seed=0) -> Discriminator:
    return Discriminator(in_ch, depth, base_width, seed)


def parameter_count(descriptor: dict) -> int:
    total = 0
    for layer in descriptor["layers"]:
        total += int(np.prod(layer["weight"])) + int(np.prod(layer["bias"]))
    return total


def save_network(net, path) -> None:
    desc = net.descriptor()
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(NN_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for layer in net.layers():
            fh.write(np.ascontiguousarray(layer.weight.data, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(layer.bias.data, dtype="<f4").tobytes())


def load_network(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(NN_MAGIC) or raw[: len(NN_MAGIC)] != NN_MAGIC:
        raise CheckpointError(f"{path}: not a network checkpoint")
    off = len(NN_MAGIC)
    if len(raw) < off + 4:
        raise CheckpointError(f"{path}: truncated descriptor length")
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + hlen:
        raise CheckpointError(f"{path}: truncated descriptor")
    try:
        desc = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed descriptor ({exc})") from exc
    off += hlen

    kind = desc.get("kind")
    if kind == "generator":
        net = Generator(
            desc["in_ch"], desc["out_ch"], desc["depth"], desc["base_width"],
            desc.get("seed", 0),
        )
    elif kind == "discriminator":
        net = Discriminator(
            desc["in_ch"], desc["depth"], desc["base_width"], desc.get("seed", 0)
        )
    else:
        raise CheckpointError(f"{path}: unknown network kind {kind!r}")

    built = net.descriptor()["layers"]
    if built != desc.get("layers"):
        raise CheckpointError(f"{path}: descriptor does not match the architecture")
    expected = parameter_count(desc) * 4
    if len(raw) - off != expected:
        raise CheckpointError(
            f"{path}: parameter payload holds {len(raw) - off} bytes, "
            f"descriptor implies {expected}"
        )
    for layer in net.layers():
        for t in (layer.weight, layer.bias):
            nbytes = t.data.size * 4
            block = np.frombuffer(raw[off : off + nbytes], dtype="<f4")
            t.data = block.reshape(t.data.shape).copy()
            off += nbytes
    return net
