"""Fixed-seed proxy feature networks.

Desk-scale stand-ins for the large pretrained networks that perceptual,
identity, and embedding losses normally lean on.  Each net is a stack of
four stride-2 convolutions with leaky_relu, exposing the activation after
every stage as a tap; the last tap is spatially averaged into a flat
embedding.  Weights are drawn once from a published seed and then made
immutable (read-only arrays, no trainable tensors), so a proxy behaves as
a fixed measurement instrument: random conv features are not a learned
perceptual metric, but they are distance-discriminative enough to rank
reconstructions, and two constructions from the same seed agree bitwise.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .rng import Rng
from .tensor import Tensor

PROXY_CHANNELS = (32, 64, 128, 128)
EMBED_DIM = PROXY_CHANNELS[-1]
N_STAGES = len(PROXY_CHANNELS)

# Published seeds for the three instruments used across the package.
PERCEPTUAL_SEED = 2101
IDENTITY_SEED = 2102
EMBEDDER_SEED = 2103


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tn.tensor(x)


class ProxyNet:
    """Four stride-2 conv stages; taps after each; mean-pooled embedding."""

    def __init__(self, seed: int, in_channels: int, channels, params):
        self.seed = seed
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.params = params

    @classmethod
    def create(cls, seed: int, in_channels: int = 3,
               channels=PROXY_CHANNELS) -> "ProxyNet":
        channels = tuple(channels)
        if len(channels) != N_STAGES:
            raise ContractError(
                f"ProxyNet: {len(channels)} stages, want {N_STAGES}")
        if in_channels < 1:
            raise ContractError(f"ProxyNet: in_channels {in_channels}")
        rng = Rng(seed).child("proxy")
        params = {}
        c_in = in_channels
        for s, c_out in enumerate(channels):
            w = rng.child(f"stage{s}").normal(
                (c_out, c_in, 3, 3), std=float(np.sqrt(2.0 / (c_in * 9))))
            b = np.zeros(c_out, dtype=np.float32)
            w.flags.writeable = False
            b.flags.writeable = False
            params[f"stage{s}.weight"] = tn.tensor(w)
            params[f"stage{s}.bias"] = tn.tensor(b)
            c_in = c_out
        return cls(seed, in_channels, channels, params)

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.astype("<f4").tobytes())
        return h.hexdigest()

    def features(self, image) -> list:
        """Image [C, H, W] -> taps [c_s, H/2^(s+1), W/2^(s+1)] per stage."""
        x = _as_tensor(image)
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ContractError(
                f"ProxyNet.features: input shape {x.shape}, want "
                f"({self.in_channels}, H, W)")
        div = 2 ** N_STAGES
        if x.shape[1] % div or x.shape[2] % div:
            raise ContractError(
                f"ProxyNet.features: spatial extents {x.shape[1:]} must be "
                f"divisible by {div}")
        taps = []
        for s, c_out in enumerate(self.channels):
            y = tn.subsample2x(tn.conv2d(x, self.params[f"stage{s}.weight"]))
            x = tn.leaky_relu(tn.add(y, tn.reshape(
                self.params[f"stage{s}.bias"], (c_out, 1, 1))))
            taps.append(x)
        return taps

    def embed(self, image) -> Tensor:
        """Spatial mean of the last tap: [embed_dim] raw (unnormalized)."""
        last = self.features(image)[-1]
        c = last.shape[0]
        return tn.mean(tn.reshape(last, (c, last.shape[1] * last.shape[2])),
                       axis=1)


def perceptual_distance(net: ProxyNet, a, b) -> Tensor:
    """Mean over taps of the mean squared activation difference."""
    ta = net.features(a)
    tb = net.features(b)
    acc = None
    for fa, fb in zip(ta, tb):
        d = tn.sub(fa, fb)
        term = tn.mean(tn.mul(d, d))
        acc = term if acc is None else tn.add(acc, term)
    return tn.scale(acc, 1.0 / len(ta))


def identity_gap(net: ProxyNet, a, b) -> Tensor:
    """1 - cosine(embed(a), embed(b)); zero for identical images."""
    return tn.shift(tn.scale(
        tn.cosine_similarity(net.embed(a), net.embed(b)), -1.0), 1.0)


def perceptual_net() -> ProxyNet:
    return ProxyNet.create(PERCEPTUAL_SEED)


def identity_net() -> ProxyNet:
    return ProxyNet.create(IDENTITY_SEED)


def embedder_net() -> ProxyNet:
    return ProxyNet.create(EMBEDDER_SEED)
