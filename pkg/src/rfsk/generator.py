"""Miniature style-based generator with modulated convolutions.

Architecture, desk scale: a learned constant at the lowest resolution, two
3x3 convolutions per higher resolution block (one at the base), bilinear
upsampling between blocks, and a modulated 1x1 toRGB per block feeding an
upsampled skip sum. A mapping MLP turns normalized z into w; one affine head
per slot turns a row of w+ into per-input-channel modulation scales.

Kernel modulation follows the weight-demodulation convention: the static
kernel is scaled per input channel by s, a per-image residual matrix may be
added (uniformly across the 3x3 taps), and each output-channel slice is then
rescaled to unit L2 norm. toRGB kernels are modulated but never demodulated
and never take residuals.

The base kernels are drawn with a power-law singular spectrum rather than iid
noise: the bundle stands in for a converged model, whose kernels are strongly
low-rank, and the spectrum-analysis tooling depends on that structure being
present. Demodulation makes activation scales insensitive to this choice.

Every bundle is a pure function of (config, seed); synthesis is deterministic
unless noise injection is switched on explicitly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .rng import Rng
from .tensor import Tensor

DEMOD_EPS = 1e-8
KERNEL_SPECTRUM_DECAY = 1.5  # sigma_k ~ k^-decay for base conv kernels


@dataclass(frozen=True)
class SlotInfo:
    """One w+ row: a conv or toRGB layer in synthesis order."""
    w_index: int
    kind: str          # "conv" | "torgb"
    resolution: int
    c_in: int
    c_out: int
    conv_index: int    # index among conv slots, -1 for toRGB
    torgb_index: int   # index among toRGB slots, -1 for conv


@dataclass(frozen=True)
class GeneratorConfig:
    resolutions: tuple = (4, 8, 16, 32)
    channels: tuple = (64, 64, 32, 16)
    style_dim: int = 128
    mapping_depth: int = 4
    demodulate: bool = True
    demod_order: str = "after"   # residual added before ("after") or after ("before") demod
    noise_injection: bool = False

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.resolutions) != len(self.channels) or not self.resolutions:
            raise ContractError("resolutions and channels must pair up")
        for a, b in zip(self.resolutions, self.resolutions[1:]):
            if b != 2 * a:
                raise ContractError(f"resolutions must double: {self.resolutions}")
        for a, b in zip(self.channels, self.channels[1:]):
            if b > a:
                raise ContractError(f"channels must be non-increasing: {self.channels}")
        if min(self.channels) < 1 or self.style_dim < 1 or self.mapping_depth < 1:
            raise ContractError("channel/style/mapping extents must be positive")
        if self.demod_order not in ("before", "after"):
            raise ContractError(f"demod_order must be 'before' or 'after', got {self.demod_order!r}")

    @property
    def n_conv(self) -> int:
        return 1 + 2 * (len(self.resolutions) - 1)

    @property
    def n_w(self) -> int:
        return self.n_conv + len(self.resolutions)

    @property
    def output_resolution(self) -> int:
        return self.resolutions[-1]

    def slot_table(self):
        slots = []
        conv_i = 0
        rgb_i = 0
        prev_c = self.channels[0]
        for level, (res, ch) in enumerate(zip(self.resolutions, self.channels)):
            n_convs_here = 1 if level == 0 else 2
            for k in range(n_convs_here):
                c_in = prev_c if k == 0 else ch
                slots.append(SlotInfo(len(slots), "conv", res, c_in, ch, conv_i, -1))
                conv_i += 1
            slots.append(SlotInfo(len(slots), "torgb", res, ch, 3, -1, rgb_i))
            rgb_i += 1
            prev_c = ch
        return slots

    def conv_slots(self):
        return [s for s in self.slot_table() if s.kind == "conv"]

    def to_json(self) -> dict:
        return {
            "resolutions": list(self.resolutions),
            "channels": list(self.channels),
            "style_dim": self.style_dim,
            "mapping_depth": self.mapping_depth,
            "demodulate": self.demodulate,
            "demod_order": self.demod_order,
            "noise_injection": self.noise_injection,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorConfig":
        return cls(
            resolutions=tuple(d["resolutions"]),
            channels=tuple(d["channels"]),
            style_dim=int(d["style_dim"]),
            mapping_depth=int(d["mapping_depth"]),
            demodulate=bool(d["demodulate"]),
            demod_order=str(d["demod_order"]),
            noise_injection=bool(d["noise_injection"]),
        )


def _orthonormal_columns(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """[rows, cols] with orthonormal columns (rows >= cols)."""
    g = rng.normal((rows, cols), dtype=np.float64)
    q, r = np.linalg.qr(g)
    # fix signs so the factor is a deterministic function of g
    q = q * np.sign(np.diag(r))[None, :]
    return q


def _power_law_kernel(rng: Rng, c_out: int, c_in: int, taps: int = 9) -> np.ndarray:
    """[c_out, c_in, 3, 3] kernel whose flattened singular values decay as k^-1.5."""
    cols = c_in * taps
    rank = min(c_out, cols)
    sigma = np.arange(1, rank + 1, dtype=np.float64) ** (-KERNEL_SPECTRUM_DECAY)
    u = _orthonormal_columns(rng.child("u"), c_out, rank)
    v = _orthonormal_columns(rng.child("v"), cols, rank)
    flat = (u * sigma[None, :]) @ v.T
    # He-style scale: mean squared entry ~= 2 / fan_in
    target = math.sqrt(2.0 * c_out / (c_in * taps))
    flat = flat * (target / np.linalg.norm(flat))
    side = int(math.isqrt(taps))
    return flat.reshape(c_out, c_in, side, side).astype(np.float32)


class GeneratorBundle:
    """Container for generator weights plus the slot mapping table."""

    def __init__(self, config: GeneratorConfig, params: dict, seed: int):
        self.config = config
        self.params = params  # name -> Tensor, insertion-ordered
        self.seed = int(seed)
        self.slots = config.slot_table()

    @classmethod
    def create(cls, config: GeneratorConfig, seed: int) -> "GeneratorBundle":
        rng = Rng(seed).child("generator")
        d = config.style_dim
        params: dict = {}

        def add(name, arr):
            params[name] = Tensor(np.asarray(arr, dtype=np.float32))

        for i in range(config.mapping_depth):
            r = rng.child("mapping").child(i)
            add(f"mapping.{i}.weight", r.child("w").normal((d, d)) / math.sqrt(d))
            add(f"mapping.{i}.bias", np.zeros(d))
        add("const", rng.child("const").normal((config.channels[0], 4, 4)))
        for slot in config.slot_table():
            r = rng.child("slot").child(slot.w_index)
            add(f"affine.{slot.w_index}.weight",
                r.child("aw").normal((d, slot.c_in)) / math.sqrt(d))
            add(f"affine.{slot.w_index}.bias", np.ones(slot.c_in))
            if slot.kind == "conv":
                add(f"conv.{slot.conv_index}.weight",
                    _power_law_kernel(r.child("k"), slot.c_out, slot.c_in))
                add(f"conv.{slot.conv_index}.bias", np.zeros(slot.c_out))
                if config.noise_injection:
                    add(f"noise.{slot.conv_index}.scale", np.zeros(1))
            else:
                add(f"torgb.{slot.torgb_index}.weight",
                    r.child("k").normal((3, slot.c_in, 1, 1)) / math.sqrt(slot.c_in))
                add(f"torgb.{slot.torgb_index}.bias", np.zeros(3))
        return cls(config, params, seed)

    def mapping_params(self):
        return [t for n, t in self.params.items() if n.startswith("mapping.")]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_json(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            arr = self.params[name].data
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def slot_table_json(self):
        return [{"w_index": s.w_index, "kind": s.kind, "resolution": s.resolution,
                 "c_in": s.c_in, "c_out": s.c_out, "conv_index": s.conv_index,
                 "torgb_index": s.torgb_index} for s in self.slots]


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def map_latent(bundle: GeneratorBundle, z) -> Tensor:
    """z [style_dim] -> w [style_dim]. Input is norm-equalized, so w depends
    only on the direction of z."""
    z = _as_tensor(z)
    if z.shape != (bundle.config.style_dim,):
        raise ContractError(
            f"map_latent: z shape {z.shape}, want ({bundle.config.style_dim},)")
    x = tn.scale(tn.l2_normalize(z, axis=-1), math.sqrt(bundle.config.style_dim))
    for i in range(bundle.config.mapping_depth):
        x = tn.leaky_relu(tn.linear(x, bundle.params[f"mapping.{i}.weight"],
                                    bundle.params[f"mapping.{i}.bias"]))
    return x


def broadcast_w(w: Tensor, n_w: int) -> Tensor:
    """w [D] -> w+ [n_w, D] with identical rows."""
    row = tn.reshape(w, (1, w.shape[-1]))
    return tn.concat([row] * n_w, axis=0)


def affine_style(bundle: GeneratorBundle, w_plus: Tensor, w_index: int) -> Tensor:
    """One w+ row -> per-input-channel scales for that slot (bias starts at 1)."""
    row = tn.reshape(tn.slice_axis(w_plus, 0, w_index, w_index + 1),
                     (bundle.config.style_dim,))
    return tn.linear(row, bundle.params[f"affine.{w_index}.weight"],
                     bundle.params[f"affine.{w_index}.bias"])


def demodulate_kernel(w: Tensor, eps: float = DEMOD_EPS) -> Tensor:
    """Rescale each output-channel slice of [O,I,kh,kw] to unit L2 norm."""
    o = w.shape[0]
    flat = tn.reshape(w, (o, int(np.prod(w.shape[1:]))))
    return tn.reshape(tn.l2_normalize(flat, axis=-1, eps=eps), w.shape)


def modulate_kernel(w0: Tensor, s: Tensor, demodulate: bool = True,
                    eps: float = DEMOD_EPS) -> Tensor:
    """Scale a static kernel per input channel; optionally demodulate.

    w0: [C_out, C_in, kh, kw], s: [C_in].
    """
    if w0.ndim != 4 or s.ndim != 1 or s.shape[0] != w0.shape[1]:
        raise ContractError(
            f"modulate_kernel: kernel {w0.shape} vs scales {s.shape}")
    wm = tn.mul(w0, tn.reshape(s, (1, s.shape[0], 1, 1)))
    return demodulate_kernel(wm, eps) if demodulate else wm


def _refined_kernel(bundle, slot, s, dw):
    """Compose the per-image kernel for one conv slot, honoring demod order."""
    from .refinement import apply_residual
    cfg = bundle.config
    w0 = bundle.params[f"conv.{slot.conv_index}.weight"]
    wm = modulate_kernel(w0, s, demodulate=False)
    if cfg.demod_order == "after":
        if dw is not None:
            wm = apply_residual(wm, dw)
        if cfg.demodulate:
            wm = demodulate_kernel(wm)
    else:
        if cfg.demodulate:
            wm = demodulate_kernel(wm)
        if dw is not None:
            wm = apply_residual(wm, dw)
    return wm


def synthesize(bundle: GeneratorBundle, w_plus: Tensor, residuals=None,
               noise_seed: int = 0) -> Tensor:
    """Render one image [3, R, R] from a w+ code.

    residuals: optional mapping {conv_index -> Tensor [C_out, C_in]} of
    per-image kernel offsets. toRGB slots cannot be refined; unknown indices
    are a contract error. Output is unbounded; [-1, 1] clamping happens at
    image export.
    """
    cfg = bundle.config
    w_plus = _as_tensor(w_plus)
    if w_plus.shape != (cfg.n_w, cfg.style_dim):
        raise ContractError(
            f"synthesize: w+ shape {w_plus.shape}, want ({cfg.n_w}, {cfg.style_dim})")
    deltas = dict(residuals) if residuals else {}
    for k in deltas:
        if not (0 <= int(k) < cfg.n_conv):
            raise ContractError(
                f"residual addresses conv slot {k}; valid range is 0..{cfg.n_conv - 1}"
                " (toRGB slots cannot take residuals)")

    noise_rng = Rng(noise_seed).child("synthesis-noise") if cfg.noise_injection else None
    x = bundle.params["const"]
    rgb = None
    for slot in bundle.slots:
        if slot.kind == "conv":
            if slot.resolution != x.shape[-1]:
                x = tn.upsample2x(x)
            s = affine_style(bundle, w_plus, slot.w_index)
            wk = _refined_kernel(bundle, slot, s, deltas.get(slot.conv_index))
            b = bundle.params[f"conv.{slot.conv_index}.bias"]
            y = tn.add(tn.conv2d(x, wk), tn.reshape(b, (slot.c_out, 1, 1)))
            if cfg.noise_injection:
                n = Tensor(noise_rng.child(slot.conv_index).normal(
                    (1,) + y.shape[1:]))
                y = tn.add(y, tn.mul(n, tn.reshape(
                    bundle.params[f"noise.{slot.conv_index}.scale"], (1, 1, 1))))
            x = tn.leaky_relu(y)
        else:
            s = affine_style(bundle, w_plus, slot.w_index)
            w0 = bundle.params[f"torgb.{slot.torgb_index}.weight"]
            wt = modulate_kernel(w0, s, demodulate=False)
            b = bundle.params[f"torgb.{slot.torgb_index}.bias"]
            out = tn.add(tn.conv2d_1x1(x, wt), tn.reshape(b, (3, 1, 1)))
            rgb = out if rgb is None else tn.add(out, tn.upsample2x(rgb))
    return rgb


def style_mix(w_early: Tensor, w_late: Tensor, split: int | None = None) -> Tensor:
    """Rows [0, split) from w_early, rows [split, n) from w_late.

    Default split is ceil(n/2), so the early half carries layout and the late
    half carries appearance.
    """
    w_early, w_late = _as_tensor(w_early), _as_tensor(w_late)
    if w_early.shape != w_late.shape or w_early.ndim != 2:
        raise ContractError(
            f"style_mix: shapes {w_early.shape} vs {w_late.shape}")
    n = w_early.shape[0]
    split = (n + 1) // 2 if split is None else int(split)
    if not (0 < split < n):
        raise ContractError(f"style_mix: split {split} outside 1..{n - 1}")
    return tn.concat([tn.slice_axis(w_early, 0, 0, split),
                      tn.slice_axis(w_late, 0, split, n)], axis=0)


def sample_z(config: GeneratorConfig, rng: Rng) -> np.ndarray:
    return rng.normal((config.style_dim,), dtype=np.float32)


def sample_w(bundle: GeneratorBundle, rng: Rng) -> Tensor:
    return map_latent(bundle, sample_z(bundle.config, rng))


def mean_latent(bundle: GeneratorBundle, n: int, seed: int) -> np.ndarray:
    """Monte-Carlo mean of w over n seeded draws (float64 accumulation)."""
    if n < 1:
        raise ContractError("mean_latent: n must be positive")
    rng = Rng(seed).child("mean-latent")
    acc = np.zeros(bundle.config.style_dim, dtype=np.float64)
    for i in range(n):
        acc += map_latent(bundle, sample_z(bundle.config, rng.child(i))).data
    return (acc / n).astype(np.float32)
