"""Image encoder and transformer stacks that infer codes and kernel factors.

A four-stage strided conv encoder turns a 32x32 image (3 channels, or 6 for
the refiner that also sees the initial reconstruction) into a feature pyramid
tapped at 16x16, 8x8 and 4x4. Transformer blocks then update trainable token
banks against those features:

  * the w branch (one-stage only) carries [N_w, style_dim] query tokens that
    become the inversion code w+;
  * the p and q branches carry [N_r, L, C] token banks, one group of L tokens
    per refined conv layer, that become the residual factors P_n and Q_n.

Each block is pre-norm with residual connections: self-attention (within a
group for the p/q branches), cross-attention whose queries come from all
tokens jointly and whose keys/values come from one pyramid level (blocks walk
the levels coarse to fine), and a two-layer feed-forward. Attention is
multi-head with logits divided by sqrt(token dim).

Projection heads map tokens to per-layer channel extents. The Q-side heads
start at exactly zero, so an untrained inverter emits all-zero residuals and
synthesis matches the unrefined generator bit for bit; the P-side heads stay
random so the factor product keeps a usable gradient (zeroing both sides
would be a stationary saddle).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .generator import GeneratorBundle, mean_latent
from .refinement import (FACTOR_INIT_STD, SCALE_INIT, LayerFactors,
                         ResidualFactors)
from .rng import Rng
from .tensor import Tensor

HEAD_COUNT = 4
TOKEN_DIM = 128
N_BLOCKS = 3
ENCODER_CHANNELS = (32, 64, 128, 128)
OUT_PROJ_STD = 0.02   # attention/FFN output projections start near identity
TOKEN_INIT_STD = 0.02
MEAN_LATENT_SAMPLES = 10_000


@dataclass(frozen=True)
class InverterConfig:
    stage: str                 # "one" (w+ and factors) | "two" (factors only)
    refined: tuple             # conv slot indices receiving residuals, ascending
    rank: int                  # tokens per group (L)
    channel_table: tuple       # (c_out, c_in) per refined slot
    style_dim: int = 128
    n_w: int = 11
    token_dim: int = TOKEN_DIM
    heads: int = HEAD_COUNT
    n_blocks: int = N_BLOCKS
    grouped: bool = True       # grouped self-attention; False = all tokens jointly
    learnable_scaling: bool = True
    encoder_channels: tuple = ENCODER_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "refined", tuple(int(i) for i in self.refined))
        object.__setattr__(self, "channel_table",
                           tuple((int(o), int(i)) for o, i in self.channel_table))
        object.__setattr__(self, "encoder_channels",
                           tuple(int(c) for c in self.encoder_channels))
        if self.stage not in ("one", "two"):
            raise ContractError(f"stage must be 'one' or 'two', got {self.stage!r}")
        if not self.refined or len(self.refined) != len(self.channel_table):
            raise ContractError("refined slots and channel table must pair up")
        if any(b <= a for a, b in zip(self.refined, self.refined[1:])):
            raise ContractError(f"refined slots must ascend: {self.refined}")
        bound = min(min(o, i) for o, i in self.channel_table)
        if not (1 <= self.rank <= bound):
            raise ContractError(
                f"rank {self.rank} outside 1..{bound} (min channel extent of "
                f"the refined layers); lower the rank or refine wider layers")
        for dim, name in ((self.token_dim, "token_dim"),
                          (self.style_dim, "style_dim")):
            if dim < 1 or dim % self.heads:
                raise ContractError(f"{name} {dim} not divisible by "
                                    f"{self.heads} heads")
        if len(self.encoder_channels) != 4:
            raise ContractError("encoder takes exactly 4 stages")
        if not (1 <= self.n_blocks <= len(self.pyramid_channels)):
            raise ContractError(
                f"n_blocks {self.n_blocks} exceeds pyramid depth "
                f"{len(self.pyramid_channels)}")
        if self.n_w < 1:
            raise ContractError("n_w must be positive")

    @property
    def n_refined(self) -> int:
        return len(self.refined)

    @property
    def in_channels(self) -> int:
        # two-stage encoders see [image, initial reconstruction] stacked
        return 3 if self.stage == "one" else 6

    @property
    def pyramid_channels(self) -> tuple:
        return self.encoder_channels[1:]

    @classmethod
    def from_generator(cls, gen_config, stage: str, refined, rank: int,
                       **kwargs) -> "InverterConfig":
        from .refinement import toy_channel_table
        refined = tuple(sorted(int(i) for i in refined))
        table = toy_channel_table(gen_config, list(refined))
        return cls(stage=stage, refined=refined, rank=rank,
                   channel_table=tuple(table[i] for i in refined),
                   style_dim=gen_config.style_dim, n_w=gen_config.n_w, **kwargs)

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "refined": list(self.refined),
            "rank": self.rank,
            "channel_table": [list(p) for p in self.channel_table],
            "style_dim": self.style_dim,
            "n_w": self.n_w,
            "token_dim": self.token_dim,
            "heads": self.heads,
            "n_blocks": self.n_blocks,
            "grouped": self.grouped,
            "learnable_scaling": self.learnable_scaling,
            "encoder_channels": list(self.encoder_channels),
        }

    @classmethod
    def from_json(cls, d: dict) -> "InverterConfig":
        return cls(stage=str(d["stage"]), refined=tuple(d["refined"]),
                   rank=int(d["rank"]),
                   channel_table=tuple(tuple(p) for p in d["channel_table"]),
                   style_dim=int(d["style_dim"]), n_w=int(d["n_w"]),
                   token_dim=int(d["token_dim"]), heads=int(d["heads"]),
                   n_blocks=int(d["n_blocks"]), grouped=bool(d["grouped"]),
                   learnable_scaling=bool(d["learnable_scaling"]),
                   encoder_channels=tuple(d["encoder_channels"]))


@dataclass
class FeaturePyramid:
    """Encoder taps at strictly descending resolutions."""
    levels: list  # Tensors [C, H, W]

    def __post_init__(self):
        sizes = [lv.shape[-1] for lv in self.levels]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ContractError(f"pyramid resolutions must descend: {sizes}")

    def tokens(self, k: int) -> Tensor:
        """Level k flattened to [H*W, C] token rows."""
        c, h, w = self.levels[k].shape
        return tn.transpose(tn.reshape(self.levels[k], (c, h * w)), (1, 0))


def level_for_block(k: int, n_levels: int) -> int:
    """Block k cross-attends pyramid level n-1-k: coarse first, fine last."""
    return n_levels - 1 - k


class InverterBundle:
    """Encoder, transformer stacks, token banks, heads and scaling vectors."""

    def __init__(self, config: InverterConfig, params: dict, seed: int):
        self.config = config
        self.params = params
        self.seed = int(seed)

    @classmethod
    def create(cls, config: InverterConfig, seed: int,
               generator: GeneratorBundle | None = None) -> "InverterBundle":
        rng = Rng(seed).child("inverter")
        params: dict = {}

        def add(name, arr, trainable=True):
            params[name] = Tensor(np.asarray(arr, dtype=np.float32),
                                  requires_grad=trainable)

        c_prev = config.in_channels
        for s, c_out in enumerate(config.encoder_channels):
            r = rng.child("encoder").child(s)
            add(f"encoder.{s}.weight",
                r.normal((c_out, c_prev, 3, 3), std=math.sqrt(2.0 / (c_prev * 9))))
            add(f"encoder.{s}.bias", np.zeros(c_out))
            c_prev = c_out

        streams = (("w", config.style_dim),) if config.stage == "one" else ()
        streams += (("p", config.token_dim), ("q", config.token_dim))
        for stream, dim in streams:
            for k in range(config.n_blocks):
                kv_dim = config.pyramid_channels[
                    level_for_block(k, len(config.pyramid_channels))]
                _init_block(add, rng.child(stream).child(k),
                            f"{stream}.blk{k}", dim, kv_dim)

        if config.stage == "one":
            if generator is None:
                raise ContractError(
                    "one-stage init needs a generator: the query bank starts "
                    "at the Monte-Carlo mean latent")
            if (generator.config.style_dim != config.style_dim
                    or generator.config.n_w != config.n_w):
                raise ContractError("generator extents disagree with config")
            wbar = mean_latent(generator, MEAN_LATENT_SAMPLES, seed)
            add("bank.w", np.tile(wbar, (config.n_w, 1)))

        shape = (config.n_refined, config.rank, config.token_dim)
        add("bank.p", rng.child("bank").child("p").normal(shape,
                                                          std=TOKEN_INIT_STD))
        add("bank.q", rng.child("bank").child("q").normal(shape,
                                                          std=TOKEN_INIT_STD))
        for idx, (c_out, c_in) in zip(config.refined, config.channel_table):
            # the q side starts at exactly zero so dW = P^T Q = 0 before
            # training; the p side stays random so the product has gradient
            # (both sides zero would be a stationary saddle)
            r = rng.child("head").child(int(idx))
            add(f"head.{idx}.p.weight",
                r.normal((config.token_dim, c_out), std=FACTOR_INIT_STD))
            add(f"head.{idx}.p.bias", np.zeros(c_out))
            add(f"head.{idx}.q.weight", np.zeros((config.token_dim, c_in)))
            add(f"head.{idx}.q.bias", np.zeros(c_in))
            # trainable scales start small and gate how fast the residual's
            # influence grows; with scaling disabled the residual reverts to
            # the plain product P^T Q, so the fixed value must be 1
            scale0 = SCALE_INIT if config.learnable_scaling else 1.0
            add(f"scale.{idx}.a", np.full(config.rank, scale0),
                trainable=config.learnable_scaling)
            add(f"scale.{idx}.b", np.full(config.rank, scale0),
                trainable=config.learnable_scaling)
        return cls(config, params, seed)

    def parameters(self):
        return list(self.params.values())

    def trainable_parameters(self):
        return [t for t in self.params.values() if t.requires_grad]

    def freeze(self) -> "InverterBundle":
        for t in self.params.values():
            t.requires_grad = False
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_json(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data,
                                          dtype="<f4").tobytes())
        return h.hexdigest()


def _init_block(add, rng: Rng, prefix: str, dim: int, kv_dim: int) -> None:
    for ln in ("ln1", "ln2", "ln3"):
        add(f"{prefix}.{ln}.gamma", np.ones(dim))
        add(f"{prefix}.{ln}.beta", np.zeros(dim))
    for attn, in_dim in (("self", dim), ("cross", kv_dim)):
        r = rng.child(attn)
        add(f"{prefix}.{attn}.wq", r.child("q").normal((dim, dim),
                                                       std=1.0 / math.sqrt(dim)))
        add(f"{prefix}.{attn}.wk", r.child("k").normal((in_dim, dim),
                                                       std=1.0 / math.sqrt(in_dim)))
        add(f"{prefix}.{attn}.wv", r.child("v").normal((in_dim, dim),
                                                       std=1.0 / math.sqrt(in_dim)))
        add(f"{prefix}.{attn}.wo", r.child("o").normal((dim, dim),
                                                       std=OUT_PROJ_STD))
        for b in ("bq", "bk", "bv", "bo"):
            add(f"{prefix}.{attn}.{b}", np.zeros(dim))
    r = rng.child("ffn")
    add(f"{prefix}.ffn.w1", r.child("w1").normal((dim, 2 * dim),
                                                 std=math.sqrt(2.0 / dim)))
    add(f"{prefix}.ffn.b1", np.zeros(2 * dim))
    add(f"{prefix}.ffn.w2", r.child("w2").normal((2 * dim, dim),
                                                 std=OUT_PROJ_STD))
    add(f"{prefix}.ffn.b2", np.zeros(dim))


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def encode(bundle: InverterBundle, image) -> FeaturePyramid:
    """Image [C_in, R, R] -> taps after the three strided stages."""
    cfg = bundle.config
    x = _as_tensor(image)
    if x.ndim != 3 or x.shape[0] != cfg.in_channels:
        raise ContractError(
            f"encode: input shape {x.shape}, want ({cfg.in_channels}, R, R) "
            f"for a stage-{cfg.stage} encoder")
    if x.shape[1] != x.shape[2] or x.shape[1] % 8:
        raise ContractError(f"encode: resolution {x.shape[1:]} must be square "
                            "and divisible by 8")
    levels = []
    for s, c_out in enumerate(cfg.encoder_channels):
        y = tn.conv2d(x, bundle.params[f"encoder.{s}.weight"])
        if s > 0:
            y = tn.subsample2x(y)
        x = tn.leaky_relu(tn.add(y, tn.reshape(
            bundle.params[f"encoder.{s}.bias"], (c_out, 1, 1))))
        if s > 0:
            levels.append(x)
    return FeaturePyramid(levels)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; scale and shift."""
    d = x.shape[-1]
    y = tn.sub(x, tn.mean(x, axis=-1, keepdims=True))
    z = tn.scale(tn.l2_normalize(y, axis=-1), math.sqrt(d))
    return tn.add(tn.mul(z, gamma), beta)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    return tn.transpose(tn.reshape(x, (b, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, hd = x.shape
    return tn.reshape(tn.transpose(x, (0, 2, 1, 3)), (b, t, h * hd))


def _attention(params: dict, prefix: str, x_q: Tensor, x_kv: Tensor,
               heads: int, divisor: float) -> Tensor:
    q = _split_heads(tn.linear(x_q, params[f"{prefix}.wq"],
                               params[f"{prefix}.bq"]), heads)
    k = _split_heads(tn.linear(x_kv, params[f"{prefix}.wk"],
                               params[f"{prefix}.bk"]), heads)
    v = _split_heads(tn.linear(x_kv, params[f"{prefix}.wv"],
                               params[f"{prefix}.bv"]), heads)
    logits = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))),
                      1.0 / divisor)
    out = _merge_heads(tn.matmul(tn.softmax(logits), v))
    return tn.linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def grouped_self_attention(tokens: Tensor, params: dict, prefix: str,
                           heads: int) -> Tensor:
    """Attention within each group of [N_r, L, C]: groups never mix."""
    if tokens.ndim != 3:
        raise ContractError(f"grouped attention wants [N_r, L, C], "
                            f"got {tokens.shape}")
    c = tokens.shape[-1]
    return _attention(params, prefix, tokens, tokens, heads, math.sqrt(c))


def cross_attention(tokens: Tensor, level_tokens: Tensor, params: dict,
                    prefix: str, heads: int) -> Tensor:
    """Queries from all N_r*L tokens jointly; keys/values from one level."""
    g, l, c = tokens.shape
    q_in = tn.reshape(tokens, (1, g * l, c))
    kv = tn.reshape(level_tokens, (1,) + tuple(level_tokens.shape))
    out = _attention(params, prefix, q_in, kv, heads, math.sqrt(c))
    return tn.reshape(out, (g, l, c))


def transformer_block(tokens: Tensor, params: dict, prefix: str, heads: int,
                      level_tokens: Tensor | None = None,
                      grouped: bool = True) -> Tensor:
    """Pre-norm residual block: (grouped) self-attention, optional
    cross-attention against one pyramid level, feed-forward."""
    g, l, c = tokens.shape
    x = tokens
    h = layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    if not grouped:
        h = tn.reshape(h, (1, g * l, c))
    att = grouped_self_attention(h, params, f"{prefix}.self", heads)
    if not grouped:
        att = tn.reshape(att, (g, l, c))
    x = tn.add(x, att)
    if level_tokens is not None:
        h = layer_norm(x, params[f"{prefix}.ln2.gamma"],
                       params[f"{prefix}.ln2.beta"])
        x = tn.add(x, cross_attention(h, level_tokens, params,
                                      f"{prefix}.cross", heads))
    h = layer_norm(x, params[f"{prefix}.ln3.gamma"], params[f"{prefix}.ln3.beta"])
    ff = tn.linear(tn.leaky_relu(tn.linear(h, params[f"{prefix}.ffn.w1"],
                                           params[f"{prefix}.ffn.b1"])),
                   params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return tn.add(x, ff)


def _run_stream(bundle: InverterBundle, stream: str, tokens: Tensor,
                pyramid: FeaturePyramid | None, grouped: bool) -> Tensor:
    cfg = bundle.config
    for k in range(cfg.n_blocks):
        level = None
        if pyramid is not None:
            level = pyramid.tokens(level_for_block(k, len(pyramid.levels)))
        tokens = transformer_block(tokens, bundle.params, f"{stream}.blk{k}",
                                   cfg.heads, level_tokens=level,
                                   grouped=grouped)
    return tokens


def invert_w(bundle: InverterBundle, pyramid: FeaturePyramid) -> Tensor:
    """Update the query bank against the pyramid; returns w+ [N_w, style_dim]."""
    cfg = bundle.config
    if cfg.stage != "one":
        raise ContractError("invert_w needs a one-stage inverter; the "
                            "two-stage refiner reuses a fixed w+")
    tokens = tn.reshape(bundle.params["bank.w"], (1, cfg.n_w, cfg.style_dim))
    tokens = _run_stream(bundle, "w", tokens, pyramid, grouped=True)
    return tn.reshape(tokens, (cfg.n_w, cfg.style_dim))


def project_heads(bundle: InverterBundle, p_tokens: Tensor,
                  q_tokens: Tensor) -> dict:
    """Per refined layer: group n -> (P_n [L, C_out_n], Q_n [L, C_in_n])."""
    cfg = bundle.config
    want = (cfg.n_refined, cfg.rank, cfg.token_dim)
    if tuple(p_tokens.shape) != want or tuple(q_tokens.shape) != want:
        raise ContractError(
            f"project_heads: token shapes {p_tokens.shape}/{q_tokens.shape}, "
            f"want {want}")
    out = {}
    for n, idx in enumerate(cfg.refined):
        row_p = tn.reshape(tn.slice_axis(p_tokens, 0, n, n + 1),
                           (cfg.rank, cfg.token_dim))
        row_q = tn.reshape(tn.slice_axis(q_tokens, 0, n, n + 1),
                           (cfg.rank, cfg.token_dim))
        out[idx] = (
            tn.linear(row_p, bundle.params[f"head.{idx}.p.weight"],
                      bundle.params[f"head.{idx}.p.bias"]),
            tn.linear(row_q, bundle.params[f"head.{idx}.q.weight"],
                      bundle.params[f"head.{idx}.q.bias"]),
        )
    return out


def infer_residuals(bundle: InverterBundle,
                    pyramid: FeaturePyramid) -> ResidualFactors:
    """Run the p/q streams and heads; attach the trainable scaling vectors."""
    cfg = bundle.config
    p_tokens = _run_stream(bundle, "p", bundle.params["bank.p"], pyramid,
                           grouped=cfg.grouped)
    q_tokens = _run_stream(bundle, "q", bundle.params["bank.q"], pyramid,
                           grouped=cfg.grouped)
    projected = project_heads(bundle, p_tokens, q_tokens)
    layers = {idx: LayerFactors(p=p, q=q,
                                a=bundle.params[f"scale.{idx}.a"],
                                b=bundle.params[f"scale.{idx}.b"])
              for idx, (p, q) in projected.items()}
    return ResidualFactors(layers, cfg.rank,
                           learnable_scaling=cfg.learnable_scaling)
