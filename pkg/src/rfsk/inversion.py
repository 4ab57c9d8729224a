"""Reconstruction losses, toy image domains, inversion training, editing.

The reconstruction loss is a weighted sum of pixel MSE, a perceptual term
measured on fixed-seed proxy features, and an identity term (1 - cosine of
proxy embeddings).  Training comes in two flavors: the one-stage loop
trains the full inverter (encoder, token streams, heads) jointly, while
the two-stage loop freezes a pretrained one-stage inverter, caches its
w+ codes and initial reconstructions, and trains a fresh refiner that sees
the real image and the initial reconstruction as a six-channel input.

The generator backbone never trains.  Its mapping MLP is listed among the
one-stage trainables (and excluded from two-stage runs); with the query
bank initialized from the mean latent rather than per-step MLP draws, the
MLP sits outside the loss graph, so listing it is a contract statement
rather than a source of updates.

Image domains are built from the generator itself: held-out seeded codes
give in-domain samples, and a parameterized pixel transform (hue rotation,
occlusion, contrast, grayscale, negation) turns them into a deterministic
out-of-domain set with disjoint train/test seed ranges.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ContractError, NumericError
from .generator import (GeneratorBundle, broadcast_w, map_latent, sample_w,
                        sample_z, synthesize)
from .inverter import InverterBundle, encode, infer_residuals, invert_w
from .optim import make_optimizer
from .proxies import (ProxyNet, embedder_net, identity_gap, identity_net,
                      perceptual_distance, perceptual_net)
from .refinement import ResidualFactors, jacobi_singular_values
from .rng import Rng
from .tensor import Tensor

# Seed offsets partitioning one domain seed into disjoint z-seed ranges.
_DOMAIN_STRIDE = 1_000_000
_TEST_OFFSET = 500_000


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tn.tensor(np.asarray(x, np.float32))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    l2: float = 1.0
    lpips: float = 0.8
    ident: float = 0.1

    def __post_init__(self):
        for name in ("l2", "lpips", "ident"):
            if getattr(self, name) < 0:
                raise ContractError(f"LossWeights.{name} must be >= 0")

    def to_json(self) -> dict:
        return {"l2": self.l2, "lpips": self.lpips, "ident": self.ident}


@dataclass(frozen=True)
class ProxySuite:
    """The frozen measurement instruments used by loss_rec and evaluate."""
    perceptual: ProxyNet
    identity: ProxyNet


_DEFAULT_PROXIES = None


def default_proxies() -> ProxySuite:
    global _DEFAULT_PROXIES
    if _DEFAULT_PROXIES is None:
        _DEFAULT_PROXIES = ProxySuite(perceptual_net(), identity_net())
    return _DEFAULT_PROXIES


def loss_rec(image, recon, weights: LossWeights | None = None,
             proxies: ProxySuite | None = None):
    """Weighted reconstruction loss; returns (total Tensor, float components).

    Components are always reported; terms with zero weight are computed on
    detached copies so they never enter the gradient graph.
    """
    img = _as_tensor(image)
    rec = _as_tensor(recon)
    if img.shape != rec.shape or img.ndim != 3:
        raise ContractError(
            f"loss_rec: image {img.shape} vs reconstruction {rec.shape}")
    w = weights if weights is not None else LossWeights()
    px = proxies if proxies is not None else default_proxies()
    rec_detached = tn.tensor(rec.data)

    parts = {}

    def mse_of(r):
        d = tn.sub(r, img)
        return tn.mean(tn.mul(d, d))

    terms = []
    for name, wgt, make in (
            ("mse", w.l2, mse_of),
            ("lpips", w.lpips, lambda r: perceptual_distance(px.perceptual, img, r)),
            ("id", w.ident, lambda r: identity_gap(px.identity, img, r))):
        if wgt > 0:
            t = make(rec)
            parts[name] = float(t.data)
            terms.append(t if wgt == 1.0 else tn.scale(t, wgt))
        else:
            parts[name] = float(make(rec_detached).data)
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = tn.add(total, t)
    else:
        total = tn.tensor(np.float32(0.0))
    parts["total"] = float(total.data)
    return total, parts


# ---------------------------------------------------------------------------
# image transforms and toy domains
# ---------------------------------------------------------------------------


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis (1,1,1)/sqrt(3)."""
    axis = np.ones(3) / math.sqrt(3.0)
    c = math.cos(math.radians(degrees))
    s = math.sin(math.radians(degrees))
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    r = c * np.eye(3) + s * k + (1 - c) * np.outer(axis, axis)
    return r.astype(np.float32)


def _check_params(kind: str, params: dict, allowed: tuple):
    extra = set(params) - set(allowed)
    if extra:
        raise ContractError(
            f"transform '{kind}': unknown parameters {sorted(extra)}; "
            f"allowed: {sorted(allowed)}")


def apply_transform(images: np.ndarray, kind: str, params: dict | None = None):
    """Apply a named pixel transform to [..., 3, H, W] images in [-1, 1].

    Outputs are not clipped: hue rotation and contrast are kept exactly
    linear so their statistics can be checked in closed form; clamping
    belongs to image export.
    """
    x = np.asarray(images, dtype=np.float32)
    if x.shape[-3] != 3:
        raise ContractError(f"apply_transform: channel axis {x.shape}, want 3")
    params = dict(params or {})
    if kind == "identity":
        _check_params(kind, params, ())
        return x.copy()
    if kind == "hue-rotate":
        _check_params(kind, params, ("degrees",))
        r = hue_rotation_matrix(float(params.get("degrees", 120.0)))
        return np.einsum("rc,...chw->...rhw", r, x).astype(np.float32)
    if kind == "occlude":
        _check_params(kind, params, ("size", "value", "row", "col"))
        h, w = x.shape[-2:]
        size = int(params.get("size", max(2, h // 4)))
        if not (0 < size <= min(h, w)):
            raise ContractError(f"occlude: size {size} outside image {h}x{w}")
        row = int(params.get("row", (h - size) // 2))
        col = int(params.get("col", (w - size) // 2))
        if row < 0 or col < 0 or row + size > h or col + size > w:
            raise ContractError("occlude: patch leaves the image")
        out = x.copy()
        out[..., row:row + size, col:col + size] = np.float32(
            params.get("value", -1.0))
        return out
    if kind == "contrast":
        _check_params(kind, params, ("gain",))
        gain = np.float32(params.get("gain", 1.6))
        m = x.mean(axis=(-3, -2, -1), keepdims=True)
        return (m + gain * (x - m)).astype(np.float32)
    if kind == "grayscale":
        _check_params(kind, params, ())
        m = x.mean(axis=-3, keepdims=True)
        return np.repeat(m, 3, axis=-3).astype(np.float32)
    if kind == "invert":
        _check_params(kind, params, ())
        return (-x).astype(np.float32)
    raise ContractError(
        f"unknown transform '{kind}'; known: contrast, grayscale, "
        "hue-rotate, identity, invert, occlude")


@dataclass
class DomainDataset:
    """Seeded toy domain: generator samples plus a pixel transform."""
    seed: int
    transform_kind: str
    transform_params: dict
    train_seeds: tuple
    test_seeds: tuple
    train_clean: np.ndarray  # [n, 3, R, R] raw generator outputs
    test_clean: np.ndarray
    train_images: np.ndarray  # transformed (the out-of-domain set)
    test_images: np.ndarray
    train_w: np.ndarray  # [n, n_w, style_dim] ground-truth codes
    test_w: np.ndarray

    @property
    def resolution(self) -> int:
        return self.train_images.shape[-1]

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "transform": {"kind": self.transform_kind,
                          "params": self.transform_params},
            "train_seeds": list(self.train_seeds),
            "test_seeds": list(self.test_seeds),
            "resolution": self.resolution,
        }


def make_domain(bundle: GeneratorBundle, seed: int, n_train: int, n_test: int,
                transform: str = "hue-rotate",
                params: dict | None = None) -> DomainDataset:
    """Build disjoint seeded train/test splits of a transformed toy domain."""
    if n_train <= 0 or n_test <= 0:
        raise ContractError(
            f"make_domain: splits must be positive, got {n_train}/{n_test}")
    if max(n_train, n_test) > _TEST_OFFSET:
        raise ContractError(f"make_domain: split larger than {_TEST_OFFSET}")
    params = dict(params or {})
    base = int(seed) * _DOMAIN_STRIDE
    train_seeds = tuple(base + i for i in range(n_train))
    test_seeds = tuple(base + _TEST_OFFSET + j for j in range(n_test))

    def render(zseeds):
        ws, imgs = [], []
        for zs in zseeds:
            z = sample_z(bundle.config, Rng(zs).child("domain-z"))
            wp = broadcast_w(map_latent(bundle, z), bundle.config.n_w)
            ws.append(wp.data.copy())
            imgs.append(synthesize(bundle, wp).data.copy())
        return np.stack(ws), np.stack(imgs)

    train_w, train_clean = render(train_seeds)
    test_w, test_clean = render(test_seeds)
    # probe the transform once so bad parameters fail before the copy
    return DomainDataset(
        seed=int(seed), transform_kind=transform, transform_params=params,
        train_seeds=train_seeds, test_seeds=test_seeds,
        train_clean=train_clean, test_clean=test_clean,
        train_images=apply_transform(train_clean, transform, params),
        test_images=apply_transform(test_clean, transform, params),
        train_w=train_w, test_w=test_w)


# ---------------------------------------------------------------------------
# reconstruction and evaluation
# ---------------------------------------------------------------------------


def reconstruct(generator: GeneratorBundle, inverter: InverterBundle, image,
                stage1: InverterBundle | None = None):
    """One inversion forward pass; returns (recon, w_plus, factors).

    Two-stage inverters need the frozen one-stage model that supplies the
    fixed w+ code and the initial reconstruction.
    """
    x = _as_tensor(image)
    cfg = inverter.config
    if cfg.stage == "one":
        pyr = encode(inverter, x)
        w_plus = invert_w(inverter, pyr)
        factors = infer_residuals(inverter, pyr)
    else:
        if stage1 is None:
            raise ContractError(
                "two-stage reconstruction needs the frozen one-stage inverter")
        w_plus = invert_w(stage1, encode(stage1, x))
        base = synthesize(generator, w_plus)
        six = tn.concat([x, tn.tensor(base.data)], axis=0)
        factors = infer_residuals(inverter, encode(inverter, six))
    recon = synthesize(generator, w_plus, factors.deltas())
    return recon, w_plus, factors


def evaluate(images, recons, proxies: ProxySuite | None = None) -> dict:
    """Raw per-image metrics and their means for paired (image, recon) sets."""
    images = np.asarray(images, np.float32)
    if len(images) == 0:
        raise ContractError("evaluate: empty dataset")
    if len(images) != len(recons):
        raise ContractError(
            f"evaluate: {len(images)} images vs {len(recons)} reconstructions")
    px = proxies if proxies is not None else default_proxies()
    per = []
    for img, rec in zip(images, recons):
        rec = np.asarray(rec.data if isinstance(rec, Tensor) else rec,
                         np.float32)
        i = tn.tensor(img)
        r = tn.tensor(rec)
        per.append({
            "mse": float(np.mean((rec - img) ** 2)),
            "lpips": float(perceptual_distance(px.perceptual, i, r).data),
            "id": float(identity_gap(px.identity, i, r).data),
        })
    mean = {k: float(np.mean([p[k] for p in per])) for k in per[0]}
    return {"per_image": per, "mean": mean}


def evaluate_inverter(generator: GeneratorBundle, inverter: InverterBundle,
                      images, stage1: InverterBundle | None = None,
                      proxies: ProxySuite | None = None) -> dict:
    recons = [reconstruct(generator, inverter, img, stage1)[0].data
              for img in np.asarray(images, np.float32)]
    return evaluate(images, recons, proxies)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainRun:
    """Budget and knobs for one training run.

    The metric log keyes entries by step index; wall-clock never enters the
    log so identical (config, seed) runs serialize identically.
    """
    iterations: int
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    optimizer: str = "ranger"
    weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 50
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ContractError("TrainRun: iterations must be >= 0")
        if self.batch_size < 1:
            raise ContractError("TrainRun: batch_size must be >= 1")
        if self.lr <= 0:
            raise ContractError("TrainRun: lr must be positive")
        if self.optimizer not in ("adam", "radam", "ranger"):
            raise ContractError(
                f"TrainRun: optimizer '{self.optimizer}' not in "
                "adam|radam|ranger")
        if self.log_every < 1:
            raise ContractError("TrainRun: log_every must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractError("TrainRun: clip_norm must be positive or None")


def _dump_state(step: int, parts: dict, named_params: dict) -> dict:
    """Diagnostic snapshot attached to divergence errors."""
    return {
        "step": step,
        "loss": parts,
        "param_absmax": {name: float(np.abs(p.data).max())
                         for name, p in named_params.items()},
    }


def _check_finite(total: Tensor, step: int, parts: dict, named_params: dict):
    if not np.isfinite(total.data):
        err = NumericError(
            f"training diverged at step {step}: loss {parts['total']}")
        err.dump = _dump_state(step, parts, named_params)
        raise err


def _log_entry(step: int, sums: dict, count: int) -> dict:
    entry = {"step": step}
    entry.update({k: v / count for k, v in sums.items()})
    return entry


def clip_gradients(params, max_norm: float) -> float:
    """Scale accumulated gradients to a global L2 norm cap; returns the norm.

    Keeps the momentum-only warmup steps of rectified Adam from translating
    raw gradient spikes into raw-gradient-sized parameter jumps.
    """
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    total = math.sqrt(total)
    if total > max_norm:
        factor = np.float32(max_norm / total)
        for g in grads:
            g *= factor
    return total


def _train_loop(run: TrainRun, n_images: int, step_fn, named_params: dict):
    """Shared batch/optimizer/logging skeleton for both stages.

    step_fn(image_index) must build the per-image loss graph and return
    (total Tensor, parts dict). Gradients average over the batch.
    """
    rng = Rng(run.seed).child("train")
    log = []
    params = list(named_params.values())
    opt = make_optimizer(run.optimizer, [p for p in params if p.requires_grad],
                         run.lr)
    inv_batch = 1.0 / run.batch_size
    for step in range(run.iterations):
        picks = rng.child(step).integers(0, n_images, (run.batch_size,))
        opt.zero_grad()
        sums: dict = {}
        for i in picks:
            total, parts = step_fn(int(i))
            _check_finite(total, step, parts, named_params)
            try:
                tn.backward(tn.scale(total, inv_batch))
            except NumericError as err:
                err.dump = _dump_state(step, parts, named_params)
                raise
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        if run.clip_norm is not None:
            clip_gradients(params, run.clip_norm)
        opt.step()
        if step % run.log_every == 0 or step == run.iterations - 1:
            log.append(_log_entry(step, sums, run.batch_size))
    return log


def train_one_stage(generator: GeneratorBundle, inverter: InverterBundle,
                    images, run: TrainRun,
                    proxies: ProxySuite | None = None):
    """Train encoder, token streams, and heads jointly; returns the log.

    The generator's conv/toRGB/affine stack stays frozen; its mapping MLP
    joins the trainable set per the one-stage contract (see module note).
    """
    if inverter.config.stage != "one":
        raise ContractError("train_one_stage needs a stage-one inverter")
    images = np.asarray(images, np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ContractError(f"train_one_stage: images shape {images.shape}")
    px = proxies if proxies is not None else default_proxies()
    named = dict(inverter.params)
    mapping = generator.mapping_params()
    for k, p in enumerate(mapping):
        named[f"mapping.{k}"] = p
        p.requires_grad = True

    def step_fn(i: int):
        x = tn.tensor(images[i])
        pyr = encode(inverter, x)
        w_plus = invert_w(inverter, pyr)
        factors = infer_residuals(inverter, pyr)
        recon = synthesize(generator, w_plus, factors.deltas())
        return loss_rec(x, recon, run.weights, px)

    try:
        return _train_loop(run, len(images), step_fn, named)
    finally:
        for p in mapping:
            p.requires_grad = False
            p.grad = None


def train_two_stage(generator: GeneratorBundle, stage1: InverterBundle,
                    refiner: InverterBundle, images, run: TrainRun,
                    proxies: ProxySuite | None = None):
    """Train the residual refiner against a frozen one-stage inverter.

    w+ codes and initial reconstructions are cached per sample up front:
    the stage-one model and the generator are frozen, so both are constants
    of the run. Raises if the frozen weights change.
    """
    if refiner.config.stage != "two":
        raise ContractError("train_two_stage needs a stage-two refiner")
    if stage1.config.stage != "one":
        raise ContractError("train_two_stage: stage1 must be a one-stage "
                            "inverter")
    images = np.asarray(images, np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ContractError(f"train_two_stage: images shape {images.shape}")
    px = proxies if proxies is not None else default_proxies()
    stage1.freeze()
    before = (stage1.checksum(), generator.checksum())

    cached_w, cached_base = [], []
    for img in images:
        w0 = invert_w(stage1, encode(stage1, tn.tensor(img)))
        cached_w.append(w0.data.copy())
        cached_base.append(synthesize(generator, tn.tensor(w0.data)).data)

    def step_fn(i: int):
        x = tn.tensor(images[i])
        six = tn.concat([x, tn.tensor(cached_base[i])], axis=0)
        factors = infer_residuals(refiner, encode(refiner, six))
        recon = synthesize(generator, tn.tensor(cached_w[i]), factors.deltas())
        return loss_rec(x, recon, run.weights, px)

    log = _train_loop(run, len(images), step_fn, dict(refiner.params))
    after = (stage1.checksum(), generator.checksum())
    if after != before:
        raise ContractError("frozen weights changed during two-stage training")
    return log


# ---------------------------------------------------------------------------
# latent directions and editing
# ---------------------------------------------------------------------------


def principal_directions(samples: np.ndarray, k: int) -> np.ndarray:
    """Top-k principal directions of row-sample data [n, d]; unit rows.

    Signs are fixed by making the first coordinate of magnitude > 1e-12
    positive, so directions are reproducible across runs.
    """
    data = np.asarray(samples, np.float64)
    if data.ndim != 2:
        raise ContractError(f"principal_directions: data ndim {data.ndim}")
    n, d = data.shape
    if not (1 <= k <= d):
        raise ContractError(f"principal_directions: k {k} outside 1..{d}")
    if n <= k:
        raise ContractError(
            f"principal_directions: {n} samples cannot support {k} components")
    centered = data - data.mean(axis=0)
    _, vecs = jacobi_singular_values(centered, want_vectors=True)
    dirs = vecs[:, :k].T.copy()
    for row in dirs:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs.astype(np.float32)


def pca_directions(bundle: GeneratorBundle, n_samples: int, k: int,
                   seed: int) -> np.ndarray:
    """Principal directions of sampled w codes; [k, style_dim] unit rows."""
    if k > bundle.config.style_dim:
        raise ContractError(
            f"pca_directions: k {k} exceeds style_dim {bundle.config.style_dim}")
    rng = Rng(seed).child("pca")
    ws = np.stack([sample_w(bundle, rng.child(i)).data
                   for i in range(n_samples)])
    return principal_directions(ws, k)


def edit_code(w_plus, direction, strength: float, layer_range) -> np.ndarray:
    """Shift w+ rows [lo, hi) by strength * direction.

    Returns float64 so code arithmetic stays exact at float32 resolution:
    edits at +s and -s average back to the unedited code after the final
    cast. Synthesis casts to float32 at the door.
    """
    w = np.asarray(w_plus.data if isinstance(w_plus, Tensor) else w_plus,
                   np.float64)
    d = np.asarray(direction, np.float64)
    if w.ndim != 2 or d.shape != (w.shape[1],):
        raise ContractError(
            f"edit_code: w+ {w.shape} vs direction {d.shape}")
    if abs(np.linalg.norm(d) - 1.0) > 1e-4:
        raise ContractError("edit_code: direction must be unit norm")
    lo, hi = int(layer_range[0]), int(layer_range[1])
    if not (0 <= lo < hi <= w.shape[0]):
        raise ContractError(
            f"edit_code: layer range [{lo}, {hi}) is empty or outside "
            f"0..{w.shape[0]}")
    out = w.copy()
    out[lo:hi] += float(strength) * d
    return out


def apply_edit(generator: GeneratorBundle, w_plus, direction, strength: float,
               layer_range, residuals=None) -> Tensor:
    """Render the edited code; stored residuals pass through unchanged."""
    edited = edit_code(w_plus, direction, strength, layer_range)
    deltas = residuals.deltas() if isinstance(residuals, ResidualFactors) \
        else residuals
    return synthesize(generator, tn.tensor(edited), deltas)
