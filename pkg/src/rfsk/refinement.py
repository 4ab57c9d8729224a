"""Low-rank kernel residuals and their accounting.

A refined conv layer n gets a per-image offset dW_n = P_n^T Q_n with
P_n [L, C_out], Q_n [L, C_in], so rank(dW_n) <= L, plus per-token scaling
vectors A_n, B_n that rescale the rows of P_n and Q_n. The offset is shared
across the 3x3 taps of the kernel, so a refined layer costs
L*(C_out + C_in) + 2L trainable scalars.

`ResidualFactors` is the trainable-state form used when factors are optimized
directly (domain adaptation); inverters build the same algebra in-graph from
projected tokens using the module-level functions.

Singular values are computed by one-sided Jacobi on the Gram matrix over the
smaller dimension: rows are rotated pairwise until mutually orthogonal, row
norms give the Gram eigenvalues, and their square roots are the singular
values. Rotations use a parallel round-robin ordering so a whole batch of
matrices sweeps in lockstep with vectorized updates.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .rng import Rng
from .tensor import Tensor

FACTOR_INIT_STD = 0.02
SCALE_INIT = 1e-3
JACOBI_TOL = 1e-10


# ---------------------------------------------------------------------------
# factor algebra (graph functions)
# ---------------------------------------------------------------------------


def scale_tokens(p: Tensor, q: Tensor, a: Tensor, b: Tensor):
    """Row i of P is scaled by A_i, row i of Q by B_i."""
    if p.ndim != 2 or q.ndim != 2 or p.shape[0] != q.shape[0]:
        raise ContractError(f"factor shapes {p.shape} / {q.shape} disagree on L")
    if a.shape != (p.shape[0],) or b.shape != (q.shape[0],):
        raise ContractError(
            f"scaling vectors {a.shape}/{b.shape} must have length L={p.shape[0]}")
    ps = tn.mul(p, tn.reshape(a, (a.shape[0], 1)))
    qs = tn.mul(q, tn.reshape(b, (b.shape[0], 1)))
    return ps, qs


def compose_residual(p_scaled: Tensor, q_scaled: Tensor) -> Tensor:
    """dW = P^T Q, shape [C_out, C_in]; rank is at most L by construction."""
    if p_scaled.shape[0] != q_scaled.shape[0]:
        raise ContractError(
            f"compose_residual: L mismatch {p_scaled.shape} vs {q_scaled.shape}")
    return tn.matmul(tn.transpose(p_scaled, (1, 0)), q_scaled)


def apply_residual(kernel: Tensor, delta: Tensor) -> Tensor:
    """Add a [C_out, C_in] offset to every spatial tap of [C_out, C_in, kh, kw]."""
    if kernel.ndim != 4 or delta.shape != kernel.shape[:2]:
        raise ContractError(
            f"apply_residual: kernel {kernel.shape} vs delta {delta.shape}")
    return tn.add(kernel, tn.reshape(delta, (delta.shape[0], delta.shape[1], 1, 1)))


# ---------------------------------------------------------------------------
# trainable-state form
# ---------------------------------------------------------------------------


@dataclass
class LayerFactors:
    p: Tensor  # [L, C_out]
    q: Tensor  # [L, C_in]
    a: Tensor  # [L]
    b: Tensor  # [L]


class ResidualFactors:
    """Per-layer factored residual state, keyed by conv slot index."""

    def __init__(self, layers: dict, rank: int, learnable_scaling: bool = True):
        self.rank = int(rank)
        self.learnable_scaling = bool(learnable_scaling)
        self.layers = dict(sorted(layers.items()))
        for idx, lf in self.layers.items():
            l, c_out = lf.p.shape
            _, c_in = lf.q.shape
            if l != self.rank:
                raise ContractError(f"layer {idx}: token count {l} != rank {self.rank}")
            if self.rank > min(c_out, c_in):
                raise ContractError(
                    f"layer {idx}: rank {self.rank} exceeds min(C_out, C_in)="
                    f"{min(c_out, c_in)}")

    @classmethod
    def create(cls, channel_table: dict, rank: int, rng: Rng,
               trainable: bool = True, p_std: float = FACTOR_INIT_STD,
               scale_init: float = SCALE_INIT,
               learnable_scaling: bool = True) -> "ResidualFactors":
        """channel_table: {conv_index: (c_out, c_in)}. Factors start near zero
        but not at zero, so gradients flow through both sides of the product."""
        if not channel_table:
            raise ContractError("empty channel table")
        layers = {}
        for idx, (c_out, c_in) in sorted(channel_table.items()):
            r = rng.child("factors").child(int(idx))
            layers[int(idx)] = LayerFactors(
                p=Tensor(r.child("p").normal((rank, c_out), std=p_std),
                         requires_grad=trainable),
                q=Tensor(r.child("q").normal((rank, c_in), std=p_std),
                         requires_grad=trainable),
                a=Tensor(np.full(rank, scale_init, dtype=np.float32),
                         requires_grad=trainable and learnable_scaling),
                b=Tensor(np.full(rank, scale_init, dtype=np.float32),
                         requires_grad=trainable and learnable_scaling),
            )
        return cls(layers, rank, learnable_scaling)

    def parameters(self):
        out = []
        for lf in self.layers.values():
            out.extend([lf.p, lf.q])
            if self.learnable_scaling:
                out.extend([lf.a, lf.b])
        return out

    def deltas(self) -> dict:
        """Composed {conv_index: dW Tensor}; stays in-graph if factors are trainable."""
        out = {}
        for idx, lf in self.layers.items():
            ps, qs = scale_tokens(lf.p, lf.q, lf.a, lf.b)
            out[idx] = compose_residual(ps, qs)
        return out

    def count_trainables(self) -> int:
        table = {i: (lf.p.shape[1], lf.q.shape[1]) for i, lf in self.layers.items()}
        return count_trainables(table, self.rank,
                                include_scaling=self.learnable_scaling)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for idx, lf in self.layers.items():
            h.update(str(idx).encode())
            for t in (lf.p, lf.q, lf.a, lf.b):
                h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def to_arrays(self) -> dict:
        out = {}
        for idx, lf in self.layers.items():
            for field in ("p", "q", "a", "b"):
                out[f"factors.{idx}.{field}"] = getattr(lf, field).data
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, rank: int, learnable_scaling: bool = True,
                    trainable: bool = True) -> "ResidualFactors":
        by_layer: dict = {}
        for name, arr in arrays.items():
            parts = name.split(".")
            if len(parts) != 3 or parts[0] != "factors":
                continue
            by_layer.setdefault(int(parts[1]), {})[parts[2]] = arr
        layers = {}
        for idx, fields in by_layer.items():
            if set(fields) != {"p", "q", "a", "b"}:
                raise ContractError(f"factors for layer {idx} are incomplete")
            layers[idx] = LayerFactors(
                p=Tensor(fields["p"], requires_grad=trainable),
                q=Tensor(fields["q"], requires_grad=trainable),
                a=Tensor(fields["a"], requires_grad=trainable and learnable_scaling),
                b=Tensor(fields["b"], requires_grad=trainable and learnable_scaling),
            )
        return cls(layers, rank, learnable_scaling)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


def count_trainables(channel_table, rank: int, include_scaling: bool = True) -> int:
    """Trainable scalars for a refined layer set.

    channel_table: {conv_index: (c_out, c_in)} or iterable of (c_out, c_in).
    Per layer: L*(C_out + C_in), plus 2L when per-token scaling is counted.
    Pure arithmetic; no rank bound is enforced here.
    """
    if isinstance(channel_table, dict):
        pairs = [channel_table[k] for k in sorted(channel_table)]
    else:
        pairs = list(channel_table)
    if not pairs:
        raise ContractError("count_trainables: empty channel table")
    if rank < 1:
        raise ContractError(f"count_trainables: rank must be positive, got {rank}")
    total = 0
    for c_out, c_in in pairs:
        if c_out < 1 or c_in < 1:
            raise ContractError(f"invalid channel pair ({c_out}, {c_in})")
        total += rank * (int(c_out) + int(c_in))
        if include_scaling:
            total += 2 * rank
    return total


# public 1024-resolution channel schedule: 512 up to 64px, halved afterwards
FULLSCALE_CHANNELS = {4: 512, 8: 512, 16: 512, 32: 512, 64: 512,
                      128: 256, 256: 128, 512: 64, 1024: 32}


def fullscale_channel_table() -> dict:
    """{conv_index: (c_out, c_in)} for the 17 convs of a 1024px generator."""
    res_list = sorted(FULLSCALE_CHANNELS)
    table = {}
    idx = 0
    prev = FULLSCALE_CHANNELS[res_list[0]]
    for level, res in enumerate(res_list):
        ch = FULLSCALE_CHANNELS[res]
        n_here = 1 if level == 0 else 2
        for k in range(n_here):
            c_in = prev if k == 0 else ch
            table[idx] = (ch, c_in)
            idx += 1
        prev = ch
    return table


def toy_channel_table(config, refined: list) -> dict:
    """{conv_index: (c_out, c_in)} for selected conv slots of a generator config."""
    by_index = {s.conv_index: (s.c_out, s.c_in) for s in config.conv_slots()}
    table = {}
    for idx in refined:
        if idx not in by_index:
            raise ContractError(
                f"conv slot {idx} does not exist (0..{config.n_conv - 1})")
        table[idx] = by_index[idx]
    return table


# ---------------------------------------------------------------------------
# one-sided Jacobi singular values
# ---------------------------------------------------------------------------


def _round_robin_rounds(n: int):
    """Disjoint pair schedule covering all (p, q), n-1 rounds of ~n/2 pairs."""
    cols = list(range(n))
    if n % 2:
        cols.append(n)  # dummy sits out
    m = len(cols)
    rounds = []
    arr = cols[:]
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = arr[i], arr[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.asarray(ps), np.asarray(qs)))
        arr = [arr[0], arr[-1]] + arr[1:-1]
    return rounds


def _jacobi_orthogonalize(a: np.ndarray, tol: float, max_sweeps: int,
                          v: np.ndarray | None):
    """One-sided Jacobi on a batch [B, K, M] whose ROWS play the column role.

    Rotates row pairs (round-robin parallel ordering, ~K/2 disjoint pairs per
    step) until every pair is orthogonal to relative tolerance `tol`. Mutates
    `a` (and the accumulator `v`, if given) in place.
    """
    k = a.shape[1]
    tiny = np.finfo(np.float64).tiny
    for _ in range(max_sweeps):
        worst = 0.0
        for ps, qs in _round_robin_rounds(k):
            cp = a[:, ps, :]
            cq = a[:, qs, :]
            app = np.einsum("bkm,bkm->bk", cp, cp)
            aqq = np.einsum("bkm,bkm->bk", cq, cq)
            apq = np.einsum("bkm,bkm->bk", cp, cq)
            denom = np.sqrt(app * aqq) + tiny
            worst = max(worst, float(np.max(np.abs(apq) / denom)))
            theta = 0.5 * np.arctan2(2.0 * apq, app - aqq)
            c = np.cos(theta)[:, :, None]
            s = np.sin(theta)[:, :, None]
            a[:, ps, :] = c * cp + s * cq
            a[:, qs, :] = c * cq - s * cp
            if v is not None:
                vp = v[:, ps, :]
                vq = v[:, qs, :]
                v[:, ps, :] = c * vp + s * vq
                v[:, qs, :] = c * vq - s * vp
        if worst <= tol:
            break


def jacobi_singular_values(mats, tol: float = JACOBI_TOL, max_sweeps: int = 60,
                           want_vectors: bool = False):
    """Singular values of one matrix [m, n] or a batch [B, m, n].

    Forms the Gram matrix over the smaller dimension (K = min(m, n)) and runs
    one-sided Jacobi on it; for a symmetric PSD matrix the singular values are
    its eigenvalues, so sigma(A) = sqrt(sigma(Gram)). Returns sigma sorted
    descending ([K] or [B, K]). With `want_vectors`, also returns the
    accumulated rotations, whose columns are the singular vectors of A on the
    smaller-dimension side (for [n_samples, d] data with n_samples >= d these
    are the right singular vectors, i.e. principal directions).

    Squaring halves the usable dynamic range: singular values below roughly
    1e-7 of the largest are at the float64 noise floor. Fine for spectra and
    principal directions; rank-deficiency certificates at tighter thresholds
    should not come from this routine.
    """
    arr = np.asarray(mats, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3:
        raise ContractError(f"jacobi_singular_values: ndim {arr.ndim}")
    _, m, n = arr.shape
    small = arr if m <= n else np.swapaxes(arr, 1, 2)
    gram = np.ascontiguousarray(small @ np.swapaxes(small, 1, 2))  # [B, K, K]
    b, k, _ = gram.shape
    v = None
    if want_vectors:
        v = np.broadcast_to(np.eye(k), (b, k, k)).copy()
    _jacobi_orthogonalize(gram, tol, max_sweeps, v)
    lam = np.sqrt(np.einsum("bkm,bkm->bk", gram, gram))  # eigenvalues of Gram
    sigma = np.sqrt(lam)
    order = np.argsort(-sigma, axis=1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=1)
    if want_vectors:
        # accumulator rows hold the rotated basis; transpose to column vectors
        vecs = np.swapaxes(v, 1, 2)
        vecs = np.take_along_axis(vecs, order[:, None, :], axis=2)
        return (sigma[0], vecs[0]) if single else (sigma, vecs)
    return sigma[0] if single else sigma
