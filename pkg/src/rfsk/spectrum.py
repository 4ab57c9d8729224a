"""Singular-value spectra of the dynamic (modulated) kernels.

For sampled latents, each conv slot's modulated kernel s (.) W0 is flattened
to [C_out, C_in*9] and decomposed; per-sample singular values are averaged
position-wise. The resulting spectra justify the low-rank residual form: a
small leading fraction of singular values carries most of the mass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .generator import (GeneratorBundle, affine_style, broadcast_w, map_latent,
                        modulate_kernel, sample_z)
from .refinement import jacobi_singular_values
from .rng import Rng


@dataclass
class LayerSpectrum:
    conv_index: int
    resolution: int
    c_out: int
    c_in: int
    sigma: np.ndarray            # descending, averaged over samples
    cumulative_fraction: np.ndarray

    def top_fraction(self, quantile: float = 0.125) -> float:
        """Share of the singular-value sum carried by the top `quantile` values."""
        k = max(1, int(round(quantile * len(self.sigma))))
        return float(self.sigma[:k].sum() / self.sigma.sum())


@dataclass
class SpectrumReport:
    layers: list
    n_samples: int
    seed: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "index", "sigma", "cumulative_fraction"])
            for ls in self.layers:
                for i, (s, c) in enumerate(zip(ls.sigma, ls.cumulative_fraction)):
                    w.writerow([ls.conv_index, i, f"{s:.10e}", f"{c:.10f}"])

    @staticmethod
    def read_csv(path):
        rows = []
        with open(path, newline="") as f:
            r = csv.DictReader(f)
            for row in r:
                rows.append((int(row["layer"]), int(row["index"]),
                             float(row["sigma"]), float(row["cumulative_fraction"])))
        return rows


def kernel_spectrum(bundle: GeneratorBundle, n_samples: int = 64,
                    seed: int = 0) -> SpectrumReport:
    """Average dynamic-kernel spectra over `n_samples` sampled latents."""
    if n_samples < 1:
        raise ContractError("kernel_spectrum: n_samples must be positive")
    cfg = bundle.config
    rng = Rng(seed).child("spectrum")
    flats = {slot.conv_index: [] for slot in cfg.conv_slots()}
    for i in range(n_samples):
        z = sample_z(cfg, rng.child(i))
        w_plus = broadcast_w(map_latent(bundle, z), cfg.n_w)
        for slot in cfg.conv_slots():
            s = affine_style(bundle, w_plus, slot.w_index)
            wm = modulate_kernel(bundle.params[f"conv.{slot.conv_index}.weight"],
                                 s, demodulate=False)
            flats[slot.conv_index].append(
                wm.data.reshape(slot.c_out, -1).astype(np.float64))
    layers = []
    for slot in cfg.conv_slots():
        batch = np.stack(flats[slot.conv_index])     # [n, c_out, c_in*9]
        sig = jacobi_singular_values(batch).mean(axis=0)
        total = sig.sum()
        if total <= 0:
            raise ContractError(
                f"conv slot {slot.conv_index} has an all-zero kernel spectrum")
        layers.append(LayerSpectrum(
            conv_index=slot.conv_index, resolution=slot.resolution,
            c_out=slot.c_out, c_in=slot.c_in, sigma=sig,
            cumulative_fraction=np.cumsum(sig) / total))
    return SpectrumReport(layers=layers, n_samples=n_samples, seed=seed)
