"""Low-rank dynamic-kernel refinement for a miniature style-based generator.

The package implements, at desk scale: a modulated-convolution generator,
per-layer factored kernel residuals, transformer-based inversion that infers
those residuals from images, and token-space optimization for domain
adaptation. Everything runs on a small hand-rolled autodiff engine so the
numerical claims are checkable end to end.
"""

__version__ = "0.1.0"
