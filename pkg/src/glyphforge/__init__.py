"""Reference-conditioned diffusion models for glyph synthesis.

The subpackages cover the whole pipeline: rasterizing font pairs
(:mod:`~glyphforge.dataset`), the noise schedule and reverse-step algebra
(:mod:`~glyphforge.diffusion`), the conditional UNet
(:mod:`~glyphforge.denoiser`), training and checkpoints, few-step sampling,
evaluation metrics and studies, and bitmap-to-SVG tracing
(:mod:`~glyphforge.vectorize`).
"""
__version__ = "0.1.0"
