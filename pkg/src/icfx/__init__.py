"""icfx: reference-based in-context conditioning for video effect diffusion, desk scale.

A small diffusion-transformer stack trained to imitate a visual effect from a
reference prompt+video pair onto a new scene, with a block-structured attention
mask that keeps reference content from leaking into the target. Everything runs
on CPU from scratch: tensor autodiff, an invertible patch codec instead of a
VAE, a procedural effect dataset, and a deterministic effect-consistency judge.
"""

__version__ = "0.1.0"

from . import autodiff  # noqa: F401
