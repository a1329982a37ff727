"""Exactly invertible latent codec and first-frame conditioning.

Videos are patchified (2,2,2) and each flattened patch is multiplied by a
fixed orthogonal matrix, so decode(encode(v)) reproduces v to float round-off.
This replaces a learned VAE: the codec contributes no modeling error, which
keeps generation quality attributable to the denoiser alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rand import make_rng

PATCH = (2, 2, 2)  # frames, height, width
CODEC_SEED = 20240117  # fixes the orthogonal basis; part of the wire format


class ExtentError(ValueError):
    """Video extents incompatible with the patch size or configuration."""


@dataclass
class PixelVideo:
    """A video as (frames, height, width, channels) floats, nominally in [-1, 1].

    Range is a dataset convention, not enforced here, because decoded model
    outputs may overshoot slightly; finiteness and a nonempty frame axis are.
    """

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ExtentError(f"PixelVideo expects (F, H, W, C), got shape {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ExtentError("PixelVideo needs at least one frame")
        if not np.all(np.isfinite(self.data)):
            raise ExtentError("PixelVideo contains non-finite values")

    @property
    def extents(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass
class LatentVideo:
    """Token grid (F', H', W') with per-token channel dim d = patch volume * C."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ExtentError(f"LatentVideo expects (F', H', W', d), got shape {self.data.shape}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def tokens(self) -> np.ndarray:
        """Flatten the grid to (F'*H'*W', d) in frame-major order."""
        return self.data.reshape(-1, self.data.shape[3])


def _orthogonal_basis(dim: int) -> np.ndarray:
    rng = make_rng(CODEC_SEED, "codec-basis", dim)
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    # Fix signs so the basis is unique regardless of LAPACK's QR convention.
    q = q * np.sign(np.diag(r))
    return q


_BASIS_CACHE: dict[int, np.ndarray] = {}


def patch_basis(channels: int) -> np.ndarray:
    """Fixed orthogonal matrix mixing one flattened (2,2,2,C) patch."""
    dim = PATCH[0] * PATCH[1] * PATCH[2] * channels
    if dim not in _BASIS_CACHE:
        _BASIS_CACHE[dim] = _orthogonal_basis(dim)
    return _BASIS_CACHE[dim]


def latent_dim(channels: int = 3) -> int:
    return PATCH[0] * PATCH[1] * PATCH[2] * channels


def encode(video: PixelVideo) -> LatentVideo:
    f, h, w, c = video.data.shape
    pf, ph, pw = PATCH
    for name, extent, p in (("frames", f, pf), ("height", h, ph), ("width", w, pw)):
        if extent % p != 0:
            raise ExtentError(f"encode: {name} extent {extent} not divisible by patch {p}")
    x = video.data.reshape(f // pf, pf, h // ph, ph, w // pw, pw, c)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6).reshape(f // pf, h // ph, w // pw, -1)
    q = patch_basis(c).astype(x.dtype)
    return LatentVideo(x @ q)


def decode(latent: LatentVideo, channels: int = 3) -> PixelVideo:
    fp, hp, wp, d = latent.data.shape
    expected = latent_dim(channels)
    if d != expected:
        raise ExtentError(f"decode: latent dim {d} != {expected} for {channels} channels")
    q = patch_basis(channels).astype(latent.data.dtype)
    x = latent.data @ q.T
    pf, ph, pw = PATCH
    x = x.reshape(fp, hp, wp, pf, ph, pw, channels)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6).reshape(fp * pf, hp * ph, wp * pw, channels)
    return PixelVideo(x)


def first_frame_condition(first: np.ndarray, frames: int) -> LatentVideo:
    """Encode [first, -1, -1, ...]: the first frame padded temporally with -1."""
    first = np.asarray(first)
    if first.ndim != 3:
        raise ExtentError(f"first frame must be (H, W, C), got {first.shape}")
    pad = np.full((frames - 1,) + first.shape, -1.0, dtype=first.dtype)
    return encode(PixelVideo(np.concatenate([first[None], pad], axis=0)))


def channel_concat(a: LatentVideo, b: LatentVideo) -> np.ndarray:
    """Per-token channel concatenation of two latents on the same grid."""
    if a.grid != b.grid:
        raise ExtentError(f"channel_concat: grids differ {a.grid} vs {b.grid}")
    return np.concatenate([a.data, b.data], axis=-1)


def pad_reference(ref: PixelVideo, target_hw: tuple[int, int]) -> PixelVideo:
    """Zero-pad a reference video symmetrically in H/W up to the target extents.

    The original extents and offsets are recorded in the result's meta so the
    content box stays recoverable.
    """
    f, h, w, c = ref.data.shape
    th, tw = target_hw
    if h > th or w > tw:
        raise ExtentError(f"pad_reference: reference {h}x{w} exceeds target {th}x{tw}")
    top = (th - h) // 2
    left = (tw - w) // 2
    out = np.zeros((f, th, tw, c), dtype=ref.data.dtype)
    out[:, top:top + h, left:left + w, :] = ref.data
    meta = dict(ref.meta)
    meta["content_box"] = {"top": top, "left": left, "height": h, "width": w}
    return PixelVideo(out, meta=meta)
