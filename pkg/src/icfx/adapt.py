"""One-shot effect adaptation: learn concept tokens from a single example.

The backbone stays frozen (checksum-verified); only a small zero-initialized
token block appended to the unified sequence is trained. Each step builds a
fresh reference/target pair from two independent augmentations of the one
example, so the tokens see the effect under varied geometry instead of
memorizing pixels. Augmentation: exactly three transforms drawn from
{crop-resize, shear, translation, rotation, sharpen}, then a 50% horizontal
flip; one transform set applies to every frame of the clip.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import codec, store
from .autodiff import Adam, Tape, Tensor
from .codec import PixelVideo
from .denoiser import Denoiser, DenoiserConfig, param_checksums
from .diffusion import NoiseSchedule, TrainingError, add_noise
from .icmask import FlowTable
from .rand import make_rng

CONCEPT_FORMAT = "icfx.concept-tokens"
CONCEPT_VERSION = 1

AUGMENT_POOL = ("crop", "shear", "translate", "rotate", "sharpen")
AUGMENT_COUNT = 3
MAX_CROP_MARGIN = 0.12
MAX_SHEAR_DEG = 8.0
MAX_TRANSLATE_PX = 2
MAX_ROTATE_DEG = 8.0
MAX_SHARPEN = 0.5


def _affine_remap(video: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Apply an output->source affine map with nearest sampling, edge clamped."""
    h, w = video.shape[1:3]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_y = mat[0, 0] * yy + mat[0, 1] * xx + mat[0, 2]
    src_x = mat[1, 0] * yy + mat[1, 1] * xx + mat[1, 2]
    yi = np.clip(np.rint(src_y), 0, h - 1).astype(np.intp)
    xi = np.clip(np.rint(src_x), 0, w - 1).astype(np.intp)
    return video[:, yi, xi]


def _center_matrix(h: int, w: int, core: np.ndarray) -> np.ndarray:
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    to_center = np.array([[1, 0, -cy], [0, 1, -cx], [0, 0, 1.0]])
    back = np.array([[1, 0, cy], [0, 1, cx], [0, 0, 1.0]])
    return back @ core @ to_center


def _box_blur3(video: np.ndarray) -> np.ndarray:
    padded = np.pad(video, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(video)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy:dy + video.shape[1], dx:dx + video.shape[2]]
    return out / 9.0


def hflip(video: PixelVideo) -> PixelVideo:
    """Exact horizontal mirror; an involution (applying it twice is identity)."""
    return PixelVideo(np.ascontiguousarray(video.data[:, :, ::-1, :]), meta=dict(video.meta))


def augment(video: PixelVideo, rng: np.random.Generator) -> PixelVideo:
    """Three random transforms plus a 50% horizontal flip, same for all frames."""
    data = np.asarray(video.data, dtype=np.float32)
    h, w = data.shape[1:3]
    picks = rng.choice(len(AUGMENT_POOL), size=AUGMENT_COUNT, replace=False)
    for pick in picks:
        name = AUGMENT_POOL[pick]
        if name == "crop":
            margin = float(rng.uniform(0.02, MAX_CROP_MARGIN))
            crop_h = h * (1.0 - margin)
            top = float(rng.uniform(0.0, h - crop_h))
            left = float(rng.uniform(0.0, w - crop_h))
            mat = np.array([
                [crop_h / h, 0.0, top],
                [0.0, crop_h / w, left],
                [0.0, 0.0, 1.0],
            ])
            data = _affine_remap(data, mat)
        elif name == "shear":
            ang = math.radians(float(rng.uniform(-MAX_SHEAR_DEG, MAX_SHEAR_DEG)))
            core = np.array([[1.0, 0.0, 0.0], [math.tan(ang), 1.0, 0.0], [0.0, 0.0, 1.0]])
            data = _affine_remap(data, _center_matrix(h, w, core))
        elif name == "translate":
            dy = int(rng.integers(-MAX_TRANSLATE_PX, MAX_TRANSLATE_PX + 1))
            dx = int(rng.integers(-MAX_TRANSLATE_PX, MAX_TRANSLATE_PX + 1))
            mat = np.array([[1.0, 0.0, -dy], [0.0, 1.0, -dx], [0.0, 0.0, 1.0]])
            data = _affine_remap(data, mat)
        elif name == "rotate":
            ang = math.radians(float(rng.uniform(-MAX_ROTATE_DEG, MAX_ROTATE_DEG)))
            core = np.array([
                [math.cos(ang), -math.sin(ang), 0.0],
                [math.sin(ang), math.cos(ang), 0.0],
                [0.0, 0.0, 1.0],
            ])
            data = _affine_remap(data, _center_matrix(h, w, core))
        else:  # sharpen
            amount = float(rng.uniform(0.1, MAX_SHARPEN))
            data = np.clip(data + amount * (data - _box_blur3(data)), -1.0, 1.0)
    if rng.random() < 0.5:
        data = data[:, :, ::-1, :]
    return PixelVideo(np.ascontiguousarray(data, dtype=np.float32), meta=dict(video.meta))


# ---------------------------------------------------------------------------
# phase-2 training

@dataclass
class AdaptConfig:
    steps: int = 300
    concept_len: int = 8
    batch: int = 4
    lr: float = 1e-2
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    mask_mode: str = "canonical"
    attention_path: str = "decomposed"
    schedule_steps: int = 1000

    def __post_init__(self):
        if self.steps < 0 or self.concept_len <= 0 or self.batch <= 0:
            raise ValueError("steps must be >= 0; concept_len and batch positive")


@dataclass
class AdaptResult:
    concept: Tensor
    losses: list[float] = field(default_factory=list)


def adapt(den: Denoiser, example_prompt: np.ndarray, example_video: PixelVideo,
          cfg: AdaptConfig) -> AdaptResult:
    """Train concept tokens on one example; every backbone weight stays frozen."""
    for p in den.params.values():
        p.requires_grad = False
    before = param_checksums(den.params)

    d = den.cfg.model_dim
    concept = Tensor(np.zeros((cfg.concept_len, d), dtype=np.float32), requires_grad=True)
    opt = Adam({"concept": concept}, lr=cfg.lr, betas=cfg.adam_betas)
    schedule = NoiseSchedule.linear(cfg.schedule_steps)
    table = FlowTable.for_mode(cfg.mask_mode)
    rng = make_rng(cfg.seed, "adapt-loop")
    frames = example_video.data.shape[0]
    prompt = np.asarray(example_prompt, dtype=np.int64)

    losses: list[float] = []
    for step in range(cfg.steps):
        refs, tgts, zis = [], [], []
        for _ in range(cfg.batch):
            ref_view = augment(example_video, rng)
            tgt_view = augment(example_video, rng)
            refs.append(codec.encode(ref_view).tokens())
            tgts.append(codec.encode(tgt_view).tokens())
            zis.append(codec.first_frame_condition(tgt_view.data[0], frames).tokens())
        ref_z = np.stack(refs).astype(np.float32)
        tgt_z0 = np.stack(tgts).astype(np.float32)
        zi = np.stack(zis).astype(np.float32)
        grid = codec.encode(example_video).grid
        t = rng.integers(1, schedule.steps, size=cfg.batch)
        eps = rng.standard_normal(tgt_z0.shape).astype(np.float32)
        z_t = add_noise(tgt_z0, t, eps, schedule)
        ids = np.repeat(prompt[None], cfg.batch, axis=0)
        with Tape() as tape:
            seq = den.prepare_sequence(ids, ids, np.concatenate([z_t, zi], axis=-1),
                                       ref_z, grid, concept=concept)
            pred = den.denoise(seq, t, table, cfg.attention_path)
            loss = ad.mse(pred, Tensor(eps.reshape((cfg.batch,) + grid + (-1,))))
            tape.backward(loss)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite adaptation loss at step {step}")
        opt.step()
        opt.zero_grad()
        losses.append(value)

    after = param_checksums(den.params)
    if after != before:
        drift = [k for k in before if before[k] != after[k]]
        raise TrainingError(f"frozen backbone drifted during adaptation: {drift}")
    return AdaptResult(concept, losses)


# ---------------------------------------------------------------------------
# sidecar storage

def save_concept(path: str | Path, concept: Tensor, effect_name: str,
                 cfg: AdaptConfig, extra: dict | None = None) -> None:
    manifest = {
        "format": CONCEPT_FORMAT,
        "version": CONCEPT_VERSION,
        "effect": effect_name,
        "adapt_config": asdict(cfg),
        "extra": extra or {},
    }
    store.save_bundle(path, manifest, {"concept": concept.data})


def load_concept(path: str | Path) -> tuple[Tensor, dict]:
    manifest, arrays = store.load_bundle(path)
    if manifest.get("format") != CONCEPT_FORMAT:
        raise store.BundleError(f"{path} is not a concept-token bundle")
    return Tensor(arrays["concept"]), manifest
