"""Procedural paired-effect videos: same effect, different subject/background.

Each family is a one-parameter dynamic chosen so occurrence, fidelity, and
content leakage are measurable by simple statistics:

  dissolve  per-pixel replacement by fixed uniform noise, replaced fraction
            ramping linearly from 0 to `strength` over the clip
  explode   uniform zoom about the subject center, factor 1 + strength * t
  melt      rows sag downward, vertical stretch factor 1 + strength * t
            anchored at the frame top
  freeze    lerp toward deep blue by strength * t plus a mild contrast ramp
  sparkle   (held out) fresh random pixels set to white each frame, density
            ramping to `strength`

A pair shares the effect family and strength but has independently drawn
scenes with different subject and background colors, which makes leakage of
reference colors into a generated target detectable by construction.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__, store
from .assembly import PromptTokens, build_prompt
from .codec import PixelVideo
from .rand import make_rng

DATASET_FORMAT = "icfx.dataset"
DATASET_VERSION = 1

FRAMES = 8
SIZE = 16
CHANNELS = 3
SUBJECT_RADIUS = 3.0

PALETTE = np.array([
    [0.9, -0.7, -0.7],   # red
    [-0.7, 0.9, -0.7],   # green
    [-0.7, -0.7, 0.9],   # blue
    [0.9, 0.9, -0.7],    # yellow
    [0.9, -0.7, 0.9],    # magenta
    [-0.7, 0.9, 0.9],    # cyan
], dtype=np.float32)
COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan")
BACKGROUND_DIM = 0.3  # backgrounds use the palette scaled toward gray

FREEZE_TINT = np.array([-0.7, -0.7, 0.9], dtype=np.float32)
FREEZE_CONTRAST = 0.25

IN_DOMAIN_FAMILIES = ("dissolve", "explode", "melt", "freeze")
HELD_OUT_FAMILY = "sparkle"
ALL_FAMILIES = IN_DOMAIN_FAMILIES + (HELD_OUT_FAMILY,)

# Sampling ranges for dataset generation; renderers mechanically accept
# [0, 1.2 * hi] so fixed-point tests (strength 0) and detector fit grids work.
STRENGTH_RANGES = {
    "dissolve": (0.45, 0.95),
    "explode": (0.25, 0.55),
    "melt": (0.25, 0.55),
    "freeze": (0.45, 0.95),
    "sparkle": (0.30, 0.70),
}
STRENGTH_SLACK = 1.2

SHAPES = ("circle", "square", "triangle")


class SpecError(ValueError):
    """Effect or scene specification outside its declared ranges."""


@dataclass(frozen=True)
class EffectSpec:
    family: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.family not in STRENGTH_RANGES:
            raise SpecError(f"unknown effect family {self.family!r}")
        hi = STRENGTH_RANGES[self.family][1] * STRENGTH_SLACK
        if not (0.0 <= self.strength <= hi):
            raise SpecError(f"{self.family} strength {self.strength} outside [0, {hi}]")


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    subject_color: int
    background_color: int
    position: tuple[int, int]  # (dy, dx) offset of the subject center

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SpecError(f"unknown shape {self.shape!r}")
        if not (0 <= self.subject_color < len(PALETTE)):
            raise SpecError(f"subject color {self.subject_color} out of range")
        if not (0 <= self.background_color < len(PALETTE)):
            raise SpecError(f"background color {self.background_color} out of range")
        if self.subject_color == self.background_color:
            raise SpecError("subject and background colors must differ")
        dy, dx = self.position
        if abs(dy) > 2 or abs(dx) > 2:
            raise SpecError(f"subject offset {self.position} too large to keep the subject in frame")


def subject_mask(scene: SceneSpec, size: int = SIZE) -> np.ndarray:
    cy = (size - 1) / 2.0 + scene.position[0]
    cx = (size - 1) / 2.0 + scene.position[1]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = SUBJECT_RADIUS
    if scene.shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if scene.shape == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= 0.9 * r
    # upward-pointing triangle spanning [cy - r, cy + r]
    half = 0.8 * r * (yy - (cy - r)) / (2.0 * r)
    return (np.abs(xx - cx) <= half) & (yy >= cy - r) & (yy <= cy + r)


def scene_frame(scene: SceneSpec, size: int = SIZE) -> np.ndarray:
    frame = np.empty((size, size, CHANNELS), dtype=np.float32)
    frame[:] = PALETTE[scene.background_color] * BACKGROUND_DIM
    frame[subject_mask(scene, size)] = PALETTE[scene.subject_color]
    return frame


def render_static(scene: SceneSpec, frames: int = FRAMES, size: int = SIZE) -> PixelVideo:
    return PixelVideo(np.repeat(scene_frame(scene, size)[None], frames, axis=0))


def _ramp(strength: float, t: int, frames: int) -> float:
    return strength * t / (frames - 1)


def _nearest_remap(frame: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    h, w, _ = frame.shape
    yi = np.clip(np.rint(src_y), 0, h - 1).astype(np.intp)
    xi = np.clip(np.rint(src_x), 0, w - 1).astype(np.intp)
    return frame[yi, xi]


def apply_effect(effect: EffectSpec, scene: SceneSpec, frames: int = FRAMES,
                 size: int = SIZE) -> np.ndarray:
    """Deterministic effect video (F, H, W, C) on the given scene."""
    base = scene_frame(scene, size)
    out = np.repeat(base[None], frames, axis=0)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    if effect.family == "dissolve":
        rng = make_rng(effect.seed, "dissolve")
        perm = rng.permutation(size * size)
        noise = rng.uniform(-1.0, 1.0, (size * size, CHANNELS)).astype(np.float32)
        for t in range(frames):
            count = int(round(_ramp(effect.strength, t, frames) * size * size))
            flat = out[t].reshape(-1, CHANNELS)
            flat[perm[:count]] = noise[perm[:count]]
    elif effect.family == "explode":
        cy = (size - 1) / 2.0 + scene.position[0]
        cx = (size - 1) / 2.0 + scene.position[1]
        for t in range(frames):
            z = 1.0 + _ramp(effect.strength, t, frames)
            out[t] = _nearest_remap(base, cy + (yy - cy) / z, cx + (xx - cx) / z)
    elif effect.family == "melt":
        for t in range(frames):
            m = 1.0 + _ramp(effect.strength, t, frames)
            out[t] = _nearest_remap(base, yy / m, xx)
    elif effect.family == "freeze":
        for t in range(frames):
            a = _ramp(effect.strength, t, frames)
            mixed = (1.0 - a) * base + a * FREEZE_TINT
            out[t] = np.clip(mixed * (1.0 + FREEZE_CONTRAST * a), -1.0, 1.0)
    elif effect.family == "sparkle":
        rng = make_rng(effect.seed, "sparkle")
        for t in range(frames):
            count = int(round(_ramp(effect.strength, t, frames) * size * size))
            sites = rng.choice(size * size, size=count, replace=False)
            out[t].reshape(-1, CHANNELS)[sites] = 1.0
    else:  # pragma: no cover - guarded by EffectSpec
        raise SpecError(f"unknown family {effect.family}")
    return out


def render(effect: EffectSpec, scene: SceneSpec, frames: int = FRAMES,
           size: int = SIZE) -> tuple[PixelVideo, PromptTokens]:
    video = PixelVideo(apply_effect(effect, scene, frames, size))
    prompt = build_prompt(scene.shape, scene.subject_color, scene.background_color, effect.family)
    return video, prompt


# ---------------------------------------------------------------------------
# sampling and pairing

def sample_scene(rng: np.random.Generator, avoid: SceneSpec | None = None) -> SceneSpec:
    """Random scene; when avoid is given, its subject/background colors are excluded.

    Full color disjointness between the two scenes of a pair keeps the leakage
    check unambiguous: any reference color surfacing in the target subject
    region can only have come through the model.
    """
    taken = {avoid.subject_color, avoid.background_color} if avoid else set()
    while True:
        subject = int(rng.integers(0, len(PALETTE)))
        background = int(rng.integers(0, len(PALETTE)))
        if subject == background or subject in taken or background in taken:
            continue
        return SceneSpec(
            shape=str(rng.choice(SHAPES)),
            subject_color=subject,
            background_color=background,
            position=(int(rng.integers(-2, 3)), int(rng.integers(-2, 3))),
        )


def sample_strength(family: str, rng: np.random.Generator) -> float:
    lo, hi = STRENGTH_RANGES[family]
    return float(rng.uniform(lo, hi))


@dataclass
class Sample:
    effect: EffectSpec
    scene: SceneSpec
    video: PixelVideo
    prompt: PromptTokens


def make_pair(family: str, rng: np.random.Generator,
              frames: int = FRAMES, size: int = SIZE) -> tuple[Sample, Sample]:
    """Reference/target pair: identical effect parameters, disjoint scene colors."""
    strength = sample_strength(family, rng)
    ref_scene = sample_scene(rng)
    tgt_scene = sample_scene(rng, avoid=ref_scene)
    ref_effect = EffectSpec(family, strength, seed=int(rng.integers(0, 2 ** 31)))
    tgt_effect = EffectSpec(family, strength, seed=int(rng.integers(0, 2 ** 31)))
    ref_video, ref_prompt = render(ref_effect, ref_scene, frames, size)
    tgt_video, tgt_prompt = render(tgt_effect, tgt_scene, frames, size)
    return (Sample(ref_effect, ref_scene, ref_video, ref_prompt),
            Sample(tgt_effect, tgt_scene, tgt_video, tgt_prompt))


# ---------------------------------------------------------------------------
# dataset container

def _sample_record(sample: Sample, pair: int, role: str, offset: int) -> dict:
    return {
        "pair": pair,
        "role": role,
        "family": sample.effect.family,
        "strength": sample.effect.strength,
        "effect_seed": sample.effect.seed,
        "scene": asdict(sample.scene),
        "prompt": list(sample.prompt.ids),
        "offset": offset,
        "shape": list(sample.video.data.shape),
    }


def build_dataset(n_pairs: int, families: tuple[str, ...], out_path: str | Path,
                  seed: int, frames: int = FRAMES, size: int = SIZE) -> dict:
    """Render n_pairs reference/target pairs into a blob + manifest container.

    Byte layout: data.bin is the concatenation of each sample's video as C
    order little-endian float32 (F, H, W, C); manifest.json records per-sample
    byte offsets, specs, and prompt ids (the oracle judge's ground truth).
    """
    for family in families:
        if family not in STRENGTH_RANGES:
            raise SpecError(f"unknown effect family {family!r}")
    out_path = Path(out_path)
    out_path.mkdir(parents=True, exist_ok=True)
    records = []
    blob = io.BytesIO()
    offset = 0
    for pair in range(n_pairs):
        rng = make_rng(seed, "dataset-pair", pair)
        family = str(rng.choice(list(families)))
        ref, tgt = make_pair(family, rng, frames, size)
        for role, sample in (("ref", ref), ("target", tgt)):
            data = np.ascontiguousarray(sample.video.data, dtype="<f4")
            records.append(_sample_record(sample, pair, role, offset))
            blob.write(data.tobytes(order="C"))
            offset += data.nbytes
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "generator_version": __version__,
        "seed": seed,
        "frames": frames,
        "size": size,
        "channels": CHANNELS,
        "dtype": "<f4",
        "families": list(families),
        "pair_count": n_pairs,
        "samples": records,
    }
    store.atomic_write_bytes(out_path / "data.bin", blob.getvalue())
    store.write_json(out_path / "manifest.json", manifest)
    return manifest


class DatasetError(ValueError):
    """Dataset container missing, malformed, or schema-incompatible."""


class Dataset:
    """In-memory view of a dataset container."""

    def __init__(self, manifest: dict, videos: np.ndarray):
        self.manifest = manifest
        self.videos = videos  # (n_samples, F, H, W, C)
        self.records = manifest["samples"]

    @property
    def pair_count(self) -> int:
        return self.manifest["pair_count"]

    @property
    def frames(self) -> int:
        return self.manifest["frames"]

    @property
    def size(self) -> int:
        return self.manifest["size"]

    def sample(self, index: int) -> Sample:
        rec = self.records[index]
        effect = EffectSpec(rec["family"], rec["strength"], rec["effect_seed"])
        scene_dict = dict(rec["scene"])
        scene_dict["position"] = tuple(scene_dict["position"])
        scene = SceneSpec(**scene_dict)
        return Sample(effect, scene, PixelVideo(self.videos[index]),
                      PromptTokens(tuple(rec["prompt"])))

    def pair(self, pair_index: int) -> tuple[Sample, Sample]:
        ref = self.sample(2 * pair_index)
        tgt = self.sample(2 * pair_index + 1)
        if ref.effect.family != tgt.effect.family:
            raise DatasetError(f"pair {pair_index}: families differ")
        return ref, tgt


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no dataset manifest at {manifest_path}")
    manifest = store.read_json(manifest_path)
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path} is not a dataset container")
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')}")
    raw = (path / "data.bin").read_bytes()
    records = manifest["samples"]
    shape = (manifest["frames"], manifest["size"], manifest["size"], manifest["channels"])
    per = int(np.prod(shape))
    expected = len(records) * per * 4
    if len(raw) != expected:
        raise DatasetError(f"data.bin holds {len(raw)} bytes, manifest expects {expected}")
    videos = np.frombuffer(raw, dtype="<f4").reshape(len(records), *shape).copy()
    return Dataset(manifest, videos)
