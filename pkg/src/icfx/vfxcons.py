"""Effect-consistency scoring: EOS / EFS / CLS with gated averaging.

Three binary judgments per clip with a progressive dependency: if no effect
occurs (EOS false) the later dimensions are skipped and recorded as 0, and
content leakage (CLS) is only meaningful when the effect is faithful (EFS
true). The clip score is the mean of the three indicators.

Two judges implement the interface: a deterministic oracle that exploits the
synthetic ground truth (re-rendering candidate effects and measuring family
signatures), and an optional remote VLM client that is never required by
tests; a stub server stands in for it.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .codec import PixelVideo
from .rand import make_rng
from .synthvfx import (ALL_FAMILIES, PALETTE, STRENGTH_RANGES, EffectSpec,
                       SceneSpec, apply_effect, render_static, subject_mask)


class GatingError(ValueError):
    """EOS/EFS/CLS combination violates the progressive dependency."""


@dataclass(frozen=True)
class VfxConsVerdict:
    """Gated per-clip verdict; skipped dimensions are recorded as False."""

    eos: bool
    efs: bool
    cls: bool
    rationale: dict[str, str] = field(default_factory=dict)
    detected_family: str | None = None
    estimated_strength: float | None = None

    def __post_init__(self):
        if self.efs and not self.eos:
            raise GatingError("EFS cannot be true when EOS is false")
        if self.cls and not self.efs:
            raise GatingError("CLS cannot be true when EFS is false")

    @property
    def score(self) -> float:
        return score(float(self.eos), float(self.efs), float(self.cls))


def score(eos: float, efs: float, cls: float) -> float:
    """(EOS + EFS + CLS) / 3 over already-gated indicator values or rates.

    Per-clip gating is enforced upstream by VfxConsVerdict. At rate level only
    efs <= eos is checkable (published rate tables may carry cls > efs because
    CLS skips are driven by EOS).
    """
    for name, v in (("eos", eos), ("efs", efs), ("cls", cls)):
        if not (0.0 <= v <= 1.0):
            raise GatingError(f"{name}={v} outside [0, 1]")
    if efs > eos + 1e-9:
        raise GatingError(f"ungated input: efs={efs} exceeds eos={eos}")
    return (eos + efs + cls) / 3.0


def gate(eos: bool, efs: bool, cls: bool) -> VfxConsVerdict:
    """Apply the progressive dependency to raw booleans."""
    efs = bool(efs) and bool(eos)
    cls = bool(cls) and efs
    return VfxConsVerdict(bool(eos), efs, cls)


# ---------------------------------------------------------------------------
# oracle judge

@dataclass(frozen=True)
class JudgeTruth:
    """Manifest ground truth for one generated clip."""

    effect: EffectSpec
    scene: SceneSpec
    ref_scene: SceneSpec | None = None


@dataclass(frozen=True)
class OracleThresholds:
    """Detector thresholds; the calibration run pins them against ground truth."""

    change_level: float = 0.25        # per-pixel inf-norm to count as changed
    temporal_change_min: float = 0.05
    monotone_min: float = 0.70
    ramp_min: float = 0.15            # changed fraction must rise by this much
    dissolve_final_min: float = 0.25
    dissolve_scatter_min: float = 0.55  # diff-vector spread around the mean diff
    dispersion_min: float = 0.45      # occupied 4x4 cells fraction
    bright_level: float = 0.60        # min channel above this counts as white
    sparkle_final_min: float = 0.12
    sparkle_white_max_for_dissolve: float = 0.50
    fit_quality_min: float = 0.20
    strength_rel_tol: float = 0.30
    fit_grid_points: int = 61


@dataclass
class FamilyReading:
    fires: bool
    strength: float
    score: float
    note: str


def _monotone_fraction(curve: np.ndarray, slack: float = 0.01) -> float:
    if curve.size < 2:
        return 1.0
    steps = np.diff(curve)
    return float(np.mean(steps >= -slack))


def _cell_occupancy(mask: np.ndarray, cell: int = 4) -> float:
    h, w = mask.shape
    cells = mask.reshape(h // cell, cell, w // cell, cell).any(axis=(1, 3))
    return float(cells.mean())


def _changed_fraction_curve(gen: np.ndarray, static: np.ndarray, level: float) -> np.ndarray:
    diff = np.abs(gen - static).max(axis=-1)
    return (diff > level).mean(axis=(1, 2))


def _detect_dissolve(gen, static, th: OracleThresholds) -> FamilyReading:
    curve = _changed_fraction_curve(gen, static, th.change_level)
    mono = _monotone_fraction(curve)
    final = float(curve[-1])
    ramp = final - float(curve[0])
    changed = np.abs(gen[-1] - static[-1]).max(axis=-1) > th.change_level
    if changed.sum() < 4:
        return FamilyReading(False, final, 0.0, "too few changed pixels")
    vecs = (gen[-1] - static[-1])[changed]
    norms = np.linalg.norm(vecs, axis=1)
    # Noise replacement spreads diff vectors around their mean; uniform color
    # shifts (freeze, sparkle whites) collapse onto it.
    scatter = float(np.linalg.norm(vecs - vecs.mean(axis=0), axis=1).mean()
                    / (norms.mean() + 1e-9))
    dispersion = _cell_occupancy(changed)
    white_frac = float((gen[-1][changed].min(axis=-1) > th.bright_level).mean())
    fires = (mono >= th.monotone_min and final >= th.dissolve_final_min
             and ramp >= th.ramp_min and scatter >= th.dissolve_scatter_min
             and dispersion >= th.dispersion_min
             and white_frac <= th.sparkle_white_max_for_dissolve)
    strength_score = min(1.0, final / th.dissolve_final_min)
    note = (f"changed fraction {final:.2f}, monotone {mono:.2f}, "
            f"scatter {scatter:.2f}, dispersion {dispersion:.2f}")
    return FamilyReading(fires, final, mono * strength_score * scatter, note)


def _detect_sparkle(gen, static, th: OracleThresholds) -> FamilyReading:
    bright = gen.min(axis=-1) > th.bright_level
    curve = bright.mean(axis=(1, 2))
    mono = _monotone_fraction(curve)
    final = float(curve[-1])
    dispersion = _cell_occupancy(bright[-1]) if bright[-1].any() else 0.0
    fires = (mono >= th.monotone_min and final >= th.sparkle_final_min
             and dispersion >= 0.3)
    note = f"white fraction {final:.2f}, monotone {mono:.2f}, dispersion {dispersion:.2f}"
    return FamilyReading(fires, final, mono * min(1.0, final / th.sparkle_final_min), note)


def _fit_strength(gen: np.ndarray, scene: SceneSpec, family: str,
                  th: OracleThresholds) -> tuple[float, float]:
    """Grid-fit the family's strength by re-rendering; returns (strength, msd)."""
    lo, hi = STRENGTH_RANGES[family]
    grid = np.linspace(0.5 * lo, 1.15 * hi, th.fit_grid_points)
    frames, size = gen.shape[0], gen.shape[1]
    dists = np.empty(grid.size)
    for i, s in enumerate(grid):
        cand = apply_effect(EffectSpec(family, float(s)), scene, frames, size)
        dists[i] = float(np.mean((cand - gen) ** 2))
    best = np.flatnonzero(dists == dists.min())
    pick = best[len(best) // 2]  # middle of a quantization plateau
    return float(grid[pick]), float(dists[pick])


def _detect_by_fit(gen, static, scene, family, th: OracleThresholds) -> FamilyReading:
    d_static = float(np.mean((static - gen) ** 2))
    if d_static < 1e-6:
        return FamilyReading(False, 0.0, 0.0, "no deviation from static scene")
    strength, d_best = _fit_strength(gen, scene, family, th)
    quality = 1.0 - d_best / d_static
    fires = quality >= th.fit_quality_min
    note = f"fit strength {strength:.3f}, residual quality {quality:.2f}"
    return FamilyReading(fires, strength, max(quality, 0.0), note)


def family_readings(gen: np.ndarray, truth_scene: SceneSpec,
                    th: OracleThresholds) -> dict[str, FamilyReading]:
    static = render_static(truth_scene, frames=gen.shape[0], size=gen.shape[1]).data
    readings = {
        "dissolve": _detect_dissolve(gen, static, th),
        "sparkle": _detect_sparkle(gen, static, th),
    }
    for family in ("explode", "melt", "freeze"):
        readings[family] = _detect_by_fit(gen, static, truth_scene, family, th)
    return readings


def _nearest_palette(pixels: np.ndarray) -> np.ndarray:
    d = ((pixels[:, None, :] - PALETTE[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def dominant_subject_color(video: np.ndarray, scene: SceneSpec) -> int:
    """Histogram argmax of nearest palette colors inside the subject region, early frames."""
    early = video[: max(1, video.shape[0] // 2)]
    region = subject_mask(scene, video.shape[1])
    pixels = early[:, region, :].reshape(-1, video.shape[-1])
    counts = np.bincount(_nearest_palette(pixels), minlength=len(PALETTE))
    return int(counts.argmax())


def _ref_subject_color(ref: np.ndarray) -> int:
    """Estimate the reference subject color from its first frame.

    Backgrounds are dim, subjects saturated, so the subject is the most common
    high-saturation palette match.
    """
    frame = ref[0].reshape(-1, ref.shape[-1])
    saturated = np.abs(frame).max(axis=1) > 0.6
    if not saturated.any():
        saturated = np.ones(frame.shape[0], dtype=bool)
    counts = np.bincount(_nearest_palette(frame[saturated]), minlength=len(PALETTE))
    return int(counts.argmax())


def oracle_judge(ref: PixelVideo, gen: PixelVideo, truth: JudgeTruth,
                 thresholds: OracleThresholds | None = None) -> VfxConsVerdict:
    """Deterministic verdict against manifest ground truth."""
    th = thresholds or OracleThresholds()
    g = np.asarray(gen.data, dtype=np.float64)
    rationale: dict[str, str] = {}

    if float(np.abs(g - g[0]).max()) < th.temporal_change_min:
        rationale["eos"] = "no temporal change: video is static"
        return VfxConsVerdict(False, False, False, rationale)

    readings = family_readings(g, truth.scene, th)
    fired = {f: r for f, r in readings.items() if r.fires}
    if not fired:
        rationale["eos"] = "no family detector fired: " + "; ".join(
            f"{f}: {r.note}" for f, r in readings.items())
        return VfxConsVerdict(False, False, False, rationale)

    detected = max(fired, key=lambda f: fired[f].score)
    reading = fired[detected]
    rationale["eos"] = f"{detected} detector fired ({reading.note})"
    eos = True

    truth_strength = truth.effect.strength
    family_ok = detected == truth.effect.family
    strength_ok = (abs(reading.strength - truth_strength)
                   <= th.strength_rel_tol * abs(truth_strength)) if truth_strength else False
    efs = family_ok and strength_ok
    if not family_ok:
        rationale["efs"] = f"detected {detected}, truth {truth.effect.family}"
    elif not strength_ok:
        rationale["efs"] = (f"strength {reading.strength:.3f} outside "
                            f"{th.strength_rel_tol:.0%} of truth {truth_strength:.3f}")
    else:
        rationale["efs"] = f"family and strength match ({reading.note})"

    if not efs:
        rationale["cls"] = "skipped: EFS false"
        return VfxConsVerdict(eos, False, False, rationale,
                              detected_family=detected, estimated_strength=reading.strength)

    dominant = dominant_subject_color(g, truth.scene)
    ref_color = (truth.ref_scene.subject_color if truth.ref_scene is not None
                 else _ref_subject_color(np.asarray(ref.data, dtype=np.float64)))
    cls = dominant == truth.scene.subject_color and dominant != ref_color
    rationale["cls"] = (f"dominant subject color {dominant}, target {truth.scene.subject_color}, "
                        f"reference {ref_color}")
    return VfxConsVerdict(eos, efs, cls, rationale,
                          detected_family=detected, estimated_strength=reading.strength)


# ---------------------------------------------------------------------------
# calibration

def calibrate(n_pairs: int = 500, seed: int = 0,
              thresholds: OracleThresholds | None = None) -> dict:
    """Measure the oracle on rendered ground truth and on family-shuffled truth.

    Targets: 100% EOS/EFS/CLS on ground truth, and EFS failing on >= 95% of
    clips whose manifest family was shuffled to a different one.
    """
    from .synthvfx import make_pair  # local import to keep module load light

    th = thresholds or OracleThresholds()
    families = list(ALL_FAMILIES)
    pass_counts = {"eos": 0, "efs": 0, "cls": 0}
    shuffle_fail = 0
    confusions: dict[tuple[str, str], int] = {}
    for i in range(n_pairs):
        rng = make_rng(seed, "calibrate", i)
        family = str(rng.choice(families))
        ref, tgt = make_pair(family, rng)
        truth = JudgeTruth(tgt.effect, tgt.scene, ref.scene)
        verdict = oracle_judge(ref.video, tgt.video, truth, th)
        for dim in pass_counts:
            pass_counts[dim] += int(getattr(verdict, dim))
        if verdict.detected_family and verdict.detected_family != family:
            confusions[(family, verdict.detected_family)] = \
                confusions.get((family, verdict.detected_family), 0) + 1
        other = str(rng.choice([f for f in families if f != family]))
        lo, hi = STRENGTH_RANGES[other]
        shuffled = JudgeTruth(EffectSpec(other, float(np.clip(tgt.effect.strength, lo, hi))),
                              tgt.scene, ref.scene)
        if not oracle_judge(ref.video, tgt.video, shuffled, th).efs:
            shuffle_fail += 1
    return {
        "pairs": n_pairs,
        "seed": seed,
        "ground_truth_pass_rate": {k: v / n_pairs for k, v in pass_counts.items()},
        "shuffled_family_efs_fail_rate": shuffle_fail / n_pairs,
        "misclassifications": {f"{a}->{b}": c for (a, b), c in sorted(confusions.items())},
        "thresholds": asdict(th),
    }


# ---------------------------------------------------------------------------
# proxy statistics (stand-ins for heavyweight video metrics; labeled as such)

@dataclass(frozen=True)
class ProxyStats:
    frechet_proxy: float
    dynamics_proxy_a: float
    dynamics_proxy_b: float
    covariance_regularized: bool


def _projection_features(videos: list[np.ndarray], dim: int = 16) -> np.ndarray:
    flat = np.stack([np.asarray(v, dtype=np.float64).reshape(-1) for v in videos])
    rng = make_rng("frechet-proxy-projection", flat.shape[1], dim)
    proj = rng.standard_normal((flat.shape[1], dim)) / np.sqrt(flat.shape[1])
    return flat @ proj


def _frechet_gaussians(mu1, cov1, mu2, cov2, eps: float = 1e-9) -> tuple[float, bool]:
    from scipy import linalg

    regularized = False
    prod = cov1 @ cov2
    sqrt_prod, _ = linalg.sqrtm(prod, disp=False)
    if not np.isfinite(sqrt_prod).all():
        regularized = True
        off = np.eye(cov1.shape[0]) * eps
        sqrt_prod = linalg.sqrtm((cov1 + off) @ (cov2 + off))
    if np.iscomplexobj(sqrt_prod):
        sqrt_prod = sqrt_prod.real
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(sqrt_prod))
    return max(value, 0.0), regularized


def proxy_stats(set_a: list[np.ndarray], set_b: list[np.ndarray]) -> ProxyStats:
    """Random-projection Frechet distance and mean inter-frame difference.

    These are desk-scale proxies, not the published video metrics: features
    are a fixed-seed random projection rather than a pretrained network.
    """
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("proxy_stats needs at least 2 videos per set")
    fa = _projection_features(set_a)
    fb = _projection_features(set_b)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)
    frechet, regularized = _frechet_gaussians(mu_a, cov_a, mu_b, cov_b)

    def dynamics(videos: list[np.ndarray]) -> float:
        vals = [float(np.abs(np.diff(np.asarray(v, dtype=np.float64), axis=0)).mean())
                for v in videos]
        return float(np.mean(vals))

    return ProxyStats(frechet, dynamics(set_a), dynamics(set_b), regularized)


# ---------------------------------------------------------------------------
# remote judge (optional; the test suite only ever talks to a local stub)

ENDPOINT_ENV = "ICFX_JUDGE_ENDPOINT"
API_KEY_ENV = "ICFX_JUDGE_API_KEY"

TEMPLATE_FILES = {
    "video_caption": "video_caption.txt",
    "first_frame_caption": "first_frame_caption.txt",
    "assessment_part1": "assessment_part1.txt",
    "assessment_part2": "assessment_part2.txt",
}


class RemoteJudgeError(RuntimeError):
    """Remote judge transport or protocol failure; never silently zero."""


def load_templates() -> dict[str, str]:
    out = {}
    for key, name in TEMPLATE_FILES.items():
        out[key] = resources.files("icfx.templates").joinpath(name).read_text(encoding="utf-8")
    return out


@dataclass
class RemoteJudgeConfig:
    endpoint: str | None = None
    api_key: str | None = None
    cache_dir: str = ".icfx_judge_cache"
    attempts: int = 3
    backoff: float = 0.25
    timeout: float = 30.0

    @classmethod
    def from_env(cls, **overrides) -> "RemoteJudgeConfig":
        cfg = cls(endpoint=os.environ.get(ENDPOINT_ENV),
                  api_key=os.environ.get(API_KEY_ENV))
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg


def _video_payload(video: PixelVideo) -> dict:
    arr = np.ascontiguousarray(video.data, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "dtype": "<f4",
        "data_b64": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _cache_key(ref: PixelVideo, gen: PixelVideo, templates: dict[str, str]) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ref.data, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(gen.data, dtype="<f4").tobytes())
    for key in sorted(templates):
        h.update(key.encode())
        h.update(templates[key].encode())
    return h.hexdigest()


def remote_judge(ref: PixelVideo, gen: PixelVideo, templates: dict[str, str] | None = None,
                 config: RemoteJudgeConfig | None = None) -> VfxConsVerdict:
    """POST frames + judging templates to an HTTP endpoint, parse, gate locally.

    Responses are cached by content hash; network failures retry with
    exponential backoff before raising RemoteJudgeError.
    """
    import requests

    cfg = config or RemoteJudgeConfig.from_env()
    if not cfg.endpoint:
        raise RemoteJudgeError(f"no judge endpoint configured ({ENDPOINT_ENV} unset)")
    templates = templates or load_templates()

    cache_dir = Path(cfg.cache_dir)
    cache_path = cache_dir / f"{_cache_key(ref, gen, templates)}.json"
    if cache_path.exists():
        cached = json.loads(cache_path.read_text())
        verdict = gate(cached["eos"], cached["efs"], cached["cls"])
        return VfxConsVerdict(verdict.eos, verdict.efs, verdict.cls,
                              rationale=cached.get("rationales", {}))

    payload = {
        "templates": templates,
        "reference": _video_payload(ref),
        "generated": _video_payload(gen),
    }
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"

    last_error: Exception | None = None
    for attempt in range(cfg.attempts):
        try:
            resp = requests.post(cfg.endpoint, json=payload, headers=headers,
                                 timeout=cfg.timeout)
        except requests.RequestException as exc:
            last_error = exc
            time.sleep(cfg.backoff * (2 ** attempt))
            continue
        if resp.status_code >= 500:
            last_error = RemoteJudgeError(f"server error {resp.status_code}")
            time.sleep(cfg.backoff * (2 ** attempt))
            continue
        if resp.status_code != 200:
            raise RemoteJudgeError(f"judge endpoint returned {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            eos, efs, cls = bool(body["eos"]), bool(body["efs"]), bool(body["cls"])
            rationales = {str(k): str(v) for k, v in body.get("rationales", {}).items()}
        except (ValueError, KeyError, TypeError) as exc:
            raise RemoteJudgeError(f"malformed judge response: {exc}") from None
        verdict = gate(eos, efs, cls)
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(json.dumps({
            "eos": verdict.eos, "efs": verdict.efs, "cls": verdict.cls,
            "rationales": rationales,
        }))
        return VfxConsVerdict(verdict.eos, verdict.efs, verdict.cls, rationale=rationales)
    raise RemoteJudgeError(f"judge endpoint unreachable after {cfg.attempts} attempts: {last_error}")
