"""Evaluation harness: render fresh test scenes, sample the model, judge.

Each case pairs a freshly rendered reference clip with a new target scene
(disjoint colors); the model sees the reference pair, the target prompt, and
the target's first frame, then the oracle scores the generation against the
manifest truth. For one-shot protocols a single fixed reference sample (the
adapted example) is reused across all cases and sets the effect parameters.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import codec, store
from .autodiff import Tensor
from .codec import PixelVideo
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, sample
from .rand import make_rng
from .synthvfx import (EffectSpec, Sample, SceneSpec, render, sample_scene,
                       sample_strength, scene_frame)
from .vfxcons import (JudgeTruth, OracleThresholds, VfxConsVerdict,
                      oracle_judge, proxy_stats, score)

EVAL_BATCH = 25


@dataclass
class EvalCase:
    reference: Sample
    effect: EffectSpec
    scene: SceneSpec
    first_frame: np.ndarray


@dataclass
class EvalReport:
    cases: int
    eos_rate: float
    efs_rate: float
    cls_rate: float
    vfx_cons: float
    frechet_proxy: float
    dynamics_proxy: float
    dynamics_reference: float
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def summary_dict(self) -> dict:
        return {
            "cases": self.cases,
            "eos_rate": self.eos_rate,
            "efs_rate": self.efs_rate,
            "cls_rate": self.cls_rate,
            "vfx_cons": self.vfx_cons,
            "frechet_proxy": self.frechet_proxy,
            "dynamics_proxy": self.dynamics_proxy,
            "dynamics_reference": self.dynamics_reference,
            "config": self.config,
        }


def build_cases(families: tuple[str, ...], n_scenes: int, seed: int,
                frames: int, size: int,
                reference: Sample | None = None) -> list[EvalCase]:
    cases = []
    for i in range(n_scenes):
        rng = make_rng(seed, "eval-case", i)
        if reference is not None:
            ref = reference
            scene = sample_scene(rng, avoid=ref.scene)
            effect = EffectSpec(ref.effect.family, ref.effect.strength,
                                seed=int(rng.integers(0, 2 ** 31)))
        else:
            family = str(rng.choice(list(families)))
            strength = sample_strength(family, rng)
            ref_scene = sample_scene(rng)
            scene = sample_scene(rng, avoid=ref_scene)
            ref_effect = EffectSpec(family, strength, seed=int(rng.integers(0, 2 ** 31)))
            ref_video, ref_prompt = render(ref_effect, ref_scene, frames, size)
            ref = Sample(ref_effect, ref_scene, ref_video, ref_prompt)
            effect = EffectSpec(family, strength, seed=int(rng.integers(0, 2 ** 31)))
        cases.append(EvalCase(ref, effect, scene, scene_frame(scene, size)))
    return cases


def generate_for_cases(den: Denoiser, schedule: NoiseSchedule, cases: list[EvalCase],
                       seed: int, sample_steps: int = 50, mask_mode: str = "canonical",
                       attention_path: str = "decomposed",
                       concept: Tensor | None = None) -> list[PixelVideo]:
    from .assembly import build_prompt

    videos: list[PixelVideo] = []
    for start in range(0, len(cases), EVAL_BATCH):
        chunk = cases[start:start + EVAL_BATCH]
        ref_ids = np.stack([c.reference.prompt.array() for c in chunk])
        tgt_ids = np.stack([
            build_prompt(c.scene.shape, c.scene.subject_color,
                         c.scene.background_color, c.effect.family).array()
            for c in chunk
        ])
        ref_latent = np.stack([
            codec.encode(c.reference.video).tokens().astype(np.float32) for c in chunk
        ])
        first_frames = np.stack([c.first_frame for c in chunk])
        grid = codec.encode(chunk[0].reference.video).grid
        out = sample(den, schedule, ref_ids, ref_latent, tgt_ids, first_frames,
                     grid, steps=sample_steps, seed=seed + start,
                     mask_mode=mask_mode, path=attention_path, concept=concept)
        videos.extend(PixelVideo(out[i]) for i in range(out.shape[0]))
    return videos


def judge_cases(cases: list[EvalCase], videos: list[PixelVideo],
                thresholds: OracleThresholds | None = None) -> list[VfxConsVerdict]:
    verdicts = []
    for case, video in zip(cases, videos):
        truth = JudgeTruth(case.effect, case.scene, ref_scene=case.reference.scene)
        verdicts.append(oracle_judge(case.reference.video, video, truth, thresholds))
    return verdicts


def aggregate(cases: list[EvalCase], videos: list[PixelVideo],
              verdicts: list[VfxConsVerdict], config: dict) -> EvalReport:
    eos = float(np.mean([v.eos for v in verdicts]))
    efs = float(np.mean([v.efs for v in verdicts]))
    cls = float(np.mean([v.cls for v in verdicts]))
    truth_videos = [render(c.effect, c.scene, v.data.shape[0], v.data.shape[1])[0].data
                    for c, v in zip(cases, videos)]
    gen_videos = [v.data for v in videos]
    if len(gen_videos) >= 2:
        proxies = proxy_stats(truth_videos, gen_videos)
        frechet = proxies.frechet_proxy
        dyn_gen, dyn_ref = proxies.dynamics_proxy_b, proxies.dynamics_proxy_a
    else:
        frechet, dyn_gen, dyn_ref = float("nan"), float("nan"), float("nan")
    rows = []
    for i, (case, verdict) in enumerate(zip(cases, verdicts)):
        rows.append({
            "case": i,
            "family": case.effect.family,
            "strength": f"{case.effect.strength:.4f}",
            "eos": int(verdict.eos),
            "efs": int(verdict.efs),
            "cls": int(verdict.cls),
            "score": f"{verdict.score:.4f}",
            "detected": verdict.detected_family or "",
            "estimated_strength": "" if verdict.estimated_strength is None
                                  else f"{verdict.estimated_strength:.4f}",
            "rationale": " | ".join(f"{k}: {v}" for k, v in verdict.rationale.items()),
        })
    return EvalReport(
        cases=len(cases), eos_rate=eos, efs_rate=efs, cls_rate=cls,
        vfx_cons=score(eos, efs, cls), frechet_proxy=frechet,
        dynamics_proxy=dyn_gen, dynamics_reference=dyn_ref,
        rows=rows, config=config,
    )


def evaluate_model(den: Denoiser, schedule: NoiseSchedule, families: tuple[str, ...],
                   n_scenes: int, seed: int, frames: int = 8, size: int = 16,
                   sample_steps: int = 50, mask_mode: str = "canonical",
                   attention_path: str = "decomposed", concept: Tensor | None = None,
                   reference: Sample | None = None,
                   thresholds: OracleThresholds | None = None) -> EvalReport:
    """End-to-end: build cases, sample, judge, aggregate."""
    cases = build_cases(families, n_scenes, seed, frames, size, reference=reference)
    videos = generate_for_cases(den, schedule, cases, seed, sample_steps,
                                mask_mode, attention_path, concept)
    verdicts = judge_cases(cases, videos, thresholds)
    config = {
        "families": list(families), "scenes": n_scenes, "seed": seed,
        "sample_steps": sample_steps, "mask_mode": mask_mode,
        "attention_path": attention_path, "judge": "oracle",
        "one_shot_reference": reference is not None,
        "concept_tokens": 0 if concept is None else int(concept.data.shape[0]),
    }
    return aggregate(cases, videos, verdicts, config)


def write_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "summary.json"
    store.write_json(summary_path, report.summary_dict())
    csv_path = out_dir / "cases.csv"
    buf = io.StringIO()
    if report.rows:
        writer = csv.DictWriter(buf, fieldnames=list(report.rows[0].keys()))
        writer.writeheader()
        writer.writerows(report.rows)
    store.atomic_write_bytes(csv_path, buf.getvalue().encode())
    return summary_path, csv_path
