"""DDPM schedule, target-only diffusion loss, phase-1 training, and sampling.

The loss compares predicted noise against the drawn Gaussian only on target
video tokens; reference latent tokens stay clean at both training and
inference. Phase-1 training updates exactly the attention projections and
leaves every other parameter at its seeded init, verified by checksums.

Sampling is ancestral DDPM on a strided timestep subset (50 steps by default):
z0_hat is formed from the predicted noise, then z_{t_prev} is drawn from the
posterior with the standard variance (1-ab_prev)/(1-ab_t) * (1-ab_t/ab_prev).
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import codec, store
from .autodiff import Adam, Tape, Tensor
from .codec import LatentVideo, PixelVideo
from .denoiser import (Denoiser, DenoiserConfig, attention_param_names,
                       init_params, load_checkpoint, param_checksums,
                       save_checkpoint, set_trainable)
from .icmask import FlowTable
from .rand import make_rng
from .synthvfx import Dataset, load_dataset


class ScheduleError(ValueError):
    """Timestep outside [1, T) or malformed schedule."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or violated freeze contract)."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule; index t runs over [0, T) with alpha_bar[0] = 1."""

    betas: np.ndarray       # (T,), betas[0] unused and set to 0
    alpha_bar: np.ndarray   # (T,)

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 2e-2) -> "NoiseSchedule":
        betas = np.zeros(steps, dtype=np.float64)
        betas[1:] = np.linspace(beta_start, beta_end, steps - 1)
        alpha_bar = np.cumprod(1.0 - betas)
        sched = cls(betas, alpha_bar)
        if not (np.diff(alpha_bar[1:]) < 0).all() or alpha_bar[0] != 1.0:
            raise ScheduleError("alpha_bar must start at 1 and strictly decrease")
        return sched

    @property
    def steps(self) -> int:
        return self.betas.shape[0]

    def check_t(self, t: np.ndarray | int) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if (t < 1).any() or (t >= self.steps).any():
            raise ScheduleError(f"timestep out of [1, {self.steps}): {t}")
        return t


def add_noise(z0: np.ndarray, t: np.ndarray | int, eps: np.ndarray,
              schedule: NoiseSchedule) -> np.ndarray:
    """q(z_t | z_0): sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, per-sample t."""
    t = schedule.check_t(t)
    if eps.shape != z0.shape:
        raise ScheduleError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    ab = schedule.alpha_bar[t].astype(z0.dtype)
    expand = (slice(None),) + (None,) * (z0.ndim - 1)
    return np.sqrt(ab)[expand] * z0 + np.sqrt(1.0 - ab)[expand] * eps


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    data_path: str = "data"
    out_dir: str = "runs/train"
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    mask_mode: str = "canonical"          # canonical | none
    attention_path: str = "decomposed"    # decomposed | full
    log_every: int = 50
    schedule_steps: int = 1000

    def __post_init__(self):
        if self.steps < 0 or self.batch <= 0 or self.lr <= 0:
            raise ValueError("steps must be >= 0, batch and lr positive")
        FlowTable.for_mode(self.mask_mode)


@dataclass
class PreparedData:
    """Latent-space views of a dataset, encoded once up front."""

    grid: tuple[int, int, int]
    latent_dim: int
    tgt_z0: np.ndarray      # (P, Tv, d) clean target latents
    tgt_zi: np.ndarray      # (P, Tv, d) first-frame conditioning latents
    ref_z: np.ndarray       # (P, Tv, d) clean reference latents
    tgt_ids: np.ndarray     # (P, L)
    ref_ids: np.ndarray     # (P, L)


def prepare_training_data(data: Dataset) -> PreparedData:
    pairs = data.pair_count
    first = codec.encode(PixelVideo(data.videos[0]))
    grid = first.grid
    d = first.channels
    tv = int(np.prod(grid))
    out = PreparedData(
        grid=grid, latent_dim=d,
        tgt_z0=np.empty((pairs, tv, d), dtype=np.float32),
        tgt_zi=np.empty((pairs, tv, d), dtype=np.float32),
        ref_z=np.empty((pairs, tv, d), dtype=np.float32),
        tgt_ids=np.empty((pairs, len(data.records[0]["prompt"])), dtype=np.int64),
        ref_ids=np.empty((pairs, len(data.records[0]["prompt"])), dtype=np.int64),
    )
    for i in range(pairs):
        ref, tgt = data.pair(i)
        out.tgt_z0[i] = codec.encode(tgt.video).tokens()
        out.tgt_zi[i] = codec.first_frame_condition(tgt.video.data[0], data.frames).tokens()
        out.ref_z[i] = codec.encode(ref.video).tokens()
        out.tgt_ids[i] = tgt.prompt.array()
        out.ref_ids[i] = ref.prompt.array()
    return out


def training_loss(den: Denoiser, schedule: NoiseSchedule, prep: PreparedData,
                  idx: np.ndarray, t: np.ndarray, eps: np.ndarray,
                  table: FlowTable, path: str) -> Tensor:
    """Scalar mse between drawn and predicted noise, target video tokens only."""
    z_t = add_noise(prep.tgt_z0[idx], t, eps, schedule)
    tgt_in = np.concatenate([z_t, prep.tgt_zi[idx]], axis=-1)
    seq = den.prepare_sequence(prep.tgt_ids[idx], prep.ref_ids[idx],
                               tgt_in, prep.ref_z[idx], prep.grid)
    pred = den.denoise(seq, t, table, path)
    b = eps.shape[0]
    target = Tensor(eps.reshape((b,) + prep.grid + (prep.latent_dim,)))
    return ad.mse(pred, target)


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_log_path: Path
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train(cfg: TrainConfig, data: Dataset | None = None) -> TrainResult:
    """Phase-1 training: attention parameters only, deterministic in (config, seed)."""
    t0 = time.perf_counter()
    if data is None:
        data = load_dataset(cfg.data_path)
    prep = prepare_training_data(data)
    schedule = NoiseSchedule.linear(cfg.schedule_steps)

    dcfg = DenoiserConfig()
    params = init_params(dcfg, seed=cfg.seed)
    trainable = attention_param_names(params)
    set_trainable(params, trainable)
    frozen_before = {k: v for k, v in param_checksums(params).items() if k not in trainable}

    den = Denoiser(dcfg, params)
    opt = Adam(params, lr=cfg.lr, betas=cfg.adam_betas)
    table = FlowTable.for_mode(cfg.mask_mode)
    rng = make_rng(cfg.seed, "train-loop")
    pairs = prep.tgt_z0.shape[0]
    tv, d = prep.tgt_z0.shape[1:]

    losses: list[float] = []
    for step in range(cfg.steps):
        idx = rng.integers(0, pairs, size=cfg.batch)
        t = rng.integers(1, schedule.steps, size=cfg.batch)
        eps = rng.standard_normal((cfg.batch, tv, d)).astype(np.float32)
        with Tape() as tape:
            loss = training_loss(den, schedule, prep, idx, t, eps, table, cfg.attention_path)
            tape.backward(loss)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}")
        opt.step()
        opt.zero_grad()
        losses.append(value)

    frozen_after = {k: v for k, v in param_checksums(params).items() if k not in trainable}
    if frozen_after != frozen_before:
        drift = [k for k in frozen_before if frozen_before[k] != frozen_after.get(k)]
        raise TrainingError(f"frozen parameters drifted during phase-1 training: {drift}")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.icfx"
    extra = {
        "phase": 1,
        "train_config": asdict(cfg),
        "dataset_seed": data.manifest.get("seed"),
        "final_loss": losses[-1] if losses else None,
        "trainable": trainable,
    }
    save_checkpoint(ckpt_path, dcfg, params, extra=extra)

    log_path = out_dir / "loss.csv"
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "loss"])
    for i, v in enumerate(losses):
        writer.writerow([i, f"{v:.6f}"])
    store.atomic_write_bytes(log_path, buf.getvalue().encode())

    return TrainResult(ckpt_path, log_path, losses, time.perf_counter() - t0)


def smoothed(losses: list[float], window: int = 100) -> tuple[float, float]:
    """Mean loss over the first and last `window` steps."""
    if not losses:
        raise ValueError("empty loss curve")
    w = min(window, len(losses))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


# ---------------------------------------------------------------------------
# sampling

def strided_timesteps(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Descending subset of [1, T) visited by the sampler."""
    if steps < 1:
        raise ScheduleError("need at least one sampling step")
    ts = np.unique(np.round(np.linspace(1, schedule.steps - 1, steps)).astype(np.int64))
    return ts[::-1]


def sample(den: Denoiser, schedule: NoiseSchedule,
           ref_ids: np.ndarray, ref_latent: np.ndarray,
           tgt_ids: np.ndarray, first_frames: np.ndarray,
           grid: tuple[int, int, int], steps: int = 50, seed: int = 0,
           mask_mode: str = "canonical", path: str = "decomposed",
           concept: Tensor | None = None) -> np.ndarray:
    """Ancestral sampling conditioned on a clean reference pair and a first frame.

    ref_ids/tgt_ids: (B, L) prompt ids; ref_latent: (B, Tv, d) clean reference
    latent tokens; first_frames: (B, H, W, C). Returns decoded pixel videos
    (B, F, H, W, C), deterministic in (inputs, seed).
    """
    table = FlowTable.for_mode(mask_mode)
    b = ref_ids.shape[0]
    frames = grid[0] * codec.PATCH[0]
    tv = int(np.prod(grid))
    d = den.cfg.latent_dim
    zi = np.stack([
        codec.first_frame_condition(first_frames[i], frames).tokens().astype(np.float32)
        for i in range(b)
    ])
    rng = make_rng(seed, "sampler")
    z = rng.standard_normal((b, tv, d)).astype(np.float32)
    ts = strided_timesteps(schedule, steps)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        tgt_in = np.concatenate([z, zi], axis=-1)
        seq = den.prepare_sequence(tgt_ids, ref_ids, tgt_in, ref_latent, grid, concept=concept)
        eps_hat = den.denoise(seq, np.full(b, t, dtype=np.int64), table, path)
        eps_hat = eps_hat.data.reshape(b, tv, d)
        ab_t = schedule.alpha_bar[t]
        z0_hat = (z - np.sqrt(1.0 - ab_t, dtype=np.float32) * eps_hat) / np.sqrt(ab_t, dtype=np.float32)
        if t_prev == 0:
            z = z0_hat
        else:
            ab_p = schedule.alpha_bar[t_prev]
            var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
            direction = np.sqrt(max(1.0 - ab_p - var, 0.0), dtype=np.float64)
            noise = rng.standard_normal(z.shape).astype(np.float32)
            z = (np.sqrt(ab_p) * z0_hat + direction * eps_hat + np.sqrt(var) * noise).astype(np.float32)
    videos = np.empty((b, frames) + first_frames.shape[1:3] + (first_frames.shape[3],),
                      dtype=np.float32)
    for i in range(b):
        videos[i] = codec.decode(LatentVideo(z[i].reshape(grid + (d,)))).data
    return videos
