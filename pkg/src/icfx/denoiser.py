"""Toy diffusion transformer with masked full attention and its decomposed twin.

N pre-norm blocks of spatial-temporal attention + MLP, conditioned on the
timestep through per-block modulation vectors (shift/scale/gate around each
branch). Attention runs either as one masked softmax over the whole sequence
or decomposed per query segment over only its allowed key segments; the two
paths are mathematically identical and the tests hold them to float64
round-off of each other.

Training phases touch disjoint parameter sets: phase 1 updates only the
attention projections, phase 2 only the concept tokens; everything else stays
at its seeded initialization, which therefore must be non-degenerate (gates
centered at 1, non-zero output head).
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import icmask, store
from .assembly import (PROMPT_LEN, SegmentKind, SegmentLayout, UnifiedSequence,
                       VOCAB_SIZE, assemble, embed_prompt, rope_pair_allocation,
                       rope_tables, standard_layout)
from .autodiff import Tensor
from .codec import latent_dim
from .icmask import FlowTable
from .rand import make_rng

CHECKPOINT_FORMAT = "icfx.checkpoint"
CHECKPOINT_VERSION = 1

ATTENTION_PATHS = ("full", "decomposed")


@dataclass(frozen=True)
class DenoiserConfig:
    model_dim: int = 64
    heads: int = 4
    blocks: int = 4
    mlp_ratio: int = 4
    latent_dim: int = latent_dim(3)
    prompt_len: int = PROMPT_LEN
    vocab_size: int = VOCAB_SIZE
    time_dim: int = 64
    rope_base: float = 10000.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        rope_pair_allocation(self.head_dim)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def init_params(cfg: DenoiserConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded initialization of every learnable tensor.

    Frozen-at-random modules still have to carry signal: residual gates are
    centered at 1 (via the modulate/gated_add convention) and the output head
    is small but non-zero, so the initial noise prediction is near zero while
    attention-only training can still reach unit-scale outputs.
    """
    d = cfg.model_dim
    layout: list[tuple[str, tuple[int, ...], float]] = [
        ("prompt.embed", (cfg.vocab_size, d), 1.0),
        ("prompt.pos", (cfg.prompt_len, d), 0.5),
        ("proj.target.w", (2 * cfg.latent_dim, d), 1.0 / math.sqrt(2 * cfg.latent_dim)),
        ("proj.target.b", (d,), 0.0),
        ("proj.ref.w", (cfg.latent_dim, d), 1.0 / math.sqrt(cfg.latent_dim)),
        ("proj.ref.b", (d,), 0.0),
        ("time.mlp1.w", (cfg.time_dim, d), 1.0 / math.sqrt(cfg.time_dim)),
        ("time.mlp1.b", (d,), 0.0),
        ("time.mlp2.w", (d, d), 1.0 / math.sqrt(d)),
        ("time.mlp2.b", (d,), 0.0),
    ]
    for i in range(cfg.blocks):
        layout += [
            (f"block{i}.attn.qkv.w", (d, 3 * d), 1.0 / math.sqrt(d)),
            (f"block{i}.attn.qkv.b", (3 * d,), 0.0),
            (f"block{i}.attn.out.w", (d, d), 1.0 / math.sqrt(d)),
            (f"block{i}.attn.out.b", (d,), 0.0),
            (f"block{i}.ada.w", (d, 6 * d), 0.5 / math.sqrt(d)),
            (f"block{i}.ada.b", (6 * d,), 0.0),
            (f"block{i}.mlp.fc1.w", (d, cfg.mlp_ratio * d), 1.0 / math.sqrt(d)),
            (f"block{i}.mlp.fc1.b", (cfg.mlp_ratio * d,), 0.0),
            (f"block{i}.mlp.fc2.w", (cfg.mlp_ratio * d, d), 1.0 / math.sqrt(cfg.mlp_ratio * d)),
            (f"block{i}.mlp.fc2.b", (d,), 0.0),
        ]
    layout += [
        ("head.w", (d, cfg.latent_dim), 0.15 / math.sqrt(d)),
        ("head.b", (cfg.latent_dim,), 0.0),
    ]
    params: dict[str, Tensor] = {}
    for name, shape, std in layout:
        rng = make_rng(seed, "denoiser-init", name)
        data = rng.standard_normal(shape) * std if std else np.zeros(shape)
        params[name] = Tensor(data.astype(dtype))
    return params


def attention_param_names(params: dict[str, Tensor]) -> list[str]:
    return sorted(name for name in params if ".attn." in name)


def set_trainable(params: dict[str, Tensor], names: list[str]) -> None:
    wanted = set(names)
    unknown = wanted - set(params)
    if unknown:
        raise KeyError(f"unknown parameter names: {sorted(unknown)}")
    for name, p in params.items():
        p.requires_grad = name in wanted


def param_checksums(params: dict[str, Tensor]) -> dict[str, str]:
    """Per-parameter sha256 of the raw buffer; used to verify freeze contracts."""
    return {
        name: hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
        for name, p in sorted(params.items())
    }


def sinusoidal_time(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(dtype)


class Denoiser:
    """Forward passes over an assembled unified sequence."""

    def __init__(self, cfg: DenoiserConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self._geom_cache: dict = {}

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # -- sequence preparation ------------------------------------------------

    def prepare_sequence(self, target_ids: np.ndarray, ref_ids: np.ndarray,
                         target_tokens_in: np.ndarray, ref_tokens_in: np.ndarray,
                         grid: tuple[int, int, int],
                         concept: Tensor | None = None) -> UnifiedSequence:
        """Embed prompts, project latent token streams, and concatenate.

        target_tokens_in: (B, Tv, 2*latent_dim), the noised target latent
        channel-concatenated with the first-frame conditioning latent.
        ref_tokens_in: (B, Tv, latent_dim), the clean reference latent.
        """
        dtype = self._p("prompt.embed").data.dtype
        g_t = embed_prompt(target_ids, self._p("prompt.embed"), self._p("prompt.pos"))
        g_r = embed_prompt(ref_ids, self._p("prompt.embed"), self._p("prompt.pos"))
        z_t = ad.add(ad.matmul(Tensor(target_tokens_in.astype(dtype)), self._p("proj.target.w")),
                     self._p("proj.target.b"))
        z_r = ad.add(ad.matmul(Tensor(ref_tokens_in.astype(dtype)), self._p("proj.ref.w")),
                     self._p("proj.ref.b"))
        return assemble(g_t, g_r, z_t, z_r, grid, z_concept=concept)

    # -- geometry caches -----------------------------------------------------

    def _geometry(self, seq: UnifiedSequence, table: FlowTable, dtype):
        key = (seq.grid, tuple(seq.layout.lengths()),
               tuple(sorted((q.value, tuple(sorted(k.value for k in keys)))
                            for q, keys in table.rules.items())),
               np.dtype(dtype).str)
        if key not in self._geom_cache:
            cos, sin = rope_tables(seq.positions, seq.rotate_mask, self.cfg.head_dim,
                                   base=self.cfg.rope_base, dtype=dtype)
            bool_mask = icmask.build_mask(seq.layout, table)
            add_mask = icmask.additive_mask(bool_mask, dtype=dtype)
            self._geom_cache[key] = (cos[None, None], sin[None, None], add_mask)
        return self._geom_cache[key]

    # -- forward -------------------------------------------------------------

    def time_features(self, t: np.ndarray) -> Tensor:
        dtype = self._p("time.mlp1.w").data.dtype
        base = Tensor(sinusoidal_time(t, self.cfg.time_dim, dtype))
        h = ad.silu(ad.add(ad.matmul(base, self._p("time.mlp1.w")), self._p("time.mlp1.b")))
        h = ad.add(ad.matmul(h, self._p("time.mlp2.w")), self._p("time.mlp2.b"))
        return ad.silu(h)

    def _attention(self, h: Tensor, seq: UnifiedSequence, table: FlowTable,
                   block: int, path: str, capture: list | None):
        cfg = self.cfg
        b, n, d = h.data.shape
        nh, dh = cfg.heads, cfg.head_dim
        dtype = h.data.dtype
        cos, sin, add_mask = self._geometry(seq, table, dtype)

        qkv = ad.add(ad.matmul(ad.reshape(h, (b * n, d)), self._p(f"block{block}.attn.qkv.w")),
                     self._p(f"block{block}.attn.qkv.b"))
        q_f, k_f, v_f = ad.split(qkv, [d, d, d], axis=1)

        def heads_of(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (b, n, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads_of(q_f), heads_of(k_f), heads_of(v_f)
        q = ad.rotate_pairs(q, cos, sin)
        k = ad.rotate_pairs(k, cos, sin)
        q = ad.scale(q, 1.0 / math.sqrt(dh))

        if path == "full":
            scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
            weights = ad.softmax_masked(scores, add_mask)
            if capture is not None:
                capture.append(weights)
            ctx = ad.matmul(weights, v)
        elif path == "decomposed":
            lengths = seq.layout.lengths()
            q_segs = ad.split(q, lengths, axis=2)
            k_segs = ad.split(k, lengths, axis=2)
            v_segs = ad.split(v, lengths, axis=2)
            ctx_parts = []
            for qi, q_seg in enumerate(q_segs):
                q_kind = seq.layout.segments[qi].kind
                idx = [ki for ki, s in enumerate(seq.layout.segments)
                       if table.allows(q_kind, s.kind)]
                if not idx:
                    raise icmask.FlowTableError(f"segment {q_kind} has no allowed keys")
                k_cat = k_segs[idx[0]] if len(idx) == 1 else ad.concat([k_segs[j] for j in idx], axis=2)
                v_cat = v_segs[idx[0]] if len(idx) == 1 else ad.concat([v_segs[j] for j in idx], axis=2)
                scores = ad.matmul(q_seg, ad.transpose(k_cat, (0, 1, 3, 2)))
                weights = ad.softmax_masked(scores, None)
                ctx_parts.append(ad.matmul(weights, v_cat))
            ctx = ad.concat(ctx_parts, axis=2)
        else:
            raise ValueError(f"unknown attention path {path!r}")

        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b * n, d))
        out = ad.add(ad.matmul(merged, self._p(f"block{block}.attn.out.w")),
                     self._p(f"block{block}.attn.out.b"))
        return ad.reshape(out, (b, n, d))

    def forward_tokens(self, seq: UnifiedSequence, t: np.ndarray, table: FlowTable,
                       path: str = "decomposed", capture: list | None = None) -> Tensor:
        """Run all blocks and project every token to latent channels: (B, N, latent)."""
        if path not in ATTENTION_PATHS:
            raise ValueError(f"unknown attention path {path!r}")
        cfg = self.cfg
        x = seq.tokens
        b, n, d = x.data.shape
        temb = self.time_features(t)
        if temb.data.shape[0] != b:
            raise ad.ShapeError(f"timesteps {temb.data.shape[0]} != batch {b}")
        for i in range(cfg.blocks):
            mods = ad.add(ad.matmul(temb, self._p(f"block{i}.ada.w")), self._p(f"block{i}.ada.b"))
            sa_shift, sa_scale, sa_gate, ff_shift, ff_scale, ff_gate = ad.split(mods, [d] * 6, axis=1)
            h = ad.modulate(ad.layernorm(x, cfg.ln_eps), sa_scale, sa_shift)
            attn = self._attention(h, seq, table, i, path, capture)
            x = ad.gated_add(x, attn, sa_gate)
            h2 = ad.modulate(ad.layernorm(x, cfg.ln_eps), ff_scale, ff_shift)
            h2 = ad.add(ad.matmul(ad.reshape(h2, (b * n, d)), self._p(f"block{i}.mlp.fc1.w")),
                        self._p(f"block{i}.mlp.fc1.b"))
            h2 = ad.gelu(h2)
            h2 = ad.add(ad.matmul(h2, self._p(f"block{i}.mlp.fc2.w")), self._p(f"block{i}.mlp.fc2.b"))
            x = ad.gated_add(x, ad.reshape(h2, (b, n, d)), ff_gate)
        out = ad.add(ad.matmul(ad.reshape(x, (b * n, d)), self._p("head.w")), self._p("head.b"))
        return ad.reshape(out, (b, n, cfg.latent_dim))

    def denoise(self, seq: UnifiedSequence, t: np.ndarray, table: FlowTable,
                path: str = "decomposed") -> Tensor:
        """Predicted noise on the target video tokens, shaped (B, F', H', W', d).

        Outputs for the other segments are computed internally (they feed the
        residual stream) but only the target grid is returned.
        """
        out = self.forward_tokens(seq, t, table, path)
        parts = ad.split(out, seq.layout.lengths(), axis=1)
        target_idx = [i for i, s in enumerate(seq.layout.segments)
                      if s.kind is SegmentKind.TARGET_VIDEO][0]
        target = parts[target_idx]
        b = out.data.shape[0]
        return ad.reshape(target, (b,) + seq.grid + (self.cfg.latent_dim,))


# ---------------------------------------------------------------------------
# analytic cost model and benchmark

def attention_score_macs(layout: SegmentLayout, table: FlowTable, head_dim: int,
                         heads: int, path: str) -> int:
    """Multiply-accumulates spent on QK^T score entries for one forward pass."""
    if path == "full":
        entries = layout.total ** 2
    elif path == "decomposed":
        entries = icmask.allowed_entry_count(layout, table)
    else:
        raise ValueError(f"unknown attention path {path!r}")
    return entries * head_dim * heads


def bench_attention(lengths: dict[str, int], repeats: int = 9, heads: int = 4,
                    head_dim: int = 16, seed: int = 0, dtype=np.float32) -> dict:
    """Median wall time and analytic score-MACs for both attention paths.

    lengths maps segment names (prompt, video, concept) to token counts; the
    attention core (scores -> softmax -> context) is timed in isolation.
    """
    prompt = lengths.get("prompt", PROMPT_LEN)
    video = lengths["video"]
    concept = lengths.get("concept", 0)
    layout = standard_layout(prompt, video, concept)
    table = FlowTable.canonical() if lengths.get("mask", "canonical") == "canonical" \
        else FlowTable.all_allowed()
    n = layout.total
    rng = make_rng(seed, "bench-attention")
    q = Tensor((rng.standard_normal((1, heads, n, head_dim)) / math.sqrt(head_dim)).astype(dtype))
    k = Tensor(rng.standard_normal((1, heads, n, head_dim)).astype(dtype))
    v = Tensor(rng.standard_normal((1, heads, n, head_dim)).astype(dtype))
    bool_mask = icmask.build_mask(layout, table)
    add_mask = icmask.additive_mask(bool_mask, dtype=dtype)

    def run_full():
        s = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        w = ad.softmax_masked(s, add_mask)
        return ad.matmul(w, v)

    def run_decomposed():
        lengths_ = layout.lengths()
        q_segs = ad.split(q, lengths_, axis=2)
        k_segs = ad.split(k, lengths_, axis=2)
        v_segs = ad.split(v, lengths_, axis=2)
        outs = []
        for qi, q_seg in enumerate(q_segs):
            kind = layout.segments[qi].kind
            idx = [ki for ki, s in enumerate(layout.segments) if table.allows(kind, s.kind)]
            k_cat = k_segs[idx[0]] if len(idx) == 1 else ad.concat([k_segs[j] for j in idx], axis=2)
            v_cat = v_segs[idx[0]] if len(idx) == 1 else ad.concat([v_segs[j] for j in idx], axis=2)
            s = ad.matmul(q_seg, ad.transpose(k_cat, (0, 1, 3, 2)))
            outs.append(ad.matmul(ad.softmax_masked(s, None), v_cat))
        return ad.concat(outs, axis=2)

    # check agreement, and warm numba JITs before timing
    full_out = run_full()
    dec_out = run_decomposed()
    max_diff = float(np.abs(full_out.data - dec_out.data).max())

    def median_time(fn) -> float:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    macs_full = attention_score_macs(layout, table, head_dim, heads, "full")
    macs_dec = attention_score_macs(layout, table, head_dim, heads, "decomposed")
    return {
        "lengths": {"prompt": prompt, "video": video, "concept": concept},
        "total_tokens": n,
        "heads": heads,
        "head_dim": head_dim,
        "dtype": np.dtype(dtype).str,
        "repeats": repeats,
        "macs_full": macs_full,
        "macs_decomposed": macs_dec,
        "mac_ratio": macs_dec / macs_full,
        "allowed_entries": icmask.allowed_entry_count(layout, table),
        "total_entries": n * n,
        "wall_full_s": median_time(run_full),
        "wall_decomposed_s": median_time(run_decomposed),
        "path_max_abs_diff": max_diff,
    }


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, cfg: DenoiserConfig, params: dict[str, Tensor],
                    extra: dict | None = None) -> None:
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "extra": extra or {},
    }
    store.save_bundle(path, manifest, {name: p.data for name, p in params.items()})


def load_checkpoint(path: str | Path) -> tuple[DenoiserConfig, dict[str, Tensor], dict]:
    manifest, arrays = store.load_bundle(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise store.BundleError(f"{path} is not a checkpoint bundle")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise store.BundleError(f"unsupported checkpoint version {manifest.get('version')}")
    cfg = DenoiserConfig(**manifest["config"])
    params = {name: Tensor(arr) for name, arr in arrays.items()}
    return cfg, params, manifest.get("extra", {})
