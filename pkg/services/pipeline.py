"""
End-to-end inference: per-window sampling, overlapping-window streaming
with output-side history discard, head-anchored global placement,
latency benchmarking and the stage/fusion ablation runner.
"""

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from services.checkpoint import load_checkpoint
from services.config import FUSION_MODES, InferenceConfig, MageConfig, ModelConfig
from services.dataio import (
    COND_DIM,
    MotionClip,
    NormStats,
    SparseCondition,
    apply_norm,
    extract_condition,
    invert_norm,
    window_starts,
)
from services.diffusion import DdimPlan, NoiseSchedule, ddim_sample, ddpm_sample, make_plan, make_schedule
from services.errors import ConfigMismatch, InvalidArgument, LengthMismatch
from services.metrics import evaluate_clips
from services.model import X_DIM, MageModel
from services.rotmath import sixd_decode, sixd_encode
from services.skeleton import JOINT_COUNT, ScaleSpec, SkeletonDef, anchor_root
from services.training import train_from_clips

logger = logging.getLogger(__name__)

ABLATION_STAGE_SETS = (("S3",), ("S1", "S3"), ("S2", "S3"), ("S1", "S2", "S3"))

Denoiser = Union[MageModel, Callable]


@dataclass
class Engine:
    """A trained model together with the statistics and schedule it was trained with."""

    model: MageModel
    stats: NormStats
    sched: NoiseSchedule

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], expected: Optional[ModelConfig] = None) -> "Engine":
        ckpt = load_checkpoint(path, expected)
        return cls(model=ckpt.build_model(), stats=ckpt.stats, sched=ckpt.sched)

    @property
    def window(self) -> int:
        return self.model.config.window


@dataclass
class BenchReport:
    ms_per_frame: float
    frames_per_second: float
    ms_per_window: float
    iterations: int
    window: int
    plan_length: int
    latent_dim: int
    sampler: str


def valid_6d(flat: np.ndarray) -> np.ndarray:
    """Re-orthonormalize (N, 132) 6D predictions so every frame decodes to proper rotations."""
    n = flat.shape[0]
    return sixd_encode(sixd_decode(flat.reshape(n, JOINT_COUNT, 6))).reshape(n, X_DIM)


def generate_window(
    cond_window: np.ndarray,
    model: Denoiser,
    sched: NoiseSchedule,
    plan: DdimPlan,
    seed: int,
    stats: NormStats,
    sampler: str = "ddim",
) -> np.ndarray:
    """
    Sample one window of full-body motion.

    Args:
        cond_window: (N, 54) raw observation features
        model: trained model, or any (x_t, t, cond) -> x0_hat callable
        sched: noise schedule the model was trained with
        plan: DDIM sub-steps (ignored for sampler="ddpm")
        seed: seeds the Gaussian start (and any stochastic steps)
        stats: normalization statistics of the checkpoint
        sampler: "ddim" or "ddpm"

    Returns:
        (N, 132) denormalized local 6D rotations, re-orthonormalized

    Raises:
        ConfigMismatch: window length or feature width disagrees with the model / statistics
    """
    cond_window = np.asarray(cond_window, dtype=np.float64)
    n = cond_window.shape[0]
    if isinstance(model, MageModel):
        if n != model.config.window:
            raise ConfigMismatch(f"condition window has {n} frames, model expects {model.config.window}")
        denoise = model.denoise_fn()
    else:
        denoise = model
    if cond_window.shape[-1] != COND_DIM or stats.cond_mean.shape != (COND_DIM,):
        raise ConfigMismatch(f"condition width {cond_window.shape[-1]} does not match the statistics")
    if stats.target_mean["S3"].shape != (X_DIM,):
        raise ConfigMismatch("checkpoint statistics lack the 132-wide S3 target")

    cond = apply_norm(cond_window, stats.cond_mean, stats.cond_std)[None]
    rng = np.random.default_rng(seed)
    init = rng.standard_normal((1, n, X_DIM))
    if sampler == "ddpm":
        x0 = ddpm_sample(denoise, cond, sched, init, rng=rng)
    elif sampler == "ddim":
        x0 = ddim_sample(denoise, cond, plan, sched, init, rng=rng)
    else:
        raise InvalidArgument(f"unknown sampler '{sampler}'")
    return valid_6d(invert_norm(x0[0], stats.target_mean["S3"], stats.target_std["S3"]))


def stitch_plan(length: int, window: int = 120, history: int = 12) -> List[Tuple[int, int]]:
    """
    (start, keep_from) per window: output frames start + keep_from .. start + window - 1
    come from that window. keep_from is 0 for the first window and the overlap with
    the previous window otherwise.
    """
    plan = []
    prev_end = 0
    for s in window_starts(length, window, history):
        plan.append((s, max(0, prev_end - s)))
        prev_end = s + window
    return plan


def _crossfade(prev: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Linear blend over the overlap in 6D, weight moving from the old window to the new one."""
    k = prev.shape[0]
    w = (np.arange(1, k + 1) / (k + 1))[:, None]
    return valid_6d((1.0 - w) * prev + w * new)


def stream_generate(
    condition: SparseCondition,
    engine: Engine,
    cfg: InferenceConfig,
    fps: float = 60.0,
    plan: Optional[DdimPlan] = None,
    progress: bool = False,
) -> MotionClip:
    """
    Generate a whole sequence window by window.

    Windows advance by window - history; each window after the first drops the
    frames the previous window already produced (or blends them when
    cfg.crossfade is set). Window i is sampled with seed cfg.seed + i. The
    root translation of the result is zero; see place_global.

    Raises:
        ClipTooShort: condition shorter than one window
    """
    if cfg.window != engine.window:
        raise ConfigMismatch(f"inference window {cfg.window} differs from model window {engine.window}")
    plan = plan or make_plan(engine.sched.T, cfg.ddim_steps, cfg.eta)
    flat = condition.flat()
    n = len(condition)
    out = np.zeros((n, X_DIM))
    segments = stitch_plan(n, cfg.window, cfg.history)
    for i, (start, keep_from) in enumerate(tqdm(segments, desc="windows", disable=not progress)):
        pred = generate_window(
            flat[start : start + cfg.window],
            engine.model,
            engine.sched,
            plan,
            cfg.seed + i,
            engine.stats,
            sampler=cfg.sampler,
        )
        if cfg.crossfade and keep_from > 0:
            out[start : start + keep_from] = _crossfade(out[start : start + keep_from], pred[:keep_from])
        out[start + keep_from : start + cfg.window] = pred[keep_from:]
    logger.debug("stitched %d windows into %d frames", len(segments), n)
    return MotionClip(out.reshape(n, JOINT_COUNT, 6), np.zeros((n, 3)), fps)


def place_global(local_pred: MotionClip, observed_head_pos: np.ndarray, skel: SkeletonDef) -> MotionClip:
    """
    Set the root translation so forward kinematics puts the head at the observed position.

    Raises:
        LengthMismatch: head path and clip differ in length
    """
    observed_head_pos = np.asarray(observed_head_pos, dtype=np.float64)
    if observed_head_pos.shape != (len(local_pred), 3):
        raise LengthMismatch(
            f"head path has shape {observed_head_pos.shape}, clip has {len(local_pred)} frames"
        )
    root = anchor_root(local_pred.local_rot, observed_head_pos, skel)
    return MotionClip(local_pred.local_rot.copy(), root, local_pred.fps, dict(local_pred.meta))


def sample_clip(
    condition: SparseCondition,
    engine: Engine,
    cfg: InferenceConfig,
    skel: SkeletonDef,
    fps: float = 60.0,
) -> MotionClip:
    """stream_generate followed by head-anchored placement."""
    local = stream_generate(condition, engine, cfg, fps=fps)
    return place_global(local, condition.head_pos, skel)


def sample_references(
    clips: Sequence[MotionClip],
    engine: Engine,
    cfg: InferenceConfig,
    skel: SkeletonDef,
    progress: bool = False,
) -> List[MotionClip]:
    """Generate one prediction per reference clip from its own head and wrist observations."""
    preds = []
    for clip in tqdm(clips, desc="sample", disable=not progress):
        pred = sample_clip(extract_condition(clip, skel), engine, cfg, skel, fps=clip.fps)
        pred.meta = dict(clip.meta)
        preds.append(pred)
    return preds


def bench(
    model: MageModel,
    cfg: InferenceConfig,
    iterations: int,
    warmup: int = 1,
    sched: Optional[NoiseSchedule] = None,
) -> BenchReport:
    """
    Time single-window sampling and amortize it per generated frame.

    Raises:
        InvalidArgument: iterations < 1
    """
    if iterations < 1:
        raise InvalidArgument(f"iterations must be at least 1, got {iterations}")
    sched = sched or make_schedule(model.config.T, model.config.schedule)
    plan = make_plan(sched.T, cfg.ddim_steps, cfg.eta)
    n = model.config.window
    rng = np.random.default_rng(cfg.seed)
    cond = rng.standard_normal((1, n, COND_DIM))
    denoise = model.denoise_fn()

    def once():
        init = rng.standard_normal((1, n, X_DIM))
        if cfg.sampler == "ddpm":
            ddpm_sample(denoise, cond, sched, init, rng=rng)
        else:
            ddim_sample(denoise, cond, plan, sched, init, rng=rng)

    for _ in range(warmup):
        once()
    start = time.perf_counter()
    for _ in range(iterations):
        once()
    per_window = (time.perf_counter() - start) / iterations
    report = BenchReport(
        ms_per_frame=per_window * 1000.0 / n,
        frames_per_second=n / per_window,
        ms_per_window=per_window * 1000.0,
        iterations=iterations,
        window=n,
        plan_length=len(plan.sub_steps) if cfg.sampler == "ddim" else sched.T,
        latent_dim=model.config.latent_dim,
        sampler=cfg.sampler,
    )
    logger.info("%.3f ms/frame (%.0f frames/s)", report.ms_per_frame, report.frames_per_second)
    return report


def ablation_variants(cfg: MageConfig) -> List[Tuple[str, MageConfig]]:
    """Every stage set with the configured fusion, then every fusion mode with all three stages."""
    variants = []
    for stages in ABLATION_STAGE_SETS:
        model = cfg.model.model_copy(update={"stages": list(stages)})
        variants.append(("stages=" + "+".join(stages), cfg.model_copy(update={"model": model})))
    for mode in FUSION_MODES:
        model = cfg.model.model_copy(update={"stages": ["S1", "S2", "S3"], "fusion": mode})
        variants.append((f"fusion={mode}", cfg.model_copy(update={"model": model})))
    return variants


def run_ablation(
    cfg: MageConfig,
    train_clips: Sequence[MotionClip],
    test_clips: Sequence[MotionClip],
    skel: SkeletonDef,
    scales: Dict[str, ScaleSpec],
    steps: int = 200,
    progress: bool = False,
) -> List[Dict]:
    """
    Train and evaluate each ablation variant for `steps` steps.

    Returns:
        one record per variant: its name, stages, fusion, final smoothed loss
        and the aggregate metrics on the held-out clips
    """
    records = []
    for name, variant in ablation_variants(cfg):
        logger.info("ablation variant %s", name)
        result = train_from_clips(train_clips, variant, skel, scales, steps=steps, progress=progress)
        engine = Engine(result.model, result.stats, result.sched)
        preds = sample_references(test_clips, engine, variant.inference, skel)
        agg = evaluate_clips(preds, test_clips, skel).aggregate
        records.append(
            {
                "variant": name,
                "stages": variant.model.stages,
                "fusion": variant.model.fusion,
                "final_loss": result.history[-1]["smoothed"],
                "mpjre": agg.mpjre,
                "mpjpe": agg.mpjpe,
                "mpjve": agg.mpjve,
                "jitter": agg.jitter,
            }
        )
    return records


def write_positions_csv(path: Union[str, Path], clip: MotionClip, skel: SkeletonDef) -> None:
    """Per-frame global joint positions: frame, joint, name, x, y, z."""
    pos = clip.global_positions(skel)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "joint", "name", "x", "y", "z"])
        for i in range(len(clip)):
            for j, name in enumerate(skel.names):
                writer.writerow([i, j, name, *(f"{v:.6f}" for v in pos[i, j])])
