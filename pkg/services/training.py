"""
Stage losses, the weighted objective and the x0-prediction training loop.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from tqdm import tqdm

from services import nncore as nn
from services.config import STAGE_ORDER, MageConfig, TrainConfig
from services.dataio import MotionClip, NormStats, TrainingArrays, build_training_arrays, fit_normstats
from services.diffusion import NoiseSchedule, make_schedule, q_sample
from services.errors import InvalidArgument, NonFiniteLoss, NonFiniteValue, ShapeMismatch
from services.model import MageModel
from services.nncore import Tensor
from services.skeleton import ScaleSpec, SkeletonDef

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    cond: np.ndarray  # (B, N, 54) normalized
    targets: Dict[str, np.ndarray]  # sid -> (B, N, dim) normalized
    t: np.ndarray  # (B,) 1-based steps
    noise: np.ndarray  # (B, N, 132)


@dataclass
class TrainState:
    step: int = 0
    l1: float = 0.0
    l2: float = 0.0
    l3: float = 0.0
    l_obj: float = 0.0
    smoothed: Optional[float] = None
    initial: Optional[float] = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def stage_losses(
    S_hats: Dict[str, Tensor],
    targets: Dict[str, np.ndarray],
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Per-stage mean squared error (L1, L2, L3); stages without a prediction contribute 0.

    Raises:
        ShapeMismatch: a prediction and its target differ in shape
    """
    out = []
    for sid in STAGE_ORDER:
        if sid not in S_hats:
            out.append(Tensor(0.0))
            continue
        pred, target = S_hats[sid], np.asarray(targets[sid])
        if pred.shape != target.shape:
            raise ShapeMismatch(f"{sid}: prediction {pred.shape} vs target {target.shape}")
        out.append(nn.mse(pred, Tensor(target.astype(pred.data.dtype))))
    return out[0], out[1], out[2]


def objective(L1, L2, L3, weights: Sequence[float]):
    """alpha * L1 + beta * L2 + gamma * L3."""
    a, b, c = weights
    return a * L1 + b * L2 + c * L3


def sample_batch(
    arrays: TrainingArrays,
    stages: Sequence[str],
    batch_size: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> Batch:
    """Draw windows, steps (uniform in 1..T per item) and noise from one generator, in a fixed order."""
    idx = rng.integers(0, len(arrays), size=batch_size)
    t = rng.integers(1, sched.T + 1, size=batch_size)
    noise = rng.standard_normal(arrays.targets["S3"][idx].shape)
    return Batch(
        cond=arrays.cond[idx],
        targets={sid: arrays.targets[sid][idx] for sid in stages},
        t=t,
        noise=noise,
    )


def train_step(
    batch: Batch,
    state: TrainState,
    model: MageModel,
    sched: NoiseSchedule,
    cfg: TrainConfig,
) -> Dict[str, float]:
    """
    Noise the S3 target, predict every stage, back-propagate the weighted
    objective and take one optimizer step.

    Raises:
        NonFiniteLoss: the forward pass or the objective is NaN/Inf
    """
    x_t = q_sample(batch.targets["S3"], batch.t, batch.noise, sched)
    try:
        preds = model.forward(x_t, batch.t, batch.cond)
        L1, L2, L3 = stage_losses(preds, batch.targets)
        L_obj = objective(L1, L2, L3, cfg.loss_weights)
    except NonFiniteValue as e:
        raise NonFiniteLoss(
            f"non-finite values at step {state.step}: {e}",
            {"step": state.step, "t": batch.t.tolist()},
        ) from e
    losses = [float(L.data) for L in (L1, L2, L3, L_obj)]
    if not np.all(np.isfinite(losses)):
        raise NonFiniteLoss(
            f"non-finite loss at step {state.step}",
            {"step": state.step, "l1": losses[0], "l2": losses[1], "l3": losses[2], "t": batch.t.tolist()},
        )

    nn.backward(L_obj, model.store)
    grad_norm = model.store.clip_grad_norm(cfg.grad_clip) if cfg.grad_clip > 0 else model.store.grad_norm()
    nn.optimizer_step(model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    state.l1, state.l2, state.l3, state.l_obj = losses
    if state.initial is None:
        state.initial = losses[3]
    if state.smoothed is None:
        state.smoothed = losses[3]
    else:
        state.smoothed = cfg.smoothing * state.smoothed + (1 - cfg.smoothing) * losses[3]
    record = {
        "step": state.step,
        "l1": losses[0],
        "l2": losses[1],
        "l3": losses[2],
        "l_obj": losses[3],
        "smoothed": state.smoothed,
        "lr": cfg.lr,
        "grad_norm": grad_norm,
    }
    state.step += 1
    return record


class Trainer:
    """
    Owns the model parameters, optimizer state and RNG for one training run.

    Args:
        model: denoiser to train in place
        sched: noise schedule
        arrays: normalized training windows and stage targets
        cfg: training hyper-parameters
    """

    def __init__(self, model: MageModel, sched: NoiseSchedule, arrays: TrainingArrays, cfg: TrainConfig):
        self.model = model
        self.sched = sched
        self.arrays = arrays
        self.cfg = cfg
        self.state = TrainState(rng=np.random.default_rng(cfg.seed))
        missing = [s for s in model.stages if s not in arrays.targets]
        if missing:
            raise ShapeMismatch(f"training arrays lack targets for stages {missing}")

    def step(self) -> Dict[str, float]:
        batch = sample_batch(self.arrays, self.model.stages, self.cfg.batch_size, self.sched, self.state.rng)
        return train_step(batch, self.state, self.model, self.sched, self.cfg)

    def fit(
        self,
        steps: Optional[int] = None,
        log_path: Optional[Union[str, Path]] = None,
        progress: bool = True,
        eval_fn: Optional[Callable[[MageModel], Dict[str, float]]] = None,
    ) -> List[Dict[str, float]]:
        """
        Run `steps` optimizer steps (default cfg.steps).

        Every log_every steps (and the first and last) a record is appended to
        the returned history and, with log_path, written as one JSON line.
        With eval_fn and cfg.eval_every > 0, eval_fn(model) runs every
        eval_every steps and its values are merged into that step's record.
        """
        steps = self.cfg.steps if steps is None else steps
        if steps < 0:
            raise InvalidArgument(f"step count must be non-negative, got {steps}")
        history = []
        start = time.perf_counter()
        log = open(log_path, "ab") if log_path else None
        try:
            bar = tqdm(range(steps), desc="train", disable=not progress)
            for i in bar:
                record = self.step()
                record["wall_time"] = time.perf_counter() - start
                evaluate = eval_fn is not None and self.cfg.eval_every and record["step"] % self.cfg.eval_every == 0
                if evaluate:
                    record.update({f"eval_{k}": v for k, v in eval_fn(self.model).items()})
                if evaluate or i == 0 or i == steps - 1 or record["step"] % self.cfg.log_every == 0:
                    history.append(record)
                    if log:
                        log.write(orjson.dumps(record) + b"\n")
                    bar.set_postfix(loss=f"{record['smoothed']:.4f}")
        finally:
            if log:
                log.close()
        logger.info(
            "trained %d steps: L_obj %.4f -> %.4f (smoothed)",
            steps,
            self.state.initial or 0.0,
            self.state.smoothed or 0.0,
        )
        return history


@dataclass
class TrainResult:
    model: MageModel
    stats: NormStats
    sched: NoiseSchedule
    history: List[Dict[str, float]]


def train_from_clips(
    clips: Sequence[MotionClip],
    cfg: MageConfig,
    skel: SkeletonDef,
    scales: Dict[str, ScaleSpec],
    steps: Optional[int] = None,
    log_path: Optional[Union[str, Path]] = None,
    progress: bool = True,
    eval_fn: Optional[Callable[[MageModel], Dict[str, float]]] = None,
) -> TrainResult:
    """Fit normalization on the clips, window them, build a fresh model and train it."""
    stats = fit_normstats(clips, skel, scales)
    arrays = build_training_arrays(
        clips, skel, scales, stats, window=cfg.model.window, history=cfg.inference.history
    )
    dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
    model = MageModel(cfg.model, dtype=dtype, seed=cfg.train.seed)
    sched = make_schedule(cfg.model.T, cfg.model.schedule)
    logger.info(
        "training stages %s (fusion %s) on %d windows, %d parameters",
        cfg.model.stages,
        cfg.model.fusion,
        len(arrays),
        model.store.param_count(),
    )
    trainer = Trainer(model, sched, arrays, cfg.train)
    history = trainer.fit(steps, log_path=log_path, progress=progress, eval_fn=eval_fn)
    return TrainResult(model=model, stats=stats, sched=sched, history=history)
