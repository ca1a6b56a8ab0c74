"""
Three-stage coarse-to-fine denoiser.

Input embedding -> stage S1 -> fuse -> stage S2 -> fuse -> stage S3, each
stage a stack of residual MLP blocks with time-step injection and a direct
output head predicting that scale's clean motion (x0 prediction). Head
outputs pass through a fixed Gaussian low-pass over frames when
`output_smoothing` is set.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.stats import truncnorm

from services import nncore as nn
from services.config import ModelConfig
from services.dataio import COND_DIM
from services.errors import ShapeMismatch
from services.nncore import ParamStore, Tensor

logger = logging.getLogger(__name__)

ARCHITECTURE = "mage-mlp"
ARCH_VERSION = 2
SCALE_DIMS = {"S1": 36, "S2": 66, "S3": 132}
X_DIM = SCALE_DIMS["S3"]


@dataclass
class StageOutput:
    F: Tensor
    S_hat: Tensor
    F_rec: Optional[Tensor]


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps: (B,) -> (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


def fusion_parts(mode: str) -> Tuple[str, ...]:
    return tuple(mode.split("+"))


def temporal_kernel(n: int, sigma: float) -> np.ndarray:
    """
    (n, n) row-stochastic Gaussian smoothing matrix over frames: K @ x filters x
    along its frame axis, edges handled by repeating the end frames.
    """
    return gaussian_filter1d(np.eye(n), sigma, axis=0, mode="nearest")


class MageModel:
    """
    Parameters live in a ParamStore keyed by '<stage>/<part>/<name>'.

    Args:
        config: architecture description
        dtype: parameter precision
        seed: initialization seed
    """

    def __init__(self, config: ModelConfig, dtype=np.float64, seed: int = 0):
        self.config = config
        self.dtype = dtype
        self.stages: List[str] = list(config.stages)
        self.store = ParamStore(dtype=dtype)
        self._rng = np.random.default_rng(seed)
        self._build()
        self._smooth: Optional[Tensor] = None
        if config.output_smoothing > 0:
            self._smooth = Tensor(temporal_kernel(config.window, config.output_smoothing).astype(dtype))

    def _normal(self, *shape) -> np.ndarray:
        std = self.config.init_std
        return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=self._rng)

    def _build(self) -> None:
        D, N = self.config.latent_dim, self.config.window
        add = self.store.add
        add("embed/W", self._normal(X_DIM + COND_DIM, D))
        add("embed/b", np.zeros(D))
        parts = fusion_parts(self.config.fusion)
        if len(self.stages) > 1:
            add("cond_embed/W", self._normal(COND_DIM, D))
            add("cond_embed/b", np.zeros(D))
        for k, sid in enumerate(self.stages):
            for i in range(self.config.blocks_for(sid)):
                p = f"{sid}/block{i}"
                add(f"{p}/W1", self._normal(D, D))
                add(f"{p}/b1", np.zeros(D))
                add(f"{p}/Wt", np.zeros((D, D)))
                add(f"{p}/bt", np.zeros(D))
                add(f"{p}/Wmix", temporal_kernel(N, self.config.mix_init_sigma))
                add(f"{p}/bmix", np.zeros((N, 1)))
            add(f"{sid}/head/W", np.zeros((D, SCALE_DIMS[sid])))
            add(f"{sid}/head/b", np.zeros(SCALE_DIMS[sid]))
            if k < len(self.stages) - 1:
                if "F_rec" in parts:
                    add(f"{sid}/rec/W", self._normal(SCALE_DIMS[sid], D))
                    add(f"{sid}/rec/b", np.zeros(D))
                add(f"{sid}/fuse/W", self._normal(len(parts) * D, D))
                add(f"{sid}/fuse/b", np.zeros(D))
        logger.debug("built %s with %d parameters", self.stages, self.store.param_count())

    def _t(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))

    def embed_inputs(self, x_t, cond) -> Tensor:
        """Concatenate [x_t | cond] on the feature axis and project to the latent width."""
        x_t, cond = self._t(x_t), self._t(cond)
        N = self.config.window
        if x_t.shape[-2:] != (N, X_DIM) or cond.shape[-2:] != (N, COND_DIM):
            raise ShapeMismatch(
                f"expected x_t (..., {N}, {X_DIM}) and cond (..., {N}, {COND_DIM}), "
                f"got {x_t.shape} and {cond.shape}"
            )
        s = self.store
        return nn.affine(nn.concat([x_t, cond], axis=-1), s["embed/W"], s["embed/b"])

    def denoiser_block(self, prefix: str, h: Tensor, t_emb: Tensor) -> Tensor:
        """
        Residual block: layer norm, feature affine plus time injection, SiLU,
        then an affine map across the frame axis; added back onto h.
        """
        s = self.store
        u = nn.affine(nn.layer_norm(h), s[f"{prefix}/W1"], s[f"{prefix}/b1"])
        inj = nn.affine(t_emb, s[f"{prefix}/Wt"], s[f"{prefix}/bt"])
        u = nn.silu(u + nn.reshape(inj, (inj.shape[0], 1, inj.shape[1])))
        u = nn.add(nn.matmul(s[f"{prefix}/Wmix"], u), s[f"{prefix}/bmix"])
        return h + u

    def stage_forward(self, sid: str, h_in: Tensor, t_emb: Tensor) -> StageOutput:
        s = self.store
        F = h_in
        for i in range(self.config.blocks_for(sid)):
            F = self.denoiser_block(f"{sid}/block{i}", F, t_emb)
        S_hat = nn.affine(F, s[f"{sid}/head/W"], s[f"{sid}/head/b"])
        if self._smooth is not None:
            S_hat = nn.matmul(self._smooth, S_hat)
        F_rec = None
        if f"{sid}/rec/W" in s:
            F_rec = nn.affine(S_hat, s[f"{sid}/rec/W"], s[f"{sid}/rec/b"])
        return StageOutput(F=F, S_hat=S_hat, F_rec=F_rec)

    def fuse(self, sid: str, cond_latent: Tensor, out: StageOutput) -> Tensor:
        """Concatenate the features selected by the fusion mode and project back to the latent width."""
        pieces = {"C": cond_latent, "F": out.F, "F_rec": out.F_rec}
        chosen = [pieces[p] for p in fusion_parts(self.config.fusion)]
        s = self.store
        return nn.affine(nn.concat(chosen, axis=-1), s[f"{sid}/fuse/W"], s[f"{sid}/fuse/b"])

    def forward(self, x_t, t, cond, return_stages: bool = False):
        """
        Args:
            x_t: (B, N, 132) noised normalized motion
            t: (B,) 1-based diffusion steps
            cond: (B, N, 54) normalized sparse observations

        Returns:
            dict stage id -> S_hat tensor (B, N, scale_dim); with return_stages,
            also the dict of StageOutput
        """
        x_t, cond = self._t(x_t), self._t(cond)
        if x_t.ndim != 3 or cond.ndim != 3 or x_t.shape[0] != cond.shape[0]:
            raise ShapeMismatch(f"expected batched (B, N, D) inputs, got {x_t.shape} and {cond.shape}")
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        t_emb = self._t(timestep_embedding(t, self.config.latent_dim))

        h = self.embed_inputs(x_t, cond)
        cond_latent = None
        if len(self.stages) > 1:
            cond_latent = nn.affine(cond, self.store["cond_embed/W"], self.store["cond_embed/b"])

        outputs: Dict[str, StageOutput] = {}
        for k, sid in enumerate(self.stages):
            out = self.stage_forward(sid, h, t_emb)
            outputs[sid] = out
            if k < len(self.stages) - 1:
                h = self.fuse(sid, cond_latent, out)

        preds = {sid: o.S_hat for sid, o in outputs.items()}
        if return_stages:
            return preds, outputs
        return preds

    def predict_x0(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Final-stage x0 estimate as a plain array, without recording gradients."""
        with nn.no_grad():
            return self.forward(x_t, t, cond)["S3"].data.astype(np.float64)

    def denoise_fn(self):
        """Adapter for the samplers: (x_t, t, cond) -> x0_hat."""
        return lambda x_t, t, cond: self.predict_x0(x_t, t, cond)


def mage_forward(model: MageModel, x_t, t, cond) -> Dict[str, Tensor]:
    return model.forward(x_t, t, cond)


def param_count(config: ModelConfig) -> int:
    """Number of scalar parameters implied by a configuration."""
    D, N = config.latent_dim, config.window
    parts = fusion_parts(config.fusion)
    total = (X_DIM + COND_DIM + 1) * D
    if len(config.stages) > 1:
        total += (COND_DIM + 1) * D
    for k, sid in enumerate(config.stages):
        per_block = 2 * (D * D + D) + N * N + N
        total += config.blocks_for(sid) * per_block
        total += (D + 1) * SCALE_DIMS[sid]
        if k < len(config.stages) - 1:
            if "F_rec" in parts:
                total += (SCALE_DIMS[sid] + 1) * D
            total += (len(parts) * D + 1) * D
    return total
