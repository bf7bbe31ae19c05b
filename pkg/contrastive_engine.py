"""
CONTRASTIVE ENGINE
NT-Xent pretraining of the 3D encoder on unlabeled scans.

Batch layout: 2N latents, views (2m, 2m+1) come from source patch m,
so the positive partner of index i is i ^ 1. Every other index is a negative.

Pipeline per step:
1. M scans -> P patches each -> min-max normalized
2. Two augmented views per patch (rng stream per epoch/step/patch)
3. Encoder + projection head -> latents -> mean NT-Xent over all 2N ordered positive pairs
4. Backward + Adam
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from augment_engine import AugmentEngine, AugmentRanges
from checkpoint_manager import Checkpoint
from errors import DimensionError, DivergenceError, NumericError, ParameterError
from network_engine import ContrastiveNetwork, EncoderSpec, ProjectionHeadSpec
from tensor_engine import AdamOptimizer, OptimizerSpec, Tape, Tensor, record_op
from volume_manager import PatchingConfig, Volume, VolumeManager

logger = logging.getLogger("CONTRASTIVE_ENGINE")

MIN_NORM = 1e-12


@dataclass
class ContrastiveBatch:
    latents: Tensor
    temperature: float

    def __post_init__(self):
        if self.latents.ndim != 2:
            raise DimensionError(f"latents must be [2N,K], got {self.latents.shape}")
        if self.latents.shape[0] < 2 or self.latents.shape[0] % 2:
            raise DimensionError(f"latent count {self.latents.shape[0]} must be even and >= 2")
        if self.temperature <= 0:
            raise ParameterError(f"temperature {self.temperature} must be > 0")

    @property
    def size(self):
        return self.latents.shape[0]

    @staticmethod
    def partner(i):
        return i ^ 1


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def final_loss(self):
        return self.history[-1][1] if self.history else float("nan")


def _ntxent(latents: Tensor, temperature, pairs: Sequence[Tuple[int, int]]) -> Tensor:
    """Mean of l_ij over `pairs`, stabilized with log-sum-exp, one fused tape op"""
    z = latents.data.astype(np.float64)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms < MIN_NORM):
        raise NumericError("ntxent: latent vector with near-zero norm")
    zn = z / norms
    sims = zn @ zn.T / temperature
    np.fill_diagonal(sims, -np.inf)
    row_max = sims.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(sims - row_max).sum(axis=1))

    rows = np.array([i for i, _ in pairs])
    cols = np.array([j for _, j in pairs])
    loss = float(np.mean(lse[rows] - sims[rows, cols]))

    def _backward(g):
        scale = float(np.asarray(g).reshape(())) / len(pairs)
        soft = np.exp(sims - lse[:, None])
        G = np.zeros_like(sims)
        for i, j in pairs:
            G[i] += soft[i]
            G[i, j] -= 1.0
        G *= scale
        dzn = (G + G.T) @ zn / temperature
        dz = (dzn - zn * np.sum(zn * dzn, axis=1, keepdims=True)) / norms
        return (dz.astype(latents.data.dtype),)

    out = np.asarray([loss], dtype=latents.data.dtype)
    return record_op("ntxent", (latents,), out, _backward)


class ContrastiveEngine:

    # =============================================================
    # 1. LOSS
    # =============================================================
    @staticmethod
    def cosine_sim(u, v) -> float:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu < MIN_NORM or nv < MIN_NORM:
            raise NumericError("cosine_sim: near-zero vector")
        return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))

    @staticmethod
    def ntxent_pair_loss(batch: ContrastiveBatch, i, j) -> Tensor:
        if not (0 <= i < batch.size and j == ContrastiveBatch.partner(i)):
            raise ParameterError(f"({i}, {j}) is not a positive pair")
        return _ntxent(batch.latents, batch.temperature, [(i, j)])

    @staticmethod
    def ntxent_batch_loss(batch: ContrastiveBatch) -> Tensor:
        pairs = [(i, ContrastiveBatch.partner(i)) for i in range(batch.size)]
        return _ntxent(batch.latents, batch.temperature, pairs)

    # =============================================================
    # 2. BATCH ASSEMBLY
    # =============================================================
    @staticmethod
    def build_views(scans: Sequence[Volume], patching: PatchingConfig, ranges: AugmentRanges, seed, epoch, step):
        """[2N,1,d,h,w] float32 views; patch m yields rows 2m and 2m+1"""
        views = []
        idx = 0
        for scan in scans:
            for patch in VolumeManager.split_patches(scan, patching):
                rng = np.random.default_rng([seed, epoch, step, idx])
                normalized = VolumeManager.minmax_normalize(patch.voxels)
                view_a, view_b = AugmentEngine.sample_pair(normalized, rng, ranges)
                views.extend([view_a, view_b])
                idx += 1
        return np.stack(views)[:, None].astype(np.float32)

    # =============================================================
    # 3. TRAINING LOOP
    # =============================================================
    @staticmethod
    def pretrain(volumes: Sequence[Volume], patching: PatchingConfig, encoder_spec: EncoderSpec,
                 head_spec: ProjectionHeadSpec, temperature=0.05, epochs=50,
                 optimizer: OptimizerSpec = OptimizerSpec(), seed=0, augment_seed: Optional[int] = None,
                 ranges: AugmentRanges = AugmentRanges()) -> PretrainResult:
        if not volumes:
            raise ParameterError("pretrain needs at least one volume")
        if temperature <= 0:
            raise ParameterError(f"temperature {temperature} must be > 0")
        patch_dims = patching.patch_dims(volumes[0].dims)
        if tuple(encoder_spec.patch_dims) != tuple(patch_dims):
            raise DimensionError(f"encoder expects patches {encoder_spec.patch_dims}, grid yields {patch_dims}")
        augment_seed = seed if augment_seed is None else augment_seed

        network = ContrastiveNetwork(encoder_spec, head_spec, seed=seed)
        adam = AdamOptimizer(network.params, optimizer)
        steps_per_epoch = math.ceil(len(volumes) / patching.scans_per_batch)
        history = []

        def _batch(epoch, step, order):
            lo = step * patching.scans_per_batch
            scans = [volumes[int(k)] for k in order[lo:lo + patching.scans_per_batch]]
            return ContrastiveEngine.build_views(scans, patching, ranges, augment_seed, epoch, step)

        logger.info(f"🚀 PRETRAIN_START: {len(volumes)} scans, grid {patching.grid}, "
                    f"tau={temperature}, {epochs} epochs, {steps_per_epoch} steps/epoch")
        with ThreadPoolExecutor(max_workers=1) as prefetch:
            for epoch in range(epochs):
                order = np.random.default_rng([seed, epoch]).permutation(len(volumes))
                pending = prefetch.submit(_batch, epoch, 0, order)
                losses = []
                for step in range(steps_per_epoch):
                    views = pending.result()
                    if step + 1 < steps_per_epoch:
                        pending = prefetch.submit(_batch, epoch, step + 1, order)
                    try:
                        adam.zero_grad()
                        with Tape() as tape:
                            latents = network.forward(Tensor(views))
                            loss = ContrastiveEngine.ntxent_batch_loss(ContrastiveBatch(latents, temperature))
                            tape.backward(loss)
                        adam.step()
                    except NumericError as exc:
                        logger.error(f"❌ PRETRAIN_DIVERGED: epoch {epoch + 1} step {step + 1}: {exc}")
                        raise DivergenceError(f"pretraining diverged at epoch {epoch + 1}, step {step + 1}: {exc}",
                                              epoch=epoch + 1, step=step + 1) from exc
                    losses.append(loss.item())
                mean_loss = float(np.mean(losses))
                history.append((epoch + 1, mean_loss))
                logger.info(f"📉 PRETRAIN_EPOCH: {epoch + 1}/{epochs} loss={mean_loss:.4f}")

        meta = {"temperature": temperature, "epochs": epochs, "seed": seed}
        return PretrainResult(network.to_checkpoint(meta), history)
