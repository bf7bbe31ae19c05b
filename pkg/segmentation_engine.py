"""
SEGMENTATION ENGINE
U-Net fine-tuning with the weighted dice loss.

Rules:
1. Dice loss = -(1/Nc) * sum_i w_i * (2*sum(Y*T) + s) / (sum(Y) + sum(T) + s), weights renormalized to mean 1
2. Pretrained runs freeze the encoder for the first warmup epochs (zero updates, moments untouched)
3. Baseline runs start from random weights with warmup 0
4. Dropout is active (train mode) at the configured rates while fine-tuning
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from checkpoint_manager import Checkpoint
from errors import DimensionError, DivergenceError, NumericError, ParameterError, SpecError
from network_engine import UNet3D, UNetSpec
from tensor_engine import AdamOptimizer, DropoutMode, OptimizerSpec, Tape, Tensor, record_op
from volume_manager import LabelVolume, Volume, VolumeManager

logger = logging.getLogger("SEGMENTATION_ENGINE")


@dataclass(frozen=True)
class DiceSpec:
    num_classes: int
    smoothing: float = 1e-5
    class_weights: Optional[Tuple[float, ...]] = None

    def weights(self):
        if self.smoothing <= 0:
            raise ParameterError(f"dice smoothing {self.smoothing} must be > 0")
        if self.class_weights is None:
            return np.ones(self.num_classes)
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (self.num_classes,):
            raise ParameterError(f"{w.size} class weights for {self.num_classes} classes")
        if np.any(w <= 0):
            raise ParameterError(f"class weights must be > 0, got {self.class_weights}")
        return w / w.mean()


@dataclass
class FinetuneResult:
    network: UNet3D
    checkpoint: Checkpoint
    history: List[dict] = field(default_factory=list)


class SegmentationEngine:

    # =============================================================
    # 1. TARGETS & LOSS
    # =============================================================
    @staticmethod
    def onehot(labels: LabelVolume, num_classes) -> Tensor:
        data = labels.labels if isinstance(labels, LabelVolume) else np.asarray(labels)
        if data.size and int(data.max()) >= num_classes:
            raise ParameterError(f"label {int(data.max())} >= num_classes {num_classes}")
        eye = np.eye(num_classes, dtype=np.float32)
        return Tensor(np.moveaxis(eye[data], -1, 0))

    @staticmethod
    def dice_loss(probs: Tensor, target, spec: DiceSpec) -> Tensor:
        """probs / target as [C,D,H,W] or [N,C,D,H,W]; batched input averages per-sample losses"""
        t = target.data if isinstance(target, Tensor) else np.asarray(target)
        if probs.shape != t.shape:
            raise DimensionError(f"dice_loss: probs {probs.shape} vs target {t.shape}")
        batched = probs.ndim == 5
        if probs.ndim not in (4, 5) or probs.shape[1 if batched else 0] != spec.num_classes:
            raise DimensionError(f"dice_loss: expected {spec.num_classes} classes in {probs.shape}")
        y = probs.data.astype(np.float64)
        t = t.astype(np.float64)
        if not batched:
            y, t = y[None], t[None]
        if np.max(np.abs(y.sum(axis=1) - 1.0)) > 1e-4:
            raise ParameterError("dice_loss: probabilities do not sum to 1 over classes")

        w = spec.weights()
        s = spec.smoothing
        n, c = y.shape[:2]
        axes = tuple(range(2, y.ndim))
        inter = (y * t).sum(axis=axes)
        num = 2.0 * inter + s
        den = y.sum(axis=axes) + t.sum(axis=axes) + s
        per_sample = -(w * num / den).sum(axis=1) / c
        value = per_sample.mean()

        def _backward(g):
            shape = (n, c) + (1,) * len(axes)
            coef = (-(w / c) / n).reshape(1, c) / den ** 2
            grad = coef.reshape(shape) * (2.0 * t * den.reshape(shape) - num.reshape(shape))
            grad = grad * float(np.asarray(g).reshape(()))
            return ((grad if batched else grad[0]).astype(probs.data.dtype),)

        return record_op("dice_loss", (probs,), np.asarray([value], dtype=probs.data.dtype), _backward)

    # =============================================================
    # 2. NETWORK ASSEMBLY
    # =============================================================
    @staticmethod
    def build_unet(spec: UNetSpec, checkpoint: Optional[Checkpoint] = None, seed=0) -> UNet3D:
        """Random init, then g_enc from a pretraining checkpoint or every tensor from a U-Net checkpoint"""
        if checkpoint is None:
            return UNet3D(spec, seed=seed)
        kind = checkpoint.meta.get("kind")
        if kind == "unet":
            return UNet3D.from_checkpoint(checkpoint, spec)
        if kind in ("contrastive", None):
            return UNet3D(spec, seed=seed).load_encoder(checkpoint)
        raise SpecError(f"unknown checkpoint kind '{kind}'")

    # =============================================================
    # 3. FINE-TUNING
    # =============================================================
    @staticmethod
    def finetune(network: UNet3D, dataset: Sequence[Tuple[Volume, LabelVolume]], fraction=1.0, epochs=60,
                 warmup_epochs=0, optimizer: OptimizerSpec = OptimizerSpec(), seed=0, subset_seed=0,
                 batch_size=4, dice: Optional[DiceSpec] = None) -> FinetuneResult:
        if epochs < 1:
            raise ParameterError(f"epochs {epochs} must be >= 1")
        if not 0 <= warmup_epochs <= epochs:
            raise ParameterError(f"warmup_epochs {warmup_epochs} outside [0, {epochs}]")
        if batch_size < 1:
            raise ParameterError(f"batch_size {batch_size} must be >= 1")
        dice = dice or DiceSpec(network.spec.num_classes)
        subset = VolumeManager.subset_fraction(list(dataset), fraction, subset_seed)

        volumes = np.stack([vol.voxels for vol, _ in subset])[:, None].astype(np.float32)
        targets = np.stack([SegmentationEngine.onehot(lbl, dice.num_classes).data for _, lbl in subset])
        adam = AdamOptimizer(network.params, optimizer)
        encoder_names = set(network.encoder_parameter_names())
        steps = math.ceil(len(subset) / batch_size)
        history = []

        logger.info(f"🚀 FINETUNE_START: {len(subset)}/{len(dataset)} scans (fraction {fraction}), "
                    f"{epochs} epochs, warmup {warmup_epochs}")
        for epoch in range(epochs):
            frozen = epoch < warmup_epochs
            for name in encoder_names:
                network.params[name].requires_grad = not frozen
            if frozen and epoch == 0:
                logger.info(f"🧊 FINETUNE_FREEZE: encoder frozen for epochs 1-{warmup_epochs}")
            elif epoch == warmup_epochs and warmup_epochs > 0:
                logger.info(f"🔥 FINETUNE_UNFREEZE: encoder trainable from epoch {epoch + 1}")

            order = np.random.default_rng([seed, epoch]).permutation(len(subset))
            losses = []
            for step in range(steps):
                idx = order[step * batch_size:(step + 1) * batch_size]
                rng = np.random.default_rng([seed, epoch, step])
                try:
                    adam.zero_grad()
                    with Tape() as tape:
                        probs = network.forward(Tensor(volumes[idx]), DropoutMode.TRAIN, rng=rng)
                        loss = SegmentationEngine.dice_loss(probs, targets[idx], dice)
                        tape.backward(loss)
                    adam.step(frozen=encoder_names if frozen else ())
                except NumericError as exc:
                    logger.error(f"❌ FINETUNE_DIVERGED: epoch {epoch + 1} step {step + 1}: {exc}")
                    raise DivergenceError(f"fine-tuning diverged at epoch {epoch + 1}, step {step + 1}: {exc}",
                                          epoch=epoch + 1, step=step + 1) from exc
                losses.append(loss.item())
            mean_loss = float(np.mean(losses))
            history.append({"epoch": epoch + 1, "mean_loss": mean_loss, "encoder_frozen": frozen})
            logger.info(f"📉 FINETUNE_EPOCH: {epoch + 1}/{epochs} dice_loss={mean_loss:.4f}")

        for name in encoder_names:
            network.params[name].requires_grad = True
        meta = {"fraction": fraction, "epochs": epochs, "warmup_epochs": warmup_epochs, "seed": seed}
        return FinetuneResult(network, network.to_checkpoint(meta), history)

    # =============================================================
    # 4. PREDICTION
    # =============================================================
    @staticmethod
    def predict_probs(network: UNet3D, volume: Volume) -> np.ndarray:
        """Deterministic [C,D,H,W] class probabilities (dropout off)"""
        probs = network.forward(Tensor(volume.voxels[None, None]), DropoutMode.OFF)
        return probs.data[0]

    @staticmethod
    def predict_labels(network: UNet3D, volume: Volume) -> LabelVolume:
        probs = SegmentationEngine.predict_probs(network, volume)
        return LabelVolume(np.argmax(probs, axis=0).astype(np.uint8), network.spec.num_classes)
