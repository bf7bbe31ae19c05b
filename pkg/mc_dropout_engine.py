"""
MC DROPOUT ENGINE
Sub-network sampling at inference time and the four vote aggregation protocols.

Protocols:
1. Majority           : one argmax vote per sample, most votes wins
2. Weighted Majority  : vote counts multiplied by a per-class weight
3. Borda              : per sample, classes ranked by probability get C-1 ... 0 points
4. Union per class_x  : class_x wherever any sample predicts it, fallback protocol elsewhere

Ties always resolve to the lowest class index.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from errors import DimensionError, ParameterError
from network_engine import UNet3D
from tensor_engine import DropoutMode, Tensor
from volume_manager import LabelVolume, Volume

logger = logging.getLogger("MC_DROPOUT_ENGINE")


@dataclass
class EnsemblePrediction:
    samples: np.ndarray  # [T, C, D, H, W]
    enc_rate: float = 0.0
    dec_rate: float = 0.0
    master_seed: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 5 or self.samples.shape[0] < 1:
            raise DimensionError(f"ensemble must be [T,C,D,H,W] with T >= 1, got {self.samples.shape}")
        if np.max(np.abs(self.samples.sum(axis=1) - 1.0)) > 1e-4:
            raise ParameterError("ensemble samples are not normalized over classes")

    @property
    def num_samples(self):
        return self.samples.shape[0]

    @property
    def num_classes(self):
        return self.samples.shape[1]

    @property
    def dims(self):
        return self.samples.shape[2:]

    def votes(self):
        """[T,D,H,W] per-sample argmax (first maximum on ties)"""
        return np.argmax(self.samples, axis=1)

    def vote_counts(self):
        votes = self.votes()
        return np.stack([(votes == c).sum(axis=0) for c in range(self.num_classes)])

    def mean_probs(self):
        return self.samples.astype(np.float64).mean(axis=0)

    def variance(self):
        return self.samples.astype(np.float64).var(axis=0)

    def predictive_entropy(self):
        mean = self.mean_probs()
        return -(mean * np.log(np.clip(mean, 1e-12, None))).sum(axis=0)


class ProtocolKind(Enum):
    MAJORITY = "majority"
    WEIGHTED_MAJORITY = "weighted_majority"
    BORDA = "borda"
    UNION = "union"


@dataclass(frozen=True)
class AggregationProtocol:
    kind: ProtocolKind
    weights: Optional[Tuple[float, ...]] = None
    class_x: Optional[int] = None
    fallback: Optional["AggregationProtocol"] = None

    @classmethod
    def majority(cls):
        return cls(ProtocolKind.MAJORITY)

    @classmethod
    def weighted_majority(cls, weights):
        return cls(ProtocolKind.WEIGHTED_MAJORITY, weights=tuple(float(w) for w in weights))

    @classmethod
    def borda(cls):
        return cls(ProtocolKind.BORDA)

    @classmethod
    def union(cls, class_x, fallback=None):
        return cls(ProtocolKind.UNION, class_x=int(class_x), fallback=fallback)

    @property
    def label(self):
        if self.kind is ProtocolKind.WEIGHTED_MAJORITY:
            return "weighted_majority(" + "/".join(f"{w:g}" for w in self.weights) + ")"
        if self.kind is ProtocolKind.UNION:
            return f"union({self.class_x})"
        return self.kind.value


def _lowest_argmax(scores):
    # np.argmax returns the first maximum, i.e. the lowest class index
    return np.argmax(scores, axis=0).astype(np.uint8)


class MCDropoutEngine:

    # =============================================================
    # 1. SAMPLING
    # =============================================================
    @staticmethod
    def mc_sample(network: UNet3D, volume: Volume, num_samples=100, enc_rate=0.3, dec_rate=0.0,
                  master_seed=0, workers=1) -> EnsemblePrediction:
        """T dropout forward passes; sample t draws its masks from default_rng([master_seed, t])"""
        if num_samples < 1:
            raise ParameterError(f"T = {num_samples} must be >= 1")
        for name, rate in (("enc_rate", enc_rate), ("dec_rate", dec_rate)):
            if not 0.0 <= rate < 1.0:
                raise ParameterError(f"{name} {rate} outside [0, 1)")
        x = Tensor(volume.voxels[None, None])

        def _one(t):
            rng = np.random.default_rng([master_seed, t])
            return network.forward(x, DropoutMode.MC_INFERENCE, enc_rate, dec_rate, rng).data[0]

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            samples = list(pool.map(_one, range(num_samples)))
        logger.info(f"🎲 MC_SAMPLE: T={num_samples} enc={enc_rate} dec={dec_rate} seed={master_seed}")
        return EnsemblePrediction(np.stack(samples), enc_rate, dec_rate, master_seed)

    # =============================================================
    # 2. AGGREGATION
    # =============================================================
    @staticmethod
    def aggregate_majority(ens: EnsemblePrediction) -> LabelVolume:
        return LabelVolume(_lowest_argmax(ens.vote_counts()), ens.num_classes)

    @staticmethod
    def aggregate_weighted_majority(ens: EnsemblePrediction, weights) -> LabelVolume:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (ens.num_classes,):
            raise ParameterError(f"{w.size} weights for {ens.num_classes} classes")
        if np.any(w < 0):
            raise ParameterError(f"negative aggregation weight in {tuple(weights)}")
        scores = ens.vote_counts() * w.reshape(-1, 1, 1, 1)
        return LabelVolume(_lowest_argmax(scores), ens.num_classes)

    @staticmethod
    def aggregate_borda(ens: EnsemblePrediction) -> LabelVolume:
        c = ens.num_classes
        if c < 2:
            raise ParameterError("borda needs at least 2 classes")
        # stable sort of -p: equal probabilities keep the lower class ahead
        order = np.argsort(-ens.samples, axis=1, kind="stable")
        points = np.empty(ens.samples.shape, dtype=np.int64)
        ranks = (c - 1 - np.arange(c)).reshape(1, c, 1, 1, 1)
        np.put_along_axis(points, order, np.broadcast_to(ranks, order.shape), axis=1)
        return LabelVolume(_lowest_argmax(points.sum(axis=0)), c)

    @staticmethod
    def aggregate_union(ens: EnsemblePrediction, class_x, fallback: Optional[AggregationProtocol] = None) -> LabelVolume:
        if not 0 <= class_x < ens.num_classes:
            raise ParameterError(f"class_x {class_x} outside [0, {ens.num_classes})")
        fallback = fallback or AggregationProtocol.majority()
        if fallback.kind is ProtocolKind.UNION:
            raise ParameterError("union fallback cannot itself be a union protocol")
        base = MCDropoutEngine.aggregate(ens, fallback).labels.copy()
        base[(ens.votes() == class_x).any(axis=0)] = class_x
        return LabelVolume(base, ens.num_classes)

    @staticmethod
    def aggregate(ens: EnsemblePrediction, protocol: AggregationProtocol) -> LabelVolume:
        if protocol.kind is ProtocolKind.MAJORITY:
            return MCDropoutEngine.aggregate_majority(ens)
        if protocol.kind is ProtocolKind.WEIGHTED_MAJORITY:
            return MCDropoutEngine.aggregate_weighted_majority(ens, protocol.weights)
        if protocol.kind is ProtocolKind.BORDA:
            return MCDropoutEngine.aggregate_borda(ens)
        if protocol.kind is ProtocolKind.UNION:
            return MCDropoutEngine.aggregate_union(ens, protocol.class_x, protocol.fallback)
        raise ParameterError(f"unknown protocol {protocol.kind}")

    # =============================================================
    # 3. UNCERTAINTY
    # =============================================================
    @staticmethod
    def percentile_heatmap(ens: EnsemblePrediction, class_c, percentile) -> Volume:
        """Nearest-rank percentile: 1-based index ceil(p/100 * T) of the sorted samples, p=0 -> minimum"""
        if not 0 <= class_c < ens.num_classes:
            raise ParameterError(f"class {class_c} outside [0, {ens.num_classes})")
        if not 0.0 <= percentile <= 100.0:
            raise ParameterError(f"percentile {percentile} outside [0, 100]")
        t = ens.num_samples
        rank = max(math.ceil(round(percentile * t / 100.0, 9)), 1)
        ordered = np.sort(ens.samples[:, class_c], axis=0)
        return Volume(ordered[rank - 1].astype(np.float32))
