"""
EVALUATION ENGINE
Dice metrics and the experiment harnesses.

Sweeps:
1. fraction_sweep       : pretrained-init vs random-init arms over label fractions
2. dropout_config_sweep : MC majority with dropout on encoder / decoder / both, per rate
3. aggregation_sweep    : the four protocols on one shared ensemble per test scan
4. mc_benefit_sweep     : deterministic vs MC majority, per arm
5. temperature_sweep    : pretraining temperature vs downstream dice

"Average dice" is the mean over foreground classes; per-class values are always emitted.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint_manager import Checkpoint
from config_manager import ConfigManager, RunConfig
from contrastive_engine import ContrastiveEngine
from errors import DimensionError, ParameterError
from mc_dropout_engine import AggregationProtocol, MCDropoutEngine
from network_engine import UNet3D
from segmentation_engine import SegmentationEngine
from volume_manager import LabelVolume, Volume

logger = logging.getLogger("EVALUATION_ENGINE")

CSV_HEADER = ["experiment_id", "arm", "fraction", "enc_rate", "dec_rate", "protocol", "class", "dice", "seed"]


@dataclass
class ExperimentRow:
    experiment_id: str
    arm: str
    fraction: float
    enc_rate: float
    dec_rate: float
    protocol: str
    per_class_dice: List[float]
    seed: int

    @property
    def mean_foreground_dice(self):
        return float(np.mean(self.per_class_dice[1:])) if len(self.per_class_dice) > 1 else float("nan")


@dataclass
class ExperimentReport:
    rows: List[ExperimentRow] = field(default_factory=list)

    def add(self, row: ExperimentRow):
        for value in row.per_class_dice:
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"dice {value} outside [0, 1] in {row.experiment_id}/{row.arm}")
        self.rows.append(row)

    def extend(self, other: "ExperimentReport"):
        for row in other.rows:
            self.add(row)
        return self

    def select(self, **criteria) -> List[ExperimentRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in criteria.items())]

    def mean_dice(self, **criteria) -> float:
        """Foreground mean dice averaged over the matching rows (e.g. over seeds)"""
        rows = self.select(**criteria)
        if not rows:
            raise ParameterError(f"no report rows match {criteria}")
        return float(np.mean([r.mean_foreground_dice for r in rows]))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in self.rows:
                base = [r.experiment_id, r.arm, f"{r.fraction:g}", f"{r.enc_rate:g}", f"{r.dec_rate:g}", r.protocol]
                for c, dice in enumerate(r.per_class_dice):
                    writer.writerow(base + [c, f"{dice:.6f}", r.seed])
                writer.writerow(base + ["mean_fg", f"{r.mean_foreground_dice:.6f}", r.seed])
        return path


@dataclass
class ExperimentContext:
    """Everything a sweep needs: resolved config, preprocessed splits, upstream artifacts"""
    config: RunConfig
    train: Sequence[Tuple[Volume, LabelVolume]]
    test: Sequence[Tuple[Volume, LabelVolume]]
    unlabeled: Sequence[Volume] = ()
    pretrained: Optional[Checkpoint] = None
    workers: int = 1


class EvaluationEngine:

    # =============================================================
    # 1. METRICS
    # =============================================================
    @staticmethod
    def dice_score(pred: LabelVolume, truth: LabelVolume, class_c) -> float:
        if pred.dims != truth.dims:
            raise DimensionError(f"dice_score: {pred.dims} vs {truth.dims}")
        p = pred.labels == class_c
        t = truth.labels == class_c
        total = int(p.sum()) + int(t.sum())
        if total == 0:
            return 1.0
        return 2.0 * int(np.logical_and(p, t).sum()) / total

    @staticmethod
    def per_class_dice(preds: Sequence[LabelVolume], truths: Sequence[LabelVolume], num_classes) -> List[float]:
        """Per-class dice averaged over scans"""
        for i, truth in enumerate(truths):
            present = np.bincount(truth.labels.reshape(-1), minlength=num_classes)[:num_classes] > 0
            if not present[1:].all():
                logger.warning(f"⚠️ EMPTY_FOREGROUND: scan {i} has no voxels of class "
                               f"{[c for c in range(1, num_classes) if not present[c]]}; dice is 1.0 only on empty prediction")
        scores = np.array([[EvaluationEngine.dice_score(p, t, c) for c in range(num_classes)]
                           for p, t in zip(preds, truths)])
        return [float(v) for v in scores.mean(axis=0)]

    # =============================================================
    # 2. SHARED STEPS
    # =============================================================
    @staticmethod
    def train_arm(ctx: ExperimentContext, arm, fraction, seed, checkpoint: Optional[Checkpoint] = None) -> UNet3D:
        """finetuned: pretrained encoder + warm-up freeze; baseline: random init, warmup 0"""
        cfg = ctx.config
        spec = ConfigManager.unet_spec(cfg)
        if arm == "finetuned":
            source = checkpoint if checkpoint is not None else ctx.pretrained
            if source is None:
                raise ParameterError("finetuned arm needs a pretraining checkpoint")
            network = SegmentationEngine.build_unet(spec, source, seed=seed)
            warmup = cfg.finetune.warmup_epochs
        elif arm == "baseline":
            network = SegmentationEngine.build_unet(spec, None, seed=seed)
            warmup = 0
        else:
            raise ParameterError(f"unknown arm '{arm}'")
        result = SegmentationEngine.finetune(
            network, ctx.train, fraction=fraction, epochs=cfg.finetune.epochs, warmup_epochs=warmup,
            optimizer=ConfigManager.optimizer(cfg.finetune.learning_rate), seed=seed,
            subset_seed=cfg.finetune.subset_seed + seed, batch_size=cfg.finetune.batch_size,
            dice=ConfigManager.dice_spec(cfg))
        return result.network

    @staticmethod
    def deterministic_dice(network: UNet3D, test) -> List[float]:
        preds = [SegmentationEngine.predict_labels(network, vol) for vol, _ in test]
        return EvaluationEngine.per_class_dice(preds, [lbl for _, lbl in test], network.spec.num_classes)

    @staticmethod
    def ensembles(ctx: ExperimentContext, network: UNet3D, enc_rate, dec_rate):
        mc = ctx.config.mc
        return [MCDropoutEngine.mc_sample(network, vol, mc.samples, enc_rate, dec_rate, mc.seed + i, ctx.workers)
                for i, (vol, _) in enumerate(ctx.test)]

    @staticmethod
    def ensemble_dice(ensembles, test, protocol: AggregationProtocol, num_classes) -> List[float]:
        preds = [MCDropoutEngine.aggregate(ens, protocol) for ens in ensembles]
        return EvaluationEngine.per_class_dice(preds, [lbl for _, lbl in test], num_classes)

    # =============================================================
    # 3. SWEEPS
    # =============================================================
    @staticmethod
    def fraction_sweep(ctx: ExperimentContext) -> ExperimentReport:
        cfg = ctx.config
        cells = [(fraction, arm, seed) for fraction in cfg.eval.fractions
                 for arm in ("finetuned", "baseline") for seed in cfg.eval.seeds]

        def _cell(cell):
            fraction, arm, seed = cell
            network = EvaluationEngine.train_arm(ctx, arm, fraction, seed)
            return EvaluationEngine.deterministic_dice(network, ctx.test)

        with ThreadPoolExecutor(max_workers=max(1, ctx.workers)) as pool:
            scores = list(pool.map(_cell, cells))

        report = ExperimentReport()
        for (fraction, arm, seed), dice in zip(cells, scores):
            report.add(ExperimentRow("fraction", arm, fraction, 0.0, 0.0, "deterministic", dice, seed))
        for fraction in cfg.eval.fractions:
            logger.info(f"📊 FRACTION_SWEEP: fraction={fraction:g} "
                        f"finetuned={report.mean_dice(arm='finetuned', fraction=fraction):.4f} "
                        f"baseline={report.mean_dice(arm='baseline', fraction=fraction):.4f}")
        return report

    @staticmethod
    def dropout_config_sweep(ctx: ExperimentContext, network: UNet3D) -> ExperimentReport:
        cfg = ctx.config
        c = network.spec.num_classes
        majority = AggregationProtocol.majority()
        fraction = cfg.finetune.fraction
        report = ExperimentReport()
        report.add(ExperimentRow("dropout", "deterministic", fraction, 0.0, 0.0, "deterministic",
                                 EvaluationEngine.deterministic_dice(network, ctx.test), cfg.mc.seed))
        for placement in ("encoder", "decoder", "both"):
            for rate in cfg.eval.rates:
                enc = rate if placement in ("encoder", "both") else 0.0
                dec = rate if placement in ("decoder", "both") else 0.0
                ens = EvaluationEngine.ensembles(ctx, network, enc, dec)
                dice = EvaluationEngine.ensemble_dice(ens, ctx.test, majority, c)
                report.add(ExperimentRow("dropout", placement, fraction, enc, dec, majority.label, dice, cfg.mc.seed))
                logger.info(f"📊 DROPOUT_SWEEP: {placement} rate={rate:g} dice={report.rows[-1].mean_foreground_dice:.4f}")
        return report

    @staticmethod
    def aggregation_sweep(ctx: ExperimentContext, networks: Dict[float, UNet3D]) -> ExperimentReport:
        """networks maps label fraction -> fine-tuned U-Net; every protocol reuses one ensemble per scan"""
        cfg = ctx.config
        c = cfg.data.num_classes
        protocols = [
            AggregationProtocol.majority(),
            AggregationProtocol.weighted_majority(ConfigManager.aggregation_weights(cfg)),
            AggregationProtocol.borda(),
            AggregationProtocol.union(ConfigManager.class_x(cfg)),
        ]
        report = ExperimentReport()
        for fraction, network in networks.items():
            ens = EvaluationEngine.ensembles(ctx, network, cfg.mc.enc_rate, cfg.mc.dec_rate)
            for protocol in protocols:
                dice = EvaluationEngine.ensemble_dice(ens, ctx.test, protocol, c)
                report.add(ExperimentRow("aggregation", "finetuned", fraction, cfg.mc.enc_rate, cfg.mc.dec_rate,
                                         protocol.label, dice, cfg.mc.seed))
            gap = abs(report.mean_dice(protocol="borda", fraction=fraction)
                      - report.mean_dice(protocol="majority", fraction=fraction))
            logger.info(f"📊 AGGREGATION_SWEEP: fraction={fraction:g} |borda - majority| = {gap:.4f}")
        return report

    @staticmethod
    def mc_benefit_sweep(ctx: ExperimentContext, networks: Dict[str, UNet3D]) -> ExperimentReport:
        """networks maps arm name -> fine-tuned U-Net"""
        cfg = ctx.config
        majority = AggregationProtocol.majority()
        report = ExperimentReport()
        for arm, network in networks.items():
            det = EvaluationEngine.deterministic_dice(network, ctx.test)
            report.add(ExperimentRow("mc_benefit", arm, cfg.finetune.fraction, 0.0, 0.0, "deterministic", det,
                                     cfg.mc.seed))
            ens = EvaluationEngine.ensembles(ctx, network, cfg.mc.enc_rate, cfg.mc.dec_rate)
            dice = EvaluationEngine.ensemble_dice(ens, ctx.test, majority, network.spec.num_classes)
            report.add(ExperimentRow("mc_benefit", arm, cfg.finetune.fraction, cfg.mc.enc_rate, cfg.mc.dec_rate,
                                     majority.label, dice, cfg.mc.seed))
            delta = report.rows[-1].mean_foreground_dice - report.rows[-2].mean_foreground_dice
            logger.info(f"📊 MC_BENEFIT: {arm} delta(mc - deterministic) = {delta:+.4f}")
        return report

    @staticmethod
    def temperature_sweep(ctx: ExperimentContext) -> ExperimentReport:
        cfg = ctx.config
        volumes = list(ctx.unlabeled) or [vol for vol, _ in ctx.train]
        report = ExperimentReport()
        for tau in cfg.eval.temperatures:
            result = ContrastiveEngine.pretrain(
                volumes, ConfigManager.patching(cfg), ConfigManager.encoder_spec(cfg), ConfigManager.head_spec(cfg),
                temperature=tau, epochs=cfg.pretrain.epochs,
                optimizer=ConfigManager.optimizer(cfg.pretrain.learning_rate), seed=cfg.pretrain.seed,
                augment_seed=cfg.augment.seed, ranges=ConfigManager.augment_ranges(cfg))
            logger.info(f"🌡️ TEMPERATURE_SWEEP: tau={tau:g} final pretrain loss={result.final_loss:.4f}")
            network = EvaluationEngine.train_arm(ctx, "finetuned", cfg.eval.temperature_fraction, cfg.finetune.seed,
                                                 checkpoint=result.checkpoint)
            dice = EvaluationEngine.deterministic_dice(network, ctx.test)
            report.add(ExperimentRow("temperature", f"tau_{tau:g}", cfg.eval.temperature_fraction, 0.0, 0.0,
                                     "deterministic", dice, cfg.finetune.seed))
        return report
