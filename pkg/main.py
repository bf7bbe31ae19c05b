"""
VSSL PIPELINE - MASTER CONTROLLER
Command-line entry point for the three-step workflow plus synthesis and visualization.

Subcommands:
1. synth     : phantom volumes + labels + manifest
2. pretrain  : contrastive encoder pretraining on every scan
3. finetune  : U-Net fine-tuning on the annotated training split
4. predict   : deterministic test-set predictions
5. mc        : MC-dropout ensembles, aggregated labels, heatmaps, ensemble statistics
6. sweep     : experiment CSVs (fraction / dropout / aggregation / mc_benefit / temperature)
7. gradcheck : finite-difference check of every differentiable op

Exit codes: 0 ok, 1 config, 2 data, 3 numeric divergence.
"""

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from checkpoint_manager import CheckpointManager
from config_manager import ConfigManager, RunConfig
from contrastive_engine import ContrastiveBatch, ContrastiveEngine
from errors import DataError, NumericError, VSSLError
from evaluation_engine import EvaluationEngine, ExperimentContext, ExperimentReport, ExperimentRow
from mc_dropout_engine import AggregationProtocol, MCDropoutEngine, ProtocolKind
from network_engine import EncoderSpec, UNet3D, UNetSpec
from phantom_engine import PhantomEngine
from segmentation_engine import DiceSpec, SegmentationEngine
from tensor_engine import (DropoutMode, Tensor, conv3d, dense, gradcheck, maxpool3d, relu, softmax_channels,
                           upsample3d_nearest)
from visual_engine import VisualEngine
from volume_manager import DatasetEntry, Volume, VolumeManager

logger = logging.getLogger("MASTER_CONTROLLER")

COMMANDS = ("synth", "pretrain", "finetune", "predict", "mc", "sweep", "gradcheck")
GRADCHECK_OP_TOLERANCE = 1e-3
GRADCHECK_NETWORK_TOLERANCE = 1e-2


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


class PipelineExecutive:
    """
    THE RUN DIRECTORY CONTROLLER:
    Every command reads the resolved config and the run directory, and writes
    only under its own sub-directory.

    out/config.resolved.json
    out/data/      scan_NNNN.vol/.json, scan_NNNN_seg.lbl/.json, manifest.json
    out/pretrain/  checkpoint.ckpt, loss.csv
    out/finetune/  checkpoint.ckpt, metrics.csv
    out/predict/   *_pred.lbl, *_prob_cK.vol, report.csv
    out/mc/        *_<protocol>.lbl, heatmaps (.vol + .ppm), mean/variance/entropy volumes, report.csv
    out/sweep/     <sweep>.csv
    """

    def __init__(self, config: RunConfig, out_dir, threads=1):
        self.config = config
        self.out = Path(out_dir)
        self.threads = max(1, threads)
        self._dataset = None

    # =============================================================
    # 0. SHARED ARTIFACTS
    # =============================================================
    @property
    def manifest_path(self):
        return self.out / "data" / "manifest.json"

    def load_dataset(self):
        """(all preprocessed scans, train pairs, test pairs); cached per executive"""
        if self._dataset is not None:
            return self._dataset
        if not self.manifest_path.exists():
            raise DataError(f"{self.manifest_path} not found; run 'synth' first")
        entries = VolumeManager.read_manifest(self.manifest_path)
        data = self.config.data

        def _prep(entry: DatasetEntry):
            return VolumeManager.preprocess(entry, data.resolution, data.crop_margin)

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            prepared = list(pool.map(_prep, entries))
        labeled = [(e.volume, e.labels) for e in prepared if e.labels is not None]
        if len(labeled) < data.test_scans + 1:
            raise DataError(f"{len(labeled)} annotated scans, need more than {data.test_scans} test scans")
        train, test = VolumeManager.train_test_split(labeled, data.test_scans, data.seed, data.train_scans)
        self._dataset = ([e.volume for e in prepared], train, test)
        logger.info(f"📦 DATASET_READY: {len(prepared)} scans, {len(train)} train / {len(test)} test annotated")
        return self._dataset

    def load_pretrained(self, spec=None):
        init = spec or "pretrained"
        path = Path(init.split(":", 1)[1]) if init.startswith("pretrained:") else self.out / "pretrain" / "checkpoint.ckpt"
        if not path.exists():
            raise DataError(f"{path} not found; run 'pretrain' first")
        return CheckpointManager.load(path)

    def load_finetuned(self) -> UNet3D:
        path = self.out / "finetune" / "checkpoint.ckpt"
        if not path.exists():
            raise DataError(f"{path} not found; run 'finetune' first")
        return UNet3D.from_checkpoint(CheckpointManager.load(path), ConfigManager.unet_spec(self.config))

    def context(self, pretrained=None) -> ExperimentContext:
        volumes, train, test = self.load_dataset()
        return ExperimentContext(self.config, train, test, volumes, pretrained, self.threads)

    # =============================================================
    # 1. SYNTH
    # =============================================================
    def cmd_synth(self):
        data = self.config.data
        spec = ConfigManager.phantom_spec(self.config)
        phantoms = PhantomEngine.generate_dataset(spec, data.total_scans, self.threads)
        annotated = set(int(i) for i in np.random.default_rng(data.seed).permutation(data.total_scans)[:data.annotated_scans])

        folder = self.out / "data"
        pairs = []
        for i, (volume, labels) in enumerate(phantoms):
            name = f"scan_{i + 1:04d}"
            VolumeManager.save_volume(volume, folder / f"{name}.vol")
            label_name = None
            if i in annotated:
                label_name = f"{name}_seg.lbl"
                VolumeManager.save_labels(labels, folder / label_name)
            pairs.append((f"{name}.vol", label_name))
        VolumeManager.write_manifest(pairs, self.manifest_path)
        logger.info(f"✅ SYNTH_COMPLETE: {len(pairs)} scans ({len(annotated)} annotated) -> {self.manifest_path}")
        return self.manifest_path

    # =============================================================
    # 2. PRETRAIN
    # =============================================================
    def cmd_pretrain(self):
        cfg = self.config
        volumes, _, _ = self.load_dataset()
        result = ContrastiveEngine.pretrain(
            volumes, ConfigManager.patching(cfg), ConfigManager.encoder_spec(cfg), ConfigManager.head_spec(cfg),
            temperature=cfg.pretrain.temperature, epochs=cfg.pretrain.epochs,
            optimizer=ConfigManager.optimizer(cfg.pretrain.learning_rate), seed=cfg.pretrain.seed,
            augment_seed=cfg.augment.seed, ranges=ConfigManager.augment_ranges(cfg))
        folder = self.out / "pretrain"
        CheckpointManager.save(result.checkpoint, folder / "checkpoint.ckpt")
        _write_rows(folder / "loss.csv", ["epoch", "mean_loss"], [(e, f"{l:.6f}") for e, l in result.history])
        logger.info(f"✅ PRETRAIN_COMPLETE: final loss {result.final_loss:.4f}")
        return result

    # =============================================================
    # 3. FINETUNE
    # =============================================================
    def cmd_finetune(self):
        cfg = self.config
        ft = cfg.finetune
        _, train, test = self.load_dataset()
        spec = ConfigManager.unet_spec(cfg)
        if ft.init == "random":
            network, warmup = SegmentationEngine.build_unet(spec, None, seed=ft.seed), 0
        else:
            network = SegmentationEngine.build_unet(spec, self.load_pretrained(ft.init), seed=ft.seed)
            warmup = ft.warmup_epochs
        result = SegmentationEngine.finetune(
            network, train, fraction=ft.fraction, epochs=ft.epochs, warmup_epochs=warmup,
            optimizer=ConfigManager.optimizer(ft.learning_rate), seed=ft.seed, subset_seed=ft.subset_seed,
            batch_size=ft.batch_size, dice=ConfigManager.dice_spec(cfg))
        folder = self.out / "finetune"
        CheckpointManager.save(result.checkpoint, folder / "checkpoint.ckpt")
        _write_rows(folder / "metrics.csv", ["epoch", "mean_loss", "encoder_frozen"],
                    [(h["epoch"], f"{h['mean_loss']:.6f}", int(h["encoder_frozen"])) for h in result.history])
        dice = EvaluationEngine.deterministic_dice(result.network, test)
        logger.info(f"✅ FINETUNE_COMPLETE: test dice per class {[round(d, 4) for d in dice]}")
        return result

    # =============================================================
    # 4. PREDICT
    # =============================================================
    def cmd_predict(self):
        _, _, test = self.load_dataset()
        network = self.load_finetuned()
        folder = self.out / "predict"
        preds = []
        for i, (volume, _) in enumerate(test):
            probs = SegmentationEngine.predict_probs(network, volume)
            labels = SegmentationEngine.predict_labels(network, volume)
            VolumeManager.save_labels(labels, folder / f"test_{i + 1:04d}_pred.lbl")
            for c in range(probs.shape[0]):
                VolumeManager.save_volume(Volume(probs[c]), folder / f"test_{i + 1:04d}_prob_c{c}.vol")
            preds.append(labels)
        dice = EvaluationEngine.per_class_dice(preds, [lbl for _, lbl in test], network.spec.num_classes)
        report = ExperimentReport()
        report.add(ExperimentRow("predict", "finetuned", self.config.finetune.fraction, 0.0, 0.0,
                                 "deterministic", dice, self.config.finetune.seed))
        report.to_csv(folder / "report.csv")
        logger.info(f"✅ PREDICT_COMPLETE: {len(test)} scans, mean fg dice {report.rows[0].mean_foreground_dice:.4f}")
        return report

    # =============================================================
    # 5. MC DROPOUT
    # =============================================================
    def protocol(self) -> AggregationProtocol:
        kind = ProtocolKind(self.config.mc.protocol)
        if kind is ProtocolKind.WEIGHTED_MAJORITY:
            return AggregationProtocol.weighted_majority(ConfigManager.aggregation_weights(self.config))
        if kind is ProtocolKind.UNION:
            return AggregationProtocol.union(ConfigManager.class_x(self.config))
        return AggregationProtocol(kind)

    def cmd_mc(self):
        cfg = self.config
        mc = cfg.mc
        _, _, test = self.load_dataset()
        scans = test[:mc.scans] if mc.scans else test
        network = self.load_finetuned()
        protocol = self.protocol()
        c = cfg.data.num_classes
        heat_class = c - 1 if mc.heatmap_class is None else mc.heatmap_class
        folder = self.out / "mc"

        preds = []
        for i, (volume, truth) in enumerate(scans):
            name = f"test_{i + 1:04d}"
            ens = MCDropoutEngine.mc_sample(network, volume, mc.samples, mc.enc_rate, mc.dec_rate,
                                            mc.seed + i, self.threads)
            labels = MCDropoutEngine.aggregate(ens, protocol)
            VolumeManager.save_labels(labels, folder / f"{name}_{protocol.kind.value}.lbl")
            preds.append(labels)
            for p in mc.percentiles:
                heat = MCDropoutEngine.percentile_heatmap(ens, heat_class, p)
                VolumeManager.save_volume(heat, folder / f"{name}_p{p:g}_c{heat_class}.vol")
                rgb = VisualEngine.render_slice(heat, mc.render_slice, truth if heat_class > 0 else None, heat_class)
                VisualEngine.write_ppm(rgb, folder / f"{name}_p{p:g}_c{heat_class}.ppm")
            VolumeManager.save_volume(Volume(ens.mean_probs()[heat_class]), folder / f"{name}_mean_c{heat_class}.vol")
            VolumeManager.save_volume(Volume(ens.variance()[heat_class]), folder / f"{name}_variance_c{heat_class}.vol")
            VolumeManager.save_volume(Volume(ens.predictive_entropy()), folder / f"{name}_entropy.vol")

        dice = EvaluationEngine.per_class_dice(preds, [lbl for _, lbl in scans], c)
        report = ExperimentReport()
        report.add(ExperimentRow("mc", "finetuned", cfg.finetune.fraction, mc.enc_rate, mc.dec_rate,
                                 protocol.label, dice, mc.seed))
        report.to_csv(folder / "report.csv")
        logger.info(f"✅ MC_COMPLETE: T={mc.samples} {protocol.label} mean fg dice {report.rows[0].mean_foreground_dice:.4f}")
        return report

    # =============================================================
    # 6. SWEEP
    # =============================================================
    def cmd_sweep(self):
        cfg = self.config
        sweeps = cfg.eval.sweeps
        needs_pretrained = "fraction" in sweeps or ("aggregation" in sweeps and cfg.eval.aggregation_fractions)
        init = cfg.finetune.init if cfg.finetune.init.startswith("pretrained:") else None
        ctx = self.context(self.load_pretrained(init) if needs_pretrained else None)
        folder = self.out / "sweep"
        reports = {}

        if "fraction" in sweeps:
            reports["fraction"] = EvaluationEngine.fraction_sweep(ctx)
        if {"dropout", "aggregation", "mc_benefit"} & set(sweeps):
            finetuned = self.load_finetuned()
            if "dropout" in sweeps:
                reports["dropout"] = EvaluationEngine.dropout_config_sweep(ctx, finetuned)
            if "aggregation" in sweeps:
                fractions = cfg.eval.aggregation_fractions
                if fractions:
                    networks = {f: EvaluationEngine.train_arm(ctx, "finetuned", f, cfg.finetune.seed) for f in fractions}
                else:
                    networks = {cfg.finetune.fraction: finetuned}
                reports["aggregation"] = EvaluationEngine.aggregation_sweep(ctx, networks)
            if "mc_benefit" in sweeps:
                baseline = EvaluationEngine.train_arm(ctx, "baseline", cfg.finetune.fraction, cfg.finetune.seed)
                reports["mc_benefit"] = EvaluationEngine.mc_benefit_sweep(
                    ctx, {"finetuned": finetuned, "baseline": baseline})
        if "temperature" in sweeps:
            reports["temperature"] = EvaluationEngine.temperature_sweep(ctx)

        for name, report in reports.items():
            report.to_csv(folder / f"{name}.csv")
        logger.info(f"✅ SWEEP_COMPLETE: {', '.join(reports)} -> {folder}")
        return reports

    # =============================================================
    # 7. GRADCHECK
    # =============================================================
    def cmd_gradcheck(self):
        results = run_gradcheck_suite(seed=self.config.pretrain.seed)
        rows = []
        failed = []
        for name, (error, tolerance) in results.items():
            ok = error < tolerance
            rows.append((name, f"{error:.3e}", f"{tolerance:g}", "pass" if ok else "fail"))
            logger.info(f"{'✅' if ok else '❌'} GRADCHECK: {name} max_rel_err={error:.3e} (tol {tolerance:g})")
            if not ok:
                failed.append(name)
        _write_rows(self.out / "gradcheck.csv", ["fragment", "max_relative_error", "tolerance", "status"], rows)
        if failed:
            raise NumericError(f"gradcheck failed for {', '.join(failed)}")
        return results

    def run(self, command):
        if command not in COMMANDS:
            raise VSSLError(f"unknown command '{command}'")
        ConfigManager.save_resolved(self.config, self.out)
        return getattr(self, f"cmd_{command}")()


def run_gradcheck_suite(seed=0):
    """fragment name -> (max relative error, tolerance); float64, dropout off"""
    rng = np.random.default_rng(seed)

    def _away_from_zero(shape):
        x = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return Tensor(x, dtype=np.float64)

    results = {}
    x, w, b = _away_from_zero((4, 8)), Tensor(rng.standard_normal((8, 3)), dtype=np.float64), \
        Tensor(rng.standard_normal(3), dtype=np.float64)
    results["dense"] = (gradcheck(dense, [x, w, b], eps=1e-6), GRADCHECK_OP_TOLERANCE)

    x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)), dtype=np.float64)
    k = Tensor(rng.standard_normal((3, 2, 3, 3, 3)), dtype=np.float64)
    kb = Tensor(rng.standard_normal(3), dtype=np.float64)
    results["conv3d"] = (gradcheck(lambda a, c, d: conv3d(a, c, d, padding=1), [x, k, kb], eps=1e-6),
                         GRADCHECK_OP_TOLERANCE)

    x = Tensor(rng.permutation(64).reshape(1, 1, 4, 4, 4) / 64.0, dtype=np.float64)
    results["maxpool3d"] = (gradcheck(lambda a: maxpool3d(a, 2), [x], eps=1e-6), GRADCHECK_OP_TOLERANCE)
    x = Tensor(rng.standard_normal((1, 2, 2, 2, 2)), dtype=np.float64)
    results["upsample3d_nearest"] = (gradcheck(lambda a: upsample3d_nearest(a, 2), [x], eps=1e-6),
                                     GRADCHECK_OP_TOLERANCE)
    results["relu"] = (gradcheck(relu, [_away_from_zero((3, 5))], eps=1e-6), GRADCHECK_OP_TOLERANCE)
    x = Tensor(rng.standard_normal((2, 3, 2, 2, 2)), dtype=np.float64)
    results["softmax_channels"] = (gradcheck(softmax_channels, [x], eps=1e-6), GRADCHECK_OP_TOLERANCE)

    z = Tensor(rng.standard_normal((8, 5)), dtype=np.float64)
    results["ntxent"] = (gradcheck(lambda a: ContrastiveEngine.ntxent_batch_loss(ContrastiveBatch(a, 0.5)), [z],
                                   eps=1e-6), GRADCHECK_OP_TOLERANCE)

    logits = Tensor(rng.standard_normal((1, 3, 4, 4, 4)), dtype=np.float64)
    target = np.moveaxis(np.eye(3)[rng.integers(0, 3, size=(4, 4, 4))], -1, 0)[None]
    dice_spec = DiceSpec(3)
    results["dice_loss"] = (gradcheck(lambda a: SegmentationEngine.dice_loss(softmax_channels(a), target, dice_spec),
                                      [logits], eps=1e-6), GRADCHECK_OP_TOLERANCE)

    spec = UNetSpec(EncoderSpec(channels=(2, 4), patch_dims=(8, 8, 8)), num_classes=3,
                    encoder_dropout_rate=0.0, decoder_dropout_rate=0.0)
    net = UNet3D(spec, seed=seed).cast(np.float64)
    volume = Tensor(rng.uniform(-1.0, 1.0, size=(1, 1, 8, 8, 8)), dtype=np.float64)
    target = np.moveaxis(np.eye(3)[rng.integers(0, 3, size=(8, 8, 8))], -1, 0)[None]
    params = list(net.params.values())

    def _network(*_):
        return SegmentationEngine.dice_loss(net.forward(volume, DropoutMode.OFF), target, dice_spec)

    results["unet_dice_end_to_end"] = (gradcheck(_network, params, eps=1e-6, max_coords=4, seed=seed),
                                       GRADCHECK_NETWORK_TOLERANCE)
    return results


def build_parser():
    parser = argparse.ArgumentParser(prog="vssl", description="Volumetric contrastive pretraining, "
                                                              "U-Net fine-tuning and MC-dropout inference")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="run config JSON (merged over the preset)")
    parser.add_argument("--out", default="runs/default", help="run directory")
    parser.add_argument("--threads", type=int, default=None, help="worker cap (default: VSSL_THREADS or 1)")
    parser.add_argument("--preset", choices=("desk", "paper"), default=None)
    return parser


def main(argv=None):
    load_dotenv()
    logging.basicConfig(level=ConfigManager.log_level(),
                        format='%(asctime)s - VSSL_PIPELINE - %(name)s - %(message)s')
    args = build_parser().parse_args(argv)
    try:
        user = ConfigManager.load_file(args.config) if args.config else {}
        config = ConfigManager.resolve(user, args.preset)
        threads = args.threads if args.threads is not None else ConfigManager.default_threads()
        PipelineExecutive(config, args.out, threads).run(args.command)
    except VSSLError as exc:
        logger.error(f"❌ COMMAND_FAILED: {args.command}: {exc}")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        logger.error(f"❌ COMMAND_FAILED: {args.command}: {exc}")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
