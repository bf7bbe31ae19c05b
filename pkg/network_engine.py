"""
NETWORK ENGINE
Layer graphs built on the tensor engine.

1. Encoder3D      : conv(3, pad 1) -> relu -> maxpool(2) -> dropout, one block per stage
2. ProjectionHead : dense -> relu -> dense, only used during pretraining
3. UNet3D         : Encoder3D + mirrored decoder (upsample -> concat skip -> conv -> relu -> dropout)
                    + 1x1x1 class conv + channel softmax

No normalization layers anywhere; dropout is the only stochastic layer.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from checkpoint_manager import Checkpoint
from errors import DimensionError, SpecError
from tensor_engine import (DTYPE, DropoutMode, Tensor, concat_channels, conv3d, dense, dropout,
                           maxpool3d, relu, reshape, softmax_channels, upsample3d_nearest)

logger = logging.getLogger("NETWORK_ENGINE")


@dataclass(frozen=True)
class EncoderSpec:
    channels: Tuple[int, ...] = (8, 16, 32)
    patch_dims: Tuple[int, int, int] = (8, 8, 8)
    in_channels: int = 1
    kernel: int = 3
    pool: int = 2

    @property
    def stages(self):
        return len(self.channels)

    @property
    def bottom_dims(self):
        factor = self.pool ** self.stages
        return tuple(d // factor for d in self.patch_dims)

    @property
    def feature_dim(self):
        """Flattened size of the last stage output"""
        return self.channels[-1] * int(np.prod(self.bottom_dims))

    def validate(self, dims=None):
        dims = tuple(dims) if dims is not None else tuple(self.patch_dims)
        if not self.channels or any(c < 1 for c in self.channels):
            raise SpecError(f"encoder channels {self.channels} must be non-empty and positive")
        factor = self.pool ** self.stages
        if any(d % factor or d < factor for d in dims):
            raise DimensionError(f"input dims {dims} not divisible by 2^{self.stages}")
        return self


@dataclass(frozen=True)
class ProjectionHeadSpec:
    hidden_dim: int = 128
    output_dim: int = 64

    def validate(self):
        if self.output_dim < 2 or self.hidden_dim < 1:
            raise SpecError(f"projection head needs output_dim >= 2, got {self.output_dim}")
        return self


@dataclass(frozen=True)
class UNetSpec:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    num_classes: int = 3
    encoder_dropout_rate: float = 0.3
    decoder_dropout_rate: float = 0.0


def _he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


def _param(data, name):
    return Tensor(data, requires_grad=True, name=name)


# =================================================================
# 1. ENCODER
# =================================================================
class Encoder3D:

    def __init__(self, spec: EncoderSpec, params: Dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @staticmethod
    def init_params(spec: EncoderSpec, rng) -> Dict[str, Tensor]:
        params, cin, k = {}, spec.in_channels, spec.kernel
        for i, cout in enumerate(spec.channels):
            params[f"enc.{i}.weight"] = _param(_he_normal(rng, (cout, cin, k, k, k), cin * k ** 3), f"enc.{i}.weight")
            params[f"enc.{i}.bias"] = _param(np.zeros(cout, dtype=DTYPE), f"enc.{i}.bias")
            cin = cout
        return params

    def forward(self, x: Tensor, rate=0.0, rng=None, mode=DropoutMode.OFF):
        """Returns (bottom features, pre-pool skip features per stage)"""
        skips = []
        pad = self.spec.kernel // 2
        for i in range(self.spec.stages):
            x = relu(conv3d(x, self.params[f"enc.{i}.weight"], self.params[f"enc.{i}.bias"], padding=pad))
            skips.append(x)
            x = maxpool3d(x, self.spec.pool)
            x = dropout(x, rate, rng, mode)
        return x, skips

    def parameter_names(self):
        return list(self.params)


# =================================================================
# 2. PROJECTION HEAD
# =================================================================
class ProjectionHead:

    def __init__(self, spec: ProjectionHeadSpec, params: Dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @staticmethod
    def init_params(spec: ProjectionHeadSpec, feature_dim, rng) -> Dict[str, Tensor]:
        return {
            "head.0.weight": _param(_he_normal(rng, (feature_dim, spec.hidden_dim), feature_dim), "head.0.weight"),
            "head.0.bias": _param(np.zeros(spec.hidden_dim, dtype=DTYPE), "head.0.bias"),
            "head.1.weight": _param(_he_normal(rng, (spec.hidden_dim, spec.output_dim), spec.hidden_dim), "head.1.weight"),
            "head.1.bias": _param(np.zeros(spec.output_dim, dtype=DTYPE), "head.1.bias"),
        }

    def forward(self, features: Tensor) -> Tensor:
        h = relu(dense(features, self.params["head.0.weight"], self.params["head.0.bias"]))
        return dense(h, self.params["head.1.weight"], self.params["head.1.bias"])


class ContrastiveNetwork:
    """g_enc followed by the projection head: patches [N,1,d,h,w] -> latents [N,K]"""

    def __init__(self, encoder_spec: EncoderSpec, head_spec: ProjectionHeadSpec, seed=0):
        encoder_spec.validate()
        head_spec.validate()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder3D(encoder_spec, Encoder3D.init_params(encoder_spec, rng))
        self.head = ProjectionHead(head_spec, ProjectionHead.init_params(head_spec, encoder_spec.feature_dim, rng))

    @property
    def params(self) -> Dict[str, Tensor]:
        return {**self.encoder.params, **self.head.params}

    def forward(self, patches: Tensor) -> Tensor:
        bottom, _ = self.encoder.forward(patches)
        flat = reshape(bottom, (bottom.shape[0], -1))
        return self.head.forward(flat)

    def to_checkpoint(self, extra_meta=None) -> Checkpoint:
        meta = {
            "kind": "contrastive",
            "channels": list(self.encoder.spec.channels),
            "in_channels": self.encoder.spec.in_channels,
            "head": [self.head.spec.hidden_dim, self.head.spec.output_dim],
        }
        meta.update(extra_meta or {})
        return Checkpoint({name: t.data.copy() for name, t in self.params.items()}, meta)


# =================================================================
# 3. U-NET
# =================================================================
class UNet3D:

    def __init__(self, spec: UNetSpec, seed=0):
        if spec.num_classes < 2:
            raise SpecError(f"U-Net needs at least 2 classes, got {spec.num_classes}")
        spec.encoder.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.encoder = Encoder3D(spec.encoder, Encoder3D.init_params(spec.encoder, rng))
        self.decoder_params = self._init_decoder(spec, rng)

    @staticmethod
    def _init_decoder(spec: UNetSpec, rng) -> Dict[str, Tensor]:
        params, k = {}, spec.encoder.kernel
        channels = spec.encoder.channels
        cin = channels[-1]
        for j, skip_c in enumerate(reversed(channels)):
            fan = cin + skip_c
            params[f"dec.{j}.weight"] = _param(_he_normal(rng, (skip_c, fan, k, k, k), fan * k ** 3), f"dec.{j}.weight")
            params[f"dec.{j}.bias"] = _param(np.zeros(skip_c, dtype=DTYPE), f"dec.{j}.bias")
            cin = skip_c
        c0 = channels[0]
        params["out.weight"] = _param(_he_normal(rng, (spec.num_classes, c0, 1, 1, 1), c0), "out.weight")
        params["out.bias"] = _param(np.zeros(spec.num_classes, dtype=DTYPE), "out.bias")
        return params

    @property
    def params(self) -> Dict[str, Tensor]:
        return {**self.encoder.params, **self.decoder_params}

    def encoder_parameter_names(self) -> List[str]:
        return self.encoder.parameter_names()

    def forward(self, x: Tensor, mode=DropoutMode.OFF, enc_rate=None, dec_rate=None,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """[N,1,D,H,W] -> per-voxel class probabilities [N,C,D,H,W]"""
        if x.ndim != 5:
            raise DimensionError(f"U-Net input must be [N,C,D,H,W], got {x.shape}")
        self.spec.encoder.validate(x.shape[2:])
        enc_rate = self.spec.encoder_dropout_rate if enc_rate is None else enc_rate
        dec_rate = self.spec.decoder_dropout_rate if dec_rate is None else dec_rate
        pad = self.spec.encoder.kernel // 2

        h, skips = self.encoder.forward(x, enc_rate, rng, mode)
        for j, skip in enumerate(reversed(skips)):
            h = upsample3d_nearest(h, self.spec.encoder.pool)
            h = concat_channels([h, skip])
            h = relu(conv3d(h, self.decoder_params[f"dec.{j}.weight"], self.decoder_params[f"dec.{j}.bias"],
                            padding=pad))
            h = dropout(h, dec_rate, rng, mode)
        logits = conv3d(h, self.decoder_params["out.weight"], self.decoder_params["out.bias"])
        return softmax_channels(logits)

    def cast(self, dtype):
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    # =============================================================
    # CHECKPOINTS
    # =============================================================
    def to_checkpoint(self, extra_meta=None) -> Checkpoint:
        meta = {
            "kind": "unet",
            "channels": list(self.spec.encoder.channels),
            "in_channels": self.spec.encoder.in_channels,
            "classes": self.spec.num_classes,
        }
        meta.update(extra_meta or {})
        return Checkpoint({name: t.data.astype(DTYPE).copy() for name, t in self.params.items()}, meta)

    def _check_meta(self, checkpoint: Checkpoint):
        meta = checkpoint.meta
        if "channels" in meta and tuple(meta["channels"]) != tuple(self.spec.encoder.channels):
            raise SpecError(f"checkpoint encoder channels {meta['channels']} != {list(self.spec.encoder.channels)}")

    def _assign(self, checkpoint: Checkpoint, names):
        params = self.params
        for name in names:
            if name not in checkpoint.params:
                raise SpecError(f"checkpoint is missing parameter '{name}'")
            value = checkpoint.params[name]
            if value.shape != params[name].shape:
                raise SpecError(f"'{name}': checkpoint shape {value.shape} != network {params[name].shape}")
            params[name].data = np.array(value, dtype=DTYPE)

    def load_encoder(self, checkpoint: Checkpoint):
        """Copy g_enc weights from a pretraining (or U-Net) checkpoint; the projection head is discarded"""
        self._check_meta(checkpoint)
        self._assign(checkpoint, self.encoder_parameter_names())
        logger.info(f"🧬 ENCODER_LOADED: {len(self.encoder_parameter_names())} tensors "
                    f"from {checkpoint.meta.get('kind', 'unknown')} checkpoint")
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, spec: UNetSpec):
        meta = checkpoint.meta
        if meta.get("kind") not in (None, "unet"):
            raise SpecError(f"expected a U-Net checkpoint, got kind '{meta.get('kind')}'")
        if "classes" in meta and int(meta["classes"]) != spec.num_classes:
            raise SpecError(f"checkpoint has {meta['classes']} classes, spec asks for {spec.num_classes}")
        net = cls(spec)
        net._check_meta(checkpoint)
        net._assign(checkpoint, list(net.params))
        return net
