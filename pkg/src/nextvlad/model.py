"""Two-stream video classifier.

Video and audio frames are aggregated separately (NetVLAD or NeXtVLAD per
stream), the flat descriptors are concatenated, passed through dropout and
one shared reduction layer to the hidden size, gated by a
squeeze-excitation-style context block, and classified by a single affine
layer into per-class logits (sigmoid belongs to the loss).  Optionally the
video features are rescaled by sqrt of the PCA eigenvalues first, undoing
the whitening that would otherwise flatten per-dimension variance before
the distance-based encoding.

A gated mixture of three such models, with the gate fed by the masked mean
of the raw input frames, provides the ensemble logits used for on-the-fly
distillation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng
from .vlad import (
    BatchNormParams,
    init_normal,
    FrameBatchView,
    NetVladConfig,
    NetVladCore,
    NeXtVladConfig,
    NeXtVladCore,
    ReduceHead,
    netvlad_descriptor,
    nextvlad_descriptor,
)

NUM_EXPERTS = 3


@dataclass(frozen=True)
class Eigenvalues:
    """Per-dimension PCA eigenvalues; must be strictly positive."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 1:
            raise ValueError(f"eigenvalues must be 1-d, got shape {self.values.shape}")
        bad = np.nonzero(~(self.values > 0))[0]
        if bad.size:
            raise ValueError(
                f"eigenvalue at index {bad[0]} is {self.values[bad[0]]!r}, must be > 0")

    def __len__(self) -> int:
        return len(self.values)


def reverse_whitening(x: Tensor, eig: Eigenvalues) -> Tensor:
    """Multiply each feature dimension by sqrt of its eigenvalue."""
    if x.shape[-1] != len(eig):
        raise ValueError(
            f"feature dim {x.shape[-1]} != eigenvalue count {len(eig)}")
    scale = Tensor(np.sqrt(eig.values).astype(x.dtype))
    return x * scale


@dataclass(frozen=True)
class ModelConfig:
    video_dim: int
    audio_dim: int
    video_vlad: Union[NetVladConfig, NeXtVladConfig]
    audio_vlad: Union[NetVladConfig, NeXtVladConfig]
    hidden_dim: int
    se_ratio: int
    num_classes: int
    dropout_rate: float = 0.5
    reverse_whitening: bool = False

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.hidden_dim % self.se_ratio != 0:
            raise ValueError(
                f"se_ratio {self.se_ratio} must divide hidden_dim {self.hidden_dim}")
        if self.video_vlad.input_dim != self.video_dim:
            raise ValueError("video_vlad.input_dim != video_dim")
        if self.audio_vlad.input_dim != self.audio_dim:
            raise ValueError("audio_vlad.input_dim != audio_dim")
        for stream in (self.video_vlad, self.audio_vlad):
            if stream.hidden_dim != self.hidden_dim:
                raise ValueError("per-stream hidden_dim must equal model hidden_dim")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def concat_dim(self) -> int:
        return self.video_vlad.descriptor_dim + self.audio_vlad.descriptor_dim


@dataclass
class SecgParams:
    """Squeeze-excitation context gate: FC -> BN -> ReLU -> FC -> BN -> sigmoid."""

    fc1_w: Tensor  # (F, F/r)
    fc1_b: Tensor
    bn1: BatchNormParams
    fc2_w: Tensor  # (F/r, F)
    fc2_b: Tensor
    bn2: BatchNormParams

    @staticmethod
    def create(features: int, ratio: int, rng: Optional[Rng], dtype=np.float32) -> "SecgParams":
        if features % ratio != 0:
            raise ValueError(f"ratio {ratio} must divide feature size {features}")
        squeezed = features // ratio
        return SecgParams(
            fc1_w=ad.parameter(init_normal(rng, (features, squeezed), np.sqrt(2.0 / features), dtype)),
            fc1_b=ad.parameter(np.zeros(squeezed, dtype=dtype)),
            bn1=BatchNormParams.create(squeezed, dtype),
            fc2_w=ad.parameter(init_normal(rng, (squeezed, features), np.sqrt(2.0 / squeezed), dtype)),
            fc2_b=ad.parameter(np.zeros(features, dtype=dtype)),
            bn2=BatchNormParams.create(features, dtype),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.fc1_w": self.fc1_w, f"{prefix}.fc1_b": self.fc1_b,
               f"{prefix}.fc2_w": self.fc2_w, f"{prefix}.fc2_b": self.fc2_b}
        out.update(self.bn1.named_parameters(f"{prefix}.bn1"))
        out.update(self.bn2.named_parameters(f"{prefix}.bn2"))
        return out

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out = self.bn1.named_buffers(f"{prefix}.bn1")
        out.update(self.bn2.named_buffers(f"{prefix}.bn2"))
        return out

    def weight_census(self) -> int:
        return self.fc1_w.size + self.fc2_w.size


def se_context_gating(x: Tensor, params: SecgParams, training: bool = False) -> Tensor:
    """Elementwise-gate ``x`` by a bottlenecked sigmoid excitation of itself."""
    if x.shape[-1] != params.fc1_w.shape[0]:
        raise ValueError(f"feature dim {x.shape[-1]} != gate dim {params.fc1_w.shape[0]}")
    h = params.bn1(ad.matmul(x, params.fc1_w) + params.fc1_b, training)
    h = ad.relu(h)
    h = params.bn2(ad.matmul(h, params.fc2_w) + params.fc2_b, training)
    gate = ad.sigmoid(h)
    return x * gate


@dataclass
class ModelParams:
    config: ModelConfig
    video_core: Union[NetVladCore, NeXtVladCore]
    audio_core: Union[NetVladCore, NeXtVladCore]
    reduce: ReduceHead  # shared across streams: (concat_dim, H)
    secg: SecgParams
    classifier_w: Tensor  # (H, C)
    classifier_b: Tensor  # (C,)
    whiten_scale: Optional[np.ndarray] = None  # sqrt(eigenvalues), video dtype

    @staticmethod
    def create(
        cfg: ModelConfig,
        rng: Optional[Rng],
        dtype=np.float32,
        eigenvalues: Optional[Eigenvalues] = None,
    ) -> "ModelParams":
        if cfg.reverse_whitening:
            if eigenvalues is None:
                raise ValueError("reverse_whitening enabled but no eigenvalues given")
            if len(eigenvalues) != cfg.video_dim:
                raise ValueError(
                    f"eigenvalue count {len(eigenvalues)} != video_dim {cfg.video_dim}")
            scale = np.sqrt(eigenvalues.values).astype(dtype)
        else:
            scale = None
        return ModelParams(
            config=cfg,
            video_core=_make_core(cfg.video_vlad, rng, dtype),
            audio_core=_make_core(cfg.audio_vlad, rng, dtype),
            reduce=ReduceHead.create(cfg.concat_dim, cfg.hidden_dim, rng, dtype),
            secg=SecgParams.create(cfg.hidden_dim, cfg.se_ratio, rng, dtype),
            classifier_w=ad.parameter(
                init_normal(rng, (cfg.hidden_dim, cfg.num_classes), np.sqrt(2.0 / cfg.hidden_dim), dtype)),
            classifier_b=ad.parameter(np.zeros(cfg.num_classes, dtype=dtype)),
            whiten_scale=scale,
        )

    def named_parameters(self, prefix: str = "model") -> dict[str, Tensor]:
        out = self.video_core.named_parameters(f"{prefix}.video")
        out.update(self.audio_core.named_parameters(f"{prefix}.audio"))
        out.update(self.reduce.named_parameters(f"{prefix}.reduce"))
        out.update(self.secg.named_parameters(f"{prefix}.secg"))
        out[f"{prefix}.classifier_w"] = self.classifier_w
        out[f"{prefix}.classifier_b"] = self.classifier_b
        return out

    def named_buffers(self, prefix: str = "model") -> dict[str, np.ndarray]:
        out = self.reduce.named_buffers(f"{prefix}.reduce")
        out.update(self.secg.named_buffers(f"{prefix}.secg"))
        if self.whiten_scale is not None:
            out[f"{prefix}.whiten_scale"] = self.whiten_scale
        return out

    def classifier_weights(self) -> list[Tensor]:
        """Tensors covered by the classifier L2 regularizer."""
        return [self.classifier_w]

    def weight_census(self) -> int:
        return (
            self.video_core.weight_census()
            + self.audio_core.weight_census()
            + self.reduce.weight_census()
            + self.secg.weight_census()
            + self.classifier_w.size
        )


def _make_core(cfg, rng, dtype):
    if isinstance(cfg, NeXtVladConfig):
        return NeXtVladCore.create(cfg, rng, dtype)
    return NetVladCore.create(cfg, rng, dtype)


def _descriptor(view: FrameBatchView, core) -> Tensor:
    if isinstance(core, NeXtVladCore):
        return nextvlad_descriptor(view, core)
    return netvlad_descriptor(view, core)


def model_forward(
    batch,
    params: ModelParams,
    training: bool = False,
    rng: Optional[Rng] = None,
) -> Tensor:
    """Logits (B, C) for a batch with ``.video`` and ``.audio`` frame views.

    ``rng`` feeds the dropout mask and is only consulted in training mode
    with a nonzero dropout rate.
    """
    cfg = params.config
    video = batch.video
    if params.whiten_scale is not None:
        scaled = video.frames * Tensor(params.whiten_scale.astype(video.frames.dtype))
        video = FrameBatchView(frames=scaled, mask=video.mask, lengths=video.lengths)

    video_desc = _descriptor(video, params.video_core)
    audio_desc = _descriptor(batch.audio, params.audio_core)
    joint = ad.concat([video_desc, audio_desc], axis=1)

    if training and cfg.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("training with dropout needs an rng")
        joint = ad.dropout(joint, cfg.dropout_rate, rng, training=True)

    hidden = params.reduce(joint, training)
    gated = se_context_gating(hidden, params.secg, training)
    return ad.matmul(gated, params.classifier_w) + params.classifier_b


@dataclass
class MixtureParams:
    """Three independent experts plus a softmax gate over mean input features."""

    experts: list = field(default_factory=list)
    gate_w: Optional[Tensor] = None  # (video_dim + audio_dim, 3)
    gate_b: Optional[Tensor] = None  # (3,)

    @staticmethod
    def create(
        cfg: ModelConfig,
        rng: Optional[Rng],
        dtype=np.float32,
        eigenvalues: Optional[Eigenvalues] = None,
    ) -> "MixtureParams":
        experts = [ModelParams.create(cfg, rng, dtype, eigenvalues) for _ in range(NUM_EXPERTS)]
        gate_in = cfg.video_dim + cfg.audio_dim
        return MixtureParams(
            experts=experts,
            gate_w=ad.parameter(init_normal(rng, (gate_in, NUM_EXPERTS), np.sqrt(2.0 / gate_in), dtype)),
            gate_b=ad.parameter(np.zeros(NUM_EXPERTS, dtype=dtype)),
        )

    @property
    def config(self) -> ModelConfig:
        return self.experts[0].config

    def named_parameters(self, prefix: str = "mixture") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, e in enumerate(self.experts):
            out.update(e.named_parameters(f"{prefix}.expert{i}"))
        out[f"{prefix}.gate_w"] = self.gate_w
        out[f"{prefix}.gate_b"] = self.gate_b
        return out

    def named_buffers(self, prefix: str = "mixture") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, e in enumerate(self.experts):
            out.update(e.named_buffers(f"{prefix}.expert{i}"))
        return out

    def classifier_weights(self) -> list[Tensor]:
        return [t for e in self.experts for t in e.classifier_weights()]

    def weight_census(self) -> int:
        return sum(e.weight_census() for e in self.experts) + self.gate_w.size


def _masked_frame_mean(view: FrameBatchView) -> Tensor:
    """Mean over valid frames, (B, N); zero vector when nothing is valid."""
    b, m, _ = view.frames.shape
    masked = view.frames * view.mask.reshape((b, m, 1))
    total = ad.reduce_sum(masked, axes=1)  # (B, N)
    count = ad.reduce_sum(view.mask, axes=1, keepdims=True)  # (B, 1)
    return total / ad.clip_min(count, 1.0)


def mixture_forward(
    batch,
    mix: MixtureParams,
    training: bool = False,
    rng: Optional[Rng] = None,
) -> tuple[list[Tensor], Tensor, Tensor]:
    """Run all experts and their gate.

    Returns (expert_logits, mixture_logits, gates); mixture logits are the
    gate-weighted sum of expert logits, the gate is a softmax over a linear
    map of the mask-aware mean of the raw concatenated input frames.
    """
    expert_logits = [model_forward(batch, e, training, rng) for e in mix.experts]

    mean_features = ad.concat(
        [_masked_frame_mean(batch.video), _masked_frame_mean(batch.audio)], axis=1)
    gates = ad.softmax(ad.matmul(mean_features, mix.gate_w) + mix.gate_b, axis=-1)  # (B, 3)

    mixture = None
    for m, logits in enumerate(expert_logits):
        contrib = ad.narrow(gates, axis=1, start=m, length=1) * logits
        mixture = contrib if mixture is None else mixture + contrib
    return expert_logits, mixture, gates
