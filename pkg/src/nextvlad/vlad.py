"""NetVLAD and NeXtVLAD frame aggregation.

Both layers encode a batch of padded frame features (B, M, N) into a fixed
video-level descriptor by summing soft-assigned residuals against learned
cluster anchors, intra-normalizing each cluster block, and reducing to a
hidden size through an affine layer plus batch norm.  NeXtVLAD first expands
each frame by a width multiplier, splits it into groups that share one
low-dimensional anchor table, and weights every group's contribution with a
sigmoid attention gate, which divides the descriptor (and the dominant
reduction layer) by the group count.

Padding is handled by a {0,1} mask multiplied into the assignment weights,
so appended padding frames can hold arbitrary finite values without
affecting the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .rng import Rng

INTRA_NORM_EPS = 1e-12

# upper bound on M * G * K * (lam N / G) accepted by the loop reference
REFERENCE_SIZE_BOUND = 100_000


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetVladConfig:
    input_dim: int
    clusters: int
    hidden_dim: int

    def __post_init__(self):
        for name in ("input_dim", "clusters", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"NetVladConfig.{name} must be >= 1")

    @property
    def descriptor_dim(self) -> int:
        return self.input_dim * self.clusters


@dataclass(frozen=True)
class NeXtVladConfig:
    input_dim: int
    clusters: int
    hidden_dim: int
    groups: int
    expansion: int = 2

    def __post_init__(self):
        for name in ("input_dim", "clusters", "hidden_dim", "groups", "expansion"):
            if getattr(self, name) < 1:
                raise ValueError(f"NeXtVladConfig.{name} must be >= 1")
        if (self.expansion * self.input_dim) % self.groups != 0:
            raise ValueError(
                f"expanded dim {self.expansion * self.input_dim} "
                f"not divisible by groups={self.groups}")

    @property
    def expanded_dim(self) -> int:
        return self.expansion * self.input_dim

    @property
    def group_dim(self) -> int:
        return self.expanded_dim // self.groups

    @property
    def descriptor_dim(self) -> int:
        return self.clusters * self.group_dim


VladConfig = Union[NetVladConfig, NeXtVladConfig]


# ---------------------------------------------------------------------------
# closed-form parameter counts (weights only: no biases, no batch norm)
# ---------------------------------------------------------------------------


def param_count_netvlad(cfg: NetVladConfig) -> int:
    """Weight count of the NetVLAD block: N*K*(H+2).

    assignment (K x N) + anchors (K x N) + reduction (N*K x H).
    """
    return cfg.input_dim * cfg.clusters * (cfg.hidden_dim + 2)


def param_count_nextvlad(cfg: NeXtVladConfig) -> int:
    """Weight count of the NeXtVLAD block, as exact integer arithmetic:

    expansion N x lamN + attention lamN x G + assignment lamN x (G*K)
    + shared anchors K x (lamN/G) + reduction (lamN*K/G) x H.
    """
    lam_n = cfg.expanded_dim
    d = cfg.group_dim
    return (
        lam_n * cfg.input_dim
        + lam_n * cfg.groups
        + lam_n * cfg.groups * cfg.clusters
        + cfg.clusters * d
        + cfg.clusters * d * cfg.hidden_dim
    )


# ---------------------------------------------------------------------------
# parameter bundles
# ---------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState

    @staticmethod
    def create(num_features: int, dtype=np.float32) -> "BatchNormParams":
        return BatchNormParams(
            gamma=ad.parameter(np.ones(num_features, dtype=dtype)),
            beta=ad.parameter(np.zeros(num_features, dtype=dtype)),
            state=BatchNormState(num_features, dtype=dtype),
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.state, training)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.running_mean": self.state.running_mean,
            f"{prefix}.running_var": self.state.running_var,
        }


def init_normal(rng: Optional[Rng], shape, std: float, dtype) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    return (rng.normal(shape) * std).astype(dtype)


@dataclass
class NetVladCore:
    """Assignment and anchor weights of a NetVLAD block (no reduction)."""

    assign_w: Tensor  # (K, N)
    assign_b: Tensor  # (K,)
    anchors: Tensor  # (K, N)

    @staticmethod
    def create(cfg: NetVladConfig, rng: Optional[Rng], dtype=np.float32) -> "NetVladCore":
        n, k = cfg.input_dim, cfg.clusters
        return NetVladCore(
            assign_w=ad.parameter(init_normal(rng, (k, n), np.sqrt(2.0 / n), dtype)),
            assign_b=ad.parameter(np.zeros(k, dtype=dtype)),
            anchors=ad.parameter(init_normal(rng, (k, n), 1.0 / np.sqrt(n), dtype)),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.assign_w": self.assign_w,
            f"{prefix}.assign_b": self.assign_b,
            f"{prefix}.anchors": self.anchors,
        }

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {}

    def weight_census(self) -> int:
        return self.assign_w.size + self.anchors.size


@dataclass
class NeXtVladCore:
    """Expansion, attention, assignment and anchor weights of a NeXtVLAD block."""

    expand_w: Tensor  # (N, lamN)
    expand_b: Tensor  # (lamN,)
    attn_w: Tensor  # (lamN, G)
    attn_b: Tensor  # (G,)
    assign_w: Tensor  # (lamN, G*K)
    assign_b: Tensor  # (G*K,)
    anchors: Tensor  # (K, lamN/G), shared across groups
    groups: int

    @staticmethod
    def create(cfg: NeXtVladConfig, rng: Optional[Rng], dtype=np.float32) -> "NeXtVladCore":
        n, lam_n, g, k, d = cfg.input_dim, cfg.expanded_dim, cfg.groups, cfg.clusters, cfg.group_dim
        return NeXtVladCore(
            expand_w=ad.parameter(init_normal(rng, (n, lam_n), np.sqrt(2.0 / n), dtype)),
            expand_b=ad.parameter(np.zeros(lam_n, dtype=dtype)),
            attn_w=ad.parameter(init_normal(rng, (lam_n, g), np.sqrt(2.0 / lam_n), dtype)),
            attn_b=ad.parameter(np.zeros(g, dtype=dtype)),
            assign_w=ad.parameter(init_normal(rng, (lam_n, g * k), np.sqrt(2.0 / lam_n), dtype)),
            assign_b=ad.parameter(np.zeros(g * k, dtype=dtype)),
            anchors=ad.parameter(init_normal(rng, (k, d), 1.0 / np.sqrt(d), dtype)),
            groups=g,
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.expand_w": self.expand_w,
            f"{prefix}.expand_b": self.expand_b,
            f"{prefix}.attn_w": self.attn_w,
            f"{prefix}.attn_b": self.attn_b,
            f"{prefix}.assign_w": self.assign_w,
            f"{prefix}.assign_b": self.assign_b,
            f"{prefix}.anchors": self.anchors,
        }

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {}

    def weight_census(self) -> int:
        return (
            self.expand_w.size
            + self.attn_w.size
            + self.assign_w.size
            + self.anchors.size
        )


VladCore = Union[NetVladCore, NeXtVladCore]


@dataclass
class ReduceHead:
    """Affine reduction of a flat descriptor to the hidden size, plus BN."""

    w: Tensor  # (descriptor_dim, H)
    b: Tensor  # (H,)
    bn: BatchNormParams

    @staticmethod
    def create(in_dim: int, hidden_dim: int, rng: Optional[Rng], dtype=np.float32) -> "ReduceHead":
        return ReduceHead(
            w=ad.parameter(init_normal(rng, (in_dim, hidden_dim), np.sqrt(2.0 / in_dim), dtype)),
            b=ad.parameter(np.zeros(hidden_dim, dtype=dtype)),
            bn=BatchNormParams.create(hidden_dim, dtype),
        )

    def __call__(self, flat: Tensor, training: bool) -> Tensor:
        return self.bn(ad.matmul(flat, self.w) + self.b, training)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w, f"{prefix}.b": self.b}
        out.update(self.bn.named_parameters(f"{prefix}.bn"))
        return out

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return self.bn.named_buffers(f"{prefix}.bn")

    def weight_census(self) -> int:
        return self.w.size


@dataclass
class NetVladParams:
    core: NetVladCore
    head: ReduceHead

    @staticmethod
    def create(cfg: NetVladConfig, rng: Optional[Rng], dtype=np.float32) -> "NetVladParams":
        return NetVladParams(
            core=NetVladCore.create(cfg, rng, dtype),
            head=ReduceHead.create(cfg.descriptor_dim, cfg.hidden_dim, rng, dtype),
        )

    def named_parameters(self, prefix: str = "netvlad") -> dict[str, Tensor]:
        out = self.core.named_parameters(f"{prefix}.core")
        out.update(self.head.named_parameters(f"{prefix}.head"))
        return out

    def named_buffers(self, prefix: str = "netvlad") -> dict[str, np.ndarray]:
        return self.head.named_buffers(f"{prefix}.head")

    def weight_census(self) -> int:
        return self.core.weight_census() + self.head.weight_census()


@dataclass
class NeXtVladParams:
    core: NeXtVladCore
    head: ReduceHead

    @staticmethod
    def create(cfg: NeXtVladConfig, rng: Optional[Rng], dtype=np.float32) -> "NeXtVladParams":
        return NeXtVladParams(
            core=NeXtVladCore.create(cfg, rng, dtype),
            head=ReduceHead.create(cfg.descriptor_dim, cfg.hidden_dim, rng, dtype),
        )

    def named_parameters(self, prefix: str = "nextvlad") -> dict[str, Tensor]:
        out = self.core.named_parameters(f"{prefix}.core")
        out.update(self.head.named_parameters(f"{prefix}.head"))
        return out

    def named_buffers(self, prefix: str = "nextvlad") -> dict[str, np.ndarray]:
        return self.head.named_buffers(f"{prefix}.head")

    def weight_census(self) -> int:
        return self.core.weight_census() + self.head.weight_census()


# ---------------------------------------------------------------------------
# batch view
# ---------------------------------------------------------------------------


@dataclass
class FrameBatchView:
    """Padded frames (B, M_max, N), a {0,1} validity mask (B, M_max) and the
    true frame counts.  Consumers must ignore masked positions."""

    frames: Tensor
    mask: Tensor
    lengths: np.ndarray

    @staticmethod
    def from_lengths(frames, lengths) -> "FrameBatchView":
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        lengths = np.asarray(lengths, dtype=np.int64)
        b, m_max = frames.shape[0], frames.shape[1]
        if lengths.shape != (b,):
            raise ValueError(f"lengths shape {lengths.shape} != ({b},)")
        mask = (np.arange(m_max)[None, :] < lengths[:, None]).astype(frames.dtype)
        return FrameBatchView(frames=frames, mask=Tensor(mask), lengths=lengths)

    @property
    def batch_size(self) -> int:
        return self.frames.shape[0]

    @property
    def max_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[2]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def netvlad_aggregate(view: FrameBatchView, core: NetVladCore) -> Tensor:
    """Masked residual aggregation, pre-normalization: (B, K, N)."""
    b, m, n = view.frames.shape
    k = core.assign_w.shape[0]
    if n != core.assign_w.shape[1]:
        raise ValueError(f"frame dim {n} != assignment dim {core.assign_w.shape[1]}")
    logits = ad.einsum2("bmn,kn->bmk", view.frames, core.assign_w) + core.assign_b
    alpha = ad.softmax(logits, axis=-1)
    weights = alpha * view.mask.reshape((b, m, 1))
    weighted_sum = ad.einsum2("bmk,bmn->bkn", weights, view.frames)
    total = ad.reduce_sum(weights, axes=1)  # (B, K)
    anchor_part = total.reshape((b, k, 1)) * core.anchors.reshape((1, k, n))
    return weighted_sum - anchor_part


def netvlad_descriptor(view: FrameBatchView, core: NetVladCore) -> Tensor:
    """Intra-normalized flat descriptor: (B, K*N), cluster-major."""
    agg = netvlad_aggregate(view, core)
    b, k, n = agg.shape
    normed = ad.l2_normalize(agg, axis=-1, eps=INTRA_NORM_EPS)
    return normed.reshape((b, k * n))


def netvlad_forward(view: FrameBatchView, params: NetVladParams, training: bool = False) -> Tensor:
    """Full NetVLAD block: descriptor, reduction to hidden size, batch norm."""
    return params.head(netvlad_descriptor(view, params.core), training)


def nextvlad_aggregate(view: FrameBatchView, core: NeXtVladCore) -> Tensor:
    """Masked grouped residual aggregation, pre-normalization: (B, K, lamN/G)."""
    b, m, n = view.frames.shape
    if n != core.expand_w.shape[0]:
        raise ValueError(f"frame dim {n} != expansion dim {core.expand_w.shape[0]}")
    g = core.groups
    lam_n = core.expand_w.shape[1]
    gk = core.assign_w.shape[1]
    k = gk // g
    d = lam_n // g

    flat = view.frames.reshape((b * m, n))
    expanded = ad.matmul(flat, core.expand_w) + core.expand_b  # (B*M, lamN)

    attn = ad.sigmoid(ad.matmul(expanded, core.attn_w) + core.attn_b)  # (B*M, G)
    assign_logits = (ad.matmul(expanded, core.assign_w) + core.assign_b).reshape((b * m, g, k))
    assign = ad.softmax(assign_logits, axis=-1)  # (B*M, G, K)

    weights = (assign * attn.reshape((b * m, g, 1))).reshape((b, m, g, k))
    weights = weights * view.mask.reshape((b, m, 1, 1))

    grouped = expanded.reshape((b, m, g, d))
    weighted_sum = ad.einsum2("bmgk,bmgd->bkd", weights, grouped)
    total = ad.reduce_sum(weights, axes=(1, 2))  # (B, K)
    anchor_part = total.reshape((b, k, 1)) * core.anchors.reshape((1, k, d))
    return weighted_sum - anchor_part


def nextvlad_descriptor(view: FrameBatchView, core: NeXtVladCore) -> Tensor:
    """Intra-normalized flat descriptor: (B, K*lamN/G), cluster-major."""
    agg = nextvlad_aggregate(view, core)
    b, k, d = agg.shape
    normed = ad.l2_normalize(agg, axis=-1, eps=INTRA_NORM_EPS)
    return normed.reshape((b, k * d))


def nextvlad_forward(view: FrameBatchView, params: NeXtVladParams, training: bool = False) -> Tensor:
    """Full NeXtVLAD block: descriptor, reduction to hidden size, batch norm."""
    return params.head(nextvlad_descriptor(view, params.core), training)


# ---------------------------------------------------------------------------
# loop reference (independent oracle)
# ---------------------------------------------------------------------------


def nextvlad_reference(view: FrameBatchView, params: NeXtVladParams) -> np.ndarray:
    """Nested-loop NeXtVLAD forward in float64, inference-mode batch norm.

    Deliberately unvectorized; refuses work above M*G*K*(lamN/G) =
    ``REFERENCE_SIZE_BOUND`` per video.  Serves as the oracle for
    :func:`nextvlad_forward`, which must never share code with it.
    """
    core, head = params.core, params.head
    frames = np.asarray(view.frames.data, dtype=np.float64)
    mask = np.asarray(view.mask.data, dtype=np.float64)
    expand_w = core.expand_w.data.astype(np.float64)
    expand_b = core.expand_b.data.astype(np.float64)
    attn_w = core.attn_w.data.astype(np.float64)
    attn_b = core.attn_b.data.astype(np.float64)
    assign_w = core.assign_w.data.astype(np.float64)
    assign_b = core.assign_b.data.astype(np.float64)
    anchors = core.anchors.data.astype(np.float64)

    b_sz, m, n = frames.shape
    g = core.groups
    lam_n = expand_w.shape[1]
    k = anchors.shape[0]
    d = lam_n // g
    if m * g * k * d > REFERENCE_SIZE_BOUND:
        raise ValueError(
            f"reference size bound exceeded: M*G*K*D = {m * g * k * d} > {REFERENCE_SIZE_BOUND}")

    out = np.zeros((b_sz, head.w.shape[1]), dtype=np.float64)
    for b in range(b_sz):
        # expansion
        xdot = np.zeros((m, lam_n))
        for i in range(m):
            for q in range(lam_n):
                acc = expand_b[q]
                for j in range(n):
                    acc += frames[b, i, j] * expand_w[j, q]
                xdot[i, q] = acc
        # per-frame gates and assignments
        agg = np.zeros((k, d))
        for i in range(m):
            attn = np.zeros(g)
            for gi in range(g):
                z = attn_b[gi]
                for q in range(lam_n):
                    z += xdot[i, q] * attn_w[q, gi]
                attn[gi] = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
            for gi in range(g):
                logits = np.zeros(k)
                for ki in range(k):
                    z = assign_b[gi * k + ki]
                    for q in range(lam_n):
                        z += xdot[i, q] * assign_w[q, gi * k + ki]
                    logits[ki] = z
                zmax = logits.max()
                expz = np.array([math.exp(v - zmax) for v in logits])
                soft = expz / expz.sum()
                for ki in range(k):
                    for j in range(d):
                        residual = xdot[i, gi * d + j] - anchors[ki, j]
                        agg[ki, j] += mask[b, i] * attn[gi] * soft[ki] * residual
        # intra-normalization per cluster
        flat = np.zeros(k * d)
        for ki in range(k):
            norm = math.sqrt(sum(agg[ki, j] ** 2 for j in range(d)))
            denom = max(norm, INTRA_NORM_EPS)
            for j in range(d):
                flat[ki * d + j] = agg[ki, j] / denom
        # reduction + inference batch norm
        w = head.w.data.astype(np.float64)
        bias = head.b.data.astype(np.float64)
        gamma = head.bn.gamma.data.astype(np.float64)
        beta = head.bn.beta.data.astype(np.float64)
        rm = head.bn.state.running_mean.astype(np.float64)
        rv = head.bn.state.running_var.astype(np.float64)
        for h in range(w.shape[1]):
            acc = bias[h]
            for q in range(k * d):
                acc += flat[q] * w[q, h]
            out[b, h] = (acc - rm[h]) / math.sqrt(rv[h] + ad.BATCH_NORM_EPS) * gamma[h] + beta[h]
    return out
