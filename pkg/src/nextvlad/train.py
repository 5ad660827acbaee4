"""Adam training loop with exponential LR decay, classifier L2, and
bit-exact checkpointing.

Determinism model: every stochastic choice is a pure function of the config
seed and the step counter — the shuffle order of epoch e comes from
``derive_seed(seed, TAG_SHUFFLE, e)`` and the dropout masks of step t from
``derive_seed(seed, TAG_DROPOUT, t)`` — so resuming from a checkpoint needs
no RNG state beyond the global step, and two runs with one seed produce
identical loss trajectories.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, make_batch
from .losses import LossConfig, bce_loss, total_loss
from .metrics import PredictionSet, gap_at_20, topk_predictions
from .model import MixtureParams, ModelParams, mixture_forward, model_forward
from .rng import Rng, derive_seed

TAG_INIT = 0x1A17
TAG_SHUFFLE = 0x5AFF
TAG_DROPOUT = 0xD0D0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig
    base_lr: float = 2e-4
    batch_size: int = 160
    decay_factor: float = 0.8
    decay_every_samples: int = 2_000_000
    lr_staircase: bool = False
    l2_classifier: float = 1e-5
    epochs: int = 5
    max_steps: int = 0  # 0 = derive from epochs
    seed: int = 1
    eval_every: int = 0  # steps; 0 = at each epoch end

    def __post_init__(self):
        if self.base_lr < 0:
            # zero is allowed: a frozen run must be a fixed point
            raise ValueError("base_lr must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.batch_size < 1 or self.decay_every_samples < 1:
            raise ValueError("batch_size and decay_every_samples must be >= 1")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Exponential decay in samples seen; continuous by default, floored to
    a staircase when ``lr_staircase`` is set."""
    if step < 0:
        raise ValueError("step must be >= 0")
    exponent = (step * cfg.batch_size) / cfg.decay_every_samples
    if cfg.lr_staircase:
        exponent = math.floor(exponent)
    return cfg.base_lr * cfg.decay_factor ** exponent


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @staticmethod
    def create(named_params: dict) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(t.data) for k, t in named_params.items()},
            v={k: np.zeros_like(t.data) for k, t in named_params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    ``params`` maps names to tensors, ``grads`` names to arrays (missing or
    None entries count as zero).  A NaN gradient aborts, naming the tensor.
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if np.isnan(g).any():
            raise ValueError(f"NaN gradient for tensor {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_logits(params, batch, training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    if isinstance(params, MixtureParams):
        return mixture_forward(batch, params, training, rng)[1]
    return model_forward(batch, params, training, rng)


def evaluate_gap(
    params,
    dataset: Dataset,
    max_frames: int,
    batch_size: int = 64,
    top_k: int = 20,
) -> float:
    """GAP@k of the model over a dataset, inference mode."""
    preds = PredictionSet()
    k = min(top_k, dataset.num_classes)
    for start in range(0, len(dataset.records), batch_size):
        chunk = dataset.records[start:start + batch_size]
        batch = make_batch(chunk, max_frames, dataset.num_classes)
        scores = ad.sigmoid(predict_logits(params, batch)).data
        classes, confs = topk_predictions(scores, k)
        for i, r in enumerate(chunk):
            preds.add_video(r.video_id, r.labels.tolist(), list(zip(classes[i], confs[i])))
    return gap_at_20(preds)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: Union[ModelParams, MixtureParams]
    adam: AdamState
    global_step: int = 0

    @staticmethod
    def create(params) -> "TrainState":
        return TrainState(params=params, adam=AdamState.create(params.named_parameters()))


@dataclass
class LogRow:
    step: int
    lr: float
    loss: float
    bce: float
    kl: float
    gap: Optional[float] = None

    def csv(self) -> str:
        gap = "" if self.gap is None else repr(self.gap)
        return f"{self.step},{self.lr!r},{self.loss!r},{self.bce!r},{self.kl!r},{gap}"


LOG_HEADER = "step,lr,loss,bce,kl,gap"


def _classifier_l2(params, coefficient: float) -> Tensor:
    reg = None
    for w in params.classifier_weights():
        term = ad.reduce_sum(w * w)
        reg = term if reg is None else reg + term
    return reg * coefficient


def train_loop(
    state: TrainState,
    dataset: Dataset,
    cfg: TrainConfig,
    max_frames: int,
    eval_dataset: Optional[Dataset] = None,
) -> list[LogRow]:
    """Run (or continue) training until the step budget is exhausted.

    Returns one log row per executed step; evaluation rows carry a GAP
    score computed on ``eval_dataset`` (default: the training set).
    """
    records = dataset.records
    if not records:
        raise ValueError("empty dataset")
    n = len(records)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * steps_per_epoch
    is_mixture = isinstance(state.params, MixtureParams)
    gap_source = eval_dataset if eval_dataset is not None else dataset

    rows: list[LogRow] = []
    cached_epoch = -1
    perm = None
    while state.global_step < total_steps:
        epoch = state.global_step // steps_per_epoch
        pos = state.global_step % steps_per_epoch
        if epoch != cached_epoch:
            perm = Rng(derive_seed(cfg.seed, TAG_SHUFFLE, epoch)).permutation(n)
            cached_epoch = epoch
        idx = perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        batch = make_batch([records[i] for i in idx], max_frames, dataset.num_classes)

        lr = lr_schedule(state.global_step, cfg)
        step_rng = Rng(derive_seed(cfg.seed, TAG_DROPOUT, state.global_step))
        named = state.params.named_parameters()
        for t in named.values():
            t.grad = None

        if is_mixture:
            expert_logits, mixture_logits, _ = mixture_forward(
                batch, state.params, training=True, rng=step_rng)
            loss, breakdown = total_loss(expert_logits, mixture_logits, batch.labels, cfg.loss)
            bce_value, kl_value = breakdown.bce_total, breakdown.kl_weighted
        else:
            logits = model_forward(batch, state.params, training=True, rng=step_rng)
            loss = bce_loss(logits, batch.labels)
            bce_value, kl_value = loss.item(), 0.0

        if cfg.l2_classifier > 0:
            loss = loss + _classifier_l2(state.params, cfg.l2_classifier)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise RuntimeError(f"non-finite loss at step {state.global_step}")

        loss.backward()
        grads = {name: t.grad for name, t in named.items()}
        adam_step(named, grads, state.adam, lr)
        state.global_step += 1

        gap = None
        if cfg.eval_every > 0:
            due = state.global_step % cfg.eval_every == 0 or state.global_step == total_steps
        else:
            due = state.global_step % steps_per_epoch == 0 or state.global_step == total_steps
        if due:
            gap = evaluate_gap(state.params, gap_source, max_frames,
                               batch_size=min(cfg.batch_size, 64))
        rows.append(LogRow(step=state.global_step, lr=lr, loss=loss_value,
                           bce=bce_value, kl=kl_value, gap=gap))
    return rows


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    global_step: int
    adam_step: int
    config_echo: str
    tensors: dict


def _gather_tensors(state: TrainState) -> dict:
    out = {name: t.data for name, t in state.params.named_parameters().items()}
    out.update(state.params.named_buffers())
    for name, arr in state.adam.m.items():
        out[f"adam.m.{name}"] = arr
    for name, arr in state.adam.v.items():
        out[f"adam.v.{name}"] = arr
    return out


def save_checkpoint(state: TrainState, path, config_echo: str = "") -> None:
    """Serialize parameters, BN running stats, optimizer moments and the
    config echo; the round-trip is bit-exact."""
    tensors = _gather_tensors(state)
    echo = config_echo.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQQ", CHECKPOINT_VERSION, state.global_step, state.adam.step))
        f.write(struct.pack("<I", len(echo)))
        f.write(echo)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                raise ValueError(f"cannot serialize dtype {arr.dtype} of {name!r}")
            ident = name.encode("utf-8")
            f.write(struct.pack("<H", len(ident)))
            f.write(ident)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> Checkpoint:
    from .data import _Reader

    with open(path, "rb") as f:
        r = _Reader(f, path)
        if r.take(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic, not a checkpoint")
        version, global_step, adam_step = r.unpack("<IQQ")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (echo_len,) = r.unpack("<I")
        echo = r.take(echo_len).decode("utf-8")
        (count,) = r.unpack("<I")
        tensors = {}
        for _ in range(count):
            (name_len,) = r.unpack("<H")
            name = r.take(name_len).decode("utf-8")
            code, ndim = r.unpack("<BB")
            if code not in _CODE_DTYPES:
                raise ValueError(f"{path}: unknown dtype code {code} for {name!r}")
            shape = r.unpack(f"<{ndim}I")
            dtype = _CODE_DTYPES[code]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(r.take(n_bytes), dtype=dtype.newbyteorder("<"))
            tensors[name] = arr.astype(dtype).reshape(shape)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return Checkpoint(global_step=global_step, adam_step=adam_step,
                      config_echo=echo, tensors=tensors)


def apply_checkpoint(state: TrainState, ckpt: Checkpoint) -> None:
    """Load a checkpoint into a freshly built state of the same shape.

    Every parameter, buffer and moment must be present with matching shape
    and dtype; training then continues the saved trajectory exactly.
    """
    expected = _gather_tensors(state)
    for name, target in expected.items():
        if name not in ckpt.tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != target.shape or arr.dtype != target.dtype:
            raise ValueError(
                f"checkpoint tensor {name!r} is {arr.dtype}{arr.shape}, "
                f"expected {target.dtype}{target.shape}")
    named = state.params.named_parameters()
    for name, t in named.items():
        t.data = ckpt.tensors[name].copy()
        t.grad = None
    for name, buf in state.params.named_buffers().items():
        buf[...] = ckpt.tensors[name]
    for name in state.adam.m:
        state.adam.m[name] = ckpt.tensors[f"adam.m.{name}"].copy()
        state.adam.v[name] = ckpt.tensors[f"adam.v.{name}"].copy()
    state.adam.step = ckpt.adam_step
    state.global_step = ckpt.global_step
