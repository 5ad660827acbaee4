"""Dataset container, bit-exact binary formats, synthetic generator, batching.

File formats (all integers little-endian):

FAV1 dataset
    magic "FAV1", version u32 = 1,
    num_videos u32, visual_dim u32, audio_dim u32, num_classes u32;
    per record: id_len u16, id UTF-8, num_labels u32, label ids u32 each,
    M u32, visual f32 row-major (M x visual_dim), audio f32 row-major
    (M x audio_dim).

EIGV eigenvalues
    magic "EIGV", version u32 = 1, dim u32, dim f64 values.

The synthetic generator plants one unit "concept" vector per class and
stream; every frame of a video is the mean of its labels' concepts plus
gaussian noise, so the labels are linearly recoverable from frame averages
and a desk-scale run has real signal to find.  Generation is a pure
function of the spec (same seed, same bytes).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .model import Eigenvalues
from .rng import Rng
from .vlad import FrameBatchView

DATASET_MAGIC = b"FAV1"
EIGENVALUES_MAGIC = b"EIGV"
FORMAT_VERSION = 1


@dataclass
class VideoRecord:
    video_id: str
    labels: np.ndarray  # sorted unique class ids, uint32
    visual: np.ndarray  # (M, visual_dim) float32
    audio: np.ndarray  # (M, audio_dim) float32

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        self.visual = np.asarray(self.visual, dtype=np.float32)
        self.audio = np.asarray(self.audio, dtype=np.float32)
        if self.visual.ndim != 2 or self.audio.ndim != 2:
            raise ValueError(f"{self.video_id!r}: frame arrays must be 2-d")
        if self.visual.shape[0] < 1:
            raise ValueError(f"{self.video_id!r}: need at least one frame")
        if self.visual.shape[0] != self.audio.shape[0]:
            raise ValueError(f"{self.video_id!r}: visual/audio frame counts differ")

    @property
    def num_frames(self) -> int:
        return self.visual.shape[0]


@dataclass
class Dataset:
    records: list
    num_classes: int
    visual_dim: int
    audio_dim: int

    def __post_init__(self):
        for r in self.records:
            if r.visual.shape[1] != self.visual_dim or r.audio.shape[1] != self.audio_dim:
                raise ValueError(f"{r.video_id!r}: frame dims disagree with dataset dims")
            if r.labels.size and int(r.labels.max()) >= self.num_classes:
                raise ValueError(
                    f"{r.video_id!r}: label {int(r.labels.max())} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# FAV1 io
# ---------------------------------------------------------------------------


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIII", FORMAT_VERSION, len(dataset.records),
                            dataset.visual_dim, dataset.audio_dim, dataset.num_classes))
        for r in dataset.records:
            ident = r.video_id.encode("utf-8")
            f.write(struct.pack("<H", len(ident)))
            f.write(ident)
            f.write(struct.pack("<I", len(r.labels)))
            f.write(r.labels.astype("<u4").tobytes())
            f.write(struct.pack("<I", r.num_frames))
            f.write(r.visual.astype("<f4").tobytes())
            f.write(r.audio.astype("<f4").tobytes())


class _Reader:
    def __init__(self, f, path):
        self.f = f
        self.path = path

    def take(self, n: int) -> bytes:
        buf = self.f.read(n)
        if len(buf) != n:
            raise ValueError(f"{self.path}: truncated file (wanted {n} bytes, got {len(buf)})")
        return buf

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        r = _Reader(f, path)
        if r.take(4) != DATASET_MAGIC:
            raise ValueError(f"{path}: bad magic, not a FAV1 dataset")
        version, num_videos, visual_dim, audio_dim, num_classes = r.unpack("<IIIII")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        records = []
        for _ in range(num_videos):
            (id_len,) = r.unpack("<H")
            video_id = r.take(id_len).decode("utf-8")
            (num_labels,) = r.unpack("<I")
            labels = np.frombuffer(r.take(4 * num_labels), dtype="<u4").copy()
            if labels.size and int(labels.max()) >= num_classes:
                raise ValueError(
                    f"{path}: record {video_id!r} has label {int(labels.max())} "
                    f">= num_classes {num_classes}")
            (m,) = r.unpack("<I")
            visual = np.frombuffer(r.take(4 * m * visual_dim), dtype="<f4")
            audio = np.frombuffer(r.take(4 * m * audio_dim), dtype="<f4")
            records.append(VideoRecord(
                video_id=video_id,
                labels=labels,
                visual=visual.reshape(m, visual_dim).copy(),
                audio=audio.reshape(m, audio_dim).copy(),
            ))
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after last record")
    return Dataset(records=records, num_classes=num_classes,
                   visual_dim=visual_dim, audio_dim=audio_dim)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int
    num_classes: int
    visual_dim: int
    audio_dim: int
    frames_min: int = 8
    frames_max: int = 20
    labels_min: int = 1
    labels_max: int = 3
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.num_videos, self.num_classes, self.visual_dim, self.audio_dim) < 1:
            raise ValueError("num_videos, num_classes and dims must be >= 1")
        if self.frames_min < 1 or self.frames_min > self.frames_max:
            raise ValueError(f"bad frame range [{self.frames_min}, {self.frames_max}]")
        if self.labels_min < 1 or self.labels_min > self.labels_max:
            raise ValueError(f"bad label range [{self.labels_min}, {self.labels_max}]")
        if self.labels_max > self.num_classes:
            raise ValueError(
                f"labels_max {self.labels_max} exceeds num_classes {self.num_classes}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _unit_rows(rng: Rng, rows: int, cols: int) -> np.ndarray:
    m = rng.normal((rows, cols))
    norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
    return m / np.maximum(norms, 1e-12)


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministically generate a planted-concept multi-label dataset."""
    rng = Rng(spec.seed)
    visual_concepts = _unit_rows(rng, spec.num_classes, spec.visual_dim)
    audio_concepts = _unit_rows(rng, spec.num_classes, spec.audio_dim)

    records = []
    for v in range(spec.num_videos):
        n_labels = spec.labels_min + int(rng.integers(1, spec.labels_max - spec.labels_min + 1)[0])
        labels = np.sort(rng.choice_without_replacement(spec.num_classes, n_labels))
        m = spec.frames_min + int(rng.integers(1, spec.frames_max - spec.frames_min + 1)[0])

        visual_base = visual_concepts[labels].mean(axis=0)
        audio_base = audio_concepts[labels].mean(axis=0)
        visual = visual_base[None, :] + spec.noise_sigma * rng.normal((m, spec.visual_dim))
        audio = audio_base[None, :] + spec.noise_sigma * rng.normal((m, spec.audio_dim))

        records.append(VideoRecord(
            video_id=f"v{v:06d}",
            labels=labels.astype(np.uint32),
            visual=visual.astype(np.float32),
            audio=audio.astype(np.float32),
        ))
    return Dataset(records=records, num_classes=spec.num_classes,
                   visual_dim=spec.visual_dim, audio_dim=spec.audio_dim)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    video: FrameBatchView
    audio: FrameBatchView
    labels: Tensor  # (B, C) multi-hot
    video_ids: list

    @property
    def size(self) -> int:
        return len(self.video_ids)


def make_batch(records, max_frames: int, num_classes: int, dtype=np.float32) -> Batch:
    """Pad (or truncate) records to ``max_frames`` and build masks/labels."""
    if not records:
        raise ValueError("empty batch")
    b = len(records)
    visual_dim = records[0].visual.shape[1]
    audio_dim = records[0].audio.shape[1]
    visual = np.zeros((b, max_frames, visual_dim), dtype=dtype)
    audio = np.zeros((b, max_frames, audio_dim), dtype=dtype)
    lengths = np.zeros(b, dtype=np.int64)
    labels = np.zeros((b, num_classes), dtype=dtype)
    for i, r in enumerate(records):
        m = min(r.num_frames, max_frames)
        lengths[i] = m
        visual[i, :m] = r.visual[:m]
        audio[i, :m] = r.audio[:m]
        labels[i, r.labels] = 1.0
    return Batch(
        video=FrameBatchView.from_lengths(visual, lengths),
        audio=FrameBatchView.from_lengths(audio, lengths),
        labels=Tensor(labels),
        video_ids=[r.video_id for r in records],
    )


# ---------------------------------------------------------------------------
# EIGV io
# ---------------------------------------------------------------------------


def write_eigenvalues(eig: Eigenvalues, path) -> None:
    with open(path, "wb") as f:
        f.write(EIGENVALUES_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(eig)))
        f.write(eig.values.astype("<f8").tobytes())


def load_eigenvalues(path, expected_dim: Optional[int] = None) -> Eigenvalues:
    with open(path, "rb") as f:
        r = _Reader(f, path)
        if r.take(4) != EIGENVALUES_MAGIC:
            raise ValueError(f"{path}: bad magic, not an EIGV file")
        version, dim = r.unpack("<II")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        values = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes")
    if expected_dim is not None and dim != expected_dim:
        raise ValueError(f"{path}: {dim} eigenvalues, expected {expected_dim}")
    return Eigenvalues(values)  # positivity (with index) checked by the type
