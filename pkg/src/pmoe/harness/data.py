"""Datasets: synthetic generators, IDX ingestion, and archive storage."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from ..archive import array_to_text, format_kv, load_archive, parse_kv, save_archive, text_to_array
from ..backbone import BackboneConfig, ExpertBackbone, expert_features, make_synthetic_expert
from ..numerics import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(f"images {self.images.shape} vs labels {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass
class TaskData:
    train: Dataset
    test: Dataset
    meta: dict[str, str] = field(default_factory=dict)


def expert_from_seed(config: BackboneConfig, seed: int) -> ExpertBackbone:
    """The canonical synthetic expert for a seed."""
    return make_synthetic_expert(config, Rng(seed))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Recipe for a synthetic classification task.

    ``kind="plain"``: each class is a fixed random image plus Gaussian noise.

    ``kind="complementary"``: four classes coded by two sign bits.  Bit a is
    written along a patch direction that expert ``expert_a_seed``'s patch
    embedding maps onto a token direction ``v`` and expert ``expert_b_seed``'s
    maps to zero; bit b mirrors this.  Each expert therefore sees exactly one
    bit, both bits land on the same token direction, and nuisance patch
    content (orthogonal to ``v`` in both token spaces) varies per patch.
    Bit amplitudes are jittered per image.

    ``noise=None`` picks the kind's default: 1.0 for plain, 2.0 for
    complementary (strong nuisance keeps the frozen experts' nonlinear
    cross-talk from carrying the missing bit on its own).
    """

    seed: int = 0
    num_classes: int = 4
    samples_per_class: int = 16
    test_per_class: int = 16
    kind: str = "plain"
    expert_a_seed: int = 1
    expert_b_seed: int = 2
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    signal: float = 1.0
    noise: float | None = None
    jitter: tuple[float, float] = (0.25, 1.75)
    probe_min: float = 0.95
    probe_max_single: float = 0.70
    max_attempts: int = 10

    def __post_init__(self):
        if self.kind not in ("plain", "complementary"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.kind == "complementary" and self.num_classes != 4:
            raise ValueError("the complementary task has exactly 4 classes")
        if self.num_classes < 2 or self.samples_per_class < 1 or self.test_per_class < 0:
            raise ValueError("invalid class/sample counts")
        if self.noise is None:
            object.__setattr__(self, "noise", 2.0 if self.kind == "complementary" else 1.0)


def _balanced_labels(num_classes: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(num_classes), per_class)


def _plain(spec: SyntheticTaskSpec, rng: Rng) -> TaskData:
    cfg = spec.backbone
    shape = (cfg.image_h, cfg.image_w, cfg.channels)
    protos = rng.child(0).normal((spec.num_classes, *shape))

    def split(r: Rng, per_class: int) -> Dataset:
        y = _balanced_labels(spec.num_classes, per_class)
        x = spec.signal * protos[y] + spec.noise * 0.5 * r.normal((len(y), *shape))
        return Dataset(x, y)

    return TaskData(split(rng.child(1), spec.samples_per_class), split(rng.child(2), spec.test_per_class))


@dataclass
class ComplementaryGeometry:
    """Patch-space directions used by the complementary generator."""

    token_dir: np.ndarray  # v, unit vector in token space
    bit_a: np.ndarray  # patch vector: expert A -> v, expert B -> 0
    bit_b: np.ndarray  # patch vector: expert A -> 0, expert B -> v
    nuisance: np.ndarray  # (p, m) orthonormal basis orthogonal to W_A v and W_B v


def complementary_geometry(w_a: np.ndarray, w_b: np.ndarray, rng: Rng) -> ComplementaryGeometry:
    p, d = w_a.shape
    if p < 2 * d:
        raise GenerationError(f"patch dim {p} must be at least twice the token dim {d}")
    v = rng.normal(d)
    v /= np.linalg.norm(v)
    both = np.concatenate([w_a, w_b], axis=1)  # (p, 2d)
    zero = np.zeros(d)
    bit_a = np.linalg.lstsq(both.T, np.concatenate([v, zero]), rcond=None)[0]
    bit_b = np.linalg.lstsq(both.T, np.concatenate([zero, v]), rcond=None)[0]
    blocked = np.stack([w_a @ v, w_b @ v], axis=1)
    q, _ = np.linalg.qr(blocked, mode="complete")
    return ComplementaryGeometry(v, bit_a, bit_b, q[:, 2:])


def _complementary(spec: SyntheticTaskSpec, rng: Rng, experts) -> TaskData:
    cfg = spec.backbone
    w_a = experts[0].w("patch.weight").data
    w_b = experts[1].w("patch.weight").data
    geo = complementary_geometry(w_a, w_b, rng.child(0))
    grid_h, grid_w, ps = cfg.image_h // cfg.patch_size, cfg.image_w // cfg.patch_size, cfg.patch_size
    n_z = grid_h * grid_w
    lo, hi = spec.jitter

    def split(r: Rng, per_class: int) -> Dataset:
        y = _balanced_labels(4, per_class)
        n = len(y)
        s_a = np.where(y // 2 == 1, 1.0, -1.0)
        s_b = np.where(y % 2 == 1, 1.0, -1.0)
        amp_a = r.child(0).uniform(n, lo, hi)
        amp_b = r.child(1).uniform(n, lo, hi)
        signal = (s_a * amp_a)[:, None] * geo.bit_a + (s_b * amp_b)[:, None] * geo.bit_b  # (n, p)
        coeffs = r.child(2).normal((n, n_z, geo.nuisance.shape[1]))
        nuisance = coeffs @ geo.nuisance.T  # (n, n_z, p)
        patches = spec.signal * signal[:, None, :] + spec.noise * nuisance
        x = patches.reshape(n, grid_h, grid_w, ps, ps, cfg.channels).transpose(0, 1, 3, 2, 4, 5)
        return Dataset(x.reshape(n, cfg.image_h, cfg.image_w, cfg.channels), y)

    return TaskData(split(rng.child(1), spec.samples_per_class), split(rng.child(2), spec.test_per_class))


def probe_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Test accuracy of a multinomial logistic-regression probe."""
    scaler = StandardScaler().fit(train_x)
    clf = LogisticRegression(C=10.0, max_iter=5000)
    clf.fit(scaler.transform(train_x), train_y)
    return float((clf.predict(scaler.transform(test_x)) == test_y).mean())


@dataclass
class Certificate:
    concat: float
    single_a: float
    single_b: float
    attempt: int
    seed: int

    def holds(self, spec: SyntheticTaskSpec) -> bool:
        return (
            self.concat >= spec.probe_min
            and self.single_a <= spec.probe_max_single
            and self.single_b <= spec.probe_max_single
        )


def certify(data: TaskData, experts, attempt: int = 0, seed: int = 0) -> Certificate:
    fa_tr, fb_tr = (expert_features(e, data.train.images) for e in experts)
    fa_te, fb_te = (expert_features(e, data.test.images) for e in experts)
    ytr, yte = data.train.labels, data.test.labels
    return Certificate(
        concat=probe_accuracy(np.hstack([fa_tr, fb_tr]), ytr, np.hstack([fa_te, fb_te]), yte),
        single_a=probe_accuracy(fa_tr, ytr, fa_te, yte),
        single_b=probe_accuracy(fb_tr, ytr, fb_te, yte),
        attempt=attempt,
        seed=seed,
    )


def generate_synthetic(spec: SyntheticTaskSpec, experts: list[ExpertBackbone] | None = None) -> TaskData:
    """Build the task.  Complementary tasks are certified with linear probes on
    the two experts' frozen features and regenerated from a derived seed on
    failure; :class:`GenerationError` after ``max_attempts``."""
    if spec.kind == "plain":
        data = _plain(spec, Rng(spec.seed))
        data.meta = {"kind": "plain", "seed": str(spec.seed)}
        return data
    if experts is None:
        experts = [expert_from_seed(spec.backbone, spec.expert_a_seed), expert_from_seed(spec.backbone, spec.expert_b_seed)]
    base = Rng(spec.seed)
    last = None
    for attempt in range(spec.max_attempts):
        seed = spec.seed if attempt == 0 else int(base.child(1000 + attempt).integers(0, 2**63))
        data = _complementary(spec, Rng(seed), experts)
        cert = certify(data, experts, attempt, seed)
        if cert.holds(spec):
            data.meta = {
                "kind": "complementary",
                "seed": str(seed),
                "attempt": str(attempt),
                "probe_concat": f"{cert.concat:.4f}",
                "probe_a": f"{cert.single_a:.4f}",
                "probe_b": f"{cert.single_b:.4f}",
            }
            return data
        last = cert
    raise GenerationError(
        f"certificate failed after {spec.max_attempts} attempts (last: concat={last.concat:.3f}, "
        f"a={last.single_a:.3f}, b={last.single_b:.3f})"
    )


# -- IDX ------------------------------------------------------------------------

def _read_idx(path: str | os.PathLike, magic: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header != count:
        raise DataFormatError(f"{path}: payload has {len(buf) - header} bytes, header declares {count}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_images(images_path: str | os.PathLike, labels_path: str | os.PathLike) -> Dataset:
    """Unsigned-byte IDX images (N, rows, cols) and labels (N,); pixels / 255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images[..., None].astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# -- task archives ----------------------------------------------------------------

def save_task(path: str | os.PathLike, data: TaskData) -> None:
    save_archive(
        path,
        {
            "meta": text_to_array(format_kv(data.meta)),
            "train.images": data.train.images,
            "train.labels": data.train.labels.astype(np.float64),
            "test.images": data.test.images,
            "test.labels": data.test.labels.astype(np.float64),
        },
    )


def load_task(path: str | os.PathLike) -> TaskData:
    try:
        e = load_archive(path)
        meta = parse_kv(array_to_text(e["meta"])) if "meta" in e else {}
        return TaskData(
            Dataset(e["train.images"], e["train.labels"]), Dataset(e["test.images"], e["test.labels"]), meta
        )
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing entry {exc}") from None


def with_seed(spec: SyntheticTaskSpec, seed: int) -> SyntheticTaskSpec:
    return replace(spec, seed=seed)
