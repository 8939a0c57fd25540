"""Synthetic multi-modality segmentation corpora.

Each "modality" is a rendering regime (intensity transfer, noise model,
texture) applied to the same kind of binary foreground layout, so one mask
looks different under every modality. Everything is a pure function of
integer seeds.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NOISE_KINDS = ("gaussian", "speckle", "salt_pepper")
SHAPE_FAMILIES = ("ellipse", "polygon", "rounded_rect")

MAGIC = b"SGSD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIHHHH")  # magic, version, H, W, C, reserved -> 16 bytes

MAX_SHAPE_RETRIES = 10


@dataclass(frozen=True)
class ModalityConfig:
    id: int
    name: str
    gamma: float = 1.0
    gain: float = 1.0
    bias: float = 0.0
    noise: str = "gaussian"
    noise_strength: float = 0.05
    texture_freq: float = 0.0
    background: float = 0.2

    def __post_init__(self):
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"unknown noise regime {self.noise!r}")


# Loosely CT / MRI-T1 / MRI-T2 / X-ray. T1 inverts contrast, so no single
# intensity rule segments every modality.
DEFAULT_MODALITIES = (
    ModalityConfig(0, "ct", gamma=1.0, gain=0.55, bias=0.25, noise="gaussian",
                   noise_strength=0.06, texture_freq=0.0, background=0.15),
    ModalityConfig(1, "mri_t1", gamma=0.8, gain=-0.6, bias=0.85, noise="speckle",
                   noise_strength=0.12, texture_freq=0.15, background=0.1),
    ModalityConfig(2, "mri_t2", gamma=1.6, gain=0.7, bias=0.05, noise="gaussian",
                   noise_strength=0.04, texture_freq=0.35, background=0.45),
    ModalityConfig(3, "xray", gamma=0.6, gain=-0.45, bias=0.7, noise="salt_pepper",
                   noise_strength=0.04, texture_freq=0.08, background=0.55),
)


def default_modalities(n: int = 4) -> list[ModalityConfig]:
    if not 1 <= n <= len(DEFAULT_MODALITIES):
        raise ValueError(f"between 1 and {len(DEFAULT_MODALITIES)} default modalities available")
    return list(DEFAULT_MODALITIES[:n])


@dataclass
class SegmentationSample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    gt_mask: np.ndarray  # [H, W] uint8 in {0, 1}
    modality_id: int
    class_id: int
    seed: int
    sample_id: str = ""


@dataclass
class PromptSet:
    kind: str
    point: tuple[int, int] | None = None  # (x, y)
    box: tuple[int, int, int, int] | None = None  # (x0, y0, x1, y1), inclusive
    lowres_mask: np.ndarray | None = None


# -- shape rendering --------------------------------------------------------

def _ellipse(rng, yy, xx, size):
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    ry, rx = rng.uniform(0.12 * size, 0.28 * size, 2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _polygon(rng, yy, xx, size):
    # star-convex polygon: radius varies with angle, interpolated between vertices
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
    nv = int(rng.integers(5, 9))
    radii = rng.uniform(0.12 * size, 0.28 * size, nv)
    phase = rng.uniform(0, 2 * np.pi)
    ang = (np.arctan2(yy - cy, xx - cx) - phase) % (2 * np.pi)
    pos = ang / (2 * np.pi) * nv
    i0 = np.floor(pos).astype(int) % nv
    frac = pos - np.floor(pos)
    r = radii[i0] * (1 - frac) + radii[(i0 + 1) % nv] * frac
    return np.hypot(yy - cy, xx - cx) <= r


def _rounded_rect(rng, yy, xx, size):
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
    hy, hx = rng.uniform(0.1 * size, 0.24 * size, 2)
    rad = min(hy, hx) * 0.5
    qy = np.maximum(np.abs(yy - cy) - (hy - rad), 0)
    qx = np.maximum(np.abs(xx - cx) - (hx - rad), 0)
    return np.hypot(qy, qx) <= rad


_RENDERERS = {"ellipse": _ellipse, "polygon": _polygon, "rounded_rect": _rounded_rect}


def render_mask(rng: np.random.Generator, class_id: int, size: int) -> np.ndarray:
    family = SHAPE_FAMILIES[class_id % len(SHAPE_FAMILIES)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(MAX_SHAPE_RETRIES):
        n_shapes = int(rng.integers(1, 4))
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(n_shapes):
            mask |= _RENDERERS[family](rng, yy, xx, size)
        # reject slivers that vanish at an 8-pixel feature grid
        if mask.sum() >= 0.02 * size * size:
            return mask.astype(np.uint8)
    raise RuntimeError(f"could not render a non-degenerate {family} mask after {MAX_SHAPE_RETRIES} tries")


def _texture(rng, size, freq):
    if freq <= 0:
        return np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(3):
        ky, kx = rng.normal(0, freq * 2 * np.pi * 8, 2)
        out += np.sin(ky * yy + kx * xx + rng.uniform(0, 2 * np.pi))
    return out / 3.0


def render_image(mask: np.ndarray, modality: ModalityConfig, rng: np.random.Generator,
                 channels: int = 1) -> np.ndarray:
    size = mask.shape[0]
    raw = np.where(mask > 0, 1.0, modality.background)
    raw = raw + 0.15 * _texture(rng, size, modality.texture_freq)
    raw = np.clip(raw, 0.0, 1.0)
    img = modality.bias + modality.gain * raw ** modality.gamma
    s = modality.noise_strength
    if modality.noise == "gaussian":
        img = img + rng.normal(0, s, img.shape)
    elif modality.noise == "speckle":
        img = img * (1.0 + rng.normal(0, s, img.shape))
    else:
        u = rng.random(img.shape)
        img = np.where(u < s / 2, 0.0, np.where(u > 1 - s / 2, 1.0, img))
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[None], channels, axis=0).astype(np.float32)


def generate_sample(modality: ModalityConfig, class_id: int, seed: int, size: int = 64,
                    channels: int = 1) -> SegmentationSample:
    ss = np.random.SeedSequence([seed, modality.id, class_id])
    shape_rng, pixel_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    mask = render_mask(shape_rng, class_id, size)
    image = render_image(mask, modality, pixel_rng, channels)
    return SegmentationSample(image=image, gt_mask=mask, modality_id=modality.id,
                              class_id=class_id, seed=seed)


def generate_pair(mask_seed: int, class_id: int, modalities, size: int = 64):
    """The same foreground layout rendered under several modalities."""
    mask = render_mask(np.random.default_rng(mask_seed), class_id, size)
    return mask, [render_image(mask, m, np.random.default_rng([mask_seed, m.id])) for m in modalities]


# -- prompts ------------------------------------------------------------------

def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // stride, stride, w // stride, stride).max(axis=(1, 3))


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def sample_prompt(sample: SegmentationSample, kind: str, rng: np.random.Generator,
                  max_jitter: float = 0.1, stride: int = 8) -> PromptSet:
    mask = sample.gt_mask
    if kind == "none":
        return PromptSet("none")
    if kind == "point":
        ys, xs = np.nonzero(mask)
        i = int(rng.integers(len(ys)))
        return PromptSet("point", point=(int(xs[i]), int(ys[i])))
    if kind == "box":
        x0, y0, x1, y1 = tight_box(mask)
        bw, bh = x1 - x0 + 1, y1 - y0 + 1
        j = rng.uniform(0, max_jitter, 4) if max_jitter > 0 else np.zeros(4)
        h, w = mask.shape
        box = (max(0, int(round(x0 - j[0] * bw))), max(0, int(round(y0 - j[1] * bh))),
               min(w - 1, int(round(x1 + j[2] * bw))), min(h - 1, int(round(y1 + j[3] * bh))))
        return PromptSet("box", box=box)
    if kind == "mask":
        return PromptSet("mask", lowres_mask=downsample_mask(mask, stride))
    raise ValueError(f"unknown prompt kind {kind!r}")


# -- corpus on disk -------------------------------------------------------------

@dataclass
class ManifestRow:
    sample_id: str
    seed: int
    modality: int
    class_id: int
    split: str

    @property
    def relpath(self) -> str:
        return f"{self.split}/{self.modality}/{self.sample_id}.bin"


@dataclass
class Corpus:
    root: Path | None
    rows: list[ManifestRow]
    modalities: list[ModalityConfig] = field(default_factory=default_modalities)
    size: int = 64
    channels: int = 1

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def load(self, row: ManifestRow) -> SegmentationSample:
        if self.root is not None and (self.root / row.relpath).exists():
            s = read_sample(self.root / row.relpath)
            s.modality_id, s.class_id, s.seed, s.sample_id = row.modality, row.class_id, row.seed, row.sample_id
            return s
        s = generate_sample(self.modalities[row.modality], row.class_id, row.seed, self.size, self.channels)
        s.sample_id = row.sample_id
        return s


def build_corpus(configs, n_per_modality: int, split_ratio: float = 0.9, seed: int = 0,
                 num_classes: int = 2) -> list[ManifestRow]:
    """Manifest rows for a corpus; samples themselves regenerate from row seeds."""
    if not 0 < split_ratio < 1:
        raise ValueError("split_ratio must lie in (0, 1)")
    rows = []
    for m in configs:
        rng = np.random.default_rng([seed, m.id])
        seeds = rng.integers(0, 2**31 - 1, n_per_modality)
        classes = rng.integers(0, num_classes, n_per_modality)
        n_train = int(round(n_per_modality * split_ratio))
        order = rng.permutation(n_per_modality)
        train_set = set(order[:n_train].tolist())
        for i in range(n_per_modality):
            rows.append(ManifestRow(f"m{m.id}-{i:05d}", int(seeds[i]), m.id, int(classes[i]),
                                    "train" if i in train_set else "test"))
    return rows


def write_sample(path: Path, sample: SegmentationSample) -> None:
    c, h, w = sample.image.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, h, w, c, 0))
        f.write(sample.image.astype("<f4").tobytes())
        f.write(sample.gt_mask.astype(np.uint8).tobytes())


def read_sample(path: Path) -> SegmentationSample:
    raw = Path(path).read_bytes()
    magic, version, h, w, c, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    n = c * h * w
    image = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(c, h, w).astype(np.float32)
    mask = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off + 4 * n).reshape(h, w).copy()
    return SegmentationSample(image=image, gt_mask=mask, modality_id=-1, class_id=-1, seed=-1)


MANIFEST_FIELDS = ["sample_id", "seed", "modality", "class_id", "split"]


def write_corpus(out: Path, rows: list[ManifestRow], modalities, size: int = 64,
                 channels: int = 1) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {m.id: m for m in modalities}
    for r in rows:
        s = generate_sample(by_id[r.modality], r.class_id, r.seed, size, channels)
        write_sample(out / r.relpath, s)
    with open(out / "manifest.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(MANIFEST_FIELDS)
        for r in rows:
            wr.writerow([r.sample_id, r.seed, r.modality, r.class_id, r.split])
    return out / "manifest.csv"


def read_manifest(path: Path) -> list[ManifestRow]:
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != MANIFEST_FIELDS:
            raise ValueError(f"{path}: unexpected manifest header {rd.fieldnames}")
        return [ManifestRow(r["sample_id"], int(r["seed"]), int(r["modality"]),
                            int(r["class_id"]), r["split"]) for r in rd]


def open_corpus(root: Path, n_modalities: int | None = None) -> Corpus:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    rows = read_manifest(manifest)
    n_mod = n_modalities or (max(r.modality for r in rows) + 1)
    first = read_sample(root / rows[0].relpath)
    c, h, _ = first.image.shape
    return Corpus(root, rows, default_modalities(n_mod), size=h, channels=c)


def in_memory_corpus(n_modalities: int = 4, n_per_modality: int = 500, seed: int = 7,
                     split_ratio: float = 0.9, size: int = 64) -> Corpus:
    mods = default_modalities(n_modalities)
    return Corpus(None, build_corpus(mods, n_per_modality, split_ratio, seed), mods, size=size)
