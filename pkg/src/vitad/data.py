"""Dataset handling: binary PNM codec, MVTec-style layout indexing, input
normalization, and a deterministic procedural generator for desk-scale
multi-class experiments.

The generator draws one texture family per class (oriented sinusoid in a
class-specific frequency band, a few octaves of value noise, and a fixed
positional gradient so content depends on where it sits in the frame) and
injects one of three defect kinds into anomaly images:

  patch_swap      two distant square patches exchanged (layout break)
  intensity_blob  an elliptical brightness shift (appearance break)
  scratch_line    a thin high-contrast stroke (texture break)

Masks are exact: pixels outside the mask are bitwise untouched.
Everything is a pure function of (seed, class, split, index).
"""

from __future__ import annotations

import hashlib
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageops import bilinear_resize, nearest_resize

SPLIT_TRAIN, SPLIT_TEST_NORMAL, SPLIT_TEST_ANOMALY = 0, 1, 2

DEFECT_KINDS = ("patch_swap", "intensity_blob", "scratch_line")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class FormatError(ValueError):
    """Malformed PNM bytes."""


class LayoutError(ValueError):
    """Dataset tree does not follow the expected layout."""


# ---------------------------------------------------------------------------
# PNM codec (binary P5/P6, maxval 255)


def decode_pnm(data: bytes) -> np.ndarray:
    """Bytes -> float32 [C,H,W] in [0,1]; C is 1 for P5, 3 for P6."""
    stream = io.BytesIO(data)
    magic = stream.read(2)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PNM file (magic {magic!r})")
    channels = 1 if magic == b"P5" else 3

    def next_token() -> bytes:
        tok = b""
        while True:
            ch = stream.read(1)
            if not ch:
                raise FormatError("truncated PNM header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = stream.read(1)
                continue
            if ch.isspace():
                if tok:
                    return tok
                continue
            tok += ch

    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise FormatError(f"bad PNM header field: {exc}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"bad PNM dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255")
    payload = stream.read(width * height * channels)
    if len(payload) != width * height * channels:
        raise FormatError(
            f"truncated PNM payload: wanted {width * height * channels} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (arr.transpose(2, 0, 1).astype(np.float32)) / 255.0


def encode_pnm(arr: np.ndarray) -> bytes:
    """uint8 [1,H,W] -> P5 bytes, uint8 [3,H,W] -> P6 bytes."""
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise FormatError(f"encoder wants uint8 [1|3,H,W], got {arr.dtype} {arr.shape}")
    c, h, w = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode()
    return header + arr.transpose(1, 2, 0).tobytes()


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(arr))


# ---------------------------------------------------------------------------
# normalization and image loading


@dataclass
class NormalizeStats:
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def validate(self) -> None:
        if len(self.mean) != 3 or len(self.std) != 3:
            raise LayoutError("normalization stats need 3 channels")
        if any(s <= 0 for s in self.std):
            raise LayoutError(f"normalization std must be positive, got {self.std}")


def normalize(image: np.ndarray, stats: NormalizeStats | None = None) -> np.ndarray:
    stats = stats or NormalizeStats()
    stats.validate()
    mean = np.asarray(stats.mean, np.float32).reshape(3, 1, 1)
    std = np.asarray(stats.std, np.float32).reshape(3, 1, 1)
    return (image - mean) / std


def load_image(path, image_size: int, stats: NormalizeStats | None = None) -> np.ndarray:
    """Decoded, resized (bilinear), normalized float32 [3,S,S]."""
    arr = read_pnm(path)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    if arr.shape[1:] != (image_size, image_size):
        arr = bilinear_resize(arr, image_size, image_size).astype(np.float32)
    return normalize(arr, stats)


def load_mask(path, image_size: int) -> np.ndarray:
    """Decoded, nearest-resized, binarized (>127 of 255) bool [S,S]."""
    arr = read_pnm(path)[0]
    if arr.shape != (image_size, image_size):
        arr = nearest_resize(arr, image_size, image_size)
    return arr > (127.0 / 255.0)


# ---------------------------------------------------------------------------
# dataset index


@dataclass
class Record:
    cls: str
    split: str           # train | test
    label: str           # normal | anomaly
    defect_type: str     # "good" for normals
    image_path: Path
    mask_path: Path | None = None


@dataclass
class DatasetIndex:
    root: Path
    classes: list[str]
    records: list[Record]

    def train_records(self) -> list[Record]:
        out = [r for r in self.records if r.split == "train"]
        bad = [r for r in out if r.label != "normal"]
        if bad:
            raise LayoutError(f"train split contains anomalies: {bad[0].image_path}")
        return out

    def test_records(self, cls: str | None = None) -> list[Record]:
        return [
            r
            for r in self.records
            if r.split == "test" and (cls is None or r.cls == cls)
        ]

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for r in sorted(self.records, key=lambda r: str(r.image_path)):
            digest.update(str(r.image_path.relative_to(self.root)).encode())
            digest.update(hashlib.sha256(r.image_path.read_bytes()).digest())
            if r.mask_path is not None:
                digest.update(hashlib.sha256(r.mask_path.read_bytes()).digest())
        return digest.hexdigest()


_IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")


def _mask_for(root: Path, cls: str, defect: str, stem: str) -> Path | None:
    for base in (root / "ground_truth" / cls / defect, root / cls / "ground_truth" / defect):
        for suffix in (".pgm", ".ppm", ".pnm"):
            cand = base / f"{stem}_mask{suffix}"
            if cand.exists():
                return cand
    return None


def load_layout(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset root {root} is not a directory")
    classes = sorted(
        d.name
        for d in root.iterdir()
        if d.is_dir() and d.name != "ground_truth"
    )
    if not classes:
        raise LayoutError(f"no class directories under {root}")
    records: list[Record] = []
    kept: list[str] = []
    for cls in classes:
        cdir = root / cls
        cls_records: list[Record] = []
        train_good = cdir / "train" / "good"
        if train_good.is_dir():
            for p in sorted(train_good.iterdir()):
                if p.suffix in _IMAGE_SUFFIXES:
                    cls_records.append(Record(cls, "train", "normal", "good", p))
        test_dir = cdir / "test"
        if test_dir.is_dir():
            for ddir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
                defect = ddir.name
                for p in sorted(ddir.iterdir()):
                    if p.suffix not in _IMAGE_SUFFIXES:
                        continue
                    if defect == "good":
                        cls_records.append(Record(cls, "test", "normal", "good", p))
                        continue
                    mask = _mask_for(root, cls, defect, p.stem)
                    if mask is None:
                        raise LayoutError(
                            f"no ground-truth mask found for anomaly image {p}"
                        )
                    cls_records.append(Record(cls, "test", "anomaly", defect, p, mask))
        if not cls_records:
            warnings.warn(f"class directory {cls!r} is empty; skipping")
            continue
        kept.append(cls)
        records.extend(cls_records)
    return DatasetIndex(root=root, classes=kept, records=records)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    num_classes: int = 4
    train_per_class: int = 20
    test_normal_per_class: int = 5
    test_anomaly_per_class: int = 5
    image_size: int = 64
    defect_types: tuple[str, ...] = DEFECT_KINDS
    seed: int = 0

    def validate(self) -> None:
        counts = (
            self.num_classes,
            self.train_per_class,
            self.test_normal_per_class,
            self.test_anomaly_per_class,
            self.image_size,
        )
        if any(c < 1 for c in counts):
            raise LayoutError("all synthetic counts must be >= 1")
        unknown = set(self.defect_types) - set(DEFECT_KINDS)
        if unknown:
            raise LayoutError(f"unknown defect types {sorted(unknown)}")
        if not self.defect_types:
            raise LayoutError("need at least one defect type")


def class_name(c: int) -> str:
    return f"tex{c:02d}"


def _rng(cfg: SynthConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((cfg.seed,) + key))


def _value_noise(rng: np.random.Generator, size: int, cells: int, amp: float) -> np.ndarray:
    grid = rng.random((cells, cells))
    return amp * (bilinear_resize(grid, size, size) - 0.5)


def _class_params(cfg: SynthConfig, c: int) -> dict:
    rng = _rng(cfg, c, 900)
    grad = rng.normal(size=2)
    grad /= max(np.linalg.norm(grad), 1e-6)
    return {
        "angle": rng.uniform(0, np.pi),
        # distinct frequency band per class
        "freq": 2.0 + 2.0 * c + rng.uniform(0.0, 0.8),
        "sin_amp": rng.uniform(0.14, 0.2),
        "grad": grad,
        "grad_amp": rng.uniform(0.2, 0.3),
        "base": rng.uniform(0.4, 0.6),
        "tint": rng.uniform(-0.06, 0.06, size=3),
        "noise_amp": rng.uniform(0.05, 0.09),
    }


def render_texture(cfg: SynthConfig, c: int, split: int, index: int) -> np.ndarray:
    """The normal (pre-defect) image as float32 [3,S,S] in [0,1]."""
    p = _class_params(cfg, c)
    rng = _rng(cfg, c, split, index)
    s = cfg.image_size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    u = (xx * np.cos(p["angle"]) + yy * np.sin(p["angle"])) / s
    phase = rng.uniform(0, 2 * np.pi)
    wave = p["sin_amp"] * np.sin(2 * np.pi * p["freq"] * u + phase)
    gx, gy = p["grad"]
    ramp = p["grad_amp"] * ((xx * gx + yy * gy) / s)
    noise = (
        _value_noise(rng, s, 4, p["noise_amp"])
        + _value_noise(rng, s, 8, p["noise_amp"] * 0.6)
        + _value_noise(rng, s, 16, p["noise_amp"] * 0.3)
    )
    mono = p["base"] + wave + ramp + noise
    img = mono[None, :, :] + p["tint"].reshape(3, 1, 1)
    return np.clip(img, 0.03, 0.97).astype(np.float32)


def _inject_patch_swap(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    s = img.shape[1]
    size = int(rng.integers(max(s // 8, 4), max(s // 5, 5) + 1))
    min_dist = s // 3
    for _ in range(64):
        y0, x0 = rng.integers(0, s - size, 2)
        y1, x1 = rng.integers(0, s - size, 2)
        if max(abs(int(y0) - int(y1)), abs(int(x0) - int(x1))) >= max(min_dist, size):
            break
    mask = np.zeros((s, s), bool)
    a = img[:, y0 : y0 + size, x0 : x0 + size].copy()
    b = img[:, y1 : y1 + size, x1 : x1 + size].copy()
    img[:, y0 : y0 + size, x0 : x0 + size] = b
    img[:, y1 : y1 + size, x1 : x1 + size] = a
    mask[y0 : y0 + size, x0 : x0 + size] = True
    mask[y1 : y1 + size, x1 : x1 + size] = True
    return mask


def _inject_intensity_blob(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    s = img.shape[1]
    ry, rx = rng.integers(max(s // 10, 3), max(s // 6, 4) + 1, 2)
    cy = int(rng.integers(ry, s - ry))
    cx = int(rng.integers(rx, s - rx))
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    d2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    mask = d2 <= 1.0
    direction = 1.0 if img[:, mask].mean() < 0.5 else -1.0
    amp = rng.uniform(0.28, 0.45)
    profile = 0.4 + 0.6 * (1.0 - d2[mask])
    img[:, mask] = np.clip(img[:, mask] + direction * amp * profile, 0.0, 1.0)
    return mask


def _inject_scratch_line(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    s = img.shape[1]
    for _ in range(64):
        p0 = rng.uniform(0.1 * s, 0.9 * s, 2)
        p1 = rng.uniform(0.1 * s, 0.9 * s, 2)
        if np.linalg.norm(p1 - p0) >= s / 3:
            break
    thickness = float(rng.integers(1, 3))
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    d = p1 - p0
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / (d @ d)
    t = np.clip(t, 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    mask = dist <= thickness
    shade = 0.9 if img[:, mask].mean() < 0.5 else 0.1
    amp = rng.uniform(0.75, 1.0)
    img[:, mask] = np.clip((1 - amp) * img[:, mask] + amp * shade, 0.0, 1.0)
    return mask


_INJECTORS = {
    "patch_swap": _inject_patch_swap,
    "intensity_blob": _inject_intensity_blob,
    "scratch_line": _inject_scratch_line,
}


def render_anomaly(cfg: SynthConfig, c: int, index: int) -> tuple[np.ndarray, np.ndarray, str]:
    """Anomaly image, its exact mask, and the defect kind used."""
    img = render_texture(cfg, c, SPLIT_TEST_ANOMALY, index)
    kind = cfg.defect_types[index % len(cfg.defect_types)]
    rng = _rng(cfg, c, SPLIT_TEST_ANOMALY, index, 7)
    mask = _INJECTORS[kind](img, rng)
    return img, mask, kind


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(cfg: SynthConfig, out_root) -> DatasetIndex:
    cfg.validate()
    out_root = Path(out_root)
    if out_root.exists() and any(out_root.iterdir()):
        raise LayoutError(f"target {out_root} exists and is not empty")
    if not out_root.parent.exists():
        raise LayoutError(f"parent directory {out_root.parent} does not exist")
    for c in range(cfg.num_classes):
        cls = class_name(c)
        (out_root / cls / "train" / "good").mkdir(parents=True, exist_ok=True)
        (out_root / cls / "test" / "good").mkdir(parents=True, exist_ok=True)
        for i in range(cfg.train_per_class):
            img = render_texture(cfg, c, SPLIT_TRAIN, i)
            write_pnm(out_root / cls / "train" / "good" / f"{i:03d}.ppm", _quantize(img))
        for i in range(cfg.test_normal_per_class):
            img = render_texture(cfg, c, SPLIT_TEST_NORMAL, i)
            write_pnm(out_root / cls / "test" / "good" / f"{i:03d}.ppm", _quantize(img))
        for i in range(cfg.test_anomaly_per_class):
            img, mask, kind = render_anomaly(cfg, c, i)
            img_dir = out_root / cls / "test" / kind
            mask_dir = out_root / "ground_truth" / cls / kind
            img_dir.mkdir(parents=True, exist_ok=True)
            mask_dir.mkdir(parents=True, exist_ok=True)
            write_pnm(img_dir / f"{i:03d}.ppm", _quantize(img))
            write_pnm(
                mask_dir / f"{i:03d}_mask.pgm",
                (mask[None].astype(np.uint8) * 255),
            )
    return load_layout(out_root)
