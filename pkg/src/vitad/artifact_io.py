"""Bit-exact persistence: weight archives, anomaly-map exports, and metric
reports, plus the figures the report path renders next to the CSV.

Archive layout (all little-endian):

    magic  "VTAD"
    u16    format version (currently 1)
    u32    tensor count
    then per tensor:
    u16    name length, followed by that many UTF-8 bytes
    u8     dtype tag (0 = float32)
    u8     ndim
    u32[]  extents
    u32    payload byte count
    raw    payload bytes

Scalars are stored with shape (1,).
"""

from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .metrics import _METRIC_FIELDS, MetricReport, mean_report  # noqa: E402
from .scoring import AnomalyMap  # noqa: E402

MAGIC = b"VTAD"
VERSION = 1
DTYPE_F32 = 0


class ArchiveError(ValueError):
    """Unreadable archive; message carries the byte offset where parsing died."""


def _normalize(name: str, arr) -> np.ndarray:
    if isinstance(arr, (int, float)):
        arr = np.float32(arr)
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.dtype != np.float32:
        if arr.dtype == np.float64 and np.array_equal(arr.astype(np.float32), arr):
            arr = arr.astype(np.float32)
        else:
            raise ArchiveError(f"tensor {name!r}: only float32 payloads, got {arr.dtype}")
    if len(name.encode()) > 0xFFFF:
        raise ArchiveError(f"tensor name too long ({len(name)} chars)")
    if arr.ndim > 0xFF:
        raise ArchiveError(f"tensor {name!r}: too many dimensions ({arr.ndim})")
    if any(e > 0xFFFFFFFF for e in arr.shape):
        raise ArchiveError(f"tensor {name!r}: extent exceeds u32 range")
    return np.ascontiguousarray(arr)


def save_archive(tensors, path) -> None:
    """Write name -> array pairs; accepts a mapping or (name, array) pairs."""
    pairs = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    seen = set()
    for name, _ in pairs:
        if name in seen:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        seen.add(name)
    chunks = [struct.pack("<4sHI", MAGIC, VERSION, len(pairs))]
    for name, arr in pairs:
        arr = _normalize(name, arr)
        encoded = name.encode()
        payload = arr.astype("<f4", copy=False).tobytes()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<I", len(payload)))
        chunks.append(payload)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise ArchiveError(
                f"truncated archive: wanted {n} bytes for {what} "
                f"at offset {self.offset}, file has {len(self.blob)}"
            )
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_archive(path) -> dict[str, np.ndarray]:
    reader = _Reader(Path(path).read_bytes())
    magic, version, count = reader.unpack("<4sHI", "header")
    if magic != MAGIC:
        raise ArchiveError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise ArchiveError(f"unsupported version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = reader.offset
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "name").decode()
        dtype_tag, ndim = reader.unpack("<BB", "dtype/ndim")
        if dtype_tag != DTYPE_F32:
            raise ArchiveError(f"unknown dtype tag {dtype_tag} at offset {at}")
        shape = reader.unpack(f"<{ndim}I", "extents")
        (nbytes,) = reader.unpack("<I", "payload size")
        want = int(np.prod(shape, dtype=np.int64)) * 4 if ndim else 4
        if nbytes != want:
            raise ArchiveError(
                f"tensor {name!r} at offset {at}: payload {nbytes} bytes, "
                f"shape {shape} needs {want}"
            )
        payload = reader.take(nbytes, f"payload of {name!r}")
        if name in out:
            raise ArchiveError(f"duplicate tensor name {name!r} at offset {at}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if reader.offset != len(reader.blob):
        raise ArchiveError(
            f"{len(reader.blob) - reader.offset} trailing bytes at offset {reader.offset}"
        )
    return out


# ---------------------------------------------------------------------------
# anomaly-map export


def export_anomaly_map(amap: AnomalyMap, path) -> None:
    """Min-max scaled P5 PGM plus a text sidecar with the raw scale and score.

    The sidecar lands next to the image with a .txt suffix.
    """
    from .data import encode_pnm

    arr = np.asarray(amap.pixel_map, np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("anomaly map contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = np.rint((arr - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(arr)
    path = Path(path)
    path.write_bytes(encode_pnm(scaled.astype(np.uint8)[None]))
    sidecar = path.with_suffix(".txt")
    sidecar.write_text(
        f"min={lo!r}\nmax={hi!r}\nscore={float(amap.image_score)!r}\n"
    )


# ---------------------------------------------------------------------------
# metric reports

REPORT_COLUMNS = ("class",) + _METRIC_FIELDS + ("mad",)


def _cell(value: float | None) -> str:
    return "" if value is None else f"{value * 100:.1f}"


def write_report(per_class: dict[str, MetricReport], path,
                 mean: MetricReport | None = None) -> MetricReport:
    """CSV (values x100, one decimal) plus a full-precision JSON sidecar.

    Rows are one per class plus a trailing "mean"; absent metrics render
    as empty cells and stay null in the sidecar.
    """
    if mean is None:
        mean = mean_report(list(per_class.values()))
    path = Path(path)
    lines = [",".join(REPORT_COLUMNS)]
    sidecar: dict[str, dict] = {"classes": {}, "mean": None}
    rows = list(per_class.items()) + [("mean", mean)]
    for name, rep in rows:
        values = [getattr(rep, f) for f in _METRIC_FIELDS]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mad = rep.mad
        lines.append(",".join([name] + [_cell(v) for v in values] + [_cell(mad)]))
        entry = {f: getattr(rep, f) for f in _METRIC_FIELDS}
        entry["mad"] = mad
        if name == "mean":
            sidecar["mean"] = entry
        else:
            sidecar["classes"][name] = entry
    path.write_text("\n".join(lines) + "\n")
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return mean


def render_report_figure(per_class: dict[str, MetricReport], path,
                         mean: MetricReport | None = None) -> None:
    """Grouped bar chart of the eight report columns, one group per metric."""
    if mean is None:
        mean = mean_report(list(per_class.values()))
    rows = list(per_class.items()) + [("mean", mean)]
    labels = _METRIC_FIELDS + ("mad",)
    fig, ax = plt.subplots(figsize=(10, 4))
    width = 0.9 / len(rows)
    xs = np.arange(len(labels))
    for k, (name, rep) in enumerate(rows):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            vals = [getattr(rep, f) for f in _METRIC_FIELDS] + [rep.mad]
        heights = [0.0 if v is None else v * 100 for v in vals]
        ax.bar(xs + k * width, heights, width=width, label=name)
    ax.set_xticks(xs + 0.45 - width / 2)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("value x100")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_loss_curve(loss_trace, lr_trace, path, history=None) -> None:
    """Training loss (left axis) and learning rate (right axis) per epoch."""
    epochs = np.arange(1, len(loss_trace) + 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, loss_trace, color="tab:blue", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    twin = ax.twinx()
    twin.plot(epochs, lr_trace, color="tab:orange", drawstyle="steps-post", label="lr")
    twin.set_ylabel("learning rate")
    twin.set_yscale("log")
    if history:
        marks = [p.epoch for p in history]
        vals = [p.mean.pixel_auroc for p in history]
        if all(v is not None for v in vals):
            ax.plot(marks, vals, "g^--", markersize=4, label="pixel auroc")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_json(obj, path) -> None:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, Path):
            return str(o)
        raise TypeError(f"not JSON-serializable: {type(o)}")

    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
