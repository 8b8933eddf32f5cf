"""Persistence tests: archive byte layout, map export scaling, report
rendering.

The archive oracle is the byte string assembled by hand from the layout
description, so the writer is checked against arithmetic, not itself.
"""

import json
import struct

import numpy as np
import pytest

from vitad.artifact_io import (
    ArchiveError,
    export_anomaly_map,
    load_archive,
    render_loss_curve,
    render_report_figure,
    save_archive,
    write_report,
)
from vitad.data import decode_pnm
from vitad.metrics import MetricReport
from vitad.scoring import AnomalyMap


def hand_packed_scalar(name: bytes, value: float) -> bytes:
    return (
        b"VTAD"
        + struct.pack("<HI", 1, 1)
        + struct.pack("<H", len(name))
        + name
        + struct.pack("<BB", 0, 1)
        + struct.pack("<I", 1)
        + struct.pack("<I", 4)
        + struct.pack("<f", value)
    )


# ---------------------------------------------------------------------------
# archive


def test_empty_archive_is_ten_bytes(tmp_path):
    p = tmp_path / "w.vtad"
    save_archive({}, p)
    blob = p.read_bytes()
    assert len(blob) == 10
    assert blob == b"VTAD" + struct.pack("<HI", 1, 0)
    assert load_archive(p) == {}


def test_single_scalar_byte_layout(tmp_path):
    p = tmp_path / "w.vtad"
    save_archive({"b": 2.5}, p)
    blob = p.read_bytes()
    assert len(blob) == 27
    assert blob == hand_packed_scalar(b"b", 2.5)
    back = load_archive(p)
    assert list(back) == ["b"]
    assert back["b"].shape == (1,)
    assert back["b"].dtype == np.float32
    assert float(back["b"][0]) == 2.5


@pytest.mark.parametrize("seed", range(20))
def test_save_load_save_byte_identical(tmp_path, seed):
    rng = np.random.default_rng(seed)
    tensors = {}
    for i in range(int(rng.integers(1, 8))):
        ndim = int(rng.integers(0, 4))
        shape = tuple(int(x) for x in rng.integers(1, 5, ndim))
        tensors[f"t{i}.{seed}"] = rng.normal(size=shape).astype(np.float32)
    a, b = tmp_path / "a.vtad", tmp_path / "b.vtad"
    save_archive(tensors, a)
    loaded = load_archive(a)
    save_archive(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    for name, arr in tensors.items():
        want = arr.reshape(1) if arr.ndim == 0 else arr
        np.testing.assert_array_equal(loaded[name], want)


def test_exact_float64_accepted_lossy_rejected(tmp_path):
    p = tmp_path / "w.vtad"
    save_archive({"ok": np.array([0.5, 0.25], np.float64)}, p)
    assert load_archive(p)["ok"].dtype == np.float32
    with pytest.raises(ArchiveError, match="float32"):
        save_archive({"bad": np.array([0.1], np.float64)}, p)
    with pytest.raises(ArchiveError, match="float32"):
        save_archive({"bad": np.array([1, 2], np.int64)}, p)


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(ArchiveError, match="duplicate"):
        save_archive([("x", np.zeros(2, np.float32))] * 2, tmp_path / "w.vtad")


def test_truncation_errors_carry_offset(tmp_path):
    p = tmp_path / "w.vtad"
    save_archive({"weight": np.arange(6, dtype=np.float32).reshape(2, 3)}, p)
    blob = p.read_bytes()
    for cut in (3, 9, 11, 15, 20, len(blob) - 1):
        (tmp_path / "cut.vtad").write_bytes(blob[:cut])
        with pytest.raises(ArchiveError, match="offset") as err:
            load_archive(tmp_path / "cut.vtad")
        assert "truncated" in str(err.value)


def test_bad_magic_and_version(tmp_path):
    p = tmp_path / "w.vtad"
    p.write_bytes(b"NOPE" + struct.pack("<HI", 1, 0))
    with pytest.raises(ArchiveError, match="magic"):
        load_archive(p)
    p.write_bytes(b"VTAD" + struct.pack("<HI", 9, 0))
    with pytest.raises(ArchiveError, match="version"):
        load_archive(p)


def test_unknown_dtype_tag_rejected(tmp_path):
    blob = bytearray(hand_packed_scalar(b"b", 1.0))
    blob[13] = 7  # dtype tag position for a one-char name
    p = tmp_path / "w.vtad"
    p.write_bytes(bytes(blob))
    with pytest.raises(ArchiveError, match="dtype"):
        load_archive(p)


def test_payload_count_mismatch_rejected(tmp_path):
    blob = bytearray(hand_packed_scalar(b"b", 1.0))
    blob[19:23] = struct.pack("<I", 8)  # claims 8 payload bytes, shape wants 4
    p = tmp_path / "w.vtad"
    p.write_bytes(bytes(blob))
    with pytest.raises(ArchiveError, match="payload"):
        load_archive(p)


def test_trailing_garbage_rejected(tmp_path):
    p = tmp_path / "w.vtad"
    p.write_bytes(hand_packed_scalar(b"b", 1.0) + b"\x00")
    with pytest.raises(ArchiveError, match="trailing"):
        load_archive(p)


def test_duplicate_name_in_file_rejected(tmp_path):
    one = hand_packed_scalar(b"b", 1.0)[10:]
    blob = b"VTAD" + struct.pack("<HI", 1, 2) + one + one
    p = tmp_path / "w.vtad"
    p.write_bytes(blob)
    with pytest.raises(ArchiveError, match="duplicate"):
        load_archive(p)


# ---------------------------------------------------------------------------
# anomaly-map export


def test_constant_map_export(tmp_path):
    amap = AnomalyMap(pixel_map=np.full((8, 8), 0.37, np.float32), image_score=0.37)
    out = tmp_path / "m.pgm"
    export_anomaly_map(amap, out)
    arr = decode_pnm(out.read_bytes())
    assert arr.shape == (1, 8, 8)
    assert len(np.unique(arr)) == 1
    lines = dict(
        line.split("=", 1) for line in (tmp_path / "m.txt").read_text().splitlines()
    )
    assert float(lines["min"]) == float(lines["max"]) == pytest.approx(0.37, abs=1e-6)
    assert float(lines["score"]) == pytest.approx(0.37, abs=1e-6)


def test_mask_pattern_threshold_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    mask = np.zeros((16, 16), bool)
    mask[4:9, 6:13] = True
    amap = AnomalyMap(
        pixel_map=mask.astype(np.float32) + rng.uniform(0, 0.05, mask.shape).astype(np.float32),
        image_score=1.0,
    )
    out = tmp_path / "m.pgm"
    export_anomaly_map(amap, out)
    decoded = np.rint(decode_pnm(out.read_bytes())[0] * 255)
    np.testing.assert_array_equal(decoded > 127, mask)


def test_export_preserves_argmax(tmp_path):
    rng = np.random.default_rng(9)
    arr = rng.normal(size=(12, 12))
    amap = AnomalyMap(pixel_map=arr, image_score=float(arr.max()))
    out = tmp_path / "m.pgm"
    export_anomaly_map(amap, out)
    decoded = decode_pnm(out.read_bytes())[0]
    assert np.unravel_index(decoded.argmax(), decoded.shape) == np.unravel_index(
        arr.argmax(), arr.shape
    )
    sidecar = (tmp_path / "m.txt").read_text()
    assert repr(float(arr.max())) in sidecar


def test_non_finite_map_rejected(tmp_path):
    amap = AnomalyMap(pixel_map=np.array([[np.nan]]), image_score=0.0)
    with pytest.raises(ValueError, match="finite"):
        export_anomaly_map(amap, tmp_path / "m.pgm")


# ---------------------------------------------------------------------------
# reports


def headline_mean_report() -> MetricReport:
    return MetricReport(
        image_auroc=0.983, image_ap=0.994, image_f1max=0.973,
        pixel_auroc=0.977, pixel_ap=0.553, pixel_f1max=0.587,
        pixel_aupro=0.914,
    )


def test_mean_row_rendering(tmp_path):
    rep = headline_mean_report()
    out = tmp_path / "report.csv"
    write_report({"all": rep}, out, mean=rep)
    lines = out.read_text().splitlines()
    assert lines[0].startswith("class,image_auroc")
    assert lines[-1] == "mean,98.3,99.4,97.3,97.7,55.3,58.7,91.4,85.4"


def test_single_class_rows_identical(tmp_path):
    rep = headline_mean_report()
    out = tmp_path / "report.csv"
    write_report({"solo": rep}, out)
    lines = out.read_text().splitlines()
    assert len(lines) == 3
    assert lines[1].split(",", 1)[1] == lines[2].split(",", 1)[1]


def test_absent_metric_empty_cell(tmp_path):
    rep = MetricReport(image_auroc=0.9, image_ap=0.8, image_f1max=0.7)
    out = tmp_path / "report.csv"
    with pytest.warns(UserWarning):
        write_report({"c": rep}, out)
    row = out.read_text().splitlines()[1].split(",")
    assert row[4] == row[5] == row[6] == row[7] == ""
    # partial mAD = mean of the three present metrics
    assert row[8] == f"{np.mean([0.9, 0.8, 0.7]) * 100:.1f}"
    sidecar = json.loads((tmp_path / "report.json").read_text())
    assert sidecar["classes"]["c"]["pixel_auroc"] is None


@pytest.mark.parametrize("seed", range(6))
def test_csv_reparses_to_sidecar(tmp_path, seed):
    rng = np.random.default_rng(seed)
    per_class = {
        f"c{i}": MetricReport(
            **{f: float(rng.uniform(0, 1)) for f in MetricReport.__dataclass_fields__}
        )
        for i in range(3)
    }
    out = tmp_path / "report.csv"
    write_report(per_class, out)
    sidecar = json.loads((tmp_path / "report.json").read_text())
    lines = out.read_text().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        cells = line.split(",")
        name = cells[0]
        raw = sidecar["mean"] if name == "mean" else sidecar["classes"][name]
        for key, cell in zip(header[1:], cells[1:]):
            assert cell == f"{raw[key] * 100:.1f}"


def test_report_rerun_identical_bytes(tmp_path):
    per_class = {"a": headline_mean_report(), "b": headline_mean_report()}
    out1, out2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    write_report(per_class, out1)
    write_report(per_class, out2)
    assert out1.read_bytes() == out2.read_bytes()
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()


# ---------------------------------------------------------------------------
# figures


def test_report_figure_renders(tmp_path):
    per_class = {"a": headline_mean_report(), "b": headline_mean_report()}
    out = tmp_path / "report.png"
    render_report_figure(per_class, out)
    assert out.stat().st_size > 1000


def test_loss_curve_renders(tmp_path):
    loss = list(np.linspace(1.0, 0.1, 20))
    lrs = [1e-4] * 16 + [1e-5] * 4
    out = tmp_path / "loss.png"
    render_loss_curve(loss, lrs, out)
    assert out.stat().st_size > 1000
