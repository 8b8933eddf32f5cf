"""Command-line front end: dataset synthesis, training, evaluation, and
single-image inference behind one executable.

Configuration is layered: built-in defaults, then the checkpoint's stored
manifest (for eval/infer), then a key=value config file, then dotted
overrides on the command line (e.g. --train.lr 5e-5). Unknown keys are
usage errors. Exit codes: 0 success, 2 usage or format problem, 3
numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import types
import typing
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .artifact_io import (
    ArchiveError,
    export_anomaly_map,
    load_archive,
    render_loss_curve,
    render_report_figure,
    save_archive,
    write_json,
    write_report,
)
from .data import (
    FormatError,
    LayoutError,
    NormalizeStats,
    SynthConfig,
    generate_synthetic,
    load_image,
    load_layout,
    load_mask,
    read_pnm,
)
from .meta_ad import FuserConfig, ViTAD
from .metrics import mean_report
from .scoring import ScoreConfig, score_image
from .tensor import GradError
from .training import (
    ClassEval,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    metrics_from,
    train,
)
from .vit import ConfigError, ViTConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

MANIFEST_NAME = "manifest.json"


class CliError(ValueError):
    """Bad usage: unknown key, unparseable value, malformed override."""


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ViTConfig = field(default_factory=ViTConfig)
    fuser: FuserConfig = field(default_factory=FuserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    seed: int = 0

    def as_manifest(self) -> dict:
        return {
            "seed": self.seed,
            "synth": asdict(self.synth),
            "model": asdict(self.model),
            "fuser": asdict(self.fuser),
            "train": asdict(self.train),
            "score": asdict(self.score),
        }


_NAMESPACES = ("synth", "model", "fuser", "train", "score")


def _coerce(tp, raw: str, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.strip().lower() in ("none", ""):
            return None
        return _coerce(args[0], raw, key)
    if tp is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise CliError(f"{key}: expected a boolean, got {raw!r}")
    if tp is int:
        try:
            return int(raw)
        except ValueError:
            raise CliError(f"{key}: expected an integer, got {raw!r}") from None
    if tp is float:
        try:
            return float(raw)
        except ValueError:
            raise CliError(f"{key}: expected a number, got {raw!r}") from None
    if tp is str:
        return raw
    if origin is tuple:
        args = typing.get_args(tp)
        elem_types = (
            [args[0]] * len(raw.split(","))
            if len(args) == 2 and args[1] is Ellipsis
            else list(args)
        )
        parts = [p.strip() for p in raw.split(",") if p.strip() != ""]
        if len(args) != 2 or args[1] is not Ellipsis:
            if len(parts) != len(elem_types):
                raise CliError(
                    f"{key}: expected {len(elem_types)} comma-separated values, got {raw!r}"
                )
        return tuple(
            _coerce(et, part, key) for et, part in zip(elem_types, parts)
        )
    raise CliError(f"{key}: unsupported field type {tp!r}")


def apply_kv(cfg: RunConfig, key: str, raw: str) -> None:
    if key == "seed":
        cfg.seed = _coerce(int, raw, key)
        return
    namespace, _, name = key.partition(".")
    if namespace not in _NAMESPACES or not name:
        raise CliError(f"unknown config key {key!r}")
    target = getattr(cfg, namespace)
    hints = typing.get_type_hints(type(target))
    if name not in {f.name for f in fields(target)}:
        raise CliError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(hints[name], raw, key))


def load_config_file(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_overrides(extras: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--"):
            raise CliError(f"unexpected argument {token!r}")
        body = token[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            key = body
            if i + 1 >= len(extras):
                raise CliError(f"option --{key} needs a value")
            value = extras[i + 1]
            i += 2
        if "." not in key and key != "seed":
            raise CliError(f"unknown option --{key}")
        pairs.append((key, value))
    return pairs


def resolve_config(args, extras, manifest: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if manifest:
        _apply_manifest(cfg, manifest)
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config):
            apply_kv(cfg, key, value)
    for key, value in parse_overrides(extras):
        apply_kv(cfg, key, value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.synth.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _apply_manifest(cfg: RunConfig, manifest: dict) -> None:
    def rebuild(cls, data):
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        return cls(**kwargs)

    cfg.seed = manifest.get("seed", cfg.seed)
    if "synth" in manifest:
        cfg.synth = rebuild(SynthConfig, manifest["synth"])
    if "model" in manifest:
        cfg.model = rebuild(ViTConfig, manifest["model"])
    if "fuser" in manifest:
        cfg.fuser = rebuild(FuserConfig, manifest["fuser"])
    if "train" in manifest:
        cfg.train = rebuild(TrainConfig, manifest["train"])
    if "score" in manifest:
        cfg.score = rebuild(ScoreConfig, manifest["score"])


def fmt_real(v: float) -> str:
    """Compact numeric rendering: 1e-4 prints as "1e-4", 0.9 as "0.9"."""
    if v == 0:
        return "0"
    if abs(v) >= 1e-3:
        return f"{v:g}"
    mantissa, exponent = f"{v:.6e}".split("e")
    mantissa = mantissa.rstrip("0").rstrip(".")
    return f"{mantissa}e{int(exponent)}"


def train_banner(t: TrainConfig) -> str:
    return (
        f"lr={fmt_real(t.lr)} wd={fmt_real(t.weight_decay)} "
        f"bs={t.batch_size} epochs={t.epochs}"
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, extras) -> int:
    cfg = resolve_config(args, extras)
    if args.classes is not None:
        cfg.synth.num_classes = args.classes
    if args.seed is not None:
        cfg.synth.seed = args.seed
    index = generate_synthetic(cfg.synth, args.out_dir)
    train_n = len(index.train_records())
    test_n = len(index.test_records())
    print(
        f"wrote {train_n + test_n} records: {train_n} train, {test_n} test "
        f"({len(index.classes)} classes) -> {args.out_dir}"
    )
    return EXIT_OK


def _build_model(cfg: RunConfig) -> ViTAD:
    cfg.model.validate()
    cfg.fuser.validate(cfg.model.encoder_divisions)
    return ViTAD(cfg.model, cfg.fuser, seed=cfg.seed)


def cmd_train(args, extras) -> int:
    cfg = resolve_config(args, extras)
    cfg.train.validate()
    index = load_layout(args.data_dir)
    model = _build_model(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(train_banner(cfg.train))
    result = train(model, index, cfg.train, score_cfg=cfg.score,
                   workers=args.workers, log=print if not args.quiet else None)
    final_state = model.state()
    save_archive(final_state, out_dir / "final.vtad")
    best_state = dict(final_state)
    if result.best_state is not None:
        best_state.update(result.best_state)
    save_archive(best_state, out_dir / "best.vtad")

    manifest = cfg.as_manifest()
    manifest.update(
        dataset_fingerprint=index.fingerprint(),
        dataset_root=str(index.root),
        classes=index.classes,
        loss_trace=result.loss_trace,
        lr_trace=result.lr_trace,
        history=[
            {
                "epoch": p.epoch,
                "mean": p.mean.as_dict(),
                "per_class": {cls: r.as_dict() for cls, r in p.per_class.items()},
            }
            for p in result.history
        ],
        best_epoch=result.best_epoch,
        best_pixel_auroc=result.best_metric,
        seconds=result.seconds,
        archives={"best": "best.vtad", "final": "final.vtad"},
    )
    write_json(manifest, out_dir / MANIFEST_NAME)
    render_loss_curve(result.loss_trace, result.lr_trace,
                      out_dir / "loss.png", history=result.history)
    if result.history:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mad = result.history[-1].mean.mad
        tail = f" final mad={mad:.4f}" if mad is not None else ""
        print(f"done: best epoch {result.best_epoch}{tail}")
    return EXIT_OK


def _load_checkpoint(args, extras) -> tuple[RunConfig, ViTAD]:
    ckpt = Path(args.checkpoint)
    manifest_path = ckpt.parent / MANIFEST_NAME
    manifest = None
    if manifest_path.exists():
        from .artifact_io import read_json

        manifest = read_json(manifest_path)
    cfg = resolve_config(args, extras, manifest)
    model = _build_model(cfg)
    model.load_state(load_archive(ckpt))
    return cfg, model


def _oracle_class_eval(index, cls, size) -> ClassEval:
    recs = index.test_records(cls)
    maps, masks, labels = [], [], []
    for rec in recs:
        mask = (
            load_mask(rec.mask_path, size)
            if rec.mask_path is not None
            else np.zeros((size, size), bool)
        )
        maps.append(mask.astype(np.float64))
        masks.append(mask)
        labels.append(1 if rec.label == "anomaly" else 0)
    scores = np.array([m.max() if m.size else 0.0 for m in maps])
    return ClassEval(scores, np.array(labels), maps, masks)


def cmd_eval(args, extras) -> int:
    if args.oracle_masks:
        cfg = resolve_config(args, extras)
        model = None
    else:
        cfg, model = _load_checkpoint(args, extras)
    index = load_layout(args.data_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = cfg.model.image_size
    stats = cfg.train.stats()

    if args.oracle_masks:
        per_class = {
            cls: metrics_from(_oracle_class_eval(index, cls, size))
            for cls in index.classes
        }
        mean = mean_report(list(per_class.values()))
    else:
        mean, per_class = evaluate(model, index, stats, cfg.score, args.workers)

    write_report(per_class, out_dir / "report.csv", mean)
    render_report_figure(per_class, out_dir / "report.png", mean)
    if args.export_maps and model is not None:
        maps_dir = out_dir / "maps"
        maps_dir.mkdir(exist_ok=True)
        for rec in index.test_records():
            img = load_image(rec.image_path, size, stats)
            enc, dec = model.forward(img)
            amap = score_image(enc, dec, size, cfg.score)
            name = f"{rec.cls}__{rec.defect_type}__{rec.image_path.stem}.pgm"
            export_anomaly_map(amap, maps_dir / name)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mad = mean.mad
    print(f"mean mad={mad:.4f}" if mad is not None else "mean mad undefined")
    return EXIT_OK


def cmd_infer(args, extras) -> int:
    cfg, model = _load_checkpoint(args, extras)
    read_pnm(args.image)  # format gate: bad input exits 2 before any compute
    size = cfg.model.image_size
    img = load_image(args.image, size, cfg.train.stats())
    enc, dec = model.forward(img)
    amap = score_image(enc, dec, size, cfg.score)
    out = Path(str(args.out_prefix) + ".pgm")
    out.parent.mkdir(parents=True, exist_ok=True)
    export_anomaly_map(amap, out)
    print(f"score={amap.image_score!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitad",
        allow_abbrev=False,
        description="reconstruction-based multi-class anomaly detection",
        epilog="any --<namespace>.<field> VALUE pair overrides configuration; "
               "namespaces: " + ", ".join(_NAMESPACES),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", allow_abbrev=False,
                        help="generate a deterministic synthetic dataset")
    ps.add_argument("out_dir")
    ps.add_argument("--config", default=None)
    ps.add_argument("--classes", type=int, default=None,
                    help="shorthand for --synth.num_classes")
    ps.add_argument("--seed", type=int, default=None)
    ps.set_defaults(run=cmd_synth)

    pt = sub.add_parser("train", allow_abbrev=False,
                        help="train fuser+decoder on a dataset tree")
    pt.add_argument("data_dir")
    pt.add_argument("out_dir")
    pt.add_argument("--config", default=None)
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--workers", type=int, default=1)
    pt.add_argument("--quiet", action="store_true")
    pt.set_defaults(run=cmd_train)

    pe = sub.add_parser("eval", allow_abbrev=False,
                        help="evaluate a checkpoint; writes report files")
    pe.add_argument("checkpoint",
                    help="weight archive; ignored (pass -) with --oracle-masks")
    pe.add_argument("data_dir")
    pe.add_argument("out_dir")
    pe.add_argument("--config", default=None)
    pe.add_argument("--seed", type=int, default=None)
    pe.add_argument("--workers", type=int, default=1)
    pe.add_argument("--export-maps", action="store_true")
    pe.add_argument("--oracle-masks", action="store_true",
                    help="score with ground-truth masks (perfect-detector check)")
    pe.set_defaults(run=cmd_eval)

    pi = sub.add_parser("infer", allow_abbrev=False,
                        help="anomaly map + score for a single image")
    pi.add_argument("checkpoint")
    pi.add_argument("image")
    pi.add_argument("out_prefix")
    pi.add_argument("--config", default=None)
    pi.add_argument("--seed", type=int, default=None)
    pi.set_defaults(run=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.run(args, extras)
    except (TrainingDiverged, GradError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CliError, ConfigError, LayoutError, FormatError, ArchiveError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
