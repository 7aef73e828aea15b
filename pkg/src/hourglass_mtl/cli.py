"""Command-line entry point: ``hourglass-mtl <command> ...``.

Exit codes: 0 on success, 2 for usage, configuration or input errors, 3 when
training diverges. Each successful command finishes by atomically writing
``run_manifest.json`` with SHA-256 checksums of everything it produced.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import dataio
from ._kernels import set_threads_from_env
from .errors import DivergenceError, HourglassError
from .evaluation import (
    write_latent_csv,
    write_latent_metrics_csv,
    write_metrics_csv,
    write_trimap_csv,
)
from .model import load_checkpoint, save_checkpoint
from .shapes import synth_shapes
from .targets import DistanceTransformConfig, build_targets, class_balance_weights
from .trainer import evaluate_split, format_config, load_config, prepare_data, split_indices, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
DEFAULT_WIDTHS = "1,2,4,8,16,32"
MANIFEST_NAME = "run_manifest.json"


class InputError(Exception):
    """Bad flag values or unreadable inputs detected by the CLI itself."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out_dir: Path, command: str, config: dict, inputs: list, outputs: list, seed=None) -> Path:
    """Write the manifest through a temporary file and ``os.replace``."""
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(Path(p).relative_to(out_dir)) for p in outputs],
        "checksums": {str(Path(p).relative_to(out_dir)): _sha256(Path(p)) for p in outputs},
    }
    final = out_dir / MANIFEST_NAME
    tmp = out_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, final)
    return final


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
        # a failed run must not leave an earlier run's manifest behind
        (out / MANIFEST_NAME).unlink(missing_ok=True)
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc.strerror or exc}") from None
    return out


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


# -- commands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args.out_dir)
    samples = synth_shapes(args.seed, args.count, args.size, args.classes)
    records, outputs = [], []
    for i, s in enumerate(samples):
        names = dataio.save_sample(out, f"{i:05d}", s)
        records.append(names)
        outputs += [out / n for n in names]
    manifest = out / "manifest.tsv"
    dataio.write_manifest(manifest, records)
    outputs.append(manifest)
    config = {"count": args.count, "size": args.size, "classes": args.classes}
    write_run_manifest(out, "synth", config, [], outputs, args.seed)
    return EXIT_OK


def cmd_targets(args) -> int:
    out = _out_dir(args.out_dir)
    manifest = Path(args.manifest)
    samples = dataio.load_manifest_samples(manifest)
    cfg = DistanceTransformConfig(args.R, args.K)
    outputs, bundles = [], []
    for i, s in enumerate(samples):
        tb = build_targets(s.labels, s.instances, cfg)
        bundles.append(tb)
        stem = out / f"{i:05d}"
        paths = (Path(f"{stem}_edge.png"), Path(f"{stem}_contour.png"), Path(f"{stem}_distq.png"))
        dataio.write_label_map(paths[0], tb.edge.astype(np.uint8) * 255)
        dataio.write_label_map(paths[1], tb.contour)
        dataio.write_label_map(paths[2], tb.distq.bins)
        outputs += paths
    n_classes = max(int(s.labels.max()) for s in samples) + 1 if samples else 1
    weights_path = out / "class_weights.csv"
    with open(weights_path, "w", newline="", encoding="utf-8") as fh:
        w = _csv_writer(fh)
        w.writerow(["task", "class", "weight", "frequency"])
        if bundles:
            for task, maps, n in (
                ("S", [b.seg for b in bundles], n_classes),
                ("C", [b.contour for b in bundles], n_classes),
                ("D", [b.distq.bins for b in bundles], cfg.K),
            ):
                cw = class_balance_weights(maps, n)
                for c in range(n):
                    w.writerow([task, c, repr(float(cw.weights[c])), repr(float(cw.frequencies[c]))])
    outputs.append(weights_path)
    write_run_manifest(out, "targets", {"R": cfg.R, "K": cfg.K}, [manifest], outputs)
    return EXIT_OK


def _load_training_samples(cfg, base: Path):
    if cfg.manifest:
        return dataio.load_manifest_samples(base / cfg.manifest), [base / cfg.manifest]
    if cfg.synth_count > 0:
        return synth_shapes(cfg.synth_seed, cfg.synth_count, cfg.synth_size, cfg.synth_classes), []
    raise InputError("config names no data: set 'manifest' or 'synth_count'")


def cmd_train(args) -> int:
    config_path = Path(args.config)
    try:
        cfg = load_config(config_path)
    except OSError as exc:
        raise InputError(f"cannot read config {config_path}: {exc.strerror or exc}") from None
    overrides = {}
    if args.tasks:
        overrides["tasks"] = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = replace(cfg, **overrides)
    base = config_path.parent
    out = _out_dir(args.out_dir if args.out_dir else base)
    samples, inputs = _load_training_samples(cfg, base)
    result = train(cfg, samples)
    ckpt, log, latent = out / cfg.checkpoint, out / cfg.log, out / cfg.latent
    save_checkpoint(result.params, ckpt)
    result.log.write_csv(log)
    outputs = [ckpt, log]
    if result.latent is not None:
        write_latent_csv(latent, result.latent)
        outputs.append(latent)
    resolved = out / "resolved_config.txt"
    resolved.write_text(format_config(cfg), encoding="utf-8")
    outputs.append(resolved)
    write_run_manifest(out, "train", _plain(asdict(cfg)), [config_path] + inputs, outputs, cfg.seed)
    return EXIT_OK


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _parse_widths(text: str) -> list:
    try:
        widths = [float(w) if "." in w else int(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise InputError(f"bad --widths value {text!r}") from None
    if not widths or min(widths) < 1:
        raise InputError("--widths needs positive values of at least 1")
    return widths


def _oracle_stub(samples, n_classes):
    truth = {s.image.tobytes(): s.labels for s in samples}

    def predict(images):
        labels = np.stack([truth[im.tobytes()] for im in images]).astype(np.int64)
        return (labels[:, None] == np.arange(n_classes)[None, :, None, None]).astype(np.float64)

    return predict


def cmd_eval(args) -> int:
    out = _out_dir(args.out_dir)
    widths = _parse_widths(args.widths)
    manifest = Path(args.manifest)
    samples = dataio.load_manifest_samples(manifest)
    if args.split == "test":
        samples = [samples[i] for i in split_indices(len(samples))[1]]
    if not samples:
        raise InputError("the selected split is empty")
    n_classes = max(int(s.labels.max()) for s in samples) + 1
    inputs = [manifest]
    params = None
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        inputs.append(Path(args.checkpoint))
    elif not args.oracle_stub:
        raise InputError("eval needs --checkpoint (or --oracle-stub)")
    model = _oracle_stub(samples, n_classes) if args.oracle_stub else params
    report, latent = evaluate_split(model, samples, widths, capture_latent=not args.oracle_stub)
    metrics_path, trimap_path = out / "metrics.csv", out / "trimap.csv"
    write_metrics_csv(metrics_path, report.seg)
    write_trimap_csv(trimap_path, report.trimap)
    outputs = [metrics_path, trimap_path]
    if report.latent is not None:
        write_latent_metrics_csv(out / "latent_metrics.csv", report.latent)
        write_latent_csv(out / "latent.csv", latent)
        outputs += [out / "latent_metrics.csv", out / "latent.csv"]
    config = {"widths": widths, "split": args.split, "oracle_stub": bool(args.oracle_stub)}
    write_run_manifest(out, "eval", config, inputs, outputs)
    return EXIT_OK


def _read_series(path: Path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    if len(rows) < 2:
        raise InputError(f"{path}: no data rows")
    header = rows[0]
    if header == ["width", "error_pct"]:
        xcol, ycol, kind = 0, 1, "trimap"
    elif header[:2] == ["iter", "total"]:
        xcol, ycol, kind = 0, 1, "log"
    else:
        raise InputError(f"{path}: unrecognised header {','.join(header)}")
    xs, ys = [], []
    for n, row in enumerate(rows[1:], 2):
        try:
            xs.append(float(row[xcol]))
            ys.append(float(row[ycol]) if row[ycol] else float("nan"))
        except (ValueError, IndexError):
            raise InputError(f"{path}: malformed row {n}") from None
    return kind, xs, ys


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = [(Path(p), *_read_series(Path(p))) for p in args.inputs]
    kinds = {s[1] for s in series}
    if len(kinds) > 1:
        raise InputError("cannot mix trimap curves and training logs in one chart")
    labels = args.labels.split(",") if args.labels else [p.stem for p, *_ in series]
    if len(labels) != len(series):
        raise InputError("--labels must name every input")
    out = Path(args.out)
    _out_dir(out.parent if str(out.parent) else ".")
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for (path, kind, xs, ys), label in zip(series, labels):
        ax.plot(xs, ys, marker="o" if kind == "trimap" else None, label=label)
    kind = kinds.pop()
    if kind == "trimap":
        ax.set_xlabel("trimap width (px)")
        ax.set_ylabel("pixel error in band (%)")
    else:
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, format="png", metadata={"Software": None})
    plt.close(fig)
    write_run_manifest(out.parent, "plot", {"labels": labels}, [p for p, *_ in series], [out])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hourglass-mtl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic-shapes dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("targets", help="derive edge, contour and distance targets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--R", type=int, default=DistanceTransformConfig.R)
    p.add_argument("--K", type=int, default=DistanceTransformConfig.K)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("config")
    p.add_argument("--tasks", help="comma-separated task subset containing S; overrides the config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", help="defaults to the config file's directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="segmentation metrics, trimap curve and latent metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--widths", default=DEFAULT_WIDTHS)
    p.add_argument("--split", choices=("all", "test"), default="all")
    p.add_argument("--oracle-stub", action="store_true", help="predict the ground truth (test hook)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render trimap curves or training logs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--labels")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    set_threads_from_env()
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (HourglassError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
