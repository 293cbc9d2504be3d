"""Command-line harness: generate / train / reconstruct / align-eval / report.

Every command resolves its configuration from defaults, an optional JSON
config file and explicit flags (in that order of precedence), writes the
fully-resolved config next to its outputs, and is reproducible from that
file.  Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import aggregator, baselines, datagen, geometry, matching, metrics
from .imaging import Image, read_ppm, write_ppm
from .tensor import ParamStore

DEFAULT_LENGTHS = [1, 2, 5, 10, 20, 50]
RECON_METHODS = ("median", "mean", "rpca", "mle", "deep_sets", "diar")


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:.9g}"
    return str(v)


def _resolve(defaults: dict, config_path, args: argparse.Namespace) -> dict:
    cfg = dict(defaults)
    if config_path:
        with open(config_path) as f:
            loaded = json.load(f)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _write_config(cfg: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_base_images(path):
    if not path:
        return None
    files = sorted(Path(path).glob("*.ppm")) + sorted(Path(path).glob("*.pgm"))
    if not files:
        raise ValidationError(f"no PPM files in base image directory {path}")
    return [read_ppm(p) for p in files]


# ---------------------------------------------------------------------------
# generate

GENERATE_DEFAULTS = {
    "mode": "aligned",
    "sequences": 20,
    "frames": 10,
    "size": 128,
    "seed": 0,
    "out": "dataset",
    "base_images": "",
    "gain_strength": 0.25,
    "occluder_max": 2,
    "shadow_max": 2,
    "specular_max": 2,
    "cone_angle_deg": 25.0,
}


def cmd_generate(cfg: dict) -> int:
    if cfg["frames"] < 1:
        raise ValidationError("--frames must be >= 1")
    if cfg["sequences"] < 1:
        raise ValidationError("--sequences must be >= 1")
    if cfg["mode"] not in ("aligned", "misaligned", "both"):
        raise ValidationError(f"unknown mode {cfg['mode']!r}")
    out = Path(cfg["out"])
    _write_config(cfg, out)
    bases = _load_base_images(cfg["base_images"])
    modes = ["aligned", "misaligned"] if cfg["mode"] == "both" else [cfg["mode"]]
    for mode in modes:
        seqs = datagen.generate_dataset(
            cfg["sequences"], cfg["seed"], mode == "aligned",
            cfg["frames"], cfg["size"], cfg["size"], base_images=bases,
            gain_strength=cfg["gain_strength"],
            occluder_count_range=(0, cfg["occluder_max"]),
            shadow_count_range=(0, cfg["shadow_max"]),
            specular_count_range=(0, cfg["specular_max"]),
            cone_angle_deg=cfg["cone_angle_deg"],
        )
        target = out / mode if cfg["mode"] == "both" else out
        datagen.write_dataset(seqs, target)
        print(f"wrote {len(seqs)} {mode} sequences to {target} (seed {cfg['seed']})")
    return 0


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {
    "data": "dataset",
    "model": "diar",
    "agg_mode": "softmax_weighted",
    "window_p": 2,
    "window_m": 7,
    "epochs": 10,
    "batch": 4,
    "lr": 0.001,
    "val_fraction": 0.1,
    "seed": 0,
    "out": "run",
}


def cmd_train(cfg: dict) -> int:
    if cfg["model"] not in ("diar", "deep_sets"):
        raise ValidationError(f"unknown model {cfg['model']!r}")
    if cfg["agg_mode"] not in aggregator.AGGREGATION_MODES:
        raise ValidationError(f"unknown aggregation mode {cfg['agg_mode']!r}")
    data_dir = Path(cfg["data"])
    if not data_dir.is_dir():
        raise ValidationError(f"missing dataset directory {data_dir}")
    dataset = datagen.read_dataset(data_dir)
    if not dataset:
        raise ValidationError(f"no sequences found in {data_dir}")
    out = Path(cfg["out"])
    _write_config(cfg, out)
    model = aggregator.build_model(
        kind=cfg["model"], mode=cfg["agg_mode"], window_p=cfg["window_p"],
        window_m=cfg["window_m"], seed=cfg["seed"], dtype=np.float32,
    )
    history = aggregator.train(
        model, dataset,
        aggregator.TrainConfig(lr=cfg["lr"], batch_size=cfg["batch"], epochs=cfg["epochs"],
                               val_fraction=cfg["val_fraction"], seed=cfg["seed"]),
    )
    model.params.save(out / "checkpoint.bin")
    aggregator.write_history_csv(history, out / "history.csv")
    print(f"best val loss {history.best_val_loss:.6f} at epoch {history.best_epoch}")
    return 0


def _load_model(checkpoint, cfg) -> aggregator.DiarModel:
    run_cfg_path = Path(checkpoint).parent / "config.json"
    kwargs = dict(kind="diar", mode="softmax_weighted", window_p=2, window_m=7)
    if run_cfg_path.exists():
        with open(run_cfg_path) as f:
            run_cfg = json.load(f)
        kwargs = dict(kind=run_cfg.get("model", "diar"), mode=run_cfg.get("agg_mode", "softmax_weighted"),
                      window_p=run_cfg.get("window_p", 2), window_m=run_cfg.get("window_m", 7))
    model = aggregator.build_model(seed=0, dtype=np.float32, **kwargs)
    model.params.load(checkpoint)
    return model


# ---------------------------------------------------------------------------
# reconstruct

RECONSTRUCT_DEFAULTS = {
    "data": "dataset",
    "methods": "median,mean",
    "lengths": "1,2,5,10,20,50",
    "checkpoint": "",
    "deep_sets_checkpoint": "",
    "out": "recon",
    "save_images": False,
}


def _reconstruct_one(method, frames, masks, cfg):
    if method == "median":
        return baselines.median_stack(frames, masks)
    if method == "mean":
        return baselines.mean_stack(frames, masks)
    if method == "rpca":
        return baselines.rpca_stack(frames, masks)
    if method == "mle":
        return baselines.weiss_mle(frames, masks).image
    if method in ("diar", "deep_sets"):
        key = "checkpoint" if method == "diar" else "deep_sets_checkpoint"
        if not cfg.get(key):
            raise ValidationError(f"method {method} requires --{key.replace('_', '-')}")
        model = _load_model(cfg[key], cfg)
        if masks is not None:
            frames = baselines.impute_masked(frames, masks)
        return aggregator.to_image(aggregator.model_forward(frames, model))
    raise ValidationError(f"unknown method {method!r}; valid: {', '.join(RECON_METHODS)}")


def cmd_reconstruct(cfg: dict) -> int:
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    for m in methods:
        if m not in RECON_METHODS:
            raise ValidationError(f"unknown method {m!r}; valid: {', '.join(RECON_METHODS)}")
    lengths = sorted({int(v) for v in str(cfg["lengths"]).split(",") if str(v).strip()})
    dataset = datagen.read_dataset(cfg["data"])
    if not dataset:
        raise ValidationError(f"no sequences found in {cfg['data']}")
    out = Path(cfg["out"])
    _write_config(cfg, out)
    rows = []
    for seq_id, seq in enumerate(dataset):
        for t in lengths:
            if t > len(seq.frames):
                continue
            frames = seq.frames[:t]
            for method in methods:
                rec = _reconstruct_one(method, frames, None, cfg)
                rep = metrics.report(rec, seq.label)
                rows.append([seq_id, method, t, rep.rmse, rep.psnr, rep.ssim])
                if cfg["save_images"]:
                    write_ppm(rec, out / f"seq{seq_id:05d}_{method}_T{t}.ppm")
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seq_id", "method", "T", "rmse", "psnr", "ssim"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    print(f"wrote {len(rows)} metric rows to {out / 'metrics.csv'}")
    return 0


# ---------------------------------------------------------------------------
# align-eval

ALIGN_DEFAULTS = {
    "data": "dataset",
    "methods": "median,mean",
    "provider": "patch",
    "patch_k": 7,
    "scales": "1.0,0.75,0.5",
    "min_score": 0.0,
    "threshold_px": 3.0,
    "max_iters": 2000,
    "seed": 0,
    "checkpoint": "",
    "deep_sets_checkpoint": "",
    "out": "aligneval",
}


def cmd_align_eval(cfg: dict) -> int:
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    for m in methods:
        if m not in RECON_METHODS:
            raise ValidationError(f"unknown method {m!r}; valid: {', '.join(RECON_METHODS)}")
    dataset = datagen.read_dataset(cfg["data"])
    if not dataset:
        raise ValidationError(f"no sequences found in {cfg['data']}")
    out = Path(cfg["out"])
    _write_config(cfg, out)
    align_cfg = matching.AlignConfig(
        provider=cfg["provider"], patch_k=cfg["patch_k"],
        scales=tuple(float(s) for s in str(cfg["scales"]).split(",")),
        min_score=cfg["min_score"], threshold_px=cfg["threshold_px"],
        max_iters=cfg["max_iters"], seed=cfg["seed"],
    )
    align_rows = []
    metric_rows = []
    for seq_id, seq in enumerate(dataset):
        h, w = seq.label.height, seq.label.width
        result = matching.align_sequence(seq.frames, 0, align_cfg)
        for diag in result.diagnostics:
            h_true = seq.homographies[diag.frame]
            if diag.failed:
                hvals = [""] * 9
                herr = perr = ""
            else:
                hvals = [_fmt(v) for v in diag.homography.to_list()]
                tn = geometry.to_normalized_frame(h_true, w, h)
                en = geometry.to_normalized_frame(diag.homography, w, h)
                herr = _fmt(geometry.homography_error(tn, en))
                perr = _fmt(geometry.projection_error(tn, en))
            align_rows.append([seq_id, diag.frame, diag.n_matches, diag.n_inliers]
                              + hvals + [int(diag.failed), herr, perr])
        ok = [i for i in range(len(seq.frames)) if result.homographies[i] is not None]
        frames = [result.warped[i] for i in ok]
        masks = [result.masks[i] for i in ok]
        for method in methods:
            rec = _reconstruct_one(method, frames, masks, cfg)
            joint = np.logical_or.reduce(masks)
            rep = metrics.report(rec, seq.label, mask_a=joint)
            for name, value in (("rmse", rep.rmse), ("psnr", rep.psnr), ("ssim", rep.ssim)):
                metric_rows.append([seq_id, method, name, _fmt(value)])
    with open(out / "alignment.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seq_id", "frame", "n_matches", "n_inliers",
                         "h11", "h12", "h13", "h21", "h22", "h23", "h31", "h32", "h33",
                         "failed", "homography_error", "projection_error"])
        writer.writerows(align_rows)
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seq_id", "method", "metric", "value"])
        writer.writerows(metric_rows)
    print(f"wrote {len(align_rows)} alignment rows and {len(metric_rows)} metric rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# report: deterministic SVG plots plus a printed summary table


def _svg_header(width, height):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="{width}" height="{height}" fill="white"/>\n')


_COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]


def _line_plot_svg(series: dict, title: str) -> str:
    """series: method -> list of (x, y), already sorted by x."""
    w, h, pad = 640, 420, 60
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts if math.isfinite(y)]
    if not xs or not ys:
        raise ValidationError("report: nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (w - 2 * pad)

    def sy(y):
        return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)

    parts = [_svg_header(w, h)]
    parts.append(f'<text x="{w//2}" y="24" text-anchor="middle" font-size="16">{title}</text>\n')
    parts.append(f'<line x1="{pad}" y1="{h-pad}" x2="{w-pad}" y2="{h-pad}" stroke="black"/>\n')
    parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h-pad}" stroke="black"/>\n')
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _COLORS[i % len(_COLORS)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts if math.isfinite(y))
        parts.append(f'<polyline fill="none" stroke="{color}" points="{path}"/>\n')
        parts.append(f'<text x="{w-pad+6}" y="{pad + 16*i}" font-size="12" fill="{color}">{name}</text>\n')
    for x in sorted(set(xs)):
        parts.append(f'<text x="{sx(x):.2f}" y="{h-pad+16}" text-anchor="middle" font-size="10">{_fmt(float(x))}</text>\n')
    parts.append(f'<text x="{pad-8}" y="{sy(y0):.2f}" text-anchor="end" font-size="10">{y0:.3g}</text>\n')
    parts.append(f'<text x="{pad-8}" y="{sy(y1):.2f}" text-anchor="end" font-size="10">{y1:.3g}</text>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def _box_plot_svg(groups: dict, title: str) -> str:
    """groups: label -> list of values; quartile box with median and whiskers."""
    w, h, pad = 640, 420, 60
    vals = [v for vs in groups.values() for v in vs if math.isfinite(v)]
    if not vals:
        raise ValidationError("report: nothing to plot")
    y0, y1 = min(vals), max(vals)
    if y1 == y0:
        y1 = y0 + 1

    def sy(y):
        return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)

    names = sorted(groups)
    step = (w - 2 * pad) / max(1, len(names))
    parts = [_svg_header(w, h)]
    parts.append(f'<text x="{w//2}" y="24" text-anchor="middle" font-size="16">{title}</text>\n')
    for i, name in enumerate(names):
        vs = np.array([v for v in groups[name] if math.isfinite(v)])
        if vs.size == 0:
            continue
        q1, med, q3 = np.percentile(vs, [25, 50, 75])
        lo, hi = vs.min(), vs.max()
        cx = pad + (i + 0.5) * step
        bw = step * 0.3
        parts.append(f'<line x1="{cx:.2f}" y1="{sy(lo):.2f}" x2="{cx:.2f}" y2="{sy(hi):.2f}" stroke="black"/>\n')
        parts.append(f'<rect x="{cx-bw:.2f}" y="{sy(q3):.2f}" width="{2*bw:.2f}" '
                     f'height="{abs(sy(q1)-sy(q3)):.2f}" fill="#cfe2f3" stroke="black"/>\n')
        parts.append(f'<line x1="{cx-bw:.2f}" y1="{sy(med):.2f}" x2="{cx+bw:.2f}" y2="{sy(med):.2f}" stroke="red"/>\n')
        parts.append(f'<text x="{cx:.2f}" y="{h-pad+16}" text-anchor="middle" font-size="10">{name}</text>\n')
    parts.append(f'<text x="{pad-8}" y="{sy(y0):.2f}" text-anchor="end" font-size="10">{y0:.3g}</text>\n')
    parts.append(f'<text x="{pad-8}" y="{sy(y1):.2f}" text-anchor="end" font-size="10">{y1:.3g}</text>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def _read_csv(path):
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}")
    if not rows:
        raise ValidationError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    if not body:
        raise ValidationError(f"{path}: no data rows")
    for ln, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValidationError(f"{path}: line {ln}: expected {len(header)} fields, got {len(row)}")
    return header, body


REPORT_DEFAULTS = {"csv": "", "out": "report"}


def cmd_report(cfg: dict) -> int:
    if not cfg["csv"]:
        raise ValidationError("report requires --csv")
    paths = [p for p in str(cfg["csv"]).split(",") if p]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for path in paths:
        header, body = _read_csv(path)
        stem = Path(path).stem
        if header[:3] == ["seq_id", "method", "T"]:
            for metric_name in ("rmse", "psnr", "ssim"):
                col = header.index(metric_name)
                series = {}
                agg = {}
                for row in body:
                    method, t, v = row[1], int(row[2]), float(row[col])
                    agg.setdefault((method, t), []).append(v)
                for (method, t), vs in sorted(agg.items()):
                    finite = [v for v in vs if math.isfinite(v)]
                    if finite:
                        series.setdefault(method, []).append((t, float(np.mean(finite))))
                svg = _line_plot_svg(series, f"{metric_name} vs sequence length")
                (out / f"{stem}_{metric_name}.svg").write_text(svg)
                print(f"# {stem}: {metric_name} per method/length (mean +- std)")
                for (method, t), vs in sorted(agg.items()):
                    finite = [v for v in vs if math.isfinite(v)]
                    mu = float(np.mean(finite)) if finite else math.inf
                    sd = float(np.std(finite)) if finite else 0.0
                    print(f"  {method:12s} T={t:<4d} {mu:.5f} +- {sd:.5f}")
        elif header == ["seq_id", "method", "metric", "value"]:
            by_metric = {}
            for row in body:
                by_metric.setdefault(row[2], {}).setdefault(row[1], []).append(float(row[3]))
            for metric_name, groups in sorted(by_metric.items()):
                svg = _box_plot_svg(groups, f"{metric_name} by method")
                (out / f"{stem}_{metric_name}_box.svg").write_text(svg)
        elif "homography_error" in header:
            he = header.index("homography_error")
            pe = header.index("projection_error")
            groups = {"homography_error": [], "projection_error": []}
            for row in body:
                if row[he]:
                    groups["homography_error"].append(float(row[he]))
                if row[pe]:
                    groups["projection_error"].append(float(row[pe]))
            svg = _box_plot_svg(groups, "alignment errors")
            (out / f"{stem}_alignment_box.svg").write_text(svg)
        else:
            raise ValidationError(f"{path}: unrecognized CSV schema {header}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _add_options(sub, defaults):
    sub.add_argument("--config", default=None, help="JSON config file")
    for key, val in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            sub.add_argument(flag, action="store_const", const=True, default=None)
        elif isinstance(val, int):
            sub.add_argument(flag, type=int, default=None)
        elif isinstance(val, float):
            sub.add_argument(flag, type=float, default=None)
        else:
            sub.add_argument(flag, type=str, default=None)


COMMANDS = {
    "generate": (GENERATE_DEFAULTS, cmd_generate),
    "train": (TRAIN_DEFAULTS, cmd_train),
    "reconstruct": (RECONSTRUCT_DEFAULTS, cmd_reconstruct),
    "align-eval": (ALIGN_DEFAULTS, cmd_align_eval),
    "report": (REPORT_DEFAULTS, cmd_report),
}


def main(argv=None) -> int:
    parser = _Parser(prog="diar", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    for name, (defaults, _) in COMMANDS.items():
        _add_options(subs.add_parser(name), defaults)
    try:
        args = parser.parse_args(argv)
        defaults, fn = COMMANDS[args.command]
        cfg = _resolve(defaults, args.config, args)
        return fn(cfg)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
