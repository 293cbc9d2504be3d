import csv
import json

import numpy as np
import pytest

from diar.cli import main
from diar.datagen import Sequence, read_dataset, synthetic_base_image, write_dataset
from diar.imaging import Image


def run(*argv):
    return main(list(argv))


def tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def tiny_dataset(path, n=2, t=3, size=16, aligned=True, seed=0, **spec_kwargs):
    from diar.datagen import generate_dataset

    seqs = generate_dataset(n, master_seed=seed, aligned=aligned, frame_count=t,
                            height=size, width=size, **spec_kwargs)
    write_dataset(seqs, path)
    return seqs


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_sequences(tmp_path):
    out = tmp_path / "ds"
    rc = run("generate", "--mode", "aligned", "--sequences", "3", "--frames", "4",
             "--size", "16", "--seed", "7", "--out", str(out))
    assert rc == 0
    seqs = read_dataset(out)
    assert len(seqs) == 3
    assert all(len(s.frames) == 4 for s in seqs)
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["mode"] == "aligned"


def test_generate_deterministic_tree(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    flags = ["--mode", "misaligned", "--sequences", "2", "--frames", "3",
             "--size", "16", "--seed", "3"]
    assert run("generate", *flags, "--out", str(a)) == 0
    assert run("generate", *flags, "--out", str(b)) == 0
    ta, tb = tree_bytes(a), tree_bytes(b)
    # resolved configs differ only in the out path
    ta.pop("config.json"), tb.pop("config.json")
    assert ta == tb


def test_generate_rejects_zero_frames(tmp_path):
    assert run("generate", "--frames", "0", "--out", str(tmp_path / "x")) == 1


def test_generate_rejects_unknown_mode(tmp_path):
    assert run("generate", "--mode", "sideways", "--out", str(tmp_path / "x")) == 1


def test_config_file_and_flag_precedence(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"sequences": 2, "frames": 3, "size": 16}))
    out = tmp_path / "ds"
    rc = run("generate", "--config", str(cfg_path), "--frames", "2", "--out", str(out))
    assert rc == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["sequences"] == 2  # from config file
    assert resolved["frames"] == 2  # flag wins over config file
    assert len(read_dataset(out)) == 2


def test_config_unknown_key_rejected(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"sequencs": 2}))
    assert run("generate", "--config", str(cfg_path), "--out", str(tmp_path / "x")) == 1


# ---------------------------------------------------------------------------
# train


def test_train_smoke(tmp_path):
    ds = tmp_path / "ds"
    tiny_dataset(ds, n=3, t=2, size=16)
    out = tmp_path / "run"
    rc = run("train", "--data", str(ds), "--model", "diar", "--agg-mode", "avg_x",
             "--window-m", "4", "--epochs", "2", "--batch", "2", "--out", str(out))
    assert rc == 0
    assert (out / "checkpoint.bin").exists()
    lines = (out / "history.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,wall_seconds"
    assert len(lines) == 3  # header + 2 epochs


def test_train_missing_dataset(tmp_path):
    assert run("train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")) == 1


def test_train_bad_mode(tmp_path):
    ds = tmp_path / "ds"
    tiny_dataset(ds, n=2, t=2, size=16)
    assert run("train", "--data", str(ds), "--agg-mode", "maximal",
               "--out", str(tmp_path / "r")) == 1


# ---------------------------------------------------------------------------
# reconstruct


def test_reconstruct_schema_and_fixed_point(tmp_path):
    # T copies of the clean label: every method reconstructs it exactly
    ds = tmp_path / "ds"
    from diar.geometry import Homography

    label = synthetic_base_image(3, 16, 16)
    seqs = [Sequence([label] * 4, label, [Homography.identity()] * 4,
                     {"seed": 0, "mode": "aligned"})]
    write_dataset(seqs, ds)
    out = tmp_path / "recon"
    rc = run("reconstruct", "--data", str(ds), "--methods", "median,mean,mle",
             "--lengths", "1,2,4", "--out", str(out))
    assert rc == 0
    with open(out / "metrics.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["seq_id", "method", "T", "rmse", "psnr", "ssim"]
    assert len(rows) == 1 + 3 * 3  # 3 lengths x 3 methods
    for row in rows[1:]:
        assert float(row[3]) < 1.0 / 255.0  # rmse
    assert all(int(r[2]) in (1, 2, 4) for r in rows[1:])


def test_reconstruct_median_beats_mean_under_corruption(tmp_path):
    # sparse large-magnitude corruption on <50% of frames per pixel
    rng = np.random.default_rng(4)
    clean = synthetic_base_image(5, 16, 16)
    frames = []
    for i in range(5):
        data = clean.data.copy()
        hit = rng.uniform(size=(16, 16)) < 0.25
        data[hit] = rng.uniform(0.0, 1.0, size=(int(hit.sum()), 3))
        frames.append(Image(data))
    from diar.geometry import Homography

    ds = tmp_path / "ds"
    write_dataset([Sequence(frames, clean, [Homography.identity()] * 5,
                            {"seed": 0, "mode": "aligned"})], ds)
    out = tmp_path / "recon"
    assert run("reconstruct", "--data", str(ds), "--methods", "median,mean",
               "--lengths", "5", "--out", str(out)) == 0
    with open(out / "metrics.csv", newline="") as f:
        rows = list(csv.reader(f))[1:]
    vals = {row[1]: float(row[3]) for row in rows}
    assert vals["median"] < vals["mean"]


def test_reconstruct_unknown_method(tmp_path, capsys):
    ds = tmp_path / "ds"
    tiny_dataset(ds, n=1, t=2, size=16)
    rc = run("reconstruct", "--data", str(ds), "--methods", "avg",
             "--out", str(tmp_path / "r"))
    assert rc == 1
    err = capsys.readouterr().err
    assert "median" in err and "rpca" in err  # lists the valid methods


def test_reconstruct_model_roundtrip(tmp_path):
    ds = tmp_path / "ds"
    tiny_dataset(ds, n=2, t=2, size=16)
    rund = tmp_path / "run"
    assert run("train", "--data", str(ds), "--model", "deep_sets", "--window-m", "4",
               "--epochs", "1", "--out", str(rund)) == 0
    out = tmp_path / "recon"
    rc = run("reconstruct", "--data", str(ds), "--methods", "deep_sets",
             "--lengths", "2", "--deep-sets-checkpoint", str(rund / "checkpoint.bin"),
             "--out", str(out))
    assert rc == 0
    with open(out / "metrics.csv", newline="") as f:
        rows = list(csv.reader(f))[1:]
    assert len(rows) == 2 and all(r[1] == "deep_sets" for r in rows)


# ---------------------------------------------------------------------------
# align-eval


def test_align_eval_on_aligned_dataset(tmp_path):
    ds = tmp_path / "ds"
    # distortion-free aligned frames: every match pairs identical coordinates,
    # so the recovered homography is the identity to solver precision
    tiny_dataset(ds, n=2, t=3, size=32, aligned=True, seed=1,
                 gain_strength=0.0, specular_count_range=(0, 0),
                 shadow_count_range=(0, 0), occluder_count_range=(0, 0))
    out = tmp_path / "ae"
    rc = run("align-eval", "--data", str(ds), "--methods", "median",
             "--scales", "1.0,0.5", "--out", str(out))
    assert rc == 0
    with open(out / "alignment.csv", newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    assert header[:4] == ["seq_id", "frame", "n_matches", "n_inliers"]
    assert len(body) == 2 * 2  # non-reference frames only
    pe = header.index("projection_error")
    for row in body:
        assert row[header.index("failed")] == "0"
        assert float(row[pe]) < 1e-6  # frames are already aligned
    with open(out / "metrics.csv", newline="") as f:
        mrows = list(csv.reader(f))
    assert mrows[0] == ["seq_id", "method", "metric", "value"]
    assert len(mrows) == 1 + 2 * 3  # 2 sequences x 3 metrics


# ---------------------------------------------------------------------------
# report


def write_metrics_csv(path, methods=("median", "mean")):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seq_id", "method", "T", "rmse", "psnr", "ssim"])
        for method in methods:
            for t in (1, 2, 5):
                w.writerow([0, method, t, 0.1 / t, 20.0 + t, 0.9])


def test_report_line_plot(tmp_path):
    csv_path = tmp_path / "metrics.csv"
    write_metrics_csv(csv_path)
    out = tmp_path / "rep"
    assert run("report", "--csv", str(csv_path), "--out", str(out)) == 0
    svg = (out / "metrics_rmse.svg").read_text()
    assert svg.count("<polyline") == 2  # one line per method


def test_report_deterministic(tmp_path):
    csv_path = tmp_path / "metrics.csv"
    write_metrics_csv(csv_path)
    o1, o2 = tmp_path / "r1", tmp_path / "r2"
    assert run("report", "--csv", str(csv_path), "--out", str(o1)) == 0
    assert run("report", "--csv", str(csv_path), "--out", str(o2)) == 0
    assert tree_bytes(o1) == tree_bytes(o2)


def test_report_empty_csv_is_error(tmp_path):
    csv_path = tmp_path / "empty.csv"
    csv_path.write_text("")
    out = tmp_path / "rep"
    assert run("report", "--csv", str(csv_path), "--out", str(out)) == 1
    assert not list(out.glob("*.svg"))


def test_report_malformed_row_names_line(tmp_path, capsys):
    csv_path = tmp_path / "bad.csv"
    csv_path.write_text("seq_id,method,T,rmse,psnr,ssim\n0,median,1,0.1,20.0\n")
    assert run("report", "--csv", str(csv_path), "--out", str(tmp_path / "rep")) == 1
    assert "line 2" in capsys.readouterr().err


def test_report_long_format_box_plot(tmp_path):
    csv_path = tmp_path / "long.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seq_id", "method", "metric", "value"])
        for seq in range(3):
            for method in ("median", "mean"):
                w.writerow([seq, method, "rmse", 0.1 * (seq + 1)])
    out = tmp_path / "rep"
    assert run("report", "--csv", str(csv_path), "--out", str(out)) == 0
    assert (out / "long_rmse_box.svg").exists()


# ---------------------------------------------------------------------------
# reproducibility from archived config


def test_rerun_from_archived_config(tmp_path):
    out1 = tmp_path / "ds1"
    assert run("generate", "--mode", "aligned", "--sequences", "2", "--frames", "2",
               "--size", "16", "--seed", "5", "--out", str(out1)) == 0
    out2 = tmp_path / "ds2"
    assert run("generate", "--config", str(out1 / "config.json"), "--out", str(out2)) == 0
    t1, t2 = tree_bytes(out1), tree_bytes(out2)
    t1.pop("config.json"), t2.pop("config.json")
    assert t1 == t2
