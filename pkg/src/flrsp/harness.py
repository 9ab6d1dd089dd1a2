"""Experiment orchestration: train, intercept, attack, analyze, plot.

A run directory looks like::

    run/
      config.json            copy of the configuration that produced it
      metrics.csv            one row per aggregation round
      accuracy.csv           accuracy after each epoch (plot data)
      checkpoints/           initial.bin, final.bin, intercepted.bin,
                             update_counts.bin, round_XXXXX.bin snapshots
      fixtures/img_XX/       intercepted rounds (params.bin, update.bin, meta.json)
      reconstructions/       img_XX_true.pgm, img_XX_<attack>.pgm
      attacks.json           per-image SSIM and attack diagnostics
      ssim_quartiles.csv     box-plot statistics (plot data)
      summary.json           medians and threshold decisions
      update_ratio.csv       written by ``analyze``
      *.svg                  written by ``plot``
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, april_reconstruct, intercept, optimization_attack
from .config import ConfigError, ExperimentConfig
from .data import load_dataset, partition
from .fl import (
    RoundHistory, frozen_weights_ratio, model_spec_from_config, run_training,
    simulate_update_counts, stream_rng, update_ratio,
)
from .metrics import ssim
from .models import build_model
from .params import ParamSet

log = logging.getLogger(__name__)

SSIM_THRESHOLD = 0.5
STREAM_ATTACK = 5


# ---------------------------------------------------------------------------
# small writers
# ---------------------------------------------------------------------------


def write_pgm(path, image) -> None:
    """8-bit binary PGM (one channel) or PPM (three channels)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    pixels = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if pixels.ndim == 2:
        header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode()
        body = pixels.tobytes()
    elif pixels.ndim == 3 and pixels.shape[0] == 3:
        header = f"P6\n{pixels.shape[2]} {pixels.shape[1]}\n255\n".encode()
        body = pixels.transpose(1, 2, 0).tobytes()
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    Path(path).write_bytes(header + body)


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, dims, maxval, body = blob.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    data = np.frombuffer(body, dtype=np.uint8) / float(int(maxval))
    if magic == b"P5":
        return data.reshape(1, h, w)
    return data.reshape(h, w, 3).transpose(2, 0, 1)


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def quartiles(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"min": float(v.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(v.max()), "n": int(v.size)}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _coerce_config(config) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        return config
    if isinstance(config, dict):
        return ExperimentConfig.from_dict(config)
    return ExperimentConfig.load(config)


def write_metrics(history: RoundHistory, path) -> None:
    n = len(history.records[0].client_losses) if history.records else 0
    header = ["round", "epoch", *(f"loss_client_{i}" for i in range(n)),
              "mean_loss", "accuracy", "masked_fraction"]
    rows = [[r.round, r.epoch, *map(float, r.client_losses), r.mean_loss, r.accuracy,
             r.masked_fraction] for r in history.records]
    _write_csv(path, header, rows)


def train(config, out) -> RoundHistory:
    """Run federated training and persist metrics and checkpoints."""
    cfg = _coerce_config(config)
    out = Path(out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    history = run_training(cfg)
    write_metrics(history, out / "metrics.csv")
    _write_csv(out / "accuracy.csv", ["epoch", "accuracy"],
               list(enumerate(history.accuracy_by_epoch())))
    ck = out / "checkpoints"
    history.initial.save(ck / "initial.bin")
    history.final.save(ck / "final.bin")
    if history.intercepted is not None:
        history.intercepted.save(ck / "intercepted.bin")
    ParamSet({k: v.astype(np.float64) for k, v in history.update_counts.items()}).save(
        ck / "update_counts.bin")
    for r, snap in sorted(history.snapshots.items()):
        snap.save(ck / f"round_{r:05d}.bin")
    _write_json(out / "train_info.json", {
        "rounds": len(history.records),
        "rounds_per_epoch": history.rounds_per_epoch,
        "intercept_round": history.intercept_round,
        "final_accuracy": history.accuracy_by_epoch()[-1],
    })
    return history


def attack_images(cfg: ExperimentConfig, train_set, count: int):
    """Indices of the attacked images: the first ``count`` of client 0's shard."""
    shards = partition(train_set, cfg.clients, cfg.partition["scheme"], seed=cfg.seeds["data"],
                       alpha=cfg.partition.get("alpha", 0.1))
    return shards[0][:count]


def attack(run_dir, kind: str | None = None) -> dict:
    """Intercept batch-of-one updates from the attacked client and invert them."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    kind = kind or cfg.attack.get("type", "none")
    kind = {"opt": "optimization"}.get(kind, kind)
    if kind not in ("april", "optimization"):
        raise ConfigError(f"no attack configured for {run_dir}")
    opts = cfg.attack_options()
    train_set, _ = load_dataset(cfg.dataset, cfg.seeds["data"])
    spec = model_spec_from_config(cfg, train_set)
    graph, _ = build_model(spec)
    ck = run_dir / "checkpoints" / "intercepted.bin"
    if not ck.exists():
        ck = run_dir / "checkpoints" / "final.bin"
    global_params = ParamSet.load(ck)
    root = int(cfg.seeds["root"])
    attack_seed = int(cfg.seeds.get("attack", 0))
    recon_dir = run_dir / "reconstructions"
    recon_dir.mkdir(exist_ok=True)
    results = []
    for i, idx in enumerate(attack_images(cfg, train_set, int(opts["num_images"]))):
        x, y = train_set.images[idx], int(train_set.labels[idx])
        share_seed = int(stream_rng(root, STREAM_ATTACK, i).integers(2**62))
        fixture = intercept(graph, global_params, x, y, cfg.defense, client=0,
                            round=0, root_seed=share_seed)
        fixture.meta.update({"image_index": int(idx)})
        fixture.save(run_dir / "fixtures" / f"img_{i:02d}")
        if kind == "april":
            result = april_reconstruct(fixture, spec)
        else:
            acfg = AttackConfig(iterations=int(opts["iterations"]),
                                step_size=float(opts["step_size"]),
                                seed=int(stream_rng(attack_seed, STREAM_ATTACK, i).integers(2**62)))
            result = optimization_attack(fixture, graph, acfg)
        score = ssim(x, result.image)
        write_pgm(recon_dir / f"img_{i:02d}_true.pgm", x)
        write_pgm(recon_dir / f"img_{i:02d}_{kind}.pgm", result.image)
        results.append({"image": i, "dataset_index": int(idx), "label": y, "ssim": score,
                        **result.report()})
        log.info("%s image %d: SSIM %.4f", kind, i, score)
    report = {"attack": kind, "defense": cfg.defense, "defense_label": cfg.defense_label,
              "images": results}
    _write_json(run_dir / "attacks.json", report)
    scores = [r["ssim"] for r in results]
    q = quartiles(scores)
    _write_csv(run_dir / "ssim_quartiles.csv", ["defense", "attack", *q],
               [[cfg.defense_label, kind, *q.values()]])
    return report


def summarize(run_dir) -> dict:
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    info = json.loads((run_dir / "train_info.json").read_text())
    summary = {"name": cfg.name, "defense": cfg.defense_label,
               "aggregation": cfg.aggregation, "final_accuracy": info["final_accuracy"]}
    attacks_path = run_dir / "attacks.json"
    if attacks_path.exists():
        report = json.loads(attacks_path.read_text())
        scores = [r["ssim"] for r in report["images"]]
        q = quartiles(scores)
        summary.update({
            "attack": report["attack"],
            "median_ssim": q["median"],
            "ssim_quartiles": q,
            "images_below_threshold": int(sum(s < SSIM_THRESHOLD for s in scores)),
            "threshold": SSIM_THRESHOLD,
            "protected": bool(q["median"] < SSIM_THRESHOLD),
            "degenerate_count": int(sum(r["degenerate"] for r in report["images"])),
        })
    _write_json(run_dir / "summary.json", summary)
    return summary


def run_experiment(config, out) -> Path:
    """Train, then (if configured) attack; write every report into ``out``."""
    cfg = _coerce_config(config)
    out = Path(out)
    train(cfg, out)
    if cfg.attack.get("type", "none") != "none":
        attack(out)
    summarize(out)
    return out


def _run_cell(args):
    cfg_dict, out = args
    return str(run_experiment(cfg_dict, out))


def run_sweep(configs, out_root, workers: int = 1) -> list[dict]:
    """Run independent cells (each in its own directory) and tabulate summaries."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    cells = []
    for cfg in configs:
        cfg = _coerce_config(cfg)
        cells.append((cfg.to_dict(), str(out_root / cfg.name)))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            dirs = list(pool.map(_run_cell, cells))
    else:
        dirs = [_run_cell(c) for c in cells]
    summaries = [json.loads((Path(d) / "summary.json").read_text()) for d in dirs]
    keys = ["name", "defense", "attack", "median_ssim", "protected", "final_accuracy"]
    _write_csv(out_root / "sweep_summary.csv", keys,
               [[s.get(k, "") for k in keys] for s in summaries])
    _write_json(out_root / "sweep_summary.json", summaries)
    return summaries


# ---------------------------------------------------------------------------
# update-ratio analysis
# ---------------------------------------------------------------------------


def analyze_update_ratio(M: int, N: int, R: float, *, trials: int = 10_000, seed: int = 0) -> list[dict]:
    """G(f) for FLRSP, frozen weights and standard FL, with Monte-Carlo counts."""
    flrsp_counts = np.bincount(simulate_update_counts(M, N, R, trials, seed), minlength=M + 1)
    frozen_counts = np.bincount(simulate_update_counts(M, N, R, trials, seed, frozen=True),
                                minlength=M + 1)
    rows = []
    for f in range(M + 1):
        rows.append({
            "f": f,
            "flrsp": update_ratio(M, N, R, f),
            "frozen": frozen_weights_ratio(M, N, R, f),
            "standard": update_ratio(M, N, 0.0, f),
            "flrsp_empirical": flrsp_counts[f] / trials,
            "frozen_empirical": frozen_counts[f] / trials,
        })
    return rows


def analyze(run_dir, trials: int = 10_000) -> list[dict]:
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    R = float(cfg.defense.get("R", 0.0)) if cfg.defense.get("type") == "flrsp" else 0.0
    info = json.loads((run_dir / "train_info.json").read_text())
    M = int(info["rounds"])
    rows = analyze_update_ratio(M, cfg.clients, R, trials=trials, seed=int(cfg.seeds["root"]))
    counts_path = run_dir / "checkpoints" / "update_counts.bin"
    if counts_path.exists():
        counts = ParamSet.load(counts_path).flat().astype(np.int64)
        hist = np.bincount(counts, minlength=M + 1)
        for row in rows:
            row["run_empirical"] = hist[row["f"]] / counts.size
    header = list(rows[0])
    _write_csv(run_dir / "update_ratio.csv", header, [[r[k] for k in header] for r in rows])
    return rows


# ---------------------------------------------------------------------------
# SVG plots (no plotting dependency)
# ---------------------------------------------------------------------------


def _svg_frame(width, height, title, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'font-family="sans-serif" font-size="11">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            f'<text x="{width / 2}" y="16" text-anchor="middle">{title}</text>\n'
            + "".join(body) + "</svg>\n")


def svg_line_plot(series: dict, title="", ylim=(0.0, 1.0), width=420, height=260) -> str:
    left, right, top, bottom = 40, 10, 26, 30
    pw, ph = width - left - right, height - top - bottom
    n = max(len(v) for v in series.values())
    lo, hi = ylim
    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>\n']
    for t in np.linspace(lo, hi, 5):
        y = top + ph * (1 - (t - lo) / (hi - lo))
        body.append(f'<text x="{left - 4}" y="{y + 4:.1f}" text-anchor="end">{t:.2f}</text>\n')
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    for k, (name, ys) in enumerate(series.items()):
        pts = " ".join(
            f"{left + pw * i / max(n - 1, 1):.1f},{top + ph * (1 - (v - lo) / (hi - lo)):.1f}"
            for i, v in enumerate(ys))
        c = colors[k % len(colors)]
        body.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.5"/>\n')
        body.append(f'<text x="{left + 6}" y="{top + 14 + 12 * k}" fill="{c}">{name}</text>\n')
    body.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">epoch</text>\n')
    return _svg_frame(width, height, title, body)


def svg_box_plot(boxes: dict, title="", ylim=(-0.2, 1.0), width=420, height=260) -> str:
    left, right, top, bottom = 40, 10, 26, 40
    pw, ph = width - left - right, height - top - bottom
    lo, hi = ylim

    def ypos(v):
        v = min(max(v, lo), hi)
        return top + ph * (1 - (v - lo) / (hi - lo))

    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>\n',
            f'<line x1="{left}" x2="{left + pw}" y1="{ypos(SSIM_THRESHOLD):.1f}" '
            f'y2="{ypos(SSIM_THRESHOLD):.1f}" stroke="#d62728" stroke-dasharray="4 3"/>\n']
    slot = pw / max(len(boxes), 1)
    for i, (name, q) in enumerate(boxes.items()):
        cx = left + slot * (i + 0.5)
        half = slot * 0.25
        body.append(f'<line x1="{cx}" x2="{cx}" y1="{ypos(q["min"]):.1f}" y2="{ypos(q["max"]):.1f}" stroke="#333"/>\n')
        body.append(f'<rect x="{cx - half:.1f}" y="{ypos(q["q3"]):.1f}" width="{2 * half:.1f}" '
                    f'height="{ypos(q["q1"]) - ypos(q["q3"]):.1f}" fill="#cde" stroke="#333"/>\n')
        body.append(f'<line x1="{cx - half:.1f}" x2="{cx + half:.1f}" y1="{ypos(q["median"]):.1f}" '
                    f'y2="{ypos(q["median"]):.1f}" stroke="#000" stroke-width="2"/>\n')
        body.append(f'<text x="{cx:.1f}" y="{height - 22}" text-anchor="middle">{name}</text>\n')
    return _svg_frame(width, height, title, body)


def plot(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    written = []
    acc = list(csv.DictReader((run_dir / "accuracy.csv").open()))
    if acc:
        svg = svg_line_plot({"accuracy": [float(r["accuracy"]) for r in acc]}, "test accuracy")
        (run_dir / "accuracy.svg").write_text(svg)
        written.append(run_dir / "accuracy.svg")
    qpath = run_dir / "ssim_quartiles.csv"
    if qpath.exists():
        boxes = {r["defense"]: {k: float(r[k]) for k in ("min", "q1", "median", "q3", "max")}
                 for r in csv.DictReader(qpath.open())}
        (run_dir / "ssim_box.svg").write_text(svg_box_plot(boxes, "attack SSIM"))
        written.append(run_dir / "ssim_box.svg")
    ratio = run_dir / "update_ratio.csv"
    if ratio.exists():
        rows = list(csv.DictReader(ratio.open()))
        series = {k: [float(r[k]) for r in rows] for k in ("flrsp", "frozen", "standard")}
        (run_dir / "update_ratio.svg").write_text(svg_line_plot(series, "G(f)"))
        written.append(run_dir / "update_ratio.svg")
    return written
