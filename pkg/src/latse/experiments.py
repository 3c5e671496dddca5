"""Run orchestration: train to a directory, evaluate it, compare variants.

A run directory holds the config, LATSE1 checkpoints, metric CSVs, gate
logs and a reconstruction panel, each stamped with the config hash.  The
comparison grid toggles the gate and the generative term over shared data
and is refused outright if asked to tabulate runs whose catalogs differ,
so ablation numbers always share their dataset."""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from latse.config import ConfigError, ExperimentConfig
from latse.data import build_catalog, stack_samples
from latse.generative import export_panel
from latse.metrics import (
    identification_rank1,
    make_pairs,
    verification_accuracy,
    write_eval_report,
)
from latse.net import (
    encode,
    load_centers,
    load_params,
    save_centers,
    save_params,
)
from latse.training import (
    audit_gate,
    read_metrics_csv,
    train_student,
    train_teacher,
    write_gate_audit,
    write_gate_log,
    write_metrics_csv,
)

_PAIR_STREAM = 31
EVAL_SAME_PAIRS = 500
EVAL_DIFF_PAIRS = 500
PANEL_SAMPLES = 8

CONFIG_NAME = "config.cfg"
EVAL_NAME = "eval.csv"

VARIANTS = ("linear", "linear_ts", "linear_gen", "linear_ts_gen")


def run_experiment(config: ExperimentConfig) -> dict:
    """Train per config, write all artifacts under config.out_dir.

    Returns a summary dict with artifact paths and final metrics."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config.config_hash()
    config.save(out / CONFIG_NAME)

    gate_on = config.gate.k > 0
    gen_on = config.gen.weight > 0.0
    summary: dict = {"out_dir": str(out), "config_hash": chash}

    teacher = None
    if gate_on:
        teacher = train_teacher(config)
        save_params(out / "teacher_net.ckpt", teacher.params, chash)
        save_centers(out / "teacher_centers.ckpt", teacher.centers, chash)
        write_metrics_csv(out / "teacher_metrics.csv", teacher.history, chash)
        if teacher.history:
            summary["teacher_final_top1"] = teacher.history[-1]["train_top1"]

    result = train_student(config, teacher)
    save_params(out / "student_net.ckpt", result.params, chash)
    save_centers(out / "student_centers.ckpt", result.centers, chash)
    write_metrics_csv(out / "metrics.csv", result.history, chash)
    if gen_on:
        save_params(out / "decoder_net.ckpt", result.decoder, chash)
        _write_panel(out / "panel.pgm", config, result, chash)
    if gate_on:
        write_gate_log(out / "gate_log.csv", result.gate_rows, chash)
        rows, stats = audit_gate(config, teacher)
        write_gate_audit(out / "gate_audit.csv", rows, stats, chash)
        summary["gate_noise_recall"] = stats.noise_recall
        summary["gate_noise_precision"] = stats.noise_precision
        summary["gate_clean_false_rejection"] = stats.clean_false_rejection
    summary["final"] = result.history[-1]
    return summary


def _write_panel(path, config: ExperimentConfig, result, chash: str) -> None:
    from latse.generative import decode

    catalog = build_catalog(config.data)
    x, _, _, _ = stack_samples(catalog.train[:PANEL_SAMPLES])
    h, w = config.data.image_h, config.data.image_w
    emb = encode(result.params, x)
    gen = decode(result.decoder, emb.vectors, (h, w))
    export_panel(path, x.reshape(-1, h, w), gen.images, config_hash=chash)


def evaluate_run(run_dir) -> dict:
    """Open-set evaluation of a finished run's student on held-out identities.

    Pairs derive from the catalog seed alone, so every run over the same
    catalog faces the same pairs.  Writes eval.csv, returns the row."""
    run = Path(run_dir)
    config = ExperimentConfig.load(run / CONFIG_NAME)
    chash = config.config_hash()
    params = load_params(run / "student_net.ckpt")
    catalog = build_catalog(config.data)
    x, labels, _, _ = stack_samples(catalog.eval)
    vecs = _encode_chunked(params, x)
    pairs = make_pairs(labels, EVAL_SAME_PAIRS, EVAL_DIFF_PAIRS,
                       seed=[config.data.catalog_seed, _PAIR_STREAM])
    acc, thr = verification_accuracy(vecs, pairs)
    gallery_idx, probe_idx = _gallery_split(labels)
    rank1 = identification_rank1(vecs[probe_idx], labels[probe_idx],
                                 vecs[gallery_idx], labels[gallery_idx])
    row = {
        "seed": config.seed,
        "verification_accuracy": acc,
        "threshold": thr,
        "rank1": rank1,
        "num_pairs": pairs.num_pairs,
        "config_hash": chash,
    }
    write_eval_report(run / EVAL_NAME, [row], config_hash=chash)
    return row


def _encode_chunked(params, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    parts = [encode(params, x[lo:lo + chunk]).vectors
             for lo in range(0, x.shape[0], chunk)]
    return np.concatenate(parts)


def _gallery_split(labels: np.ndarray):
    """First view of each identity enrolls as gallery; the rest probe."""
    gallery, probe = [], []
    seen: set[int] = set()
    for i, ident in enumerate(labels):
        if int(ident) in seen:
            probe.append(i)
        else:
            seen.add(int(ident))
            gallery.append(i)
    return np.array(gallery), np.array(probe)


# ---------------------------------------------------------------------------
# comparisons

def variant_config(base: ExperimentConfig, variant: str, seed: int,
                   root) -> ExperimentConfig:
    """Toggle gate / generative term for one ablation arm."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    k = base.gate.k if base.gate.k > 0 else 1
    weight = base.gen.weight if base.gen.weight > 0 else 1.0
    gate_k = k if "_ts" in variant else 0
    gen_w = weight if variant.endswith("_gen") else 0.0
    return dataclasses.replace(
        base,
        seed=seed,
        out_dir=str(Path(root) / f"{variant}_seed{seed}"),
        gate=dataclasses.replace(base.gate, k=gate_k),
        gen=dataclasses.replace(base.gen, weight=gen_w),
    )


def _run_and_eval(config: ExperimentConfig) -> str:
    run_experiment(config)
    evaluate_run(config.out_dir)
    return config.out_dir


def run_compare(base: ExperimentConfig, root, seeds=(0, 1, 2),
                variants=VARIANTS, workers: int | None = None) -> list[dict]:
    """Run the ablation grid and tabulate it.

    workers > 1 fans runs out to processes (set via LATSE_THREADS in the
    CLI); the default stays serial for determinism-friendly debugging."""
    root = Path(root)
    configs = [variant_config(base, v, s, root) for v in variants for s in seeds]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_and_eval, configs))
    else:
        for cfg in configs:
            _run_and_eval(cfg)
    return tabulate_runs([c.out_dir for c in configs], root / "compare.csv")


def variant_label(config: ExperimentConfig) -> str:
    name = "linear" if config.loss.family.value == "linear" else config.loss.family.value
    if config.gate.k > 0:
        name += "_ts"
    if config.gen.weight > 0:
        name += "_gen"
    return name


def tabulate_runs(run_dirs, out_path) -> list[dict]:
    """Collect eval rows from finished runs into one table.

    Refuses run sets whose data configs differ: ablations must share their
    catalog or the comparison is meaningless."""
    entries = []
    for rd in run_dirs:
        run = Path(rd)
        config = ExperimentConfig.load(run / CONFIG_NAME)
        eval_rows = _read_eval(run / EVAL_NAME)
        metrics = read_metrics_csv(run / "metrics.csv")
        entries.append((run, config, eval_rows[0], metrics[-1]))
    if len({c.data for _, c, _, _ in entries}) > 1:
        raise ConfigError("refusing to tabulate runs over different catalogs")
    rows = []
    for run, config, ev, last in entries:
        rows.append({
            "variant": variant_label(config),
            "seed": config.seed,
            "verification_accuracy": float(ev["verification_accuracy"]),
            "rank1": float(ev["rank1"]),
            "final_dloss": last["dloss"],
            "final_gloss": last["gloss"],
            "run_dir": str(run),
        })
    order = {v: i for i, v in enumerate(VARIANTS)}
    rows.sort(key=lambda r: (order.get(r["variant"], 99), r["seed"]))
    means = []
    for variant in dict.fromkeys(r["variant"] for r in rows):
        sub = [r for r in rows if r["variant"] == variant]
        means.append({
            "variant": variant,
            "seed": "mean",
            "verification_accuracy": float(np.mean(
                [r["verification_accuracy"] for r in sub])),
            "rank1": float(np.mean([r["rank1"] for r in sub])),
            "final_dloss": float(np.mean([r["final_dloss"] for r in sub])),
            "final_gloss": float(np.mean([r["final_gloss"] for r in sub])),
            "run_dir": "",
        })
    table = rows + means
    write_eval_report(out_path, table)
    return table


def _read_eval(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append(dict(zip(header, line.split(","))))
    if not rows:
        raise ConfigError(f"no rows in {path}")
    return rows


def compare_workers_from_env() -> int:
    """LATSE_THREADS picks the process count for compare; default serial."""
    raw = os.environ.get("LATSE_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"LATSE_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("LATSE_THREADS must be >= 1")
    return n
