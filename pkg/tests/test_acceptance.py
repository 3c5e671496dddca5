"""Release gate: nine criteria covering the margin auditor, the gradient
oracles, probability invariants, and the comparative training experiments.

Each test prints one PASS/FAIL line (visible with -s, or in failure output).
The experiment criteria retrain real models at full desk scale, so this
module dominates suite runtime; every run is seeded and deterministic."""

import dataclasses
import math
from pathlib import Path

import mpmath as mp
import numpy as np
import pytest

from latse.cli import main
from latse.config import DataConfig, ExperimentConfig, default_config
from latse.data import build_catalog, identity_base, stack_samples
from latse.experiments import evaluate_run, run_experiment
from latse.generative import decode
from latse.gradcheck import run_all
from latse.margins import (
    Family,
    check_principles,
    dloss,
    emit_curves,
    margin_probability,
    standard_specs,
)
from latse.net import (
    backward,
    cos_angles,
    encode,
    encode_with_cache,
    init_centers,
    init_params,
    load_params,
)
from latse.training import (
    batch_schedule,
    encoder_topology,
    lr_at,
    make_schedule,
    read_metrics_csv,
    train_student,
)

GRID_STEP = 1e-3
SEEDS = (0, 1, 2)


def verdict(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {num} ({title}): {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


def small_config(**kw) -> ExperimentConfig:
    cfg = ExperimentConfig(
        seed=3,
        teacher_iters=20,
        student_iters=25,
        metric_interval=5,
        embedding_dim=8,
        hidden_dims=(16,),
        data=DataConfig(catalog_seed=5, train_identities=6,
                        views_per_identity=8, eval_identities=3, eval_views=4,
                        image_h=12, image_w=12),
    )
    cfg = dataclasses.replace(cfg, optim=dataclasses.replace(
        cfg.optim, batch_size=16, decay_points=()))
    return dataclasses.replace(cfg, **kw) if kw else cfg


@pytest.fixture(scope="module")
def audits():
    return {name: check_principles(spec, step=GRID_STEP)
            for name, spec in standard_specs().items()}


@pytest.fixture(scope="module")
def noise_grid(tmp_path_factory):
    """Gated vs ungated training on a mislabeled catalog, three seeds."""
    root = tmp_path_factory.mktemp("noise_grid")
    base = default_config()
    rows = []
    for seed in SEEDS:
        for k in (1, 0):
            cfg = dataclasses.replace(
                base,
                seed=seed,
                teacher_iters=800,
                student_iters=2400,
                out_dir=str(root / f"k{k}_seed{seed}"),
                data=dataclasses.replace(base.data, mess_rate=0.2),
                gate=dataclasses.replace(base.gate, k=k),
                gen=dataclasses.replace(base.gen, weight=0.0),
            )
            summary = run_experiment(cfg)
            ev = evaluate_run(cfg.out_dir)
            rows.append({
                "seed": seed,
                "k": k,
                "acc": ev["verification_accuracy"],
                "recall": summary.get("gate_noise_recall"),
                "falserej": summary.get("gate_clean_false_rejection"),
            })
    return rows


@pytest.fixture(scope="module")
def compare_root(tmp_path_factory):
    """The ablation grid at the default configuration, via the CLI."""
    root = tmp_path_factory.mktemp("compare")
    assert main(["compare", "--out", str(root), "--seeds", "0,1,2"]) == 0
    return root


# ---------------------------------------------------------------------------

def test_criterion_1_principle_audit(audits):
    linear, add_cos, add_angle = (audits[n] for n in
                                  ("linear", "add_cos", "add_angle"))
    aa_left = add_angle.p2_violations[0][0] if add_angle.p2_violations else -1.0
    ok = (linear.passed and add_cos.passed
          and not add_angle.p2_ok
          and abs(aa_left - (math.pi - 0.5)) <= 2e-3)
    verdict(1, "principle audit", ok,
            f"linear {'pass' if linear.passed else 'fail'}, "
            f"add_cos {'pass' if add_cos.passed else 'fail'}, "
            f"add_angle P2 violation starts at {aa_left:.4f} "
            f"(pi-0.5 = {math.pi - 0.5:.4f})")


def test_criterion_2_curve_oracle():
    mp.mp.dps = 50

    def oracle(spec, theta: float) -> float:
        th = mp.mpf(theta)
        if spec.family is Family.SOFTMAX:
            return float(mp.cos(th))
        if spec.family is Family.COMBINED:
            return float(mp.cos(mp.mpf(spec.m1) * th + mp.mpf(spec.m2))
                         - mp.mpf(spec.m3))
        return float(-mp.mpf(spec.a) * th + mp.mpf(spec.b))

    grid = np.array([0.0, 0.3, math.pi / 2.0, math.pi])
    specs = standard_specs()
    table = emit_curves(specs.values(), grid)
    worst = 0.0
    for col, spec in enumerate(specs.values()):
        for row, theta in enumerate(grid):
            worst = max(worst, abs(table.values[row, col]
                                   - oracle(spec, float(theta))))
    pinned = {"softmax": 0.955336, "add_angle": 0.696707,
              "add_cos": 0.605336, "linear": 0.616}
    names = list(specs)
    pin_err = max(abs(table.values[1, names.index(n)] - v)
                  for n, v in pinned.items())
    ok = worst <= 1e-9 and pin_err <= 1e-6
    verdict(2, "curve oracle", ok,
            f"max |curve - high-precision| = {worst:.2e} (tol 1e-9), "
            f"pinned row err = {pin_err:.2e}")


def test_criterion_3_gradient_suite():
    results = run_all(cases=100, seed=0)
    names = {r.name for r in results}
    ok = (all(r.passed for r in results)
          and all(r.cases >= 100 for r in results)
          and all(r.tol <= (1e-4 if r.name == "gloss_ssim" else 1e-5)
                  for r in results)
          and {"dloss_softmax", "dloss_combined", "dloss_linear",
               "gloss_l1", "gloss_ssim", "composition"} <= names)
    worst = max(r.max_rel_err for r in results)
    verdict(3, "gradient suite", ok,
            f"{len(results)} suites x >=100 cases, worst rel err {worst:.2e}")


def test_criterion_4_probability_properties(audits):
    specs = standard_specs()
    p1_passing = [n for n in specs if audits[n].p1_ok]
    assert {"softmax", "add_cos", "linear"} <= set(p1_passing)
    rng = np.random.default_rng(4)
    from latse.margins import AngleBatch

    sum_err = 0.0
    excess = -np.inf
    for _ in range(1000):
        angles = rng.uniform(0.0, math.pi, size=(8, 6))
        labels = rng.integers(0, 6, size=8)
        batch = AngleBatch(angles, labels)
        rows = np.arange(8)
        p_soft = margin_probability(specs["softmax"], batch).probs
        for name, spec in specs.items():
            p = margin_probability(spec, batch).probs
            sum_err = max(sum_err, float(np.abs(p.sum(axis=1) - 1.0).max()))
            if name in p1_passing:
                gap = p[rows, labels] - p_soft[rows, labels]
                excess = max(excess, float(gap.max()))
    ok = sum_err <= 1e-12 and excess <= 1e-15
    verdict(4, "probability properties", ok,
            f"1000 batches x 5 specs: max |row sum - 1| = {sum_err:.2e}, "
            f"max penalty excess over softmax = {excess:.2e}")


def test_criterion_5_noise_filtering(noise_grid):
    gated = [r for r in noise_grid if r["k"] == 1]
    ungated = [r for r in noise_grid if r["k"] == 0]
    mean_g = float(np.mean([r["acc"] for r in gated]))
    mean_u = float(np.mean([r["acc"] for r in ungated]))
    recall = float(np.mean([r["recall"] for r in gated]))
    falserej = float(np.mean([r["falserej"] for r in gated]))
    ok = (mean_g > mean_u
          and all(r["recall"] > r["falserej"] for r in gated))
    verdict(5, "noise filtering", ok,
            f"verification gated {mean_g:.4f} > ungated {mean_u:.4f} "
            f"(delta {mean_g - mean_u:+.4f}); noise recall {recall:.3f} vs "
            f"clean false rejection {falserej:.3f}")


def test_criterion_6_component_ablation(compare_root):
    lines = (compare_root / "compare.csv").read_text().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, l.split(","))) for l in lines[1:]]
    means = {r["variant"]: float(r["verification_accuracy"])
             for r in rows if r["seed"] == "mean"}
    ok = (len(rows) == 4 * len(SEEDS) + 4
          and means["linear_ts_gen"] >= means["linear"])
    verdict(6, "component ablation", ok,
            f"mean verification linear_ts_gen {means['linear_ts_gen']:.4f} "
            f">= linear {means['linear']:.4f}; table has {len(rows)} rows")


def test_criterion_7_generative_convergence(compare_root):
    base = default_config()
    catalog = build_catalog(base.data)
    h, w = base.data.image_h, base.data.image_w
    first: dict[int, np.ndarray] = {}
    for s in catalog.eval:
        first.setdefault(s.label, s.image.reshape(-1))
    eval_ids = sorted(first)
    bases = {i: identity_base(i, base.data) for i in eval_ids}

    ratios, fractions = [], []
    for seed in SEEDS:
        run = compare_root / f"linear_ts_gen_seed{seed}"
        hist = read_metrics_csv(run / "metrics.csv")
        by_iter = {r["iteration"]: r for r in hist}
        ratios.append(hist[-1]["gloss"] / by_iter[10]["gloss"])
        params = load_params(run / "student_net.ckpt")
        dec = load_params(run / "decoder_net.ckpt")
        rng = np.random.default_rng(99)
        closer = 0
        for i in eval_ids:
            emb = encode(params, first[i].reshape(1, -1))
            img = decode(dec, emb.vectors, (h, w)).images[0]
            others = [o for o in eval_ids if o != i]
            other = others[rng.integers(len(others))]
            own = float(np.abs(img - bases[i]).mean())
            oth = float(np.abs(img - bases[other]).mean())
            closer += own < oth
        fractions.append(closer / len(eval_ids))
    ok = all(r < 0.5 for r in ratios) and all(f >= 0.5 for f in fractions)
    verdict(7, "generative convergence", ok,
            "per seed: final/iter-10 gloss "
            + ", ".join(f"{r:.3f}" for r in ratios)
            + "; own-identity proximity "
            + ", ".join(f"{f:.2f}" for f in fractions))


def test_criterion_8_determinism(tmp_path):
    cfg = small_config(teacher_iters=40, student_iters=60)
    runs = []
    for tag in ("a", "b"):
        run_dir = tmp_path / tag
        run_experiment(dataclasses.replace(cfg, out_dir=str(run_dir)))
        evaluate_run(run_dir)
        runs.append(run_dir)
    # config.cfg differs only in out_dir, which the hash excludes by design
    names = sorted(p.name for p in runs[0].iterdir() if p.name != "config.cfg")
    assert names == sorted(p.name for p in runs[1].iterdir()
                           if p.name != "config.cfg")
    diffs = [n for n in names
             if (runs[0] / n).read_bytes() != (runs[1] / n).read_bytes()]
    ok = not diffs and {"metrics.csv", "student_net.ckpt",
                        "decoder_net.ckpt", "eval.csv"} <= set(names)
    verdict(8, "determinism", ok,
            f"{len(names)} artifacts byte-identical across reruns"
            + (f"; differing: {diffs}" if diffs else ""))


def test_criterion_9_baseline_equivalence():
    cfg = small_config(
        student_iters=60,
        metric_interval=1,
        gate=dataclasses.replace(small_config().gate, k=0),
        gen=dataclasses.replace(small_config().gen, weight=0.0),
    )
    result = train_student(cfg)

    x, labels, _, _ = stack_samples(build_catalog(cfg.data).train)
    params = init_params(encoder_topology(cfg), [cfg.seed, 21])
    centers = init_centers(cfg.data.train_identities, cfg.embedding_dim,
                           [cfg.seed, 22])
    batches = batch_schedule(x.shape[0], cfg.optim.batch_size,
                             cfg.student_iters, [cfg.seed, 23])
    sched = make_schedule(cfg.optim, cfg.student_iters)
    arrays = params.arrays() + [centers.centers]
    vels = [np.zeros_like(a) for a in arrays]
    losses = []
    for it in range(1, cfg.student_iters + 1):
        idx = batches[it - 1]
        emb, cache = encode_with_cache(params, x[idx])
        angles = cos_angles(emb, centers, labels[idx])
        res = dloss(cfg.loss, angles)
        losses.append(res.loss)
        grads, d_centers = backward(params, centers, res.grad_theta, emb, cache)
        lr = lr_at(sched, it)
        for a, g, v in zip(arrays, grads + [d_centers], vels):
            v *= cfg.optim.momentum
            v += g + cfg.optim.weight_decay * a
            a -= lr * v
        centers.renormalize()

    got = [row["loss"] for row in result.history]
    divergence = max(abs(h - w) for h, w in zip(got, losses))
    ok = len(got) == len(losses) == cfg.student_iters and divergence <= 1e-12
    verdict(9, "baseline equivalence", ok,
            f"{cfg.student_iters} iterations, max per-iteration loss "
            f"divergence {divergence:.2e}")
