"""Two-phase trainer: schedules, determinism, gating semantics, resume."""

import dataclasses

import numpy as np
import pytest

import latse.training as training
from latse.config import DataConfig, ExperimentConfig
from latse.gate import GateDecision
from latse.margins import dloss
from latse.net import (
    cos_angles,
    encode_with_cache,
    backward,
    init_centers,
    init_params,
    params_to_vector,
)
from latse.training import (
    DivergenceError,
    LrSchedule,
    METRIC_COLUMNS,
    Sgd,
    TrainState,
    audit_gate,
    batch_schedule,
    decoder_topology,
    encoder_topology,
    load_state,
    lr_at,
    make_schedule,
    read_metrics_csv,
    save_state,
    train_student,
    train_teacher,
    write_gate_audit,
    write_gate_log,
    write_metrics_csv,
)


def tiny_config(**kw) -> ExperimentConfig:
    cfg = ExperimentConfig(
        seed=3,
        teacher_iters=25,
        student_iters=30,
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


# ---------------------------------------------------------------------------
# schedules

def test_lr_step_decay_examples():
    sched = LrSchedule(initial=0.1, factor=10.0, steps=(100, 200))
    assert lr_at(sched, 50) == pytest.approx(0.1)
    assert lr_at(sched, 100) == pytest.approx(0.01)  # breakpoints hit at, not after
    assert lr_at(sched, 150) == pytest.approx(0.01)
    assert lr_at(sched, 250) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        lr_at(sched, -1)


def test_make_schedule_rounds_fractions():
    cfg = tiny_config()
    optim = dataclasses.replace(cfg.optim, decay_points=(0.6, 0.8))
    sched = make_schedule(optim, 900)
    assert sched.steps == (540, 720)
    assert make_schedule(optim, 1000).steps == (600, 800)


def test_batch_schedule_epochs_and_determinism():
    a = batch_schedule(10, 3, 7, seed=[1, 13])
    b = batch_schedule(10, 3, 7, seed=[1, 13])
    assert np.array_equal(a, b)
    assert a.shape == (7, 3)
    assert a.min() >= 0 and a.max() < 10
    # one epoch = three batches of a single permutation: no repeats inside
    epoch = a[:3].ravel()
    assert len(set(epoch)) == 9
    with pytest.raises(ValueError):
        batch_schedule(5, 6, 2, seed=0)


def test_batch_schedule_prefix_stability():
    # a longer run's schedule starts with the shorter run's rows
    short = batch_schedule(48, 16, 10, seed=[3, 23])
    long = batch_schedule(48, 16, 25, seed=[3, 23])
    assert np.array_equal(long[:10], short)


def test_sgd_step_by_hand():
    a = np.array([1.0, -2.0])
    opt = Sgd([a])
    opt.step([a], [np.array([0.5, 0.5])], lr=0.1, momentum=0.9,
             weight_decay=0.0)
    np.testing.assert_allclose(a, [0.95, -2.05], atol=1e-15)
    # velocity carries over: v = 0.9*0.5 + 0.5 = 0.95
    opt.step([a], [np.array([0.5, 0.5])], lr=0.1, momentum=0.9,
             weight_decay=0.0)
    np.testing.assert_allclose(a, [0.95 - 0.095, -2.05 - 0.095], atol=1e-15)


def test_topologies_mirror():
    cfg = tiny_config()
    enc = encoder_topology(cfg)
    dec = decoder_topology(cfg)
    assert enc.dims == (144, 16, 8)
    assert dec.dims == (8, 16, 144)
    assert dec.output == "sigmoid"
    assert enc.output == "linear"


# ---------------------------------------------------------------------------
# teacher

def test_teacher_learns_separable_toy():
    cfg = tiny_config(
        teacher_iters=150,
        data=DataConfig(catalog_seed=5, train_identities=2,
                        views_per_identity=20, eval_identities=2, eval_views=2,
                        image_h=12, image_w=12, jitter=1.0, pixel_noise=0.02))
    result = train_teacher(cfg)
    assert result.history[-1]["train_top1"] > 0.95
    assert result.history[0]["iteration"] == 1
    assert result.history[-1]["iteration"] == 150


def test_teacher_zero_iters_is_init_only():
    cfg = tiny_config(teacher_iters=0)
    result = train_teacher(cfg)
    assert result.history == []
    fresh = init_params(encoder_topology(cfg), [cfg.seed, 11])
    for a, b in zip(result.params.arrays(), fresh.arrays()):
        assert np.array_equal(a, b)


def test_teacher_is_deterministic():
    cfg = tiny_config()
    a = train_teacher(cfg)
    b = train_teacher(cfg)
    assert a.history == b.history
    assert np.array_equal(params_to_vector(a.params), params_to_vector(b.params))
    assert np.array_equal(a.centers.centers, b.centers.centers)


def test_history_log_points():
    cfg = tiny_config(teacher_iters=12, metric_interval=5)
    result = train_teacher(cfg)
    assert [r["iteration"] for r in result.history] == [1, 5, 10, 12]


# ---------------------------------------------------------------------------
# student

def test_student_requires_teacher_for_gating():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        train_student(cfg)


def test_student_run_invariants():
    cfg = tiny_config()
    teacher = train_teacher(cfg)
    result = train_student(cfg, teacher)
    # loss column is the exact sum of the logged parts
    for row in result.history:
        assert row["loss"] == row["dloss"] + row["gloss"]
        assert 0.0 <= row["gate_pass_rate"] <= 1.0
    # centers stay unit length
    norms = np.linalg.norm(result.centers.centers, axis=1)
    assert np.abs(norms - 1.0).max() <= 1e-9
    # gate log has one row per gated sample
    assert len(result.gate_rows) == cfg.student_iters * cfg.optim.batch_size
    it, sample_id, label, passed, top1 = result.gate_rows[0]
    assert it == 1 and 0 <= sample_id < 48 and passed in (0, 1)


def test_student_determinism_and_teacher_frozen():
    cfg = tiny_config()
    teacher = train_teacher(cfg)
    t_params = params_to_vector(teacher.params).copy()
    t_centers = teacher.centers.centers.copy()
    a = train_student(cfg, teacher)
    b = train_student(cfg, teacher)
    assert a.history == b.history
    assert np.array_equal(params_to_vector(a.params), params_to_vector(b.params))
    assert np.array_equal(a.decoder and params_to_vector(a.decoder),
                          b.decoder and params_to_vector(b.decoder))
    # the student never touches the teacher
    assert np.array_equal(params_to_vector(teacher.params), t_params)
    assert np.array_equal(teacher.centers.centers, t_centers)


def test_gloss_tracks_weight_and_gen_off_skips_decoder():
    cfg_off = tiny_config(gen=dataclasses.replace(tiny_config().gen, weight=0.0))
    teacher = train_teacher(cfg_off)
    result = train_student(cfg_off, teacher)
    assert result.decoder is None
    assert result.targets is None
    assert all(row["gloss"] == 0.0 for row in result.history)

    cfg_on = tiny_config()
    result_on = train_student(cfg_on, train_teacher(cfg_on))
    assert result_on.decoder is not None
    assert all(row["gloss"] > 0.0 for row in result_on.history)


def test_baseline_equivalence_with_reference_loop():
    """k = 0 and zero generative weight must reproduce a hand-rolled
    margin-classifier loop built from the verified primitives."""
    cfg = tiny_config(
        gate=dataclasses.replace(tiny_config().gate, k=0),
        gen=dataclasses.replace(tiny_config().gen, weight=0.0),
        metric_interval=1,
    )
    result = train_student(cfg)

    from latse.data import build_catalog, stack_samples
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
    assert len(got) == len(losses)
    for have, want in zip(got, losses):
        assert abs(have - want) <= 1e-12
    np.testing.assert_allclose(params_to_vector(result.params),
                               params_to_vector(params), rtol=0, atol=1e-12)


def test_all_rejected_batch_changes_nothing(monkeypatch):
    """A teacher that rejects everything yields zero gradients; without
    weight decay the whole parameter set stays put."""
    def reject_all(probs, labels, k):
        return [GateDecision(i, int(l), (0,), False)
                for i, l in enumerate(labels)]

    monkeypatch.setattr(training, "gate", reject_all)
    cfg = tiny_config(optim=dataclasses.replace(
        tiny_config().optim, weight_decay=0.0))
    teacher = train_teacher(cfg)
    p0 = params_to_vector(init_params(encoder_topology(cfg), [cfg.seed, 21]))
    d0 = params_to_vector(init_params(decoder_topology(cfg), [cfg.seed, 24]))
    c0 = init_centers(cfg.data.train_identities, cfg.embedding_dim,
                      [cfg.seed, 22]).centers.copy()
    result = train_student(cfg, teacher)
    assert all(row["gate_pass_rate"] == 0.0 for row in result.history)
    assert np.array_equal(params_to_vector(result.params), p0)
    assert np.array_equal(params_to_vector(result.decoder), d0)
    # centers see only the per-step renormalization, which drifts low bits
    np.testing.assert_allclose(result.centers.centers, c0, rtol=0, atol=1e-13)
    # momentum targets were never initialized
    assert not any(t.initialized for t in result.targets.values())


def test_embedding_only_scope_still_updates_centers(monkeypatch):
    def reject_all(probs, labels, k):
        return [GateDecision(i, int(l), (0,), False)
                for i, l in enumerate(labels)]

    monkeypatch.setattr(training, "gate", reject_all)
    base = tiny_config(optim=dataclasses.replace(
        tiny_config().optim, weight_decay=0.0),
        gen=dataclasses.replace(tiny_config().gen, weight=0.0))
    cfg = dataclasses.replace(base, gate=dataclasses.replace(
        base.gate, scope="embedding_only"))
    teacher = train_teacher(cfg)
    p0 = params_to_vector(init_params(encoder_topology(cfg), [cfg.seed, 21]))
    c0 = init_centers(cfg.data.train_identities, cfg.embedding_dim,
                      [cfg.seed, 22]).centers.copy()
    result = train_student(cfg, teacher)
    # encoder still frozen: its gradient rows are filtered per sample
    assert np.array_equal(params_to_vector(result.params), p0)
    # but the classifier head keeps training on the unfiltered angles
    assert np.abs(result.centers.centers - c0).max() > 1e-6


def test_divergence_guard_raises():
    cfg = tiny_config(
        student_iters=10,
        gate=dataclasses.replace(tiny_config().gate, k=0),
        gen=dataclasses.replace(tiny_config().gen, weight=0.0),
        optim=dataclasses.replace(tiny_config().optim, lr=1e200),
    )
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        train_student(cfg)


def test_resume_matches_straight_run(tmp_path):
    cfg = tiny_config()
    teacher = train_teacher(cfg)
    straight = train_student(cfg, teacher)

    half_cfg = dataclasses.replace(cfg, student_iters=15)
    half = train_student(half_cfg, teacher)
    path = tmp_path / "state.npz"
    save_state(path, half.state)
    state = load_state(path)
    resumed = train_student(cfg, state=state)

    assert resumed.history == straight.history
    assert np.array_equal(params_to_vector(resumed.params),
                          params_to_vector(straight.params))
    assert np.array_equal(resumed.centers.centers, straight.centers.centers)
    assert np.array_equal(params_to_vector(resumed.decoder),
                          params_to_vector(straight.decoder))
    assert resumed.gate_rows == straight.gate_rows
    for ident in straight.targets:
        assert np.array_equal(resumed.targets[ident].image,
                              straight.targets[ident].image)
        assert resumed.targets[ident].initialized == \
            straight.targets[ident].initialized


def test_state_round_trip(tmp_path):
    cfg = tiny_config()
    teacher = train_teacher(cfg)
    state = train_student(cfg, teacher).state
    path = tmp_path / "state.npz"
    save_state(path, state)
    back = load_state(path)
    assert back.iteration == state.iteration
    assert np.array_equal(params_to_vector(back.params),
                          params_to_vector(state.params))
    assert np.array_equal(back.centers.centers, state.centers.centers)
    assert np.array_equal(params_to_vector(back.teacher.params),
                          params_to_vector(state.teacher.params))
    for v1, v2 in zip(back.velocities, state.velocities):
        assert np.array_equal(v1, v2)
    assert back.history == state.history
    assert back.gate_rows == state.gate_rows


# ---------------------------------------------------------------------------
# audit and CSV artifacts

def test_audit_gate_counts():
    cfg = tiny_config(data=dataclasses.replace(tiny_config().data,
                                               mess_rate=0.25))
    teacher = train_teacher(cfg)
    rows, stats = audit_gate(cfg, teacher, chunk=7)
    n = cfg.data.train_identities * cfg.data.views_per_identity
    assert len(rows) == n
    assert stats.total == n
    assert stats.noisy == int(0.25 * n)
    # recount from rows: columns are sample_id, label, true_id, flag, passed, top1
    rejected = sum(1 for r in rows if r[4] == 0)
    assert rejected == stats.rejected
    assert {r[3] for r in rows} <= {"clean", "label_mess", "distractor"}


def test_metrics_csv_round_trip(tmp_path):
    cfg = tiny_config()
    history = train_teacher(cfg).history
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, history, config_hash="ab" * 32)
    text = path.read_text()
    assert text.startswith("# config_hash=" + "ab" * 32)
    assert text.splitlines()[1] == ",".join(METRIC_COLUMNS)
    assert read_metrics_csv(path) == history


def test_gate_log_and_audit_files(tmp_path):
    cfg = tiny_config()
    teacher = train_teacher(cfg)
    result = train_student(cfg, teacher)
    log_path = tmp_path / "gate_log.csv"
    write_gate_log(log_path, result.gate_rows, config_hash="cd" * 32)
    lines = log_path.read_text().splitlines()
    assert lines[1] == "iteration,sample_id,label,passed,teacher_top1"
    assert len(lines) == 2 + len(result.gate_rows)

    rows, stats = audit_gate(cfg, teacher)
    audit_path = tmp_path / "gate_audit.csv"
    write_gate_audit(audit_path, rows, stats, config_hash="cd" * 32)
    audit_lines = audit_path.read_text().splitlines()
    assert audit_lines[0] == "# config_hash=" + "cd" * 32
    assert any(l.startswith("# noise_recall,") for l in audit_lines)
    header_at = next(i for i, l in enumerate(audit_lines)
                     if not l.startswith("#"))
    assert audit_lines[header_at] == \
        "sample_id,label,true_id,noise_flag,passed,teacher_top1"
