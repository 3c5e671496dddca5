"""Two-phase training.

Phase 1 trains the teacher on DLoss alone.  Phase 2 freezes the teacher and
trains student plus decoder on Loss = DLoss + weight * GLoss, where the
teacher's top-k acceptance decides which samples contribute gradient and
which class mean images get updated.

Determinism contract: all randomness (init, batch order) is derived from
the experiment seed through fixed SeedSequence streams, and the batch order
is precomputed for the whole run, so identical configs give bitwise
identical histories and checkpoints, and a resumed run continues exactly
where it stopped.  The optimizer is momentum SGD with coupled weight decay:
v <- mu*v + (g + wd*w); w <- w - lr*v.  Classifier centers are renormalized
to unit length after every step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from latse.config import ExperimentConfig
from latse.data import build_catalog, stack_samples
from latse.gate import GateStats, filter_gradients, gate, gate_stats, passed_mask
from latse.generative import GenTarget, decode_with_cache, gloss_batch, update_target
from latse.margins import MarginSpec, dloss, margin_probability
from latse.net import (
    ClassifierWeights,
    NetParams,
    Topology,
    backward,
    cos_angles,
    encode,
    encode_with_cache,
    head_backward,
    init_centers,
    init_params,
    net_backward,
    normalize_backward,
)

# SeedSequence stream tags; (config.seed, tag) keys every RNG use
_TEACHER_INIT = 11
_TEACHER_HEAD = 12
_TEACHER_BATCH = 13
_STUDENT_INIT = 21
_STUDENT_HEAD = 22
_STUDENT_BATCH = 23
_DECODER_INIT = 24

METRIC_COLUMNS = ("iteration", "lr", "dloss", "gloss", "loss",
                  "gate_pass_rate", "train_top1")
GATE_LOG_COLUMNS = ("iteration", "sample_id", "label", "passed", "teacher_top1")
AUDIT_COLUMNS = ("sample_id", "label", "true_id", "noise_flag", "passed",
                 "teacher_top1")


class DivergenceError(RuntimeError):
    pass


def _guard(loss: float, iteration: int, phase: str) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"{phase} loss {loss!r} at iteration {iteration}")


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class LrSchedule:
    initial: float
    factor: float
    steps: tuple[int, ...]


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    """Step decay: divide the initial rate by factor once per breakpoint
    at or below the iteration."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    hits = sum(1 for s in schedule.steps if s <= iteration)
    return schedule.initial / schedule.factor ** hits


def make_schedule(optim, total_iters: int) -> LrSchedule:
    steps = tuple(int(round(p * total_iters)) for p in optim.decay_points)
    return LrSchedule(initial=optim.lr, factor=optim.decay_factor, steps=steps)


def batch_schedule(num_samples: int, batch_size: int, iterations: int,
                   seed) -> np.ndarray:
    """Precomputed batch index table, (iterations, batch_size).

    Epoch structure: a fresh permutation per pass, partial tail dropped."""
    if batch_size > num_samples:
        raise ValueError(f"batch {batch_size} larger than dataset {num_samples}")
    per_epoch = num_samples // batch_size
    rng = np.random.default_rng(seed)
    chunks = []
    have = 0
    while have < iterations:
        perm = rng.permutation(num_samples)[:per_epoch * batch_size]
        chunks.append(perm.reshape(per_epoch, batch_size))
        have += per_epoch
    return np.concatenate(chunks)[:iterations]


class Sgd:
    """Momentum SGD with coupled weight decay, updating arrays in place."""

    def __init__(self, arrays: list[np.ndarray]):
        self.velocities = [np.zeros_like(a) for a in arrays]

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray],
             lr: float, momentum: float, weight_decay: float) -> None:
        if len(arrays) != len(self.velocities) or len(grads) != len(self.velocities):
            raise ValueError("array/gradient count mismatch")
        for a, g, v in zip(arrays, grads, self.velocities):
            v *= momentum
            v += g + weight_decay * a
            a -= lr * v


# ---------------------------------------------------------------------------
# topologies and log points

def encoder_topology(config: ExperimentConfig) -> Topology:
    pixels = config.data.image_h * config.data.image_w
    return Topology((pixels, *config.hidden_dims, config.embedding_dim))


def decoder_topology(config: ExperimentConfig) -> Topology:
    pixels = config.data.image_h * config.data.image_w
    return Topology((config.embedding_dim, *reversed(config.hidden_dims), pixels),
                    output="sigmoid")


def _log_points(total: int, interval: int) -> set[int]:
    pts = set(range(interval, total + 1, interval))
    pts.add(1)
    pts.add(total)
    return pts


# ---------------------------------------------------------------------------
# phase 1: teacher

@dataclass
class TeacherResult:
    params: NetParams
    centers: ClassifierWeights
    history: list[dict]


def train_teacher(config: ExperimentConfig) -> TeacherResult:
    """DLoss-only training of the teacher encoder and its classifier."""
    catalog = build_catalog(config.data)
    x, labels, _, _ = stack_samples(catalog.train)
    params = init_params(encoder_topology(config), [config.seed, _TEACHER_INIT])
    centers = init_centers(config.data.train_identities, config.embedding_dim,
                           [config.seed, _TEACHER_HEAD])
    history: list[dict] = []
    if config.teacher_iters == 0:
        return TeacherResult(params, centers, history)
    schedule = make_schedule(config.optim, config.teacher_iters)
    batches = batch_schedule(x.shape[0], config.optim.batch_size,
                             config.teacher_iters, [config.seed, _TEACHER_BATCH])
    opt = Sgd(params.arrays() + [centers.centers])
    log_points = _log_points(config.teacher_iters, config.metric_interval)
    for it in range(1, config.teacher_iters + 1):
        idx = batches[it - 1]
        xb, yb = x[idx], labels[idx]
        emb, cache = encode_with_cache(params, xb)
        angles = cos_angles(emb, centers, yb)
        res = dloss(config.loss, angles)
        _guard(res.loss, it, "teacher")
        grads, d_centers = backward(params, centers, res.grad_theta, emb, cache)
        lr = lr_at(schedule, it)
        opt.step(params.arrays() + [centers.centers], grads + [d_centers],
                 lr, config.optim.momentum, config.optim.weight_decay)
        centers.renormalize()
        if it in log_points:
            top1 = float(np.mean(np.argmin(angles.angles, axis=1) == yb))
            history.append({"iteration": it, "lr": lr, "dloss": res.loss,
                            "gloss": 0.0, "loss": res.loss,
                            "gate_pass_rate": 1.0, "train_top1": top1})
    return TeacherResult(params, centers, history)


# ---------------------------------------------------------------------------
# phase 2: student + decoder

@dataclass
class TrainState:
    """Everything needed to continue a student run mid-stream."""

    iteration: int
    params: NetParams
    centers: ClassifierWeights
    decoder: NetParams | None
    teacher: TeacherResult | None
    targets: dict[int, GenTarget] | None
    velocities: list[np.ndarray]
    history: list[dict] = field(default_factory=list)
    gate_rows: list[tuple] = field(default_factory=list)


@dataclass
class StudentResult:
    params: NetParams
    centers: ClassifierWeights
    decoder: NetParams | None
    history: list[dict]
    gate_rows: list[tuple]
    targets: dict[int, GenTarget] | None
    state: TrainState


def _fresh_targets(config: ExperimentConfig) -> dict[int, GenTarget]:
    h, w = config.data.image_h, config.data.image_w
    return {c: GenTarget(identity=c, image=np.zeros((h, w)),
                         momentum=config.gen.momentum)
            for c in range(config.data.train_identities)}


def train_student(config: ExperimentConfig, teacher: TeacherResult | None = None,
                  state: TrainState | None = None) -> StudentResult:
    """Algorithm phase 2; see the module docstring for the per-iteration
    order.  With k = 0 the teacher is unused; with gen weight 0 the decoder
    never runs, which makes the run equal to plain margin-softmax training."""
    gate_on = config.gate.k > 0
    gen_on = config.gen.weight > 0.0
    if gate_on and teacher is None and state is None:
        raise ValueError("gating requested but no teacher given")
    catalog = build_catalog(config.data)
    x, labels, _, _ = stack_samples(catalog.train)
    h, w = config.data.image_h, config.data.image_w

    if state is not None:
        params, centers, dec_params = state.params, state.centers, state.decoder
        teacher = state.teacher if state.teacher is not None else teacher
        targets = state.targets
        history = list(state.history)
        gate_rows = list(state.gate_rows)
        start = state.iteration
    else:
        params = init_params(encoder_topology(config), [config.seed, _STUDENT_INIT])
        centers = init_centers(config.data.train_identities, config.embedding_dim,
                               [config.seed, _STUDENT_HEAD])
        dec_params = (init_params(decoder_topology(config),
                                  [config.seed, _DECODER_INIT]) if gen_on else None)
        targets = _fresh_targets(config) if gen_on else None
        history = []
        gate_rows = []
        start = 0

    if gate_on and teacher is None:
        raise ValueError("resume state lacks the teacher needed for gating")

    gate_spec = MarginSpec.softmax(s=config.loss.s)  # margin-free ranking
    ssim_cfg = config.gen.ssim_config()
    schedule = make_schedule(config.optim, config.student_iters)
    batches = batch_schedule(x.shape[0], config.optim.batch_size,
                             config.student_iters, [config.seed, _STUDENT_BATCH])
    arrays = params.arrays() + [centers.centers]
    if gen_on:
        arrays += dec_params.arrays()
    opt = Sgd(arrays)
    if state is not None:
        for v, sv in zip(opt.velocities, state.velocities):
            v[...] = sv
    log_points = _log_points(config.student_iters, config.metric_interval)
    full_scope = config.gate.scope == "full_sample"

    for it in range(start + 1, config.student_iters + 1):
        idx = batches[it - 1]
        xb, yb = x[idx], labels[idx]
        n = idx.size

        if gate_on:
            t_emb = encode(teacher.params, xb)
            t_angles = cos_angles(t_emb, teacher.centers, yb)
            t_probs = margin_probability(gate_spec, t_angles)
            decisions = gate(t_probs, yb, config.gate.k)
            mask = passed_mask(decisions)
            for d, sample_id in zip(decisions, idx):
                gate_rows.append((it, int(sample_id), d.label, int(d.passed),
                                  d.teacher_top_k[0]))
        else:
            decisions = None
            mask = np.ones(n, dtype=bool)

        emb, cache = encode_with_cache(params, xb)
        angles = cos_angles(emb, centers, yb)
        res = dloss(config.loss, angles)
        grad_theta = res.grad_theta
        if gate_on and full_scope:
            grad_theta = grad_theta.copy()
            grad_theta[~mask] = 0.0
        d_emb, d_centers = head_backward(emb, centers, grad_theta)

        gl = 0.0
        dec_grads = None
        if gen_on:
            imgs = xb.reshape(n, h, w)
            if config.gen.target_mode == "momentum":
                update = mask if config.gen.update_gated_only else np.ones(n, bool)
                for i in np.flatnonzero(update):
                    update_target(targets[int(yb[i])], imgs[i], int(yb[i]))
                # uninitialized targets fall back to the sample itself (zero loss)
                tgt = np.stack([
                    targets[int(l)].image if targets[int(l)].initialized else imgs[i]
                    for i, l in enumerate(yb)
                ])
            else:
                tgt = imgs
            gen_out, dec_cache = decode_with_cache(dec_params, emb.vectors, (h, w))
            raw_gl, pix_grad = gloss_batch(gen_out.images, tgt, ssim_cfg)
            gl = config.gen.weight * raw_gl
            pix = config.gen.weight * pix_grad
            if gate_on and full_scope:
                pix[~mask] = 0.0
            d_flat, dec_grads = net_backward(dec_params, dec_cache,
                                             pix.reshape(n, -1))
            d_emb = d_emb + d_flat

        if gate_on:
            d_emb, _ = filter_gradients(decisions, d_emb)
        d_raw = normalize_backward(emb, d_emb)
        _, s_grads = net_backward(params, cache, d_raw)

        loss = res.loss + gl
        _guard(loss, it, "student")
        lr = lr_at(schedule, it)
        arrays = params.arrays() + [centers.centers]
        grads = s_grads + [d_centers]
        if gen_on:
            arrays += dec_params.arrays()
            grads += dec_grads
        opt.step(arrays, grads, lr, config.optim.momentum,
                 config.optim.weight_decay)
        centers.renormalize()

        if it in log_points:
            top1 = float(np.mean(np.argmin(angles.angles, axis=1) == yb))
            history.append({"iteration": it, "lr": lr, "dloss": res.loss,
                            "gloss": gl, "loss": loss,
                            "gate_pass_rate": float(mask.mean()),
                            "train_top1": top1})

    final = TrainState(iteration=config.student_iters, params=params,
                       centers=centers, decoder=dec_params, teacher=teacher,
                       targets=targets, velocities=opt.velocities,
                       history=history, gate_rows=gate_rows)
    return StudentResult(params=params, centers=centers, decoder=dec_params,
                         history=history, gate_rows=gate_rows, targets=targets,
                         state=final)


# ---------------------------------------------------------------------------
# gate audit over the full training set

def audit_gate(config: ExperimentConfig, teacher: TeacherResult,
               chunk: int = 512):
    """Teacher decisions for every training sample against ground truth.

    Returns (rows in AUDIT_COLUMNS order, GateStats)."""
    catalog = build_catalog(config.data)
    x, labels, true_ids, noisy = stack_samples(catalog.train)
    gate_spec = MarginSpec.softmax(s=config.loss.s)
    rows = []
    passed = np.empty(x.shape[0], dtype=bool)
    for lo in range(0, x.shape[0], chunk):
        hi = min(lo + chunk, x.shape[0])
        emb = encode(teacher.params, x[lo:hi])
        angles = cos_angles(emb, teacher.centers, labels[lo:hi])
        probs = margin_probability(gate_spec, angles)
        decisions = gate(probs, labels[lo:hi], config.gate.k)
        for d in decisions:
            i = lo + d.sample_index
            passed[i] = d.passed
            rows.append((i, d.label, int(true_ids[i]),
                         catalog.train[i].noise_flag.value, int(d.passed),
                         d.teacher_top_k[0]))
    return rows, gate_stats(passed, noisy)


# ---------------------------------------------------------------------------
# CSV artifacts

def write_metrics_csv(path, history: list[dict], config_hash: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in history:
            cells = [str(row["iteration"])]
            cells += [repr(float(row[c])) for c in METRIC_COLUMNS[1:]]
            fh.write(",".join(cells) + "\n")


def read_metrics_csv(path) -> list[dict]:
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
            parts = line.split(",")
            row = dict(zip(header, parts))
            row["iteration"] = int(row["iteration"])
            for key in header[1:]:
                row[key] = float(row[key])
            rows.append(row)
    return rows


def write_gate_log(path, rows: list[tuple], config_hash: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(",".join(GATE_LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def write_gate_audit(path, rows: list[tuple], stats: GateStats,
                     config_hash: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        for line in stats.lines()[1:]:
            fh.write(f"# {line}\n")
        fh.write(",".join(AUDIT_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# resume state on disk (internal format, numpy archive)

def _pack_net(store: dict, prefix: str, params: NetParams) -> None:
    store[f"{prefix}_dims"] = np.array(params.topology.dims, dtype=np.int64)
    store[f"{prefix}_acts"] = np.array(
        [params.topology.hidden, params.topology.output])
    for i, (wgt, bias) in enumerate(zip(params.weights, params.biases)):
        store[f"{prefix}_w{i}"] = wgt
        store[f"{prefix}_b{i}"] = bias


def _unpack_net(store, prefix: str) -> NetParams:
    dims = tuple(int(d) for d in store[f"{prefix}_dims"])
    hidden, output = (str(a) for a in store[f"{prefix}_acts"])
    topo = Topology(dims, hidden=hidden, output=output)
    weights = [store[f"{prefix}_w{i}"].copy() for i in range(len(dims) - 1)]
    biases = [store[f"{prefix}_b{i}"].copy() for i in range(len(dims) - 1)]
    return NetParams(topo, weights, biases)


def save_state(path, state: TrainState) -> None:
    store: dict[str, np.ndarray] = {"iteration": np.array(state.iteration)}
    _pack_net(store, "student", state.params)
    store["centers"] = state.centers.centers
    if state.decoder is not None:
        _pack_net(store, "decoder", state.decoder)
    if state.teacher is not None:
        _pack_net(store, "teacher", state.teacher.params)
        store["teacher_centers"] = state.teacher.centers.centers
    if state.targets is not None:
        ids = np.array(sorted(state.targets), dtype=np.int64)
        store["target_ids"] = ids
        store["target_images"] = np.stack([state.targets[int(i)].image for i in ids])
        store["target_init"] = np.array(
            [state.targets[int(i)].initialized for i in ids], dtype=bool)
        store["target_momentum"] = np.array(
            state.targets[int(ids[0])].momentum if ids.size else 0.0)
    for i, v in enumerate(state.velocities):
        store[f"vel_{i}"] = v
    store["num_velocities"] = np.array(len(state.velocities))
    hist = np.array([[row[c] for c in METRIC_COLUMNS] for row in state.history],
                    dtype=float).reshape(len(state.history), len(METRIC_COLUMNS))
    store["history"] = hist
    store["gate_rows"] = np.array(state.gate_rows, dtype=np.int64).reshape(
        len(state.gate_rows), 5 if state.gate_rows else 0)
    np.savez(path, **store)


def load_state(path) -> TrainState:
    with np.load(path, allow_pickle=False) as store:
        params = _unpack_net(store, "student")
        centers = ClassifierWeights(store["centers"].copy())
        decoder = _unpack_net(store, "decoder") if "decoder_dims" in store else None
        teacher = None
        if "teacher_dims" in store:
            teacher = TeacherResult(_unpack_net(store, "teacher"),
                                    ClassifierWeights(store["teacher_centers"].copy()),
                                    history=[])
        targets = None
        if "target_ids" in store:
            momentum = float(store["target_momentum"])
            targets = {}
            for i, ident in enumerate(store["target_ids"]):
                targets[int(ident)] = GenTarget(
                    identity=int(ident), image=store["target_images"][i].copy(),
                    momentum=momentum, initialized=bool(store["target_init"][i]))
        velocities = [store[f"vel_{i}"].copy()
                      for i in range(int(store["num_velocities"]))]
        history = []
        for row in store["history"]:
            rec = dict(zip(METRIC_COLUMNS, (float(v) for v in row)))
            rec["iteration"] = int(rec["iteration"])
            history.append(rec)
        gate_rows = [tuple(int(v) for v in row) for row in store["gate_rows"]]
        iteration = int(store["iteration"])
    return TrainState(iteration=iteration, params=params,
                      centers=centers, decoder=decoder, teacher=teacher,
                      targets=targets, velocities=velocities,
                      history=history, gate_rows=gate_rows)
