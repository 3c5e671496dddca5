"""Analytic gradients against central finite differences.

Three suites: DLoss through the angles (per margin family), GLoss through
the generated image (L1 term alone, then with the structural term), and the
full composition images -> encoder -> normalization -> angles -> DLoss
differentiated w.r.t. every net parameter and class center.  Random cases
are drawn away from the few genuine kinks (L1 at zero difference, the
arccos clamp), where one-sided derivatives would make the comparison
meaningless rather than wrong."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from latse.generative import SsimConfig, gloss
from latse.margins import AngleBatch, Family, MarginSpec, dloss
from latse.net import (
    Topology,
    backward,
    cos_angles,
    encode_with_cache,
    fd_oracle,
    grads_to_vector,
    init_centers,
    init_params,
    params_to_vector,
    vector_to_params,
)

FD_STEP = 1e-6
TOL_DEFAULT = 1e-5
TOL_SSIM = 1e-4
# Central differences on losses as large as -log(LOG_FLOOR) carry roundoff
# of about |loss|*eps/(2h) ~ 5e-9 absolute, so a gradient below this floor
# cannot be resolved against TOL_DEFAULT; such saturated draws are redrawn.
MIN_MEASURABLE_GRAD = 1e-3


@dataclass
class GradCheckResult:
    name: str
    cases: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{self.name}: {verdict} cases={self.cases} "
                f"max_rel_err={self.max_rel_err:.3e} tol={self.tol:g}")


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    analytic = np.asarray(analytic, float).ravel()
    fd = np.asarray(fd, float).ravel()
    scale = max(float(np.max(np.abs(fd))), 1e-8)
    return float(np.max(np.abs(analytic - fd))) / scale


def _random_spec(family: Family, rng) -> MarginSpec:
    s = float(rng.choice([4.0, 16.0, 30.0]))
    if family is Family.SOFTMAX:
        return MarginSpec.softmax(s=s)
    if family is Family.COMBINED:
        return MarginSpec.combined(m1=float(rng.choice([1.0, 2.0, 4.0])),
                                   m2=float(rng.uniform(0.0, 0.6)),
                                   m3=float(rng.uniform(0.0, 0.4)), s=s)
    return MarginSpec.linear(a=float(rng.uniform(0.4, 1.2)),
                             b=float(rng.uniform(0.0, 1.2)), s=s)


def check_dloss(cases: int = 100, seed: int = 0) -> list[GradCheckResult]:
    """DLoss gradient w.r.t. the full angle matrix, one suite per family."""
    results = []
    for fam_tag, family in enumerate((Family.SOFTMAX, Family.COMBINED,
                                      Family.LINEAR), start=1):
        rng = np.random.default_rng([seed, fam_tag])
        worst = 0.0
        for _ in range(cases):
            for _attempt in range(50):
                n = int(rng.integers(1, 6))
                k = int(rng.integers(2, 9))
                spec = _random_spec(family, rng)
                angles = rng.uniform(0.02, np.pi - 0.02, size=(n, k))
                targets = rng.integers(0, k, size=n)
                batch = AngleBatch(angles.copy(), targets)
                res = dloss(spec, batch)
                # a clamped loss is locally flat and a saturated one has
                # gradients below finite-difference noise; neither draw can
                # measure the analytic gradient, so take a fresh one
                if (not res.clamped
                        and np.abs(res.grad_theta).max() >= MIN_MEASURABLE_GRAD):
                    break
            else:
                raise RuntimeError("no finite-difference-measurable case "
                                   f"found for {family.value}")

            def f(vec, shape=(n, k), t=targets, sp=spec):
                return dloss(sp, AngleBatch(vec.reshape(shape), t)).loss

            fd = fd_oracle(f, angles.copy(), h=FD_STEP)
            worst = max(worst, _rel_err(res.grad_theta, fd))
        results.append(GradCheckResult(f"dloss_{family.value}", cases, worst,
                                       TOL_DEFAULT))
    return results


def _gloss_case(rng, enabled: bool, side: int):
    """A pair with every pixel at least 1e-3 away from the L1 kink."""
    y = rng.uniform(0.2, 0.8, size=(side, side))
    offset = rng.uniform(1e-3, 0.15, size=(side, side))
    signs = rng.choice([-1.0, 1.0], size=(side, side))
    x = np.clip(y + signs * offset, 0.0, 1.0)
    cfg = SsimConfig(enabled=enabled)
    return x, y, cfg


def check_gloss(cases: int = 100, seed: int = 0,
                probe_coords: int = 16) -> list[GradCheckResult]:
    """GLoss gradient w.r.t. the generated image.

    The L1-only suite runs on tiny images; the structural suite uses images
    just above the window size.  Finite differences probe a random subset
    of pixels per case to stay fast; every case uses a fresh subset."""
    results = []
    for name, enabled, side, tol in (("gloss_l1", False, 6, TOL_DEFAULT),
                                     ("gloss_ssim", True, 13, TOL_SSIM)):
        rng = np.random.default_rng([seed, 5 if enabled else 4])
        worst = 0.0
        for _ in range(cases):
            x, y, cfg = _gloss_case(rng, enabled, side)
            _, grad = gloss(x, y, cfg)
            coords = rng.choice(x.size, size=min(probe_coords, x.size),
                                replace=False)
            flat = x.ravel()
            for c in coords:
                orig = flat[c]
                flat[c] = orig + FD_STEP
                up = gloss(x, y, cfg)[0]
                flat[c] = orig - FD_STEP
                down = gloss(x, y, cfg)[0]
                flat[c] = orig
                fd = (up - down) / (2.0 * FD_STEP)
                scale = max(float(np.max(np.abs(grad))), 1e-8)
                worst = max(worst, abs(grad.ravel()[c] - fd) / scale)
        results.append(GradCheckResult(name, cases, worst, tol))
    return results


def check_composition(cases: int = 100, seed: int = 0) -> GradCheckResult:
    """images -> encoder -> unit sphere -> angles -> DLoss, differentiated
    w.r.t. all net parameters and all class centers at once."""
    rng = np.random.default_rng([seed, 6])
    families = (Family.SOFTMAX, Family.COMBINED, Family.LINEAR)
    worst = 0.0
    for case in range(cases):
        topo = Topology((int(rng.integers(6, 13)), int(rng.integers(5, 9)),
                         int(rng.integers(3, 6))))
        n = int(rng.integers(2, 5))
        k = int(rng.integers(2, 6))
        spec = _random_spec(families[case % 3], rng)
        params = init_params(topo, rng)
        centers = init_centers(k, topo.dims[-1], rng)
        x = rng.uniform(0.0, 1.0, size=(n, topo.dims[0]))
        labels = rng.integers(0, k, size=n)

        emb, cache = encode_with_cache(params, x)
        batch = cos_angles(emb, centers, labels)
        res = dloss(spec, batch)
        net_grads, d_centers = backward(params, centers, res.grad_theta, emb, cache)
        analytic = np.concatenate([grads_to_vector(net_grads), d_centers.ravel()])

        npar = params_to_vector(params).size

        def f(vec, topo=topo, x=x, labels=labels, spec=spec, k=k, npar=npar):
            p = vector_to_params(topo, vec[:npar])
            c_ = vec[npar:].reshape(k, -1)
            from latse.net import ClassifierWeights

            emb_ = encode_with_cache(p, x)[0]
            batch_ = cos_angles(emb_, ClassifierWeights(c_), labels)
            return dloss(spec, batch_).loss

        point = np.concatenate([params_to_vector(params), centers.centers.ravel()])
        fd = fd_oracle(f, point, h=FD_STEP)
        worst = max(worst, _rel_err(analytic, fd))
    return GradCheckResult("composition", cases, worst, TOL_DEFAULT)


def run_all(cases: int = 100, seed: int = 0) -> list[GradCheckResult]:
    results = check_dloss(cases, seed)
    results += check_gloss(cases, seed)
    results.append(check_composition(cases, seed))
    return results


def write_report(path, results: list[GradCheckResult],
                 config_hash: str | None = None) -> None:
    with open(path, "w") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("suite,cases,max_rel_err,tol,passed\n")
        for r in results:
            fh.write(f"{r.name},{r.cases},{r.max_rel_err!r},{r.tol!r},"
                     f"{int(r.passed)}\n")
