"""Central finite-difference checks of every hand-written gradient.

Each check draws random instances, compares the analytic gradient with a
central difference and records the worst relative error
``|a - n| / max(|a|, |n|, floor)``. Vector-valued maps are reduced to a
scalar with a random projection so their backward pass is checked in full.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hierhead import (
    ClassTargets,
    StrengthParams,
    classification_loss,
    hier_activation,
    hier_activation_backward,
)
from .sparsemax import ObjectnessTarget, softmax_kl_loss, sparsemax, sparsemax_loss, sparsemax_loss_grad
from .taxonomy import TaxonomyForest
from .toytrain import (
    DetectorParams,
    SyntheticWorld,
    ToyConfig,
    forward,
    generate_scene,
    init_params,
    loss_and_grad,
)

__all__ = [
    "CheckResult",
    "numeric_grad",
    "relative_error",
    "tiny_forest",
    "tiny_problem",
    "CHECKS",
    "run_suite",
]

STEP = 1e-5
FLOOR = 1e-8
STEP_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    worst: float
    tol: float
    rejected: int = 0
    failures: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.instances > 0 and self.worst <= self.tol

    def to_dict(self) -> dict:
        return {"name": self.name, "instances": self.instances, "worst": self.worst,
                "tol": self.tol, "rejected": self.rejected, "passed": self.passed}


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; ``x`` is restored afterwards."""
    grad = np.zeros_like(x, dtype=float)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = FLOOR) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def tiny_forest() -> TaxonomyForest:
    """Three levels, seven nodes: one root, two intermediate nodes, four leaves."""
    return TaxonomyForest.from_edges([
        ("r", "a"), ("r", "b"),
        ("a", "a0"), ("a", "a1"), ("b", "b0"), ("b", "b1"),
    ])


def _random_target(rng, n: int) -> np.ndarray:
    k = int(rng.integers(1, n + 1))
    return ObjectnessTarget.from_positives(rng.choice(n, size=k, replace=False), n).q


# -- individual checks ---------------------------------------------------------------


def _check_sparsemax_loss(rng, corrupt: bool):
    n = int(rng.integers(2, 12))
    z = rng.normal(0, 2, n)
    q = _random_target(rng, n)
    a = sparsemax_loss_grad(z, q) * (1.001 if corrupt else 1.0)
    return relative_error(a, numeric_grad(lambda: sparsemax_loss(z, q), z)), True


def _check_softmax_kl(rng, corrupt: bool):
    n = int(rng.integers(2, 12))
    z = rng.normal(0, 2, n)
    q = _random_target(rng, n)
    a = softmax_kl_loss(z, q)[1] * (1.001 if corrupt else 1.0)
    return relative_error(a, numeric_grad(lambda: softmax_kl_loss(z, q)[0], z)), True


def _hier_check(rng, corrupt: bool, compound: bool):
    forest = tiny_forest()
    n_rows = int(rng.integers(1, 5))
    y = rng.uniform(0.05, 0.95, (n_rows, len(forest)))
    alpha = StrengthParams.init(forest, 1.0)
    alpha.alpha[alpha.nonroot] = rng.uniform(0.0, 3.0, int(alpha.nonroot.sum()))
    w = rng.normal(size=y.shape)

    def f():
        return float(np.sum(w * hier_activation(y, alpha, forest, compound)))

    g_y, g_alpha = hier_activation_backward(y, alpha, forest, w, compound)
    if corrupt:
        g_alpha = g_alpha * 1.001
    num_y = numeric_grad(f, y)
    num_a = numeric_grad(f, alpha.alpha)
    err = max(relative_error(g_y, num_y),
              relative_error(g_alpha[alpha.nonroot], num_a[alpha.nonroot]))
    return err, True


def _check_hier(rng, corrupt: bool):
    return _hier_check(rng, corrupt, compound=False)


def _check_hier_compound(rng, corrupt: bool):
    return _hier_check(rng, corrupt, compound=True)


def _check_bce(rng, corrupt: bool):
    rows, cols = int(rng.integers(1, 6)), int(rng.integers(1, 8))
    ytil = rng.uniform(0.02, 0.98, (rows, cols))
    targets = (rng.random((rows, cols)) < 0.4).astype(float)
    mask = (rng.random((rows, cols)) < 0.7).astype(float)
    mask.flat[int(rng.integers(mask.size))] = 1.0
    ct = ClassTargets(targets, mask)
    _, g = classification_loss(ytil, ct)
    if corrupt:
        g = g * 1.001
    return relative_error(g, numeric_grad(lambda: classification_loss(ytil, ct)[0], ytil)), True


def tiny_problem(seed: int):
    """World, config, params and scene for the composed step (Q=6, N=7, d=5)."""
    rng = np.random.default_rng([seed, 0xFD])
    forest = tiny_forest()
    config = ToyConfig(dim=5, n_queries=6, min_objects=1, max_objects=3,
                       noise_sigma=0.3, init_scale=0.3)
    prototypes = {leaf: rng.normal(0, 1.0, config.dim) for leaf in forest.leaves}
    known = tuple(forest.id(n) for n in ("a0", "b0", "b1"))
    world = SyntheticWorld(forest, prototypes, config.noise_sigma, known, (forest.id("a1"),))
    params = init_params(world, config, seed)
    params.b_cls[...] = rng.normal(0, 0.5, len(forest))
    params.b_obj[...] = rng.normal(0, 0.5, 1)
    params.b_box[...] = rng.normal(0, 0.3, 4)
    params.alpha.alpha[params.alpha.nonroot] = rng.uniform(0.2, 2.5, int(params.alpha.nonroot.sum()))
    scene = generate_scene(world, [seed, 0xFD, 1], config)
    return world, config, params, scene


def _evaluate(params: DetectorParams, scene, world, config):
    """Total loss plus the discrete state of the step.

    The state (matching, relabeled set, sparsemax support, L1 signs) is
    piecewise constant; if it changes under +-h the instance sits on a kink
    and central differences are meaningless there.
    """
    total, _, info = loss_and_grad(params, scene, world, config)
    _, z, boxes = forward(params, scene)
    gt_boxes = scene.annotations[1]
    signs = tuple(tuple(np.sign(boxes[q] - gt_boxes[g]).astype(int)) for g, q in info.matches.pairs)
    support = sparsemax(z).support if config.objectness == "sparsemax" else None
    return total, (info.matches.pairs, info.relabeled, support, signs)


def _train_step_check(rng, corrupt: bool, objectness: str):
    seed = int(rng.integers(2**31))
    world, config, params, scene = tiny_problem(seed)
    config = config.replace(objectness=objectness)
    _, grads, _ = loss_and_grad(params, scene, world, config)
    _, base_sig = _evaluate(params, scene, world, config)
    worst = 0.0
    for group in DetectorParams.GROUPS:
        arr = params.get(group)
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + STEP
            fp, sig_p = _evaluate(params, scene, world, config)
            arr[idx] = old - STEP
            fm, sig_m = _evaluate(params, scene, world, config)
            arr[idx] = old
            if sig_p != base_sig or sig_m != base_sig:
                return 0.0, False
            num[idx] = (fp - fm) / (2 * STEP)
        analytic = grads[group]
        if group == "alpha":
            analytic, num = analytic[params.alpha.nonroot], num[params.alpha.nonroot]
        if corrupt and group == "w_obj":
            analytic = analytic * 1.001
        # the objectness bias gradient is identically zero (shift invariance), so
        # an absolute floor well above difference roundoff (~1e-10) is used
        worst = max(worst, relative_error(analytic, num, floor=STEP_FLOOR))
    return worst, True


def _check_train_step(rng, corrupt: bool):
    return _train_step_check(rng, corrupt, "sparsemax")


def _check_train_step_softmax(rng, corrupt: bool):
    return _train_step_check(rng, corrupt, "softmax")


# name -> (function, tolerance)
CHECKS = {
    "sparsemax_loss": (_check_sparsemax_loss, 1e-5),
    "softmax_kl": (_check_softmax_kl, 1e-5),
    "hier_activation": (_check_hier, 1e-5),
    "hier_activation_compound": (_check_hier_compound, 1e-5),
    "classification_bce": (_check_bce, 1e-5),
    "train_step": (_check_train_step, 1e-4),
    "train_step_softmax": (_check_train_step_softmax, 1e-4),
}


def run_check(name: str, instances: int = 50, seed: int = 0, corrupt: bool = False,
              max_attempts: int | None = None) -> CheckResult:
    fn, tol = CHECKS[name]
    rng = np.random.default_rng([seed, sorted(CHECKS).index(name)])
    result = CheckResult(name, 0, 0.0, tol)
    max_attempts = max_attempts or 4 * instances
    attempts = 0
    while result.instances < instances and attempts < max_attempts:
        attempts += 1
        err, usable = fn(rng, corrupt)
        if not usable:
            result.rejected += 1
            continue
        if err > tol:
            result.failures.append(result.instances)
        result.worst = max(result.worst, err)
        result.instances += 1
    return result


def run_suite(instances: int = 50, seed: int = 0, corrupt: str | None = None,
              names=None) -> list[CheckResult]:
    """Run the named checks (all by default). ``corrupt`` perturbs one check's
    analytic gradient by 0.1%, which the suite must catch."""
    names = list(names or CHECKS)
    if corrupt is not None and corrupt not in CHECKS:
        raise KeyError(f"unknown check {corrupt!r}")
    return [run_check(n, instances, seed, corrupt == n) for n in names]
