"""Desk-scale synthetic open-world detector.

Linear class, objectness and box heads sit on top of precomputed query
features. Every gradient is derived by hand and pushed through the coupled
activation, the sparsemax (or softmax) objectness loss, the masked BCE and
the L1/GIoU box losses. Matching, relabeling and the objectness target are
treated as constants within a step, exactly as a set-prediction trainer does.

Query boxes are refined from per-query reference boxes:
``box = sigmoid(logit(ref) + W_box x + b_box)``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, logit

from .hierhead import (
    StrengthParams,
    build_class_targets,
    classification_loss,
    hier_activation,
    hier_activation_backward,
    sigmoid_activations,
)
from .matching import MatchCoefficients, giou_with_grad, hungarian, match_cost
from .owod_eval import (
    Detection,
    GroundTruthObject,
    Split,
    decode_predictions,
    evaluate_records,
)
from .matching import Box
from .relabel import objectness_target, relabel
from .sparsemax import softmax, softmax_kl_loss, sparsemax, sparsemax_loss
from .taxonomy import TaxonomyForest

__all__ = [
    "MODES",
    "ToyConfig",
    "config_for_mode",
    "load_config",
    "SyntheticWorld",
    "Scene",
    "DetectorParams",
    "StepInfo",
    "make_world",
    "generate_scene",
    "init_params",
    "forward",
    "loss_and_grad",
    "Optimizer",
    "train_step",
    "train",
    "evaluate_params",
    "run_experiment",
]

logger = logging.getLogger(__name__)

MODES = ("full", "softmax-obj", "no-relabel", "alpha-fixed-0")


@dataclass(frozen=True)
class ToyConfig:
    # ablation switches
    objectness: str = "sparsemax"
    relabel: bool = True
    fixed_alpha: float | None = None
    alpha_init: float = 1.0
    compound: bool = False
    nonleaf_reduce: str = "max"
    # world
    n_parents: int = 3
    leaves_per_parent: int = 4
    future_per_parent: int = 1
    dim: int = 16
    n_queries: int = 20
    min_objects: int = 2
    max_objects: int = 5
    parent_scale: float = 1.0
    leaf_scale: float = 0.6
    noise_sigma: float = 0.3
    background_sigma: float = 1.0
    ref_noise: float = 0.1
    # optimisation
    steps: int = 3000
    optimizer: str = "adam"
    lr: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    init_scale: float = 0.01
    coef_cls: float = 2.0
    coef_obj: float = 2.0
    coef_l1: float = 5.0
    coef_giou: float = 2.0
    match_cls: float = 2.0
    match_l1: float = 5.0
    match_giou: float = 2.0
    # evaluation
    eval_scenes: int = 200
    eval_topk: int = 10
    decode_rule: str = "top-down"
    decode_threshold: float = 0.5
    iou_threshold: float = 0.5
    log_every: int = 50

    def replace(self, **changes) -> "ToyConfig":
        return dataclasses.replace(self, **changes)


_MODE_CHANGES = {
    "full": {},
    "softmax-obj": {"objectness": "softmax"},
    "no-relabel": {"relabel": False},
    "alpha-fixed-0": {"fixed_alpha": 0.0},
}


def config_for_mode(mode: str, base: ToyConfig | None = None) -> ToyConfig:
    if mode not in _MODE_CHANGES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return (base or ToyConfig()).replace(**_MODE_CHANGES[mode])


def load_config(path) -> ToyConfig:
    """Read a flat JSON object of ToyConfig overrides."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a flat JSON object")
    names = {f.name for f in dataclasses.fields(ToyConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    return ToyConfig(**raw)


# -- world and scenes -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    forest: TaxonomyForest
    prototypes: dict[int, np.ndarray]
    noise_sigma: float
    known_leaves: tuple[int, ...]
    future_leaves: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Scene:
    features: np.ndarray          # Q x d
    refs: np.ndarray              # Q x 4 reference boxes
    object_slots: np.ndarray      # G query indices holding objects
    object_leaves: np.ndarray     # G
    object_boxes: np.ndarray      # G x 4
    annotated: np.ndarray         # G bool, True for known-leaf objects

    @property
    def n_queries(self) -> int:
        return self.features.shape[0]

    @property
    def annotations(self) -> tuple[np.ndarray, np.ndarray]:
        """Leaves and boxes of the annotated (known) objects only."""
        return self.object_leaves[self.annotated], self.object_boxes[self.annotated]


def make_world(config: ToyConfig, seed: int) -> SyntheticWorld:
    """Forest of ``n_parents`` roots, each with ``leaves_per_parent`` leaves.

    The last ``future_per_parent`` leaves under each parent are held out as
    future classes, so each future leaf keeps known siblings.
    """
    if config.future_per_parent >= config.leaves_per_parent:
        raise ValueError("every parent needs at least one known leaf")
    edges = []
    future_names = set()
    for p in range(config.n_parents):
        for k in range(config.leaves_per_parent):
            leaf = f"p{p}_leaf{k}"
            edges.append((f"p{p}", leaf))
            if k >= config.leaves_per_parent - config.future_per_parent:
                future_names.add(leaf)
    forest = TaxonomyForest.from_edges(edges)
    rng = np.random.default_rng([seed, 0xA11CE])
    centers = {forest.id(f"p{p}"): rng.normal(0, config.parent_scale, config.dim)
               for p in range(config.n_parents)}
    prototypes = {leaf: centers[forest.parent(leaf)] + rng.normal(0, config.leaf_scale, config.dim)
                  for leaf in forest.leaves}
    known = tuple(l for l in forest.leaves if forest.name(l) not in future_names)
    future = tuple(l for l in forest.leaves if forest.name(l) in future_names)
    return SyntheticWorld(forest, prototypes, config.noise_sigma, known, future)


def generate_scene(world: SyntheticWorld, seed, config: ToyConfig) -> Scene:
    """Objects dropped into random query slots; background slots hold noise."""
    Q, d = config.n_queries, config.dim
    if config.max_objects > Q:
        raise ValueError(f"cannot place {config.max_objects} objects in {Q} queries")
    rng = np.random.default_rng(seed)
    G = int(rng.integers(config.min_objects, config.max_objects + 1))
    leaves_all = np.array(world.forest.leaves)
    leaves = rng.choice(leaves_all, size=G)
    slots = rng.choice(Q, size=G, replace=False)
    centers = rng.uniform(0.2, 0.8, size=(G, 2))
    sizes = rng.uniform(0.1, 0.4, size=(G, 2))
    boxes = np.hstack([centers, sizes])

    features = rng.normal(0, config.background_sigma, size=(Q, d))
    refs = np.hstack([rng.uniform(0.2, 0.8, size=(Q, 2)), rng.uniform(0.1, 0.4, size=(Q, 2))])
    for g in range(G):
        features[slots[g]] = world.prototypes[int(leaves[g])] + rng.normal(0, world.noise_sigma, d)
        refs[slots[g]] = expit(logit(boxes[g]) + rng.normal(0, config.ref_noise, 4))
    annotated = np.isin(leaves, world.known_leaves)
    return Scene(features, refs, slots, leaves, boxes, annotated)


# -- parameters and forward pass -------------------------------------------------


@dataclass
class DetectorParams:
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_obj: np.ndarray
    b_obj: np.ndarray
    w_box: np.ndarray
    b_box: np.ndarray
    alpha: StrengthParams

    GROUPS = ("w_cls", "b_cls", "w_obj", "b_obj", "w_box", "b_box", "alpha")

    def get(self, group: str) -> np.ndarray:
        return self.alpha.alpha if group == "alpha" else getattr(self, group)

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.w_cls.copy(), self.b_cls.copy(), self.w_obj.copy(),
                              self.b_obj.copy(), self.w_box.copy(), self.b_box.copy(),
                              self.alpha.copy())

    def to_dict(self) -> dict:
        return {g: self.get(g).tolist() for g in self.GROUPS}


def init_params(world: SyntheticWorld, config: ToyConfig, seed: int) -> DetectorParams:
    rng = np.random.default_rng([seed, 0xBEEF])
    N, d = len(world.forest), config.dim
    alpha = StrengthParams.init(
        world.forest, config.alpha_init if config.fixed_alpha is None else config.fixed_alpha)
    return DetectorParams(
        w_cls=rng.normal(0, config.init_scale, (N, d)),
        b_cls=np.zeros(N),
        w_obj=rng.normal(0, config.init_scale, d),
        b_obj=np.zeros(1),
        w_box=rng.normal(0, config.init_scale, (4, d)),
        b_box=np.zeros(4),
        alpha=alpha,
    )


def forward(params: DetectorParams, scene: Scene):
    """Class logits (Q x N), objectness logits (Q,) and boxes (Q x 4)."""
    x = scene.features
    cls_logits = x @ params.w_cls.T + params.b_cls
    obj_logits = x @ params.w_obj + params.b_obj[0]
    boxes = expit(logit(scene.refs) + x @ params.w_box.T + params.b_box)
    return cls_logits, obj_logits, boxes


# -- loss and gradient -----------------------------------------------------------


@dataclass
class StepInfo:
    losses: dict[str, float]
    matches: object
    relabeled: frozenset[int]
    target: object
    degenerate: bool


def loss_and_grad(params: DetectorParams, scene: Scene, world: SyntheticWorld,
                  config: ToyConfig) -> tuple[float, dict[str, np.ndarray], StepInfo]:
    forest = world.forest
    x = scene.features
    Q = scene.n_queries
    cls_logits, z, boxes = forward(params, scene)
    y = sigmoid_activations(cls_logits)
    ytil = hier_activation(y, params.alpha, forest, compound=config.compound)

    gt_leaves, gt_boxes = scene.annotations
    coeffs = MatchCoefficients(config.match_cls, config.match_l1, config.match_giou)
    matches = hungarian(match_cost(ytil, boxes, gt_leaves, gt_boxes, coeffs))

    # classification
    targets = build_class_targets(matches, forest, Q, gt_leaves)
    l_cls, g_ytil = classification_loss(ytil, targets)
    g_y, g_alpha = hier_activation_backward(y, params.alpha, forest, config.coef_cls * g_ytil,
                                            compound=config.compound)
    g_cls_logits = g_y * y * (1 - y)

    # objectness
    matched = matches.matched_queries
    relabeled = relabel(ytil, matches, forest, config.nonleaf_reduce).relabeled \
        if config.relabel else frozenset()
    q = objectness_target(matched, relabeled, Q)
    if q.degenerate:
        l_obj, g_z = 0.0, np.zeros(Q)
    elif config.objectness == "sparsemax":
        l_obj = sparsemax_loss(z, q)
        g_z = sparsemax(z).probabilities - q.q
    elif config.objectness == "softmax":
        l_obj, g_z = softmax_kl_loss(z, q)
    else:
        raise ValueError(f"unknown objectness activation {config.objectness!r}")

    # boxes, normalised by the number of annotated objects
    g_boxes = np.zeros_like(boxes)
    l_l1 = l_giou = 0.0
    n_gt = max(len(gt_leaves), 1)
    for g, qi in matches.pairs:
        diff = boxes[qi] - gt_boxes[g]
        l_l1 += np.abs(diff).sum() / n_gt
        g_boxes[qi] += config.coef_l1 * np.sign(diff) / n_gt
        val, dval = giou_with_grad(boxes[qi], gt_boxes[g])
        l_giou += (1.0 - val) / n_gt
        g_boxes[qi] -= config.coef_giou * dval / n_gt
    g_box_pre = g_boxes * boxes * (1 - boxes)

    g_obj = config.coef_obj * g_z
    grads = {
        "w_cls": g_cls_logits.T @ x,
        "b_cls": g_cls_logits.sum(0),
        "w_obj": x.T @ g_obj,
        "b_obj": np.array([g_obj.sum()]),
        "w_box": g_box_pre.T @ x,
        "b_box": g_box_pre.sum(0),
        "alpha": np.where(params.alpha.nonroot, g_alpha, 0.0),
    }
    losses = {"cls": l_cls, "obj": l_obj, "l1": float(l_l1), "giou": float(l_giou)}
    total = (config.coef_cls * l_cls + config.coef_obj * l_obj
             + config.coef_l1 * l_l1 + config.coef_giou * l_giou)
    losses["total"] = float(total)
    return float(total), grads, StepInfo(losses, matches, relabeled, q, q.degenerate)


class Optimizer:
    """Plain gradient descent or Adam over the parameter groups.

    Alpha is skipped when the config pins it to a fixed value.
    """

    def __init__(self, config: ToyConfig):
        if config.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {config.optimizer!r}")
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def groups(self):
        if self.config.fixed_alpha is None:
            return DetectorParams.GROUPS
        return DetectorParams.GROUPS[:-1]

    def step(self, params: DetectorParams, grads: dict[str, np.ndarray]) -> DetectorParams:
        cfg = self.config
        new = params.copy()
        self.t += 1
        for group in self.groups():
            g = grads[group]
            if cfg.optimizer == "sgd":
                new.get(group)[...] -= cfg.lr * g
                continue
            m = self.m.setdefault(group, np.zeros_like(g))
            v = self.v.setdefault(group, np.zeros_like(g))
            m[...] = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
            v[...] = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
            m_hat = m / (1 - cfg.adam_beta1**self.t)
            v_hat = v / (1 - cfg.adam_beta2**self.t)
            new.get(group)[...] -= cfg.lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        return new


def train_step(params: DetectorParams, scene: Scene, world: SyntheticWorld, config: ToyConfig,
               optimizer: Optimizer | None = None) -> tuple[DetectorParams, StepInfo]:
    """One full step: forward, match, relabel, losses, update.

    Without an ``optimizer`` a fresh one is used, which for Adam means a
    bias-corrected first step.
    """
    total, grads, info = loss_and_grad(params, scene, world, config)
    if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise FloatingPointError(f"non-finite loss or gradient: {info.losses}")
    optimizer = optimizer or Optimizer(config)
    return optimizer.step(params, grads), info


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: dict[str, list[float]] = field(default_factory=dict)
    degenerate_steps: int = 0
    relabeled_total: int = 0
    contract_violations: int = 0


def _check_target(info: StepInfo) -> bool:
    """Equal-budget contract: q sums to one (or is flagged) and relabeled never overlaps matched."""
    if info.relabeled & info.matches.matched_queries:
        return False
    if info.degenerate:
        return not np.any(info.target.q)
    return abs(info.target.q.sum() - 1.0) < 1e-12


def train(world: SyntheticWorld, config: ToyConfig, seed: int,
          step_hook: Callable | None = None) -> tuple[DetectorParams, TrainLog]:
    params = init_params(world, config, seed)
    optimizer = Optimizer(config)
    log = TrainLog()
    window: dict[str, list[float]] = {}
    for t in range(config.steps):
        scene = generate_scene(world, [seed, 1, t], config)
        params, info = train_step(params, scene, world, config, optimizer)
        if step_hook is not None:
            step_hook(t, info)
        log.degenerate_steps += info.degenerate
        log.relabeled_total += len(info.relabeled)
        log.contract_violations += not _check_target(info)
        for k, v in info.losses.items():
            window.setdefault(k, []).append(v)
        if (t + 1) % config.log_every == 0 or t + 1 == config.steps:
            log.steps.append(t + 1)
            for k, vals in window.items():
                log.losses.setdefault(k, []).append(float(np.mean(vals)))
            window = {}
    return params, log


# -- evaluation -------------------------------------------------------------------


def objectness_probabilities(z, config: ToyConfig) -> np.ndarray:
    return sparsemax(z).probabilities if config.objectness == "sparsemax" else softmax(z)


def evaluate_params(params: DetectorParams, world: SyntheticWorld, config: ToyConfig,
                    seed: int):
    """Decode held-out scenes and score them with the open-world metrics."""
    forest = world.forest
    dets: list[Detection] = []
    gts: list[GroundTruthObject] = []
    for i in range(config.eval_scenes):
        scene = generate_scene(world, [seed, 2, i], config)
        image_id = f"s{seed}_{i}"
        cls_logits, z, boxes = forward(params, scene)
        ytil = hier_activation(sigmoid_activations(cls_logits), params.alpha, forest,
                               compound=config.compound)
        obj = objectness_probabilities(z, config)
        dets.extend(decode_predictions(ytil, obj, boxes, forest, config.eval_topk, image_id,
                                       config.decode_rule, config.decode_threshold))
        for leaf, box, ann in zip(scene.object_leaves, scene.object_boxes, scene.annotated):
            gts.append(GroundTruthObject(image_id, int(leaf), Box(*map(float, box)),
                                         "known" if ann else "future"))
    split = Split((tuple(forest.name(l) for l in world.known_leaves),
                   tuple(forest.name(l) for l in world.future_leaves)), 1, "toy")
    return evaluate_records(dets, gts, forest, split, config.iou_threshold)


def run_experiment(mode: str, seeds, base: ToyConfig | None = None) -> list[dict]:
    """Train and evaluate one ablation mode per seed; JSON-ready results."""
    config = config_for_mode(mode, base)
    results = []
    for seed in seeds:
        seed = int(seed)
        world = make_world(config, seed)
        params, log = train(world, config, seed)
        report = evaluate_params(params, world, config, seed)
        results.append({
            "mode": mode,
            "seed": seed,
            "config": dataclasses.asdict(config),
            "report": report.to_dict(),
            "train": {
                "steps": log.steps,
                "losses": log.losses,
                "degenerate_steps": log.degenerate_steps,
                "relabeled_total": log.relabeled_total,
                "contract_violations": log.contract_violations,
            },
            "alpha": {world.forest.name(i): float(a) for i, a in enumerate(params.alpha.alpha)
                      if params.alpha.nonroot[i]},
        })
        logger.info("mode=%s seed=%d U-R=%s AOSE=%d mAP=%.4f", mode, seed,
                    report.unknown_recall, report.aose, report.map_known)
    return results
