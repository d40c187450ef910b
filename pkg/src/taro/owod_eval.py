"""Open-world detection metrics.

Known classes are scored with VOC-style AP at a single IoU threshold. Objects
of not-yet-introduced ("future") classes feed unknown recall (U-R), the
absolute open-set error (AOSE), hierarchy accuracy (HAcc) and the wilderness
impact (WI).

Ranking ties are broken by record order: every sort here is stable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .matching import Box, iou
from .taxonomy import TaxonomyError, TaxonomyForest, load_taxonomy

__all__ = [
    "KNOWN",
    "UNKNOWN",
    "EvalDataError",
    "Detection",
    "GroundTruthObject",
    "EvalReport",
    "Split",
    "decode_predictions",
    "average_precision",
    "unknown_matches",
    "unknown_recall",
    "aose",
    "hacc",
    "known_counts",
    "wilderness_impact",
    "evaluate_records",
    "evaluate",
    "load_ground_truth",
    "load_detections",
    "load_split",
    "format_report",
]

logger = logging.getLogger(__name__)

KNOWN = "known-leaf"
UNKNOWN = "unknown-nonleaf"


class EvalDataError(ValueError):
    """Malformed or inconsistent evaluation input."""


@dataclass(frozen=True)
class Detection:
    image_id: str
    node: int
    box: Box
    score: float
    kind: str


@dataclass(frozen=True)
class GroundTruthObject:
    image_id: str
    leaf: int
    box: Box
    status: str = "known"


@dataclass
class EvalReport:
    per_class_ap: dict[str, float]
    map_known: float
    map_previous: float | None
    map_current: float | None
    unknown_recall: float | None
    aose: int
    hacc: float | None
    wi: float | None
    tp_k: int
    fp_k: int
    fp_u: int
    n_future_gt: int
    n_unknown_detected: int
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = dict(sorted(self.per_class_ap.items()))
        return d


@dataclass(frozen=True)
class Split:
    """Task partition of leaf names; ``current_task`` is 1-based."""

    tasks: tuple[tuple[str, ...], ...]
    current_task: int = 1
    name: str = ""

    @property
    def previous(self) -> list[str]:
        return [c for t in self.tasks[: self.current_task - 1] for c in t]

    @property
    def current(self) -> list[str]:
        return list(self.tasks[self.current_task - 1])

    @property
    def known(self) -> list[str]:
        return self.previous + self.current

    @property
    def future(self) -> list[str]:
        return [c for t in self.tasks[self.current_task:] for c in t]


# -- decoding ---------------------------------------------------------------


def _top_down(row: np.ndarray, forest: TaxonomyForest, threshold: float) -> int:
    roots = forest.roots
    cur = roots[int(np.argmax(row[roots]))]
    while not forest.is_leaf(cur):
        kids = forest.children(cur)
        best = kids[int(np.argmax(row[kids]))]
        if row[best] < threshold:
            break
        cur = best
    return cur


def decode_predictions(ytil, objectness, boxes, forest: TaxonomyForest,
                       top_k: int = 100, image_id: str = "", rule: str = "top-down",
                       threshold: float = 0.5) -> list[Detection]:
    """One detection per query, keeping the ``top_k`` best by score.

    ``rule="argmax"`` labels a query with the argmax of the coupled
    activations over all nodes. ``rule="top-down"`` starts at the best root
    and descends to the best child while that child's activation is at least
    ``threshold``. Stopping at a non-leaf yields an unknown detection carrying
    that coarse node. Score is objectness probability times the activation at
    the chosen node.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    ytil = np.asarray(ytil, dtype=float)
    obj = np.asarray(objectness, dtype=float)
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    if rule == "argmax":
        node = ytil.argmax(axis=1)
    elif rule == "top-down":
        node = np.array([_top_down(row, forest, threshold) for row in ytil], dtype=int)
    else:
        raise ValueError(f"unknown decode rule {rule!r}")
    score = obj * ytil[np.arange(len(node)), node]
    order = np.argsort(-score, kind="stable")[:top_k]
    return [
        Detection(image_id, int(node[q]), Box(*map(float, boxes[q])), float(score[q]),
                  KNOWN if forest.is_leaf(int(node[q])) else UNKNOWN)
        for q in order
    ]


# -- known-class metrics ------------------------------------------------------


def _by_score(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)


def _greedy_flags(dets: Sequence[Detection], gts: Sequence[GroundTruthObject],
                  iou_threshold: float) -> list[bool]:
    """VOC matching: each detection takes its best-IoU gt if still free."""
    by_image: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    taken = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, -1.0
        for j in by_image.get(d.image_id, ()):
            o = iou(d.box, gts[j].box)
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0 and best_iou >= iou_threshold and not taken[best]:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _envelope_ap(tp_flags: Sequence[bool], n_gt: int) -> float:
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=float))
    rec = tp / n_gt
    prec = tp / (tp + fp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(dets: Iterable[Detection], gts: Iterable[GroundTruthObject],
                      leaf: int, iou_threshold: float = 0.5) -> float | None:
    """Area under the precision envelope for one known leaf class.

    Only ``status == "known"`` ground truths count. Returns None when the
    class has no ground truth.
    """
    class_gts = [g for g in gts if g.leaf == leaf and g.status == "known"]
    if not class_gts:
        return None
    class_dets = _by_score(d for d in dets if d.kind == KNOWN and d.node == leaf)
    return _envelope_ap(_greedy_flags(class_dets, class_gts, iou_threshold), len(class_gts))


def known_counts(dets: Iterable[Detection], gts: Iterable[GroundTruthObject],
                 iou_threshold: float = 0.5) -> tuple[int, int, int]:
    """(TP_k, FP_k, FP_u) over known-leaf detections.

    A detection that is not a true positive counts as FP_u when it overlaps a
    future-class object at the threshold, otherwise as FP_k.
    """
    dets = list(dets)
    gts = list(gts)
    known_gts = [g for g in gts if g.status == "known"]
    future_gts = [g for g in gts if g.status == "future"]
    tp = fp_k = fp_u = 0
    for leaf in sorted({d.node for d in dets if d.kind == KNOWN}):
        cls_dets = _by_score(d for d in dets if d.kind == KNOWN and d.node == leaf)
        flags = _greedy_flags(cls_dets, [g for g in known_gts if g.leaf == leaf], iou_threshold)
        for d, hit in zip(cls_dets, flags):
            if hit:
                tp += 1
            elif any(g.image_id == d.image_id and iou(d.box, g.box) >= iou_threshold
                     for g in future_gts):
                fp_u += 1
            else:
                fp_k += 1
    return tp, fp_k, fp_u


def wilderness_impact(tp_k: int, fp_k: int, fp_u: int) -> float | None:
    """``FP_u / (TP_k + FP_k)``; None when the denominator is zero."""
    denom = tp_k + fp_k
    if denom <= 0:
        return None
    return fp_u / denom


# -- unknown-object metrics ---------------------------------------------------


def unknown_matches(dets: Iterable[Detection], gts: Iterable[GroundTruthObject],
                    iou_threshold: float = 0.5) -> list[tuple[Detection, GroundTruthObject]]:
    """Greedy by score: each unknown detection claims its best free future gt."""
    future = [g for g in gts if g.status == "future"]
    taken = [False] * len(future)
    pairs = []
    for d in _by_score(d for d in dets if d.kind == UNKNOWN):
        best, best_iou = -1, -1.0
        for j, g in enumerate(future):
            if taken[j] or g.image_id != d.image_id:
                continue
            o = iou(d.box, g.box)
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0 and best_iou >= iou_threshold:
            taken[best] = True
            pairs.append((d, future[best]))
    return pairs


def unknown_recall(dets: Iterable[Detection], gts: Iterable[GroundTruthObject],
                   iou_threshold: float = 0.5) -> float | None:
    gts = list(gts)
    n_future = sum(g.status == "future" for g in gts)
    if n_future == 0:
        return None
    return len(unknown_matches(dets, gts, iou_threshold)) / n_future


def aose(dets: Iterable[Detection], gts: Iterable[GroundTruthObject],
         iou_threshold: float = 0.5) -> int:
    """Future objects whose best-overlapping detection is a known class.

    Objects already recalled as unknown are excluded, so AOSE and U-R never
    count the same object.
    """
    dets = _by_score(dets)
    gts = list(gts)
    recalled = {id(g) for _, g in unknown_matches(dets, gts, iou_threshold)}
    count = 0
    for g in gts:
        if g.status != "future" or id(g) in recalled:
            continue
        best, best_iou = None, -1.0
        for d in dets:
            if d.image_id != g.image_id:
                continue
            o = iou(d.box, g.box)
            if o > best_iou:
                best, best_iou = d, o
        if best is not None and best_iou >= iou_threshold and best.kind == KNOWN:
            count += 1
    return count


def hacc(pairs: Iterable[tuple[Detection, GroundTruthObject]],
         forest: TaxonomyForest) -> float | None:
    """Fraction of detected unknowns whose predicted node is the true parent."""
    pairs = list(pairs)
    if not pairs:
        return None
    hits = sum(d.node == forest.parent(g.leaf) for d, g in pairs)
    return hits / len(pairs)


# -- aggregation --------------------------------------------------------------


def _mean_ap(per_class: dict[str, float], names: Iterable[str]) -> float | None:
    vals = [per_class[n] for n in names if n in per_class]
    return float(np.mean(vals)) if vals else None


def evaluate_records(dets: Sequence[Detection], gts: Sequence[GroundTruthObject],
                     forest: TaxonomyForest, split: Split,
                     iou_threshold: float = 0.5) -> EvalReport:
    diagnostics = []
    for name in split.known + split.future:
        try:
            leaf = forest.id(name)
        except TaxonomyError as exc:
            raise EvalDataError(str(exc)) from None
        if not forest.is_leaf(leaf):
            raise EvalDataError(f"split class {name!r} is not a leaf of the taxonomy")
    known = set(split.known)
    for g in gts:
        if g.status == "known" and forest.name(g.leaf) not in known:
            raise EvalDataError(
                f"ground truth {forest.name(g.leaf)!r} marked known but is not in the split's "
                f"known classes")

    per_class = {}
    for name in split.known:
        ap = average_precision(dets, gts, forest.id(name), iou_threshold)
        if ap is None:
            diagnostics.append(f"class {name!r} has no ground truth; excluded from mAP")
        else:
            per_class[name] = ap

    pairs = unknown_matches(dets, gts, iou_threshold)
    n_future = sum(g.status == "future" for g in gts)
    tp_k, fp_k, fp_u = known_counts(dets, gts, iou_threshold)
    map_known = _mean_ap(per_class, split.known)
    return EvalReport(
        per_class_ap=per_class,
        map_known=0.0 if map_known is None else map_known,
        map_previous=_mean_ap(per_class, split.previous),
        map_current=_mean_ap(per_class, split.current),
        unknown_recall=len(pairs) / n_future if n_future else None,
        aose=aose(dets, gts, iou_threshold),
        hacc=hacc(pairs, forest),
        wi=wilderness_impact(tp_k, fp_k, fp_u),
        tp_k=tp_k,
        fp_k=fp_k,
        fp_u=fp_u,
        n_future_gt=n_future,
        n_unknown_detected=len(pairs),
        diagnostics=diagnostics,
    )


# -- file handling -------------------------------------------------------------


def _read_jsonl(path: str | Path) -> list[tuple[int, dict]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EvalDataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise EvalDataError(f"{path}:{lineno}: expected a JSON object")
            out.append((lineno, rec))
    return out


def _parse_box(raw, where: str) -> Box:
    try:
        vals = [float(v) for v in raw]
    except (TypeError, ValueError):
        raise EvalDataError(f"{where}: box must be four numbers") from None
    if len(vals) != 4 or not all(np.isfinite(vals)) or vals[2] < 0 or vals[3] < 0:
        raise EvalDataError(f"{where}: invalid box {raw!r}")
    return Box(*vals)


def _lookup(forest: TaxonomyForest, name, where: str) -> int:
    if not isinstance(name, str):
        raise EvalDataError(f"{where}: class name must be a string")
    try:
        return forest.id(name)
    except TaxonomyError:
        raise EvalDataError(f"{where}: unknown class name {name!r}") from None


def load_ground_truth(path, forest: TaxonomyForest) -> list[GroundTruthObject]:
    gts = []
    for lineno, rec in _read_jsonl(path):
        where = f"{path}:{lineno}"
        missing = {"image_id", "class", "box", "status"} - rec.keys()
        if missing:
            raise EvalDataError(f"{where}: missing fields {sorted(missing)}")
        leaf = _lookup(forest, rec["class"], where)
        if not forest.is_leaf(leaf):
            raise EvalDataError(f"{where}: ground-truth class {rec['class']!r} is not a leaf")
        if rec["status"] not in ("known", "future"):
            raise EvalDataError(f"{where}: status must be 'known' or 'future'")
        gts.append(GroundTruthObject(str(rec["image_id"]), leaf,
                                     _parse_box(rec["box"], where), rec["status"]))
    return gts


def load_detections(path, forest: TaxonomyForest) -> list[Detection]:
    dets = []
    for lineno, rec in _read_jsonl(path):
        where = f"{path}:{lineno}"
        missing = {"image_id", "node", "box", "score"} - rec.keys()
        if missing:
            raise EvalDataError(f"{where}: missing fields {sorted(missing)}")
        node = _lookup(forest, rec["node"], where)
        try:
            score = float(rec["score"])
        except (TypeError, ValueError):
            raise EvalDataError(f"{where}: score must be a number") from None
        if not np.isfinite(score) or score < 0:
            raise EvalDataError(f"{where}: score must be finite and >= 0")
        kind = KNOWN if forest.is_leaf(node) else UNKNOWN
        dets.append(Detection(str(rec["image_id"]), node, _parse_box(rec["box"], where),
                              score, kind))
    return dets


def load_split(path, current_task: int | None = None) -> Split:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        tasks = tuple(tuple(str(c) for c in t) for t in raw["tasks"])
        task = int(current_task if current_task is not None else raw.get("current_task", 1))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise EvalDataError(f"{path}: malformed split config ({exc})") from None
    if not 1 <= task <= len(tasks):
        raise EvalDataError(f"{path}: current_task {task} outside 1..{len(tasks)}")
    return Split(tasks, task, str(raw.get("name", "")))


def _top_k_per_image(dets: Sequence[Detection], top_k: int) -> list[Detection]:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    kept: dict[str, int] = {}
    out = []
    for d in _by_score(dets):
        n = kept.get(d.image_id, 0)
        if n < top_k:
            kept[d.image_id] = n + 1
            out.append(d)
    return out


def evaluate(dets_path, gts_path, taxonomy_path, split_path, iou_threshold: float = 0.5,
             top_k: int = 100, current_task: int | None = None) -> EvalReport:
    forest = load_taxonomy(taxonomy_path)
    gts = load_ground_truth(gts_path, forest)
    dets = _top_k_per_image(load_detections(dets_path, forest), top_k)
    split = load_split(split_path, current_task)
    return evaluate_records(dets, gts, forest, split, iou_threshold)


def format_report(report: EvalReport) -> str:
    def pct(v):
        return "n/a" if v is None else f"{100 * v:6.2f}"

    rows = [
        ("mAP (known, both)", pct(report.map_known)),
        ("mAP (previous)", pct(report.map_previous)),
        ("mAP (current)", pct(report.map_current)),
        ("U-R", pct(report.unknown_recall)),
        ("AOSE", str(report.aose)),
        ("HAcc", pct(report.hacc)),
        ("WI", "n/a" if report.wi is None else f"{report.wi:.4f}"),
        ("TP_k / FP_k / FP_u", f"{report.tp_k} / {report.fp_k} / {report.fp_u}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
