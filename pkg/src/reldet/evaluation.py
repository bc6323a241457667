"""Relation evaluation: triplet matching, Recall@K and detector mAP.

Three task settings are supported. "predicate_cls" scores predicate
prediction with ground-truth boxes and labels given, so matching is exact
equality plus predicate agreement. "union_box" requires all three labels to
match and the union boxes to overlap at IoU >= 0.5. "two_boxes" requires all
three labels and both boxes at IoU >= 0.5 each.

Recall@K takes each image's top-K predictions by score (ties broken by input
order) and counts ground truths certified by a one-to-one greedy assignment
in score order. mAP is per-class all-point-interpolated average precision
with greedy max-IoU assignment, averaged over classes present in the ground
truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, ScoredBox, iou, union_box
from .model import ModelConfig, build_pair_input, predict_probs
from .autodiff import Tensor
from .scenes import DetectorNoiseConfig, SceneAnnotation, CategoryVocab, \
    category_difference_vector, enumerate_pairs, oracle_detect

TASK_PREDICATE_CLS = "predicate_cls"
TASK_UNION_BOX = "union_box"
TASK_TWO_BOXES = "two_boxes"
ALL_TASKS = (TASK_PREDICATE_CLS, TASK_UNION_BOX, TASK_TWO_BOXES)

MATCH_IOU = 0.5


@dataclass(frozen=True)
class GroundTruthRelation:
    subject_box: BBox
    subject_cat: int
    predicate: int
    object_box: BBox
    object_cat: int


@dataclass(frozen=True)
class RelationPrediction:
    """(subject, predicate, object) with localization and a ranking score."""

    subject_box: BBox
    subject_cat: int
    predicate: int
    object_box: BBox
    object_cat: int
    score: float

    def __post_init__(self):
        if self.score < 0:
            raise ValueError("relation score must be non-negative")


def match_triplet(pred: RelationPrediction, gt: GroundTruthRelation,
                  setting: str) -> bool:
    """Whether a prediction certifies a ground-truth relation in a setting."""
    if (pred.subject_cat, pred.predicate, pred.object_cat) != \
            (gt.subject_cat, gt.predicate, gt.object_cat):
        return False
    if setting == TASK_PREDICATE_CLS:
        return pred.subject_box == gt.subject_box and pred.object_box == gt.object_box
    if setting == TASK_UNION_BOX:
        return iou(union_box(pred.subject_box, pred.object_box),
                   union_box(gt.subject_box, gt.object_box)) >= MATCH_IOU
    if setting == TASK_TWO_BOXES:
        return iou(pred.subject_box, gt.subject_box) >= MATCH_IOU \
            and iou(pred.object_box, gt.object_box) >= MATCH_IOU
    raise ValueError(f"unknown task setting {setting!r}")


def recall_at_k(predictions_per_image: list[list[RelationPrediction]],
                ground_truths_per_image: list[list[GroundTruthRelation]],
                k: int, setting: str) -> float:
    """Fraction of ground truths certified by a top-k prediction.

    Greedy one-to-one assignment: predictions are visited in descending
    score (input order on ties) and each certifies the first unmatched
    ground truth it matches.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if len(predictions_per_image) != len(ground_truths_per_image):
        raise ValueError("prediction and ground-truth lists must align per image")
    total = sum(len(g) for g in ground_truths_per_image)
    if total == 0:
        raise ValueError("recall is undefined without ground-truth relations")
    recalled = 0
    for preds, gts in zip(predictions_per_image, ground_truths_per_image):
        order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))[:k]
        matched = [False] * len(gts)
        for i in order:
            for j, gt in enumerate(gts):
                if not matched[j] and match_triplet(preds[i], gt, setting):
                    matched[j] = True
                    recalled += 1
                    break
    return recalled / total


def average_precision(tp_flags: list[bool], num_gt: int) -> float:
    """All-point-interpolated AP from score-ordered TP/FP flags."""
    if num_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # Precision envelope: monotone non-increasing from the right.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def detector_map(detections_per_image: list[list[ScoredBox]],
                 gt_objects_per_image: list[list[tuple[int, BBox]]],
                 iou_threshold: float = MATCH_IOU) -> float:
    """Mean AP over classes present in the ground truth.

    Detections are ranked by score with ties broken by (image, input index);
    each is greedily assigned to the unmatched same-class ground-truth box of
    maximal IoU, counting as a true positive at IoU >= threshold.
    """
    classes = sorted({c for gts in gt_objects_per_image for c, _ in gts})
    if not classes:
        raise ValueError("mAP is undefined without ground-truth objects")
    aps = []
    for cls in classes:
        dets = [(img, i, d) for img, dlist in enumerate(detections_per_image)
                for i, d in enumerate(dlist) if d.category == cls]
        dets.sort(key=lambda t: (-t[2].score, t[0], t[1]))
        gt_boxes = [[box for c, box in gts if c == cls]
                    for gts in gt_objects_per_image]
        matched = [[False] * len(b) for b in gt_boxes]
        num_gt = sum(len(b) for b in gt_boxes)
        flags: list[bool] = []
        for img, _, det in dets:
            best, best_iou = -1, 0.0
            for j, box in enumerate(gt_boxes[img]):
                if not matched[img][j]:
                    v = iou(det.box, box)
                    if v > best_iou:
                        best, best_iou = j, v
            if best >= 0 and best_iou >= iou_threshold:
                matched[img][best] = True
                flags.append(True)
            else:
                flags.append(False)
        aps.append(average_precision(flags, num_gt) if num_gt else 0.0)
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class EvalReport:
    """Per-task recalls, detector mAP and evaluation counts."""

    images: int
    gt_relations: int
    recalls: dict[str, dict[int, float]] = field(default_factory=dict)
    detector_map: float | None = None

    def to_text(self) -> str:
        lines = [f"images = {self.images}",
                 f"ground_truth_relations = {self.gt_relations}"]
        for task in ALL_TASKS:
            if task in self.recalls:
                for k in sorted(self.recalls[task]):
                    lines.append(f"{task}.recall@{k} = {self.recalls[task][k]!r}")
        if self.detector_map is not None:
            lines.append(f"detector.map = {self.detector_map!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        fields: dict[str, str] = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition(" = ")
            fields[key] = value
        report = cls(images=int(fields.pop("images")),
                     gt_relations=int(fields.pop("ground_truth_relations")))
        for key, value in fields.items():
            if key == "detector.map":
                report.detector_map = float(value)
            else:
                task, _, k = key.partition(".recall@")
                report.recalls.setdefault(task, {})[int(k)] = float(value)
        return report


def scene_ground_truths(scene: SceneAnnotation) -> list[GroundTruthRelation]:
    return [GroundTruthRelation(scene.objects[s].box, scene.objects[s].category,
                                p, scene.objects[o].box, scene.objects[o].category)
            for s, p, o in scene.relations]


def _predict_scene_pairs(scenes: list[SceneAnnotation],
                         pairs_per_scene: list[list[tuple[ScoredBox, ScoredBox]]],
                         params: dict[str, Tensor], config: ModelConfig,
                         ablate_sil: bool,
                         chunk: int = 256) -> list[list[RelationPrediction]]:
    """Run eval-mode inference over all scenes' pairs in cross-scene batches."""
    flat = [(si, s, o) for si, pairs in enumerate(pairs_per_scene)
            for s, o in pairs]
    out: list[list[RelationPrediction]] = [[] for _ in scenes]
    for start in range(0, len(flat), chunk):
        batch = flat[start:start + chunk]
        xs = np.stack([build_pair_input(scenes[si].pixels, s, o,
                                        config.input_resolution)
                       for si, s, o in batch])
        diffs = None if ablate_sil else \
            np.stack([category_difference_vector(s.category, o.category,
                                                 config.num_categories)
                      for _, s, o in batch])
        probs = predict_probs(xs, diffs, params, config, ablate_sil)
        for (si, s, o), p in zip(batch, probs):
            pred = int(p.argmax())
            out[si].append(RelationPrediction(
                s.box, s.category, pred, o.box, o.category,
                score=s.score * o.score * float(p[pred])))
    return out


def evaluate_dataset(scenes: list[SceneAnnotation], vocab: CategoryVocab,
                     params: dict[str, Tensor], config: ModelConfig,
                     noise: DetectorNoiseConfig,
                     settings: tuple[str, ...] = ALL_TASKS,
                     ks: tuple[int, ...] = (50, 100),
                     ablate_sil: bool = False) -> EvalReport:
    """Evaluate a trained model over annotated scenes.

    predicate_cls forms pairs from ground-truth boxes and labels; the
    detection settings form pairs from oracle detections (score >= 0.1,
    per-scene noise seeds derived from the configured seed). Recalls are
    omitted, not reported as 0/0, when there are no scenes.
    """
    for s in settings:
        if s not in ALL_TASKS:
            raise ValueError(f"unknown task setting {s!r}")
    report = EvalReport(images=len(scenes),
                        gt_relations=sum(len(s.relations) for s in scenes))
    if not scenes or report.gt_relations == 0:
        return report
    gts = [scene_ground_truths(scene) for scene in scenes]

    if TASK_PREDICATE_CLS in settings:
        pairs = [enumerate_pairs([ScoredBox(o.box, o.category, 1.0)
                                  for o in scene.objects]) for scene in scenes]
        preds = _predict_scene_pairs(scenes, pairs, params, config, ablate_sil)
        report.recalls[TASK_PREDICATE_CLS] = {
            k: recall_at_k(preds, gts, k, TASK_PREDICATE_CLS) for k in ks}

    detection_tasks = [s for s in settings if s != TASK_PREDICATE_CLS]
    if detection_tasks:
        detections = [oracle_detect(scene, noise.with_seed(noise.seed + i),
                                    vocab.num_objects)
                      for i, scene in enumerate(scenes)]
        pairs = [enumerate_pairs(d) for d in detections]
        preds = _predict_scene_pairs(scenes, pairs, params, config, ablate_sil)
        for task in detection_tasks:
            report.recalls[task] = {k: recall_at_k(preds, gts, k, task) for k in ks}
        report.detector_map = detector_map(
            detections, [[(o.category, o.box) for o in scene.objects]
                         for scene in scenes])
    return report
