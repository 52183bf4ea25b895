"""Detection AP/recall and person-search mAP / CMC top-1."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from fous.data import box_iou

IOU_THRESHOLD = 0.5


def _envelope_ap(recall, precision):
    """Area under the monotone precision envelope (all-point interpolation)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detection(predictions, ground_truth, iou_threshold=IOU_THRESHOLD):
    """Single-class AP and recall.

    ``predictions`` holds one ``(boxes, scores)`` pair per image and
    ``ground_truth`` one ``(K, 4)`` box array per image.  Predictions are
    matched greedily in descending score order, each ground truth at most once.
    """
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in ground_truth)
    if n_gt == 0:
        raise ValueError("no ground truth")
    entries = []
    for img, (boxes, scores) in enumerate(predictions):
        for b, s in zip(np.asarray(boxes).reshape(-1, 4), np.asarray(scores).reshape(-1)):
            entries.append((float(s), img, b))
    if not entries:
        return 0.0, 0.0
    entries.sort(key=lambda e: -e[0])
    taken = [np.zeros(len(np.asarray(g).reshape(-1, 4)), dtype=bool) for g in ground_truth]
    tp = np.zeros(len(entries))
    for k, (_, img, box) in enumerate(entries):
        gt = np.asarray(ground_truth[img]).reshape(-1, 4)
        if not len(gt):
            continue
        ious = box_iou(box, gt)[0]
        ious[taken[img]] = -1.0
        best = int(ious.argmax())
        if ious[best] >= iou_threshold:
            taken[img][best] = True
            tp[k] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    return _envelope_ap(recall, precision), float(ctp[-1] / n_gt)


@dataclass
class GalleryImage:
    boxes: np.ndarray
    features: np.ndarray
    gt_boxes: np.ndarray
    gt_ids: np.ndarray


def ranking_average_precision(labels, n_positive):
    """Mean of precision at each hit, normalised by all positives (missed ones count as zero)."""
    labels = np.asarray(labels, dtype=float)
    if n_positive == 0:
        return 0.0
    hits = np.flatnonzero(labels)
    return float(np.sum(np.arange(1, len(hits) + 1) / (hits + 1)) / n_positive)


def search_query(query_feature, query_id, gallery, skip=None, iou_threshold=IOU_THRESHOLD):
    """Rank all gallery detections for one query.

    In each gallery image containing the identity, the most similar detection
    overlapping its box by ``iou_threshold`` is the single positive.  Returns
    ``(ap, top1_hit, n_positive)``.
    """
    sims, labels, n_pos = [], [], 0
    for g, img in enumerate(gallery):
        if g == skip:
            continue
        gt_ids = np.asarray(img.gt_ids)
        has_gt = bool((gt_ids == query_id).any())
        n_pos += has_gt
        if not len(img.boxes):
            continue
        s = np.asarray(img.features) @ query_feature
        lab = np.zeros(len(s))
        if has_gt:
            gt_box = np.asarray(img.gt_boxes).reshape(-1, 4)[np.flatnonzero(gt_ids == query_id)[0]]
            match = box_iou(img.boxes, gt_box)[:, 0] >= iou_threshold
            if match.any():
                cand = np.flatnonzero(match)
                lab[cand[np.argmax(s[cand])]] = 1
        sims.append(s)
        labels.append(lab)
    if n_pos == 0:
        return None
    if sims:
        sims, labels = np.concatenate(sims), np.concatenate(labels)
        order = np.argsort(-sims, kind="stable")
        ranked = labels[order]
    else:
        ranked = np.zeros(0)
    ap = ranking_average_precision(ranked, n_pos)
    top1 = bool(len(ranked) and ranked[0] == 1)
    return ap, top1, n_pos


@dataclass
class EvalReport:
    map: float
    top1: float
    det_ap: float
    det_recall: float
    n_queries: int = 0
    n_excluded: int = 0
    per_query: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def person_search_metrics(queries, gallery, det_ap=0.0, det_recall=0.0):
    """mAP and top-1 over ``queries`` = ``[(feature, identity, own_gallery_index_or_None), ...]``.

    Queries whose identity never appears in the remaining gallery are
    excluded and counted.
    """
    aps, tops, details, excluded = [], [], [], 0
    for qi, (feat, pid, own) in enumerate(queries):
        res = search_query(np.asarray(feat), pid, gallery, skip=own)
        if res is None:
            excluded += 1
            continue
        ap, top1, n_pos = res
        aps.append(ap)
        tops.append(top1)
        details.append({"query": qi, "identity": int(pid), "ap": ap, "top1": top1, "n_positive": n_pos})
    return EvalReport(
        map=float(np.mean(aps)) if aps else 0.0,
        top1=float(np.mean(tops)) if tops else 0.0,
        det_ap=float(det_ap),
        det_recall=float(det_recall),
        n_queries=len(aps),
        n_excluded=excluded,
        per_query=details,
    )


def first_occurrence_queries(scenes):
    """``(scene_index, box, identity)`` for the first appearance of every identity."""
    seen, out = set(), []
    for si, scene in enumerate(scenes):
        for box, pid in zip(scene.boxes, scene.identities):
            if int(pid) not in seen:
                seen.add(int(pid))
                out.append((si, box, int(pid)))
    return out


def evaluate_person_search(net, scenes, score_threshold=0.5, embed_net=None):
    """Full protocol on annotated scenes: detect, embed, then rank per query.

    ``embed_net`` (defaults to ``net``) produces the embeddings while ``net``
    supplies detections, so alternative embeddings can be scored on the same boxes.
    """
    from fous.model import detect, embed_boxes

    if not scenes:
        raise ValueError("no ground truth")
    embed_net = embed_net or net
    detections = detect(net, scenes, score_threshold)
    det_ap, det_recall = evaluate_detection(detections, [s.boxes for s in scenes])
    feats = embed_boxes(embed_net, scenes, [b for b, _ in detections])
    gallery, offset = [], 0
    for scene, (boxes, _) in zip(scenes, detections):
        gallery.append(GalleryImage(boxes, feats[offset:offset + len(boxes)], scene.boxes, scene.identities))
        offset += len(boxes)
    qs = first_occurrence_queries(scenes)
    per_scene = [[] for _ in scenes]
    for si, box, _ in qs:
        per_scene[si].append(box)
    # queries are already in scene order, matching embed_boxes' concatenation
    qfeat = embed_boxes(embed_net, scenes, per_scene)
    queries = [(qfeat[k], pid, si) for k, (si, _, pid) in enumerate(qs)]
    return person_search_metrics(queries, gallery, det_ap, det_recall)
